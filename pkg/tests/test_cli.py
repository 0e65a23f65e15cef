import json
import signal
import socket
import subprocess
import sys
import time
from pathlib import Path

import pytest

from edgehand.cli import CliConfig, main, read_sequence
from edgehand.config import ConfigError
from edgehand.transport import codec
from edgehand.transport.channel import SocketChannel
from edgehand.transport.codec import Message, MessageType

CONFIGS = Path(__file__).parent.parent / "configs"


@pytest.fixture(scope="module")
def seq_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.json"
    spec.write_text(json.dumps({"frame_count": 8}))
    assert main(["gen", "--spec", str(spec), "--out", str(root / "seq")]) == 0
    return root / "seq"


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_gen_writes_wire_encoded_frames(seq_dir, settings):
    frames, truth, ts, fps = read_sequence(seq_dir)
    assert len(frames) == 8 and truth.shape == (8, 27) and fps == 30.0
    raw = (seq_dir / "frame_00003.depth").read_bytes()
    assert len(raw) == 4 + 2 * 128 * 128
    mm, _ = codec.decode_depth(raw)
    assert codec.dequantize_depth(mm) == frames[3]


def test_gen_is_reproducible(tmp_path, seq_dir):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"frame_count": 8}))
    main(["gen", "--spec", str(spec), "--out", str(tmp_path / "again")])
    for f in seq_dir.iterdir():
        assert (tmp_path / "again" / f.name).read_bytes() == f.read_bytes()


def test_track_local_and_loopback_give_identical_poses(tmp_path, seq_dir, capsys):
    assert main(["track", "--input", str(seq_dir), "--out", str(tmp_path / "local")]) == 0
    assert "consumed 8/8" in capsys.readouterr().out
    assert main(["track", "--input", str(seq_dir), "--remote", "loopback", "--policy", "forced",
                 "--granularity", "multi_step", "--out", str(tmp_path / "remote")]) == 0
    local = (tmp_path / "local" / "poses.csv").read_bytes()
    assert local == (tmp_path / "remote" / "poses.csv").read_bytes()
    record = json.loads((tmp_path / "local" / "record.json").read_text())
    assert record["mean_fingertip_error_m"] < 0.01
    assert main(["track", "--input", str(seq_dir), "--seed", "7", "--out", str(tmp_path / "s7")]) == 0
    assert (tmp_path / "s7" / "poses.csv").read_bytes() != local


def test_track_virtual_clock(tmp_path, seq_dir):
    assert main(["track", "--input", str(seq_dir), "--remote", "loopback", "--policy", "forced",
                 "--clock", "virtual", "--config", str(CONFIGS / "tracker.json"), "--out", str(tmp_path)]) == 0
    record = json.loads((tmp_path / "record.json").read_text())
    assert record["frames_skipped"] == 0 and 24 < record["mean_loop_ms"] < 26


def test_exit_codes(tmp_path, seq_dir):
    assert main(["track", "--input", str(seq_dir), "--policy", "forced", "--out", str(tmp_path)]) == 2
    assert main(["track", "--input", str(tmp_path / "missing"), "--out", str(tmp_path)]) == 4
    assert main(["track", "--input", str(seq_dir), "--remote", f"127.0.0.1:{free_port()}", "--policy", "forced",
                 "--out", str(tmp_path)]) == 3
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"pso": {"particles": 3}}))
    assert main(["track", "--input", str(seq_dir), "--config", str(bad), "--out", str(tmp_path)]) == 2
    bad.write_text(json.dumps({"colour": {}}))
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "g")]) == 2
    bad.write_text("{not json")
    assert main(["bench", "--matrix", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["bench", "--frames", "2", "--wall-clock", "--out", str(tmp_path / "w")]) == 2


def test_cli_config_overrides():
    cfg = CliConfig.load(str(CONFIGS / "tracker.json"), seed=5, mode="forced")
    assert cfg.settings.pso.seed == 5 and cfg.policy.mode == "forced"
    assert cfg.network.profile == "ethernet"
    with pytest.raises(ConfigError):
        CliConfig.load(None, mode="sideways")


def test_bench_outputs_are_reproducible(tmp_path, capsys):
    matrix = tmp_path / "m.json"
    matrix.write_text(json.dumps({"sequence": {"frame_count": 6}, "scenarios": [
        {"name": "local", "policy": "local_only"},
        {"name": "forced", "policy": "forced", "network": "wifi"}]}))
    assert main(["bench", "--matrix", str(matrix), "--out", str(tmp_path / "a")]) == 0
    assert "forced/single_step" in capsys.readouterr().out
    assert main(["bench", "--matrix", str(matrix), "--out", str(tmp_path / "b")]) == 0
    for name in ("report.json", "frames.csv", "table.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def wait_for_port(port, timeout=30.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        try:
            socket.create_connection(("127.0.0.1", port), timeout=0.5).close()
            return
        except OSError:
            time.sleep(0.1)
    raise TimeoutError(port)


@pytest.mark.parametrize("sig", [signal.SIGINT, signal.SIGTERM])
def test_serve_answers_ping_and_shuts_down_cleanly(tmp_path, seq_dir, sig):
    port = free_port()
    proc = subprocess.Popen([sys.executable, "-m", "edgehand", "serve", "--listen", f"127.0.0.1:{port}"],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE)
    try:
        wait_for_port(port)
        ch = SocketChannel("127.0.0.1", port)
        reply, _, _ = ch.request(Message(MessageType.PING))
        assert reply.type == MessageType.PONG
        ch.close()
        if sig == signal.SIGINT:
            out = tmp_path / "remote"
            assert main(["track", "--input", str(seq_dir), "--remote", f"127.0.0.1:{port}", "--policy", "forced",
                         "--out", str(out)]) == 0
            bad = tmp_path / "cfg.json"
            bad.write_text(json.dumps({"objective": {"clamp_threshold": 0.1}}))
            assert main(["track", "--input", str(seq_dir), "--remote", f"127.0.0.1:{port}", "--policy", "forced",
                         "--config", str(bad), "--out", str(out)]) == 3
    finally:
        proc.send_signal(sig)
        assert proc.wait(timeout=20) == 0
