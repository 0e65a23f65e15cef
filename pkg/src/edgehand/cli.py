"""``edgehand`` command line: serve, track, gen, bench."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import signal
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .bench import BenchConfig, ScenarioConfig, SequenceError, SequenceSpec, emit_report, generate_sequence, load_matrix, run_matrix
from .config import ConfigError, Settings, check_keys, from_dict, load_json
from .kinematics import DepthMap
from .offload import (
    ConfigurationError,
    Dispatcher,
    LocalExecutor,
    Policy,
    PolicyConfig,
    RegistrationRefused,
    RemoteExecutor,
    TaskError,
)
from .tracker import FrameClock, _fmt, track_sequence
from .transport import codec
from .transport.channel import LoopbackChannel, SocketChannel, TransportError, parse_address
from .transport.server import serve as serve_forever
from .transport.simnet import SimulatedLink, get_profile

log = logging.getLogger("edgehand")

EXIT_OK, EXIT_CONFIG, EXIT_TRANSPORT, EXIT_IO = 0, 2, 3, 4

CONFIG_SECTIONS = ("kinematics", "objective", "pso", "policy", "network", "bench")
GROUND_TRUTH = "ground_truth.json"
FRAME_NAME = "frame_{:05d}.depth"


@dataclasses.dataclass(frozen=True)
class NetworkConfig:
    profile: str = "ethernet"

    def __post_init__(self):
        get_profile(self.profile)


@dataclasses.dataclass(frozen=True)
class CliConfig:
    settings: Settings
    policy: PolicyConfig
    network: NetworkConfig
    bench: BenchConfig

    @classmethod
    def load(cls, path: Optional[str], seed: Optional[int] = None, **policy_overrides) -> "CliConfig":
        data = load_json(path) if path else {}
        check_keys(data, CONFIG_SECTIONS, "config")
        settings = Settings.from_sections({k: data[k] for k in ("kinematics", "objective", "pso") if k in data})
        if seed is not None:
            settings = settings.with_seed(seed)
        policy_data = dict(data.get("policy") or {})
        policy_data.update({k: v for k, v in policy_overrides.items() if v is not None})
        return cls(
            settings,
            from_dict(PolicyConfig, policy_data, "policy"),
            from_dict(NetworkConfig, data.get("network"), "network"),
            from_dict(BenchConfig, data.get("bench"), "bench"),
        )


# -- sequence storage --------------------------------------------------------

def write_sequence(seq, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        (out / FRAME_NAME.format(i)).write_bytes(codec.encode_depth(codec.quantize_depth(frame)))
    meta = {
        "spec": dataclasses.asdict(seq.spec),
        "fps": seq.spec.fps,
        "timestamps_ms": [float(t) for t in seq.timestamps_ms],
        "poses": [[float(v) for v in pose] for pose in seq.ground_truth],
    }
    (out / GROUND_TRUTH).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return out


def read_sequence(seq_dir) -> tuple[list, np.ndarray, np.ndarray, float]:
    """Frames, ground-truth poses, timestamps and source fps of a stored sequence."""
    root = Path(seq_dir)
    try:
        meta = json.loads((root / GROUND_TRUTH).read_text())
        poses = np.asarray(meta["poses"], dtype=np.float64).reshape(-1, 27)
        frames = []
        for i in range(len(poses)):
            mm, _ = codec.decode_depth((root / FRAME_NAME.format(i)).read_bytes())
            frames.append(codec.dequantize_depth(mm))
        return frames, poses, np.asarray(meta["timestamps_ms"], dtype=np.float64), float(meta["fps"])
    except (KeyError, ValueError, codec.ProtocolError) as exc:
        raise OSError(f"{root}: unreadable sequence: {exc}") from exc


# -- subcommands -------------------------------------------------------------

def cmd_serve(args) -> int:
    cfg = CliConfig.load(args.config)
    host, port = parse_address(args.listen)

    def _terminate(signum, frame):
        raise KeyboardInterrupt

    signal.signal(signal.SIGTERM, _terminate)
    serve_forever((host, port), cfg.settings)
    return EXIT_OK


def _build_dispatcher(args, cfg: CliConfig) -> tuple[Dispatcher, Optional[object]]:
    virtual = args.clock == "virtual"
    models = cfg.bench.exec_models
    local = LocalExecutor(cfg.settings, models["laptop"] if virtual else None)
    remote, channel = None, None
    if args.remote != "none":
        channel = LoopbackChannel(cfg.settings) if args.remote == "loopback" else SocketChannel(*parse_address(args.remote))
        link = SimulatedLink(get_profile(cfg.network.profile)) if virtual else None
        remote = RemoteExecutor(channel, link, models["server"] if virtual else None, cfg.policy.timeout_ms)
    elif cfg.policy.policy == Policy.FORCED:
        raise ConfigurationError("forced offloading needs --remote host:port")
    return Dispatcher(cfg.settings, cfg.policy, args.granularity, local, remote, cfg.bench.overhead_ms), channel


def cmd_track(args) -> int:
    policy = args.policy or ("local_only" if args.remote == "none" else None)
    cfg = CliConfig.load(args.config, args.seed, mode=policy)
    frames, truth, timestamps, fps = read_sequence(args.input)
    clock = FrameClock(fps)
    dispatcher, channel = _build_dispatcher(args, cfg)
    try:
        record = track_sequence(
            [DepthMap(f.samples) for f in frames], truth[0], cfg.settings, dispatcher, clock, timestamps, truth,
            loop_time_ms=clock.frame_period if args.clock == "full" else None,
            wall_clock=args.clock == "wall",
        )
    finally:
        if channel is not None:
            channel.close()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    record.to_json(out / "record.json")
    record.to_csv(out / "frames.csv")
    with open(out / "poses.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_index"] + [f"h{i}" for i in range(27)])
        for f in record.consumed:
            writer.writerow([f.frame_index] + [_fmt(v) for v in f.pose])
    summary = record.summary(cfg.bench.warmup_frames)
    print(f"consumed {summary['consumed_frames']}/{summary['frames']} frames, "
          f"steady {summary['steady_fps']:.2f} fps, fingertip error {summary['mean_fingertip_error_m'] * 1000:.2f} mm")
    return EXIT_OK


def cmd_gen(args) -> int:
    data = load_json(args.spec) if args.spec else {}
    spec = from_dict(SequenceSpec, data, "sequence")
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    cfg = CliConfig.load(args.config)
    seq = generate_sequence(spec, cfg.settings)
    write_sequence(seq, args.out)
    print(f"wrote {spec.frame_count} frames to {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    data = load_json(args.matrix) if args.matrix else {}
    settings, spec, bench, scenarios = load_matrix(data)
    if args.seed is not None:
        settings = settings.with_seed(args.seed)
    if args.frames is not None:
        spec = dataclasses.replace(spec, frame_count=args.frames)
    if args.wall_clock:
        scenarios = [_wall(s, args.remote) for s in scenarios]
    report = run_matrix(scenarios, generate_sequence(spec, settings), settings, bench)
    paths = emit_report(report, args.out)
    sys.stdout.write(report.table())
    log.info("report written to %s", paths["json"].parent)
    return EXIT_OK


def _wall(s: ScenarioConfig, remote: Optional[str]) -> ScenarioConfig:
    if s.policy != "local_only" and not remote:
        raise ConfigurationError(f"--wall-clock scenario {s.name!r} needs --remote host:port")
    return dataclasses.replace(s, clock="wall", remote_address=remote if s.policy != "local_only" else None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgehand", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run a remote step executor")
    p.add_argument("--listen", default="127.0.0.1:7878", help="host:port to bind")
    p.add_argument("--config", help="JSON config file")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("track", help="track a stored sequence")
    p.add_argument("--input", required=True, help="sequence directory written by 'gen'")
    p.add_argument("--remote", default="none", help="host:port, 'loopback' (in-process) or 'none'")
    p.add_argument("--policy", choices=[m.value for m in Policy])
    p.add_argument("--granularity", choices=["single_step", "multi_step"], default="single_step")
    p.add_argument("--clock", choices=["full", "virtual", "wall"], default="full",
                   help="full: every frame gets one period; virtual: modeled times; wall: measured times")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("gen", help="write a synthetic sequence")
    p.add_argument("--spec", help="JSON sequence spec")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("bench", help="run the scenario matrix")
    p.add_argument("--matrix", help="JSON matrix config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--frames", type=int, help="override the sequence length")
    p.add_argument("--wall-clock", action="store_true", help="measure real time against --remote")
    p.add_argument("--remote", help="host:port of a running 'edgehand serve'")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ConfigurationError, SequenceError, ValueError) as exc:
        print(f"edgehand: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TransportError, RegistrationRefused, TaskError, codec.ProtocolError, ConnectionError) as exc:
        print(f"edgehand: transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except OSError as exc:
        print(f"edgehand: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
