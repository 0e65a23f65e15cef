import csv
import json
import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st

from edgehand.pso import FrameOutcome
from edgehand.tracker import (
    FrameClock,
    LatestFrameMailbox,
    TrackRecord,
    frames_to_skip,
    track_sequence,
)


class StubDispatcher:
    """Returns the ground truth (or a fixed pose) with a scripted loop time."""

    def __init__(self, truth, loop_ms=10.0, scores=None):
        self.truth = truth
        self.loop_ms = loop_ms
        self.scores = scores
        self.calls = []

    def optimize(self, center, d_obs, frame_index, frames_skipped):
        self.calls.append((frame_index, frames_skipped))
        loop = self.loop_ms(frame_index) if callable(self.loop_ms) else self.loop_ms
        score = self.scores[frame_index] if self.scores is not None else 0.0
        return FrameOutcome(self.truth[frame_index].copy(), score, loop, executors=("local",))


def drop_oldest_oracle(timestamps, loops):
    """Event-by-event reference: after each finish take the newest arrived frame."""
    consumed, now, i = [], timestamps[0], 0
    while i < len(timestamps):
        start = max(now, timestamps[i])
        now = start + loops[i]
        consumed.append(i)
        arrived = [j for j, t in enumerate(timestamps) if t <= now + 1e-9 and j > i]
        i = arrived[-1] if arrived else i + 1
    return consumed


def test_frames_to_skip_examples():
    period = 1000.0 / 30
    assert frames_to_skip(33.3, period) == 0
    assert frames_to_skip(66.7, period) == 1
    assert frames_to_skip(150.0, period) == 4
    assert frames_to_skip(10.0, period) == 0
    assert frames_to_skip(2 * period, period) == 1
    with pytest.raises(ValueError):
        frames_to_skip(0.0, period)


def test_frame_clock():
    c = FrameClock(30)
    assert c.frame_period == pytest.approx(33.333333)
    np.testing.assert_allclose(c.timestamps(3), [0, 1000 / 30, 2000 / 30])
    with pytest.raises(ValueError):
        FrameClock(0)


@pytest.mark.parametrize("loop", [10.0, 33.3, 40.0, 66.7, 83.3, 150.0])
def test_constant_loop_schedule_matches_oracle(short_sequence, settings, loop):
    seq = short_sequence
    stub = StubDispatcher(seq.ground_truth, loop)
    rec = track_sequence(seq.frames, seq.ground_truth[0], settings, stub, ground_truth=seq.ground_truth)
    consumed = [f.frame_index for f in rec.consumed]
    assert consumed == drop_oldest_oracle(seq.timestamps_ms, [loop] * len(seq.frames))
    assert rec.frames_skipped == len(seq.frames) - len(consumed)
    # the skip count handed to the optimizer is the gap since the last consumed frame
    assert [c[1] for c in stub.calls] == [0] + [b - a - 1 for a, b in zip(consumed, consumed[1:])]
    assert rec.mean_fingertip_error_m == 0.0
    if loop <= 1000.0 / 30:
        assert rec.achieved_fps == pytest.approx(30.0)


@hsettings(max_examples=40, deadline=None)
@given(st.lists(st.floats(1.0, 200.0), min_size=12, max_size=12))
def test_variable_loops_match_oracle_and_respect_the_source_rate(loops):
    truth = np.tile(np.r_[0, 0, 0.4, 1, 0, 0, 0, np.zeros(20)], (12, 1))
    from edgehand.config import Settings
    from edgehand.kinematics import DepthMap
    frames = [DepthMap.zeros(2, 2)] * 12
    rec = track_sequence(frames, truth[0], Settings(), StubDispatcher(truth, lambda i: loops[i]))
    ts = FrameClock(30).timestamps(12)
    assert [f.frame_index for f in rec.consumed] == drop_oldest_oracle(ts, loops)
    assert 0 < rec.achieved_fps <= 30.0 + 1e-9
    assert rec.steady_fps() <= 30.0
    assert all(f.loop_time_ms > 0 for f in rec.consumed)
    starts = [f.start_ms for f in rec.consumed]
    finishes = [f.finish_ms for f in rec.consumed]
    assert all(s >= f - 1e-9 for s, f in zip(starts[1:], finishes))  # serial: no overlap


def test_fps_metrics(short_sequence, settings):
    seq = short_sequence
    rec = track_sequence(seq.frames, seq.ground_truth[0], settings,
                         StubDispatcher(seq.ground_truth, 25.0))
    assert rec.steady_fps(5) == 30.0
    assert rec.processing_fps(5) == pytest.approx(40.0)
    slow = track_sequence(seq.frames, seq.ground_truth[0], settings, StubDispatcher(seq.ground_truth, 100.0))
    assert slow.steady_fps(1) == pytest.approx(10.0)
    # frames 0, 3, 6, 9 and then the last one (11), ending at 500 ms
    assert [f.frame_index for f in slow.consumed] == [0, 3, 6, 9, 11]
    assert slow.achieved_fps == pytest.approx(5 / 0.5)


def test_fixed_loop_time_overrides_the_dispatcher(short_sequence, settings):
    seq = short_sequence
    rec = track_sequence(seq.frames, seq.ground_truth[0], settings, StubDispatcher(seq.ground_truth, 500.0),
                         loop_time_ms=1000 / 30)
    assert rec.frames_skipped == 0
    rec2 = track_sequence(seq.frames, seq.ground_truth[0], settings, StubDispatcher(seq.ground_truth, 1.0),
                          loop_time_ms=2000 / 30)
    assert [f.frame_index for f in rec2.consumed] == [0, 2, 4, 6, 8, 10, 11]


def test_track_loss_flagged_after_five_bad_frames(short_sequence, settings):
    seq = short_sequence
    bad = 0.8 * settings.objective.clamp_threshold + 0.01
    scores = [0.0, bad, bad, bad, bad, bad, bad, 0.0, bad, bad, bad, bad]
    rec = track_sequence(seq.frames, seq.ground_truth[0], settings, StubDispatcher(seq.ground_truth, 10.0, scores))
    assert rec.track_loss_frames == [5, 6]


def test_pose_chain_feeds_previous_estimate(short_sequence, settings):
    seq = short_sequence
    seen = []

    class Recorder(StubDispatcher):
        def optimize(self, center, d_obs, frame_index, frames_skipped):
            seen.append(center.copy())
            return super().optimize(center, d_obs, frame_index, frames_skipped)

    track_sequence(seq.frames, seq.ground_truth[0], settings, Recorder(seq.ground_truth, 10.0))
    for prev, center in zip(seq.ground_truth, seen[1:]):
        np.testing.assert_allclose(center, prev, atol=1e-6)  # float32 wire precision


def test_real_tracking_with_default_dispatcher(short_sequence, settings):
    seq = short_sequence
    rec = track_sequence(seq.frames, seq.ground_truth[0], settings, ground_truth=seq.ground_truth,
                         loop_time_ms=1000 / 30)
    assert len(rec.consumed) == 12
    assert rec.mean_fingertip_error_m < 0.01
    again = track_sequence(seq.frames, seq.ground_truth[0], settings, ground_truth=seq.ground_truth,
                           loop_time_ms=1000 / 30)
    assert np.array_equal(rec.poses, again.poses)


def test_bad_timestamps(short_sequence, settings):
    with pytest.raises(ValueError):
        track_sequence(short_sequence.frames, short_sequence.ground_truth[0], settings,
                       timestamps=[0.0] * 12)


def test_empty_sequence(settings):
    rec = track_sequence([], np.zeros(27), settings)
    assert rec.frames == [] and rec.achieved_fps == 0.0 and math.isnan(rec.mean_fingertip_error_m)


def test_outputs(tmp_path, short_sequence, settings):
    seq = short_sequence
    rec = track_sequence(seq.frames, seq.ground_truth[0], settings, StubDispatcher(seq.ground_truth, 50.0),
                         ground_truth=seq.ground_truth)
    rec.to_csv(tmp_path / "all.csv")
    rec.to_csv(tmp_path / "used.csv", consumed_only=True)
    rows = list(csv.reader(open(tmp_path / "all.csv")))
    assert rows[0] == TrackRecord.csv_header() and len(rows) == 13
    assert len(list(csv.reader(open(tmp_path / "used.csv")))) == 1 + len(rec.consumed)
    rec.to_json(tmp_path / "r.json")
    summary = json.loads((tmp_path / "r.json").read_text())
    assert summary["frames"] == 12 and summary["frames_skipped"] == rec.frames_skipped


def test_mailbox_keeps_only_the_newest():
    box = LatestFrameMailbox()
    for i in range(5):
        box.put(i)
    assert box.take() == 4 and box.overwritten == 4
    assert box.take(timeout=0.01) is None
    got = []
    t = threading.Thread(target=lambda: got.append(box.take(timeout=5)))
    t.start()
    box.put("x")
    t.join(5)
    assert got == ["x"]
    box.close()
    assert box.take() is None
