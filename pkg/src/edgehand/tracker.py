"""Serial tracking loop over a timestamped frame sequence.

Frame t+1 is always optimized around the estimate for frame t, so frames that
arrive while a frame is being processed cannot be worked on in parallel. When
the loop finishes, the tracker takes the most recent frame that has arrived
and drops the older ones.
"""

from __future__ import annotations

import csv
import json
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import Settings
from .kinematics import DepthMap, fingertips
from .offload import Dispatcher
from .pso import search_extent_scale  # noqa: F401  (part of this module's surface)
from .transport.codec import wire_depth, wire_pose

# loop times within this fraction of a frame period count as landing on it
SKIP_TOLERANCE = 0.01
TRACK_LOSS_FRACTION = 0.8
TRACK_LOSS_RUN = 5


@dataclass(frozen=True)
class FrameClock:
    source_fps: float = 30.0

    def __post_init__(self):
        if not self.source_fps > 0:
            raise ValueError("source_fps must be positive")

    @property
    def frame_period(self) -> float:
        return 1000.0 / self.source_fps

    def timestamps(self, count: int) -> np.ndarray:
        return np.arange(count) * self.frame_period


def frames_to_skip(loop_time_ms: float, frame_period_ms: float) -> int:
    """Frames that arrive while one loop iteration runs and are never processed."""
    if loop_time_ms <= 0 or frame_period_ms <= 0:
        raise ValueError("loop time and frame period must be positive")
    periods = loop_time_ms / frame_period_ms
    return max(0, math.ceil(periods - SKIP_TOLERANCE) - 1)


@dataclass
class FrameRecord:
    frame_index: int
    timestamp_ms: float
    consumed: bool
    skipped_before: int = 0
    start_ms: float = float("nan")
    finish_ms: float = float("nan")
    loop_time_ms: float = 0.0
    score: float = float("nan")
    pose: Optional[np.ndarray] = None
    fingertip_error_m: float = float("nan")
    parameter_error: float = float("nan")
    round_trips: int = 0
    bytes_transferred: int = 0
    executors: str = ""


@dataclass
class TrackRecord:
    source_fps: float
    frames: list = field(default_factory=list)
    wall_time_ms: float = 0.0
    track_loss_frames: list = field(default_factory=list)
    events: list = field(default_factory=list)

    @property
    def consumed(self) -> list:
        return [f for f in self.frames if f.consumed]

    @property
    def frames_skipped(self) -> int:
        return sum(not f.consumed for f in self.frames)

    @property
    def achieved_fps(self) -> float:
        if not self.wall_time_ms:
            return 0.0
        return float(len(self.consumed) / (self.wall_time_ms / 1000.0))

    def processing_fps(self, warmup: int = 5) -> float:
        """Loop iterations per second after ``warmup`` consumed frames, not capped by the source.

        Short runs that never leave the warm-up are measured over every consumed frame.
        """
        consumed = self.consumed
        loops = [f.loop_time_ms for f in (consumed[warmup:] if len(consumed) > warmup else consumed)]
        total = sum(loops)
        if not loops or total <= 0:
            return math.inf
        return 1000.0 * len(loops) / total

    def steady_fps(self, warmup: int = 5) -> float:
        """Processing rate after warm-up, capped by the source rate."""
        return min(self.source_fps, self.processing_fps(warmup))

    @property
    def mean_loop_ms(self) -> float:
        loops = [f.loop_time_ms for f in self.consumed]
        return float(np.mean(loops)) if loops else 0.0

    def _mean(self, attr: str) -> float:
        values = [getattr(f, attr) for f in self.consumed if not math.isnan(getattr(f, attr))]
        return float(np.mean(values)) if values else float("nan")

    @property
    def mean_fingertip_error_m(self) -> float:
        return self._mean("fingertip_error_m")

    @property
    def mean_parameter_error(self) -> float:
        return self._mean("parameter_error")

    @property
    def poses(self) -> np.ndarray:
        return np.array([f.pose for f in self.consumed])

    def summary(self, warmup: int = 5) -> dict:
        return {
            "source_fps": self.source_fps,
            "frames": len(self.frames),
            "consumed_frames": len(self.consumed),
            "frames_skipped": self.frames_skipped,
            "achieved_fps": self.achieved_fps,
            "steady_fps": self.steady_fps(warmup),
            "processing_fps": self.processing_fps(warmup),
            "mean_loop_ms": self.mean_loop_ms,
            "mean_fingertip_error_m": self.mean_fingertip_error_m,
            "mean_parameter_error": self.mean_parameter_error,
            "round_trips": sum(f.round_trips for f in self.frames),
            "bytes_transferred": sum(f.bytes_transferred for f in self.frames),
            "track_loss_frames": list(self.track_loss_frames),
        }

    CSV_FIELDS = ("frame_index", "timestamp_ms", "consumed", "skipped_before", "start_ms", "finish_ms",
                  "loop_time_ms", "score", "fingertip_error_m", "round_trips", "bytes_transferred", "executors")

    def csv_rows(self, consumed_only: bool = False):
        for f in self.frames:
            if consumed_only and not f.consumed:
                continue
            row = [getattr(f, name) for name in self.CSV_FIELDS]
            row[2] = int(f.consumed)
            pose = f.pose if f.pose is not None else np.full(27, np.nan)
            yield [_fmt(v) for v in row] + [_fmt(v) for v in pose]

    @classmethod
    def csv_header(cls) -> list:
        return list(cls.CSV_FIELDS) + [f"h{i}" for i in range(27)]

    def to_csv(self, path, consumed_only: bool = False) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.csv_header())
            writer.writerows(self.csv_rows(consumed_only))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(_jsonable(self.summary()), indent=2, sort_keys=True) + "\n")


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _fingertip_error(estimate, truth, settings: Settings) -> float:
    diff = fingertips(estimate, settings.geometry) - fingertips(truth, settings.geometry)
    return float(np.mean(np.linalg.norm(diff, axis=1)))


def _parameter_error(estimate, truth) -> float:
    est = np.array(estimate, dtype=np.float64)
    if np.dot(est[3:7], truth[3:7]) < 0:
        est[3:7] = -est[3:7]
    return float(np.mean(np.abs(est - truth)))


def track_sequence(frames: Sequence[DepthMap], h0, settings: Settings, dispatcher: Optional[Dispatcher] = None,
                   clock: FrameClock = FrameClock(), timestamps: Optional[Sequence[float]] = None,
                   ground_truth: Optional[Sequence] = None, loop_time_ms: Optional[float] = None,
                   wall_clock: bool = False) -> TrackRecord:
    """Track ``frames`` starting from ``h0``.

    Time is simulated from the frame timestamps. Each iteration's loop time is
    ``loop_time_ms`` when given, otherwise the measured duration
    (``wall_clock``) or the dispatcher's modeled duration.
    """
    n = len(frames)
    ts = np.asarray(clock.timestamps(n) if timestamps is None else timestamps, dtype=np.float64)
    if len(ts) != n or np.any(np.diff(ts) <= 0):
        raise ValueError("timestamps must be strictly increasing, one per frame")
    dispatcher = dispatcher or Dispatcher(settings)
    record = TrackRecord(clock.source_fps)
    records = [FrameRecord(i, float(ts[i]), False) for i in range(n)]
    record.frames = records
    if n == 0:
        return record

    h = np.asarray(h0, dtype=np.float64)
    threshold = TRACK_LOSS_FRACTION * settings.objective.clamp_threshold
    bad_run = 0
    now = ts[0]
    i = 0
    last = -1
    while i < n:
        skipped = 0 if last < 0 else i - last - 1
        start = max(now, ts[i])
        record.events.append(("start", i, start))
        t0 = time.perf_counter()
        outcome = dispatcher.optimize(wire_pose(h), wire_depth(frames[i]), i, skipped)
        measured = (time.perf_counter() - t0) * 1000.0
        if loop_time_ms is not None:
            loop = loop_time_ms
        elif wall_clock:
            loop = measured
        else:
            loop = outcome.loop_ms
        finish = start + loop
        record.events.append(("finish", i, finish))

        fr = records[i]
        fr.consumed = True
        fr.skipped_before = skipped
        fr.start_ms, fr.finish_ms, fr.loop_time_ms = start, finish, loop
        fr.score = outcome.score
        fr.pose = outcome.pose
        fr.round_trips = outcome.round_trips
        fr.bytes_transferred = outcome.bytes_transferred
        fr.executors = "".join("R" if e == "remote" else "L" for e in outcome.executors)
        if ground_truth is not None:
            truth = np.asarray(ground_truth[i], dtype=np.float64)
            fr.fingertip_error_m = _fingertip_error(outcome.pose, truth, settings)
            fr.parameter_error = _parameter_error(outcome.pose, truth)

        bad_run = bad_run + 1 if outcome.score > threshold else 0
        if bad_run >= TRACK_LOSS_RUN:
            record.track_loss_frames.append(i)

        h = outcome.pose
        last = i
        now = finish
        # drop-oldest: jump to the newest frame that has arrived, or wait for the next one
        arrived = int(np.searchsorted(ts, finish + 1e-9, side="right")) - 1
        i = max(arrived, i + 1)

    end = max(now, ts[-1] + clock.frame_period)
    record.wall_time_ms = end - ts[0]
    return record


class LatestFrameMailbox:
    """Capacity-one mailbox for live capture: writers overwrite, the reader takes the newest."""

    def __init__(self):
        self._cond = threading.Condition()
        self._item = None
        self._has_item = False
        self.overwritten = 0
        self.closed = False

    def put(self, item) -> None:
        with self._cond:
            if self._has_item:
                self.overwritten += 1
            self._item, self._has_item = item, True
            self._cond.notify()

    def close(self) -> None:
        with self._cond:
            self.closed = True
            self._cond.notify_all()

    def take(self, timeout: Optional[float] = None):
        """Newest item, or ``None`` once closed and drained (or on timeout)."""
        with self._cond:
            if not self._cond.wait_for(lambda: self._has_item or self.closed, timeout):
                return None
            if not self._has_item:
                return None
            item, self._item, self._has_item = self._item, None, False
            return item
