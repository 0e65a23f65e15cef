"""Constriction-coefficient PSO over the pose space, split into four resumable phases.

One frame of optimization is ``init_swarm`` followed by ``phases`` calls to
``run_phase``. Each phase is a pure function of ``(SwarmState, context,
config)``, so the state can be shipped to another executor between phases
without changing the outcome.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Protocol

import numpy as np

from . import rng
from .kinematics import (
    ARTICULATION,
    POSE_DIM,
    POSITION,
    CameraIntrinsics,
    DepthMap,
    HandGeometry,
    clamp_poses,
)
from .objective import BoundingBox, ObjectiveConfig, bounding_box, evaluate_batch

PHASES = 4


def _default_extents() -> tuple:
    ext = np.empty(POSE_DIM)
    ext[POSITION] = 0.01
    ext[3:7] = 0.03
    art = np.full(20, 0.15)
    art[1::4] = 0.05  # abduction
    ext[ARTICULATION] = art
    return tuple(ext.tolist())


@dataclass(frozen=True)
class PsoConfig:
    swarm_size: int = 64
    generations_total: int = 40
    phases: int = PHASES
    chi: float = 0.7298
    c1: float = 2.05
    c2: float = 2.05
    init_extents: tuple = field(default_factory=_default_extents)
    restart_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "init_extents", tuple(float(v) for v in self.init_extents))
        if self.swarm_size < 2:
            raise ValueError("swarm_size must be at least 2")
        if self.phases != PHASES:
            raise ValueError(f"phases is fixed at {PHASES}")
        if self.generations_total % self.phases:
            raise ValueError("generations_total must be divisible by phases")
        if not 0 < self.chi <= 1:
            raise ValueError("chi must lie in (0, 1]")
        if self.c1 < 0 or self.c2 < 0:
            raise ValueError("c1 and c2 must be non-negative")
        if len(self.init_extents) != POSE_DIM or min(self.init_extents) < 0:
            raise ValueError(f"init_extents must be {POSE_DIM} non-negative values")
        if not 0 <= self.restart_fraction <= 1:
            raise ValueError("restart_fraction must lie in [0, 1]")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    @property
    def generations_per_phase(self) -> int:
        return self.generations_total // self.phases

    @property
    def extents(self) -> np.ndarray:
        return np.asarray(self.init_extents)


@dataclass(eq=False)
class SwarmState:
    positions: np.ndarray
    velocities: np.ndarray
    pbest_positions: np.ndarray
    pbest_scores: np.ndarray
    gbest_position: np.ndarray
    gbest_score: float
    rng_counter: int = 0
    phase_index: int = 0
    generation_index: int = 0

    @property
    def swarm_size(self) -> int:
        return self.positions.shape[0]

    def copy(self) -> "SwarmState":
        return SwarmState(
            self.positions.copy(), self.velocities.copy(), self.pbest_positions.copy(),
            self.pbest_scores.copy(), self.gbest_position.copy(), float(self.gbest_score),
            self.rng_counter, self.phase_index, self.generation_index,
        )

    def __eq__(self, other):
        if not isinstance(other, SwarmState):
            return NotImplemented
        arrays = ("positions", "velocities", "pbest_positions", "pbest_scores", "gbest_position")
        return (
            all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
            and self.gbest_score == other.gbest_score
            and (self.rng_counter, self.phase_index, self.generation_index)
            == (other.rng_counter, other.phase_index, other.generation_index)
        )


class Objective(Protocol):
    frame_index: int
    geometry: HandGeometry

    def score(self, positions: np.ndarray) -> np.ndarray: ...


@dataclass
class FrameContext:
    """Depth objective for one frame; the box is shared by every particle."""

    observation: DepthMap
    box: BoundingBox
    objective: ObjectiveConfig
    geometry: HandGeometry
    camera: CameraIntrinsics
    frame_index: int = 0
    trace: Optional[list] = None

    @classmethod
    def for_center(cls, center, observation: DepthMap, objective: ObjectiveConfig, geometry: HandGeometry,
                   camera: CameraIntrinsics, frame_index: int = 0, trace: Optional[list] = None) -> "FrameContext":
        box = bounding_box(center, geometry, camera, objective)
        return cls(observation, box, objective, geometry, camera, frame_index, trace)

    def score(self, positions: np.ndarray) -> np.ndarray:
        return evaluate_batch(positions, self.observation, self.box, self.objective, self.geometry, self.camera)


def search_extent_scale(skipped: int, growth: float = 0.5, cap: float = 4.0) -> np.ndarray:
    """Per-dimension multiplier on init extents after ``skipped`` dropped frames.

    Position and bone-angle extents grow linearly with the number of frames
    the hand could have moved during; orientation extents are left alone.
    """
    if skipped < 0:
        raise ValueError("skipped must be non-negative")
    scale = np.ones(POSE_DIM)
    grown = min(1.0 + skipped * growth, cap)
    scale[POSITION] = grown
    scale[ARTICULATION] = grown
    return scale


def _uniform(cfg: PsoConfig, frame_index: int, counter: int, shape) -> np.ndarray:
    return rng.uniform_block(cfg.seed, frame_index, counter, shape)


def init_swarm(center, cfg: PsoConfig, g: HandGeometry, frame_index: int = 0) -> SwarmState:
    center = np.asarray(center, dtype=np.float64)
    n = cfg.swarm_size
    positions = np.tile(center, (n, 1))
    u = _uniform(cfg, frame_index, 0, (n, POSE_DIM))
    # particle 0 stays the unprojected center (elitism)
    positions[1:] = clamp_poses(center + (2.0 * u[1:] - 1.0) * cfg.extents, g)
    return SwarmState(
        positions=positions,
        velocities=np.zeros_like(positions),
        pbest_positions=positions.copy(),
        pbest_scores=np.full(n, np.inf),
        gbest_position=center.copy(),
        gbest_score=float("inf"),
        rng_counter=1,
    )


def step_generation(s: SwarmState, ctx: Objective, cfg: PsoConfig) -> SwarmState:
    """Evaluate, update personal/global records, then move every particle."""
    s = s.copy()
    scores = ctx.score(s.positions)
    improved = scores < s.pbest_scores
    s.pbest_positions[improved] = s.positions[improved]
    s.pbest_scores[improved] = scores[improved]
    best = int(np.argmin(s.pbest_scores))
    if s.pbest_scores[best] < s.gbest_score:
        s.gbest_score = float(s.pbest_scores[best])
        s.gbest_position = s.pbest_positions[best].copy()

    n = s.swarm_size
    r1 = _uniform(cfg, ctx.frame_index, s.rng_counter, (n, POSE_DIM))
    r2 = _uniform(cfg, ctx.frame_index, s.rng_counter + 1, (n, POSE_DIM))
    s.rng_counter += 2
    s.velocities = cfg.chi * (
        s.velocities
        + cfg.c1 * r1 * (s.pbest_positions - s.positions)
        + cfg.c2 * r2 * (s.gbest_position - s.positions)
    )
    s.positions = clamp_poses(s.positions + s.velocities, ctx.geometry)
    s.generation_index += 1
    return s


def _restart_worst(s: SwarmState, ctx: Objective, cfg: PsoConfig) -> None:
    n = s.swarm_size
    count = int(np.floor(cfg.restart_fraction * n))
    if count == 0:
        return
    keep = int(np.argmin(s.pbest_scores))
    # worst first; stable so ties resolve by particle index
    order = [i for i in np.argsort(-s.pbest_scores, kind="stable") if i != keep][:count]
    order = np.array(sorted(order))
    extents = cfg.extents * 0.5 ** s.phase_index
    u = _uniform(cfg, ctx.frame_index, s.rng_counter, (n, POSE_DIM))
    s.rng_counter += 1
    fresh = clamp_poses(s.gbest_position + (2.0 * u[order] - 1.0) * extents, ctx.geometry)
    s.positions[order] = fresh
    s.velocities[order] = 0.0
    s.pbest_positions[order] = fresh
    s.pbest_scores[order] = np.inf


def run_phase(s: SwarmState, ctx: Objective, cfg: PsoConfig) -> SwarmState:
    if s.phase_index >= cfg.phases:
        raise ValueError(f"phase_index {s.phase_index} is past the last phase")
    s = s.copy()
    if s.phase_index > 0:
        _restart_worst(s, ctx, cfg)
    trace = getattr(ctx, "trace", None)
    for _ in range(cfg.generations_per_phase):
        before = s.gbest_score
        s = step_generation(s, ctx, cfg)
        if s.gbest_score > before:
            raise AssertionError("global best score increased")
        if trace is not None:
            trace.append((ctx.frame_index, s.phase_index, s.generation_index, s.gbest_score))
    s.phase_index += 1
    return s


def frame_config(cfg: PsoConfig, seed: int, frames_skipped: int) -> PsoConfig:
    """Config actually used for one frame: request seed, extents widened by skips."""
    extents = cfg.extents * search_extent_scale(frames_skipped)
    return replace(cfg, seed=seed, init_extents=tuple(extents.tolist()))


@dataclass
class FrameOutcome:
    pose: np.ndarray
    score: float
    loop_ms: float = 0.0
    round_trips: int = 0
    bytes_transferred: int = 0
    executors: tuple = ()


def solve_frame_locally(center, d_obs: DepthMap, cfg: PsoConfig, objective: ObjectiveConfig,
                        g: HandGeometry, k: CameraIntrinsics, frame_index: int = 0,
                        frames_skipped: int = 0, trace: Optional[list] = None,
                        between_phases: Optional[Callable[[SwarmState], SwarmState]] = None) -> SwarmState:
    """Run all phases in-process and return the final swarm."""
    fcfg = frame_config(cfg, cfg.seed, frames_skipped)
    ctx = FrameContext.for_center(center, d_obs, objective, g, k, frame_index, trace)
    s = init_swarm(center, fcfg, g, frame_index)
    for _ in range(fcfg.phases):
        s = run_phase(s, ctx, fcfg)
        if between_phases is not None:
            s = between_phases(s)
    return s


def optimize_frame(center, d_obs: DepthMap, cfg: PsoConfig, dispatcher=None, *,
                   objective: Optional[ObjectiveConfig] = None, geometry: Optional[HandGeometry] = None,
                   camera: Optional[CameraIntrinsics] = None, frame_index: int = 0,
                   frames_skipped: int = 0) -> FrameOutcome:
    """Estimate the pose for one frame starting from the previous solution ``center``.

    Without a dispatcher every phase runs in-process on the inputs exactly as
    given. With one, the dispatcher routes a fused task or four phase tasks to
    its executors; inputs are first rounded to wire precision so every
    executor sees the same numbers.
    """
    if dispatcher is not None:
        return dispatcher.optimize(center, d_obs, frame_index, frames_skipped)
    objective = objective or ObjectiveConfig()
    geometry = geometry or HandGeometry()
    camera = camera or CameraIntrinsics()
    s = solve_frame_locally(center, d_obs, cfg, objective, geometry, camera, frame_index, frames_skipped)
    return FrameOutcome(s.gbest_position.copy(), s.gbest_score, executors=("local",) * cfg.phases)
