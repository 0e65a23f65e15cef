"""Clamped mean absolute depth discrepancy between a pose hypothesis and an observation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .kinematics import (
    SPHERE_COUNT,
    CameraIntrinsics,
    DepthMap,
    HandGeometry,
    fk_into,
    forward_kinematics,
    splat_into,
)


class NoObservationError(ValueError):
    """The hand projects to no pixel of the image."""


@dataclass(frozen=True)
class ObjectiveConfig:
    clamp_threshold: float = 0.30
    box_margin: int = 16

    def __post_init__(self):
        if not self.clamp_threshold > 0:
            raise ValueError("clamp_threshold must be positive")
        if self.box_margin < 0:
            raise ValueError("box_margin must be non-negative")


@dataclass(frozen=True)
class BoundingBox:
    """Pixel rectangle [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise NoObservationError(f"empty bounding box {self}")

    @property
    def pixel_count(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def fits(self, width: int, height: int) -> bool:
        return 0 <= self.x0 and self.x1 <= width and 0 <= self.y0 and self.y1 <= height

    def contains(self, other: "BoundingBox") -> bool:
        return self.x0 <= other.x0 and self.y0 <= other.y0 and other.x1 <= self.x1 and other.y1 <= self.y1


def clamp(x: float, t: float) -> float:
    return x if x <= t else t


def bounding_box(h, g: HandGeometry, k: CameraIntrinsics, cfg: ObjectiveConfig, clip: bool = True) -> BoundingBox:
    spheres = forward_kinematics(h, g)
    z = spheres.centers[:, 2]
    front = z > 0
    if not np.any(front):
        raise NoObservationError("hand is entirely behind the camera")
    c = spheres.centers[front]
    r = spheres.radii[front]
    zf = c[:, 2]
    u = k.fx * c[:, 0] / zf + k.cx
    v = k.fy * c[:, 1] / zf + k.cy
    rx = k.fx * r / zf
    ry = k.fy * r / zf
    m = cfg.box_margin
    x0 = math.ceil(float(np.min(u - rx))) - m
    x1 = math.floor(float(np.max(u + rx))) + 1 + m
    y0 = math.ceil(float(np.min(v - ry))) - m
    y1 = math.floor(float(np.max(v + ry))) + 1 + m
    if clip:
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, k.width), min(y1, k.height)
    return BoundingBox(x0, y0, x1, y1)


@njit(cache=True)
def _box_sum(buf, obs, x0, y0, t):
    bh, bw = buf.shape
    total = 0.0
    for row in range(bh):
        for col in range(bw):
            hd = buf[row, col]
            od = obs[y0 + row, x0 + col]
            if hd == np.inf:
                if od != 0.0:
                    total += t
            elif od == 0.0:
                total += t
            else:
                diff = abs(hd - od)
                total += diff if diff <= t else t
    return total


@njit(cache=True)
def _score_batch(poses, palm_offsets, bases, lengths, radii, fx, fy, cx, cy, x0, y0, x1, y1, obs, t, out):
    centers = np.empty((radii.shape[0], 3))
    buf = np.empty((y1 - y0, x1 - x0))
    n_pixels = float((y1 - y0) * (x1 - x0))
    for n in range(poses.shape[0]):
        fk_into(poses[n], palm_offsets, bases, lengths, centers)
        buf[:, :] = np.inf
        splat_into(centers, radii, fx, fy, cx, cy, x0, y0, buf)
        out[n] = _box_sum(buf, obs, x0, y0, t) / n_pixels


def evaluate_batch(hs, d_obs: DepthMap, box: BoundingBox, cfg: ObjectiveConfig,
                   g: HandGeometry, k: CameraIntrinsics) -> np.ndarray:
    """Scores for a stack of poses, in order. Bit-identical to one-at-a-time evaluation."""
    if d_obs.width != k.width or d_obs.height != k.height:
        raise ValueError(f"observation is {d_obs.width}x{d_obs.height}, camera is {k.width}x{k.height}")
    if not box.fits(d_obs.width, d_obs.height):
        raise ValueError(f"{box} exceeds the {d_obs.width}x{d_obs.height} observation")
    poses = np.ascontiguousarray(np.atleast_2d(hs), dtype=np.float64)
    out = np.empty(poses.shape[0])
    assert g.radii.shape[0] == SPHERE_COUNT
    _score_batch(
        poses, g.palm_offsets, g.bases, g.lengths, g.radii,
        float(k.fx), float(k.fy), float(k.cx), float(k.cy),
        box.x0, box.y0, box.x1, box.y1,
        d_obs.samples, float(cfg.clamp_threshold), out,
    )
    return out


def evaluate(h, d_obs: DepthMap, box: BoundingBox, cfg: ObjectiveConfig,
             g: HandGeometry, k: CameraIntrinsics) -> float:
    return float(evaluate_batch(np.asarray(h)[None, :], d_obs, box, cfg, g, k)[0])
