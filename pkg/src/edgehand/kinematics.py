"""Hand parameterization, sphere-splat forward kinematics and depth rendering.

A pose is a flat ``(27,)`` float64 array::

    [0:3]   palm position in camera coordinates (m)
    [3:7]   orientation quaternion (w, x, y, z)
    [7:27]  five fingers x (mcp_flex, mcp_abduct, pip_flex, dip_flex), radians

Palm frame: x across the palm, y from wrist towards the fingers, z out of the
back of the hand. Positive flexion curls a finger towards -z.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numba import njit

FINGERS = ("thumb", "index", "middle", "ring", "pinky")
JOINTS = ("mcp_flex", "mcp_abduct", "pip_flex", "dip_flex")

POSE_DIM = 27
POSITION = slice(0, 3)
ORIENTATION = slice(3, 7)
ARTICULATION = slice(7, 27)

PALM_SPHERES = 9
SEGMENTS_PER_FINGER = 3
SPHERES_PER_SEGMENT = 4
SPHERE_COUNT = PALM_SPHERES + len(FINGERS) * SEGMENTS_PER_FINGER * SPHERES_PER_SEGMENT
GEOMETRY_VERSION = 1


class InvalidPoseError(ValueError):
    pass


def articulation_index(finger: str, joint: str) -> int:
    """Offset of one bone angle inside the pose vector."""
    return 7 + 4 * FINGERS.index(finger) + JOINTS.index(joint)


def fingertip_indices() -> np.ndarray:
    """Sphere indices of the five fingertip centers."""
    per_finger = SEGMENTS_PER_FINGER * SPHERES_PER_SEGMENT
    return np.array([PALM_SPHERES + f * per_finger + per_finger - 1 for f in range(len(FINGERS))])


def make_pose(position=(0.0, 0.0, 0.4), orientation=(1.0, 0.0, 0.0, 0.0), articulation=None) -> np.ndarray:
    h = np.zeros(POSE_DIM)
    h[POSITION] = position
    h[ORIENTATION] = orientation
    if articulation is not None:
        h[ARTICULATION] = articulation
    return h


def _default_limits(flex=(0.0, 1.6), abduct=(-0.35, 0.35)):
    return tuple(abduct if j == "mcp_abduct" else flex for _ in FINGERS for j in JOINTS)


@dataclass(frozen=True)
class HandGeometry:
    palm_width: float = 0.08
    palm_height: float = 0.09
    palm_radius: float = 0.012
    finger_bases: tuple = (
        (0.040, -0.010, 0.0),
        (0.030, 0.045, 0.0),
        (0.010, 0.045, 0.0),
        (-0.010, 0.045, 0.0),
        (-0.030, 0.045, 0.0),
    )
    segment_lengths: tuple = (
        (0.035, 0.030, 0.025),
        (0.040, 0.025, 0.020),
        (0.045, 0.028, 0.020),
        (0.042, 0.026, 0.020),
        (0.033, 0.020, 0.018),
    )
    segment_radii: tuple = (
        (0.010, 0.009, 0.008),
        (0.009, 0.008, 0.007),
        (0.009, 0.008, 0.007),
        (0.0085, 0.0075, 0.0065),
        (0.0075, 0.0065, 0.006),
    )
    joint_limits: tuple = field(default_factory=_default_limits)

    def __post_init__(self):
        # JSON hands us lists; keep the instance hashable
        for name in ("finger_bases", "segment_lengths", "segment_radii", "joint_limits"):
            object.__setattr__(self, name, tuple(tuple(float(v) for v in row) for row in getattr(self, name)))
        if np.asarray(self.finger_bases).shape != (5, 3):
            raise ValueError("finger_bases must be 5 x 3")
        for name in ("segment_lengths", "segment_radii"):
            values = np.asarray(getattr(self, name))
            if values.shape != (5, 3):
                raise ValueError(f"{name} must be 5 x 3")
            if not np.all(values > 0):
                raise ValueError(f"{name} must be strictly positive")
        if min(self.palm_width, self.palm_height, self.palm_radius) <= 0:
            raise ValueError("palm dimensions must be strictly positive")
        limits = np.asarray(self.joint_limits)
        if limits.shape != (20, 2) or not np.all(limits[:, 0] < limits[:, 1]):
            raise ValueError("joint_limits must be 20 (min, max) pairs with min < max")

    @cached_property
    def limits(self) -> np.ndarray:
        return np.asarray(self.joint_limits, dtype=np.float64)

    @cached_property
    def palm_offsets(self) -> np.ndarray:
        xs = (-self.palm_width / 3.0, 0.0, self.palm_width / 3.0)
        ys = (-self.palm_height / 3.0, 0.0, self.palm_height / 3.0)
        return np.array([(x, y, 0.0) for y in ys for x in xs], dtype=np.float64)

    @cached_property
    def radii(self) -> np.ndarray:
        r = [self.palm_radius] * PALM_SPHERES
        for f in range(5):
            for k in range(SEGMENTS_PER_FINGER):
                r.extend([self.segment_radii[f][k]] * SPHERES_PER_SEGMENT)
        return np.array(r, dtype=np.float64)

    @cached_property
    def bases(self) -> np.ndarray:
        return np.asarray(self.finger_bases, dtype=np.float64)

    @cached_property
    def lengths(self) -> np.ndarray:
        return np.asarray(self.segment_lengths, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "palm_width": self.palm_width,
            "palm_height": self.palm_height,
            "palm_radius": self.palm_radius,
            "finger_bases": [list(r) for r in self.finger_bases],
            "segment_lengths": [list(r) for r in self.segment_lengths],
            "segment_radii": [list(r) for r in self.segment_radii],
            "joint_limits": [list(r) for r in self.joint_limits],
        }


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float = 120.0
    fy: float = 120.0
    cx: float = 64.0
    cy: float = 64.0
    width: int = 128
    height: int = 128

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}


@dataclass(eq=False)
class DepthMap:
    """Row-major depth samples in meters; 0 marks "no surface"."""

    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise ValueError("depth samples must be 2-D")
        if not np.all(np.isfinite(self.samples)) or np.any(self.samples < 0):
            raise ValueError("depth samples must be finite and non-negative")

    @classmethod
    def zeros(cls, width: int, height: int) -> "DepthMap":
        return cls(np.zeros((height, width)))

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    def __eq__(self, other):
        return isinstance(other, DepthMap) and np.array_equal(self.samples, other.samples)


@dataclass(eq=False)
class SpherePrimitiveSet:
    centers: np.ndarray
    radii: np.ndarray

    def __len__(self):
        return len(self.radii)


def normalize_quaternion(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    if not n > 1e-12:
        raise InvalidPoseError("quaternion has zero norm")
    return q / n


def clamp_poses(poses: np.ndarray, g: HandGeometry) -> np.ndarray:
    """Row-wise feasibility projection: clip bone angles, normalize quaternions."""
    out = np.array(poses, dtype=np.float64, copy=True)
    q = out[:, ORIENTATION]
    n = np.sqrt(q[:, 0] * q[:, 0] + q[:, 1] * q[:, 1] + q[:, 2] * q[:, 2] + q[:, 3] * q[:, 3])
    if not np.all(n > 1e-12):
        raise InvalidPoseError("quaternion has zero norm")
    out[:, ORIENTATION] = q / n[:, None]
    out[:, ARTICULATION] = np.clip(out[:, ARTICULATION], g.limits[:, 0], g.limits[:, 1])
    return out


def clamp_pose_to_limits(h, g: HandGeometry) -> np.ndarray:
    return clamp_poses(np.asarray(h, dtype=np.float64)[None, :], g)[0]


@njit(cache=True)
def _to_camera(px, py, pz, r, lx, ly, lz, out, i):
    out[i, 0] = px + r[0] * lx + r[1] * ly + r[2] * lz
    out[i, 1] = py + r[3] * lx + r[4] * ly + r[5] * lz
    out[i, 2] = pz + r[6] * lx + r[7] * ly + r[8] * lz


@njit(cache=True)
def fk_into(pose, palm_offsets, bases, lengths, out):
    """Write the sphere centers of ``pose`` into ``out`` (SPHERE_COUNT x 3)."""
    px, py, pz = pose[0], pose[1], pose[2]
    w, x, y, z = pose[3], pose[4], pose[5], pose[6]
    n = np.sqrt(w * w + x * x + y * y + z * z)
    w, x, y, z = w / n, x / n, y / n, z / n
    r = np.empty(9)
    r[0] = 1.0 - 2.0 * (y * y + z * z)
    r[1] = 2.0 * (x * y - w * z)
    r[2] = 2.0 * (x * z + w * y)
    r[3] = 2.0 * (x * y + w * z)
    r[4] = 1.0 - 2.0 * (x * x + z * z)
    r[5] = 2.0 * (y * z - w * x)
    r[6] = 2.0 * (x * z - w * y)
    r[7] = 2.0 * (y * z + w * x)
    r[8] = 1.0 - 2.0 * (x * x + y * y)

    i = 0
    for p in range(palm_offsets.shape[0]):
        _to_camera(px, py, pz, r, palm_offsets[p, 0], palm_offsets[p, 1], palm_offsets[p, 2], out, i)
        i += 1

    for f in range(5):
        base = 7 + 4 * f
        sb = np.sin(pose[base + 1])
        cb = np.cos(pose[base + 1])
        jx, jy, jz = bases[f, 0], bases[f, 1], bases[f, 2]
        flex = 0.0
        for k in range(3):
            if k == 0:
                flex += pose[base]
            else:
                flex += pose[base + 1 + k]
            ca = np.cos(flex)
            dx = -ca * sb
            dy = ca * cb
            dz = -np.sin(flex)
            seg = lengths[f, k]
            for t in range(4):
                s = seg * (t / 3.0)
                _to_camera(px, py, pz, r, jx + s * dx, jy + s * dy, jz + s * dz, out, i)
                i += 1
            jx = jx + seg * dx
            jy = jy + seg * dy
            jz = jz + seg * dz


@njit(cache=True)
def splat_into(centers, radii, fx, fy, cx, cy, x0, y0, buf):
    """Z-min flat-disc splat into ``buf`` covering pixels [x0, x0+w) x [y0, y0+h).

    ``buf`` must be pre-filled with +inf; uncovered pixels stay +inf.
    """
    bh, bw = buf.shape
    for s in range(centers.shape[0]):
        zc = centers[s, 2]
        if zc <= 0.0:
            continue
        rad = radii[s]
        depth = zc - rad
        if depth <= 0.0:
            continue
        u = fx * centers[s, 0] / zc + cx
        v = fy * centers[s, 1] / zc + cy
        rx = fx * rad / zc
        ry = fy * rad / zc
        lo_x = max(float(x0), np.ceil(u - rx))
        hi_x = min(float(x0 + bw - 1), np.floor(u + rx))
        lo_y = max(float(y0), np.ceil(v - ry))
        hi_y = min(float(y0 + bh - 1), np.floor(v + ry))
        if lo_x > hi_x or lo_y > hi_y:
            continue
        for yy in range(int(lo_y), int(hi_y) + 1):
            ny = (yy - v) / ry
            ny2 = ny * ny
            row = yy - y0
            for xx in range(int(lo_x), int(hi_x) + 1):
                nx = (xx - u) / rx
                if nx * nx + ny2 <= 1.0:
                    col = xx - x0
                    if depth < buf[row, col]:
                        buf[row, col] = depth


def forward_kinematics(h, g: HandGeometry) -> SpherePrimitiveSet:
    h = np.ascontiguousarray(h, dtype=np.float64)
    if h.shape != (POSE_DIM,):
        raise InvalidPoseError(f"pose must have {POSE_DIM} parameters, got {h.shape}")
    normalize_quaternion(h[ORIENTATION])
    centers = np.empty((SPHERE_COUNT, 3))
    fk_into(h, g.palm_offsets, g.bases, g.lengths, centers)
    return SpherePrimitiveSet(centers, g.radii.copy())


def render_depth(s: SpherePrimitiveSet, k: CameraIntrinsics) -> DepthMap:
    buf = np.full((k.height, k.width), np.inf)
    if len(s):
        splat_into(
            np.ascontiguousarray(s.centers, dtype=np.float64),
            np.ascontiguousarray(s.radii, dtype=np.float64),
            float(k.fx), float(k.fy), float(k.cx), float(k.cy), 0, 0, buf,
        )
    buf[np.isinf(buf)] = 0.0
    return DepthMap(buf)


def render_pose(h, g: HandGeometry, k: CameraIntrinsics) -> DepthMap:
    return render_depth(forward_kinematics(h, g), k)


def fingertips(h, g: HandGeometry) -> np.ndarray:
    """(5, 3) fingertip centers in camera coordinates."""
    return forward_kinematics(h, g).centers[fingertip_indices()]
