"""Length-prefixed binary framing and the payload layouts carried inside it.

Frame::

    u32 payload length (big-endian, header excluded) | u8 message type | payload

All multi-byte fields are big-endian. Step requests carry the center pose as
float32 and the observation as uint16 millimeters; swarm state and results
use float64 so a swarm resumes bit-exactly on the other side.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..kinematics import POSE_DIM, DepthMap
from ..pso import SwarmState

PROTOCOL_VERSION = 1
HEADER = struct.Struct(">IB")
HEADER_SIZE = HEADER.size

_REQ_FIXED = struct.Struct(">IBBQH")
_RES_FIXED = struct.Struct(">IB")
_DEPTH_DIMS = struct.Struct(">HH")
_COUNTS = struct.Struct(">II")
_SWARM_TAIL = struct.Struct(">dQBI")
_EXEC_US = struct.Struct(">I")
_REGISTER_FIXED = struct.Struct(">HB")
_ACK = struct.Struct(">IH")
_ERROR_FIXED = struct.Struct(">H")

_F32 = np.dtype(">f4")
_F64 = np.dtype(">f8")
_U16 = np.dtype(">u2")


class ProtocolError(ValueError):
    pass


class MessageType(enum.IntEnum):
    REGISTER = 0x01
    REGISTER_ACK = 0x02
    STEP_REQUEST = 0x03
    STEP_RESULT = 0x04
    ERROR = 0x05
    PING = 0x06
    PONG = 0x07


class TaskKind(enum.IntEnum):
    FUSED_FRAME = 0
    PHASE = 1


class ErrorCode(enum.IntEnum):
    PROTOCOL = 1
    VERSION_MISMATCH = 2
    GEOMETRY_MISMATCH = 3
    CONFIG_MISMATCH = 4
    NOT_REGISTERED = 5
    EXECUTION = 6


@dataclass(frozen=True)
class Message:
    type: MessageType
    payload: bytes = b""


def encode(message: Message) -> bytes:
    return HEADER.pack(len(message.payload), int(message.type)) + bytes(message.payload)


def decode(data: bytes) -> Message:
    if len(data) < HEADER_SIZE:
        raise ProtocolError(f"truncated header: {len(data)} bytes")
    length, type_byte = HEADER.unpack_from(data, 0)
    try:
        mtype = MessageType(type_byte)
    except ValueError as exc:
        raise ProtocolError(f"unknown message type 0x{type_byte:02x}") from exc
    actual = len(data) - HEADER_SIZE
    if actual < length:
        raise ProtocolError(f"truncated payload: {actual} of {length} bytes")
    if actual > length:
        raise ProtocolError(f"length mismatch: header says {length}, got {actual}")
    return Message(mtype, bytes(data[HEADER_SIZE:]))


def parse_header(header: bytes) -> tuple[int, MessageType]:
    length, type_byte = HEADER.unpack(header)
    try:
        return length, MessageType(type_byte)
    except ValueError as exc:
        raise ProtocolError(f"unknown message type 0x{type_byte:02x}") from exc


# -- depth and pose precision ------------------------------------------------

def quantize_depth(d: DepthMap) -> np.ndarray:
    """Meters to uint16 millimeters; 0 stays "no surface"."""
    return np.clip(np.rint(d.samples * 1000.0), 0, 65535).astype(np.uint16)


def dequantize_depth(mm: np.ndarray) -> DepthMap:
    return DepthMap(mm.astype(np.float64) / 1000.0)


def wire_depth(d: DepthMap) -> DepthMap:
    """The observation exactly as an executor on the far side of the wire sees it."""
    return dequantize_depth(quantize_depth(d))


def wire_pose(h) -> np.ndarray:
    return np.asarray(h, dtype=np.float64).astype(np.float32).astype(np.float64)


def encode_depth(mm: np.ndarray) -> bytes:
    height, width = mm.shape
    return _DEPTH_DIMS.pack(width, height) + np.ascontiguousarray(mm, dtype=_U16).tobytes()


def decode_depth(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    _need(buf, offset, _DEPTH_DIMS.size, "depth dimensions")
    width, height = _DEPTH_DIMS.unpack_from(buf, offset)
    offset += _DEPTH_DIMS.size
    n = width * height * 2
    _need(buf, offset, n, "depth samples")
    mm = np.frombuffer(buf, dtype=_U16, count=width * height, offset=offset).astype(np.uint16).reshape(height, width)
    return mm, offset + n


def _need(buf: bytes, offset: int, n: int, what: str) -> None:
    if len(buf) - offset < n:
        raise ProtocolError(f"truncated {what}")


def _take_f64(buf: bytes, offset: int, count: int, what: str) -> tuple[np.ndarray, int]:
    _need(buf, offset, 8 * count, what)
    arr = np.frombuffer(buf, dtype=_F64, count=count, offset=offset).astype(np.float64)
    return arr, offset + 8 * count


# -- swarm state --------------------------------------------------------------

def swarm_block_size(swarm_size: int, dim: int = POSE_DIM) -> int:
    return _COUNTS.size + 8 * (3 * swarm_size * dim + swarm_size + dim) + _SWARM_TAIL.size


def encode_swarm(s: SwarmState) -> bytes:
    n, dim = s.positions.shape
    parts = [_COUNTS.pack(n, dim)]
    for arr in (s.positions, s.velocities, s.pbest_positions, s.pbest_scores, s.gbest_position):
        parts.append(np.ascontiguousarray(arr, dtype=_F64).tobytes())
    parts.append(_SWARM_TAIL.pack(s.gbest_score, s.rng_counter, s.phase_index, s.generation_index))
    return b"".join(parts)


def decode_swarm(buf: bytes, offset: int = 0) -> tuple[SwarmState, int]:
    _need(buf, offset, _COUNTS.size, "swarm counts")
    n, dim = _COUNTS.unpack_from(buf, offset)
    offset += _COUNTS.size
    if dim != POSE_DIM or n < 1:
        raise ProtocolError(f"bad swarm shape {n} x {dim}")
    positions, offset = _take_f64(buf, offset, n * dim, "swarm positions")
    velocities, offset = _take_f64(buf, offset, n * dim, "swarm velocities")
    pbest, offset = _take_f64(buf, offset, n * dim, "swarm personal bests")
    pscores, offset = _take_f64(buf, offset, n, "swarm personal scores")
    gbest, offset = _take_f64(buf, offset, dim, "swarm global best")
    _need(buf, offset, _SWARM_TAIL.size, "swarm tail")
    gscore, counter, phase, generation = _SWARM_TAIL.unpack_from(buf, offset)
    offset += _SWARM_TAIL.size
    state = SwarmState(
        positions.reshape(n, dim), velocities.reshape(n, dim), pbest.reshape(n, dim),
        pscores, gbest, gscore, counter, phase, generation,
    )
    return state, offset


# -- step request / result -------------------------------------------------

@dataclass(eq=False)
class StepRequest:
    frame_index: int
    kind: TaskKind
    phase_index: int
    seed: int
    frames_skipped: int
    center: np.ndarray
    depth_mm: np.ndarray
    swarm: Optional[SwarmState] = None

    @property
    def carries_swarm(self) -> bool:
        return self.kind == TaskKind.PHASE and self.phase_index > 0

    def __eq__(self, other):
        if not isinstance(other, StepRequest):
            return NotImplemented
        return (
            (self.frame_index, self.kind, self.phase_index, self.seed, self.frames_skipped)
            == (other.frame_index, other.kind, other.phase_index, other.seed, other.frames_skipped)
            and np.array_equal(self.center, other.center)
            and np.array_equal(self.depth_mm, other.depth_mm)
            and self.swarm == other.swarm
        )


@dataclass(eq=False)
class StepResult:
    frame_index: int
    phase_index: int
    gbest_position: np.ndarray
    gbest_score: float
    exec_us: int = 0
    swarm: Optional[SwarmState] = None

    def __eq__(self, other):
        if not isinstance(other, StepResult):
            return NotImplemented
        return (
            (self.frame_index, self.phase_index, self.exec_us) == (other.frame_index, other.phase_index, other.exec_us)
            and np.array_equal(self.gbest_position, other.gbest_position)
            and self.gbest_score == other.gbest_score
            and self.swarm == other.swarm
        )


def step_request_size(width: int, height: int, swarm_size: Optional[int] = None) -> int:
    """Closed-form payload size of a step request."""
    size = _REQ_FIXED.size + 4 * POSE_DIM + _DEPTH_DIMS.size + 2 * width * height
    if swarm_size is not None:
        size += swarm_block_size(swarm_size)
    return size


def step_result_size(swarm_size: Optional[int] = None) -> int:
    size = _RES_FIXED.size + 8 * POSE_DIM + 8 + _EXEC_US.size
    if swarm_size is not None:
        size += swarm_block_size(swarm_size)
    return size


def encode_step_request(req: StepRequest) -> bytes:
    if (req.swarm is not None) != req.carries_swarm:
        raise ProtocolError("swarm block must be present exactly for phase tasks past phase 0")
    center = np.asarray(req.center, dtype=np.float64)
    if center.shape != (POSE_DIM,):
        raise ProtocolError("center pose must have 27 parameters")
    parts = [
        _REQ_FIXED.pack(req.frame_index, int(req.kind), req.phase_index, req.seed, req.frames_skipped),
        center.astype(_F32).tobytes(),
        encode_depth(req.depth_mm),
    ]
    if req.swarm is not None:
        parts.append(encode_swarm(req.swarm))
    return b"".join(parts)


def decode_step_request(buf: bytes) -> StepRequest:
    _need(buf, 0, _REQ_FIXED.size, "step request header")
    frame_index, kind_byte, phase_index, seed, skipped = _REQ_FIXED.unpack_from(buf, 0)
    try:
        kind = TaskKind(kind_byte)
    except ValueError as exc:
        raise ProtocolError(f"unknown task kind {kind_byte}") from exc
    offset = _REQ_FIXED.size
    _need(buf, offset, 4 * POSE_DIM, "center pose")
    center = np.frombuffer(buf, dtype=_F32, count=POSE_DIM, offset=offset).astype(np.float64)
    offset += 4 * POSE_DIM
    depth_mm, offset = decode_depth(buf, offset)
    req = StepRequest(frame_index, kind, phase_index, seed, skipped, center, depth_mm)
    if req.carries_swarm:
        req.swarm, offset = decode_swarm(buf, offset)
    if offset != len(buf):
        raise ProtocolError(f"{len(buf) - offset} trailing bytes in step request")
    return req


def encode_step_result(res: StepResult) -> bytes:
    parts = [
        _RES_FIXED.pack(res.frame_index, res.phase_index),
        np.ascontiguousarray(res.gbest_position, dtype=_F64).tobytes(),
        struct.pack(">d", res.gbest_score),
    ]
    if res.swarm is not None:
        parts.append(encode_swarm(res.swarm))
    parts.append(_EXEC_US.pack(res.exec_us))
    return b"".join(parts)


def decode_step_result(buf: bytes) -> StepResult:
    _need(buf, 0, step_result_size(), "step result")
    frame_index, phase_index = _RES_FIXED.unpack_from(buf, 0)
    offset = _RES_FIXED.size
    gbest, offset = _take_f64(buf, offset, POSE_DIM, "result pose")
    (score,) = struct.unpack_from(">d", buf, offset)
    offset += 8
    end = len(buf) - _EXEC_US.size
    swarm = None
    if end > offset:
        swarm, offset = decode_swarm(buf[:end], offset)
        if offset != end:
            raise ProtocolError("trailing bytes after swarm block in step result")
    (exec_us,) = _EXEC_US.unpack_from(buf, end)
    return StepResult(frame_index, phase_index, gbest, score, exec_us, swarm)


# -- registration and errors --------------------------------------------------

@dataclass(frozen=True)
class Register:
    version: int
    kinds: tuple
    geometry_hash: bytes
    config_hash: bytes


def encode_register(reg: Register) -> bytes:
    if len(reg.geometry_hash) != 32 or len(reg.config_hash) != 32:
        raise ProtocolError("hashes must be 32 bytes")
    return (
        _REGISTER_FIXED.pack(reg.version, len(reg.kinds))
        + bytes(int(k) for k in reg.kinds)
        + reg.geometry_hash
        + reg.config_hash
    )


def decode_register(buf: bytes) -> Register:
    _need(buf, 0, _REGISTER_FIXED.size, "register header")
    version, n = _REGISTER_FIXED.unpack_from(buf, 0)
    offset = _REGISTER_FIXED.size
    if len(buf) != offset + n + 64:
        raise ProtocolError("register payload has the wrong length")
    kinds = tuple(TaskKind(b) if b in TaskKind._value2member_map_ else b for b in buf[offset:offset + n])
    offset += n
    return Register(version, kinds, bytes(buf[offset:offset + 32]), bytes(buf[offset + 32:offset + 64]))


def encode_ack(executor_id: int, version: int = PROTOCOL_VERSION) -> bytes:
    return _ACK.pack(executor_id, version)


def decode_ack(buf: bytes) -> tuple[int, int]:
    if len(buf) != _ACK.size:
        raise ProtocolError("register ack has the wrong length")
    return _ACK.unpack(buf)


def encode_error(code: ErrorCode, reason: str) -> bytes:
    return _ERROR_FIXED.pack(int(code)) + reason.encode("utf-8")


def decode_error(buf: bytes) -> tuple[int, str]:
    _need(buf, 0, _ERROR_FIXED.size, "error code")
    (code,) = _ERROR_FIXED.unpack_from(buf, 0)
    return code, bytes(buf[_ERROR_FIXED.size:]).decode("utf-8", errors="replace")
