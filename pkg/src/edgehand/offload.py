"""Method-level task offloading: executors, placement policy and latency estimation.

A frame is optimized either as one fused task or as four phase tasks. Each
task is placed on the local or the remote executor by the policy:

* ``local_only`` never offloads;
* ``forced`` always offloads (a client with no usable accelerator);
* ``auto`` picks the executor with the smaller predicted completion time,
  where remote completion = execution + round-trip latency + transfer of
  request and response bytes. Ties stay local.

Placement only changes timing. Inputs are rounded to wire precision before
any task is built, so both executors compute on identical numbers.
"""

from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

from .config import Settings, config_hash, geometry_hash
from .kinematics import DepthMap
from .pso import FrameOutcome
from .transport import codec
from .transport.channel import Channel, TransportError
from .transport.codec import Message, MessageType, StepRequest, StepResult, TaskKind
from .transport.simnet import SimulatedLink, step_message_key
from .worker import execute_step

log = logging.getLogger(__name__)

LOCAL = "local"
REMOTE = "remote"


class Policy(str, enum.Enum):
    FORCED = "forced"
    AUTO = "auto"
    LOCAL_ONLY = "local_only"


class Granularity(str, enum.Enum):
    SINGLE_STEP = "single_step"
    MULTI_STEP = "multi_step"


class ConfigurationError(ValueError):
    pass


class RegistrationRefused(RuntimeError):
    def __init__(self, code: int, reason: str):
        super().__init__(f"registration refused ({code}): {reason}")
        self.code = code
        self.reason = reason


class TaskError(RuntimeError):
    pass


class RemoteTimeout(TaskError):
    def __init__(self, waited_ms: float):
        super().__init__(f"remote task exceeded {waited_ms:.1f} ms")
        self.waited_ms = waited_ms


@dataclass(frozen=True)
class PolicyConfig:
    mode: str = "auto"
    ewma_alpha: float = 0.3
    initial_local_ms: Optional[float] = None
    initial_remote_ms: Optional[float] = None
    timeout_ms: float = 2000.0

    def __post_init__(self):
        Policy(self.mode)
        if not 0 < self.ewma_alpha <= 1:
            raise ValueError("ewma_alpha must lie in (0, 1]")
        if not self.timeout_ms > 0:
            raise ValueError("timeout_ms must be positive")

    @property
    def policy(self) -> Policy:
        return Policy(self.mode)


@dataclass(frozen=True)
class TaskDescriptor:
    kind: TaskKind
    payload_bytes: int
    frame_index: int
    phase_index: int = 0
    response_bytes: int = 0

    @property
    def phase_count(self) -> int:
        return 4 if self.kind == TaskKind.FUSED_FRAME else 1


def describe(req: StepRequest, swarm_size: int, phases: int = 4) -> TaskDescriptor:
    """Descriptor with exact request and expected response sizes for ``req``."""
    payload = codec.HEADER_SIZE + len(codec.encode_step_request(req))
    returns_swarm = req.kind == TaskKind.PHASE and req.phase_index < phases - 1
    response = codec.HEADER_SIZE + codec.step_result_size(swarm_size if returns_swarm else None)
    return TaskDescriptor(req.kind, payload, req.frame_index, req.phase_index, response)


def ewma(estimate: Optional[float], observed: float, alpha: float) -> float:
    return observed if estimate is None else alpha * observed + (1.0 - alpha) * estimate


class LatencyEstimator:
    """EWMA estimates of execution time per (executor, kind) and of the link."""

    def __init__(self, alpha: float = 0.3):
        self.alpha = alpha
        self.exec_ms: dict[tuple[str, TaskKind], float] = {}
        self.rtt_ms: Optional[float] = None
        self.bandwidth_bytes_per_ms: Optional[float] = None

    def observe_exec(self, executor: str, kind: TaskKind, ms: float) -> None:
        key = (executor, kind)
        self.exec_ms[key] = ewma(self.exec_ms.get(key), ms, self.alpha)
        # a phase measurement seeds the fused estimate and vice versa
        other, factor = (TaskKind.FUSED_FRAME, 4.0) if kind == TaskKind.PHASE else (TaskKind.PHASE, 0.25)
        self.exec_ms.setdefault((executor, other), ms * factor)

    def seed_exec(self, executor: str, phase_ms: float) -> None:
        self.exec_ms[(executor, TaskKind.PHASE)] = phase_ms
        self.exec_ms[(executor, TaskKind.FUSED_FRAME)] = 4.0 * phase_ms

    def observe_rtt(self, ms: float) -> None:
        self.rtt_ms = ewma(self.rtt_ms, max(ms, 0.0), self.alpha)

    def observe_bandwidth(self, bytes_per_ms: float) -> None:
        self.bandwidth_bytes_per_ms = ewma(self.bandwidth_bytes_per_ms, bytes_per_ms, self.alpha)

    def observe_transfer(self, nbytes: int, network_ms: float) -> None:
        """Attribute the part of ``network_ms`` not explained by bandwidth to latency."""
        if self.bandwidth_bytes_per_ms:
            self.observe_rtt(network_ms - nbytes / self.bandwidth_bytes_per_ms)

    def has_estimates(self, remote: bool) -> bool:
        if (LOCAL, TaskKind.PHASE) not in self.exec_ms:
            return False
        if not remote:
            return True
        return (REMOTE, TaskKind.PHASE) in self.exec_ms and self.rtt_ms is not None and bool(self.bandwidth_bytes_per_ms)

    def predict(self, executor: str, task: TaskDescriptor) -> float:
        estimate = self.exec_ms[(executor, task.kind)]
        if executor == REMOTE:
            estimate += self.rtt_ms + (task.payload_bytes + task.response_bytes) / self.bandwidth_bytes_per_ms
        return estimate


def decide(task: TaskDescriptor, policy: PolicyConfig, estimator: LatencyEstimator, has_remote: bool = True) -> str:
    mode = policy.policy
    if mode == Policy.FORCED:
        if not has_remote:
            raise ConfigurationError("forced offloading needs a registered remote executor")
        return REMOTE
    if mode == Policy.LOCAL_ONLY or not has_remote:
        return LOCAL
    local = estimator.predict(LOCAL, task)
    remote = estimator.predict(REMOTE, task)
    return REMOTE if remote < local else LOCAL


class LocalExecutor:
    """Runs tasks in-process. With ``phase_ms`` set, reports modeled instead of measured time."""

    def __init__(self, settings: Settings, phase_ms: Optional[float] = None, trace: Optional[list] = None):
        self.settings = settings
        self.phase_ms = phase_ms
        self.trace = trace

    def run(self, req: StepRequest, task: TaskDescriptor) -> tuple[StepResult, float]:
        started = time.perf_counter()
        result = execute_step(req, self.settings, self.trace)
        measured = (time.perf_counter() - started) * 1000.0
        return result, (measured if self.phase_ms is None else self.phase_ms * task.phase_count)


class RemoteExecutor:
    """Client end of a remote session.

    With a ``link`` (virtual clock), network time comes from the simulated
    link and execution time from ``phase_ms``; otherwise both are measured.
    """

    def __init__(self, channel: Channel, link: Optional[SimulatedLink] = None,
                 phase_ms: Optional[float] = None, timeout_ms: float = 2000.0):
        if (link is None) != (phase_ms is None):
            raise ValueError("virtual timing needs both a simulated link and a phase time model")
        self.channel = channel
        self.link = link
        self.phase_ms = phase_ms
        self.timeout_ms = timeout_ms
        self.executor_id: Optional[int] = None

    @property
    def virtual(self) -> bool:
        return self.link is not None

    def _network_ms(self, out_bytes: int, in_bytes: int, req: Optional[StepRequest] = None) -> float:
        if req is None:
            return self.link.send(out_bytes) + self.link.send(in_bytes)
        return (self.link.send(out_bytes, step_message_key(req.frame_index, req.phase_index, False))
                + self.link.send(in_bytes, step_message_key(req.frame_index, req.phase_index, True)))

    def register(self, settings: Settings, version: int = codec.PROTOCOL_VERSION) -> int:
        reg = codec.Register(version, (TaskKind.FUSED_FRAME, TaskKind.PHASE), geometry_hash(settings), config_hash(settings))
        reply, out_bytes, in_bytes = self.channel.request(Message(MessageType.REGISTER, codec.encode_register(reg)))
        if self.virtual:
            self._network_ms(out_bytes, in_bytes)
        if reply.type == MessageType.ERROR:
            raise RegistrationRefused(*codec.decode_error(reply.payload))
        if reply.type != MessageType.REGISTER_ACK:
            raise codec.ProtocolError(f"expected REGISTER_ACK, got {reply.type.name}")
        self.executor_id, _ = codec.decode_ack(reply.payload)
        return self.executor_id

    def ping(self) -> float:
        started = time.perf_counter()
        reply, out_bytes, in_bytes = self.channel.request(Message(MessageType.PING))
        if reply.type != MessageType.PONG:
            raise codec.ProtocolError(f"expected PONG, got {reply.type.name}")
        if self.virtual:
            return self._network_ms(out_bytes, in_bytes)
        return (time.perf_counter() - started) * 1000.0

    def run(self, req: StepRequest, task: TaskDescriptor) -> tuple[StepResult, float, float]:
        """Returns (result, exec ms, network ms)."""
        started = time.perf_counter()
        reply, out_bytes, in_bytes = self.channel.request(
            Message(MessageType.STEP_REQUEST, codec.encode_step_request(req)))
        measured = (time.perf_counter() - started) * 1000.0
        if self.virtual:
            exec_ms = self.phase_ms * task.phase_count
            network_ms = self._network_ms(out_bytes, in_bytes, req)
        if reply.type == MessageType.ERROR:
            code, reason = codec.decode_error(reply.payload)
            raise TaskError(f"remote error {code}: {reason}")
        if reply.type != MessageType.STEP_RESULT:
            raise codec.ProtocolError(f"expected STEP_RESULT, got {reply.type.name}")
        result = codec.decode_step_result(reply.payload)
        if not self.virtual:
            exec_ms = result.exec_us / 1000.0
            network_ms = max(measured - exec_ms, 0.0)
        if exec_ms + network_ms > self.timeout_ms:
            raise RemoteTimeout(self.timeout_ms)
        return result, exec_ms, network_ms


@dataclass
class TaskTiming:
    executor: str
    elapsed_ms: float
    exec_ms: float = 0.0
    network_ms: float = 0.0
    failed: bool = False


@dataclass
class DispatchStats:
    tasks: int = 0
    remote_tasks: int = 0
    failures: int = 0
    timings: list = field(default_factory=list)


class Dispatcher:
    """Routes one tracking session's tasks. Synchronous: one task in flight."""

    def __init__(self, settings: Settings, policy: PolicyConfig = PolicyConfig(mode="local_only"),
                 granularity: str = Granularity.SINGLE_STEP, local: Optional[LocalExecutor] = None,
                 remote: Optional[RemoteExecutor] = None, overhead_ms: float = 0.1):
        self.settings = settings
        self.policy = policy
        self.granularity = Granularity(granularity)
        self.local = local or LocalExecutor(settings)
        self.remote: Optional[RemoteExecutor] = None
        self.overhead_ms = overhead_ms
        self.estimator = LatencyEstimator(policy.ewma_alpha)
        self.stats = DispatchStats()
        if policy.initial_local_ms is not None:
            self.estimator.seed_exec(LOCAL, policy.initial_local_ms)
        if remote is not None:
            self.register_executor(remote)
        if policy.policy == Policy.FORCED and self.remote is None:
            raise ConfigurationError("forced offloading needs a registered remote executor")

    def register_executor(self, remote: RemoteExecutor) -> int:
        executor_id = remote.register(self.settings)
        self.remote = remote
        if self.policy.initial_remote_ms is not None:
            self.estimator.seed_exec(REMOTE, self.policy.initial_remote_ms)
        return executor_id

    @property
    def step_round_trips(self) -> int:
        return self.stats.remote_tasks

    def decide(self, task: TaskDescriptor) -> str:
        return decide(task, self.policy, self.estimator, self.remote is not None)

    def _run_local(self, req, task) -> tuple[StepResult, TaskTiming]:
        result, exec_ms = self.local.run(req, task)
        self.estimator.observe_exec(LOCAL, task.kind, exec_ms)
        return result, TaskTiming(LOCAL, exec_ms + self.overhead_ms, exec_ms)

    def dispatch(self, req: StepRequest, choice: Optional[str] = None) -> tuple[StepResult, TaskTiming]:
        task = describe(req, self.settings.pso.swarm_size, self.settings.pso.phases)
        choice = choice or self.decide(task)
        self.stats.tasks += 1
        if choice == REMOTE:
            if self.remote is None:
                raise ConfigurationError("no remote executor registered")
            self.stats.remote_tasks += 1
            try:
                result, exec_ms, network_ms = self.remote.run(req, task)
            except RemoteTimeout as exc:
                waited = exc.waited_ms
            except (TransportError, TaskError, codec.ProtocolError) as exc:
                waited = 0.0
                log.warning("remote task failed, running locally: %s", exc)
            else:
                self.estimator.observe_exec(REMOTE, task.kind, exec_ms)
                self.estimator.observe_transfer(task.payload_bytes + task.response_bytes, network_ms)
                timing = TaskTiming(REMOTE, exec_ms + network_ms + self.overhead_ms, exec_ms, network_ms)
                self.stats.timings.append(timing)
                return result, timing
            self.stats.failures += 1
            try:
                result, timing = self._run_local(req, task)
            except Exception as exc:
                raise TaskError(f"remote and local execution both failed: {exc}") from exc
            timing.elapsed_ms += waited
            timing.failed = True
            self.stats.timings.append(timing)
            return result, timing
        result, timing = self._run_local(req, task)
        self.stats.timings.append(timing)
        return result, timing

    def _needs_calibration(self) -> bool:
        return self.policy.policy == Policy.AUTO and not self.estimator.has_estimates(self.remote is not None)

    def optimize(self, center, d_obs: DepthMap, frame_index: int = 0, frames_skipped: int = 0) -> FrameOutcome:
        center = codec.wire_pose(center)
        depth_mm = codec.quantize_depth(d_obs)
        seed = self.settings.pso.seed
        trips_before = self.stats.remote_tasks
        bytes_before = self.remote.channel.bytes_transferred if self.remote else 0
        calibrating = self._needs_calibration()
        placements: list = []
        probe_ms = 0.0

        if self.granularity == Granularity.SINGLE_STEP and not calibrating:
            req = StepRequest(frame_index, TaskKind.FUSED_FRAME, 0, seed, frames_skipped, center, depth_mm)
            result, timing = self.dispatch(req)
            timings = [timing]
        else:
            # first auto frame: measure one phase on each executor plus a bare round trip
            if calibrating and self.remote is not None:
                placements = [LOCAL, REMOTE]
                probe_ms = self.remote.ping()
                self.estimator.observe_rtt(probe_ms)
            elif calibrating:
                placements = [LOCAL]
            timings = []
            swarm = None
            for phase in range(self.settings.pso.phases):
                req = StepRequest(frame_index, TaskKind.PHASE, phase, seed, frames_skipped, center, depth_mm,
                                  swarm if phase > 0 else None)
                choice = placements[phase] if phase < len(placements) else None
                if choice is None and any(t.failed for t in timings):
                    choice = LOCAL  # after a remote failure finish the frame locally
                if choice == REMOTE and calibrating:
                    task = describe(req, self.settings.pso.swarm_size)
                    result, timing = self.dispatch(req, REMOTE)
                    if not timing.failed:
                        transfer = timing.network_ms - self.estimator.rtt_ms
                        nbytes = task.payload_bytes + task.response_bytes
                        self.estimator.observe_bandwidth(nbytes / max(transfer, 1e-3))
                else:
                    result, timing = self.dispatch(req, choice)
                timings.append(timing)
                swarm = result.swarm
        bytes_after = self.remote.channel.bytes_transferred if self.remote else 0
        return FrameOutcome(
            pose=result.gbest_position.copy(),
            score=result.gbest_score,
            loop_ms=sum(t.elapsed_ms for t in timings) + probe_ms,
            round_trips=self.stats.remote_tasks - trips_before,
            bytes_transferred=bytes_after - bytes_before,
            executors=tuple(t.executor for t in timings),
        )


def make_dispatcher(settings: Settings, policy: PolicyConfig, granularity: str = Granularity.SINGLE_STEP,
                    remote: Optional[RemoteExecutor] = None, local_phase_ms: Optional[float] = None,
                    overhead_ms: float = 0.1, trace: Optional[list] = None) -> Dispatcher:
    return Dispatcher(settings, policy, granularity, LocalExecutor(settings, local_phase_ms, trace), remote, overhead_ms)
