import numpy as np
import pytest

from edgehand.config import Settings
from edgehand.kinematics import render_pose
from edgehand.objective import ObjectiveConfig
from edgehand.offload import (
    ConfigurationError,
    Dispatcher,
    LatencyEstimator,
    LocalExecutor,
    Policy,
    PolicyConfig,
    RegistrationRefused,
    RemoteExecutor,
    TaskDescriptor,
    decide,
    describe,
    ewma,
    make_dispatcher,
)
from edgehand.transport import codec
from edgehand.transport.channel import Channel, LoopbackChannel, TransportError
from edgehand.transport.codec import StepRequest, TaskKind
from edgehand.transport.simnet import ETHERNET, LOOPBACK, WIFI, SimulatedLink


def frame_inputs(settings, base_pose, shift=0.004):
    truth = base_pose.copy()
    truth[0] += shift
    return base_pose, render_pose(truth, settings.geometry, settings.camera)


def remote(settings, profile=None, phase_ms=None, channel=None):
    link = SimulatedLink(profile) if profile else None
    return RemoteExecutor(channel or LoopbackChannel(settings), link, phase_ms)


def test_ewma():
    assert ewma(None, 5.0, 0.3) == 5.0
    assert ewma(10.0, 0.0, 0.3) == pytest.approx(7.0)


def test_policy_config_validation():
    with pytest.raises(ValueError):
        PolicyConfig(mode="sometimes")
    with pytest.raises(ValueError):
        PolicyConfig(ewma_alpha=0)
    with pytest.raises(ValueError):
        PolicyConfig(timeout_ms=0)
    assert PolicyConfig().policy == Policy.AUTO


def make_estimator(local_ms, remote_ms, rtt=1.0, bw=1000.0):
    est = LatencyEstimator()
    est.seed_exec("local", local_ms)
    est.seed_exec("remote", remote_ms)
    est.observe_rtt(rtt)
    est.observe_bandwidth(bw)
    return est


TASK = TaskDescriptor(TaskKind.PHASE, 1000, 0, 0, 1000)


def test_decide_policies():
    est = make_estimator(10.0, 1.0)
    assert decide(TASK, PolicyConfig(mode="forced"), est) == "remote"
    assert decide(TASK, PolicyConfig(mode="local_only"), est) == "local"
    assert decide(TASK, PolicyConfig(mode="auto"), est) == "remote"
    assert decide(TASK, PolicyConfig(mode="auto"), est, has_remote=False) == "local"
    # remote prediction 1 + 1 + 2000/1000 = 4 ms
    assert decide(TASK, PolicyConfig(mode="auto"), make_estimator(3.9, 1.0)) == "local"
    assert decide(TASK, PolicyConfig(mode="auto"), make_estimator(4.0, 1.0)) == "local"  # ties stay local
    assert decide(TASK, PolicyConfig(mode="auto"), make_estimator(4.1, 1.0)) == "remote"


def test_estimator_predictions_scale_with_phases():
    est = make_estimator(2.0, 1.0)
    fused = TaskDescriptor(TaskKind.FUSED_FRAME, 0, 0, 0, 0)
    assert est.predict("local", fused) == pytest.approx(8.0)
    assert est.predict("remote", fused) == pytest.approx(4.0 + 1.0)
    est.observe_exec("local", TaskKind.PHASE, 4.0)
    assert est.predict("local", TASK) == pytest.approx(0.7 * 2.0 + 0.3 * 4.0)


def test_describe_matches_encoded_sizes(settings, base_pose):
    mm = codec.quantize_depth(render_pose(base_pose, settings.geometry, settings.camera))
    req = StepRequest(3, TaskKind.FUSED_FRAME, 0, 0, 0, base_pose, mm)
    t = describe(req, 64)
    assert t.payload_bytes == len(codec.encode(codec.Message(codec.MessageType.STEP_REQUEST,
                                                             codec.encode_step_request(req))))
    assert t.response_bytes == 5 + codec.step_result_size()
    assert t.phase_count == 4
    phase = describe(StepRequest(3, TaskKind.PHASE, 0, 0, 0, base_pose, mm), 64)
    assert phase.phase_count == 1
    assert phase.response_bytes == 5 + codec.step_result_size(64)


def test_forced_without_remote_is_a_configuration_error(settings):
    with pytest.raises(ConfigurationError):
        Dispatcher(settings, PolicyConfig(mode="forced"))


def test_registration_refused_on_config_mismatch(settings):
    other = Settings(objective=ObjectiveConfig(clamp_threshold=0.1))
    with pytest.raises(RegistrationRefused) as err:
        Dispatcher(settings, PolicyConfig(mode="forced"), remote=remote(other))
    assert err.value.code == codec.ErrorCode.CONFIG_MISMATCH


@pytest.mark.parametrize("granularity", ["single_step", "multi_step"])
def test_executor_transparency(settings, base_pose, granularity):
    center, obs = frame_inputs(settings, base_pose)
    local = Dispatcher(settings, PolicyConfig(mode="local_only"), granularity).optimize(center, obs, 4, 1)
    forced = Dispatcher(settings, PolicyConfig(mode="forced"), granularity, remote=remote(settings))
    out = forced.optimize(center, obs, 4, 1)
    assert np.array_equal(out.pose, local.pose) and out.score == local.score
    assert out.executors == (("remote",) if granularity == "single_step" else ("remote",) * 4)
    assert out.round_trips == len(out.executors)
    assert local.round_trips == 0 and local.bytes_transferred == 0


def test_multi_step_equals_single_step(settings, base_pose):
    center, obs = frame_inputs(settings, base_pose)
    single = Dispatcher(settings, granularity="single_step").optimize(center, obs, 2, 0)
    multi = Dispatcher(settings, PolicyConfig(mode="forced"), "multi_step", remote=remote(settings)).optimize(
        center, obs, 2, 0)
    assert np.array_equal(single.pose, multi.pose) and single.score == multi.score


def test_virtual_loop_time_is_the_analytic_sum(settings, base_pose):
    center, obs = frame_inputs(settings, base_pose)
    d = Dispatcher(settings, PolicyConfig(mode="forced"), "single_step",
                   LocalExecutor(settings, 19.0), remote(settings, LOOPBACK, 6.0), overhead_ms=0.1)
    out = d.optimize(center, obs, 0, 0)
    assert out.loop_ms == pytest.approx(24.1)
    local = Dispatcher(settings, PolicyConfig(mode="local_only"), "multi_step", LocalExecutor(settings, 19.0))
    assert local.optimize(center, obs).loop_ms == pytest.approx(4 * 19.1)


def test_bytes_reported_match_channel(settings, base_pose):
    center, obs = frame_inputs(settings, base_pose)
    ch = LoopbackChannel(settings)
    d = Dispatcher(settings, PolicyConfig(mode="forced"), "multi_step", remote=remote(settings, channel=ch))
    after_register = ch.bytes_transferred
    out = d.optimize(center, obs)
    assert out.bytes_transferred == ch.bytes_transferred - after_register
    swarm = codec.swarm_block_size(64)
    expected = (4 * (5 + codec.step_request_size(128, 128)) + 3 * swarm
                + 4 * (5 + codec.step_result_size()) + 3 * swarm)
    assert out.bytes_transferred == expected


class FlakyChannel(Channel):
    """Loopback that fails step requests after ``ok`` of them."""

    def __init__(self, settings, ok):
        super().__init__()
        self.inner = LoopbackChannel(settings)
        self.ok = ok
        self.steps = 0

    def _exchange(self, data):
        if data[4] == codec.MessageType.STEP_REQUEST:
            self.steps += 1
            if self.steps > self.ok:
                raise TransportError("link down")
        return self.inner._exchange(data)


def test_remote_failure_falls_back_for_the_rest_of_the_frame(settings, base_pose):
    center, obs = frame_inputs(settings, base_pose)
    ch = FlakyChannel(settings, ok=1)
    d = Dispatcher(settings, PolicyConfig(mode="forced"), "multi_step", remote=remote(settings, channel=ch))
    out = d.optimize(center, obs)
    assert out.executors == ("remote", "local", "local", "local")
    assert d.stats.failures == 1 and ch.steps == 2
    reference = Dispatcher(settings, granularity="multi_step").optimize(center, obs)
    assert np.array_equal(out.pose, reference.pose)


def test_remote_timeout_falls_back_and_charges_the_wait(settings, base_pose):
    center, obs = frame_inputs(settings, base_pose)
    slow = remote(settings, WIFI, phase_ms=3000.0)
    d = Dispatcher(settings, PolicyConfig(mode="forced", timeout_ms=2000.0), "single_step",
                   LocalExecutor(settings, 19.0), slow, overhead_ms=0.1)
    out = d.optimize(center, obs)
    assert out.executors == ("local",)
    assert out.loop_ms == pytest.approx(2000.0 + 4 * 19.0 + 0.1)
    assert d.stats.failures == 1


def test_auto_calibrates_then_prefers_the_faster_side(settings, base_pose):
    center, obs = frame_inputs(settings, base_pose)
    d = make_dispatcher(settings, PolicyConfig(mode="auto"), "single_step",
                        remote(settings, ETHERNET, 6.0), local_phase_ms=19.0)
    first = d.optimize(center, obs, 0)
    assert first.executors[:2] == ("local", "remote")
    assert d.estimator.has_estimates(True)
    assert d.estimator.bandwidth_bytes_per_ms == pytest.approx(ETHERNET.bandwidth_bytes_per_ms, rel=0.2)
    assert d.optimize(center, obs, 1).executors == ("remote",)

    wifi = make_dispatcher(settings, PolicyConfig(mode="auto"), "single_step",
                           remote(settings, WIFI, 6.0), local_phase_ms=19.0)
    wifi.optimize(center, obs, 0)
    assert wifi.optimize(center, obs, 1).executors == ("local",)


def test_auto_without_remote_stays_local(settings, base_pose):
    center, obs = frame_inputs(settings, base_pose)
    d = Dispatcher(settings, PolicyConfig(mode="auto"), "single_step", LocalExecutor(settings, 19.0))
    assert set(d.optimize(center, obs).executors) == {"local"}
    assert d.optimize(center, obs, 1).executors == ("local",)


def test_virtual_remote_needs_both_models(settings):
    with pytest.raises(ValueError):
        RemoteExecutor(LoopbackChannel(settings), SimulatedLink(ETHERNET), None)
