"""Deterministic link model: fixed latency, seeded jitter, finite bandwidth."""

from __future__ import annotations

from dataclasses import dataclass

from .. import rng


@dataclass(frozen=True)
class NetworkProfile:
    name: str
    base_latency_ms: float
    jitter_min_ms: float
    jitter_max_ms: float
    bandwidth_bytes_per_ms: float
    jitter_seed: int = 0

    def __post_init__(self):
        if self.base_latency_ms + self.jitter_min_ms < 0:
            raise ValueError("one-way latency can become negative")
        if self.jitter_max_ms < self.jitter_min_ms:
            raise ValueError("jitter_max_ms must be >= jitter_min_ms")
        if not self.bandwidth_bytes_per_ms > 0:
            raise ValueError("bandwidth must be positive")

    @property
    def mean_latency_ms(self) -> float:
        return self.base_latency_ms + 0.5 * (self.jitter_min_ms + self.jitter_max_ms)


# Gigabit-class wired link and a congested 802.11 link (10-60 ms one way)
ETHERNET = NetworkProfile("ethernet", 0.3, -0.1, 0.1, 125000.0)
WIFI = NetworkProfile("wifi", 10.0, 0.0, 50.0, 3125.0)
LOOPBACK = NetworkProfile("loopback", 0.0, 0.0, 0.0, float("inf"))
PROFILES = {p.name: p for p in (ETHERNET, WIFI, LOOPBACK)}


def get_profile(name: str) -> NetworkProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown network profile {name!r}; known: {', '.join(PROFILES)}") from None


def jitter_draw(profile: NetworkProfile, send_counter: int) -> float:
    if profile.jitter_max_ms == profile.jitter_min_ms:
        return profile.jitter_min_ms
    u = float(rng.uniform_block(profile.jitter_seed, rng.STREAM_NETWORK, send_counter, 1)[0])
    return profile.jitter_min_ms + u * (profile.jitter_max_ms - profile.jitter_min_ms)


def transfer_ms(payload_bytes: int, profile: NetworkProfile) -> float:
    return payload_bytes / profile.bandwidth_bytes_per_ms


def simulated_send(payload_bytes: int, profile: NetworkProfile, send_counter: int) -> float:
    """One-way delivery delay in ms for the ``send_counter``-th message on a link."""
    return profile.base_latency_ms + jitter_draw(profile, send_counter) + transfer_ms(payload_bytes, profile)


# jitter counters for control messages live above every step-message key
CONTROL_KEY_BASE = 1 << 60


def step_message_key(frame_index: int, phase_index: int, reply: bool) -> int:
    """Jitter counter for one step message, independent of how many messages preceded it."""
    return (frame_index << 4) | (phase_index << 1) | int(reply)


class SimulatedLink:
    """Virtual-clock link: every send returns its delay.

    A send with a ``key`` draws its jitter from that counter; otherwise the
    link's own control-message counter is used and advanced.
    """

    def __init__(self, profile: NetworkProfile):
        self.profile = profile
        self.sends = 0
        self.control_sends = 0
        self.total_delay_ms = 0.0

    def send(self, payload_bytes: int, key: int | None = None) -> float:
        if key is None:
            key = CONTROL_KEY_BASE + self.control_sends
            self.control_sends += 1
        delay = simulated_send(payload_bytes, self.profile, key)
        self.sends += 1
        self.total_delay_ms += delay
        return delay
