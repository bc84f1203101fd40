"""Attack models: blind and detect-then-jam jamming, prefix replay, passive sniffing."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .channel import SPEED_OF_LIGHT, ChannelConfig, Position, TimedEmission, complex_noise
from .detector import detect_pattern
from .protocol import (
    Adversary,
    InitiatorNode,
    ReflectorNode,
    SessionResult,
    Timeline,
    Transmission,
    _receive,
    request_pattern,
    response_pattern,
    run_session,
)
from .sequences import BasebandSignal, Role, SharedKey

# a bounded jammer transmits at most what a ranging node does (unit-power symbols)
NODE_TX_POWER = 1.0


class JamMode(enum.Enum):
    CONTINUOUS = "continuous"
    INTERMITTENT = "intermittent"


@dataclass(frozen=True)
class JammerConfig:
    mode: JamMode
    power: float
    position: Position
    duty_cycle: float = 1.0
    pulse_length: int = 512
    seed: int = 0
    max_power: float = NODE_TX_POWER

    def __post_init__(self):
        if self.power < 0:
            raise ValueError("jam power must be >= 0")
        if self.power > self.max_power:
            raise ValueError(f"jam power {self.power} exceeds the bound {self.max_power}")
        if not 0 <= self.duty_cycle <= 1:
            raise ValueError("duty_cycle must lie in [0, 1]")
        if self.pulse_length < 1:
            raise ValueError("pulse_length must be >= 1")


def jam(cfg: JammerConfig, timeline: Timeline) -> list[TimedEmission]:
    """Noise emissions for one session.

    CONTINUOUS covers the whole timeline. INTERMITTENT splits the timeline
    into slots of pulse_length / duty_cycle samples and puts one noise
    pulse at a uniformly random start inside each slot. The jammer draws
    from its own seed so it never shifts the session's noise stream.
    """
    rng = np.random.default_rng(cfg.seed)
    T = timeline.sample_period
    n = timeline.n_samples
    if cfg.mode is JamMode.CONTINUOUS:
        sig = BasebandSignal(complex_noise(rng, n, cfg.power), T, 1 / T)
        return [TimedEmission(sig, 0.0, cfg.position, "jammer")]
    if cfg.duty_cycle == 0:
        return []
    slot = int(math.ceil(cfg.pulse_length / cfg.duty_cycle))
    out = []
    for s in range(n // slot):
        start = s * slot + int(rng.integers(0, slot - cfg.pulse_length + 1))
        sig = BasebandSignal(complex_noise(rng, cfg.pulse_length, cfg.power), T, 1 / T)
        out.append(TimedEmission(sig, start * T, cfg.position, "jammer"))
    return out


@dataclass
class Jammer(Adversary):
    config: JammerConfig

    def emissions(self, timeline, rng):
        return jam(self.config, timeline)


@dataclass
class DetectThenJam(Adversary):
    """Selective jammer that must detect a ranging signal before jamming it.

    Without the shared key it can only correlate against sequences derived
    from its own guessed key. Each detection would trigger a burst; what
    it actually emits is the blind ``fallback`` pattern plus those bursts.
    """

    guess_key: SharedKey
    position: Position
    initiator_id: int
    reflector_ids: Sequence[int]
    fallback: JammerConfig
    channel: ChannelConfig
    alpha: float = 50.0
    l0: int = 256
    burst_length: int = 512
    detections: int = 0

    def emissions(self, timeline, rng):
        return jam(self.fallback, timeline)

    def react(self, transmissions, timeline, rng):
        from .protocol import RangingConfig

        cfg = RangingConfig(sample_rate=self.channel.sample_rate, bandwidth=self.channel.sample_rate,
                            l0=self.l0, alpha=self.alpha)
        heard = _receive(timeline.n_samples, self.position,
                         [TimedEmission(t.signal, t.start_time, t.position, t.source_id) for t in transmissions],
                         self.channel, np.zeros(timeline.n_samples, dtype=np.complex128))
        heard_sig = BasebandSignal(heard, timeline.sample_period, 1 / timeline.sample_period)
        # the guessed epoch does not matter: without the key every guess is equally blind
        guesses = [request_pattern(self.guess_key, self.initiator_id, 0, cfg)]
        guesses += [response_pattern(self.guess_key, r, 0, 0, cfg) for r in self.reflector_ids]
        bursts = []
        for g in guesses:
            det = detect_pattern(heard_sig, g, self.alpha, self.l0, interpolate=False)
            if det is None:
                continue
            self.detections += 1
            start = (det.peak_index + len(g)) * timeline.sample_period
            sig = BasebandSignal(complex_noise(np.random.default_rng(self.fallback.seed + self.detections),
                                               self.burst_length, self.fallback.power),
                                 timeline.sample_period, 1 / timeline.sample_period)
            bursts.append(TimedEmission(sig, start, self.position, "selective"))
        return bursts


@dataclass
class ReplayAttacker(Adversary):
    """Record the first N samples of a response, overshadow the rest, replay the prefix.

    The overshadowing signal is complex Gaussian noise at ``jam_power``
    covering samples N..L of the response as it passes the attacker; the
    recorded prefix, rescaled to the same power, replaces that noise
    starting ``replay_delay`` samples after the recording ends.
    """

    record_length: int
    position: Position
    target: int
    replay_delay: int = 0
    jam_power: float = NODE_TX_POWER
    responses: tuple[int, ...] = (0,)
    tof_max: float = 1e-6
    seed: int = 0
    # filled by react(): (response index, emission start time) per replay
    replays: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        if self.record_length < 1:
            raise ValueError("record_length must be >= 1")
        if self.replay_delay < 0:
            raise ValueError("replay_delay must be >= 0")

    def n_max(self, sample_period: float) -> int:
        return int(math.floor(self.tof_max / sample_period + 1e-9))

    def detectable_by_construction(self, sample_period: float) -> bool:
        return self.record_length > self.n_max(sample_period)

    def react(self, transmissions, timeline, rng):
        own = np.random.default_rng(self.seed)
        T = timeline.sample_period
        out = []
        self.replays = []
        for t in transmissions:
            if t.role != Role.RESP or t.source_id != self.target or t.n not in self.responses:
                continue
            L = len(t.signal)
            N = min(self.record_length, L)
            x = t.signal.samples[:N]
            px = float(np.mean(np.abs(x) ** 2))
            x = x * math.sqrt(self.jam_power / px) if px > 0 else x
            span = max(L, 2 * N + self.replay_delay) - N
            buf = complex_noise(own, span, self.jam_power)
            buf[L - N:] = 0.0
            buf[self.replay_delay:self.replay_delay + N] = x
            passing = t.start_time + t.position.distance_to(self.position) / SPEED_OF_LIGHT
            start = passing + N * T
            out.append(TimedEmission(BasebandSignal(buf, T, 1 / T), start, self.position, "replay"))
            self.replays.append((t.n, start + self.replay_delay * T))
        return out


@dataclass(frozen=True)
class AttackOutcome:
    x_detected: bool
    y_detected: bool
    enlarged_accepted: bool
    result: SessionResult


def enlargement_attack(attacker: ReplayAttacker, initiator: InitiatorNode, reflectors: Sequence[ReflectorNode],
                       channel: ChannelConfig, epoch: int,
                       rng: Optional[np.random.Generator] = None) -> AttackOutcome:
    """Run a session under a prefix-replay attack and classify what the initiator saw.

    X counts as detected when the initiator qualified a peak of the target
    pattern at the replay's arrival lag, either as the kept detection or
    as a copy dropped by the duplicate check. Y counts as detected when the
    kept detection sits on the legitimate arrival.
    """
    result = run_session(initiator, reflectors, channel, epoch, [attacker], rng)
    T = initiator.config.sample_period
    tol = initiator.config.peak_exclusion + 1
    refl = {r.id: r for r in reflectors}[attacker.target]
    d_ri = refl.position.distance_to(initiator.position)
    d_ai = attacker.position.distance_to(initiator.position)
    legit = {t.n: t.start_time for t in result.transmissions if t.role == Role.RESP and t.source_id == refl.id}
    kept = {d.key: d.detection.peak_index for d in result.detections}
    dropped = {}
    for key, m in result.duplicates:
        dropped.setdefault(key, []).append(m)

    x_det, y_det = False, True
    for n, t_replay in attacker.replays:
        key = (refl.id, n)
        x_lag = (t_replay + d_ai / SPEED_OF_LIGHT) / T
        y_lag = (legit[n] + d_ri / SPEED_OF_LIGHT) / T
        seen = ([kept[key]] if key in kept else []) + dropped.get(key, [])
        x_det |= any(abs(m - x_lag) <= tol for m in seen)
        y_det &= key in kept and abs(kept[key] - y_lag) <= tol
    outcome = result.outcomes[refl.id]
    enlarged = any(d > outcome.true_distance + SPEED_OF_LIGHT * T for d in outcome.responses.values())
    return AttackOutcome(x_det, y_det, enlarged, result)


@dataclass(frozen=True)
class SnifferObserver:
    """Passive listener. ``threshold`` is its energy-detection level; edges are given by oracle."""

    position: Position
    threshold: float = 0.0


@dataclass(frozen=True)
class SnifferEstimate:
    reflector_id: int
    tof_estimate: float
    true_tof: float

    @property
    def error(self) -> float:
        return self.tof_estimate - self.true_tof


def sniffer_estimate(observer: SnifferObserver, result: SessionResult, window: int, *,
                     waiting_known: bool = False, assumption: str = "colocated",
                     response_index: int = 0) -> list[SnifferEstimate]:
    """Best-case eavesdropper estimate of each reflector's ToF.

    Edge times are exact: the end of the request and the end of response
    ``response_index`` as they reach the observer. Unknown waiting periods
    are replaced by their mean (W-1)T/2. ``assumption`` picks how the
    unknown observer geometry is cancelled: "colocated" with the
    initiator or at the "midpoint" between initiator and reflector.
    """
    if assumption not in ("colocated", "midpoint"):
        raise ValueError(f"unknown geometry assumption {assumption!r}")
    T = result.timeline.sample_period
    ini = result.initiator_position
    t_hat_s = result.timeline.t_sent + ini.distance_to(observer.position) / SPEED_OF_LIGHT
    out = []
    for t in result.transmissions:
        if t.role != Role.RESP or t.n != response_index:
            continue
        waits = result.waiting_samples[t.source_id]
        t_hat_r = t.end_time - T + t.position.distance_to(observer.position) / SPEED_OF_LIGHT
        tw = float(np.sum(waits[:response_index + 1])) * T if waiting_known else (
            (response_index + 1) * (window - 1) / 2 * T)
        t_resp = (response_index + 1) * t.duration
        span = t_hat_r - t_hat_s - tw - t_resp
        tof = span / 2 if assumption == "colocated" else span
        out.append(SnifferEstimate(t.source_id, tof, t.position.distance_to(ini) / SPEED_OF_LIGHT))
    return out
