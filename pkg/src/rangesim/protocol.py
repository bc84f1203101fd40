"""Initiator/reflector behaviour and end-to-end broadcast ranging sessions.

All nodes sample on one global grid (sample 0 is the first request sample).
Node clocks only matter for epoch bookkeeping: which sequences a node
derives and whether it takes part in a session.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Hashable, Optional, Sequence

import numpy as np

from .channel import (
    SPEED_OF_LIGHT,
    ChannelConfig,
    Position,
    TimedEmission,
    complex_noise,
    delay_samples,
    free_space_gain,
    place,
)
from .detector import detect_pattern
from .ranging import BatchEstimate, RangingObservation, batch_estimate, compute_tof, tof_to_distance
from .sequences import (
    BasebandSignal,
    EpochIndex,
    Role,
    SequenceLabel,
    SharedKey,
    build_sync_frame,
    decode_sync_frame,
    derive_sequence,
    derive_waiting_samples,
    modulate_bpsk,
    postamble_sequence,
    upsample,
)
from .sic import SicDetection, detect_all, estimate_attenuation

MAX_DRIFT_PPM = 1000.0
SYNC_EPOCH_SEARCH = 2
# SYNC symbols are stretched over this many ranging symbol periods so the
# data payload stays inside a band-limited channel without equalization
SYNC_SYMBOL_STRETCH = 2


class NodeState(enum.Enum):
    IDLE = "idle"
    SCANNING = "scanning"
    RESPONDING = "responding"


@dataclass
class NodeClock:
    drift_ppm: float = 0.0
    offset: float = 0.0
    processing_delay: float = 0.0

    def __post_init__(self):
        if abs(self.drift_ppm) > MAX_DRIFT_PPM:
            raise ValueError(f"clock drift beyond +/-{MAX_DRIFT_PPM} ppm")

    def local_time(self, t_global: float) -> float:
        return t_global * (1 + self.drift_ppm * 1e-6) + self.offset


def check_epoch(clock: NodeClock, t_global: float, epoch_duration: float) -> EpochIndex:
    return EpochIndex.at(clock.local_time(t_global), epoch_duration)


def resync_period(epoch_duration: float, drift_ppm: float) -> float:
    """Seconds until two clocks drifting by ``drift_ppm`` disagree by half an epoch."""
    if drift_ppm == 0:
        return math.inf
    return 0.5 * epoch_duration / (abs(drift_ppm) * 1e-6)


@dataclass(frozen=True)
class RangingConfig:
    sequence_length: int = 512
    alpha: float = 50.0
    l0: int = 256
    window: int = 1000
    batch_size: int = 10
    sample_rate: float = 100e6
    bandwidth: float = 100e6
    tof_max: float = 1e-6
    hw_latency: float = 0.0
    epoch_duration: float = 1.0
    sic: bool = True
    interpolation: bool = True
    duplicate_check: bool = True
    main_lobe: Optional[int] = None

    def __post_init__(self):
        errors = self.violations()
        if errors:
            raise ValueError("; ".join(errors))

    def violations(self) -> list[str]:
        out = []
        if self.sequence_length < 1:
            out.append("sequence_length must be >= 1")
        if self.alpha < 1:
            out.append("alpha must be >= 1")
        if self.l0 < 1:
            out.append("l0 must be >= 1")
        if self.window < 1:
            out.append("window must be >= 1")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if self.sample_rate <= 0 or self.bandwidth <= 0:
            out.append("sample_rate and bandwidth must be positive")
        elif self.bandwidth > self.sample_rate:
            out.append("bandwidth must not exceed sample_rate")
        else:
            ratio = self.sample_rate / self.bandwidth
            if abs(ratio - round(ratio)) > 1e-9:
                out.append("sample_rate / bandwidth must be an integer")
        if self.tof_max <= 0:
            out.append("tof_max must be positive")
        if self.epoch_duration <= 0:
            out.append("epoch_duration must be positive")
        if not out and self.session_span > self.epoch_duration:
            out.append("session does not fit in one epoch")
        return out

    @property
    def upsample_factor(self) -> int:
        return int(round(self.sample_rate / self.bandwidth))

    @property
    def sample_period(self) -> float:
        return 1.0 / self.sample_rate

    @property
    def pattern_samples(self) -> int:
        return self.sequence_length * self.upsample_factor

    @property
    def response_duration(self) -> float:
        return self.pattern_samples * self.sample_period

    @property
    def n_max(self) -> int:
        """Largest one-way delay in samples still inside the allowed range."""
        return int(math.ceil(self.tof_max * self.sample_rate))

    @property
    def peak_exclusion(self) -> int:
        return self.main_lobe if self.main_lobe is not None else 2 * self.upsample_factor

    @property
    def session_span(self) -> float:
        """Worst-case time from the first request sample to the last response sample."""
        n = (self.pattern_samples + self.batch_size * (self.window - 1 + self.pattern_samples)
             + 2 * self.n_max + math.ceil(self.hw_latency * self.sample_rate))
        return n * self.sample_period


@dataclass
class ReflectorNode:
    id: int
    position: Position
    clock: NodeClock = field(default_factory=NodeClock)
    key: Optional[SharedKey] = None
    current_epoch: Optional[int] = None
    hw_latency: float = 0.0
    state: NodeState = NodeState.IDLE


@dataclass
class InitiatorNode:
    id: int
    position: Position
    key: SharedKey
    config: RangingConfig = field(default_factory=RangingConfig)
    clock: NodeClock = field(default_factory=NodeClock)


@dataclass(frozen=True)
class Transmission:
    """One legitimate emission on the global timeline."""

    source_id: int
    role: Role
    n: int
    start_time: float
    duration: float
    position: Position
    signal: BasebandSignal

    @property
    def end_time(self) -> float:
        return self.start_time + self.duration


@dataclass(frozen=True)
class Timeline:
    sample_period: float
    n_samples: int
    t_sent: float

    @property
    def duration(self) -> float:
        return self.n_samples * self.sample_period


@dataclass
class ReflectorOutcome:
    reflector_id: int
    true_distance: float
    batch: Optional[BatchEstimate]
    responses: dict[int, float]
    participated: bool

    @property
    def failed(self) -> bool:
        return self.batch is None

    @property
    def estimate(self) -> Optional[float]:
        return None if self.batch is None else self.batch.final

    @property
    def error(self) -> Optional[float]:
        return None if self.batch is None else self.batch.final - self.true_distance

    @property
    def n_received(self) -> int:
        return len(self.responses)


@dataclass
class SessionResult:
    epoch: int
    outcomes: dict[int, ReflectorOutcome]
    session_duration: float
    timeline: Timeline
    transmissions: list[Transmission]
    detections: list[SicDetection]
    duplicates: list[tuple[Hashable, int]]
    waiting_samples: dict[int, np.ndarray]
    initiator_position: Position
    rejected: list[tuple[int, int, float]] = field(default_factory=list)

    def distances(self) -> dict[int, Optional[float]]:
        return {k: o.estimate for k, o in self.outcomes.items()}

    @property
    def failure_rate(self) -> float:
        if not self.outcomes:
            return 0.0
        return sum(o.failed for o in self.outcomes.values()) / len(self.outcomes)


class Adversary:
    """Hooks through which attackers add signals to a session."""

    def emissions(self, timeline: Timeline, rng: np.random.Generator) -> list[TimedEmission]:
        """Signals present for the whole session, heard by every node."""
        return []

    def react(self, transmissions: Sequence[Transmission], timeline: Timeline,
              rng: np.random.Generator) -> list[TimedEmission]:
        """Signals derived from the legitimate responses, heard by the initiator."""
        return []


def request_pattern(key: SharedKey, initiator_id: int, epoch: int, cfg: RangingConfig) -> BasebandSignal:
    seq = derive_sequence(key, SequenceLabel(Role.REQ, initiator_id, epoch), cfg.sequence_length)
    return upsample(modulate_bpsk(seq, cfg.sample_period * cfg.upsample_factor), cfg.upsample_factor)


def response_pattern(key: SharedKey, reflector_id: int, epoch: int, n: int, cfg: RangingConfig) -> BasebandSignal:
    seq = derive_sequence(key, SequenceLabel(Role.RESP, reflector_id, epoch, n), cfg.sequence_length)
    return upsample(modulate_bpsk(seq, cfg.sample_period * cfg.upsample_factor), cfg.upsample_factor)


def _receive(n_samples: int, rx: Position, sources: Sequence[TimedEmission], channel: ChannelConfig,
             noise: np.ndarray) -> np.ndarray:
    """Build one receiver's buffer: noise plus every emission that reaches it."""
    buf = noise.astype(np.complex128, copy=True)
    fs = channel.sample_rate
    half = (channel.fd_taps - 1) // 2 + 1
    for e in sources:
        d = e.source.distance_to(rx)
        if d <= 0:
            continue
        delay = (e.start_time + d / SPEED_OF_LIGHT) * fs
        # crop the emission to the part that can land inside the buffer
        first = max(0, int(math.floor(-delay)) - half)
        last = min(len(e.signal), int(math.ceil(n_samples - delay)) + half)
        if last <= first:
            continue
        y, start = delay_samples(e.signal.samples[first:last], delay + first, channel.passband, channel.fd_taps)
        place(buf, y * free_space_gain(d, channel.carrier), start)
    return buf


@dataclass(frozen=True)
class SyncOutcome:
    reflector_id: int
    synced: bool
    epoch: Optional[int]
    mismatch: Optional[float]


def run_sync(initiator: InitiatorNode, reflectors: Sequence[ReflectorNode], channel: ChannelConfig,
             t_global: float, adversaries: Sequence[Adversary] = (),
             rng: Optional[np.random.Generator] = None) -> dict[int, SyncOutcome]:
    """Broadcast a SYNC frame at the start of the initiator's current epoch.

    Reflectors that find the postamble and authenticate the payload adopt
    the epoch; their epoch boundary then trails the initiator's by
    eps_I + eps_R + ToF + T_E.
    """
    cfg = initiator.config
    rng = np.random.default_rng(channel.seed) if rng is None else rng
    tau = check_epoch(initiator.clock, t_global, cfg.epoch_duration).value
    U = cfg.upsample_factor * SYNC_SYMBOL_STRETCH
    T = cfg.sample_period
    post = upsample(modulate_bpsk(postamble_sequence(), T * U), U)
    frame = upsample(build_sync_frame(initiator.key, initiator.id, tau, postamble_sequence(), T * U), U)
    payload_samples = len(frame) - len(post)
    t_tx = initiator.clock.processing_delay
    n_samples = int(math.ceil(t_tx / T)) + len(frame) + cfg.n_max + cfg.l0 + channel.fd_taps + 8
    timeline = Timeline(T, n_samples, t_tx + (len(frame) - 1) * T)
    extra = [e for a in adversaries for e in a.emissions(timeline, rng)]
    tx = TimedEmission(frame, t_tx, initiator.position, initiator.id)

    out = {}
    for refl in reflectors:
        noise = complex_noise(rng, n_samples, channel.noise_power)
        rx = _receive(n_samples, refl.position, [tx, *extra], channel, noise)
        det = detect_pattern(BasebandSignal(rx, T, cfg.sample_rate), post, cfg.alpha, cfg.l0,
                             main_lobe=2 * U)
        key = refl.key if refl.key is not None else initiator.key
        decoded = None
        if det is not None and det.peak_index >= payload_samples:
            gamma = estimate_attenuation(rx, post.samples, det.peak_index)
            start = det.peak_index - payload_samples
            soft = rx[start:det.peak_index:U] * np.conj(gamma)
            local = check_epoch(refl.clock, t_global, cfg.epoch_duration).value
            candidates = [local + k for k in range(-SYNC_EPOCH_SEARCH, SYNC_EPOCH_SEARCH + 1)]
            decoded = decode_sync_frame(key, np.where(soft.real >= 0, 1, -1), candidates)
        if decoded is None or decoded[0] != initiator.id:
            out[refl.id] = SyncOutcome(refl.id, False, None, None)
            continue
        tof = initiator.position.distance_to(refl.position) / SPEED_OF_LIGHT
        # true postamble start at the reflector versus the sample it was detected on
        true_start = t_tx + tof + payload_samples * T
        te = det.peak_index * T - det.timing_error - true_start
        mismatch = initiator.clock.processing_delay + refl.clock.processing_delay + tof + te
        epoch_start = t_global - (initiator.clock.local_time(t_global) - tau * cfg.epoch_duration) / (
            1 + initiator.clock.drift_ppm * 1e-6)
        # local_time(epoch_start + mismatch) == tau * epoch_duration afterwards
        refl.clock.offset = tau * cfg.epoch_duration - (epoch_start + mismatch) * (1 + refl.clock.drift_ppm * 1e-6)
        refl.current_epoch = tau
        refl.state = NodeState.SCANNING
        out[refl.id] = SyncOutcome(refl.id, True, tau, mismatch)
    return out


def _search_windows(cfg: RangingConfig, waits: np.ndarray) -> list[tuple[int, int]]:
    Lr = cfg.pattern_samples
    hw = int(math.floor(cfg.hw_latency * cfg.sample_rate))
    cum = np.cumsum(waits)
    out = []
    for n in range(cfg.batch_size):
        base = Lr + int(cum[n]) + n * Lr + hw
        out.append((base - 2, base + 2 * cfg.n_max + 4))
    return out


def run_session(initiator: InitiatorNode, reflectors: Sequence[ReflectorNode], channel: ChannelConfig,
                epoch: int, adversaries: Sequence[Adversary] = (),
                rng: Optional[np.random.Generator] = None) -> SessionResult:
    """One broadcast ranging session in epoch ``epoch``.

    The initiator sends its request from sample 0. Each reflector whose
    epoch matches detects the request on its own noisy copy, then sends its
    batch with the derived waiting periods. The initiator searches for
    every expected response with SIC, converts detections to distances,
    drops those outside [0, c * tof_max] and folds the rest per reflector.
    """
    cfg = initiator.config
    rng = np.random.default_rng(channel.seed) if rng is None else rng
    T = cfg.sample_period
    if not math.isclose(channel.sample_rate, cfg.sample_rate, rel_tol=1e-12):
        raise ValueError("channel and initiator sample rates differ")
    Lr = cfg.pattern_samples
    key = initiator.key
    req = request_pattern(key, initiator.id, epoch, cfg)
    t_sent = (Lr - 1) * T
    n_total = int(math.ceil(cfg.session_span / T)) + int(math.ceil(
        max([r.hw_latency for r in reflectors], default=0.0) / T)) + cfg.l0 + channel.fd_taps + 8
    timeline = Timeline(T, n_total, t_sent)
    transmissions = [Transmission(initiator.id, Role.REQ, 0, 0.0, Lr * T, initiator.position, req)]
    req_emission = TimedEmission(req, 0.0, initiator.position, initiator.id)
    background = [e for a in adversaries for e in a.emissions(timeline, rng)]

    waits: dict[int, np.ndarray] = {}
    n_req = Lr + cfg.n_max + cfg.l0 + channel.fd_taps + 8
    emissions = list(background)
    for refl in reflectors:
        waits[refl.id] = derive_waiting_samples(key, refl.id, epoch, cfg.batch_size, cfg.window)
        # noise is drawn for every reflector so the stream does not depend on participation
        noise = complex_noise(rng, n_req, channel.noise_power)
        if refl.current_epoch != epoch:
            refl.state = NodeState.IDLE
            continue
        refl.state = NodeState.SCANNING
        rkey = refl.key if refl.key is not None else key
        rx = _receive(n_req, refl.position, [req_emission, *background], channel, noise)
        det = detect_pattern(BasebandSignal(rx, T, cfg.sample_rate), request_pattern(rkey, initiator.id, epoch, cfg),
                             cfg.alpha, cfg.l0, main_lobe=cfg.peak_exclusion, interpolate=False,
                             search=(0, cfg.n_max + 3))
        if det is None:
            continue
        refl.state = NodeState.RESPONDING
        own_waits = derive_waiting_samples(rkey, refl.id, epoch, cfg.batch_size, cfg.window)
        start = det.peak_index + Lr
        for n in range(cfg.batch_size):
            start += int(own_waits[n])
            resp = response_pattern(rkey, refl.id, epoch, n, cfg)
            t0 = start * T + refl.hw_latency
            transmissions.append(Transmission(refl.id, Role.RESP, n, t0, Lr * T, refl.position, resp))
            emissions.append(TimedEmission(resp, t0, refl.position, (refl.id, n)))
            start += Lr
        refl.state = NodeState.SCANNING

    for a in adversaries:
        emissions.extend(a.react(transmissions, timeline, rng))
    noise = complex_noise(rng, n_total, channel.noise_power)
    rx = _receive(n_total, initiator.position, emissions, channel, noise)

    patterns, windows = {}, {}
    for refl in reflectors:
        for n, win in enumerate(_search_windows(cfg, waits[refl.id])):
            patterns[(refl.id, n)] = response_pattern(key, refl.id, epoch, n, cfg)
            windows[(refl.id, n)] = win
    report = detect_all(BasebandSignal(rx, T, cfg.sample_rate), patterns, cfg.alpha, cfg.l0,
                        sic=cfg.sic, interpolate=cfg.interpolation, main_lobe=cfg.peak_exclusion,
                        windows=windows, template_passband=channel.passband, fd_taps=channel.fd_taps,
                        duplicate_check=cfg.duplicate_check, sample_period=T)

    per_refl: dict[int, dict[int, float]] = {r.id: {} for r in reflectors}
    rejected = []
    max_distance = tof_to_distance(cfg.tof_max)
    for d in report.detections:
        rid, n = d.key
        cum = int(np.sum(waits[rid][:n + 1]))
        obs = RangingObservation(t_sent, (d.detection.peak_index + Lr - 1) * T, cum * T, (n + 1) * Lr * T,
                                 d.detection.timing_error, cfg.hw_latency)
        dist = tof_to_distance(compute_tof(obs))
        if 0 <= dist <= max_distance:
            per_refl[rid][n] = dist
        else:
            rejected.append((rid, n, dist))

    outcomes = {}
    for refl in reflectors:
        got = per_refl[refl.id]
        ordered = [got[n] for n in sorted(got)]
        outcomes[refl.id] = ReflectorOutcome(
            refl.id, initiator.position.distance_to(refl.position),
            batch_estimate(ordered, cfg.batch_size), dict(sorted(got.items())),
            refl.current_epoch == epoch)
    last = max((t.end_time + t.position.distance_to(initiator.position) / SPEED_OF_LIGHT
                for t in transmissions if t.role == Role.RESP), default=Lr * T)
    return SessionResult(epoch, outcomes, last, timeline, transmissions, report.detections,
                         report.duplicates, waits, initiator.position, rejected)
