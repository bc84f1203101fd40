"""Line-of-sight channel: free-space loss, continuous delay, superposition, AWGN."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .sequences import BasebandSignal

SPEED_OF_LIGHT = 299_792_458.0
FD_TAPS = 255
_FRACTION_EPS = 1e-9


@dataclass(frozen=True)
class Position:
    x: float
    y: float
    z: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise ValueError("position coordinates must be finite")

    def distance_to(self, other: "Position") -> float:
        return math.dist((self.x, self.y, self.z), (other.x, other.y, other.z))


@dataclass(frozen=True)
class TimedEmission:
    signal: BasebandSignal
    start_time: float
    source: Position
    source_id: object = None

    def __post_init__(self):
        if self.start_time < 0:
            raise ValueError("emission start time must be >= 0")


@dataclass(frozen=True)
class ChannelConfig:
    """Channel parameters.

    ``passband`` is the fraction of the Nyquist band passed by the
    delay filter; 1.0 is an ideal full-band channel.
    """

    sample_rate: float = 100e6
    carrier: float = 2.45e9
    noise_power: float = 0.0
    seed: int = 0
    passband: float = 1.0
    fd_taps: int = FD_TAPS

    def __post_init__(self):
        if self.sample_rate <= 0 or self.carrier <= 0:
            raise ValueError("sample rate and carrier must be positive")
        if self.noise_power < 0:
            raise ValueError("noise power must be >= 0")
        if not 0 < self.passband <= 1:
            raise ValueError("passband must lie in (0, 1]")
        if self.fd_taps < 3 or self.fd_taps % 2 == 0:
            raise ValueError("fd_taps must be odd and >= 3")

    @property
    def sample_period(self) -> float:
        return 1.0 / self.sample_rate


@dataclass(frozen=True)
class Propagated:
    """A received copy of one emission, placed on the receiver's sample grid."""

    samples: np.ndarray
    start_index: int
    arrival_time: float
    source_id: object
    gain: complex

    @property
    def end_index(self) -> int:
        return self.start_index + self.samples.size


def free_space_gain(distance: float, carrier: float) -> complex:
    """Amplitude loss c/(4 pi d f_c) with the carrier phase rotation."""
    if distance <= 0:
        raise ValueError("distance must be positive")
    amp = SPEED_OF_LIGHT / (4 * math.pi * distance * carrier)
    return amp * complex(np.exp(-2j * math.pi * carrier * distance / SPEED_OF_LIGHT))


def fractional_delay_filter(frac: float, ntaps: int = FD_TAPS, passband: float = 1.0) -> np.ndarray:
    """Hamming windowed-sinc interpolator delaying by (ntaps-1)/2 + frac samples.

    The window is shifted with the sinc so the response stays symmetric about
    the fractional centre. Normalized to unit DC gain.
    """
    centre = (ntaps - 1) / 2 + frac
    t = np.arange(ntaps) - centre
    w = 0.54 + 0.46 * np.cos(2 * np.pi * t / (ntaps - 1))
    w[np.abs(t) > (ntaps - 1) / 2] = 0.0
    h = passband * np.sinc(passband * t) * w
    return h / h.sum()


def delay_samples(x: np.ndarray, delay: float, passband: float = 1.0,
                  ntaps: int = FD_TAPS) -> tuple[np.ndarray, int]:
    """Delay ``x`` by a real number of samples.

    Returns (samples, start_index): the output sample ``y[i]`` belongs at
    index ``start_index + i`` of the grid on which ``x`` started at 0.
    """
    k = math.floor(delay)
    frac = delay - k
    if frac > 1 - _FRACTION_EPS:
        k, frac = k + 1, 0.0
    elif frac < _FRACTION_EPS:
        frac = 0.0
    if frac == 0.0 and passband >= 1.0:
        return np.asarray(x, dtype=np.complex128).copy(), k
    h = fractional_delay_filter(frac, ntaps, passband)
    return np.convolve(x, h), k - (ntaps - 1) // 2


def propagate(emission: TimedEmission, rx: Position, cfg: ChannelConfig) -> Propagated:
    """Apply free-space loss and the propagation delay to one emission."""
    d = emission.source.distance_to(rx)
    if d <= 0:
        raise ValueError("transmitter and receiver are co-located")
    if not math.isclose(emission.signal.sample_period, cfg.sample_period, rel_tol=1e-9):
        raise ValueError("emission sample period differs from the channel sample rate")
    tof = d / SPEED_OF_LIGHT
    g = free_space_gain(d, cfg.carrier)
    delay = (emission.start_time + tof) * cfg.sample_rate
    y, start = delay_samples(emission.signal.samples, delay, cfg.passband, cfg.fd_taps)
    return Propagated(y * g, start, emission.start_time + tof, emission.source_id, g)


def place(buffer: np.ndarray, samples: np.ndarray, start: int) -> None:
    """Add ``samples`` into ``buffer`` at ``start``, cropping at both ends."""
    a, b = start, start + samples.size
    lo, hi = max(a, 0), min(b, buffer.size)
    if hi > lo:
        buffer[lo:hi] += samples[lo - a: hi - a]


def complex_noise(rng: np.random.Generator, n: int, power: float) -> np.ndarray:
    if power <= 0:
        return np.zeros(n, dtype=np.complex128)
    return math.sqrt(power / 2) * (rng.standard_normal(n) + 1j * rng.standard_normal(n))


def mix(signals: Iterable[Propagated], n_samples: int, cfg: ChannelConfig,
        rng: Optional[np.random.Generator] = None) -> BasebandSignal:
    """Superpose propagated signals on an ``n_samples`` grid and add noise.

    Noise comes from ``rng`` when given, otherwise from a generator seeded
    with ``cfg.seed``.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    out = complex_noise(rng, n_samples, cfg.noise_power)
    for s in signals:
        place(out, s.samples, s.start_index)
    return BasebandSignal(out, cfg.sample_period, cfg.sample_rate)


def noise_power_for_snr(signal_power: float, snr_db: float) -> float:
    return signal_power / 10 ** (snr_db / 10)
