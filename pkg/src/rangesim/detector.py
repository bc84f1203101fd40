"""Pattern detection by normalized cross-correlation.

The detector slides a known pattern over the received stream, keeps the lag
with the largest correlation magnitude, checks that it stands out from its
neighbourhood, and refines the arrival time between samples with a
three-point Gaussian fit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy import fft as sfft

from .sequences import BasebandSignal

ENERGY_FLOOR = 1e-30
# Windows whose energy is this far below the strongest window are numerically empty.
RELATIVE_ENERGY_FLOOR = 1e-13
DEGENERATE_DENOMINATOR = 1e-12
MAIN_LOBE = 2


@dataclass(frozen=True)
class CorrelationSeries:
    values: np.ndarray
    pattern_length: int
    pattern_energy: float

    def __len__(self):
        return self.values.size

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)


class Peak(NamedTuple):
    index: int
    magnitude: float
    ratio: float


class TimingCorrection(NamedTuple):
    value: float
    degenerate: bool


@dataclass(frozen=True)
class DetectionResult:
    peak_index: int
    peak_magnitude: float
    timing_error: float
    qualified: bool
    degenerate: bool = False
    ratio: float = float("inf")

    def arrival_time(self, sample_period: float) -> float:
        """Sub-sample arrival of the pattern start, in seconds."""
        return self.peak_index * sample_period - self.timing_error


def _as_array(x) -> np.ndarray:
    return x.samples if isinstance(x, BasebandSignal) else np.asarray(x, dtype=np.complex128)


def sliding_energy(x: np.ndarray, length: int) -> np.ndarray:
    """Energy of every length-``length`` window of ``x``."""
    # Blocks of `length` samples: each window is a suffix of one block plus a
    # prefix of the next. Sums of non-negative terms only, so no cancellation
    # error the way a global cumsum difference has.
    p = np.abs(x) ** 2
    nb = -(-p.size // length) + 1
    blocks = np.zeros(nb * length)
    blocks[:p.size] = p
    blocks = blocks.reshape(nb, length)
    suffix = np.cumsum(blocks[:, ::-1], axis=1)[:, ::-1]
    prefix = np.zeros_like(blocks)
    prefix[:, 1:] = np.cumsum(blocks[:, :-1], axis=1)
    e = (suffix[:-1] + prefix[1:]).ravel()[:p.size - length + 1]
    top = e.max(initial=0.0)
    e[e < RELATIVE_ENERGY_FLOOR * top] = 0.0
    return e


def normalize(numerator: np.ndarray, window_energy: np.ndarray, pattern_energy: float) -> np.ndarray:
    den = np.sqrt(np.maximum(window_energy, ENERGY_FLOOR) * pattern_energy)
    out = numerator / den
    out[window_energy <= ENERGY_FLOOR] = 0.0
    return out


def correlate_valid(x: np.ndarray, p: np.ndarray) -> np.ndarray:
    """sum_n x[n+l] * conj(p[n]) for every lag with full overlap, via FFT."""
    n = x.size + p.size - 1
    nfft = sfft.next_fast_len(n)
    X = sfft.fft(x, nfft)
    P = sfft.fft(np.conj(p[::-1]), nfft)
    full = sfft.ifft(X * P)
    return full[p.size - 1: x.size]


def normalized_xcorr(received, pattern) -> CorrelationSeries:
    r = _as_array(received)
    p = _as_array(pattern)
    if p.size < 1:
        raise ValueError("empty pattern")
    if r.size < p.size:
        raise ValueError("received signal shorter than pattern")
    ep = float(np.sum(np.abs(p) ** 2))
    if ep <= 0:
        raise ValueError("pattern has zero energy")
    num = correlate_valid(r, p)
    return CorrelationSeries(normalize(num, sliding_energy(r, p.size), ep), p.size, ep)


def direct_xcorr(received, pattern) -> np.ndarray:
    """O(N*L) evaluation of the normalized correlation, used as a reference."""
    r = _as_array(received)
    p = _as_array(pattern)
    L = p.size
    ep = float(np.sum(np.abs(p) ** 2))
    out = np.zeros(r.size - L + 1, dtype=np.complex128)
    for l in range(out.size):
        w = r[l:l + L]
        ew = float(np.sum(np.abs(w) ** 2))
        if ew > ENERGY_FLOOR:
            out[l] = np.sum(w * np.conj(p)) / np.sqrt(ew * ep)
    return out


def qualify(mag: np.ndarray, m: int, alpha: float, l0: int,
            main_lobe: int = MAIN_LOBE) -> tuple[bool, float]:
    """Test whether lag ``m`` stands out from its +/-l0 vicinity.

    Lags within ``main_lobe`` of ``m`` are exempt. The peak qualifies when
    its squared magnitude is at least ``alpha`` times the mean vicinity
    power and it strictly exceeds every vicinity value. The mean is
    estimated as median / ln 2 (exact for the exponentially distributed
    power of a noise-like correlation), which keeps bursts from other,
    overlapping responses from inflating it. Returns (qualified, power ratio).
    """
    lo = max(0, m - l0)
    hi = min(mag.size, m + l0 + 1)
    v = np.concatenate([mag[lo:max(lo, m - main_lobe)], mag[min(hi, m + main_lobe + 1):hi]])
    peak = mag[m]
    if v.size == 0:
        return peak > 0, float("inf")
    ref = float(np.median(v ** 2)) / math.log(2)
    ratio = float("inf") if ref == 0 else peak ** 2 / ref
    return bool(ratio >= alpha and peak > v.max()), ratio


def find_peak(series: CorrelationSeries | np.ndarray, alpha: float, l0: int, *,
              main_lobe: int = MAIN_LOBE, search: Optional[tuple[int, int]] = None) -> Optional[Peak]:
    """Return the qualified global maximum of |C_l|, or None.

    ``search`` restricts the argmax to lags [lo, hi); the vicinity test
    still sees the whole series. Ties go to the lowest lag.
    """
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    if l0 < 1:
        raise ValueError("L0 must be >= 1")
    vals = series.values if isinstance(series, CorrelationSeries) else np.asarray(series)
    if vals.size == 0:
        raise ValueError("empty correlation series")
    mag = np.abs(vals)
    lo, hi = (0, mag.size) if search is None else (max(0, search[0]), min(mag.size, search[1]))
    if hi <= lo:
        return None
    m = lo + int(np.argmax(mag[lo:hi]))
    ok, ratio = qualify(mag, m, alpha, l0, main_lobe)
    if not ok:
        return None
    return Peak(m, float(mag[m]), ratio)


def subsample_timing_error(cm1: float, c0: float, cp1: float, sample_period: float) -> TimingCorrection:
    """Gaussian three-point fit around a correlation peak.

    Positive values mean the true arrival is earlier than the peak sample.
    Returns 0 with ``degenerate=True`` when the triple cannot be fitted.
    """
    if not (cm1 > 0 and c0 > 0 and cp1 > 0) or c0 < cm1 or c0 < cp1:
        return TimingCorrection(0.0, True)
    lm, l0, lp = np.log(cm1), np.log(c0), np.log(cp1)
    den = 4 * l0 - 2 * lm - 2 * lp
    if abs(den) < DEGENERATE_DENOMINATOR:
        return TimingCorrection(0.0, True)
    return TimingCorrection(float(-sample_period * (lp - lm) / den), False)


def timing_from_magnitudes(mag: np.ndarray, m: int, sample_period: float) -> TimingCorrection:
    if m <= 0 or m >= mag.size - 1:
        return TimingCorrection(0.0, True)
    return subsample_timing_error(mag[m - 1], mag[m], mag[m + 1], sample_period)


def detect_pattern(received: BasebandSignal, pattern: BasebandSignal, alpha: float, l0: int, *,
                   main_lobe: int = MAIN_LOBE, interpolate: bool = True,
                   search: Optional[tuple[int, int]] = None) -> Optional[DetectionResult]:
    series = normalized_xcorr(received, pattern)
    peak = find_peak(series, alpha, l0, main_lobe=main_lobe, search=search)
    if peak is None:
        return None
    if interpolate:
        te = timing_from_magnitudes(series.magnitude, peak.index, received.sample_period)
    else:
        te = TimingCorrection(0.0, False)
    return DetectionResult(peak.index, peak.magnitude, te.value, True, te.degenerate, peak.ratio)
