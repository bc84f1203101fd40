"""Successive interference cancellation over many known patterns.

Each pass correlates every pattern that has not been extracted yet, takes
the strongest qualified one, estimates its complex gain, subtracts the
reconstructed response and repeats on the residual. Correlations are kept
per pattern and only recomputed when a cancellation touches their search
segment.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Mapping, Optional

import numpy as np
from scipy import fft as sfft

from .channel import FD_TAPS, delay_samples
from .detector import (
    ENERGY_FLOOR,
    MAIN_LOBE,
    RELATIVE_ENERGY_FLOOR,
    DetectionResult,
    TimingCorrection,
    qualify,
    subsample_timing_error,
)
from .sequences import BasebandSignal


@dataclass(frozen=True)
class ChannelEstimate:
    gamma: complex
    peak_index: int
    key: Hashable


@dataclass(frozen=True)
class SicDetection:
    key: Hashable
    detection: DetectionResult
    estimate: ChannelEstimate


@dataclass
class SicReport:
    detections: list[SicDetection] = field(default_factory=list)
    residual_energy: list[float] = field(default_factory=list)
    residual: Optional[np.ndarray] = None
    # (key, dropped peak index) for each later copy removed by the duplicate check
    duplicates: list[tuple[Hashable, int]] = field(default_factory=list)

    def by_key(self) -> dict:
        return {d.key: d for d in self.detections}

    def __len__(self):
        return len(self.detections)


def _array(x) -> np.ndarray:
    return x.samples if isinstance(x, BasebandSignal) else np.asarray(x, dtype=np.complex128)


def estimate_attenuation(received, pattern, m: int) -> complex:
    """Least-squares complex gain of ``pattern`` aligned at sample ``m``."""
    r, p = _array(received), _array(pattern)
    if m < 0 or m + p.size > r.size:
        raise ValueError(f"pattern at {m} does not fit in the received signal")
    ep = float(np.vdot(p, p).real)
    if ep <= 0:
        raise ValueError("pattern has zero energy")
    return complex(np.vdot(p, r[m:m + p.size]) / ep)


def cancel(received, pattern, m: int, gamma: complex) -> BasebandSignal:
    """Subtract ``gamma * pattern`` at sample ``m``; other samples are untouched."""
    p = _array(pattern)
    r = _array(received)
    if m < 0 or m + p.size > r.size:
        raise ValueError(f"pattern at {m} does not fit in the received signal")
    out = r.copy()
    out[m:m + p.size] -= gamma * p
    if isinstance(received, BasebandSignal):
        return BasebandSignal(out, received.sample_period, received.bandwidth)
    return BasebandSignal(out, 1.0, 1.0)


class _Search:
    """Cached windowed correlations for a set of patterns over one residual."""

    def __init__(self, residual: np.ndarray, patterns: list[np.ndarray], windows: list[tuple[int, int]],
                 alpha: float, l0: int, main_lobe: int):
        self.r = residual
        self.p = patterns
        self.alpha, self.l0, self.main_lobe = alpha, l0, main_lobe
        n = residual.size
        k = len(patterns)
        self.plen = np.array([q.size for q in patterns])
        self.pen = np.array([float(np.vdot(q, q).real) for q in patterns])
        self.lo = np.empty(k, dtype=np.int64)
        self.hi = np.empty(k, dtype=np.int64)
        self.a = np.empty(k, dtype=np.int64)
        self.b = np.empty(k, dtype=np.int64)
        for i, (lo, hi) in enumerate(windows):
            last = n - self.plen[i] + 1
            self.lo[i], self.hi[i] = max(0, lo), min(last, hi)
            self.a[i] = max(0, self.lo[i] - l0)
            self.b[i] = min(last, self.hi[i] + l0)
        # sample span read by each pattern's correlation
        self.seg_lo = self.a
        self.seg_hi = self.b + self.plen - 1
        self.searchable = self.hi > self.lo
        self.best_m = np.full(k, -1, dtype=np.int64)
        self.best_mag = np.full(k, -np.inf)
        self.ok = np.zeros(k, dtype=bool)
        self.ratio = np.zeros(k)
        self.triple = np.zeros((k, 3))
        self._fft_cache: dict[tuple[int, int], np.ndarray] = {}

    def _pattern_fft(self, i: int, nfft: int) -> np.ndarray:
        key = (i, nfft)
        f = self._fft_cache.get(key)
        if f is None:
            f = sfft.fft(np.conj(self.p[i][::-1]), nfft)
            self._fft_cache[key] = f
        return f

    def update(self, idx: np.ndarray) -> None:
        idx = idx[self.searchable[idx]]
        if idx.size == 0:
            return
        # group by pattern length so each group shares one FFT size
        for plen in np.unique(self.plen[idx]):
            group = idx[self.plen[idx] == plen]
            self._update_group(group, int(plen))

    def _update_group(self, idx: np.ndarray, plen: int) -> None:
        seglen = self.seg_hi[idx] - self.seg_lo[idx]
        nfft = sfft.next_fast_len(int(seglen.max()))
        seg = np.zeros((idx.size, nfft), dtype=np.complex128)
        for j, i in enumerate(idx):
            seg[j, :seglen[j]] = self.r[self.seg_lo[i]:self.seg_hi[i]]
        P = np.stack([self._pattern_fft(int(i), nfft) for i in idx])
        full = sfft.ifft(sfft.fft(seg, axis=1) * P, axis=1)
        nl_max = int((self.b[idx] - self.a[idx]).max())
        num = full[:, plen - 1: plen - 1 + nl_max]
        c = np.concatenate([np.zeros((idx.size, 1)), np.cumsum(np.abs(seg) ** 2, axis=1)], axis=1)
        energy = c[:, plen:plen + nl_max] - c[:, :nl_max]
        for j, i in enumerate(idx):
            nl = int(self.b[i] - self.a[i])
            e = energy[j, :nl].copy()
            e[e < RELATIVE_ENERGY_FLOOR * e.max(initial=0.0)] = 0.0
            mag = np.abs(num[j, :nl]) / np.sqrt(np.maximum(e, ENERGY_FLOOR) * self.pen[i])
            mag[e <= ENERGY_FLOOR] = 0.0
            s0, s1 = int(self.lo[i] - self.a[i]), int(self.hi[i] - self.a[i])
            m = s0 + int(np.argmax(mag[s0:s1]))
            ok, ratio = qualify(mag, m, self.alpha, self.l0, self.main_lobe)
            self.best_m[i] = self.a[i] + m
            self.best_mag[i] = mag[m]
            self.ok[i] = ok
            self.ratio[i] = ratio
            self.triple[i] = (mag[m - 1] if m > 0 else 0.0, mag[m], mag[m + 1] if m + 1 < nl else 0.0)

    def overlapping(self, start: int, stop: int) -> np.ndarray:
        return np.flatnonzero((self.seg_lo < stop) & (self.seg_hi > start))

    def timing(self, i: int, sample_period: float) -> TimingCorrection:
        cm, c0, cp = self.triple[i]
        if cm == 0.0 or cp == 0.0:
            return TimingCorrection(0.0, True)
        return subsample_timing_error(cm, c0, cp, sample_period)


def _reconstruct(r: np.ndarray, p: np.ndarray, m: int, te_samples: float,
                 passband: Optional[float], ntaps: int) -> tuple[complex, np.ndarray, int]:
    """Return (gamma, template, start) for the response found at lag ``m``."""
    if passband is None:
        return estimate_attenuation(r, p, m), p, m
    y, start = delay_samples(p, m - te_samples, passband, ntaps)
    lo, hi = max(start, 0), min(start + y.size, r.size)
    y = y[lo - start: hi - start]
    ey = float(np.vdot(y, y).real)
    gamma = complex(np.vdot(y, r[lo:hi]) / ey) if ey > 0 else 0j
    return gamma, y, lo


def detect_all(received, patterns: Mapping[Hashable, object], alpha: float, l0: int, *,
               sic: bool = True, interpolate: bool = True, main_lobe: int = MAIN_LOBE,
               windows: Optional[Mapping[Hashable, tuple[int, int]]] = None,
               template_passband: Optional[float] = None, fd_taps: int = FD_TAPS,
               duplicate_check: bool = False, sample_period: Optional[float] = None) -> SicReport:
    """Detect every pattern in ``received``.

    ``windows`` maps a pattern key to the lag range [lo, hi) where its start
    may lie; patterns without a window are searched over the whole signal.
    With ``template_passband`` set, the cancelled waveform is the pattern
    delayed by its sub-sample arrival estimate through a band-limited
    interpolator, otherwise the pattern itself at the integer peak.
    With ``sic=False`` every pattern is detected once on the unmodified
    signal. ``duplicate_check`` rescans the final residual and keeps the
    earliest qualified copy of each detected pattern.
    """
    if not patterns:
        raise ValueError("at least one pattern is required")
    if sample_period is None:
        sample_period = received.sample_period if isinstance(received, BasebandSignal) else 1.0
    r = _array(received).copy()
    keys = list(patterns)
    arrs = [_array(patterns[k]) for k in keys]
    n = r.size
    wins = [(0, n) if windows is None or k not in windows else windows[k] for k in keys]
    search = _Search(r, arrs, wins, alpha, l0, main_lobe)
    search.update(np.arange(len(keys)))

    report = SicReport()
    energy = float(np.vdot(r, r).real)
    report.residual_energy.append(energy)
    extracted = np.zeros(len(keys), dtype=bool)

    def record(i: int) -> tuple[DetectionResult, float]:
        te = search.timing(i, sample_period) if interpolate else TimingCorrection(0.0, False)
        det = DetectionResult(int(search.best_m[i]), float(search.best_mag[i]), te.value, True,
                              te.degenerate, float(search.ratio[i]))
        return det, te.value / sample_period

    if not sic:
        for i in np.flatnonzero(search.ok):
            det, te = record(i)
            gamma = estimate_attenuation(r, arrs[i], det.peak_index)
            report.detections.append(SicDetection(keys[i], det, ChannelEstimate(gamma, det.peak_index, keys[i])))
        report.residual = r
        return report

    for _ in range(len(keys)):
        cand = search.ok & ~extracted
        if not cand.any():
            break
        i = int(np.argmax(np.where(cand, search.best_mag, -np.inf)))
        det, te = record(i)
        gamma, tmpl, start = _reconstruct(r, arrs[i], det.peak_index, te, template_passband, fd_taps)
        stop = start + tmpl.size
        before = float(np.vdot(r[start:stop], r[start:stop]).real)
        r[start:stop] -= gamma * tmpl
        after = float(np.vdot(r[start:stop], r[start:stop]).real)
        energy = max(energy - before + after, 0.0)
        report.residual_energy.append(energy)
        extracted[i] = True
        report.detections.append(SicDetection(keys[i], det, ChannelEstimate(gamma, det.peak_index, keys[i])))
        dirty = search.overlapping(start, stop)
        search.update(dirty[~extracted[dirty]])

    if duplicate_check and report.detections:
        _resolve_duplicates(report, search, keys, extracted, sample_period, interpolate, main_lobe)
    report.residual = r
    return report


def _resolve_duplicates(report: SicReport, search: _Search, keys: list, extracted: np.ndarray,
                        sample_period: float, interpolate: bool, main_lobe: int) -> None:
    """Keep the earliest qualified copy of each extracted pattern."""
    idx = np.flatnonzero(extracted)
    search.update(idx)
    pos = {k: j for j, k in enumerate(keys)}
    for j, d in enumerate(report.detections):
        i = pos[d.key]
        m2 = int(search.best_m[i])
        if not search.ok[i] or abs(m2 - d.detection.peak_index) <= main_lobe:
            continue
        if m2 < d.detection.peak_index:
            te = search.timing(i, sample_period) if interpolate else TimingCorrection(0.0, False)
            det = DetectionResult(m2, float(search.best_mag[i]), te.value, True, te.degenerate,
                                  float(search.ratio[i]))
            report.duplicates.append((d.key, d.detection.peak_index))
            report.detections[j] = SicDetection(d.key, det, ChannelEstimate(d.estimate.gamma, m2, d.key))
        else:
            report.duplicates.append((d.key, m2))
