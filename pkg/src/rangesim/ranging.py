"""Time-of-flight arithmetic, batch estimation and hardware-latency calibration."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .channel import SPEED_OF_LIGHT


@dataclass(frozen=True)
class RangingObservation:
    """Initiator-side timing of one request/response pair.

    ``waiting`` and ``response_duration`` cover everything the reflector
    spent between the end of the request and the last symbol of this
    response; for the n-th response of a batch they are the cumulative
    waits and n+1 response durations.
    """

    t_sent: float
    t_received: float
    waiting: float
    response_duration: float
    timing_error: float = 0.0
    hw_latency: float = 0.0

    @property
    def rtt(self) -> float:
        return self.t_received - self.t_sent


def round_trip_time(tof: float, waiting: float, response_duration: float,
                    timing_error: float = 0.0, hw_latency: float = 0.0) -> float:
    """RTT = 2 (ToF + T_E) + T_W + T_RESP + T_HW."""
    return 2 * (tof + timing_error) + waiting + response_duration + hw_latency


def observation_for(tof: float, t_sent: float, waiting: float, response_duration: float,
                    timing_error: float = 0.0, hw_latency: float = 0.0) -> RangingObservation:
    rtt = round_trip_time(tof, waiting, response_duration, timing_error, hw_latency)
    return RangingObservation(t_sent, t_sent + rtt, waiting, response_duration, timing_error, hw_latency)


def compute_tof(obs: RangingObservation) -> float:
    """ToF = (t_R - t_S - T_W - T_RESP - T_HW) / 2 - T_E. May be negative."""
    return 0.5 * (obs.t_received - obs.t_sent - obs.waiting - obs.response_duration
                  - obs.hw_latency) - obs.timing_error


def tof_to_distance(tof: float) -> float:
    return SPEED_OF_LIGHT * tof


@dataclass(frozen=True)
class BatchEstimate:
    received: tuple[float, ...]
    batch_size_sent: int
    subset: tuple[int, ...]
    final: float

    @property
    def n_received(self) -> int:
        return len(self.received)


def batch_estimate(estimates: Sequence[float], batch_size_sent: int) -> Optional[BatchEstimate]:
    """Average the floor(|B|/2) estimates closest to the batch median.

    Returns None when nothing was received. Ties in distance to the median
    keep the lower index.
    """
    est = np.asarray(estimates, dtype=float)
    if est.size == 0:
        return None
    if batch_size_sent < est.size:
        raise ValueError("more estimates than responses sent")
    k = max(1, min(batch_size_sent // 2, est.size))
    med = float(np.median(est))
    order = np.argsort(np.abs(est - med), kind="stable")[:k]
    subset = tuple(sorted(int(i) for i in order))
    return BatchEstimate(tuple(float(e) for e in est), batch_size_sent, subset, float(np.mean(est[list(subset)])))


def calibrate_hardware_latency(pairs: Sequence[tuple[float, float]]) -> float:
    """Fit raw_tof = a * distance + b by least squares and return T_HW = 2 b.

    ``raw_tof`` is the ToF computed without any hardware-latency term, which
    carries half of the constant latency.
    """
    arr = np.asarray(pairs, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ValueError("need at least two (distance, raw_tof) pairs")
    d, raw = arr[:, 0], arr[:, 1]
    if np.ptp(d) == 0:
        raise ValueError("all calibration distances are equal; the fit is singular")
    x = d / SPEED_OF_LIGHT
    A = np.column_stack([x, np.ones_like(x)])
    (_, b), *_ = np.linalg.lstsq(A, raw, rcond=None)
    return float(2 * b)
