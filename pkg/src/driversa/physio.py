"""GSR tonic/phasic decomposition and heart-rate / HRV metrics from IBI."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import median_filter, uniform_filter1d

from .timebase import MISSING, TimedSeries

MIN_GSR_SECONDS = 10.0


@dataclass(frozen=True)
class GsrDecomposition:
    """Tonic (slow baseline) and phasic (event-related) skin conductance.

    Both share the raw series' timestamps and sum back to the raw signal.
    """

    tonic: TimedSeries
    phasic: TimedSeries


def _odd_kernel(seconds: float, rate_hz: float) -> int:
    k = int(round(seconds * rate_hz))
    k = max(k, 1)
    return k if k % 2 == 1 else k + 1


def decompose_gsr(raw: TimedSeries, median_s: float = 4.0,
                  smooth_s: float = 2.0) -> GsrDecomposition:
    """Split raw skin conductance into tonic baseline and phasic residual.

    Tonic is a centered rolling median (``median_s`` kernel) followed by a
    rolling mean (``smooth_s`` kernel); phasic is the residual, so
    tonic + phasic reconstructs the raw signal exactly.
    """
    if len(raw) < 2 or (raw.t_ms[-1] - raw.t_ms[0]) < MIN_GSR_SECONDS * 1000.0:
        raise ValueError(
            f"{raw.device_id}: need at least {MIN_GSR_SECONDS:.0f} s of GSR "
            "for baseline estimation"
        )
    k_med = _odd_kernel(median_s, raw.nominal_rate_hz)
    k_mean = _odd_kernel(smooth_s, raw.nominal_rate_hz)
    tonic = median_filter(raw.values, size=k_med, mode="nearest")
    tonic = uniform_filter1d(tonic, size=k_mean, mode="nearest")
    phasic = raw.values - tonic
    return GsrDecomposition(
        tonic=replace(raw, device_id=raw.device_id + ":tonic", values=tonic),
        phasic=replace(raw, device_id=raw.device_id + ":phasic", values=phasic),
    )


@dataclass(frozen=True)
class IbiWindow:
    """Ordered RR intervals (ms) attributed to one analysis window."""

    intervals: np.ndarray

    def __post_init__(self):
        iv = np.asarray(self.intervals, dtype=np.float64)
        object.__setattr__(self, "intervals", iv)
        if len(iv) and not np.all(iv > 0):
            raise ValueError("RR intervals must be positive")

    def __len__(self) -> int:
        return len(self.intervals)


def hr_from_ibi(w: IbiWindow) -> float:
    """Mean heart rate in bpm; MISSING when the window holds no beats."""
    if len(w) == 0:
        return MISSING
    return 60_000.0 / float(np.mean(w.intervals))


def rmssd(w: IbiWindow, mode: str = "standard") -> float:
    """Root mean square of successive RR differences, in ms.

    ``standard`` divides the summed squared differences by their count
    before the square root (conventional RMSSD); ``unnormalized`` keeps
    the bare summed form. MISSING when fewer than two beats are present.
    """
    if mode not in ("standard", "unnormalized"):
        raise ValueError(f"unknown rmssd mode: {mode!r}")
    n = len(w)
    if n < 2:
        return MISSING
    sq = float(np.sum(np.diff(w.intervals) ** 2))
    if mode == "standard":
        sq /= n - 1
    return math.sqrt(sq)
