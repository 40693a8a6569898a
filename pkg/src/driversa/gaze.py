"""I-DT fixation detection, AOI assignment and per-AOI window metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._kernels import idt_detect
from .timebase import MISSING, TimedSeries, Window

AOI_NAMES = ("center", "game", "left", "right", "odometer")
NO_AOI = "none"

DEFAULT_MAX_DISPERSION_DEG = 1.0
DEFAULT_MIN_DURATION_MS = 200.0


@dataclass(frozen=True)
class AoiRect:
    """Half-open rectangle [x0, x1) x [y0, y1) in degrees of visual angle."""

    x0: float
    x1: float
    y0: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError("degenerate AOI rectangle")

    def contains(self, x: float, y: float) -> bool:
        return self.x0 <= x < self.x1 and self.y0 <= y < self.y1

    def overlaps(self, other: "AoiRect") -> bool:
        return (self.x0 < other.x1 and other.x0 < self.x1
                and self.y0 < other.y1 and other.y0 < self.y1)


@dataclass(frozen=True)
class AoiConfig:
    """The five named screen regions used for gaze metrics."""

    regions: dict

    def __post_init__(self):
        if set(self.regions) != set(AOI_NAMES):
            raise ValueError(f"AOI config must define exactly {AOI_NAMES}")
        names = list(self.regions)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                if self.regions[a].overlaps(self.regions[b]):
                    raise ValueError(f"AOI regions {a!r} and {b!r} overlap")

    @classmethod
    def from_json(cls, obj: dict) -> "AoiConfig":
        return cls({name: AoiRect(*map(float, rect)) for name, rect in obj.items()})

    def to_json(self) -> dict:
        return {n: [r.x0, r.x1, r.y0, r.y1] for n, r in self.regions.items()}


@dataclass(frozen=True)
class Fixation:
    """A detected gaze fixation.

    ``detection_dispersion_deg`` is the I-DT statistic (x-range + y-range);
    ``feature_dispersion_deg`` is the mean distance of samples from the
    centroid, which is what the per-window dispersion features report.
    """

    start_ms: float
    end_ms: float
    centroid: tuple
    detection_dispersion_deg: float
    feature_dispersion_deg: float
    aoi: str = NO_AOI

    @property
    def duration_ms(self) -> float:
        return self.end_ms - self.start_ms

    @property
    def midpoint_ms(self) -> float:
        return 0.5 * (self.start_ms + self.end_ms)


def fixation_feature_dispersion(points: np.ndarray) -> float:
    """Mean Euclidean distance of gaze points from their centroid, degrees."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise ValueError("need at least one (x, y) point")
    centroid = pts.mean(axis=0)
    return float(np.mean(np.hypot(pts[:, 0] - centroid[0], pts[:, 1] - centroid[1])))


def _idt_dispersion(x: np.ndarray, y: np.ndarray) -> float:
    return float((x.max() - x.min()) + (y.max() - y.min()))


def detect_fixations_idt(gaze: TimedSeries,
                         max_dispersion_deg: float = DEFAULT_MAX_DISPERSION_DEG,
                         min_duration_ms: float = DEFAULT_MIN_DURATION_MS,
                         ) -> list[Fixation]:
    """Dispersion-threshold fixation detection.

    Grows a sample window until it spans ``min_duration_ms``; if its
    dispersion (x-range + y-range) is within ``max_dispersion_deg`` the
    window is extended while the threshold holds and emitted as a fixation,
    otherwise the window start advances by one sample.
    """
    t = gaze.t_ms
    n = len(t)
    if n == 0:
        return []
    xy = gaze.values
    if xy.ndim != 2 or xy.shape[1] != 2:
        raise ValueError("gaze series must carry (x_deg, y_deg) values")
    if not np.all(np.isfinite(xy)):
        raise ValueError("gaze coordinates must be finite")
    x, y = xy[:, 0], xy[:, 1]

    starts, ends = idt_detect(np.ascontiguousarray(t),
                              np.ascontiguousarray(x), np.ascontiguousarray(y),
                              float(max_dispersion_deg), float(min_duration_ms))
    fixations = []
    for i, j in zip(starts, ends):
        pts = xy[i:j + 1]
        fixations.append(Fixation(
            start_ms=float(t[i]),
            end_ms=float(t[j]),
            centroid=(float(pts[:, 0].mean()), float(pts[:, 1].mean())),
            detection_dispersion_deg=_idt_dispersion(x[i:j + 1], y[i:j + 1]),
            feature_dispersion_deg=fixation_feature_dispersion(pts),
        ))
    return fixations


def assign_aoi(f: Fixation, cfg: AoiConfig) -> str:
    """Name of the AOI containing the fixation centroid, or ``none``."""
    cx, cy = f.centroid
    for name in AOI_NAMES:
        if cfg.regions[name].contains(cx, cy):
            return name
    return NO_AOI


def label_fixations(fixations: list[Fixation], cfg: AoiConfig) -> list[Fixation]:
    from dataclasses import replace

    return [replace(f, aoi=assign_aoi(f, cfg)) for f in fixations]


def gaze_window_metrics(fixations: list[Fixation], w: Window,
                        cfg: AoiConfig) -> dict:
    """Per-AOI fixation count, mean duration (ms) and mean dispersion (deg).

    A fixation belongs to the window iff its midpoint lies inside it.
    Means are MISSING for AOIs with no fixations in the window.
    """
    metrics = {}
    in_window = [f for f in fixations if w.contains(f.midpoint_ms)]
    for name in AOI_NAMES:
        fs = [f for f in in_window if f.aoi == name]
        metrics[f"number_of_fixations_{name}"] = len(fs)
        if fs:
            metrics[f"mean_duration_{name}"] = float(np.mean([f.duration_ms for f in fs]))
            metrics[f"mean_dispersion_{name}"] = float(
                np.mean([f.feature_dispersion_deg for f in fs]))
        else:
            metrics[f"mean_duration_{name}"] = MISSING
            metrics[f"mean_dispersion_{name}"] = MISSING
    return metrics
