"""Timestamped stream containers, device synchronization and 30 s windowing."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

WINDOW_MS = 30_000.0

#: Sentinel for "no value in this window". NaN so it flows through numeric
#: arrays and the GBDT's native missing handling without special cases.
MISSING = math.nan


def is_missing(x) -> bool:
    try:
        return math.isnan(float(x))
    except (TypeError, ValueError):
        return x is None


@dataclass(frozen=True)
class TimedSeries:
    """Uniformly-typed (timestamp, value) stream recorded by one device.

    Timestamps are milliseconds on the session clock, strictly increasing.
    ``values`` is (n,) for scalar channels or (n, k) for vector channels
    (e.g. gaze x/y).
    """

    device_id: str
    nominal_rate_hz: float
    delay_ms: float
    t_ms: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t_ms, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "t_ms", t)
        object.__setattr__(self, "values", v)
        if self.nominal_rate_hz <= 0:
            raise ValueError(f"{self.device_id}: nominal_rate_hz must be positive")
        if not math.isfinite(self.delay_ms):
            raise ValueError(f"{self.device_id}: delay_ms must be finite")
        if t.ndim != 1:
            raise ValueError(f"{self.device_id}: t_ms must be 1-D")
        if len(v) != len(t):
            raise ValueError(f"{self.device_id}: timestamp/value length mismatch")
        if len(t) > 1 and not np.all(np.diff(t) > 0):
            raise ValueError(f"{self.device_id}: timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.t_ms)


@dataclass(frozen=True)
class Window:
    """One 30-second analysis window, half-open: [start_ms, end_ms)."""

    index: int
    start_ms: float
    end_ms: float

    def __post_init__(self):
        if self.index < 0:
            raise ValueError("window index must be non-negative")
        if self.end_ms - self.start_ms != WINDOW_MS:
            raise ValueError("window length must be exactly 30000 ms")

    def contains(self, t_ms: float) -> bool:
        return self.start_ms <= t_ms < self.end_ms


def apply_delay(series: TimedSeries) -> TimedSeries:
    """Shift a stream onto the session clock by removing its platform delay."""
    if series.delay_ms == 0:
        return series
    return replace(series, t_ms=series.t_ms - series.delay_ms, delay_ms=0.0)


def make_windows(drive_start_ms: float, drive_end_ms: float,
                 stride_ms: float = WINDOW_MS) -> list[Window]:
    """Tile a drive with contiguous 30 s windows; a trailing partial is dropped.

    ``stride_ms`` exists for sensitivity studies; the default (stride ==
    length) yields non-overlapping windows matching the 30 s SA prompts.
    """
    if drive_end_ms <= drive_start_ms:
        raise ValueError("drive_end_ms must exceed drive_start_ms")
    windows = []
    i = 0
    while drive_start_ms + i * stride_ms + WINDOW_MS <= drive_end_ms:
        start = drive_start_ms + i * stride_ms
        windows.append(Window(index=i, start_ms=start, end_ms=start + WINDOW_MS))
        i += 1
    return windows


def window_slice(series: TimedSeries, w: Window) -> np.ndarray:
    """Indices of samples falling in [w.start_ms, w.end_ms)."""
    lo = np.searchsorted(series.t_ms, w.start_ms, side="left")
    hi = np.searchsorted(series.t_ms, w.end_ms, side="left")
    return np.arange(lo, hi)


def window_mean(series: TimedSeries, w: Window) -> float:
    """Arithmetic mean of values inside the window, MISSING when empty."""
    idx = window_slice(series, w)
    if len(idx) == 0:
        return MISSING
    return float(np.mean(series.values[idx], axis=0))


@dataclass(frozen=True)
class SessionManifest:
    """Per-session descriptor: who drove, when, and each device's delay."""

    participant_id: str
    drive_id: str
    drive_start_ms: float
    drive_end_ms: float
    delays_ms: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "participant_id": self.participant_id,
            "drive_id": self.drive_id,
            "drive_start_ms": self.drive_start_ms,
            "drive_end_ms": self.drive_end_ms,
            "delays_ms": dict(self.delays_ms),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SessionManifest":
        return cls(
            participant_id=str(obj["participant_id"]),
            drive_id=str(obj["drive_id"]),
            drive_start_ms=float(obj["drive_start_ms"]),
            drive_end_ms=float(obj["drive_end_ms"]),
            delays_ms={k: float(v) for k, v in obj["delays_ms"].items()},
        )


def _read_csv_columns(path: Path, expected_header: list[str]) -> np.ndarray:
    from pyarrow import csv as pyarrow_csv
    from pyarrow.lib import ArrowInvalid

    try:
        table = pyarrow_csv.read_csv(
            str(path),
            read_options=pyarrow_csv.ReadOptions(use_threads=False))
    except ArrowInvalid as exc:
        raise ValueError(f"{path}: malformed CSV ({exc})") from exc
    if table.column_names != expected_header:
        raise ValueError(f"{path}: expected columns {expected_header}, "
                         f"got {table.column_names}")
    if table.num_rows == 0:
        return np.empty((0, len(expected_header)))
    cols = [table.column(i).combine_chunks().to_numpy().astype(np.float64)
            for i in range(table.num_columns)]
    return np.column_stack(cols)


def load_session(session_dir: str | Path):
    """Load one session directory (manifest + gsr/ibi/gaze/prompt CSVs).

    Returns (manifest, streams dict, prompts array of (t_ms, label)).
    Streams are delay-corrected onto the session clock.
    """
    session_dir = Path(session_dir)
    manifest_path = session_dir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing manifest: {manifest_path}")
    manifest = SessionManifest.from_json(json.loads(manifest_path.read_text()))

    gsr = _read_csv_columns(session_dir / "gsr.csv", ["t_ms", "microsiemens"])
    ibi = _read_csv_columns(session_dir / "ibi.csv", ["t_ms", "ibi_ms"])
    gaze = _read_csv_columns(session_dir / "gaze.csv", ["t_ms", "x_deg", "y_deg"])
    prompts = _read_csv_columns(session_dir / "sa_prompts.csv", ["t_ms", "label"])

    def series(device, rate, data, ncols):
        return apply_delay(TimedSeries(
            device_id=device,
            nominal_rate_hz=rate,
            delay_ms=manifest.delays_ms.get(device, 0.0),
            t_ms=data[:, 0],
            values=data[:, 1] if ncols == 1 else data[:, 1:],
        ))

    streams = {
        "gsr": series("gsr", 128.0, gsr, 1),
        "ibi": series("ibi", 128.0, ibi, 1),
        "gaze": series("gaze", 200.0, gaze, 2),
    }
    return manifest, streams, prompts
