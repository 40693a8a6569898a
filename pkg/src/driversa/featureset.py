"""Assembly of the 21-feature window rows and dataset persistence."""

from __future__ import annotations

import logging
from bisect import bisect_right
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from . import gaze as gaze_mod
from . import physio, timebase
from .timebase import MISSING, SessionManifest, Window

log = logging.getLogger(__name__)

FEATURE_NAMES = (
    "age",
    "avKnowledge",
    "gender",
    "mean_gsr",
    "mean_HR",
    "mean_HRV",
    "number_of_fixations_center",
    "number_of_fixations_game",
    "number_of_fixations_left",
    "number_of_fixations_right",
    "number_of_fixations_odometer",
    "mean_dispersion_center",
    "mean_dispersion_game",
    "mean_dispersion_left",
    "mean_dispersion_right",
    "mean_dispersion_odometer",
    "mean_duration_center",
    "mean_duration_game",
    "mean_duration_left",
    "mean_duration_right",
    "mean_duration_odometer",
)

CATEGORICAL_FEATURES = ("avKnowledge", "gender")
COUNT_FEATURES = tuple(n for n in FEATURE_NAMES if n.startswith("number_of_fixations"))

GENDER_LEVELS = ("female", "male", "nonbinary")
AVKNOWLEDGE_LEVELS = ("none", "low", "moderate", "high", "expert")
CATEGORY_LEVELS = {"gender": GENDER_LEVELS, "avKnowledge": AVKNOWLEDGE_LEVELS}

LABEL_COLUMN = "sa_label"
PROVENANCE_COLUMNS = ("participant_id", "drive_id", "window_index")
ALL_COLUMNS = FEATURE_NAMES + (LABEL_COLUMN,) + PROVENANCE_COLUMNS

SA_LEVELS = (0, 1, 2, 3)


@dataclass(frozen=True)
class Demographics:
    """Per-participant attributes replicated onto every window row."""

    age: int
    gender: str
    avKnowledge: str

    def __post_init__(self):
        if self.age <= 0:
            raise ValueError("age must be a positive integer")
        if self.gender not in GENDER_LEVELS:
            raise ValueError(f"unknown gender category: {self.gender!r}")
        if self.avKnowledge not in AVKNOWLEDGE_LEVELS:
            raise ValueError(f"unknown avKnowledge category: {self.avKnowledge!r}")


def feature_kind(name: str) -> str:
    return "categorical" if name in CATEGORICAL_FEATURES else "numeric"


@dataclass(frozen=True)
class Dataset:
    """Ordered window rows with a uniform 21-feature schema."""

    frame: pd.DataFrame

    def __post_init__(self):
        if tuple(self.frame.columns) != ALL_COLUMNS:
            raise ValueError("dataset schema mismatch: unexpected column set/order")
        labels = self.frame[LABEL_COLUMN].to_numpy()
        if len(labels) and not np.isin(labels, SA_LEVELS).all():
            raise ValueError("sa_label values must lie in {0,1,2,3}")

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def schema(self) -> dict:
        return {name: feature_kind(name) for name in FEATURE_NAMES}

    def labels(self) -> np.ndarray:
        return self.frame[LABEL_COLUMN].to_numpy(dtype=np.float64)

    def design_matrix(self, feature_names=None):
        """Numeric matrix view for model training.

        Categorical features are mapped to fixed-vocabulary codes; MISSING
        stays NaN. Returns (X, names, kinds) where kinds[i] is "numeric"
        or "categorical".
        """
        names = tuple(feature_names) if feature_names is not None else FEATURE_NAMES
        unknown = set(names) - set(FEATURE_NAMES)
        if unknown:
            raise ValueError(f"unknown features requested: {sorted(unknown)}")
        cols = []
        for name in names:
            if name in CATEGORICAL_FEATURES:
                levels = CATEGORY_LEVELS[name]
                codes = self.frame[name].map({c: i for i, c in enumerate(levels)})
                cols.append(codes.to_numpy(dtype=np.float64))
            else:
                cols.append(self.frame[name].to_numpy(dtype=np.float64))
        X = np.column_stack(cols) if cols else np.empty((len(self.frame), 0))
        kinds = tuple(feature_kind(n) for n in names)
        return X, names, kinds


def attach_window_index(windows: list[Window], prompt_t_ms: float):
    """Index of the window whose end is at or nearest before the prompt.

    Returns None when no window has ended yet (prompt inside the first,
    still-incomplete interval). Ties (a prompt exactly on a shared window
    end) resolve to the earlier window because ends are unique.
    """
    ends = [w.end_ms for w in windows]
    i = bisect_right(ends, prompt_t_ms) - 1
    if i < 0:
        return None
    return min(i, len(windows) - 1)


def extract_session_rows(manifest: SessionManifest, streams: dict,
                         prompts: np.ndarray, demographics: Demographics,
                         aoi_cfg: gaze_mod.AoiConfig,
                         rmssd_mode: str = "standard",
                         gsr_median_s: float = 4.0, gsr_smooth_s: float = 2.0,
                         stride_ms: float = timebase.WINDOW_MS) -> list[dict]:
    """Feature rows for one drive: one dict per labeled 30 s window."""
    windows = timebase.make_windows(manifest.drive_start_ms,
                                    manifest.drive_end_ms, stride_ms=stride_ms)
    if not windows:
        return []

    phasic = physio.decompose_gsr(streams["gsr"], median_s=gsr_median_s,
                                  smooth_s=gsr_smooth_s).phasic
    fixations = gaze_mod.label_fixations(
        gaze_mod.detect_fixations_idt(streams["gaze"]), aoi_cfg)
    ibi = streams["ibi"]

    # Earliest prompt wins when several fall in one window.
    labels_by_window: dict[int, int] = {}
    for t, label in sorted(map(tuple, prompts)):
        idx = attach_window_index(windows, t)
        if idx is None:
            log.info("%s/%s: prompt at %.0f ms precedes first window end; dropped",
                     manifest.participant_id, manifest.drive_id, t)
            continue
        labels_by_window.setdefault(idx, int(label))

    rows = []
    for w in windows:
        if w.index not in labels_by_window:
            log.info("%s/%s: window %d has no SA prompt; dropped",
                     manifest.participant_id, manifest.drive_id, w.index)
            continue
        beats = timebase.window_slice(ibi, w)
        ibi_w = physio.IbiWindow(ibi.values[beats])
        row = {
            "age": demographics.age,
            "avKnowledge": demographics.avKnowledge,
            "gender": demographics.gender,
            "mean_gsr": timebase.window_mean(phasic, w),
            "mean_HR": physio.hr_from_ibi(ibi_w),
            "mean_HRV": physio.rmssd(ibi_w, mode=rmssd_mode),
        }
        row.update(gaze_mod.gaze_window_metrics(fixations, w, aoi_cfg))
        row[LABEL_COLUMN] = labels_by_window[w.index]
        row["participant_id"] = manifest.participant_id
        row["drive_id"] = manifest.drive_id
        row["window_index"] = w.index
        rows.append(row)
    return rows


def build_dataset(sessions, demographics_by_participant: dict,
                  aoi_cfg: gaze_mod.AoiConfig, **extract_kwargs) -> Dataset:
    """Build the full dataset from (manifest, streams, prompts) sessions.

    Rows are ordered deterministically by (participant_id, drive_id,
    window_index) regardless of input session order.
    """
    rows = []
    for manifest, streams, prompts in sessions:
        demo = demographics_by_participant[manifest.participant_id]
        rows.extend(extract_session_rows(manifest, streams, prompts, demo,
                                         aoi_cfg, **extract_kwargs))
    rows.sort(key=lambda r: (r["participant_id"], r["drive_id"], r["window_index"]))
    return rows_to_dataset(rows)


def rows_to_dataset(rows: list[dict]) -> Dataset:
    frame = pd.DataFrame(rows, columns=list(ALL_COLUMNS))
    return Dataset(frame=_coerce_dtypes(frame))


def _coerce_dtypes(frame: pd.DataFrame) -> pd.DataFrame:
    out = frame.copy()
    for name in FEATURE_NAMES:
        if name in CATEGORICAL_FEATURES:
            out[name] = out[name].astype(str)
        elif name in COUNT_FEATURES or name == "age":
            out[name] = out[name].astype(np.int64)
        else:
            out[name] = out[name].astype(np.float64)
    out[LABEL_COLUMN] = out[LABEL_COLUMN].astype(np.int64)
    out["participant_id"] = out["participant_id"].astype(str)
    out["drive_id"] = out["drive_id"].astype(str)
    out["window_index"] = out["window_index"].astype(np.int64)
    return out


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write dataset.csv; MISSING cells are empty fields."""
    dataset.frame.to_csv(path, index=False, na_rep="")


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    try:
        frame = pd.read_csv(
            path,
            dtype={name: str for name in CATEGORICAL_FEATURES + PROVENANCE_COLUMNS[:2]},
            float_precision="round_trip",
        )
    except Exception as exc:  # malformed CSV
        raise ValueError(f"{path}: malformed dataset CSV ({exc})") from exc
    if tuple(frame.columns) != ALL_COLUMNS:
        raise ValueError(
            f"{path}: dataset schema mismatch; expected columns {list(ALL_COLUMNS)}")
    return Dataset(frame=_coerce_dtypes(frame))
