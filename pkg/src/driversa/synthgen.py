"""Deterministic synthetic experiment generator with planted feature effects.

Generation works backward: window-level feature targets are sampled first
(the planted effects act on these), then raw GSR / IBI / gaze streams are
synthesized so the extraction pipeline recovers the targets — counts
exactly, means within tight tolerance. This makes every downstream stage
testable against ground truth.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import pyarrow as pa
from pyarrow import csv as pyarrow_csv

from . import featureset
from .gaze import AoiConfig
from .timebase import MISSING, WINDOW_MS

GSR_RATE_HZ = 128.0
GAZE_STEP_MS = 5.0
GSR_STEP_MS = 1000.0 / GSR_RATE_HZ           # 7.8125, exactly representable
GSR_SAMPLES_PER_WINDOW = int(WINDOW_MS / GSR_STEP_MS)  # 3840

PULSE_AMPLITUDE_US = 1.0
PULSE_MAX_SAMPLES = 179      # < half the 4 s median kernel
PULSE_GAP_SAMPLES = 269      # keeps any 4 s window majority-baseline
WINDOW_EDGE_MARGIN_SAMPLES = 256

#: Features whose window-level value the generator controls directly.
PLANTABLE_FEATURES = (
    "mean_gsr", "mean_HR", "mean_HRV",
    "number_of_fixations_center", "number_of_fixations_game",
    "number_of_fixations_left", "number_of_fixations_right",
    "number_of_fixations_odometer",
)

TARGET_RANGES = {
    "mean_gsr": (0.05, 0.30),     # phasic µS
    "mean_HR": (55.0, 95.0),      # bpm
    "mean_HRV": (15.0, 120.0),    # ms RMSSD
    "number_of_fixations_center": (2, 10),
    "number_of_fixations_game": (2, 12),
    "number_of_fixations_left": (0, 3),
    "number_of_fixations_right": (0, 3),
    "number_of_fixations_odometer": (0, 3),
}

DEFAULT_EFFECTS = (
    ("mean_HR", +1, 1.2),
    ("mean_gsr", +1, 1.2),
    ("number_of_fixations_game", +1, 1.2),
    ("number_of_fixations_center", -1, 1.2),
)

#: Disjoint half-open AOI rectangles in degrees, and the fixation anchor
#: lattice inside each (anchors >= 2.5 degrees apart so consecutive
#: fixations always read as separate to the dispersion threshold).
DEFAULT_AOI_RECTS = {
    "center": (-7.0, 7.0, 1.0, 9.0),
    "game": (-7.0, 7.0, -11.0, -3.0),
    "left": (-20.0, -8.0, 1.0, 9.0),
    "right": (8.0, 20.0, 1.0, 9.0),
    "odometer": (8.0, 17.0, -11.0, -3.0),
}

AOI_ANCHORS = {
    "center": [(-4.5, 3.0), (-1.5, 6.0), (1.5, 3.0), (4.5, 6.0)],
    "game": [(-4.5, -9.0), (-1.5, -6.0), (1.5, -9.0), (4.5, -6.0)],
    "left": [(-17.0, 3.0), (-14.0, 6.0), (-11.0, 3.0)],
    "right": [(11.0, 3.0), (14.0, 6.0), (17.0, 3.0)],
    "odometer": [(10.5, -9.0), (13.5, -6.0), (10.5, -6.0), (13.5, -9.0)],
}


def default_aoi_config() -> AoiConfig:
    return AoiConfig.from_json({k: list(v) for k, v in DEFAULT_AOI_RECTS.items()})


@dataclass(frozen=True)
class SynthConfig:
    n_participants: int = 44
    drives_per_participant: int = 2
    total_rows: int = 1634
    effects: tuple = DEFAULT_EFFECTS
    noise_sd: float = 0.25
    seed: int = 0
    gsr_delay_ms: float = 120.0
    ibi_delay_ms: float = 120.0
    gaze_delay_ms: float = 40.0

    def __post_init__(self):
        if self.n_participants < 1 or self.drives_per_participant < 1:
            raise ValueError("need at least one participant and one drive")
        n_drives = self.n_participants * self.drives_per_participant
        if self.total_rows < n_drives:
            raise ValueError("total_rows must allow at least one window per drive")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")
        seen = set()
        for eff in self.effects:
            feat, direction, strength = eff
            if feat not in PLANTABLE_FEATURES:
                raise ValueError(
                    f"infeasible effect spec: {feat!r} is not a plantable feature")
            if feat in seen:
                raise ValueError(f"infeasible effect spec: duplicate feature {feat!r}")
            if direction not in (-1, +1):
                raise ValueError("effect direction must be +1 or -1")
            if not math.isfinite(strength):
                raise ValueError("effect strengths must be finite")
            seen.add(feat)
        object.__setattr__(
            self, "effects",
            tuple((str(f), int(d), float(s)) for f, d, s in self.effects))

    @property
    def n_drives(self) -> int:
        return self.n_participants * self.drives_per_participant

    def windows_per_drive(self) -> list[int]:
        """Drive window counts summing exactly to total_rows."""
        base, extra = divmod(self.total_rows, self.n_drives)
        return [base + (1 if i < extra else 0) for i in range(self.n_drives)]

    def to_json(self) -> dict:
        return {
            "n_participants": self.n_participants,
            "drives_per_participant": self.drives_per_participant,
            "total_rows": self.total_rows,
            "effects": [list(e) for e in self.effects],
            "noise_sd": self.noise_sd,
            "seed": self.seed,
            "gsr_delay_ms": self.gsr_delay_ms,
            "ibi_delay_ms": self.ibi_delay_ms,
            "gaze_delay_ms": self.gaze_delay_ms,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SynthConfig":
        obj = dict(obj)
        if "effects" in obj:
            obj["effects"] = tuple(tuple(e) for e in obj["effects"])
        return cls(**obj)


def _rng(*key) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(key))))


def _norm(feature: str, value: float) -> float:
    lo, hi = TARGET_RANGES[feature]
    return (value - lo) / (hi - lo)


@dataclass
class _WindowPlan:
    targets: dict
    sa_label: int
    gaze_specs: list = field(default_factory=list)   # (aoi, anchor, d, duration)


def _plan_window(rng: np.random.Generator, cfg: SynthConfig) -> _WindowPlan:
    targets = {}
    hr = rng.uniform(*TARGET_RANGES["mean_HR"])
    ibi_ms = round(60000.0 / hr, 4)
    targets["mean_HR"] = 60000.0 / ibi_ms
    targets["_ibi_ms"] = ibi_ms

    delta = round(rng.uniform(TARGET_RANGES["mean_HRV"][0] / 2,
                              TARGET_RANGES["mean_HRV"][1] / 2), 4)
    targets["mean_HRV"] = 2.0 * delta
    targets["_ibi_delta_ms"] = delta

    m = rng.uniform(*TARGET_RANGES["mean_gsr"])
    pulse_samples = int(round(m * GSR_SAMPLES_PER_WINDOW / PULSE_AMPLITUDE_US))
    targets["mean_gsr"] = pulse_samples * PULSE_AMPLITUDE_US / GSR_SAMPLES_PER_WINDOW
    targets["_gsr_pulse_samples"] = pulse_samples

    for name in ("center", "game", "left", "right", "odometer"):
        lo, hi = TARGET_RANGES[f"number_of_fixations_{name}"]
        targets[f"number_of_fixations_{name}"] = int(rng.integers(lo, hi + 1))

    latent = 1.5
    for feat, direction, strength in cfg.effects:
        latent += direction * strength * (_norm(feat, targets[feat]) - 0.5)
    latent += rng.normal(0.0, cfg.noise_sd)
    label = int(np.clip(np.rint(latent), 0, 3))
    return _WindowPlan(targets=targets, sa_label=label)


def _plan_gaze(rng: np.random.Generator, plan: _WindowPlan, prev_anchor):
    """Pick anchor, dispersion and duration for each fixation of a window."""
    specs = []
    for name in ("center", "game", "left", "right", "odometer"):
        for _ in range(plan.targets[f"number_of_fixations_{name}"]):
            d = int(rng.integers(8, 41)) / 100.0       # 0.08..0.40 deg
            dur = 235.0 + 10.0 * int(rng.integers(0, 29))  # 235..515 ms
            specs.append([name, d, dur])
    order = rng.permutation(len(specs))
    out = []
    durations = {}
    dispersions = {}
    for k in order:
        name, d, dur = specs[k]
        anchors = [a for a in AOI_ANCHORS[name] if a != prev_anchor]
        anchor = anchors[int(rng.integers(0, len(anchors)))]
        out.append((name, anchor, d, dur))
        durations.setdefault(name, []).append(dur)
        dispersions.setdefault(name, []).append(d)
        prev_anchor = anchor
    plan.gaze_specs = out
    for name in ("center", "game", "left", "right", "odometer"):
        if name in durations:
            plan.targets[f"mean_duration_{name}"] = float(np.mean(durations[name]))
            plan.targets[f"mean_dispersion_{name}"] = float(np.mean(dispersions[name]))
        else:
            plan.targets[f"mean_duration_{name}"] = MISSING
            plan.targets[f"mean_dispersion_{name}"] = MISSING
    return prev_anchor


def _emit_gsr(plans, baseline: float, drive_end_ms: float):
    n = int(drive_end_ms / GSR_STEP_MS)
    t = np.arange(n) * GSR_STEP_MS
    v = np.full(n, baseline)
    for w, plan in enumerate(plans):
        w0 = w * GSR_SAMPLES_PER_WINDOW
        total = plan.targets["_gsr_pulse_samples"]
        n_pulses = max(int(math.ceil(total / PULSE_MAX_SAMPLES)), 1)
        base_len, rem = divmod(total, n_pulses)
        cursor = w0 + WINDOW_EDGE_MARGIN_SAMPLES
        for p in range(n_pulses):
            length = base_len + (1 if p < rem else 0)
            v[cursor:cursor + length] += PULSE_AMPLITUDE_US
            cursor += length + PULSE_GAP_SAMPLES
    return t, np.round(v, 4)


def _emit_ibi(plans):
    ts = []
    vs = []
    for w, plan in enumerate(plans):
        start = w * WINDOW_MS + 500.0
        end = (w + 1) * WINDOW_MS - 500.0
        ibi = plan.targets["_ibi_ms"]
        delta = plan.targets["_ibi_delta_ms"]
        k = int((end - start) / ibi) + 1
        if k % 2 == 1:
            k -= 1
        t = start + np.arange(k) * ibi
        v = np.where(np.arange(k) % 2 == 0, ibi + delta, ibi - delta)
        ts.append(t)
        vs.append(v)
    return np.concatenate(ts), np.round(np.concatenate(vs), 4)


def _emit_gaze(plans):
    ts = []
    xs = []
    ys = []
    prev_anchor = None
    prev_end_ms = None
    for w, plan in enumerate(plans):
        cursor = w * WINDOW_MS + 100.0
        for name, anchor, d, dur in plan.gaze_specs:
            if prev_anchor is not None:
                # one transit sample midway: breaks any fixation bridge
                mx = 0.5 * (prev_anchor[0] + anchor[0])
                my = 0.5 * (prev_anchor[1] + anchor[1])
                ts.append(np.array([prev_end_ms + 30.0]))
                xs.append(np.array([mx]))
                ys.append(np.array([my]))
                cursor = max(cursor, prev_end_ms + 60.0)
            n = int(dur / GAZE_STEP_MS) + 1   # even by construction
            t = cursor + np.arange(n) * GAZE_STEP_MS
            x = np.where(np.arange(n) % 2 == 0, anchor[0] - d, anchor[0] + d)
            y = np.full(n, anchor[1])
            ts.append(t)
            xs.append(x)
            ys.append(y)
            prev_anchor = anchor
            prev_end_ms = cursor + dur
            cursor = prev_end_ms + 60.0
    if not ts:
        return np.empty(0), np.empty(0), np.empty(0)
    return (np.concatenate(ts), np.round(np.concatenate(xs), 4),
            np.round(np.concatenate(ys), 4))


def _write_stream(path: Path, columns: dict) -> None:
    # pyarrow's writer emits shortest round-trip float reprs and is an
    # order of magnitude faster than the pandas formatter on long streams
    pyarrow_csv.write_csv(
        pa.table({k: np.asarray(v, dtype=np.float64) for k, v in columns.items()}),
        str(path))


def generate(cfg: SynthConfig, out_dir: str | Path) -> dict:
    """Write the full synthetic study; returns the ground-truth record.

    Layout: ``sessions/<pid>_<did>/{manifest.json,gsr.csv,ibi.csv,gaze.csv,
    sa_prompts.csv}``, ``demographics.csv``, ``intended_features.csv`` (the
    dataset the pipeline should recover) and ``ground_truth.json``.
    """
    out_dir = Path(out_dir)
    sessions_dir = out_dir / "sessions"
    sessions_dir.mkdir(parents=True, exist_ok=True)

    windows = cfg.windows_per_drive()
    demo_rows = []
    intended_rows = []
    drive_idx = 0
    for p in range(cfg.n_participants):
        pid = f"p{p + 1:02d}"
        rng_p = _rng(cfg.seed, 1, p)
        demo = featureset.Demographics(
            age=int(rng_p.integers(18, 71)),
            gender=featureset.GENDER_LEVELS[
                int(rng_p.integers(0, len(featureset.GENDER_LEVELS)))],
            avKnowledge=featureset.AVKNOWLEDGE_LEVELS[
                int(rng_p.integers(0, len(featureset.AVKNOWLEDGE_LEVELS)))],
        )
        demo_rows.append({"participant_id": pid, "age": demo.age,
                          "gender": demo.gender, "avKnowledge": demo.avKnowledge})
        baseline = round(float(rng_p.uniform(2.0, 8.0)), 3)

        for d in range(cfg.drives_per_participant):
            did = f"d{d + 1}"
            rng_d = _rng(cfg.seed, 2, p, d)
            n_windows = windows[drive_idx]
            drive_idx += 1
            drive_end = n_windows * WINDOW_MS + 7000.0

            plans = []
            prev_anchor = None
            for _ in range(n_windows):
                plan = _plan_window(rng_d, cfg)
                prev_anchor = _plan_gaze(rng_d, plan, prev_anchor)
                plans.append(plan)

            gsr_t, gsr_v = _emit_gsr(plans, baseline, drive_end)
            ibi_t, ibi_v = _emit_ibi(plans)
            gaze_t, gaze_x, gaze_y = _emit_gaze(plans)

            sdir = sessions_dir / f"{pid}_{did}"
            sdir.mkdir(exist_ok=True)
            (sdir / "manifest.json").write_text(json.dumps({
                "participant_id": pid,
                "drive_id": did,
                "drive_start_ms": 0.0,
                "drive_end_ms": drive_end,
                "delays_ms": {"gsr": cfg.gsr_delay_ms, "ibi": cfg.ibi_delay_ms,
                              "gaze": cfg.gaze_delay_ms},
            }, indent=1))
            _write_stream(sdir / "gsr.csv",
                          {"t_ms": gsr_t + cfg.gsr_delay_ms, "microsiemens": gsr_v})
            _write_stream(sdir / "ibi.csv",
                          {"t_ms": ibi_t + cfg.ibi_delay_ms, "ibi_ms": ibi_v})
            _write_stream(sdir / "gaze.csv",
                          {"t_ms": gaze_t + cfg.gaze_delay_ms,
                           "x_deg": gaze_x, "y_deg": gaze_y})
            _write_stream(sdir / "sa_prompts.csv", {
                "t_ms": [(w + 1) * WINDOW_MS for w in range(n_windows)],
                "label": [float(plan.sa_label) for plan in plans],
            })

            for w, plan in enumerate(plans):
                row = {"age": demo.age, "avKnowledge": demo.avKnowledge,
                       "gender": demo.gender}
                for name in featureset.FEATURE_NAMES[3:]:
                    row[name] = plan.targets[name]
                row[featureset.LABEL_COLUMN] = plan.sa_label
                row["participant_id"] = pid
                row["drive_id"] = did
                row["window_index"] = w
                intended_rows.append(row)

    pd.DataFrame(demo_rows).to_csv(out_dir / "demographics.csv", index=False)
    intended = featureset.rows_to_dataset(intended_rows)
    featureset.save_dataset(intended, out_dir / "intended_features.csv")

    ground_truth = {
        "effects": [list(e) for e in cfg.effects],
        "informative_features": [e[0] for e in cfg.effects],
        "noise_sd": cfg.noise_sd,
        "seed": cfg.seed,
        "total_rows": cfg.total_rows,
        "target_ranges": {k: list(v) for k, v in TARGET_RANGES.items()},
        "aoi": default_aoi_config().to_json(),
    }
    (out_dir / "ground_truth.json").write_text(json.dumps(ground_truth, indent=1))
    return ground_truth


def load_demographics(path: str | Path) -> dict:
    frame = pd.read_csv(path, dtype={"participant_id": str, "gender": str,
                                     "avKnowledge": str})
    out = {}
    for row in frame.itertuples(index=False):
        out[row.participant_id] = featureset.Demographics(
            age=int(row.age), gender=row.gender, avKnowledge=row.avKnowledge)
    return out
