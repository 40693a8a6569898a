"""Command-line pipeline: synth -> extract -> train -> explain -> select -> report.

Every stage reads and writes inside one run directory (``--out``) so the
stages chain without repeating paths. Exit codes: 0 success, 2 invalid
configuration or arguments, 3 missing input artifact, 4 schema mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import evaluation, explain, featureset, gbdt, synthgen
from .gaze import AoiConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_INPUT = 3
EXIT_SCHEMA = 4

log = logging.getLogger("driversa")


class ConfigError(Exception):
    pass


class MissingInputError(Exception):
    pass


class SchemaError(Exception):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    """Run-wide settings; every stage reads only the sections it needs."""

    synth: synthgen.SynthConfig = field(default_factory=synthgen.SynthConfig)
    train: gbdt.TrainParams = field(default_factory=gbdt.TrainParams)
    aoi: AoiConfig = field(default_factory=synthgen.default_aoi_config)
    rmssd_mode: str = "standard"
    gsr_median_s: float = 4.0
    gsr_smooth_s: float = 2.0
    cv_folds: int = 10
    group_by_participant: bool = False

    def __post_init__(self):
        if self.rmssd_mode not in ("standard", "unnormalized"):
            raise ConfigError(f"unknown rmssd_mode: {self.rmssd_mode!r}")
        if self.cv_folds < 2:
            raise ConfigError("cv_folds must be at least 2")
        if self.gsr_median_s <= 0 or self.gsr_smooth_s <= 0:
            raise ConfigError("GSR filter widths must be positive")

    @classmethod
    def from_json(cls, obj: dict) -> "PipelineConfig":
        known = {"synth", "train", "aoi", "rmssd_mode", "gsr_median_s",
                 "gsr_smooth_s", "cv_folds", "group_by_participant"}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        try:
            if "synth" in obj:
                kwargs["synth"] = synthgen.SynthConfig.from_json(obj["synth"])
            if "train" in obj:
                kwargs["train"] = gbdt.TrainParams.from_json(obj["train"])
            if "aoi" in obj:
                kwargs["aoi"] = AoiConfig.from_json(obj["aoi"])
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid config section: {exc}") from exc
        for key in ("rmssd_mode", "gsr_median_s", "gsr_smooth_s", "cv_folds",
                    "group_by_participant"):
            if key in obj:
                kwargs[key] = obj[key]
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def with_seed(self, seed: int) -> "PipelineConfig":
        from dataclasses import replace

        return replace(self,
                       synth=synthgen.SynthConfig.from_json(
                           {**self.synth.to_json(), "seed": seed}),
                       train=gbdt.TrainParams.from_json(
                           {**self.train.to_json(), "seed": seed}))


def load_config(path: str | None, seed: int | None) -> PipelineConfig:
    if path is None:
        cfg = PipelineConfig()
    else:
        p = Path(path)
        if not p.exists():
            raise MissingInputError(f"config file not found: {p}")
        try:
            obj = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: not valid JSON ({exc})") from exc
        try:
            cfg = PipelineConfig.from_json(obj)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingInputError(
            f"{what} not found: {path} (run the producing stage first)")
    return path


def _load_dataset(path: Path) -> featureset.Dataset:
    _require(path, "dataset")
    try:
        return featureset.load_dataset(path)
    except ValueError as exc:
        raise SchemaError(str(exc)) from exc


def cmd_synth(args, cfg: PipelineConfig) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    truth = synthgen.generate(cfg.synth, out)
    log.info("synth: wrote %d sessions under %s", cfg.synth.n_drives,
             out / "sessions")
    log.info("synth: planted effects on %s", truth["informative_features"])


def cmd_extract(args, cfg: PipelineConfig) -> None:
    out = Path(args.out)
    sessions_dir = _require(out / "sessions", "session data")
    demo_path = _require(out / "demographics.csv", "demographics table")
    try:
        demographics = synthgen.load_demographics(demo_path)
    except (KeyError, ValueError, AttributeError) as exc:
        raise SchemaError(f"{demo_path}: bad demographics table ({exc})") from exc

    from .timebase import load_session

    session_dirs = sorted(p for p in sessions_dir.iterdir() if p.is_dir())
    if not session_dirs:
        raise MissingInputError(f"no session directories under {sessions_dir}")

    def sessions():
        for sdir in session_dirs:
            try:
                yield load_session(sdir)
            except ValueError as exc:
                raise SchemaError(str(exc)) from exc

    try:
        dataset = featureset.build_dataset(
            sessions(), demographics, cfg.aoi, rmssd_mode=cfg.rmssd_mode,
            gsr_median_s=cfg.gsr_median_s, gsr_smooth_s=cfg.gsr_smooth_s)
    except KeyError as exc:
        raise SchemaError(f"participant missing from demographics: {exc}") from exc
    featureset.save_dataset(dataset, out / "dataset.csv")
    log.info("extract: %d rows x %d feature columns -> %s", len(dataset),
             len(featureset.FEATURE_NAMES), out / "dataset.csv")


def _cv_cache_key(cfg: PipelineConfig, dataset_path: Path) -> dict:
    import hashlib

    digest = hashlib.sha256(dataset_path.read_bytes()).hexdigest()
    return {"params": cfg.train.to_json(), "k": cfg.cv_folds,
            "group_by_participant": cfg.group_by_participant,
            "dataset_sha256": digest}


def _load_cached_models(out: Path, key: dict):
    """Fold models saved by the training stage, or None on any mismatch."""
    key_path = out / "models" / "key.json"
    if not key_path.exists() or not (out / "cv_report.json").exists():
        return None
    if json.loads(key_path.read_text()) != key:
        return None
    report = evaluation.CvReport.load(out / "cv_report.json")
    models = []
    for f in range(report.k):
        path = out / "models" / f"fold_{f:02d}.json"
        if not path.exists():
            return None
        models.append(gbdt.Ensemble.load(path))
    return report, models


def cmd_train(args, cfg: PipelineConfig) -> None:
    out = Path(args.out)
    dataset = _load_dataset(out / "dataset.csv")
    report, models = evaluation.kfold_cv(
        dataset, cfg.train, k=cfg.cv_folds, seed=cfg.train.seed,
        threads=args.threads, group_by_participant=cfg.group_by_participant,
        return_models=True)
    report.save(out / "cv_report.json")
    models_dir = out / "models"
    models_dir.mkdir(exist_ok=True)
    for f, model in enumerate(models):
        model.save(models_dir / f"fold_{f:02d}.json")
    (models_dir / "key.json").write_text(
        json.dumps(_cv_cache_key(cfg, out / "dataset.csv"), indent=1))
    p = report.pooled
    log.info("train: %d-fold CV RMSE %.4f MAE %.4f Corr %.4f -> %s",
             cfg.cv_folds, p["rmse"], p["mae"], p["corr"],
             out / "cv_report.json")


def cmd_explain(args, cfg: PipelineConfig) -> None:
    out = Path(args.out)
    dataset = _load_dataset(out / "dataset.csv")
    cached = _load_cached_models(out, _cv_cache_key(cfg, out / "dataset.csv"))
    if cached is not None:
        report, models = cached
        per_fold, pooled = explain.shap_from_cv(report, models, dataset)
    else:
        report, per_fold, pooled = explain.fold_shap(
            dataset, cfg.train, k=cfg.cv_folds, seed=cfg.train.seed,
            threads=args.threads, group_by_participant=cfg.group_by_participant)
    ranking = explain.rank_features(per_fold)
    ranking.save(out / "importance.json")
    explain.write_shap_csv(pooled, out / "shap.csv")
    effects = evaluation.feature_effect_report(
        pooled.values, dataset, pooled.feature_names)
    evaluation.write_effect_reports(effects, out / "effects")
    with open(out / "effects" / "spearman.json", "w") as fh:
        json.dump({n: {"rho": effects[n]["spearman_rho"],
                       "p": effects[n]["spearman_p"]}
                   for n in pooled.feature_names}, fh, indent=1)
    log.info("explain: top features %s -> %s", list(ranking.top(5)),
             out / "importance.json")


def cmd_select(args, cfg: PipelineConfig) -> None:
    out = Path(args.out)
    dataset = _load_dataset(out / "dataset.csv")
    ranking_path = _require(out / "importance.json", "importance ranking")
    try:
        ranking = explain.ImportanceRanking.load(ranking_path)
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise SchemaError(f"{ranking_path}: bad ranking file ({exc})") from exc
    curve = explain.incremental_selection(
        dataset, ranking, cfg.train, cv_folds=cfg.cv_folds,
        seed=cfg.train.seed, threads=args.threads,
        group_by_participant=cfg.group_by_participant)
    curve.save_csv(out / "selection.csv")
    (out / "selection.json").write_text(json.dumps(curve.to_json(), indent=1))
    log.info("select: best subset size %d (RMSE %.4f) -> %s", curve.k_star,
             curve.entry(curve.k_star)["rmse"], out / "selection.json")


def cmd_report(args, cfg: PipelineConfig) -> None:
    out = Path(args.out)
    cv_path = _require(out / "cv_report.json", "cross-validation report")
    sel_path = _require(out / "selection.json", "selection results")
    try:
        cv = evaluation.CvReport.load(cv_path)
        sel = json.loads(sel_path.read_text())
        k_star = int(sel["k_star"])
        best = next(e for e in sel["entries"] if e["k"] == k_star)
        selected = sel["ranking"]["features"][:k_star]
    except (KeyError, ValueError, StopIteration, json.JSONDecodeError) as exc:
        raise SchemaError(f"bad report inputs ({exc})") from exc

    all_metrics = {k: cv.pooled[k] for k in ("rmse", "mae", "corr")}
    sel_metrics = {k: best[k] for k in ("rmse", "mae", "corr")}
    summary = {
        "n_rows": cv.pooled["n"],
        "cv_folds": cv.k,
        "all_features": {"count": len(cv.feature_names), "metrics": all_metrics},
        "selected_features": {"count": k_star, "features": selected,
                              "metrics": sel_metrics},
        "rmse_delta": sel_metrics["rmse"] - all_metrics["rmse"],
    }
    (out / "report.json").write_text(json.dumps(summary, indent=1))

    lines = [
        "# Situation-awareness prediction report",
        "",
        f"Rows: {summary['n_rows']}  |  CV folds: {summary['cv_folds']}",
        "",
        "| model | features | RMSE | MAE | Corr |",
        "|---|---|---|---|---|",
        "| all features | {} | {:.4f} | {:.4f} | {:.4f} |".format(
            len(cv.feature_names), *(all_metrics[k] for k in ("rmse", "mae", "corr"))),
        "| selected | {} | {:.4f} | {:.4f} | {:.4f} |".format(
            k_star, *(sel_metrics[k] for k in ("rmse", "mae", "corr"))),
        "",
        "Selected features (importance order):",
        "",
    ]
    lines += [f"{i + 1}. {name}" for i, name in enumerate(selected)]
    (out / "report.md").write_text("\n".join(lines) + "\n")
    log.info("report: all-RMSE %.4f vs selected-RMSE %.4f -> %s",
             all_metrics["rmse"], sel_metrics["rmse"], out / "report.md")


COMMANDS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "train": cmd_train,
    "explain": cmd_explain,
    "select": cmd_select,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="driversa",
        description="Situation-awareness prediction pipeline for simulated "
                    "driving studies.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
            ("synth", "generate a synthetic study into the run directory"),
            ("extract", "extract per-window features into dataset.csv"),
            ("train", "cross-validated model training and metrics"),
            ("explain", "per-fold SHAP attributions and feature ranking"),
            ("select", "incremental feature selection along the ranking"),
            ("report", "compare all-features vs selected-features metrics")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--config", default=None, help="pipeline config JSON")
        p.add_argument("--seed", type=int, default=None,
                       help="override generator and training seeds")
        p.add_argument("--threads", type=int, default=1,
                       help="worker processes for cross-validation folds")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, args.seed)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
