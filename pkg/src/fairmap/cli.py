"""Config-driven experiment runner.

Subcommands: ``train``, ``transform``, ``evaluate``, ``sweep``, ``report``.
One JSON config describes the dataset, the preprocessor, the sweep grids and
the downstream zoo; ``--override key=value`` patches individual entries.  All
outputs carry a config echo and a version stamp, and identical inputs with
identical seeds reproduce byte-identical files.

The evaluation helpers (:func:`build_dataset`, :func:`evaluate_preprocessor`,
:func:`run_sweep`, ...) are plain functions, usable without the command line.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, data, downstream, metrics, preprocess
from .data import Dataset, group_ids
from .hgr import estimate_hgr_independence
from .metrics import FairnessReport
from .preprocess import PreprocessorConfig, TrainedPreprocessor

DEFAULT_ZOO = ("logistic_regression", "knn", "small_mlp", "random_feature_linear")


class CliError(ValueError):
    """Invalid experiment configuration; the message names the field."""


@dataclass
class ExperimentConfig:
    """Everything one experiment needs: data, trainer, sweep grids, zoo."""

    dataset: dict
    preprocessor: PreprocessorConfig
    sweep_delta_x: list = field(default_factory=lambda: [0.1])
    sweep_delta_y: list = field(default_factory=lambda: [0.0])
    sweep_lambda_f: list = field(default_factory=lambda: [1.0])
    zoo: tuple = DEFAULT_ZOO
    runs: int = 1
    output_dir: str = "out"
    hgr_steps: int = 200

    def validate(self) -> None:
        if not self.dataset.get("kind"):
            raise CliError("dataset.kind is required")
        if self.runs < 1:
            raise CliError("runs must be >= 1")
        for name in ("sweep_delta_x", "sweep_delta_y", "sweep_lambda_f"):
            if not getattr(self, name):
                raise CliError(f"{name} must be a non-empty list")
        for kind in self.zoo:
            if kind not in downstream.KINDS:
                raise CliError(f"unknown downstream kind {kind!r}")
        self.preprocessor.validate()

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        try:
            pp_cfg = PreprocessorConfig.from_dict(doc.get("preprocessor", {}))
        except TypeError as exc:
            raise CliError(f"preprocessor config: {exc}") from exc
        sweep = doc.get("sweep", {})
        cfg = cls(
            dataset=doc.get("dataset", {}),
            preprocessor=pp_cfg,
            sweep_delta_x=sweep.get("delta_x", [pp_cfg.delta_x]),
            sweep_delta_y=sweep.get("delta_y", [pp_cfg.delta_y]),
            sweep_lambda_f=sweep.get("lambda_f", [pp_cfg.lambda_f]),
            zoo=tuple(doc.get("downstream", {}).get("kinds", DEFAULT_ZOO)),
            runs=int(doc.get("runs", 1)),
            output_dir=str(doc.get("output_dir", "out")),
            hgr_steps=int(doc.get("hgr_steps", 200)),
        )
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "preprocessor": self.preprocessor.to_dict(),
            "sweep": {"delta_x": list(self.sweep_delta_x),
                      "delta_y": list(self.sweep_delta_y),
                      "lambda_f": list(self.sweep_lambda_f)},
            "downstream": {"kinds": list(self.zoo)},
            "runs": self.runs,
            "output_dir": self.output_dir,
            "hgr_steps": self.hgr_steps,
        }


def _apply_overrides(doc: dict, overrides: list[str]) -> dict:
    for item in overrides or []:
        if "=" not in item:
            raise CliError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return doc


def load_experiment(path: str | Path, overrides: list[str] | None = None,
                    seed: int | None = None, runs: int | None = None,
                    out: str | None = None) -> ExperimentConfig:
    doc = json.loads(Path(path).read_text())
    doc = _apply_overrides(doc, overrides or [])
    if seed is not None:
        doc.setdefault("preprocessor", {})["seed"] = seed
        doc.setdefault("dataset", {})["seed"] = seed
    if runs is not None:
        doc["runs"] = runs
    if out is not None:
        doc["output_dir"] = out
    return ExperimentConfig.from_dict(doc)


def build_dataset(spec: dict) -> tuple[Dataset, Dataset]:
    """Materialize the train/test pair described by a dataset spec."""
    kind = spec.get("kind")
    seed = int(spec.get("seed", 0))
    test_fraction = float(spec.get("test_fraction", 0.2))
    if kind == "toy_regression":
        full = data.toy_regression(int(spec.get("n", 5260)), seed=seed)
        return data.split(full, test_fraction, seed)
    if kind == "toy_classification":
        full = data.toy_classification(int(spec.get("n", 5000)), seed=seed,
                                       label_noise=float(spec.get("label_noise", 0.0)))
        return data.split(full, test_fraction, seed)
    if kind == "csv":
        if "path" not in spec or "schema" not in spec:
            raise CliError("dataset.path and dataset.schema are required for csv data")
        return data.load_train_test(spec["path"], spec["schema"], test_fraction, seed)
    raise CliError(f"unknown dataset.kind {kind!r}")


# ---------------------------------------------------------------------------
# Evaluation pipeline
# ---------------------------------------------------------------------------


def _report(scores: np.ndarray, y: np.ndarray, groups: np.ndarray,
            a: np.ndarray, hgr_steps: int, seed: int) -> FairnessReport:
    threshold = metrics.choose_threshold(scores, y)
    pred = metrics.predict_labels(scores, threshold)
    est = estimate_hgr_independence(scores, a, steps=hgr_steps,
                                    rng=np.random.default_rng(seed))
    p = np.clip(scores, 1e-7, 1 - 1e-7)
    loss = float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))
    return FairnessReport(
        auc=metrics.auc(scores, y),
        sp=metrics.sp_ratio(pred, groups),
        eo=metrics.eo_ratio(pred, groups, y),
        ks_sp=metrics.ks_sp(scores, groups),
        ks_eo=metrics.ks_eo(scores, groups, y),
        hgr_hat=est.rho_hat,
        loss=loss,
        threshold=threshold,
    )


def evaluate_preprocessor(pp: TrainedPreprocessor | None, train: Dataset,
                          test: Dataset, zoo: tuple = DEFAULT_ZOO,
                          hgr_steps: int = 200, seed: int = 0
                          ) -> dict[str, FairnessReport]:
    """Fit the zoo on (transformed) training data and report on the test split.

    ``pp=None`` is the identity transform: models are fitted and evaluated on
    the original data, which reproduces the no-preprocessing baseline.  Test
    metrics are always computed against the original test labels.
    """
    if train.schema.task != "classification":
        raise CliError("report evaluation requires a classification dataset")
    if pp is None:
        x_tr, y_tr, x_te = train.x, train.y, test.x
    else:
        x_tr = pp.transform_covariates(train.x, train.a)
        y_tr = pp.transform_outcome(train.x, train.a, train.y)
        x_te = pp.transform_covariates(test.x, test.a)
    groups, _ = group_ids(test.a)
    reports: dict[str, FairnessReport] = {}
    if pp is None:
        h_net, _ = preprocess.fit_plain_upstream(x_tr, y_tr, "classification", seed=seed)
        up_scores = h_net.forward(x_te)[:, 1]
    else:
        up_scores = pp.upstream_scores(x_te)
    reports["upstream"] = _report(up_scores, test.y, groups, test.a, hgr_steps, seed)
    for i, kind in enumerate(zoo):
        model = downstream.fit(kind, x_tr, y_tr, seed=seed + i)
        reports[kind] = _report(model.score(x_te), test.y, groups, test.a,
                                hgr_steps, seed + i)
    return reports


def reports_to_json(reports: dict[str, FairnessReport], config_echo: dict) -> dict:
    doc = {"version": __version__, "config_echo": config_echo,
           "models": {k: r.to_dict() for k, r in reports.items()}}
    for field_name in ("auc", "sp", "eo", "ks_sp", "ks_eo"):
        values = [getattr(r, field_name) for r in reports.values()]
        doc.setdefault("aggregate", {})[field_name + "_mean"] = float(np.mean(values))
    per_model = [r for k, r in reports.items() if k != "upstream"]
    if len(per_model) >= 2:
        doc["aggregate"]["consistency_auc"] = metrics.consistency_scores(
            [r.auc for r in per_model])
        doc["aggregate"]["consistency_sp"] = metrics.consistency_scores(
            [r.sp for r in per_model])
    return doc


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------


def run_sweep(cfg: ExperimentConfig) -> list[dict]:
    """Train/evaluate over the budget grid; one row per (budget, run, model)."""
    rows: list[dict] = []
    for dx in cfg.sweep_delta_x:
        for dy in cfg.sweep_delta_y:
            for lf in cfg.sweep_lambda_f:
                budget = f"dx={dx}|dy={dy}|lf={lf}"
                for run in range(cfg.runs):
                    ds_spec = dict(cfg.dataset)
                    ds_spec["seed"] = int(ds_spec.get("seed", 0)) + run
                    train_ds, test_ds = build_dataset(ds_spec)
                    pp_cfg = PreprocessorConfig.from_dict(
                        {**cfg.preprocessor.to_dict(), "delta_x": dx,
                         "delta_y": dy, "lambda_f": lf,
                         "seed": cfg.preprocessor.seed + run})
                    pp = preprocess.train(train_ds, pp_cfg)
                    reports = evaluate_preprocessor(pp, train_ds, test_ds, cfg.zoo,
                                                    cfg.hgr_steps,
                                                    seed=cfg.preprocessor.seed + run)
                    for model, rep in reports.items():
                        rows.append({
                            "method": "fairmap", "budget": budget, "run": run,
                            "model": model, "auc": rep.auc, "sp": rep.sp,
                            "eo": rep.eo, "ks_sp": rep.ks_sp, "ks_eo": rep.ks_eo,
                            "hv_group": f"fairmap:{model}",
                        })
    return rows


def hypervolume_summary(rows: list[dict], fairness_key: str = "sp") -> list[dict]:
    """Per hv_group hypervolume over the budget points (runs averaged)."""
    scale = max((r[fairness_key] for r in rows), default=0.0) or 1.0
    out = []
    for group in sorted({r["hv_group"] for r in rows}):
        budgets = sorted({r["budget"] for r in rows if r["hv_group"] == group})
        points = []
        for budget in budgets:
            sel = [r for r in rows if r["hv_group"] == group and r["budget"] == budget]
            one_minus_auc = float(np.mean([1.0 - r["auc"] for r in sel]))
            fairness = float(np.mean([r[fairness_key] for r in sel])) / scale
            points.append(metrics.TradeoffPoint(min(max(one_minus_auc, 0.0), 1.0),
                                                min(max(fairness, 0.0), 1.0),
                                                tag=(group, budget)))
        out.append({"method": group.split(":")[0], "model": group.split(":")[1],
                    "metric": fairness_key, "hypervolume": metrics.hypervolume_2d(points),
                    "n_points": len(points), "fairness_scale": scale})
    return out


def consistency_summary(rows: list[dict]) -> list[dict]:
    """Consistency scores (std across downstream models) per budget and run."""
    out = []
    budgets = sorted({r["budget"] for r in rows})
    for budget in budgets:
        for run in sorted({r["run"] for r in rows if r["budget"] == budget}):
            sel = [r for r in rows
                   if r["budget"] == budget and r["run"] == run and r["model"] != "upstream"]
            if len(sel) < 2:
                continue
            entry = {"budget": budget, "run": run}
            for key in ("auc", "sp", "eo", "ks_sp", "ks_eo"):
                entry[f"sigma_{key}"] = metrics.consistency_scores([r[key] for r in sel])
            out.append(entry)
    return out


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(cfg: ExperimentConfig) -> int:
    out = Path(cfg.output_dir)
    train_ds, _ = build_dataset(cfg.dataset)
    pp = preprocess.train(train_ds, cfg.preprocessor)
    bundle = out / "bundle"
    pp.save(bundle)
    (out / "experiment.json").write_text(
        json.dumps({"version": __version__, "config": cfg.to_dict()},
                   sort_keys=True, indent=2))
    print(f"bundle written to {bundle}")
    return 0


def cmd_transform(cfg: ExperimentConfig, bundle: str) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    pp = TrainedPreprocessor.load(bundle)
    train_ds, test_ds = build_dataset(cfg.dataset)
    for ds, name in ((train_ds, "train"), (test_ds, "test")):
        x_t = pp.transform_covariates(ds.x, ds.a)
        y_t = pp.transform_outcome(ds.x, ds.a, ds.y) if name == "train" else ds.y
        transformed = Dataset(ds.schema, x_t, ds.a, y_t, tag=f"{name}_transformed")
        data.write_csv(transformed, out / f"transformed_{name}.csv")
    print(f"transformed data written to {out}")
    return 0


def cmd_evaluate(cfg: ExperimentConfig, bundle: str | None, identity: bool) -> int:
    out = Path(cfg.output_dir)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    train_ds, test_ds = build_dataset(cfg.dataset)
    pp = None if identity else TrainedPreprocessor.load(bundle)
    reports = evaluate_preprocessor(pp, train_ds, test_ds, cfg.zoo, cfg.hgr_steps,
                                    seed=cfg.preprocessor.seed)
    doc = reports_to_json(reports, cfg.to_dict())
    for model, rep in reports.items():
        (out / "reports" / f"{model}.json").write_text(
            json.dumps({"version": __version__, "model": model, **rep.to_dict()},
                       sort_keys=True, indent=2))
    (out / "reports" / "aggregate.json").write_text(
        json.dumps(doc, sort_keys=True, indent=2))
    print(f"reports written to {out / 'reports'}")
    return 0


def cmd_sweep(cfg: ExperimentConfig) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_sweep(cfg)
    _write_csv(out / "sweep.csv", rows)
    _write_csv(out / "hv.csv", hypervolume_summary(rows))
    _write_csv(out / "consistency.csv", consistency_summary(rows))
    (out / "experiment.json").write_text(
        json.dumps({"version": __version__, "config": cfg.to_dict()},
                   sort_keys=True, indent=2))
    print(f"sweep outputs written to {out}")
    return 0


def cmd_report(cfg: ExperimentConfig, sweep_csv: str | None) -> int:
    """Aggregate sweep rows as mean and 2 x standard error per budget/model."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = Path(sweep_csv) if sweep_csv else out / "sweep.csv"
    if not path.exists():
        raise CliError(f"sweep csv not found at {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    summary = []
    keys = ("auc", "sp", "eo", "ks_sp", "ks_eo")
    for budget in sorted({r["budget"] for r in rows}):
        for model in sorted({r["model"] for r in rows if r["budget"] == budget}):
            sel = [r for r in rows if r["budget"] == budget and r["model"] == model]
            entry = {"budget": budget, "model": model, "runs": len(sel)}
            for key in keys:
                values = np.array([float(r[key]) for r in sel])
                mean, two_se = metrics.mean_two_se(values)
                entry[f"{key}_mean"] = mean
                entry[f"{key}_2se"] = two_se
            summary.append(entry)
    _write_csv(out / "summary.csv", summary)
    print(f"summary written to {out / 'summary.csv'}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="fairmap",
                                     description="fairness-aware pre-processing runner")
    parser.add_argument("command",
                        choices=["train", "transform", "evaluate", "sweep", "report"])
    parser.add_argument("--config", required=True, help="experiment JSON config")
    parser.add_argument("--out", default=None, help="output directory override")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--runs", type=int, default=None)
    parser.add_argument("--override", action="append", default=[],
                        metavar="KEY=VALUE", help="patch a config entry")
    parser.add_argument("--bundle", default=None,
                        help="checkpoint bundle (transform/evaluate)")
    parser.add_argument("--identity", action="store_true",
                        help="evaluate the original data instead of a bundle")
    parser.add_argument("--sweep-csv", default=None, help="input for report")
    args = parser.parse_args(argv)
    try:
        cfg = load_experiment(args.config, args.override, seed=args.seed,
                              runs=args.runs, out=args.out)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "transform":
            if not args.bundle:
                raise CliError("transform requires --bundle")
            return cmd_transform(cfg, args.bundle)
        if args.command == "evaluate":
            if not args.bundle and not args.identity:
                raise CliError("evaluate requires --bundle or --identity")
            return cmd_evaluate(cfg, args.bundle, args.identity)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        return cmd_report(cfg, args.sweep_csv)
    except (CliError, preprocess.ConfigError, data.SchemaError, data.LoadError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
