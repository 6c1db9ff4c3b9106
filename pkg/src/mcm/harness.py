"""Cross-validated utility experiments and report emission.

Every experiment runs over the ten train/test evaluations of a 5x2 plan. A
generator is fitted on the training half only, its rows are appended to that
half, a Cox model is fitted, and the untouched test half is scored.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from typing import Sequence

import numpy as np

from . import __version__
from . import model as mcm
from .baselines import MiceConfig, mice_completer, smote
from .dataset import Dataset, DataValidationError, cohort_mask, load_csv, make_5x2_folds
from .generation import augment_cohort_with, mcm_completer, synthesize_with
from .survival import (
    CalibrationError,
    CoxFitError,
    breslow_baseline,
    calibration_points,
    calibration_slope,
    concordance_index,
    fit_coxph,
    hazard_ratios,
)
from .transform import fit_transform_state, forward

log = logging.getLogger(__name__)

METHODS = ("real_only", "mcm", "smote", "mice", "external_csv")
CSV_COLUMNS = ("schema_version", "experiment", "method", "cohort", "percentile",
               "repetition", "fold", "metric", "value", "status")
CSV_SCHEMA_VERSION = "1"


class LeakageError(AssertionError):
    pass


@dataclass(frozen=True)
class CohortSpec:
    name: str
    predicate: str
    stratify: tuple[str, ...]
    multiplier: int = 5

    def __post_init__(self):
        object.__setattr__(self, "stratify", tuple([self.stratify] if isinstance(self.stratify, str)
                                                   else self.stratify))
        if self.multiplier < 0:
            raise ValueError("cohort multiplier must be >= 0")


# 216 and 270 WHAS500 patients respectively
DEFAULT_COHORTS = (
    CohortSpec("age_over_75", "age>=75", ("age",), 5),
    CohortSpec("hypertension_stage2", "sbp>=140", ("sbp",), 5),
)

DEFAULT_TRAIN = {"epochs": 2000, "step_size": 3e-3, "masked_only_loss": True, "mask_prob_range": [0.0, 1.0]}


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "real_only"
    synth_count: int = 500
    mask_ratio: float = 0.5
    cohorts: tuple[CohortSpec, ...] = DEFAULT_COHORTS
    percentiles: tuple[float, ...] = (25.0, 75.0)
    seed: int = 42
    covariates: tuple[str, ...] | None = None
    ties: str = "breslow"
    n_bins: int = 5
    # mcm
    train: dict = field(default_factory=lambda: dict(DEFAULT_TRAIN))
    sampling: str = "stochastic"
    sequential: bool = True
    sweeps: int = 0
    # smote
    smote_count: int = 70
    smote_minority: float | None = None
    smote_k: int = 5
    # mice
    mice_cycles: int = 10
    mice_ridge: float = 1e-3
    # external_csv
    external_csv: str | None = None
    threads: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.synth_count < 0:
            raise ValueError("synth_count must be >= 0")
        if not 0 < self.mask_ratio < 1:
            raise ValueError("mask_ratio must lie in (0, 1)")
        for p in self.percentiles:
            if not 0 < p < 100:
                raise ValueError(f"percentile {p} outside (0, 100)")
        if self.method == "external_csv" and not self.external_csv:
            raise ValueError("method external_csv needs an external_csv path")
        object.__setattr__(self, "cohorts", tuple(
            c if isinstance(c, CohortSpec) else CohortSpec(**c) for c in self.cohorts))
        object.__setattr__(self, "percentiles", tuple(float(p) for p in self.percentiles))
        if self.covariates is not None:
            object.__setattr__(self, "covariates", tuple(self.covariates))
        mcm.TrainConfig.from_dict(self.train)  # validate early

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cohorts"] = [asdict(c) for c in self.cohorts]
        for c in d["cohorts"]:
            c["stratify"] = list(c["stratify"])
        d["percentiles"] = list(self.percentiles)
        d["covariates"] = list(self.covariates) if self.covariates is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment option(s): {', '.join(sorted(unknown))}")
        d = dict(d)
        if "cohorts" in d:
            d["cohorts"] = tuple(CohortSpec(**c) if isinstance(c, dict) else c for c in d["cohorts"])
        return cls(**d)

    def hash(self) -> str:
        # threads never changes results, so it stays out of the identity
        d = self.to_dict()
        d.pop("threads")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ------------------------------------------------------------- generators


class FoldGenerator:
    """A generator fitted on one training half."""

    def __init__(self, config: ExperimentConfig, train: Dataset, seed_seq: np.random.SeedSequence,
                 external: Dataset | None = None):
        self.config = config
        self.train = train
        self.external = external
        fit_seq, self._gen_seq = seed_seq.spawn(2)
        self.completer = None
        if config.method == "mcm":
            tc = mcm.TrainConfig.from_dict({**config.train, "seed": int(fit_seq.generate_state(1)[0])})
            state = fit_transform_state(train)
            v = forward(train, state)
            model = mcm.init_model(len(train.schema), tc.hidden, tc.seed, train.schema.names)
            model, _ = mcm.train(model, v, tc)
            model.residuals = mcm.fit_residual_bank(model, v, seed=tc.seed)
            self.completer = mcm_completer(model, state, train.schema, config.sampling,
                                           config.sequential, config.sweeps)
        elif config.method == "mice":
            mc = MiceConfig(config.mice_cycles, config.mice_ridge,
                            int(fit_seq.generate_state(1)[0]))
            self.completer = mice_completer(train, mc)

    def rng(self, *key: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self._gen_seq.entropy,
                                                            spawn_key=(*self._gen_seq.spawn_key, *key)))

    def empty(self) -> Dataset:
        return Dataset(self.train.schema, np.zeros((0, len(self.train.schema))))

    def synthesize(self) -> Dataset:
        cfg = self.config
        if cfg.method == "real_only":
            return self.empty()
        if cfg.method == "smote":
            minority = cfg.smote_minority
            if minority is None:
                raise ValueError("smote needs smote_minority (the event value of the minority class)")
            return smote(self.train, minority, cfg.smote_k, cfg.smote_count, self.rng(0))
        if cfg.method == "external_csv":
            return self.external
        if cfg.synth_count == 0:
            return self.empty()
        return synthesize_with(self.completer, self.train, cfg.mask_ratio, cfg.synth_count,
                               self.rng(0))

    def augment_cohort(self, cohort: CohortSpec, index: int) -> Dataset:
        cfg = self.config
        members = self.train.take(np.flatnonzero(cohort_mask(self.train, cohort.predicate)))
        if cfg.method == "real_only" or cohort.multiplier == 0:
            return self.empty()
        if len(members) == 0:
            raise DataValidationError(f"cohort {cohort.name!r} is empty in this training fold")
        if cfg.method == "smote":
            return _smote_rebalance(members, cfg.smote_k, self.rng(1, index))
        if cfg.method == "external_csv":
            ext = self.external
            return ext.take(np.flatnonzero(cohort_mask(ext, cohort.predicate)))
        return augment_cohort_with(self.completer, members, cohort.stratify, cohort.multiplier,
                                   self.rng(1, index))


def _smote_rebalance(members: Dataset, k: int, rng) -> Dataset:
    events = members.events
    n_dead, n_alive = int(events.sum()), int((1 - events).sum())
    minority = 1.0 if n_dead < n_alive else 0.0
    n_new = abs(n_dead - n_alive)
    return smote(members, minority, min(k, min(n_dead, n_alive) - 1), n_new, rng)


# ------------------------------------------------------------- experiments


def _fold_seed(seed: int, rep: int, fold: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, rep, fold])


def _check_leakage(train_idx, test_idx):
    overlap = np.intersect1d(train_idx, test_idx)
    if overlap.size:
        raise LeakageError(f"generator training rows overlap the test fold: {overlap[:5]}")


def _covariates(config: ExperimentConfig, dataset: Dataset):
    return list(config.covariates) if config.covariates else dataset.schema.covariates


def _load_external(config: ExperimentConfig, dataset: Dataset):
    if config.method != "external_csv":
        return None
    return load_csv(config.external_csv, dataset.schema)


def _run_folds(dataset: Dataset, config: ExperimentConfig, fold_fn):
    plan = make_5x2_folds(dataset, config.seed)
    external = _load_external(config, dataset)
    jobs = list(plan.folds())

    def one(job):
        rep, fold, train_idx, test_idx = job
        _check_leakage(train_idx, test_idx)
        base = {"repetition": rep, "fold": fold, "n_train": int(train_idx.size),
                "n_test": int(test_idx.size), "leakage_check": "passed"}
        try:
            gen = FoldGenerator(config, dataset.take(train_idx), _fold_seed(config.seed, rep, fold),
                                external)
            return fold_fn(base, gen, dataset.take(test_idx))
        except (CoxFitError, CalibrationError, DataValidationError, mcm.TrainingDivergedError,
                np.linalg.LinAlgError) as exc:
            log.warning("fold %d/%d failed: %s", rep, fold, exc)
            return [{**base, "status": "failed", "error": str(exc)}]

    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            results = list(pool.map(one, jobs))
    else:
        results = [one(job) for job in jobs]
    return [row for rows in results for row in rows]


def _mean_sd(values):
    values = [v for v in values if v is not None and math.isfinite(v)]
    if not values:
        return {"mean": None, "sd": None, "n": 0}
    arr = np.array(values)
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return {"mean": float(arr.mean()), "sd": sd, "n": int(arr.size)}


def _report(kind: str, config: ExperimentConfig, folds, aggregate) -> dict:
    return {
        "report": kind,
        "method": config.method,
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "seed": config.seed,
        "folds": folds,
        "aggregate": aggregate,
        "provenance": {
            "package_version": __version__,
            "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        },
    }


def run_discrimination(dataset: Dataset, config: ExperimentConfig) -> dict:
    covs = _covariates(config, dataset)

    def fold_fn(base, gen, test):
        synth = gen.synthesize()
        train = gen.train.concat(synth) if len(synth) else gen.train
        cox = fit_coxph(train, covs, ties=config.ties)
        X = np.column_stack([test.column(c) for c in covs])
        c = concordance_index(test.durations, test.events, X @ cox.coefficients)
        return [{**base, "status": "ok", "n_synthetic": len(synth), "c_index": c}]

    folds = _run_folds(dataset, config, fold_fn)
    ok = [f for f in folds if f["status"] == "ok"]
    agg = {"c_index": _mean_sd([f["c_index"] for f in ok]),
           "failed_folds": len(folds) - len(ok)}
    return _report("discrimination", config, folds, agg)


def run_calibration(dataset: Dataset, config: ExperimentConfig) -> dict:
    covs = _covariates(config, dataset)

    def fold_fn(base, gen, test):
        rows = []
        for index, cohort in enumerate(config.cohorts):
            entry = {**base, "cohort": cohort.name}
            try:
                extra = gen.augment_cohort(cohort, index)
                train = gen.train.concat(extra) if len(extra) else gen.train
                cox = fit_coxph(train, covs, ties=config.ties)
                baseline = breslow_baseline(cox, train)
                members = test.take(np.flatnonzero(cohort_mask(test, cohort.predicate)))
                if len(members) == 0:
                    raise DataValidationError(f"cohort {cohort.name!r} is empty in the test fold")
                for p in config.percentiles:
                    try:
                        horizon, points = calibration_points(cox, baseline, members, p,
                                                             config.n_bins)
                        slope = calibration_slope([q[0] for q in points], [q[1] for q in points])
                        rows.append({**entry, "percentile": p, "status": "ok",
                                     "n_synthetic": len(extra), "n_cohort_test": len(members),
                                     "horizon": horizon, "slope": slope,
                                     "deviation": abs(slope - 1.0),
                                     "points": [{"predicted": a, "observed": b, "n": c}
                                                for a, b, c in points]})
                    except CalibrationError as exc:
                        rows.append({**entry, "percentile": p, "status": "failed", "error": str(exc)})
            except (CoxFitError, DataValidationError, np.linalg.LinAlgError) as exc:
                for p in config.percentiles:
                    rows.append({**entry, "percentile": p, "status": "failed", "error": str(exc)})
        return rows

    folds = _run_folds(dataset, config, fold_fn)
    agg = {}
    for cohort in config.cohorts:
        for p in config.percentiles:
            sel = [f for f in folds if f.get("cohort") == cohort.name and f.get("percentile") == p]
            ok = [f for f in sel if f["status"] == "ok"]
            agg[f"{cohort.name}@{_pct(p)}"] = {
                "cohort": cohort.name, "percentile": p,
                "deviation": _mean_sd([f["deviation"] for f in ok]),
                "slope": _mean_sd([f["slope"] for f in ok]),
                "failed_folds": len(sel) - len(ok),
            }
    return _report("calibration", config, folds, agg)


def _pct(p: float) -> str:
    return f"p{p:g}"


# ---------------------------------------------------- distribution / HRs


def ks_statistic(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic sup |F_a - F_b|."""
    a, b = np.sort(np.asarray(a, float)), np.sort(np.asarray(b, float))
    if a.size == 0 or b.size == 0:
        raise ValueError("KS needs two non-empty samples")
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def run_distribution_comparison(real: Dataset, synthetic: Dataset) -> dict:
    if real.schema != synthetic.schema:
        raise DataValidationError("real and synthetic datasets have different schemas")
    rows = []
    for j, feat in enumerate(real.schema):
        r, s = real.rows[:, j], synthetic.rows[:, j]
        if feat.is_binary:
            rows.append({"feature": feat.name, "kind": feat.kind,
                         "real_proportion": float(r.mean()), "synthetic_proportion": float(s.mean()),
                         "abs_difference": float(abs(r.mean() - s.mean()))})
        else:
            rows.append({"feature": feat.name, "kind": feat.kind,
                         "real_mean": float(r.mean()), "synthetic_mean": float(s.mean()),
                         "real_sd": float(r.std(ddof=1)), "synthetic_sd": float(s.std(ddof=1)),
                         "relative_mean_difference": float(abs(s.mean() - r.mean()) / abs(r.mean()))
                         if r.mean() != 0 else None,
                         "ks": ks_statistic(r, s)})
    return {"report": "distribution", "n_real": len(real), "n_synthetic": len(synthetic),
            "features": rows}


def run_hr_consistency(real: Dataset, synthetic: Dataset, covariates: Sequence[str] | None = None,
                       ties: str = "breslow") -> dict:
    covs = list(covariates) if covariates else real.schema.covariates
    fits = {}
    errors = {}
    for side, data in (("real", real), ("synthetic", synthetic)):
        try:
            fits[side] = hazard_ratios(fit_coxph(data, covs, ties=ties))
        except CoxFitError as exc:
            errors[side] = str(exc)
    if errors:
        raise CoxFitError("; ".join(f"{k}: {v}" for k, v in errors.items()))
    rows = []
    for a, b in zip(fits["real"], fits["synthetic"]):
        rows.append({
            "covariate": a["covariate"],
            "hr_real": a["hr"], "ci_lo_real": a["ci_lo"], "ci_hi_real": a["ci_hi"],
            "hr_synthetic": b["hr"], "ci_lo_synthetic": b["ci_lo"], "ci_hi_synthetic": b["ci_hi"],
            "ci_overlap": bool(a["ci_lo"] <= b["ci_hi"] and b["ci_lo"] <= a["ci_hi"]),
            "synthetic_hr_in_real_ci": bool(a["ci_lo"] <= b["hr"] <= a["ci_hi"]),
        })
    return {"report": "hr_consistency", "covariates": covs, "rows": rows,
            "n_overlap": sum(r["ci_overlap"] for r in rows),
            "n_inside": sum(r["synthetic_hr_in_real_ci"] for r in rows)}


# ---------------------------------------------------------------- emit


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _csv_rows(report: dict):
    kind = report["report"]
    method = report.get("method", "")
    if kind == "discrimination":
        for f in report["folds"]:
            yield (kind, method, "", "", f["repetition"], f["fold"], "c_index",
                   f.get("c_index", ""), f["status"])
        agg = report["aggregate"]["c_index"]
        yield (kind, method, "", "", "all", "mean", "c_index", _blank(agg["mean"]), "aggregate")
        yield (kind, method, "", "", "all", "sd", "c_index", _blank(agg["sd"]), "aggregate")
    elif kind == "calibration":
        for f in report["folds"]:
            key = (kind, method, f["cohort"], f["percentile"], f["repetition"], f["fold"])
            yield (*key, "deviation", f.get("deviation", ""), f["status"])
            if f["status"] != "ok":
                continue
            yield (*key, "slope", f["slope"], "ok")
            yield (*key, "horizon", f["horizon"], "ok")
            for b, pt in enumerate(f["points"]):
                yield (*key, f"bin{b}_predicted", pt["predicted"], "ok")
                yield (*key, f"bin{b}_observed", pt["observed"], "ok")
        for agg in report["aggregate"].values():
            for stat in ("mean", "sd"):
                yield (kind, method, agg["cohort"], agg["percentile"], "all", stat, "deviation",
                       _blank(agg["deviation"][stat]), "aggregate")
    elif kind == "hr_consistency":
        for r in report["rows"]:
            for metric in ("hr_real", "ci_lo_real", "ci_hi_real", "hr_synthetic",
                           "ci_lo_synthetic", "ci_hi_synthetic", "ci_overlap",
                           "synthetic_hr_in_real_ci"):
                yield (kind, "", r["covariate"], "", "", "", metric, r[metric], "ok")
    elif kind == "distribution":
        for r in report["features"]:
            for metric, value in r.items():
                if metric not in ("feature", "kind"):
                    yield (kind, "", r["feature"], "", "", "", metric, _blank(value), "ok")
    else:
        raise ValueError(f"no CSV layout for report kind {kind!r}")


def _blank(x):
    return "" if x is None else x


def emit_report(report: dict, path, fmt: str = "json") -> None:
    if fmt == "json":
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(report_json(report))
    elif fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for row in _csv_rows(report):
                writer.writerow((CSV_SCHEMA_VERSION, *[_fmt(x) for x in row]))
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def _fmt(x):
    if isinstance(x, bool):
        return str(x).lower()
    if isinstance(x, float):
        return repr(x)
    return x


def load_report(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def with_method(config: ExperimentConfig, method: str, **changes) -> ExperimentConfig:
    return replace(config, method=method, **changes)
