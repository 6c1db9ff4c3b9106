"""Command-line entry point: ``mcm train|synth|augment|eval|repro``.

Every option can also come from a JSON file given with ``--config``; keys use
the option's long name with dashes turned into underscores. Flags given on
the command line win over file values, and file values win over defaults.

Exit codes: 0 success, 2 usage or validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import re
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import model as mcm
from .dataset import (
    Dataset,
    DatasetSchema,
    DataValidationError,
    load_csv,
    parse_predicate,
    whas500_path,
    whas500_schema,
    write_csv,
)
from .generation import SAMPLING_MODES, ConditionTemplate, augment_with, mcm_completer, synthesize_with
from .harness import (
    DEFAULT_TRAIN,
    METHODS,
    CohortSpec,
    ExperimentConfig,
    emit_report,
    run_calibration,
    run_discrimination,
    run_distribution_comparison,
    run_hr_consistency,
)
from .survival import CalibrationError, CoxFitError
from .transform import fit_transform_state, forward

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
DATA_ENV = "MCM_DATA_DIR"

log = logging.getLogger("mcm")


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ config


def default_data_path() -> Path:
    root = os.environ.get(DATA_ENV)
    return Path(root) / "whas500.csv" if root else whas500_path()


def default_schema() -> DatasetSchema:
    root = os.environ.get(DATA_ENV)
    if root and (Path(root) / "whas500_schema.json").exists():
        return DatasetSchema.from_json(Path(root) / "whas500_schema.json")
    return whas500_schema()


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < --config file < explicit flags."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise UsageError(f"{args.config}: not valid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise UsageError(f"{args.config}: config must be a JSON object")
        unknown = set(doc) - set(defaults)
        if unknown:
            raise UsageError(f"{args.config}: unknown option(s) {', '.join(sorted(unknown))}")
        merged.update(doc)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _need_seed(cfg: dict) -> int:
    if cfg.get("seed") is None:
        raise UsageError("--seed is required for this command")
    return int(cfg["seed"])


def _load_data(cfg: dict, key: str = "data") -> tuple[Dataset, DatasetSchema]:
    schema = DatasetSchema.from_json(cfg["schema"]) if cfg.get("schema") else default_schema()
    path = cfg.get(key) or default_data_path()
    return load_csv(path, schema), schema


def _stem(out: str) -> Path:
    p = Path(out)
    return p.with_suffix("") if p.suffix in (".json", ".csv") else p


def _write_reports(report: dict, out: str | None) -> None:
    if out is None:
        return
    stem = _stem(out)
    stem.parent.mkdir(parents=True, exist_ok=True)
    emit_report(report, stem.with_name(stem.name + ".json"), "json")
    emit_report(report, stem.with_name(stem.name + ".csv"), "csv")


# ---------------------------------------------------------------- commands


TRAIN_KEYS = ("epochs", "batch_size", "step_size", "mask_prob_range", "hidden", "masked_only_loss")


def cmd_train(args) -> int:
    defaults = {"data": None, "schema": None, "out": None, "loss_out": None, "seed": None,
                **{k: v for k, v in mcm.TrainConfig.from_dict(DEFAULT_TRAIN).to_dict().items()
                   if k in TRAIN_KEYS}}
    cfg = resolve(args, defaults)
    seed = _need_seed(cfg)
    if not cfg["out"]:
        raise UsageError("--out is required")
    if int(cfg["epochs"]) < 1:
        raise UsageError("--epochs must be >= 1")
    tc = mcm.TrainConfig.from_dict({**{k: cfg[k] for k in TRAIN_KEYS}, "seed": seed})
    data, schema = _load_data(cfg)
    if len(data) == 0:
        raise DataValidationError("training data has no rows")
    state = fit_transform_state(data)
    v = forward(data, state)
    model = mcm.init_model(len(schema), tc.hidden, seed, schema.names)
    model, history = mcm.train(model, v, tc)
    model.residuals = mcm.fit_residual_bank(model, v, seed=seed)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    mcm.save_model(model, out, state)
    loss_path = Path(cfg["loss_out"]) if cfg["loss_out"] else out.with_name(out.stem + "_loss.csv")
    with open(loss_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "loss"))
        for epoch, value in enumerate(history, start=1):
            w.writerow((epoch, repr(float(value))))
    print(f"model written to {out}; loss {history[0]:.6g} -> {history[-1]:.6g} ({loss_path})")
    return EXIT_OK


def _load_generator(cfg: dict):
    model, state = mcm.load_model(cfg["model"])
    if state is None:
        raise DataValidationError(f"{cfg['model']}: model file has no transform state")
    return model, state


def cmd_synth(args) -> int:
    defaults = {"model": None, "data": None, "schema": None, "mask_ratio": 0.75, "count": 500,
                "seed": None, "out": None, "sampling": "stochastic", "sequential": True}
    cfg = resolve(args, defaults)
    seed = _need_seed(cfg)
    for key in ("model", "out"):
        if not cfg[key]:
            raise UsageError(f"--{key} is required")
    if not 0 < float(cfg["mask_ratio"]) < 1:
        raise UsageError("--mask-ratio must lie strictly between 0 and 1")
    if int(cfg["count"]) < 1:
        raise UsageError("--count must be >= 1")
    model, state = _load_generator(cfg)
    data, schema = _load_data(cfg)
    if model.feature_names and list(model.feature_names) != schema.names:
        raise DataValidationError("model features do not match the data schema")
    completer = mcm_completer(model, state, schema, cfg["sampling"], cfg["sequential"])
    synth = synthesize_with(completer, data, float(cfg["mask_ratio"]), int(cfg["count"]),
                            np.random.default_rng(seed))
    write_csv(synth, cfg["out"])
    print(f"{len(synth)} synthetic rows written to {cfg['out']}")
    return EXIT_OK


def cmd_augment(args) -> int:
    defaults = {"model": None, "template": None, "schema": None, "count": None, "seed": None,
                "out": None, "sampling": "stochastic", "sequential": True}
    cfg = resolve(args, defaults)
    seed = _need_seed(cfg)
    for key in ("model", "template", "out", "count"):
        if cfg[key] is None:
            raise UsageError(f"--{key} is required")
    if int(cfg["count"]) < 1:
        raise UsageError("--count must be >= 1")
    model, state = _load_generator(cfg)
    schema = DatasetSchema.from_json(cfg["schema"]) if cfg.get("schema") else default_schema()
    template = ConditionTemplate.from_json(schema, cfg["template"])
    completer = mcm_completer(model, state, schema, cfg["sampling"], cfg["sequential"])
    rows = augment_with(completer, template, int(cfg["count"]), np.random.default_rng(seed))
    write_csv(rows, cfg["out"])
    print(f"{len(rows)} augmented rows written to {cfg['out']}")
    return EXIT_OK


def _pair_defaults():
    return {"data": None, "schema": None, "synthetic": None, "out": None}


def cmd_eval_distribution(args) -> int:
    cfg = resolve(args, _pair_defaults())
    real, schema = _load_data(cfg)
    if not cfg["synthetic"]:
        raise UsageError("--synthetic is required")
    synth = load_csv(cfg["synthetic"], schema)
    report = run_distribution_comparison(real, synth)
    report["config"] = cfg
    _write_reports(report, cfg["out"])
    for row in report["features"]:
        if row["kind"] == "binary":
            print(f"{row['feature']:>10}  proportion real {row['real_proportion']:.3f}"
                  f"  synthetic {row['synthetic_proportion']:.3f}")
        else:
            print(f"{row['feature']:>10}  mean real {row['real_mean']:.4g}"
                  f"  synthetic {row['synthetic_mean']:.4g}  KS {row['ks']:.3f}")
    return EXIT_OK


def cmd_eval_hr(args) -> int:
    cfg = resolve(args, {**_pair_defaults(), "covariates": None, "ties": "breslow"})
    real, schema = _load_data(cfg)
    if not cfg["synthetic"]:
        raise UsageError("--synthetic is required")
    synth = load_csv(cfg["synthetic"], schema)
    report = run_hr_consistency(real, synth, cfg["covariates"], cfg["ties"])
    report["config"] = cfg
    _write_reports(report, cfg["out"])
    for r in report["rows"]:
        print(f"{r['covariate']:>10}  real {r['hr_real']:.3f} [{r['ci_lo_real']:.3f}, {r['ci_hi_real']:.3f}]"
              f"  synthetic {r['hr_synthetic']:.3f} [{r['ci_lo_synthetic']:.3f}, {r['ci_hi_synthetic']:.3f}]")
    print(f"CI overlap {report['n_overlap']}/{len(report['rows'])}; "
          f"synthetic HR inside real CI {report['n_inside']}/{len(report['rows'])}")
    return EXIT_OK


EXPERIMENT_FLAGS = ("method", "synth_count", "mask_ratio", "seed", "covariates", "ties", "n_bins",
                    "sampling", "sequential", "sweeps", "smote_count", "smote_minority", "smote_k",
                    "mice_cycles", "mice_ridge", "external_csv", "threads", "percentiles")


def _experiment(cfg: dict) -> ExperimentConfig:
    exp = {k: cfg[k] for k in EXPERIMENT_FLAGS if cfg.get(k) is not None}
    train = dict(DEFAULT_TRAIN)
    train.update(cfg.get("train") or {})
    if cfg.get("epochs") is not None:
        train["epochs"] = cfg["epochs"]
    exp["train"] = train
    if cfg.get("cohorts"):
        exp["cohorts"] = cfg["cohorts"]
    return ExperimentConfig.from_dict(exp)


def _experiment_defaults():
    return {"data": None, "schema": None, "out": None, "train": None, "epochs": None,
            "cohorts": None, **{k: None for k in EXPERIMENT_FLAGS}}


def cmd_eval_discrimination(args) -> int:
    cfg = resolve(args, _experiment_defaults())
    _need_seed(cfg)
    data, _ = _load_data(cfg)
    exp = _experiment(cfg)
    report = run_discrimination(data, exp)
    _write_reports(report, cfg["out"])
    agg = report["aggregate"]
    print(f"{exp.method}: C-index {agg['c_index']['mean']:.4f} ({agg['c_index']['sd']:.4f})"
          f" over {agg['c_index']['n']} folds, {agg['failed_folds']} failed")
    return EXIT_OK


def cohort_from_predicate(text: str, multiplier: int = 5) -> CohortSpec:
    """Name and stratify a cohort from a predicate such as ``age>75``."""
    clauses = parse_predicate(text)
    stratify = tuple(dict.fromkeys(c.feature for c in clauses))
    name = re.sub(r"[^A-Za-z0-9]+", "_", text).strip("_") or "cohort"
    return CohortSpec(name, text, stratify, multiplier)


def cmd_eval_calibration(args) -> int:
    cfg = resolve(args, {**_experiment_defaults(), "cohort": None, "multiplier": None})
    _need_seed(cfg)
    data, _ = _load_data(cfg)
    if cfg.get("cohort"):
        cfg["cohorts"] = [cohort_from_predicate(c, int(cfg.get("multiplier") or 5)) for c in cfg["cohort"]]
    exp = _experiment(cfg)
    report = run_calibration(data, exp)
    _write_reports(report, cfg["out"])
    for key, agg in report["aggregate"].items():
        dev = agg["deviation"]
        shown = f"{dev['mean']:.4f} ({dev['sd']:.4f})" if dev["mean"] is not None else "n/a"
        print(f"{exp.method} {key}: |slope - 1| {shown}, {agg['failed_folds']} failed folds")
    return EXIT_OK


REPRO_METHODS = ("real_only", "mcm", "smote", "mice")
SUMMARY_LABELS = {"real_only": "Real only", "mcm": "MCM", "smote": "SMOTE", "mice": "MICE"}


def _cell(stat: dict) -> str:
    if stat["mean"] is None:
        return "failed"
    return f"{stat['mean']:.4f} ({stat['sd']:.4f})"


def summary_rows(disc: dict, calib: dict, cohorts, percentiles):
    header = ["method", "c_index"] + [f"{c.name}@p{p:g}" for c in cohorts for p in percentiles]
    rows = [header]
    for method in REPRO_METHODS:
        row = [SUMMARY_LABELS[method], _cell(disc[method]["aggregate"]["c_index"])]
        for c in cohorts:
            for p in percentiles:
                row.append(_cell(calib[method]["aggregate"][f"{c.name}@p{p:g}"]["deviation"]))
        rows.append(row)
    return rows


def cmd_repro(args) -> int:
    cfg = resolve(args, {**_experiment_defaults(), "out": None})
    _need_seed(cfg)
    if not cfg["out"]:
        raise UsageError("--out is required")
    data, _ = _load_data(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    cfg["method"] = None
    base = _experiment({**cfg, "method": "real_only"})
    if base.smote_minority is None:
        # the event class is the minority in WHAS500 (215 of 500 died)
        base = replace(base, smote_minority=1.0)
    disc, calib = {}, {}
    for method in REPRO_METHODS:
        exp = replace(base, method=method)
        t0 = time.perf_counter()
        disc[method] = run_discrimination(data, exp)
        calib[method] = run_calibration(data, exp)
        _write_reports(disc[method], str(out / f"{method}_discrimination"))
        _write_reports(calib[method], str(out / f"{method}_calibration"))
        print(f"{method}: C-index {_cell(disc[method]['aggregate']['c_index'])}"
              f" [{time.perf_counter() - t0:.1f}s]", flush=True)
    rows = summary_rows(disc, calib, base.cohorts, base.percentiles)
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        fh.write(json.dumps(base.to_dict(), indent=2, sort_keys=True) + "\n")
    for row in rows:
        print("  ".join(f"{c:<24}" for c in row))
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _bool_pair(p, name: str, dest: str, help_on: str, help_off: str):
    p.add_argument(f"--{name}", dest=dest, action="store_true", default=None, help=help_on)
    p.add_argument(f"--no-{name}", dest=dest, action="store_false", help=help_off)


def _common(p, seed=True):
    p.add_argument("--config", help="JSON file of option values (flags override it)")
    if seed:
        p.add_argument("--seed", type=int, help="random seed (required)")


def _data_flags(p):
    p.add_argument("--data", help=f"CSV dataset (default: bundled WHAS500 or ${DATA_ENV}/whas500.csv)")
    p.add_argument("--schema", help="schema JSON (default: WHAS500 schema)")


def _decoding_flags(p):
    p.add_argument("--sampling", choices=SAMPLING_MODES, help="decoding mode (default stochastic)")
    _bool_pair(p, "sequential", "sequential", "fill masked features one at a time (default)",
               "fill all masked features in one pass")


def _experiment_flags(p):
    _data_flags(p)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--synth-count", dest="synth_count", type=int)
    p.add_argument("--mask-ratio", dest="mask_ratio", type=float)
    p.add_argument("--covariates", nargs="+")
    p.add_argument("--ties", choices=("breslow", "efron"))
    p.add_argument("--n-bins", dest="n_bins", type=int)
    p.add_argument("--percentile", dest="percentiles", type=float, action="append")
    p.add_argument("--epochs", type=int, help="MCM training epochs per fold")
    _decoding_flags(p)
    p.add_argument("--sweeps", type=int)
    p.add_argument("--smote-count", dest="smote_count", type=int)
    p.add_argument("--smote-minority", dest="smote_minority", type=float)
    p.add_argument("--smote-k", dest="smote_k", type=int)
    p.add_argument("--mice-cycles", dest="mice_cycles", type=int)
    p.add_argument("--mice-ridge", dest="mice_ridge", type=float)
    p.add_argument("--external-csv", dest="external_csv")
    p.add_argument("--threads", type=int, help="fold-level worker threads (default 1)")
    p.add_argument("--out", help="report path stem; writes <stem>.json and <stem>.csv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcm", description="Masked clinical modelling toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write it as JSON")
    _common(p)
    _data_flags(p)
    p.add_argument("--out", help="model JSON path")
    p.add_argument("--loss-out", dest="loss_out", help="loss CSV path (default <out>_loss.csv)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--step-size", dest="step_size", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--mask-prob-range", dest="mask_prob_range", type=float, nargs=2, metavar=("LO", "HI"))
    _bool_pair(p, "masked-only-loss", "masked_only_loss", "score masked cells only",
               "score every cell")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="mask-and-reconstruct synthesis")
    _common(p)
    _data_flags(p)
    p.add_argument("--model")
    p.add_argument("--mask-ratio", dest="mask_ratio", type=float)
    p.add_argument("--count", type=int)
    p.add_argument("--out")
    _decoding_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("augment", help="complete rows drawn from a condition template")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--template", help="template JSON")
    p.add_argument("--schema")
    p.add_argument("--count", type=int)
    p.add_argument("--out")
    _decoding_flags(p)
    p.set_defaults(func=cmd_augment)

    ev = sub.add_parser("eval", help="evaluation reports").add_subparsers(dest="report", required=True)
    for name, func in (("distribution", cmd_eval_distribution), ("hr", cmd_eval_hr)):
        p = ev.add_parser(name)
        _common(p, seed=False)
        _data_flags(p)
        p.add_argument("--synthetic", help="synthetic CSV")
        p.add_argument("--out", help="report path stem")
        if name == "hr":
            p.add_argument("--covariates", nargs="+")
            p.add_argument("--ties", choices=("breslow", "efron"))
        p.set_defaults(func=func)
    p = ev.add_parser("discrimination")
    _common(p)
    _experiment_flags(p)
    p.set_defaults(func=cmd_eval_discrimination)
    p = ev.add_parser("calibration")
    _common(p)
    _experiment_flags(p)
    p.add_argument("--cohort", action="append", help='cohort predicate such as "age>75" (repeatable)')
    p.add_argument("--multiplier", type=int, help="synthetic rows per cohort member (default 5)")
    p.set_defaults(func=cmd_eval_calibration)

    p = sub.add_parser("repro", help="run every method arm and write the report bundle")
    _common(p)
    _experiment_flags(p)
    p.set_defaults(func=cmd_repro)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (mcm.TrainingDivergedError, CoxFitError, CalibrationError, np.linalg.LinAlgError,
            FloatingPointError) as exc:
        print(f"mcm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, DataValidationError, mcm.ModelFormatError, ValueError, KeyError,
            OSError) as exc:
        print(f"mcm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
