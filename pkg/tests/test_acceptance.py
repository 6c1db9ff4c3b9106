"""End-to-end acceptance checks, one test per criterion.

Each test records a ``criterion N: PASS|FAIL`` line that is printed in the
terminal summary, then asserts. The full suite trains several MCM models on
one CPU and takes on the order of half an hour.
"""

import itertools
import json
import time

import numpy as np
import pytest

from mcm import model as M
from mcm.cli import main
from mcm.generation import synthesize
from mcm.harness import DEFAULT_TRAIN, ExperimentConfig, run_calibration, run_discrimination, \
    run_distribution_comparison, run_hr_consistency
from mcm.survival import CoxFitError, concordance_index, fit_coxph
from mcm.transform import fit_boxcox_lambda, fit_transform_state, forward, inverse

from oracles import breslow_loglik_grid, cindex_pairs, cox_battery, cox_grid_beta
from test_model import gradient_check

SEEDS = (42, 1, 2, 3, 4)
pytestmark = pytest.mark.slow


def _record(log, number, ok, detail):
    log.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


@pytest.fixture(scope="module")
def synthetic_75(whas):
    """MCM trained on all of WHAS500, 500 rows synthesised at 75% masking."""
    tc = M.TrainConfig.from_dict({**DEFAULT_TRAIN, "seed": 42})
    st = fit_transform_state(whas)
    V = forward(whas, st)
    m, _ = M.train(M.init_model(len(whas.schema), tc.hidden, 42, whas.schema.names), V, tc)
    m.residuals = M.fit_residual_bank(m, V, seed=42)
    return synthesize(m, st, whas, 0.75, 500, np.random.default_rng(42),
                      sampling="stochastic", sequential=True)


def test_c1_baseline_reproduction(whas, acceptance_log):
    t0 = time.perf_counter()
    rep = run_discrimination(whas, ExperimentConfig(method="real_only", seed=42))
    elapsed = time.perf_counter() - t0
    mean = rep["aggregate"]["c_index"]["mean"]
    ok = abs(mean - 0.7609) <= 0.02 and elapsed < 60
    assert _record(acceptance_log, 1, ok, f"real_only C-index {mean:.4f} (target 0.7609 +/- 0.02), {elapsed:.1f}s")


def test_c2_augmentation_benefit(whas, acceptance_log):
    pairs = {}
    for seed in SEEDS:
        real = run_discrimination(whas, ExperimentConfig(method="real_only", seed=seed))
        aug = run_discrimination(whas, ExperimentConfig(method="mcm", seed=seed, synth_count=500,
                                                        mask_ratio=0.5))
        pairs[seed] = (real["aggregate"]["c_index"]["mean"], aug["aggregate"]["c_index"]["mean"])
    r42, m42 = pairs[42]
    wins = sum(m > r for r, m in pairs.values())
    ok = m42 >= r42 - 0.005 and wins >= 3
    shown = ", ".join(f"{s}: {r:.4f}->{m:.4f}" for s, (r, m) in pairs.items())
    assert _record(acceptance_log, 2, ok, f"mcm beats real_only in {wins}/5 seeds [{shown}]")


def test_c3_calibration_improvement(whas, acceptance_log):
    wins = {"age_over_75@p25": 0, "hypertension_stage2@p25": 0}
    shown = []
    for seed in SEEDS:
        real = run_calibration(whas, ExperimentConfig(method="real_only", seed=seed, percentiles=(25,)))
        aug = run_calibration(whas, ExperimentConfig(method="mcm", seed=seed, percentiles=(25,)))
        for key in wins:
            r = real["aggregate"][key]["deviation"]["mean"]
            m = aug["aggregate"][key]["deviation"]["mean"]
            wins[key] += int(m is not None and r is not None and m < r)
            shown.append(f"{seed}/{key.split('@')[0]}: {r:.2f}->{m:.2f}")
    ok = all(w >= 4 for w in wins.values())
    detail = ", ".join(f"{k} {w}/5" for k, w in wins.items())
    assert _record(acceptance_log, 3, ok, f"mcm improves |slope-1|: {detail} [{'; '.join(shown)}]")


def test_c4_hr_consistency(whas, synthetic_75, acceptance_log):
    rep = run_hr_consistency(whas, synthetic_75)
    outside = [r["covariate"] for r in rep["rows"] if not r["synthetic_hr_in_real_ci"]]
    ok = rep["n_inside"] >= 5
    assert _record(acceptance_log, 4, ok, f"{rep['n_inside']}/6 synthetic HRs inside real 95% CI"
                                          f" (outside: {outside or 'none'})")


def test_c5_gradient_oracle(acceptance_log):
    t0 = time.perf_counter()
    worst = gradient_check(trials=100, seed=0)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 10
    assert _record(acceptance_log, 5, ok, f"worst relative error {worst:.2e} over 100 models, {elapsed:.1f}s")


def _fit1(x, t, e):
    return fit_coxph(np.asarray(x, float)[:, None], durations=t, events=e)


def test_c6_cox_and_cindex_oracles(acceptance_log):
    battery = cox_battery(seed=1)
    worst, matched, flat, unbounded, bad = 0.0, 0, 0, 0, 0
    grid = np.linspace(-5, 5, 201)
    for x, t, e in battery:
        ref = cox_grid_beta(x, t, e)
        if ref is None and np.ptp(breslow_loglik_grid(grid, x, t, e)) < 1e-9:
            flat += 1  # beta not identified; any finite answer is acceptable
            continue
        if ref is None:
            # no finite maximiser: the fit must refuse or run to the boundary
            unbounded += 1
            try:
                beta = _fit1(x, t, e).coefficients[0]
            except CoxFitError:
                continue
            bad += int(abs(beta) < 5)
            continue
        worst = max(worst, abs(_fit1(x, t, e).coefficients[0] - ref))
        matched += 1
    rng = np.random.default_rng(0)
    c_instances = c_bad = 0
    for n in range(2, 7):
        for _ in range(20):
            t = rng.integers(1, n + 1, n).astype(float)
            r = rng.integers(0, 3, n).astype(float)
            for e in itertools.product((0.0, 1.0), repeat=n):
                e = np.array(e)
                ref = cindex_pairs(t, e, r)
                if ref is None:
                    continue
                c_instances += 1
                c_bad += int(concordance_index(t, e, r) != ref)
    ok = worst < 1e-4 and bad == 0 and c_bad == 0
    assert _record(acceptance_log, 6, ok,
                   f"Cox: {matched} instances max |beta - grid| {worst:.1e}, {unbounded} without finite MLE, {flat} flat;"
                   f" C-index exact on {c_instances - c_bad}/{c_instances} instances (n<=6)")


def test_c7_transform(whas, acceptance_log):
    st = fit_transform_state(whas)
    back = inverse(forward(whas, st), st, whas.schema).rows
    x = whas.rows
    nz = x != 0
    rel = np.abs(back[nz] - x[nz]) / np.abs(x[nz])
    zero_err = np.abs(back[~nz]).max() if (~nz).any() else 0.0
    rng = np.random.default_rng(7)
    lam_ln = fit_boxcox_lambda(rng.lognormal(0.0, 1.0, 10000))
    lam_n = fit_boxcox_lambda(rng.normal(5.0, 1.0, 10000))
    ok = rel.max() <= 1e-9 and zero_err <= 1e-9 and abs(lam_ln) < 0.15 and abs(lam_n - 1) < 0.15
    assert _record(acceptance_log, 7, ok, f"roundtrip max rel err {rel.max():.1e}; lambda lognormal {lam_ln:.3f},"
                                          f" normal {lam_n:.3f}")


def _bundle(directory):
    out = {}
    for p in sorted(directory.iterdir()):
        if p.suffix == ".json" and p.name != "config.json":
            doc = json.loads(p.read_text())
            doc["provenance"].pop("timestamp")
            out[p.name] = json.dumps(doc, sort_keys=True).encode()
        else:
            out[p.name] = p.read_bytes()
    return out


def test_c8_determinism(tmp_path, acceptance_log):
    # fewer epochs than the default keep two full bundles affordable;
    # every other setting is the repro default
    cfg = tmp_path / "repro.json"
    cfg.write_text(json.dumps({"seed": 42, "epochs": 300}))
    for run in ("a", "b"):
        assert main(["repro", "--config", str(cfg), "--out", str(tmp_path / run)]) == 0
    a, b = _bundle(tmp_path / "a"), _bundle(tmp_path / "b")
    same = a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    folds = leaks = 0
    for name in a:
        if name.endswith(".json") and name != "config.json":
            for f in json.loads(a[name])["folds"]:
                folds += 1
                leaks += int(f.get("leakage_check") != "passed")
    ok = same and leaks == 0 and folds > 0
    assert _record(acceptance_log, 8, ok, f"{len(a)} report files identical: {same};"
                                          f" leakage check passed on {folds - leaks}/{folds} folds")


def test_c9_distribution_fidelity(whas, synthetic_75, acceptance_log):
    rep = run_distribution_comparison(whas, synthetic_75)
    worst_cont = max(abs(r["relative_mean_difference"]) for r in rep["features"] if r["kind"] != "binary")
    worst_bin = max(r["abs_difference"] for r in rep["features"] if r["kind"] == "binary")
    ok = worst_cont <= 0.10 and worst_bin <= 0.10
    assert _record(acceptance_log, 9, ok, f"worst continuous relative mean diff {worst_cont:.3f} (<=0.10),"
                                          f" worst binary diff {worst_bin:.3f} (<=0.10)")
