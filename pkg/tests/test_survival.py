import itertools

import numpy as np
import pytest

from mcm.dataset import Dataset, DatasetSchema, FeatureSpec
from mcm.survival import (
    BaselineHazard,
    CalibrationError,
    CoxFitError,
    CoxModel,
    breslow_baseline,
    calibration_deviation,
    calibration_points,
    calibration_slope,
    concordance_index,
    fit_coxph,
    hazard_ratios,
    kaplan_meier,
    partial_log_likelihood,
    percentile_horizon,
    predict_survival,
)

from oracles import cindex_pairs, cox_battery, cox_grid_beta, km_hand


def _fit1(x, t, e, **kw):
    return fit_coxph(np.asarray(x, float)[:, None], durations=t, events=e, **kw)


# ------------------------------------------------------------------ cox


def test_cox_six_subjects_binary_covariate():
    x = np.array([1, 0, 1, 0, 1, 0.0])
    t = np.array([1, 2, 3, 4, 5, 6.0])
    e = np.array([1, 1, 0, 1, 1, 0.0])
    ref = cox_grid_beta(x, t, e)
    m = _fit1(x, t, e)
    assert abs(m.coefficients[0] - ref) < 1e-4
    hr = hazard_ratios(m)[0]
    assert hr["ci_lo"] <= np.exp(ref) <= hr["ci_hi"]


def test_cox_battery_matches_grid_search():
    checked = 0
    for x, t, e in cox_battery(seed=1)[::7]:
        ref = cox_grid_beta(x, t, e)
        if ref is None:
            continue
        assert abs(_fit1(x, t, e).coefficients[0] - ref) < 1e-4
        checked += 1
    assert checked > 150


def test_cox_score_zero_at_fit(whas):
    m = fit_coxph(whas)
    X = np.column_stack([whas.column(c) for c in m.covariate_names])
    h = 1e-6
    for j in range(len(m.coefficients)):
        step = np.zeros_like(m.coefficients)
        step[j] = h
        up = partial_log_likelihood(m.coefficients + step, X, whas.durations, whas.events)
        down = partial_log_likelihood(m.coefficients - step, X, whas.durations, whas.events)
        assert abs((up - down) / (2 * h)) < 1e-3
    cov = m.covariance
    np.testing.assert_allclose(cov, cov.T)
    assert np.all(np.linalg.eigvalsh(cov) > 0)


def test_cox_whas_hazard_ratios(whas):
    hrs = {h["covariate"]: h["hr"] for h in hazard_ratios(fit_coxph(whas))}
    # age and heart failure are the dominant risk factors in this cohort
    assert hrs["age"] == pytest.approx(1.055, abs=2e-3)
    assert hrs["chf"] == pytest.approx(2.419, abs=2e-3)


def test_cox_rescaling_covariate(whas):
    m = fit_coxph(whas, ["age", "chf"])
    rows = whas.rows.copy()
    rows[:, 0] = (rows[:, 0] - 60) / 7.0
    m2 = fit_coxph(Dataset(whas.schema, rows), ["age", "chf"])
    np.testing.assert_allclose(m2.coefficients, m.coefficients * [7.0, 1.0], rtol=1e-8)
    b1, b2 = breslow_baseline(m, whas), breslow_baseline(m2, Dataset(whas.schema, rows))
    x1 = np.column_stack([whas.column("age"), whas.column("chf")])[:20]
    x2 = np.column_stack([rows[:20, 0], rows[:20, 5]])
    np.testing.assert_allclose(predict_survival(m, b1, x1, 400.0),
                               predict_survival(m2, b2, x2, 400.0), atol=1e-10)


def test_cox_errors():
    t = np.arange(1, 7.0)
    with pytest.raises(CoxFitError, match="no events"):
        _fit1(np.arange(6.0), t, np.zeros(6))
    with pytest.raises(CoxFitError):
        _fit1(np.zeros(6), t, np.ones(6))
    with pytest.raises(ValueError):
        _fit1(np.arange(6.0), t, np.ones(6), ties="exact")
    # perfect separation: the likelihood keeps rising
    with pytest.raises(CoxFitError):
        _fit1([1, 1, 1, 0, 0, 0.0], t, np.ones(6))


def _efron_loglik(beta, x, t, e):
    ll = 0.0
    for u in sorted(set(t[e == 1])):
        dead = np.flatnonzero((t == u) & (e == 1))
        risk = np.exp(beta * x[t >= u]).sum()
        tied = np.exp(beta * x[dead]).sum()
        for l in range(dead.size):
            ll += beta * x[dead[l]] - np.log(risk - l / dead.size * tied)
    return ll


def test_efron_matches_own_grid_and_breslow_without_ties():
    rng = np.random.default_rng(3)
    x = np.round(rng.normal(size=8), 2)
    t = np.array([1, 1, 2, 2, 2, 3, 4, 4.0])
    e = np.array([1, 1, 1, 0, 1, 1, 1, 0.0])
    grid = np.arange(-5, 5, 1e-3)
    k = np.argmax([_efron_loglik(b, x, t, e) for b in grid])
    fine = np.arange(grid[k] - 2e-3, grid[k] + 2e-3, 1e-5)
    ref = fine[np.argmax([_efron_loglik(b, x, t, e) for b in fine])]
    assert abs(_fit1(x, t, e, ties="efron").coefficients[0] - ref) < 1e-4
    t2 = np.arange(1, 9.0)
    a, b = _fit1(x, t2, e), _fit1(x, t2, e, ties="efron")
    assert a.coefficients[0] == pytest.approx(b.coefficients[0], abs=1e-10)


def test_hazard_ratio_hand_values():
    m = CoxModel(np.array([0.0, np.log(2)]), np.diag([0.04, 0.0]), ("a", "b"))
    a, b = hazard_ratios(m)
    assert a["hr"] == 1 and a["ci_lo"] * a["ci_hi"] == pytest.approx(1.0)
    assert a["ci_hi"] == pytest.approx(np.exp(1.959964 * 0.2))
    assert b["hr"] == pytest.approx(2.0) and b["ci_lo"] == pytest.approx(2.0) == b["ci_hi"]
    with pytest.raises(CoxFitError):
        hazard_ratios(CoxModel(np.zeros(1), np.eye(1), ("a",), converged=False))


# ------------------------------------------------------------ baseline


def test_breslow_hand_example():
    x = np.array([0.0, 1.0, 0.0, 2.0])
    t = np.array([2.0, 3.0, 3.0, 5.0])
    e = np.array([1.0, 1.0, 0.0, 1.0])
    m = CoxModel(np.array([0.5]), np.eye(1), ("x",))
    w = np.exp(0.5 * x)
    h1 = 1 / w.sum()
    h2 = h1 + 1 / w[1:].sum()
    h3 = h2 + 1 / w[3]
    bh = breslow_baseline(m, x[:, None], t, e)
    np.testing.assert_allclose(bh.event_times, [2, 3, 5])
    np.testing.assert_allclose(bh.cumulative_hazard, [h1, h2, h3])
    assert bh(1.9) == 0 and bh(2.0) == pytest.approx(h1) and bh(4.0) == pytest.approx(h2)
    s = predict_survival(m, bh, np.array([[2.0]]), 3.0)[0]
    assert s == pytest.approx(np.exp(-h2 * np.exp(1.0)))
    assert predict_survival(m, bh, np.array([[1.0]]), 0.5)[0] == 1.0


def test_breslow_null_and_empty():
    m = CoxModel(np.zeros(1), np.eye(1), ("x",))
    bh = breslow_baseline(m, np.arange(5.0)[:, None], np.arange(1, 6.0), [1, 0, 0, 0, 0])
    assert bh.cumulative_hazard[0] == pytest.approx(1 / 5)
    assert breslow_baseline(m, np.zeros((3, 1)), [1, 2, 3], [0, 0, 0]).event_times.size == 0
    s = predict_survival(m, bh, np.array([[0.0], [9.0]]), 3.0)
    assert s[0] == s[1]
    with pytest.raises(ValueError):
        predict_survival(m, bh, np.array([[0.0]]), -1.0)


# ---------------------------------------------------------- concordance


def test_cindex_simple_cases():
    t = np.array([1, 2, 3, 4.0])
    assert concordance_index(t, np.ones(4), -t) == 1.0
    assert concordance_index(t, np.ones(4), np.zeros(4)) == 0.5
    with pytest.raises(ValueError):
        concordance_index(t, np.zeros(4), t)


def test_cindex_exhaustive_small():
    rng = np.random.default_rng(0)
    count = 0
    for n in range(2, 7):
        for _ in range(40):
            t = rng.integers(1, 4, n).astype(float)
            r = rng.integers(0, 3, n).astype(float)
            for e in itertools.product((0.0, 1.0), repeat=n):
                e = np.array(e)
                ref = cindex_pairs(t, e, r)
                if ref is None:
                    continue
                assert concordance_index(t, e, r) == ref
                count += 1
    assert count > 1000


def test_cindex_monotone_invariance(rng):
    t = rng.exponential(size=60)
    e = (rng.random(60) < 0.6).astype(float)
    r = rng.normal(size=60)
    assert concordance_index(t, e, r) == concordance_index(t, e, np.exp(3 * r) + 1)


# ------------------------------------------------------------------ km


def test_km_simple():
    km = kaplan_meier([1, 2], [1, 1])
    assert km(0.5) == 1.0 and km(1) == 0.5 and km(2) == 0.0
    allc = kaplan_meier([1, 2, 3], [0, 0, 0])
    assert np.all(allc(np.array([0, 1, 5.0])) == 1.0)


def test_km_six_subject_hand():
    t = [1, 2, 2, 3, 4, 5]
    e = [1, 1, 0, 0, 1, 0]
    km = kaplan_meier(t, e)
    assert km(1) == pytest.approx(5 / 6)
    # five at risk at t=2 (one death), two at t=4 (one death)
    assert km(2) == pytest.approx(5 / 6 * 4 / 5)
    assert km(4.5) == pytest.approx(5 / 6 * 4 / 5 * 1 / 2)


def test_km_exhaustive_small():
    rng = np.random.default_rng(1)
    for n in range(1, 7):
        for _ in range(20):
            t = rng.integers(1, 5, n).astype(float)
            for e in itertools.product((0, 1), repeat=n):
                km = kaplan_meier(t, e)
                grid = np.arange(0, 6, 0.5)
                vals = km(grid)
                assert vals[0] == 1.0 and np.all(np.diff(vals) <= 0)
                for g, v in zip(grid, vals):
                    assert v == pytest.approx(km_hand(t, e, g), abs=1e-15)


# ---------------------------------------------------------- calibration


def test_percentile_horizon():
    assert percentile_horizon([10, 20, 30, 40], 25) == 17.5
    assert percentile_horizon([5], 50) == 5
    assert percentile_horizon([3, 9, 1], 100) == 9


def test_calibration_slope_hand():
    assert calibration_slope([0.2, 0.4], [0.3, 0.7]) == pytest.approx(2.0)
    assert calibration_slope([0.1, 0.2, 0.3], [0.1, 0.2, 0.3]) == pytest.approx(1.0)
    with pytest.raises(CalibrationError):
        calibration_slope([0.3, 0.3, 0.3], [0.1, 0.2, 0.3])


def _cohort(x, t, e):
    schema = DatasetSchema((FeatureSpec("x", "continuous", "covariate"),
                            FeatureSpec("t", "continuous", "duration"),
                            FeatureSpec("e", "binary", "event")))
    return Dataset(schema, np.column_stack([x, t, e]))


def test_calibration_deviation_recomputed_by_hand(rng):
    n = 60
    x = rng.normal(size=n)
    t = np.round(rng.exponential(1 / np.exp(0.8 * x)) * 100) + 1
    e = (rng.random(n) < 0.8).astype(float)
    data = _cohort(x, t, e)
    m = fit_coxph(data)
    bh = breslow_baseline(m, data)
    slope, dev = calibration_deviation(m, bh, data, 50, 3)
    horizon = np.percentile(t, 50)
    risk = 1 - np.exp(-bh(horizon) * np.exp(m.coefficients[0] * x))
    order = np.argsort(risk, kind="stable")
    pred, obs = [], []
    for idx in np.array_split(order, 3):
        pred.append(risk[idx].mean())
        obs.append(1 - km_hand(list(t[idx]), list(e[idx]), horizon))
    ref = np.polyfit(pred, obs, 1)[0]
    assert slope == pytest.approx(ref, rel=1e-9) and dev == pytest.approx(abs(ref - 1), rel=1e-9)


def test_calibration_constant_predictions_fail():
    data = _cohort(np.r_[np.zeros(10)], np.arange(1, 11.0), np.ones(10))
    m = CoxModel(np.array([0.3]), np.eye(1), ("x",))
    bh = breslow_baseline(m, data)
    with pytest.raises(CalibrationError):
        calibration_deviation(m, bh, data, 50, 2)
    with pytest.raises(CalibrationError, match="too small"):
        calibration_deviation(m, bh, data.take(np.arange(3)), 50, 2)


def test_calibration_merges_bins_without_followup():
    # the highest-risk bin is censored before the horizon; it merges into its neighbour
    x = np.r_[np.zeros(4), np.ones(4), np.full(4, 2.0)]
    t = np.r_[[5, 6, 7, 8], [4, 5, 6, 7], [1, 1, 2, 2]].astype(float)
    e = np.r_[[1, 0, 1, 0], [1, 1, 0, 1], [0, 0, 0, 0]].astype(float)
    data = _cohort(x, t, e)
    m = CoxModel(np.array([0.5]), np.eye(1), ("x",))
    bh = breslow_baseline(m, data)
    horizon, pts = calibration_points(m, bh, data, 75, 3)
    assert horizon > 2 and len(pts) == 2 and sum(p[2] for p in pts) == 12
