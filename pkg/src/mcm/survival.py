"""Cox proportional hazards, Breslow baseline, Kaplan-Meier, concordance, calibration.

All estimators take plain arrays; ``fit_coxph`` additionally accepts a
:class:`~mcm.dataset.Dataset` and pulls duration/event columns from its schema.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dataset import Dataset

log = logging.getLogger(__name__)

Z_95 = 1.959964


class CoxFitError(RuntimeError):
    """No events, singular information, or failure to converge."""


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CoxModel:
    coefficients: np.ndarray
    covariance: np.ndarray
    covariate_names: tuple[str, ...]
    ties: str = "breslow"
    converged: bool = True
    iterations: int = 0
    log_likelihood: float = float("nan")

    @property
    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def linear_predictor(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.coefficients

    def to_dict(self) -> dict:
        return {
            "covariates": list(self.covariate_names),
            "coefficients": self.coefficients.tolist(),
            "covariance": self.covariance.tolist(),
            "ties": self.ties,
            "converged": self.converged,
            "iterations": self.iterations,
            "log_likelihood": self.log_likelihood,
        }


@dataclass(frozen=True, eq=False)
class BaselineHazard:
    event_times: np.ndarray
    cumulative_hazard: np.ndarray

    def __call__(self, t) -> np.ndarray:
        """Right-continuous step evaluation; 0 before the first event time."""
        idx = np.searchsorted(self.event_times, np.asarray(t, dtype=float), side="right")
        padded = np.concatenate([[0.0], self.cumulative_hazard])
        return padded[idx]


@dataclass(frozen=True, eq=False)
class StepFunction:
    """Piecewise-constant function that jumps *at* each knot.

    ``f(t) = values[k]`` for ``knots[k] <= t < knots[k+1]`` (right-continuous),
    and ``f(t) = initial`` for ``t < knots[0]``.
    """

    knots: np.ndarray
    values: np.ndarray
    initial: float = 1.0

    def __call__(self, t) -> np.ndarray:
        idx = np.searchsorted(self.knots, np.asarray(t, dtype=float), side="right")
        padded = np.concatenate([[self.initial], self.values])
        return padded[idx]


# ------------------------------------------------------------------ cox


def _survival_arrays(data, covariates, durations=None, events=None):
    if isinstance(data, Dataset):
        names = list(covariates) if covariates is not None else data.schema.covariates
        X = np.column_stack([data.column(c) for c in names]) if names else np.zeros((len(data), 0))
        return X, data.durations.copy(), data.events.copy(), tuple(names)
    X = np.asarray(data, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    names = tuple(covariates) if covariates is not None else tuple(f"x{i}" for i in range(X.shape[1]))
    return X, np.asarray(durations, dtype=float), np.asarray(events, dtype=float), names


class _RiskSets:
    """Precomputed ordering so each Newton iteration is a couple of cumsums."""

    def __init__(self, X, time, event):
        order = np.lexsort((-event, -time))  # descending time
        self.X = X[order]
        self.time = time[order]
        self.event = event[order].astype(bool)
        t = self.time
        # last row index (in descending order) of each block of equal times
        last_of_block = np.r_[t[1:] != t[:-1], True]
        self.block_end = np.flatnonzero(last_of_block)
        block_id = np.cumsum(np.r_[0, last_of_block[:-1]])
        self.block_of = block_id
        d = np.bincount(block_id, weights=self.event, minlength=self.block_end.size)
        self.deaths = d
        self.has_death = d > 0
        self.x_death_sum = np.zeros((self.block_end.size, X.shape[1]))
        np.add.at(self.x_death_sum, block_id[self.event], self.X[self.event])


def _breslow_terms(rs: _RiskSets, beta):
    X = rs.X
    eta = X @ beta
    shift = eta.max() if eta.size else 0.0
    w = np.exp(eta - shift)
    S0 = np.cumsum(w)[rs.block_end]
    S1 = np.cumsum(w[:, None] * X, axis=0)[rs.block_end]
    S2 = np.cumsum(w[:, None, None] * X[:, :, None] * X[:, None, :], axis=0)[rs.block_end]
    k = rs.has_death
    d = rs.deaths[k]
    S0, S1, S2 = S0[k], S1[k], S2[k]
    loglik = float(eta[rs.event].sum() - (d * (np.log(S0) + shift)).sum())
    mean = S1 / S0[:, None]
    score = rs.x_death_sum[k].sum(axis=0) - (d[:, None] * mean).sum(axis=0)
    info = (d[:, None, None] * (S2 / S0[:, None, None]
                                 - mean[:, :, None] * mean[:, None, :])).sum(axis=0)
    return loglik, score, info


def _efron_terms(rs: _RiskSets, beta):
    X = rs.X
    p = X.shape[1]
    eta = X @ beta
    shift = eta.max() if eta.size else 0.0
    w = np.exp(eta - shift)
    S0 = np.cumsum(w)[rs.block_end]
    S1 = np.cumsum(w[:, None] * X, axis=0)[rs.block_end]
    S2 = np.cumsum(w[:, None, None] * X[:, :, None] * X[:, None, :], axis=0)[rs.block_end]
    loglik = float(eta[rs.event].sum())
    score = X[rs.event].sum(axis=0)
    info = np.zeros((p, p))
    starts = np.r_[0, rs.block_end[:-1] + 1]
    for b in np.flatnonzero(rs.has_death):
        rows = np.arange(starts[b], rs.block_end[b] + 1)
        dead = rows[rs.event[rows]]
        d = dead.size
        wd = w[dead]
        T0, T1 = wd.sum(), wd @ X[dead]
        T2 = (wd[:, None, None] * X[dead][:, :, None] * X[dead][:, None, :]).sum(axis=0)
        for l in range(d):
            f = l / d
            a0 = S0[b] - f * T0
            a1 = S1[b] - f * T1
            a2 = S2[b] - f * T2
            m = a1 / a0
            loglik -= np.log(a0) + shift
            score -= m
            info += a2 / a0 - np.outer(m, m)
    return loglik, score, info


def fit_coxph(data, covariates=None, durations=None, events=None, ties: str = "breslow",
              tol: float = 1e-6, max_iter: int = 100, max_halvings: int = 20) -> CoxModel:
    """Newton-Raphson maximisation of the Cox partial likelihood.

    Covariates are mean-centred internally; coefficients are reported on the
    original scale. Iteration stops once ``max|score| < tol`` and the last
    Newton step is negligible, or after ``max_iter`` iterations (error).
    """
    if ties not in ("breslow", "efron"):
        raise ValueError(f"unknown ties method {ties!r}")
    X, time, event, names = _survival_arrays(data, covariates, durations, events)
    n, p = X.shape
    if p == 0:
        raise CoxFitError("no covariates")
    if event.sum() < 1:
        raise CoxFitError("no events")
    if event.sum() < 2:
        raise CoxFitError("at least two events are required")
    Xc = X - X.mean(axis=0)
    if np.linalg.matrix_rank(Xc) < p:
        raise CoxFitError("covariate matrix is rank deficient after centring")
    # scale only for the Newton solve; the likelihood is equivariant
    scale = Xc.std(axis=0)
    Xs = Xc / scale
    rs = _RiskSets(Xs, time, event)
    terms = _breslow_terms if ties == "breslow" else _efron_terms

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        return _newton(rs, terms, scale, names, ties, tol, max_iter, max_halvings)


def _newton(rs, terms, scale, names, ties, tol, max_iter, max_halvings):
    p = scale.size
    beta = np.zeros(p)
    loglik, score, info = terms(rs, beta)
    converged = False
    step = np.full(p, np.inf)
    it = 0
    for it in range(1, max_iter + 1):
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise CoxFitError(f"singular information matrix at iteration {it}") from None
        new_beta = beta + step
        new = terms(rs, new_beta)
        halvings = 0
        while not new[0] >= loglik - 1e-12 * abs(loglik) and halvings < max_halvings:
            step = step / 2.0
            new_beta = beta + step
            new = terms(rs, new_beta)
            halvings += 1
        beta = new_beta
        loglik, score, info = new
        if not (np.all(np.isfinite(beta)) and np.isfinite(loglik) and np.all(np.isfinite(info))):
            raise CoxFitError(f"non-finite likelihood at iteration {it} "
                              "(monotone likelihood: a covariate separates the events)")
        if np.max(np.abs(score * scale)) < tol and np.max(np.abs(step)) < 1e-9:
            converged = True
            break
    if not converged:
        raise CoxFitError(f"Newton-Raphson did not converge in {it} iterations "
                          f"(max |score| = {np.max(np.abs(score * scale)):.3g})")
    try:
        cov_s = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        raise CoxFitError("singular information matrix at convergence") from None
    beta_orig = beta / scale
    cov = cov_s / np.outer(scale, scale)
    cov = 0.5 * (cov + cov.T)
    return CoxModel(beta_orig, cov, names, ties, True, it, loglik)


def partial_log_likelihood(beta, X, durations, events, ties: str = "breslow") -> float:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    rs = _RiskSets(X, np.asarray(durations, float), np.asarray(events, float))
    terms = _breslow_terms if ties == "breslow" else _efron_terms
    return terms(rs, np.atleast_1d(np.asarray(beta, dtype=float)))[0]


def hazard_ratios(model: CoxModel) -> list[dict]:
    if not model.converged:
        raise CoxFitError("hazard ratios need a converged model")
    se = model.standard_errors
    out = []
    for name, b, s in zip(model.covariate_names, model.coefficients, se):
        out.append({
            "covariate": name,
            "coef": float(b),
            "se": float(s),
            "hr": float(np.exp(b)),
            "ci_lo": float(np.exp(b - Z_95 * s)),
            "ci_hi": float(np.exp(b + Z_95 * s)),
        })
    return out


def breslow_baseline(model: CoxModel, data, durations=None, events=None) -> BaselineHazard:
    """Breslow cumulative baseline hazard (at covariates = 0, original scale)."""
    X, time, event, _ = _survival_arrays(data, model.covariate_names, durations, events)
    eta = X @ model.coefficients
    w = np.exp(eta)
    times = np.unique(time[event == 1])
    if times.size == 0:
        return BaselineHazard(np.zeros(0), np.zeros(0))
    deaths = np.array([np.sum((time == t) & (event == 1)) for t in times], dtype=float)
    order = np.argsort(time)
    w_sorted = w[order]
    tail = np.cumsum(w_sorted[::-1])[::-1]
    at_risk = tail[np.searchsorted(time[order], times, side="left")]
    return BaselineHazard(times, np.cumsum(deaths / at_risk))


def predict_survival(model: CoxModel, baseline: BaselineHazard, x, t) -> np.ndarray:
    """S(t | x) = exp(-H0(t) exp(beta . x)). ``x`` may be one row or a matrix."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("t must be non-negative")
    eta = np.asarray(x, dtype=float) @ model.coefficients
    return np.exp(-baseline(t) * np.exp(eta))


# ----------------------------------------------------------- metrics


def concordance_index(durations, events, risk_scores) -> float:
    """Harrell's C: among pairs with t_i < t_j and event_i, P(risk_i > risk_j).

    Equal risks count one half. Pairs with equal times are not comparable.
    """
    t = np.asarray(durations, dtype=float)
    e = np.asarray(events, dtype=float).astype(bool)
    r = np.asarray(risk_scores, dtype=float)
    if not t.shape == e.shape == r.shape:
        raise ValueError("durations, events and risk scores must have equal lengths")
    comparable = (t[:, None] < t[None, :]) & e[:, None]
    n_pairs = comparable.sum()
    if n_pairs == 0:
        raise ValueError("no comparable pairs")
    conc = ((r[:, None] > r[None, :]) & comparable).sum()
    tied = ((r[:, None] == r[None, :]) & comparable).sum()
    return float((conc + 0.5 * tied) / n_pairs)


def kaplan_meier(durations, events) -> StepFunction:
    t = np.asarray(durations, dtype=float)
    e = np.asarray(events, dtype=float).astype(bool)
    if t.size == 0:
        raise ValueError("Kaplan-Meier needs at least one observation")
    times = np.unique(t[e])
    if times.size == 0:
        return StepFunction(np.zeros(0), np.zeros(0))
    at_risk = np.array([(t >= s).sum() for s in times], dtype=float)
    deaths = np.array([((t == s) & e).sum() for s in times], dtype=float)
    return StepFunction(times, np.cumprod(1.0 - deaths / at_risk))


def percentile_horizon(durations, percentile: float) -> float:
    d = np.asarray(durations, dtype=float)
    if d.size == 0:
        raise ValueError("no durations")
    return float(np.percentile(d, percentile))


def calibration_slope(predicted, observed) -> float:
    """Ordinary least-squares slope of observed on predicted."""
    x = np.asarray(predicted, dtype=float)
    y = np.asarray(observed, dtype=float)
    sxx = np.sum((x - x.mean()) ** 2)
    if x.size < 2 or not sxx > 1e-15 * max(1.0, float(np.sum(x ** 2))):
        raise CalibrationError("predicted risks do not vary across bins; slope undefined")
    return float(np.sum((x - x.mean()) * (y - y.mean())) / sxx)


def _km_defined_at(durations, horizon) -> bool:
    # beyond the last observation KM is undefined unless it already hit 0
    return bool(np.any(np.asarray(durations) >= horizon))


def calibration_points(model: CoxModel, baseline: BaselineHazard, cohort: Dataset,
                       percentile: float, n_bins: int = 5):
    """Per-bin (mean predicted risk, observed KM risk, size) at the horizon."""
    if not 0 < percentile < 100:
        raise ValueError("percentile must lie in (0, 100)")
    n = len(cohort)
    if n < 2 * n_bins:
        raise CalibrationError(f"cohort of {n} rows is too small for {n_bins} bins")
    horizon = percentile_horizon(cohort.durations, percentile)
    X = np.column_stack([cohort.column(c) for c in model.covariate_names])
    risk = 1.0 - predict_survival(model, baseline, X, horizon)
    order = np.argsort(risk, kind="stable")
    bins = [b for b in np.array_split(order, n_bins)]
    # merge bins whose KM is undefined at the horizon into a neighbour
    i = 0
    while i < len(bins):
        if _km_defined_at(cohort.durations[bins[i]], horizon) or len(bins) == 1:
            i += 1
            continue
        log.info("calibration bin %d has no subject followed to t=%g; merging", i, horizon)
        j = i + 1 if i + 1 < len(bins) else i - 1
        lo, hi = min(i, j), max(i, j)
        bins[lo:hi + 1] = [np.concatenate([bins[lo], bins[hi]])]
        i = lo
    points = []
    for idx in bins:
        km = kaplan_meier(cohort.durations[idx], cohort.events[idx])
        points.append((float(risk[idx].mean()), float(1.0 - km(horizon)), int(idx.size)))
    return horizon, points


def calibration_deviation(model: CoxModel, baseline: BaselineHazard, cohort: Dataset,
                          percentile: float, n_bins: int = 5):
    """Return ``(slope, |slope - 1|)`` of observed vs predicted binned risk."""
    _, points = calibration_points(model, baseline, cohort, percentile, n_bins)
    pred = [p[0] for p in points]
    obs = [p[1] for p in points]
    slope = calibration_slope(pred, obs)
    return slope, abs(slope - 1.0)
