"""Comparator generators: SMOTE oversampling and chained-equation ridge imputation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Dataset, DataValidationError


@dataclass(frozen=True)
class MiceConfig:
    n_cycles: int = 10
    ridge_lambda: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.n_cycles < 1:
            raise ValueError("n_cycles must be >= 1")
        if not self.ridge_lambda > 0:
            raise ValueError("ridge_lambda must be positive")


def _minmax(rows: np.ndarray):
    lo, hi = rows.min(axis=0), rows.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return (rows - lo) / span


def smote_interpolate(x: np.ndarray, neighbour: np.ndarray, u) -> np.ndarray:
    """``x + u * (neighbour - x)`` row-wise; ``u`` broadcasts per row."""
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    return x + u * (neighbour - x)


def smote(dataset: Dataset, minority_value: float, k: int = 5, n_new: int = 70,
          rng: np.random.Generator | None = None) -> Dataset:
    """Synthesise ``n_new`` rows of the ``event == minority_value`` class.

    Neighbours are found in min-max normalised space over all non-event
    columns. Binary covariates are rounded after interpolation.
    """
    rng = rng if rng is not None else np.random.default_rng()
    schema = dataset.schema
    ev = schema.index(schema.event)
    minority = dataset.rows[dataset.events == minority_value]
    if minority.shape[0] < k + 1:
        raise DataValidationError(
            f"minority class has {minority.shape[0]} rows; SMOTE with k={k} needs at least {k + 1}"
        )
    if n_new == 0:
        return Dataset(schema, np.zeros((0, len(schema))))
    feats = [j for j in range(len(schema)) if j != ev]
    z = _minmax(minority[:, feats])
    dist = ((z[:, None, :] - z[None, :, :]) ** 2).sum(axis=-1)
    np.fill_diagonal(dist, np.inf)
    neighbours = np.argsort(dist, axis=1, kind="stable")[:, :k]

    base = rng.integers(0, minority.shape[0], size=n_new)
    pick = neighbours[base, rng.integers(0, k, size=n_new)]
    u = rng.random(n_new)
    new = smote_interpolate(minority[base], minority[pick], u)
    binary = schema.binary_mask
    new[:, binary] = np.round(new[:, binary])
    new[:, ev] = minority_value
    return Dataset(schema, new)


def ridge_fit(X: np.ndarray, y: np.ndarray, penalty: float):
    """Intercept plus penalised slopes; the intercept is not shrunk."""
    mx, my = X.mean(axis=0), y.mean()
    Xc = X - mx
    coef = np.linalg.solve(Xc.T @ Xc + penalty * np.eye(X.shape[1]), Xc.T @ (y - my))
    return my - mx @ coef, coef


def mice_impute(dataset: Dataset | np.ndarray, observed: np.ndarray,
                config: MiceConfig = MiceConfig(), binary=None):
    """Fill ``~observed`` cells by chained ridge regressions.

    Masked cells start at column means of the observed values. Each cycle
    visits the incomplete features in a seeded random order and refits a
    ridge regression of that feature on all others using its observed rows.
    Continuous imputations are clipped to the observed column range; binary
    features are thresholded at 0.5 after the last cycle.
    """
    if isinstance(dataset, Dataset):
        rows, binary = dataset.rows, dataset.schema.binary_mask
    else:
        rows = np.asarray(dataset, dtype=float)
        binary = np.zeros(rows.shape[1], bool) if binary is None else np.asarray(binary, bool)
    observed = np.asarray(observed, dtype=bool)
    if observed.shape != rows.shape:
        raise DataValidationError("observed mask must match the table shape")
    if rows.shape[0] and not observed.any(axis=1).all():
        raise DataValidationError("every row needs at least one observed feature")
    incomplete = np.flatnonzero((~observed).any(axis=0))
    counts = observed.sum(axis=0)
    for j in incomplete:
        if counts[j] < 2:
            raise DataValidationError(f"feature {j} is observed in fewer than 2 rows")

    lo = np.where(observed, rows, np.inf).min(axis=0)
    hi = np.where(observed, rows, -np.inf).max(axis=0)
    means = np.array([rows[observed[:, j], j].mean() if counts[j] else 0.0
                      for j in range(rows.shape[1])])
    X = np.where(observed, rows, means)

    rng = np.random.default_rng(config.seed)
    for _ in range(config.n_cycles):
        for j in rng.permutation(incomplete):
            miss = ~observed[:, j]
            others = np.delete(np.arange(rows.shape[1]), j)
            icpt, coef = ridge_fit(X[~miss][:, others], X[~miss, j], config.ridge_lambda)
            pred = icpt + X[miss][:, others] @ coef
            if not binary[j]:
                pred = np.clip(pred, lo[j], hi[j])
            X[miss, j] = pred
    for j in incomplete:
        if binary[j]:
            miss = ~observed[:, j]
            X[miss, j] = (X[miss, j] >= 0.5).astype(float)
    X = np.where(observed, rows, X)
    if isinstance(dataset, Dataset):
        return Dataset(dataset.schema, X)
    return X


def mice_completer(context: Dataset, config: MiceConfig = MiceConfig()):
    """Completer that imputes alongside ``context`` rows (fully observed)."""

    def complete(raw, observed, rng):
        stacked = np.vstack([context.rows, np.where(observed, raw, 0.0)])
        mask = np.vstack([np.ones_like(context.rows, dtype=bool), observed])
        filled = mice_impute(stacked, mask, config, binary=context.schema.binary_mask)
        return np.where(observed, raw, filled[len(context):])

    return complete
