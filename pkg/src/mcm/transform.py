"""Reversible Box-Cox + min-max mapping between raw features and [0, 1]."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .dataset import Dataset, DatasetSchema, DataValidationError

log = logging.getLogger(__name__)

LAMBDA_BOUNDS = (-5.0, 5.0)
MIN_SHIFTED = 1e-8
# smallest admissible 1 + lambda * y when un-rescaled values leave the Box-Cox range
_BASE_FLOOR = 1e-12
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def boxcox(x, lam: float) -> np.ndarray:
    logx = np.log(np.asarray(x, dtype=float))
    if lam == 0.0:
        return logx
    return np.expm1(lam * logx) / lam


def inv_boxcox(y, lam: float) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if lam == 0.0:
        return np.exp(y)
    return np.exp(np.log1p(lam * y) / lam)


def boxcox_llf(lam: float, x) -> float:
    """Profile log-likelihood of the Box-Cox exponent (normal errors)."""
    x = np.asarray(x, dtype=float)
    y = boxcox(x, lam)
    var = y.var()
    if not var > 0 or not np.isfinite(var):
        return -np.inf
    return -0.5 * x.size * math.log(var) + (lam - 1.0) * float(np.log(x).sum())


def fit_boxcox_lambda(values, bounds=LAMBDA_BOUNDS, tol: float = 1e-6) -> float:
    """Maximum-likelihood Box-Cox exponent by golden-section search."""
    x = np.asarray(values, dtype=float).ravel()
    if x.size == 0 or np.any(~np.isfinite(x)) or np.any(x <= 0):
        raise DataValidationError("Box-Cox needs finite, strictly positive values")
    if np.unique(x).size < 2:
        raise DataValidationError("Box-Cox needs at least two distinct values")
    # normalise scale so x**5 cannot overflow; lambda is scale invariant
    x = x / np.exp(np.log(x).mean())

    a, b = bounds
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = boxcox_llf(c, x), boxcox_llf(d, x)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = boxcox_llf(c, x)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = boxcox_llf(d, x)
    return 0.5 * (a + b)


@dataclass(frozen=True, eq=False)
class TransformState:
    """Per-feature (lambda, shift, lo, hi) for the raw <-> [0, 1] map."""

    names: tuple[str, ...]
    binary: np.ndarray
    lambdas: np.ndarray
    shifts: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        for attr in ("binary", "lambdas", "shifts", "lo", "hi"):
            arr = np.array(getattr(self, attr), dtype=bool if attr == "binary" else float)
            arr.flags.writeable = False
            object.__setattr__(self, attr, arr)

    def __eq__(self, other):
        if not isinstance(other, TransformState):
            return NotImplemented
        return self.names == other.names and all(
            np.array_equal(getattr(self, a), getattr(other, a))
            for a in ("binary", "lambdas", "shifts", "lo", "hi")
        )

    def __len__(self):
        return len(self.names)

    def forward_column(self, j: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.binary[j]:
            return x.copy()
        shifted = x + self.shifts[j]
        if np.any(shifted <= 0):
            raise DataValidationError(
                f"feature {self.names[j]!r}: value below the transform domain "
                f"(x + shift must be > 0)"
            )
        y = boxcox(shifted, self.lambdas[j])
        span = self.hi[j] - self.lo[j]
        v = (y - self.lo[j]) / span if span > 0 else np.zeros_like(y)
        return np.clip(v, 0.0, 1.0)

    def inverse_column(self, j: int, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if self.binary[j]:
            return v.copy()
        lam = self.lambdas[j]
        y = self.lo[j] + np.clip(v, 0.0, 1.0) * (self.hi[j] - self.lo[j])
        if lam == 0.0:
            return np.exp(y) - self.shifts[j]
        base = lam * y + 1.0
        bad = base <= _BASE_FLOOR
        if bad.any():
            log.warning(
                "feature %r: %d value(s) outside the Box-Cox range, clamped",
                self.names[j], int(bad.sum()),
            )
            base = np.maximum(base, _BASE_FLOOR)
        with np.errstate(over="ignore"):
            x = np.exp(np.log(base) / lam)
        return np.minimum(x, np.finfo(float).max) - self.shifts[j]

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "binary": [bool(b) for b in self.binary],
            "lambda": [float(v) for v in self.lambdas],
            "shift": [float(v) for v in self.shifts],
            "lo": [float(v) for v in self.lo],
            "hi": [float(v) for v in self.hi],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransformState":
        return cls(d["names"], d["binary"], d["lambda"], d["shift"], d["lo"], d["hi"])


def fit_transform_state(dataset: Dataset) -> TransformState:
    schema = dataset.schema
    n_feat = len(schema)
    lambdas, shifts = np.ones(n_feat), np.zeros(n_feat)
    lo, hi = np.zeros(n_feat), np.ones(n_feat)
    for j, feat in enumerate(schema):
        if feat.is_binary:
            continue
        x = dataset.rows[:, j]
        if x.size == 0 or x.min() == x.max():
            raise DataValidationError(f"continuous feature {feat.name!r} is constant")
        shifts[j] = max(0.0, MIN_SHIFTED - x.min())
        lambdas[j] = fit_boxcox_lambda(x + shifts[j])
        y = boxcox(x + shifts[j], lambdas[j])
        lo[j], hi[j] = y.min(), y.max()
    return TransformState(schema.names, schema.binary_mask, lambdas, shifts, lo, hi)


def forward(data: Dataset | np.ndarray, state: TransformState) -> np.ndarray:
    """Map raw rows to the unit cube. Held-out values beyond the fit range clamp."""
    rows = data.rows if isinstance(data, Dataset) else np.asarray(data, dtype=float)
    if rows.shape[1] != len(state):
        raise DataValidationError("feature count does not match the transform state")
    return np.column_stack([state.forward_column(j, rows[:, j]) for j in range(len(state))]) \
        if rows.shape[0] else np.zeros((0, len(state)))


def inverse(v: np.ndarray, state: TransformState, schema: DatasetSchema | None = None,
            rng: np.random.Generator | None = None, as_dataset: bool = True):
    """Map unit-cube rows back to raw values.

    Binary features are thresholded at 0.5, or drawn as Bernoulli(v) when an
    ``rng`` is supplied. Durations are floored at zero.
    """
    v = np.asarray(v, dtype=float)
    if v.ndim != 2 or v.shape[1] != len(state):
        raise DataValidationError("feature count does not match the transform state")
    x = np.empty_like(v)
    for j in range(len(state)):
        if state.binary[j]:
            if rng is None:
                x[:, j] = (v[:, j] >= 0.5).astype(float)
            else:
                x[:, j] = (rng.random(v.shape[0]) < v[:, j]).astype(float)
        else:
            x[:, j] = state.inverse_column(j, v[:, j])
    if schema is not None:
        x[:, schema.index(schema.duration)] = np.maximum(x[:, schema.index(schema.duration)], 0.0)
    if as_dataset:
        if schema is None:
            raise ValueError("a schema is required to build a Dataset")
        return Dataset(schema, x)
    return x
