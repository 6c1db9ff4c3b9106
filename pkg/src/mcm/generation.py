"""Whole-table synthesis and conditional augmentation on top of a trained model."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import model as mcm
from .dataset import Dataset, DatasetSchema, DataValidationError
from .transform import MIN_SHIFTED, TransformState, inverse

# A completer fills unobserved cells of a raw-value matrix.
# Signature: (raw_rows, observed_mask, rng) -> raw_rows
Completer = Callable[[np.ndarray, np.ndarray, np.random.Generator], np.ndarray]


@dataclass(frozen=True)
class Fixed:
    value: float


@dataclass(frozen=True)
class UniformRange:
    lo: float
    hi: float

    def __post_init__(self):
        if self.lo > self.hi:
            raise DataValidationError(f"range lower bound {self.lo} exceeds upper bound {self.hi}")


class _MaskedType:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "Masked"


Masked = _MaskedType()


class ConditionTemplate:
    """Per-feature directives: ``Fixed``, ``UniformRange`` or ``Masked``.

    Features not mentioned are masked.
    """

    def __init__(self, schema: DatasetSchema, directives: Mapping[str, object]):
        self.schema = schema
        for name in directives:
            schema.index(name)
        self.directives = {name: directives.get(name, Masked) for name in schema.names}
        self._validate()

    def _validate(self):
        kinds = [d for d in self.directives.values()]
        if all(d is Masked for d in kinds):
            raise DataValidationError("template needs at least one fixed or range directive")
        if not any(d is Masked for d in kinds):
            raise DataValidationError("template needs at least one masked feature")
        for name, d in self.directives.items():
            feat = self.schema[name]
            values = [d.value] if isinstance(d, Fixed) else [d.lo, d.hi] if isinstance(d, UniformRange) else []
            for v in values:
                if feat.is_binary and v not in (0, 1):
                    raise DataValidationError(f"{name}: binary feature conditioned on {v}")
                if feat.role == "duration" and v < 0:
                    raise DataValidationError(f"{name}: negative duration {v}")

    @property
    def conditioned(self) -> np.ndarray:
        return np.array([d is not Masked for d in self.directives.values()])

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """Raw ``count x N`` matrix; masked columns hold NaN."""
        out = np.full((count, len(self.schema)), np.nan)
        for j, (name, d) in enumerate(self.directives.items()):
            if isinstance(d, Fixed):
                out[:, j] = d.value
            elif isinstance(d, UniformRange):
                if self.schema[name].is_binary:
                    out[:, j] = rng.integers(int(d.lo), int(d.hi) + 1, size=count)
                elif d.lo == d.hi:
                    out[:, j] = d.lo
                else:
                    # closed interval: nudge the upper end past hi, then clip
                    out[:, j] = np.minimum(rng.uniform(d.lo, np.nextafter(d.hi, np.inf), size=count), d.hi)
        return out

    def to_dict(self) -> dict:
        out = {}
        for name, d in self.directives.items():
            if isinstance(d, Fixed):
                out[name] = {"fixed": d.value}
            elif isinstance(d, UniformRange):
                out[name] = {"range": [d.lo, d.hi]}
            else:
                out[name] = "masked"
        return out

    @classmethod
    def from_dict(cls, schema: DatasetSchema, doc: Mapping) -> "ConditionTemplate":
        directives = {}
        for name, spec in doc.items():
            if spec == "masked":
                directives[name] = Masked
            elif isinstance(spec, Mapping) and set(spec) == {"fixed"}:
                directives[name] = Fixed(float(spec["fixed"]))
            elif isinstance(spec, Mapping) and set(spec) == {"range"} and len(spec["range"]) == 2:
                directives[name] = UniformRange(float(spec["range"][0]), float(spec["range"][1]))
            else:
                raise DataValidationError(f"{name}: unrecognised directive {spec!r}")
        return cls(schema, directives)

    @classmethod
    def from_json(cls, schema: DatasetSchema, path) -> "ConditionTemplate":
        with open(path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DataValidationError(f"{path}: template is not valid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise DataValidationError(f"{path}: template must be a JSON object")
        return cls.from_dict(schema, doc)


SAMPLING_MODES = ("deterministic", "stochastic")


def decode(model: mcm.McmModel, v: np.ndarray, observed: np.ndarray, binary: np.ndarray,
           rng: np.random.Generator | None = None, sampling: str = "deterministic",
           sequential: bool = False, sweeps: int = 0) -> np.ndarray:
    """Complete masked cells of ``v`` (unit-cube values).

    ``deterministic`` fills every masked cell with the model's reconstruction
    in one pass. ``stochastic`` draws binary cells as Bernoulli(v_hat) and
    continuous cells as v_hat plus a residual from the model's residual bank
    (when it has one). With ``sequential`` the masked cells of each row are
    filled one at a time in random order, each draw becoming an observed
    input for the next. ``sweeps`` further passes then redraw each originally
    masked cell given all the others (Gibbs-style refinement).
    """
    if sampling not in SAMPLING_MODES:
        raise ValueError(f"unknown sampling mode {sampling!r}")
    stochastic = sampling == "stochastic"
    if (stochastic or sequential) and rng is None:
        raise ValueError("stochastic or sequential decoding needs an rng")
    v = np.array(v, dtype=float)
    original_observed = observed
    observed = np.array(observed, dtype=bool)
    if sweeps and not sequential:
        raise ValueError("refinement sweeps need sequential decoding")
    if not sequential:
        v_hat = mcm.complete(model, v, observed)
        if not stochastic:
            return v_hat
        rows, cols = np.nonzero(~observed)
        v_hat[rows, cols] = _draw(model, v_hat[rows, cols], cols,
                                  observed.sum(axis=1)[rows], binary, rng)
        return v_hat

    n, n_feat = v.shape
    order = np.argsort(np.where(observed, np.inf, rng.random((n, n_feat))), axis=1)
    for step in range(n_feat):
        pos = order[:, step]
        rows = np.flatnonzero(~observed[np.arange(n), pos])
        if rows.size == 0:
            break
        cols = pos[rows]
        v_hat = mcm.complete(model, v[rows], observed[rows])[np.arange(rows.size), cols]
        if stochastic:
            v_hat = _draw(model, v_hat, cols, observed[rows].sum(axis=1), binary, rng)
        v[rows, cols] = v_hat
        observed[rows, cols] = True

    masked = ~np.asarray(original_observed, dtype=bool)
    for _ in range(sweeps):
        order = np.argsort(np.where(masked, rng.random((n, n_feat)), np.inf), axis=1)
        for step in range(n_feat):
            pos = order[:, step]
            rows = np.flatnonzero(masked[np.arange(n), pos])
            if rows.size == 0:
                break
            cols = pos[rows]
            obs = np.ones((rows.size, n_feat), dtype=bool)
            obs[np.arange(rows.size), cols] = False
            v_hat = mcm.complete(model, v[rows], obs)[np.arange(rows.size), cols]
            if stochastic:
                v_hat = _draw(model, v_hat, cols, np.full(rows.size, n_feat - 1), binary, rng)
            v[rows, cols] = v_hat
    return v


def _draw(model, v_hat, cols, n_observed, binary, rng):
    is_bin = binary[cols]
    coin = rng.random(v_hat.size)
    out = v_hat.copy()
    out[is_bin] = (coin[is_bin] < v_hat[is_bin]).astype(float)
    cont = ~is_bin
    if model.residuals is not None and cont.any():
        noise = model.residuals.draw(cols[cont], n_observed[cont], v_hat[cont], rng)
        out[cont] = np.clip(v_hat[cont] + noise, 0.0, 1.0)
    return out


def mcm_completer(model: mcm.McmModel, state: TransformState, schema: DatasetSchema,
                  sampling: str = "deterministic", sequential: bool = False,
                  sweeps: int = 0) -> Completer:
    """Wrap a trained model as a raw-space completer."""

    def complete(raw, observed, rng):
        filled = np.where(observed, raw, 0.0)
        v = np.zeros_like(filled)
        for j in range(len(state)):
            col = observed[:, j]
            if col.any():
                vals = filled[col, j]
                if not state.binary[j]:
                    # below the fitted domain maps to v = 0, like any low outlier
                    vals = np.maximum(vals, MIN_SHIFTED - state.shifts[j])
                v[col, j] = state.forward_column(j, vals)
        v_done = decode(model, v, observed, state.binary, rng, sampling, sequential, sweeps)
        x = inverse(v_done, state, schema, as_dataset=False)
        # conditioned cells are copied back so the transform roundtrip cannot drift them
        return np.where(observed, raw, x)

    return complete


def mask_rows(count: int, n_features: int, mask_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Observed-masks hiding exactly round(mask_ratio * N) uniformly chosen features."""
    if not 0 < mask_ratio < 1:
        raise DataValidationError("mask_ratio must lie strictly between 0 and 1")
    k = int(np.floor(mask_ratio * n_features + 0.5))
    if k >= n_features:
        raise DataValidationError(
            f"mask_ratio {mask_ratio} would mask all {n_features} features"
        )
    k = max(k, 1)
    # positions holding one of the values 0..k-1 of a random permutation are masked
    perm = np.argsort(rng.random((count, n_features)), axis=1)
    return perm >= k


def sample_source_rows(n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    if n == 0:
        raise DataValidationError("source dataset is empty")
    if count <= n:
        return rng.permutation(n)[:count]
    return rng.integers(0, n, size=count)


def synthesize_with(completer: Completer, source: Dataset, mask_ratio: float, count: int,
                    rng: np.random.Generator) -> Dataset:
    if count < 1:
        raise DataValidationError("count must be >= 1")
    observed = mask_rows(count, len(source.schema), mask_ratio, rng)
    idx = sample_source_rows(len(source), count, rng)
    raw = source.rows[idx]
    return Dataset(source.schema, _tidy(completer(raw, observed, rng), source.schema))


def synthesize(model: mcm.McmModel, state: TransformState, source: Dataset, mask_ratio: float,
               count: int, rng: np.random.Generator, sampling: str = "deterministic",
               sequential: bool = False) -> Dataset:
    """Mask-and-reconstruct ``count`` rows drawn from ``source``.

    Rows are drawn without replacement when ``count <= len(source)`` and with
    replacement otherwise.
    """
    completer = mcm_completer(model, state, source.schema, sampling, sequential)
    return synthesize_with(completer, source, mask_ratio, count, rng)


def augment_with(completer: Completer, template: ConditionTemplate, count: int,
                 rng: np.random.Generator) -> Dataset:
    if count < 1:
        raise DataValidationError("count must be >= 1")
    raw = template.sample(count, rng)
    observed = np.broadcast_to(template.conditioned, raw.shape).copy()
    out = completer(raw, observed, rng)
    return Dataset(template.schema, _tidy(out, template.schema))


def augment(model: mcm.McmModel, state: TransformState, template: ConditionTemplate,
            count: int, rng: np.random.Generator, sampling: str = "deterministic",
            sequential: bool = False) -> Dataset:
    completer = mcm_completer(model, state, template.schema, sampling, sequential)
    return augment_with(completer, template, count, rng)


def cohort_template(cohort: Dataset, stratify) -> ConditionTemplate:
    if len(cohort) == 0:
        raise DataValidationError("cohort is empty")
    if isinstance(stratify, str):
        stratify = [stratify]
    directives = {}
    for name in stratify:
        col = cohort.column(name)
        directives[name] = UniformRange(float(col.min()), float(col.max()))
    return ConditionTemplate(cohort.schema, directives)


def augment_cohort_with(completer: Completer, cohort: Dataset, stratify, multiplier: int,
                        rng: np.random.Generator) -> Dataset:
    if multiplier < 1:
        raise DataValidationError("multiplier must be >= 1")
    template = cohort_template(cohort, stratify)
    return augment_with(completer, template, multiplier * len(cohort), rng)


def augment_cohort(model: mcm.McmModel, state: TransformState, cohort: Dataset, stratify,
                   multiplier: int, rng: np.random.Generator, sampling: str = "deterministic",
                   sequential: bool = False) -> Dataset:
    """Generate ``multiplier * len(cohort)`` rows inside the cohort's observed
    range of each stratifying feature."""
    completer = mcm_completer(model, state, cohort.schema, sampling, sequential)
    return augment_cohort_with(completer, cohort, stratify, multiplier, rng)


def _tidy(x: np.ndarray, schema: DatasetSchema) -> np.ndarray:
    x = np.array(x, dtype=float)
    binary = schema.binary_mask
    x[:, binary] = np.clip(np.round(x[:, binary]), 0, 1)
    d = schema.index(schema.duration)
    x[:, d] = np.maximum(x[:, d], 0.0)
    return x
