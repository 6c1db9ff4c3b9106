"""The masked reconstruction network: attention filter followed by a 2-layer MLP.

Everything is plain numpy. A batch is a pair ``(V, M)`` of ``B x N`` arrays:
normalised feature values and a boolean *observed* mask (``True`` = visible to
the model, ``False`` = masked).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, fields

import numpy as np

from .transform import TransformState

log = logging.getLogger(__name__)

MODEL_VERSION = "1.0"
PARAM_NAMES = ("W", "U1", "b1", "U2", "b2")


class TrainingDivergedError(RuntimeError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass(eq=False)
class McmModel:
    W: np.ndarray   # N x N attention logits
    U1: np.ndarray  # H x N
    b1: np.ndarray  # H
    U2: np.ndarray  # N x H
    b2: np.ndarray  # N
    feature_names: tuple[str, ...] | None = None
    version: str = MODEL_VERSION
    residuals: "ResidualBank | None" = None

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.array(getattr(self, name), dtype=float))
        n, h = self.n_features, self.hidden
        shapes = {"W": (n, n), "U1": (h, n), "b1": (h,), "U2": (n, h), "b2": (n,)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite weights")
        if self.feature_names is not None:
            self.feature_names = tuple(self.feature_names)

    @property
    def n_features(self) -> int:
        return self.W.shape[0]

    @property
    def hidden(self) -> int:
        return self.U1.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "McmModel":
        return McmModel(**{k: v.copy() for k, v in self.params().items()},
                        feature_names=self.feature_names, version=self.version,
                        residuals=self.residuals)

    def __eq__(self, other):
        if not isinstance(other, McmModel):
            return NotImplemented
        return (self.feature_names == other.feature_names and self.version == other.version
                and self.residuals == other.residuals
                and all(np.array_equal(a, b) for a, b in
                        zip(self.params().values(), other.params().values())))


def init_model(n_features: int, hidden: int = 64, seed: int = 0,
               feature_names=None) -> McmModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    if n_features < 2:
        raise ValueError("masking needs at least 2 features")
    if hidden < 1:
        raise ValueError("hidden width must be >= 1")
    rng = np.random.default_rng(seed)
    n, h = n_features, hidden
    lim_n, lim_h = 1.0 / math.sqrt(n), 1.0 / math.sqrt(h)
    return McmModel(
        W=rng.uniform(-lim_n, lim_n, (n, n)),
        U1=rng.uniform(-lim_n, lim_n, (h, n)),
        b1=np.zeros(h),
        U2=rng.uniform(-lim_h, lim_h, (n, h)),
        b2=np.zeros(n),
        feature_names=feature_names,
    )


def _as_batch(v, mask):
    V = np.atleast_2d(np.asarray(v, dtype=float))
    M = np.atleast_2d(np.asarray(mask, dtype=bool))
    if V.shape != M.shape:
        raise ValueError(f"values {V.shape} and mask {M.shape} differ in shape")
    if not M.any(axis=1).all():
        raise ValueError("every row needs at least one observed feature")
    return V, M


_OPEN_LO = np.nextafter(0.0, 1.0)
_OPEN_HI = np.nextafter(1.0, 0.0)


def _sigmoid(x):
    # clipped so saturated logits still land strictly inside (0, 1)
    return np.clip(0.5 * (1.0 + np.tanh(0.5 * x)), _OPEN_LO, _OPEN_HI)


def _forward_cache(model: McmModel, V, M):
    Vm = np.where(M, V, 0.0)
    Z = Vm @ model.W.T
    Z = np.where(M, Z, -np.inf)
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    A = E / E.sum(axis=1, keepdims=True)
    G = A * Vm
    P = G @ model.U1.T + model.b1
    R = np.maximum(P, 0.0)
    Q = R @ model.U2.T + model.b2
    Vhat = _sigmoid(Q)
    return Vm, A, G, P, R, Vhat


def attention(model: McmModel, v, mask) -> np.ndarray:
    """Softmax over observed positions of ``W @ (v * mask)``; zero where masked."""
    V, M = _as_batch(v, mask)
    A = _forward_cache(model, V, M)[1]
    return A[0] if np.ndim(v) == 1 else A


def forward(model: McmModel, v, mask):
    """Return ``(attention, reconstruction)``; reconstruction lies in (0, 1)."""
    V, M = _as_batch(v, mask)
    _, A, _, _, _, Vhat = _forward_cache(model, V, M)
    if np.ndim(v) == 1:
        return A[0], Vhat[0]
    return A, Vhat


def loss(v_hat, v) -> float:
    v_hat, v = np.asarray(v_hat, dtype=float), np.asarray(v, dtype=float)
    if v_hat.shape != v.shape:
        raise ValueError(f"length mismatch: {v_hat.shape} vs {v.shape}")
    return float(np.mean((v_hat - v) ** 2))


def batch_loss(model: McmModel, V, M, masked_only: bool = False) -> float:
    V, M = _as_batch(V, M)
    Vhat = _forward_cache(model, V, M)[-1]
    return float(_per_row_loss(Vhat, V, M, masked_only).mean())


def _per_row_loss(Vhat, V, M, masked_only):
    sq = (Vhat - V) ** 2
    if not masked_only:
        return sq.mean(axis=1)
    weight = ~M
    return (sq * weight).sum(axis=1) / np.maximum(weight.sum(axis=1), 1)


def gradients(model: McmModel, V, M, masked_only: bool = False):
    """Mean batch loss and its exact gradient w.r.t. every parameter."""
    V, M = _as_batch(V, M)
    if V.shape[0] == 0:
        raise ValueError("empty batch")
    B, N = V.shape
    Vm, A, G, P, R, Vhat = _forward_cache(model, V, M)
    if masked_only:
        weight = (~M) / np.maximum((~M).sum(axis=1, keepdims=True), 1)
    else:
        weight = np.full_like(V, 1.0 / N)
    resid = Vhat - V
    value = float(((resid ** 2) * weight).sum(axis=1).mean())

    dVhat = 2.0 * resid * weight / B
    dQ = dVhat * Vhat * (1.0 - Vhat)
    dU2 = dQ.T @ R
    db2 = dQ.sum(axis=0)
    dP = (dQ @ model.U2) * (P > 0)
    dU1 = dP.T @ G
    db1 = dP.sum(axis=0)
    dA = (dP @ model.U1) * Vm
    # softmax Jacobian restricted to observed positions (A is 0 elsewhere)
    dZ = A * (dA - (dA * A).sum(axis=1, keepdims=True))
    dW = dZ.T @ Vm
    return value, {"W": dW, "U1": dU1, "b1": db1, "U2": dU2, "b2": db2}


def complete(model: McmModel, v, mask) -> np.ndarray:
    """Fill masked positions with the reconstruction; observed ones are copied."""
    V, M = _as_batch(v, mask)
    Vhat = _forward_cache(model, V, M)[-1]
    out = np.where(M, V, Vhat)
    return out[0] if np.ndim(v) == 1 else out


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 64
    step_size: float = 1e-3
    moment_decays: tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-8
    mask_prob_range: tuple[float, float] = (0.15, 0.85)
    seed: int = 0
    hidden: int = 64
    masked_only_loss: bool = False

    def __post_init__(self):
        object.__setattr__(self, "moment_decays", tuple(float(b) for b in self.moment_decays))
        object.__setattr__(self, "mask_prob_range", tuple(float(p) for p in self.mask_prob_range))
        if int(self.epochs) < 1:
            raise ValueError("epochs must be >= 1")
        if int(self.batch_size) < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        b1, b2 = self.moment_decays
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError("moment decays must lie in [0, 1)")
        lo, hi = self.mask_prob_range
        if not 0 <= lo <= hi <= 1:
            raise ValueError("mask_prob_range must satisfy 0 <= lo <= hi <= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training option(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in fields(self)}


def sample_masks(n_rows: int, n_features: int, rng: np.random.Generator,
                 mask_prob_range=(0.15, 0.85)) -> np.ndarray:
    """Observed-masks with >=1 observed and >=1 masked feature per row.

    One masking probability is drawn per row; rows that land on all-masked or
    all-observed are redrawn with the same probability.
    """
    if n_features < 2:
        raise ValueError("masking needs at least 2 features")
    lo, hi = mask_prob_range
    p = rng.uniform(lo, hi, size=n_rows)
    masked = rng.random((n_rows, n_features)) < p[:, None]
    for _ in range(1000):
        count = masked.sum(axis=1)
        bad = np.flatnonzero((count == 0) | (count == n_features))
        if bad.size == 0:
            break
        masked[bad] = rng.random((bad.size, n_features)) < p[bad, None]
    else:
        # degenerate p (0 or 1): flip one uniformly chosen position
        count = masked.sum(axis=1)
        for i in np.flatnonzero((count == 0) | (count == n_features)):
            masked[i, rng.integers(n_features)] = count[i] == 0
    return ~masked


def sample_mask(n_features: int, rng: np.random.Generator,
                mask_prob_range=(0.15, 0.85)) -> np.ndarray:
    return sample_masks(1, n_features, rng, mask_prob_range)[0]


class Adam:
    def __init__(self, params: dict[str, np.ndarray], step_size=1e-3,
                 decays=(0.9, 0.999), eps=1e-8):
        self.step_size = step_size
        self.b1, self.b2 = decays
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] -= self.step_size * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def train(model: McmModel, v_matrix, config: TrainConfig = TrainConfig()):
    """Fit ``model`` to reconstruct randomly masked rows of ``v_matrix``.

    Returns a new model and the per-epoch mean training loss. The input model
    is left untouched.
    """
    V = np.asarray(v_matrix, dtype=float)
    n, n_feat = V.shape
    if n_feat != model.n_features:
        raise ValueError(f"data has {n_feat} features, model expects {model.n_features}")
    if n < config.batch_size:
        raise ValueError(f"need at least batch_size={config.batch_size} rows, got {n}")
    rng = np.random.default_rng(config.seed)
    model = model.copy()
    params = model.params()
    opt = Adam(params, config.step_size, config.moment_decays, config.epsilon)
    history = []
    for epoch in range(int(config.epochs)):
        order = rng.permutation(n)
        masks = sample_masks(n, n_feat, rng, config.mask_prob_range)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            value, grads = gradients(model, V[idx], masks[idx], config.masked_only_loss)
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch + 1}")
            total += value * idx.size
            opt.step(params, grads)
        for k, arr in params.items():
            if not np.all(np.isfinite(arr)):
                raise TrainingDivergedError(f"non-finite weights in {k} at epoch {epoch + 1}")
        history.append(total / n)
    return model, history


# --------------------------------------------------------- residual bank


class ResidualBank:
    """Reconstruction errors on the training rows, keyed by feature and the
    number of observed features, each stored with the prediction it came from.

    Used for stochastic completion: a masked value is drawn as the prediction
    plus the residual of one of the ``k`` training reconstructions whose
    prediction was closest.
    """

    def __init__(self, entries: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]]):
        self.entries = {}
        for key, (pred, resid) in entries.items():
            pred, resid = np.asarray(pred, float), np.asarray(resid, float)
            order = np.argsort(pred, kind="stable")
            self.entries[tuple(int(k) for k in key)] = (pred[order], resid[order])
        # fallback pool per feature when an observed-count bucket is missing
        self._by_feature = {}
        for j in {j for j, _ in self.entries}:
            parts = [v for (jj, _), v in sorted(self.entries.items()) if jj == j]
            pred = np.concatenate([p for p, _ in parts])
            resid = np.concatenate([r for _, r in parts])
            order = np.argsort(pred, kind="stable")
            self._by_feature[j] = (pred[order], resid[order])

    def __eq__(self, other):
        if not isinstance(other, ResidualBank):
            return NotImplemented
        return self.entries.keys() == other.entries.keys() and all(
            np.array_equal(a, b) for k in self.entries
            for a, b in zip(self.entries[k], other.entries[k]))

    def draw(self, feature: np.ndarray, n_observed: np.ndarray, pred: np.ndarray,
             rng: np.random.Generator, k: int = 20) -> np.ndarray:
        out = np.zeros(len(pred))
        u = rng.random(len(pred))
        keys = np.stack([feature, n_observed], axis=1)
        for key in {tuple(row) for row in keys.tolist()}:
            rows = np.flatnonzero((keys[:, 0] == key[0]) & (keys[:, 1] == key[1]))
            bank = self.entries.get(key) or self._by_feature.get(key[0])
            if bank is None or bank[0].size == 0:
                continue
            preds, resids = bank
            kk = min(k, preds.size)
            pos = np.searchsorted(preds, pred[rows])
            start = np.clip(pos - kk // 2, 0, preds.size - kk)
            out[rows] = resids[start + (u[rows] * kk).astype(int)]
        return out

    def to_dict(self) -> dict:
        return {f"{j}:{c}": [p.tolist(), r.tolist()] for (j, c), (p, r) in sorted(self.entries.items())}

    @classmethod
    def from_dict(cls, doc: dict) -> "ResidualBank":
        entries = {}
        for key, (pred, resid) in doc.items():
            j, c = key.split(":")
            entries[(int(j), int(c))] = (pred, resid)
        return cls(entries)


def fit_residual_bank(model: McmModel, v_matrix, seed: int = 0, passes: int = 4) -> ResidualBank:
    """Collect masked-position residuals over ``passes`` random maskings of
    the training rows, covering every observed count from 1 to N-1."""
    V = np.asarray(v_matrix, dtype=float)
    n, n_feat = V.shape
    rng = np.random.default_rng(seed)
    buckets: dict[tuple[int, int], list] = {}
    for _ in range(passes):
        observed = sample_masks(n, n_feat, rng, (0.0, 1.0))
        v_hat = complete(model, V, observed)
        rows, cols = np.nonzero(~observed)
        counts = observed.sum(axis=1)[rows]
        for j, c, p, r in zip(cols, counts, v_hat[rows, cols], V[rows, cols] - v_hat[rows, cols]):
            buckets.setdefault((int(j), int(c)), [[], []])
            buckets[(int(j), int(c))][0].append(p)
            buckets[(int(j), int(c))][1].append(r)
    return ResidualBank({k: (np.array(p), np.array(r)) for k, (p, r) in buckets.items()})


# ------------------------------------------------------------ persistence


def save_model(model: McmModel, path, state: TransformState | None = None) -> None:
    doc = {
        "version": model.version,
        "feature_names": list(model.feature_names) if model.feature_names else None,
        "H": model.hidden,
        **{k: v.tolist() for k, v in model.params().items()},
        "transform_state": state.to_dict() if state is not None else None,
    }
    if model.residuals is not None:
        doc["residuals"] = model.residuals.to_dict()
    # json writes floats with repr(), which round-trips exactly
    text = json.dumps(doc, indent=None, separators=(",", ":"))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def load_model(path, expected_version: str = MODEL_VERSION):
    """Return ``(model, transform_state_or_None)``."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: malformed model file ({exc})") from None
    if not isinstance(doc, dict):
        raise ModelFormatError(f"{path}: model file must hold a JSON object")
    version = doc.get("version")
    if version != expected_version:
        raise ModelFormatError(
            f"{path}: model version {version!r} does not match supported {expected_version!r}"
        )
    try:
        bank = doc.get("residuals")
        model = McmModel(**{k: doc[k] for k in PARAM_NAMES},
                         feature_names=doc.get("feature_names"), version=version,
                         residuals=ResidualBank.from_dict(bank) if bank is not None else None)
        if doc.get("H") is not None and doc["H"] != model.hidden:
            raise ModelFormatError(f"{path}: H={doc['H']} disagrees with weight shapes")
        state = doc.get("transform_state")
        state = TransformState.from_dict(state) if state is not None else None
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"{path}: malformed model file ({exc})") from None
    return model, state
