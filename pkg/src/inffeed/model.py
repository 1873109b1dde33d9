"""L2-regularized multinomial logistic regression.

Loss, analytic gradient, dense Hessian, matrix-free Hessian-vector products,
training and fine-tuning. Parameters flatten in a fixed canonical order
(row-major weights, then bias) so influence vectors are comparable across
runs. The regularizer applies to weights and bias, so the Hessian is
``mean-CE-curvature + l2 * I`` and is positive definite whenever l2 > 0.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Corpus, Instance
from .errors import CapacityError, TrainingError, ValidationError

DENSE_HESSIAN_CAP = 2000


@dataclass(frozen=True)
class ModelParams:
    """Weights (C x d), bias (C,), and the regularization strength they were fit with."""

    weights: np.ndarray
    bias: np.ndarray
    l2: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
            raise ValidationError(f"inconsistent parameter shapes {w.shape} / {b.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValidationError("non-finite model parameters")
        if self.l2 < 0:
            raise ValidationError("l2 must be non-negative")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def num_params(self) -> int:
        return self.num_classes * (self.feature_dim + 1)

    @staticmethod
    def zeros(num_classes: int, feature_dim: int, l2: float) -> "ModelParams":
        return ModelParams(np.zeros((num_classes, feature_dim)), np.zeros(num_classes), l2)


def flatten(params: ModelParams) -> np.ndarray:
    """Canonical parameter vector: weights row-major, then bias."""
    return np.concatenate([params.weights.ravel(), params.bias])


def unflatten(vec: np.ndarray, num_classes: int, feature_dim: int, l2: float) -> ModelParams:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (num_classes * (feature_dim + 1),):
        raise ValidationError(f"parameter vector has length {vec.size}, expected {num_classes * (feature_dim + 1)}")
    w = vec[: num_classes * feature_dim].reshape(num_classes, feature_dim)
    b = vec[num_classes * feature_dim :]
    return ModelParams(w, b, l2)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 500
    batch_size: int = 64
    l2: float = 0.005
    seed: int = 0
    optimizer: str = "gd"  # "gd" = full-batch gradient descent, "sgd" = mini-batch
    grad_tol: float = 0.0  # stop early once the max-norm of the gradient falls below this

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be non-negative")
        if self.epochs < 0:
            raise ValidationError("epochs must be non-negative")
        if self.l2 <= 0:
            raise ValidationError("l2 must be strictly positive for training")
        if self.optimizer not in ("gd", "sgd"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainReport:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int | None = None

    def to_json(self) -> dict:
        return {
            "train_losses": self.train_losses,
            "val_losses": self.val_losses,
            "best_epoch": self.best_epoch,
            "stopped_epoch": self.stopped_epoch,
        }


# ---------------------------------------------------------------------------
# Core numerics (array form)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _extended(X: np.ndarray) -> np.ndarray:
    return np.hstack([X, np.ones((X.shape[0], 1))])


def _ext_matrix(params: ModelParams) -> np.ndarray:
    return np.hstack([params.weights, params.bias[:, None]])


def _ext_to_canonical_perm(C: int, d: int) -> np.ndarray:
    perm = [c * (d + 1) + j for c in range(C) for j in range(d)]
    perm += [c * (d + 1) + d for c in range(C)]
    return np.array(perm, dtype=np.int64)


def loss_arrays(params: ModelParams, X: np.ndarray, y: np.ndarray) -> float:
    Z = X @ params.weights.T + params.bias
    Z = Z - Z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(Z).sum(axis=1))
    ce = float(np.mean(log_norm - Z[np.arange(len(y)), y]))
    reg = 0.5 * params.l2 * (float(np.sum(params.weights**2)) + float(np.sum(params.bias**2)))
    return ce + reg


def grad_arrays(params: ModelParams, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    n = X.shape[0]
    P = _softmax(X @ params.weights.T + params.bias)
    R = P.copy()
    R[np.arange(n), y] -= 1.0
    gw = R.T @ X / n + params.l2 * params.weights
    gb = R.mean(axis=0) + params.l2 * params.bias
    return np.concatenate([gw.ravel(), gb])


def per_instance_grads(params: ModelParams, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """One row per instance: the gradient of loss(params, {instance})."""
    n = X.shape[0]
    Xt = _extended(X)
    P = _softmax(X @ params.weights.T + params.bias)
    R = P.copy()
    R[np.arange(n), y] -= 1.0
    G_ext = np.einsum("ia,ij->iaj", R, Xt).reshape(n, -1)
    perm = _ext_to_canonical_perm(params.num_classes, params.feature_dim)
    return G_ext[:, perm] + params.l2 * flatten(params)


def hessian_arrays(params: ModelParams, X: np.ndarray) -> np.ndarray:
    C, d = params.num_classes, params.feature_dim
    P_dim = C * (d + 1)
    if P_dim > DENSE_HESSIAN_CAP:
        raise CapacityError(
            f"dense Hessian needs {P_dim} parameters (> cap {DENSE_HESSIAN_CAP}); use hvp instead"
        )
    n = X.shape[0]
    Xt = _extended(X)
    P = _softmax(X @ params.weights.T + params.bias)
    S = -P[:, :, None] * P[:, None, :]
    S[:, np.arange(C), np.arange(C)] += P
    H_ext = np.einsum("iab,ij,ik->ajbk", S, Xt, Xt, optimize=True).reshape(P_dim, P_dim) / n
    perm = _ext_to_canonical_perm(C, d)
    H = H_ext[np.ix_(perm, perm)]
    H[np.diag_indices_from(H)] += params.l2
    return H


def hvp_arrays(params: ModelParams, X: np.ndarray, y_unused: np.ndarray | None, v: np.ndarray) -> np.ndarray:
    """H @ v without materializing H. The CE curvature does not depend on labels."""
    C, d = params.num_classes, params.feature_dim
    if v.shape != (C * (d + 1),):
        raise ValidationError(f"vector has length {v.size}, expected {C * (d + 1)}")
    n = X.shape[0]
    Xt = _extended(X)
    V = np.empty((C, d + 1))
    V[:, :d] = v[: C * d].reshape(C, d)
    V[:, d] = v[C * d :]
    P = _softmax(X @ params.weights.T + params.bias)
    U = Xt @ V.T  # (n, C)
    S_U = P * U - P * np.sum(P * U, axis=1, keepdims=True)
    out_ext = S_U.T @ Xt / n + params.l2 * V
    return np.concatenate([out_ext[:, :d].ravel(), out_ext[:, d]])


# ---------------------------------------------------------------------------
# Instance-facing operations


def _xy(batch: Sequence[Instance], params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    batch = list(batch)
    if not batch:
        raise ValidationError("empty batch")
    X = np.stack([inst.features for inst in batch])
    if X.shape[1] != params.feature_dim:
        raise ValidationError(
            f"feature dimension {X.shape[1]} does not match model dimension {params.feature_dim}"
        )
    y = np.array([inst.label for inst in batch], dtype=np.int64)
    if y.max() >= params.num_classes:
        raise ValidationError("label outside the model's class range")
    return X, y


def loss(params: ModelParams, batch: Sequence[Instance]) -> float:
    """Mean cross-entropy over the batch plus (l2/2) * ||params||^2."""
    X, y = _xy(batch, params)
    return loss_arrays(params, X, y)


def grad(params: ModelParams, batch: Sequence[Instance]) -> np.ndarray:
    X, y = _xy(batch, params)
    return grad_arrays(params, X, y)


def hessian(params: ModelParams, batch: Sequence[Instance]) -> np.ndarray:
    X, _ = _xy(batch, params)
    return hessian_arrays(params, X)


def hvp(params: ModelParams, batch: Sequence[Instance], v: np.ndarray) -> np.ndarray:
    X, _ = _xy(batch, params)
    return hvp_arrays(params, X, None, np.asarray(v, dtype=np.float64))


def predict_proba(params: ModelParams, X: np.ndarray) -> np.ndarray:
    return _softmax(np.atleast_2d(X) @ params.weights.T + params.bias)


def predict(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """Argmax prediction; ties resolve to the lowest class index."""
    return np.argmax(predict_proba(params, X), axis=1)


# ---------------------------------------------------------------------------
# Training


def fit_arrays(
    X: np.ndarray,
    y: np.ndarray,
    config: TrainConfig,
    X_val: np.ndarray,
    y_val: np.ndarray,
    num_classes: int,
    init: ModelParams | None = None,
) -> tuple[ModelParams, TrainReport]:
    """Run the configured optimizer and return the min-validation-loss snapshot."""
    d = X.shape[1]
    params = init if init is not None else ModelParams.zeros(num_classes, d, config.l2)
    if init is not None and (params.num_classes != num_classes or params.feature_dim != d):
        raise ValidationError("initial parameters do not match the data dimensions")
    rng = np.random.default_rng(config.seed)
    report = TrainReport()
    report.train_losses.append(loss_arrays(params, X, y))
    report.val_losses.append(loss_arrays(params, X_val, y_val))
    best = (report.val_losses[0], 0, params)

    for epoch in range(1, config.epochs + 1):
        if config.optimizer == "gd":
            g = grad_arrays(params, X, y)
            vec = flatten(params) - config.learning_rate * g
        else:
            order = rng.permutation(len(X))
            vec = flatten(params)
            for start in range(0, len(X), config.batch_size):
                idx = order[start : start + config.batch_size]
                p = unflatten(vec, num_classes, d, config.l2)
                vec = vec - config.learning_rate * grad_arrays(p, X[idx], y[idx])
        if not np.all(np.isfinite(vec)):
            raise TrainingError(f"training diverged at epoch {epoch}", epoch=epoch)
        params = unflatten(vec, num_classes, d, config.l2)
        tl = loss_arrays(params, X, y)
        vl = loss_arrays(params, X_val, y_val)
        if not (np.isfinite(tl) and np.isfinite(vl)):
            raise TrainingError(f"training diverged at epoch {epoch}", epoch=epoch)
        report.train_losses.append(tl)
        report.val_losses.append(vl)
        if vl < best[0]:
            best = (vl, epoch, params)
        if config.grad_tol > 0:
            if np.max(np.abs(grad_arrays(params, X, y))) <= config.grad_tol:
                report.stopped_epoch = epoch
                break

    report.best_epoch = best[1]
    return best[2], report


def train(
    corpus: Corpus, split: str, config: TrainConfig, validation: str
) -> tuple[ModelParams, TrainReport]:
    """Train from the zero initialization on one split, selecting on validation loss."""
    ids = corpus.split_ids(split)
    val_ids = corpus.split_ids(validation)
    if not ids or not val_ids:
        raise ValidationError("training and validation splits must be non-empty")
    return fit_arrays(
        corpus.features_of(ids),
        corpus.labels_of(ids),
        config,
        corpus.features_of(val_ids),
        corpus.labels_of(val_ids),
        corpus.num_classes,
    )


def fine_tune(
    params: ModelParams, corpus: Corpus, split: str, config: TrainConfig, validation: str
) -> tuple[ModelParams, TrainReport]:
    """As train, but start from the given parameters instead of zeros."""
    if params.feature_dim != corpus.feature_dim or params.num_classes != corpus.num_classes:
        raise ValidationError("model parameters do not match the corpus dimensions")
    ids = corpus.split_ids(split)
    val_ids = corpus.split_ids(validation)
    if not ids or not val_ids:
        raise ValidationError("training and validation splits must be non-empty")
    return fit_arrays(
        corpus.features_of(ids),
        corpus.labels_of(ids),
        config,
        corpus.features_of(val_ids),
        corpus.labels_of(val_ids),
        corpus.num_classes,
        init=ModelParams(params.weights, params.bias, config.l2),
    )


# ---------------------------------------------------------------------------
# Checkpoints


def checkpoint_json(params: ModelParams) -> str:
    payload = {
        "num_classes": params.num_classes,
        "feature_dim": params.feature_dim,
        "l2": params.l2,
        "weights": [[float(x) for x in row] for row in params.weights],
        "bias": [float(x) for x in params.bias],
    }
    return json.dumps(payload, sort_keys=True)


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(checkpoint_json(params) + "\n")


def load_checkpoint(path: str | Path) -> ModelParams:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"checkpoint not found: {path}")
    payload = json.loads(path.read_text())
    return ModelParams(np.array(payload["weights"]), np.array(payload["bias"]), float(payload["l2"]))


def checkpoint_checksum(params: ModelParams) -> str:
    return hashlib.sha256(checkpoint_json(params).encode()).hexdigest()
