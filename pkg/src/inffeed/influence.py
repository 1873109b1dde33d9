"""Signed influence scores between training and target instances.

Sign convention (fixed project-wide): a score is the up-weighting derivative
of the target loss, so positive = harmful (up-weighting the train point
raises the target loss) and negative = helpful. Helpful retrieval takes the
most negative scores; triage flags the most positive. The leave-one-out
retraining oracle measures the loss change from *removing* a point, which is
the opposite sign: comparisons against it negate the scores.

Inverse-Hessian-vector products come in three flavors: a dense factorization
(exact), a truncated stochastic Neumann recursion (lissa), and conjugate
gradients (cg).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg

from .corpus import Corpus, Instance
from .errors import ApproximationError, CapacityError, ValidationError
from .model import (
    ModelParams,
    TrainConfig,
    fit_arrays,
    grad_arrays,
    hessian_arrays,
    hvp_arrays,
    loss_arrays,
    per_instance_grads,
)

LOO_CAP = 200


@dataclass(frozen=True)
class InfluenceRecord:
    train_id: str
    target_id: str
    score: float
    method: str
    prefiltered: bool = False

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class LissaConfig:
    depth: int = 800
    damping: float = 0.01
    scale: float = 25.0
    repeats: int = 1
    batch_size: int = 32

    def __post_init__(self):
        if self.depth < 1:
            raise ValidationError("lissa depth must be at least 1")
        if self.damping < 0:
            raise ValidationError("lissa damping must be non-negative")
        if self.scale <= 0:
            raise ValidationError("lissa scale must be positive")
        if self.repeats < 1:
            raise ValidationError("lissa repeats must be at least 1")


@dataclass(frozen=True)
class CgConfig:
    max_iters: int = 200
    residual_tol: float = 1e-8
    damping: float = 0.0


@dataclass(frozen=True)
class IhvpConfig:
    method: str = "exact"
    lissa: LissaConfig = field(default_factory=LissaConfig)
    cg: CgConfig = field(default_factory=CgConfig)
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("exact", "lissa", "cg"):
            raise ValidationError(f"unknown ihvp method {self.method!r}")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class PrefilterConfig:
    enabled: bool = False
    k_neighbors: int = 100

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


class CgConvergenceWarning(UserWarning):
    """CG hit max_iters; the attached residual is the final relative residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


# ---------------------------------------------------------------------------
# Inverse-Hessian-vector products


def ihvp(
    params: ModelParams,
    batch: Sequence[Instance],
    v: np.ndarray,
    config: IhvpConfig,
) -> np.ndarray:
    """Approximate H^{-1} v over the given Hessian batch."""
    X = np.stack([inst.features for inst in batch])
    v = np.asarray(v, dtype=np.float64)
    return ihvp_arrays(params, X, v, config)


def ihvp_arrays(params: ModelParams, X: np.ndarray, v: np.ndarray, config: IhvpConfig) -> np.ndarray:
    if v.shape != (params.num_params,):
        raise ValidationError(f"vector has length {v.size}, expected {params.num_params}")
    if config.method == "exact":
        H = hessian_arrays(params, X)
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(H), v)
    if config.method == "cg":
        return _cg_solve(params, X, v, config.cg)
    rng = np.random.default_rng(config.seed)
    runs = [_lissa_run(params, X, v, config.lissa, rng) for _ in range(config.lissa.repeats)]
    return np.mean(runs, axis=0)


def _cg_solve(params: ModelParams, X: np.ndarray, b: np.ndarray, cfg: CgConfig) -> np.ndarray:
    def matvec(u: np.ndarray) -> np.ndarray:
        return hvp_arrays(params, X, None, u) + cfg.damping * u

    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return x
    for _ in range(cfg.max_iters):
        if np.sqrt(rr) / b_norm <= cfg.residual_tol:
            return x
        Ap = matvec(p)
        alpha = rr / float(p @ Ap)
        x = x + alpha * p
        r = r - alpha * Ap
        rr_new = float(r @ r)
        p = r + (rr_new / rr) * p
        rr = rr_new
    residual = float(np.sqrt(rr) / b_norm)
    if residual > cfg.residual_tol:
        warnings.warn(
            CgConvergenceWarning(
                f"cg stopped at max_iters={cfg.max_iters} with relative residual {residual:.3e}",
                residual,
            )
        )
    return x


def _lissa_run(
    params: ModelParams, X: np.ndarray, v: np.ndarray, cfg: LissaConfig, rng: np.random.Generator
) -> np.ndarray:
    n = X.shape[0]
    batch = min(cfg.batch_size, n)
    r = v.copy()
    # a healthy recursion grows ||r|| toward its limit, so divergence is
    # detected on the step increments, which must shrink when contracting
    prev_step = np.inf
    growth_streak = 0
    for _ in range(cfg.depth):
        idx = rng.choice(n, size=batch, replace=False)
        hv = hvp_arrays(params, X[idx], None, r) + cfg.damping * r
        r_next = v + r - hv / cfg.scale
        step = float(np.linalg.norm(r_next - r))
        r = r_next
        if not np.isfinite(step):
            raise ApproximationError(
                f"lissa recursion produced non-finite values; increase scale (current {cfg.scale})"
            )
        growth_streak = growth_streak + 1 if step > prev_step else 0
        if growth_streak >= 10:
            raise ApproximationError(
                f"lissa recursion diverged for 10 consecutive steps; increase scale (current {cfg.scale})"
            )
        prev_step = step
    return r / cfg.scale


def suggest_lissa_scale(
    params: ModelParams,
    batch: Sequence[Instance] | np.ndarray,
    damping: float = 0.0,
    iters: int = 60,
    pad: float = 1.05,
) -> float:
    """Power-iteration estimate of the largest Hessian eigenvalue, padded.

    Any scale above lambda_max + damping makes the Neumann recursion
    contract; pad more when small mini-batches make the local curvature
    exceed the full-batch estimate.
    """
    X = batch if isinstance(batch, np.ndarray) else np.stack([i.features for i in batch])
    rng = np.random.default_rng(0)
    u = rng.standard_normal(params.num_params)
    u /= np.linalg.norm(u)
    lam = 1.0
    for _ in range(iters):
        w = hvp_arrays(params, X, None, u)
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            break
        u = w / lam
    return pad * (lam + damping)


# ---------------------------------------------------------------------------
# Scores and retrieval


def influence_score(
    params: ModelParams,
    train: Instance,
    target: Instance,
    ihvp_of_target_grad: np.ndarray,
    method: str = "exact",
    prefiltered: bool = False,
) -> InfluenceRecord:
    """score = -grad(target)^T H^{-1} grad(train); positive = harmful."""
    ihvp_of_target_grad = np.asarray(ihvp_of_target_grad, dtype=np.float64)
    if ihvp_of_target_grad.shape != (params.num_params,):
        raise ValidationError("ihvp vector does not match the parameter count")
    g_train = grad_arrays(params, train.features[None, :], np.array([train.label]))
    score = -float(ihvp_of_target_grad @ g_train)
    if not np.isfinite(score):
        raise ValidationError("non-finite influence score")
    return InfluenceRecord(
        train_id=train.id, target_id=target.id, score=score, method=method, prefiltered=prefiltered
    )


def prefilter_candidates(
    corpus: Corpus, target: Instance, candidate_split: str, config: PrefilterConfig
) -> list[str]:
    """The k_neighbors nearest candidates by L2 feature distance (brute force).

    Ascending distance, ties broken by id; exact at desk scale, no index.
    """
    ids = list(corpus.split_ids(candidate_split))
    if config.k_neighbors > len(ids):
        raise ValidationError(
            f"k_neighbors {config.k_neighbors} exceeds candidate count {len(ids)}"
        )
    X = corpus.features_of(ids)
    dist = np.linalg.norm(X - target.features, axis=1)
    order = sorted(range(len(ids)), key=lambda i: (dist[i], ids[i]))
    return [ids[i] for i in order[: config.k_neighbors]]


def _target_seed(base_seed: int, target_id: str) -> int:
    digest = hashlib.sha256(f"{base_seed}:{target_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class InfluenceScorer:
    """Amortized scorer for one (params, candidate split) pair.

    Candidate gradients and the dense factorization (exact method) are
    computed once; each target costs one gradient, one inverse-HVP, and a
    mat-vec over the candidates. Pure and safe to share across threads.
    """

    def __init__(
        self,
        params: ModelParams,
        corpus: Corpus,
        candidate_split: str,
        ihvp_config: IhvpConfig | None = None,
        prefilter_config: PrefilterConfig | None = None,
    ):
        self.params = params
        self.corpus = corpus
        self.candidate_split = candidate_split
        self.ihvp_config = ihvp_config or IhvpConfig()
        self.prefilter_config = prefilter_config or PrefilterConfig()
        self.candidate_ids = list(corpus.split_ids(candidate_split))
        if not self.candidate_ids:
            raise ValidationError(f"candidate split {candidate_split!r} is empty")
        self.X = corpus.features_of(self.candidate_ids)
        self.y = corpus.labels_of(self.candidate_ids)
        self.G = per_instance_grads(params, self.X, self.y)
        self._cho = None
        if self.ihvp_config.method == "exact":
            H = hessian_arrays(params, self.X)
            self._cho = scipy.linalg.cho_factor(H)

    def ihvp_of(self, v: np.ndarray, target_id: str = "") -> np.ndarray:
        if self.ihvp_config.method == "exact":
            return scipy.linalg.cho_solve(self._cho, v)
        cfg = self.ihvp_config
        if cfg.method == "lissa" and target_id:
            cfg = dataclasses.replace(cfg, seed=_target_seed(cfg.seed, target_id))
        return ihvp_arrays(self.params, self.X, v, cfg)

    def candidate_pool(self, target: Instance) -> list[str]:
        if self.prefilter_config.enabled:
            pool = prefilter_candidates(self.corpus, target, self.candidate_split, self.prefilter_config)
        else:
            pool = list(self.candidate_ids)
        return [i for i in pool if i != target.id]

    def scores_for(self, target: Instance, pool: Sequence[str] | None = None) -> dict[str, float]:
        """Signed scores for every candidate in the pool (one ihvp, reused)."""
        pool = list(pool) if pool is not None else self.candidate_pool(target)
        g_target = grad_arrays(self.params, target.features[None, :], np.array([target.label]))
        h = self.ihvp_of(g_target, target.id)
        index = {cid: k for k, cid in enumerate(self.candidate_ids)}
        rows = np.array([index[c] for c in pool], dtype=np.int64)
        scores = -(self.G[rows] @ h)
        return dict(zip(pool, (float(s) for s in scores)))

    def top_k(self, target: Instance, K: int, direction: str) -> list[InfluenceRecord]:
        if direction not in ("helpful", "harmful"):
            raise ValidationError(f"unknown direction {direction!r}")
        pool = self.candidate_pool(target)
        if K > len(pool):
            raise ValidationError(f"K={K} exceeds candidate count {len(pool)}")
        scores = self.scores_for(target, pool)
        reverse = direction == "harmful"
        ordered = sorted(pool, key=lambda c: ((-scores[c]) if reverse else scores[c], c))
        return [
            InfluenceRecord(
                train_id=c,
                target_id=target.id,
                score=scores[c],
                method=self.ihvp_config.method,
                prefiltered=self.prefilter_config.enabled,
            )
            for c in ordered[:K]
        ]


def top_influencers(
    params: ModelParams,
    corpus: Corpus,
    target: Instance,
    candidate_split: str,
    K: int,
    direction: str = "helpful",
    ihvp_config: IhvpConfig | None = None,
    prefilter_config: PrefilterConfig | None = None,
) -> list[InfluenceRecord]:
    """Exactly K influence records sorted by score (ascending for helpful)."""
    scorer = InfluenceScorer(params, corpus, candidate_split, ihvp_config, prefilter_config)
    return scorer.top_k(target, K, direction)


# ---------------------------------------------------------------------------
# Leave-one-out retraining oracle


def loo_oracle(
    corpus: Corpus, train_split: str, target: Instance, config: TrainConfig
) -> dict[str, float]:
    """Ground truth by retraining: loss(without i, target) - loss(full, target).

    Positive = removing i raised the target loss = i was helpful. This is the
    opposite sign of the influence score's harmfulness convention.
    """
    ids = corpus.split_ids(train_split)
    if len(ids) > LOO_CAP:
        raise CapacityError(f"LOO oracle capped at {LOO_CAP} instances (got {len(ids)})")
    X = corpus.features_of(ids)
    y = corpus.labels_of(ids)
    tx = target.features[None, :]
    ty = np.array([target.label])
    full, _ = fit_arrays(X, y, config, X, y, corpus.num_classes)
    base = loss_arrays(full, tx, ty)
    out: dict[str, float] = {}
    mask = np.ones(len(ids), dtype=bool)
    for k, iid in enumerate(ids):
        mask[k] = False
        # warm start from the full-data optimum: the objective is strictly
        # convex, so the retrained solution is initialization-independent
        held_out, _ = fit_arrays(
            X[mask], y[mask], config, X[mask], y[mask], corpus.num_classes, init=full
        )
        out[iid] = loss_arrays(held_out, tx, ty) - base
        mask[k] = True
    return out


# ---------------------------------------------------------------------------
# Influence dump files


def write_influence_dump(
    path: str | Path,
    records: Sequence[InfluenceRecord],
    ihvp_config: IhvpConfig,
    prefilter_config: PrefilterConfig,
    model_checksum: str,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "ihvp": ihvp_config.to_json(),
        "prefilter": prefilter_config.to_json(),
        "model_checksum": model_checksum,
    }
    with path.open("w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def read_influence_dump(path: str | Path) -> tuple[dict, list[InfluenceRecord]]:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    records = [InfluenceRecord(**json.loads(line)) for line in lines[1:] if line.strip()]
    return header, records
