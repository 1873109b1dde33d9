"""Annotation-cost-reduction loop.

A model trained on the human-labeled split (T_X) silver-labels the extension
split (T_Y). The loop then repeats: train a fresh model on T_Y, flag the
training points that harm validation predictions (positive influence scores
within each validation point's top-K), route only those to an annotator,
apply the decisions, and stop once an iteration flags nothing new. A flagged
id is reviewed at most once, which guarantees termination.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

from .corpus import Corpus, Instance
from .errors import ValidationError
from .influence import IhvpConfig, InfluenceScorer, PrefilterConfig
from .metrics import EvalResult, evaluate
from .model import ModelParams, TrainConfig, fit_arrays, predict
from .feedback import predictions_for


@dataclass(frozen=True)
class TriageConfig:
    K: int = 5
    threshold: float = 0.0
    max_iterations: int = 10
    annotator: str = "oracle"  # or "human"
    refit: str = "fresh"  # retrain from scratch each iteration; "finetune" reuses the last model
    silver_split: str | None = "T_X"  # None when T_Y arrives already silver-labeled
    train_split: str = "T_Y"
    val_split: str = "V"
    test_split: str = "T_S"
    train: TrainConfig = field(default_factory=TrainConfig)
    ihvp: IhvpConfig = field(default_factory=IhvpConfig)
    prefilter: PrefilterConfig = field(default_factory=PrefilterConfig)
    seed: int = 0
    evidence_limit: int = 5

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be at least 1")
        if self.K < 1:
            raise ValidationError("K must be at least 1")
        if self.annotator not in ("oracle", "human"):
            raise ValidationError(f"unknown annotator {self.annotator!r}")
        if self.refit not in ("fresh", "finetune"):
            raise ValidationError(f"unknown refit mode {self.refit!r}")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class AnnotationRequest:
    id: str
    features_digest: str
    current_label: int
    evidence: tuple[dict, ...]  # [{"val_id": ..., "score": ...}] most harmful first
    iteration: int

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "features_digest": self.features_digest,
            "current_label": self.current_label,
            "evidence": list(self.evidence),
            "iteration": self.iteration,
        }


@dataclass(frozen=True)
class AnnotationDecision:
    id: str
    action: str  # "keep" or "set"
    label: int | None = None
    annotator: str = "oracle"

    def __post_init__(self):
        if self.action not in ("keep", "set"):
            raise ValidationError(f"unknown decision action {self.action!r}")
        if self.action == "set" and self.label is None:
            raise ValidationError("set decision needs a label")

    def to_json(self) -> dict:
        return {"id": self.id, "action": self.action, "label": self.label, "annotator": self.annotator}


@dataclass
class TriageReport:
    iterations: list[dict]
    converged: bool
    re_annotated: int
    reviewed: int
    comparison: dict[str, EvalResult]
    config: dict
    wall_time_s: float = 0.0

    def to_json(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "re_annotated": self.re_annotated,
            "reviewed": self.reviewed,
            "comparison": {k: v.to_json() for k, v in self.comparison.items()},
            "config": self.config,
            "wall_time_s": self.wall_time_s,
        }

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


def _features_digest(inst: Instance) -> str:
    return hashlib.sha256(inst.features.tobytes()).hexdigest()[:16]


def silver_label(corpus: Corpus, model: ModelParams, split: str) -> Corpus:
    """Set every label in the split to the model's argmax prediction.

    Gold labels are untouched; provenance becomes "silver"; actual label
    changes are appended to the audit log.
    """
    if model.feature_dim != corpus.feature_dim or model.num_classes != corpus.num_classes:
        raise ValidationError("model does not match the corpus dimensions")
    ids = corpus.split_ids(split)
    preds = predict(model, corpus.features_of(ids))
    from .corpus import AuditEvent

    new_instances = list(corpus.instances)
    events = []
    index = {inst.id: k for k, inst in enumerate(corpus.instances)}
    for iid, pred in zip(ids, preds):
        k = index[iid]
        inst = corpus.instances[k]
        if inst.label != int(pred):
            events.append(AuditEvent(iid, inst.label, int(pred), "silver"))
        new_instances[k] = dataclasses.replace(inst, label=int(pred), provenance="silver")
    return dataclasses.replace(
        corpus, instances=tuple(new_instances), audit=corpus.audit + tuple(events)
    )


def flag_harmful(
    corpus: Corpus,
    model: ModelParams,
    train_split: str,
    val_split: str,
    config: TriageConfig,
    reviewed: frozenset[str] = frozenset(),
) -> tuple[list[str], dict[str, list[dict]]]:
    """Union over validation points of top-K influencers with score > threshold.

    Returns the flagged ids (sorted) and, per flagged id, the validation
    points it harmed with the scores, most harmful first.
    """
    scorer = InfluenceScorer(model, corpus, train_split, config.ihvp, config.prefilter)
    evidence: dict[str, list[dict]] = {}
    for vid in corpus.split_ids(val_split):
        target = corpus.by_id(vid)
        pool = scorer.candidate_pool(target)
        k = min(config.K, len(pool))
        if k == 0:
            continue
        for rec in scorer.top_k(target, k, "harmful"):
            if rec.score > config.threshold and rec.train_id not in reviewed:
                evidence.setdefault(rec.train_id, []).append({"val_id": vid, "score": rec.score})
    for tid in evidence:
        evidence[tid].sort(key=lambda e: (-e["score"], e["val_id"]))
    return sorted(evidence), evidence


def oracle_annotator(request: AnnotationRequest, corpus: Corpus) -> AnnotationDecision:
    """Simulated annotator: answer with the hidden gold label."""
    inst = corpus.by_id(request.id)
    if inst.gold_label is None:
        raise ValidationError(f"instance {request.id!r} has no gold label for the oracle")
    if inst.gold_label == inst.label:
        return AnnotationDecision(id=request.id, action="keep", annotator="oracle")
    return AnnotationDecision(id=request.id, action="set", label=inst.gold_label, annotator="oracle")


class TriageSession:
    """Stateful driver for the flag-review-retrain loop.

    One instance serves both the oracle runner and the HTTP service; all
    mutations go through submit_decision/advance so the accounting and the
    persisted loop state stay consistent.
    """

    def __init__(self, corpus: Corpus, config: TriageConfig):
        self.config = config
        self.corpus = corpus
        self.iteration = 0
        self.converged = False
        self.reviewed: set[str] = set()
        self.outstanding: dict[str, AnnotationRequest] = {}
        self.decisions: list[AnnotationDecision] = []
        self._pending: dict[str, AnnotationDecision] = {}
        self.per_iteration: list[dict] = []
        self.silver_snapshot: dict[str, int] = {}
        self.model: ModelParams | None = None
        self._started = False
        self._t0 = time.perf_counter()

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> None:
        if self._started:
            return
        self._started = True
        if self.config.silver_split is not None:
            base_model, _ = self._fit(self.corpus, self.config.silver_split)
            self.corpus = silver_label(self.corpus, base_model, self.config.train_split)
        self.silver_snapshot = {
            iid: self.corpus.by_id(iid).label for iid in self.corpus.split_ids(self.config.train_split)
        }
        self._next_iteration()

    def advance(self) -> None:
        """Apply the collected decisions and run the next iteration."""
        if not self._started:
            raise ValidationError("session not started")
        if self.converged:
            return
        if self.outstanding:
            raise ValidationError(f"{len(self.outstanding)} annotation requests still outstanding")
        self._apply_pending()
        if self.iteration >= self.config.max_iterations:
            return
        self._next_iteration()

    def submit_decision(self, decision: AnnotationDecision) -> None:
        if decision.id not in self.outstanding:
            if decision.id in self._pending or any(d.id == decision.id for d in self.decisions):
                raise ValidationError(f"decision for {decision.id!r} already submitted")
            raise KeyError(decision.id)
        if decision.action == "set" and not 0 <= decision.label < self.corpus.num_classes:
            raise ValidationError(f"label {decision.label} outside [0, {self.corpus.num_classes})")
        self._pending[decision.id] = decision
        self.reviewed.add(decision.id)
        del self.outstanding[decision.id]

    def outstanding_requests(self) -> list[AnnotationRequest]:
        return [self.outstanding[k] for k in sorted(self.outstanding)]

    # -- internals ----------------------------------------------------------

    def _fit(self, corpus: Corpus, split: str, init: ModelParams | None = None):
        ids = corpus.split_ids(split)
        val_ids = corpus.split_ids(self.config.val_split)
        return fit_arrays(
            corpus.features_of(ids),
            corpus.labels_of(ids),
            self.config.train,
            corpus.features_of(val_ids),
            corpus.labels_of(val_ids),
            corpus.num_classes,
            init=init,
        )

    def _apply_pending(self) -> None:
        changes = {}
        for decision in (self._pending[k] for k in sorted(self._pending)):
            if decision.action == "set":
                changes[decision.id] = int(decision.label)
        provenance = "oracle_fix" if self.config.annotator == "oracle" else "ui_fix"
        before = {iid: self.corpus.by_id(iid).label for iid in changes}
        self.corpus = self.corpus.with_labels(changes, provenance=provenance)
        changed = sorted(iid for iid in changes if before[iid] != changes[iid])
        if self.per_iteration:
            entry = self.per_iteration[-1]
            entry["reviewed"] = sorted(self._pending)
            entry["changed"] = changed
        self.decisions.extend(self._pending[k] for k in sorted(self._pending))
        self._pending = {}

    def _next_iteration(self) -> None:
        self.iteration += 1
        init = self.model if (self.config.refit == "finetune" and self.model is not None) else None
        self.model, _ = self._fit(self.corpus, self.config.train_split, init=init)
        flagged, evidence = flag_harmful(
            self.corpus,
            self.model,
            self.config.train_split,
            self.config.val_split,
            self.config,
            reviewed=frozenset(self.reviewed),
        )
        self.per_iteration.append({"iteration": self.iteration, "flagged": flagged, "reviewed": [], "changed": []})
        if not flagged:
            self.converged = True
            return
        for tid in flagged:
            inst = self.corpus.by_id(tid)
            self.outstanding[tid] = AnnotationRequest(
                id=tid,
                features_digest=_features_digest(inst),
                current_label=inst.label,
                evidence=tuple(evidence[tid][: self.config.evidence_limit]),
                iteration=self.iteration,
            )

    # -- outputs ------------------------------------------------------------

    def status(self) -> dict:
        return {
            "started": self._started,
            "iteration": self.iteration,
            "max_iterations": self.config.max_iterations,
            "outstanding": len(self.outstanding),
            "reviewed": len(self.reviewed),
            "re_annotated": self._re_annotated(),
            "converged": self.converged,
            "num_classes": self.corpus.num_classes,
        }

    def _re_annotated(self) -> int:
        return sum(len(entry["changed"]) for entry in self.per_iteration)

    def report(self) -> TriageReport:
        """Full accounting plus the silver/triaged/gold three-way comparison."""
        comparison: dict[str, EvalResult] = {}
        variants = {
            "silver": self.corpus.with_labels(self.silver_snapshot, provenance="silver"),
            "triaged": self.corpus,
            "gold": self.corpus.with_labels(
                {
                    iid: self.corpus.by_id(iid).gold_label
                    for iid in self.corpus.split_ids(self.config.train_split)
                    if self.corpus.by_id(iid).gold_label is not None
                },
                provenance="oracle_fix",
            ),
        }
        for name, variant in variants.items():
            params, _ = self._fit(variant, self.config.train_split)
            comparison[name] = evaluate(
                predictions_for(params, variant, self.config.test_split),
                variant,
                self.config.test_split,
            )
        return TriageReport(
            iterations=self.per_iteration,
            converged=self.converged,
            re_annotated=self._re_annotated(),
            reviewed=len(self.reviewed),
            comparison=comparison,
            config=self.config.to_json(),
            wall_time_s=time.perf_counter() - self._t0,
        )

    # -- persistence --------------------------------------------------------

    def to_state(self) -> dict:
        train_ids = self.corpus.split_ids(self.config.train_split)
        return {
            "started": self._started,
            "iteration": self.iteration,
            "converged": self.converged,
            "reviewed": sorted(self.reviewed),
            "outstanding": [self.outstanding[k].to_json() for k in sorted(self.outstanding)],
            "pending": [self._pending[k].to_json() for k in sorted(self._pending)],
            "decisions": [d.to_json() for d in self.decisions],
            "per_iteration": self.per_iteration,
            "silver_snapshot": self.silver_snapshot,
            "labels": {iid: self.corpus.by_id(iid).label for iid in train_ids},
            "provenance": {iid: self.corpus.by_id(iid).provenance for iid in train_ids},
            "seed": self.config.seed,
        }

    def save_state(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_state(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def resume(cls, corpus: Corpus, config: TriageConfig, state: Mapping) -> "TriageSession":
        """Rebuild a suspended session from the loop-state file.

        The corpus argument is the original (pre-silver) corpus; recorded
        labels and provenance are replayed onto it.
        """
        session = cls(corpus, config)
        session._started = bool(state["started"])
        session.iteration = int(state["iteration"])
        session.converged = bool(state["converged"])
        session.reviewed = set(state["reviewed"])
        session.per_iteration = list(state["per_iteration"])
        session.silver_snapshot = {k: int(v) for k, v in state["silver_snapshot"].items()}
        session.decisions = [AnnotationDecision(**d) for d in state["decisions"]]
        session._pending = {d["id"]: AnnotationDecision(**d) for d in state["pending"]}
        session.outstanding = {
            r["id"]: AnnotationRequest(
                id=r["id"],
                features_digest=r["features_digest"],
                current_label=r["current_label"],
                evidence=tuple(r["evidence"]),
                iteration=r["iteration"],
            )
            for r in state["outstanding"]
        }
        # replay recorded labels onto the original corpus
        new_instances = list(corpus.instances)
        index = {inst.id: k for k, inst in enumerate(corpus.instances)}
        for iid, label in state["labels"].items():
            inst = corpus.instances[index[iid]]
            new_instances[index[iid]] = dataclasses.replace(
                inst, label=int(label), provenance=state["provenance"][iid]
            )
        session.corpus = dataclasses.replace(corpus, instances=tuple(new_instances))
        if session._started and session.model is None and not session.converged:
            session.model, _ = session._fit(session.corpus, config.train_split)
        return session

    @classmethod
    def load_state(cls, corpus: Corpus, config: TriageConfig, path: str | Path) -> "TriageSession":
        return cls.resume(corpus, config, json.loads(Path(path).read_text()))


def run_triage_loop(
    corpus: Corpus,
    config: TriageConfig,
    annotator: Callable[[AnnotationRequest, Corpus], AnnotationDecision] | None = None,
) -> TriageReport:
    """Drive the loop with a non-blocking annotator (default: the gold oracle)."""
    if annotator is None:
        if config.annotator != "oracle":
            raise ValidationError("human annotation requires the serve loop, not run_triage_loop")
        annotator = oracle_annotator
    session = TriageSession(corpus, config)
    session.start()
    while not session.converged and session.iteration <= config.max_iterations:
        if not session.outstanding:
            break
        for request in session.outstanding_requests():
            session.submit_decision(annotator(request, session.corpus))
        session.advance()
    return session.report()
