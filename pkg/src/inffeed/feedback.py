"""Label-feedback pipelines.

System 1 trains on the whole training pool. System 2 trains on the
influence-source part (T_PR), re-votes each fine-tuning instance's label
(T_CR) from its top-K helpful influencers, fine-tunes on the revised set,
and selects on validation loss. Two ablations bracket the comparison:
random label flipping and fine-tuning without any voting.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .corpus import Corpus, inject_label_noise
from .errors import ValidationError
from .influence import IhvpConfig, InfluenceRecord, InfluenceScorer, PrefilterConfig
from .metrics import EvalResult, evaluate
from .model import ModelParams, TrainConfig, TrainReport, fine_tune, fit_arrays, predict


@dataclass(frozen=True)
class VoteConfig:
    K: int = 5
    rule: str = "majority"  # or "weighted"
    min_margin: float = 0.0
    direction: str = "helpful"

    def __post_init__(self):
        if self.K < 1:
            raise ValidationError("K must be at least 1")
        if self.rule not in ("majority", "weighted"):
            raise ValidationError(f"unknown vote rule {self.rule!r}")
        if not 0.0 <= self.min_margin < 1.0:
            raise ValidationError("min_margin must lie in [0, 1)")


@dataclass(frozen=True)
class RelabelOutcome:
    target_id: str
    old_label: int
    new_label: int
    vote_tally: Mapping[int, float]
    changed: bool
    rule: str
    margin: float

    def to_json(self) -> dict:
        return {
            "target_id": self.target_id,
            "old_label": self.old_label,
            "new_label": self.new_label,
            "vote_tally": {str(k): v for k, v in sorted(self.vote_tally.items())},
            "changed": self.changed,
            "rule": self.rule,
            "margin": self.margin,
        }


def vote(
    records: Sequence[InfluenceRecord],
    labels: Mapping[str, int],
    config: VoteConfig,
    old_label: int,
) -> RelabelOutcome:
    """Majority or score-weighted vote over one target's influencers.

    The winner must beat the runner-up by min_margin of the total weight;
    ties keep the old label.
    """
    if not records:
        raise ValidationError("vote needs at least one influence record")
    targets = {r.target_id for r in records}
    if len(targets) != 1:
        raise ValidationError(f"vote records target multiple instances: {sorted(targets)}")
    tally: dict[int, float] = {}
    for rec in records:
        if rec.train_id not in labels:
            raise ValidationError(f"no label for influencer {rec.train_id!r}")
        weight = 1.0 if config.rule == "majority" else abs(rec.score)
        tally[labels[rec.train_id]] = tally.get(labels[rec.train_id], 0.0) + weight
    total = sum(tally.values())
    ranked = sorted(tally.items(), key=lambda kv: (-kv[1], kv[0]))
    winner, w_win = ranked[0]
    w_runner = ranked[1][1] if len(ranked) > 1 else 0.0
    margin = (w_win - w_runner) / total if total > 0 else 0.0
    fires = margin > 0 and margin >= config.min_margin
    new_label = winner if fires else old_label
    return RelabelOutcome(
        target_id=records[0].target_id,
        old_label=old_label,
        new_label=new_label,
        vote_tally=dict(tally),
        changed=new_label != old_label,
        rule=config.rule,
        margin=margin,
    )


@dataclass
class PipelineReport:
    system: str
    eval: EvalResult
    relabels: list[RelabelOutcome] = field(default_factory=list)
    curves: dict[str, dict] = field(default_factory=dict)
    seeds: dict[str, int] = field(default_factory=dict)
    configs: dict[str, dict] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    wall_time_s: float = 0.0

    @property
    def macro_f1(self) -> float:
        return self.eval.macro_f1

    @property
    def accuracy(self) -> float:
        return self.eval.accuracy

    def to_json(self) -> dict:
        return {
            "system": self.system,
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
            "eval": self.eval.to_json(),
            "relabel_count": len(self.relabels),
            "relabels": [r.to_json() for r in self.relabels],
            "curves": self.curves,
            "seeds": self.seeds,
            "configs": self.configs,
            "warnings": self.warnings,
            "wall_time_s": self.wall_time_s,
        }

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    def save_relabel_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["target_id", "old_label", "new_label", "rule", "margin"])
            for r in self.relabels:
                writer.writerow([r.target_id, r.old_label, r.new_label, r.rule, repr(r.margin)])


# ---------------------------------------------------------------------------
# Pipelines


def _training_pool(corpus: Corpus) -> tuple[str, ...]:
    if "T_R" in corpus.splits:
        return corpus.split_ids("T_R")
    return corpus.merged_ids("T_PR", "T_CR")


def _fit_on_ids(
    corpus: Corpus, ids: Sequence[str], config: TrainConfig, validation: str
) -> tuple[ModelParams, TrainReport]:
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


def predictions_for(params: ModelParams, corpus: Corpus, split: str) -> dict[str, int]:
    ids = corpus.split_ids(split)
    preds = predict(params, corpus.features_of(ids))
    return {iid: int(p) for iid, p in zip(ids, preds)}


def run_system1(
    corpus: Corpus,
    train_config: TrainConfig,
    validation: str = "V",
    test: str = "T_S",
) -> PipelineReport:
    """Vanilla pipeline: train on the merged pool, select on V, score on T_S."""
    t0 = time.perf_counter()
    pool = _training_pool(corpus)
    params, report = _fit_on_ids(corpus, pool, train_config, validation)
    result = evaluate(predictions_for(params, corpus, test), corpus, test)
    return PipelineReport(
        system="system1",
        eval=result,
        curves={"train": report.to_json()},
        seeds={"train": train_config.seed},
        configs={"train": _cfg(train_config)},
        wall_time_s=time.perf_counter() - t0,
    )


def run_system2(
    corpus: Corpus,
    train_config: TrainConfig,
    vote_config: VoteConfig,
    ihvp_config: IhvpConfig | None = None,
    prefilter_config: PrefilterConfig | None = None,
    finetune_config: TrainConfig | None = None,
    validation: str = "V",
    test: str = "T_S",
) -> tuple[PipelineReport, ModelParams]:
    """Influence-feedback pipeline.

    Train on T_PR; for each T_CR instance vote a label from its top-K
    helpful T_PR influencers; fine-tune on the revised T_CR; select on V;
    score on T_S. Returns the report and the final model.
    """
    t0 = time.perf_counter()
    ihvp_config = ihvp_config or IhvpConfig()
    prefilter_config = prefilter_config or PrefilterConfig()
    theta_a, report_a = _fit_on_ids(corpus, corpus.split_ids("T_PR"), train_config, validation)

    scorer = InfluenceScorer(theta_a, corpus, "T_PR", ihvp_config, prefilter_config)
    labels = {iid: corpus.by_id(iid).label for iid in corpus.split_ids("T_PR")}
    outcomes: list[RelabelOutcome] = []
    warnings: list[str] = []
    for tid in corpus.split_ids("T_CR"):
        target = corpus.by_id(tid)
        pool = scorer.candidate_pool(target)
        k = vote_config.K
        if k > len(pool):
            warnings.append(f"target {tid}: K clamped from {k} to {len(pool)}")
            k = len(pool)
        records = scorer.top_k(target, k, vote_config.direction)
        outcomes.append(vote(records, labels, vote_config, old_label=target.label))

    changes = {o.target_id: o.new_label for o in outcomes if o.changed}
    revised = corpus.with_labels(changes, provenance="influence_vote")
    ft_config = finetune_config or train_config
    theta_b, report_b = fine_tune(theta_a, revised, "T_CR", ft_config, validation)
    result = evaluate(predictions_for(theta_b, revised, test), revised, test)
    report = PipelineReport(
        system="system2",
        eval=result,
        relabels=[o for o in outcomes if o.changed],
        curves={"train": report_a.to_json(), "finetune": report_b.to_json()},
        seeds={"train": train_config.seed, "ihvp": ihvp_config.seed},
        configs={
            "train": _cfg(train_config),
            "finetune": _cfg(ft_config),
            "vote": _cfg(vote_config),
            "ihvp": ihvp_config.to_json(),
            "prefilter": prefilter_config.to_json(),
        },
        warnings=warnings,
        wall_time_s=time.perf_counter() - t0,
    )
    return report, theta_b


def run_random_flip_ablation(
    corpus: Corpus,
    train_config: TrainConfig,
    rate: float,
    seed: int,
    validation: str = "V",
    test: str = "T_S",
) -> PipelineReport:
    """Flip a random fraction of the merged pool's labels, then System 1."""
    pool = _training_pool(corpus)
    merged = {
        name: ids for name, ids in corpus.splits.items() if name not in ("T_PR", "T_CR", "T_R")
    }
    merged["T_R"] = pool
    flipped = inject_label_noise(corpus.with_splits(merged), "T_R", rate, seed)
    report = run_system1(flipped, train_config, validation, test)
    report.system = "random_flip"
    report.seeds["flip"] = seed
    report.configs["flip_rate"] = {"rate": rate}
    return report


def run_vanilla_finetune_ablation(
    corpus: Corpus,
    train_config: TrainConfig,
    finetune_config: TrainConfig | None = None,
    validation: str = "V",
    test: str = "T_S",
) -> PipelineReport:
    """System 2 without the voting step: fine-tune on T_CR as-is."""
    t0 = time.perf_counter()
    theta_a, report_a = _fit_on_ids(corpus, corpus.split_ids("T_PR"), train_config, validation)
    ft_config = finetune_config or train_config
    theta_b, report_b = fine_tune(theta_a, corpus, "T_CR", ft_config, validation)
    result = evaluate(predictions_for(theta_b, corpus, test), corpus, test)
    return PipelineReport(
        system="vanilla_finetune",
        eval=result,
        curves={"train": report_a.to_json(), "finetune": report_b.to_json()},
        seeds={"train": train_config.seed},
        configs={"train": _cfg(train_config), "finetune": _cfg(ft_config)},
        wall_time_s=time.perf_counter() - t0,
    )


def _cfg(obj) -> dict:
    import dataclasses

    return dataclasses.asdict(obj)
