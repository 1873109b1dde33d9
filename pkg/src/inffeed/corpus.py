"""Data model: instances, split management, file I/O, synthetic problems.

A :class:`Corpus` is an immutable value. Every mutating operation returns a
new corpus; label changes are recorded in an append-only audit log so that
re-annotation accounting stays exact.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import FormatError, ValidationError

PROVENANCES = ("human", "silver", "influence_vote", "random_flip", "oracle_fix", "ui_fix")


@dataclass(frozen=True)
class Instance:
    """One example: feature vector, working label, optional hidden gold label."""

    id: str
    features: np.ndarray
    label: int
    gold_label: int | None = None
    provenance: str = "human"

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        if self.provenance not in PROVENANCES:
            raise ValidationError(f"unknown provenance {self.provenance!r} for instance {self.id!r}")


@dataclass(frozen=True)
class AuditEvent:
    """One label change; the log is append-only and never rewritten."""

    instance_id: str
    old_label: int
    new_label: int
    provenance: str


@dataclass(frozen=True)
class Corpus:
    instances: tuple[Instance, ...]
    num_classes: int
    feature_dim: int
    splits: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    audit: tuple[AuditEvent, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "splits", dict(self.splits))
        seen: set[str] = set()
        for inst in self.instances:
            if inst.id in seen:
                raise ValidationError(f"duplicate instance id {inst.id!r}")
            seen.add(inst.id)
            if inst.features.shape != (self.feature_dim,):
                raise FormatError(
                    f"instance {inst.id!r} has {inst.features.size} features, expected {self.feature_dim}"
                )
            for name, value in (("label", inst.label), ("gold_label", inst.gold_label)):
                if value is not None and not 0 <= value < self.num_classes:
                    raise ValidationError(
                        f"instance {inst.id!r} {name} {value} outside [0, {self.num_classes})"
                    )
        assigned: set[str] = set()
        for split, ids in self.splits.items():
            for iid in ids:
                if iid not in seen:
                    raise ValidationError(f"split {split!r} references unknown id {iid!r}")
                if iid in assigned:
                    raise ValidationError(f"id {iid!r} assigned to more than one split")
                assigned.add(iid)
        if "T_PR" in self.splits and self.splits["T_PR"]:
            present = {self.by_id(i).label for i in self.splits["T_PR"]}
            missing = set(range(self.num_classes)) - present
            if missing:
                raise ValidationError(f"classes {sorted(missing)} absent from T_PR")

    def __len__(self) -> int:
        return len(self.instances)

    @cached_property
    def _index(self) -> dict[str, int]:
        return {inst.id: i for i, inst in enumerate(self.instances)}

    def by_id(self, instance_id: str) -> Instance:
        try:
            return self.instances[self._index[instance_id]]
        except KeyError:
            raise ValidationError(f"unknown instance id {instance_id!r}") from None

    def split_ids(self, split: str) -> tuple[str, ...]:
        if split not in self.splits:
            raise ValidationError(f"split {split!r} not defined (have {sorted(self.splits)})")
        return tuple(self.splits[split])

    def split_instances(self, split: str) -> tuple[Instance, ...]:
        return tuple(self.by_id(i) for i in self.split_ids(split))

    def merged_ids(self, *split_names: str) -> tuple[str, ...]:
        """Concatenate splits in the given order (e.g. the full training pool)."""
        out: list[str] = []
        for name in split_names:
            out.extend(self.split_ids(name))
        return tuple(out)

    def features_of(self, ids: Sequence[str]) -> np.ndarray:
        return np.stack([self.by_id(i).features for i in ids]) if ids else np.empty((0, self.feature_dim))

    def labels_of(self, ids: Sequence[str]) -> np.ndarray:
        return np.array([self.by_id(i).label for i in ids], dtype=np.int64)

    def gold_labels_of(self, ids: Sequence[str]) -> np.ndarray:
        gold = []
        for i in ids:
            g = self.by_id(i).gold_label
            if g is None:
                raise ValidationError(f"instance {i!r} has no gold label")
            gold.append(g)
        return np.array(gold, dtype=np.int64)

    def with_splits(self, splits: Mapping[str, Sequence[str]]) -> "Corpus":
        return replace(self, splits={k: tuple(v) for k, v in splits.items()})

    def with_labels(self, changes: Mapping[str, int], provenance: str) -> "Corpus":
        """Return a corpus with the given labels applied and the audit extended."""
        if provenance not in PROVENANCES:
            raise ValidationError(f"unknown provenance {provenance!r}")
        events = []
        new_instances = list(self.instances)
        for iid, new_label in changes.items():
            idx = self._index.get(iid)
            if idx is None:
                raise ValidationError(f"unknown instance id {iid!r}")
            inst = self.instances[idx]
            if not 0 <= new_label < self.num_classes:
                raise ValidationError(f"label {new_label} outside [0, {self.num_classes})")
            if new_label == inst.label:
                continue
            events.append(AuditEvent(iid, inst.label, new_label, provenance))
            new_instances[idx] = replace(inst, label=new_label, provenance=provenance)
        if not events:
            return self
        return replace(self, instances=tuple(new_instances), audit=self.audit + tuple(events))


@dataclass(frozen=True)
class SplitSpec:
    """Requested split sizes (counts or fractions of the corpus)."""

    sizes: Mapping[str, int] | None = None
    fractions: Mapping[str, float] | None = None
    stratified: bool = True
    seed: int = 0

    def resolve_sizes(self, n: int) -> dict[str, int]:
        if (self.sizes is None) == (self.fractions is None):
            raise ValidationError("exactly one of sizes or fractions must be given")
        if self.sizes is not None:
            sizes = {k: int(v) for k, v in self.sizes.items()}
        else:
            if sum(self.fractions.values()) > 1 + 1e-12:
                raise ValidationError("split fractions sum to more than 1")
            sizes = {k: int(math.floor(v * n)) for k, v in self.fractions.items()}
        if any(v < 0 for v in sizes.values()):
            raise ValidationError("split sizes must be non-negative")
        if sum(sizes.values()) > n:
            raise ValidationError(f"split sizes sum to {sum(sizes.values())} but corpus has {n} instances")
        return sizes


def make_splits(corpus: Corpus, spec: SplitSpec) -> Corpus:
    """Partition the corpus into disjoint named splits, optionally stratified."""
    sizes = spec.resolve_sizes(len(corpus))
    rng = np.random.default_rng(spec.seed)
    if not spec.stratified:
        order = rng.permutation(len(corpus))
        splits: dict[str, tuple[str, ...]] = {}
        cursor = 0
        for name, m in sizes.items():
            picked = order[cursor : cursor + m]
            splits[name] = tuple(corpus.instances[i].id for i in np.sort(picked))
            cursor += m
        return corpus.with_splits(splits)

    by_class: dict[int, list[int]] = {c: [] for c in range(corpus.num_classes)}
    for i, inst in enumerate(corpus.instances):
        by_class[inst.label].append(i)
    for c in by_class:
        idx = np.array(by_class[c], dtype=np.int64)
        by_class[c] = list(idx[rng.permutation(len(idx))])

    n = len(corpus)
    cursors = {c: 0 for c in by_class}
    splits = {}
    for name, m in sizes.items():
        counts = _proportional_counts(m, {c: len(v) - cursors[c] for c, v in by_class.items()})
        if name == "T_PR":
            _ensure_all_classes(counts, {c: len(v) - cursors[c] for c, v in by_class.items()})
        chosen: list[int] = []
        for c in sorted(by_class):
            take = counts[c]
            chosen.extend(by_class[c][cursors[c] : cursors[c] + take])
            cursors[c] += take
        splits[name] = tuple(corpus.instances[i].id for i in sorted(chosen))
    return corpus.with_splits(splits)


def _proportional_counts(m: int, avail: dict[int, int]) -> dict[int, int]:
    total = sum(avail.values())
    if m > total:
        raise ValidationError(f"requested split of {m} but only {total} instances remain")
    raw = {c: m * a / total if total else 0.0 for c, a in avail.items()}
    counts = {c: min(int(math.floor(r)), avail[c]) for c, r in raw.items()}
    short = m - sum(counts.values())
    # distribute the remainder by largest fractional part, ties by class index
    order = sorted(avail, key=lambda c: (-(raw[c] - math.floor(raw[c])), c))
    for c in order:
        if short == 0:
            break
        if counts[c] < avail[c]:
            counts[c] += 1
            short -= 1
    for c in sorted(avail):
        if short == 0:
            break
        take = min(short, avail[c] - counts[c])
        counts[c] += take
        short -= take
    return counts


def _ensure_all_classes(counts: dict[int, int], avail: dict[int, int]) -> None:
    for c in sorted(counts):
        if counts[c] == 0 and avail[c] > 0:
            donor = max(counts, key=lambda k: counts[k])
            if counts[donor] > 1:
                counts[donor] -= 1
                counts[c] += 1


def oversample(corpus: Corpus, split: str, target_size: int, seed: int) -> Corpus:
    """Pad a split to target_size by random selection with repetition.

    Duplicates are whole-instance copies under derived ids (``<id>#<k>``);
    the source instances are untouched.
    """
    ids = corpus.split_ids(split)
    if not ids:
        raise ValidationError(f"cannot oversample empty split {split!r}")
    if target_size < len(ids):
        raise ValidationError(f"target size {target_size} below current size {len(ids)}")
    if target_size == len(ids):
        return corpus
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(ids), size=target_size - len(ids), replace=True)
    existing = {inst.id for inst in corpus.instances}
    copy_counter: dict[str, int] = {}
    new_instances = list(corpus.instances)
    new_ids = list(ids)
    for p in picks:
        src = corpus.by_id(ids[int(p)])
        k = copy_counter.get(src.id, 0) + 1
        while f"{src.id}#{k}" in existing:
            k += 1
        copy_counter[src.id] = k
        dup_id = f"{src.id}#{k}"
        existing.add(dup_id)
        new_instances.append(replace(src, id=dup_id))
        new_ids.append(dup_id)
    splits = dict(corpus.splits)
    splits[split] = tuple(new_ids)
    return replace(corpus, instances=tuple(new_instances), splits=splits)


@dataclass(frozen=True)
class SynthConfig:
    """Gaussian-blob generator.

    Centers are mutually orthogonal when the dimension allows, else evenly
    spaced on a circle; adjacent centers sit exactly `separation` apart.
    A nonzero tail_fraction draws that share of each class from a widened
    component (noise * tail_scale), giving every blob a dense core plus a
    dispersed fringe, which is where classification difficulty lives.
    """

    num_classes: int = 3
    feature_dim: int = 2
    per_class: int | Sequence[int] = 100
    separation: float = 4.0
    noise: float | Sequence[float] = 1.0
    seed: int = 0
    tail_fraction: float | Sequence[float] = 0.0
    tail_scale: float = 3.0

    def class_counts(self) -> list[int]:
        return self._per_class_list("per_class", self.per_class, int)

    def class_noise(self) -> list[float]:
        return self._per_class_list("noise", self.noise, float)

    def class_tail_fraction(self) -> list[float]:
        return self._per_class_list("tail_fraction", self.tail_fraction, float)

    def _per_class_list(self, name, value, cast) -> list:
        if isinstance(value, (int, float)):
            return [cast(value)] * self.num_classes
        out = [cast(v) for v in value]
        if len(out) != self.num_classes:
            raise ValidationError(f"{name} list length must equal num_classes")
        return out


def synth_corpus(config: SynthConfig) -> Corpus:
    """Deterministic multiclass Gaussian blobs with gold_label == label."""
    if config.num_classes < 2:
        raise ValidationError("need at least 2 classes")
    if config.feature_dim < 2:
        raise ValidationError("need at least 2 feature dimensions")
    counts = config.class_counts()
    if any(c < 2 for c in counts):
        raise ValidationError("need at least 2 instances per class")
    rng = np.random.default_rng(config.seed)
    C, d = config.num_classes, config.feature_dim
    centers = np.zeros((C, d))
    if C <= d:
        # mutually orthogonal, pairwise equidistant centers
        for c in range(C):
            centers[c, c] = config.separation / math.sqrt(2.0)
    else:
        # adjacent centers exactly `separation` apart on a circle through
        # the first two coordinates
        radius = config.separation / (2.0 * math.sin(math.pi / C))
        for c in range(C):
            angle = 2.0 * math.pi * c / C
            centers[c, 0] = radius * math.cos(angle)
            centers[c, 1] = radius * math.sin(angle)
    centers -= centers.mean(axis=0)
    noise = config.class_noise()
    tails = config.class_tail_fraction()
    instances = []
    idx = 0
    for c in range(C):
        scales = np.full(counts[c], noise[c])
        if tails[c] > 0:
            in_tail = rng.random(counts[c]) < tails[c]
            scales[in_tail] *= config.tail_scale
        feats = centers[c] + scales[:, None] * rng.standard_normal((counts[c], d))
        for row in feats:
            instances.append(Instance(id=f"synth-{idx:05d}", features=row, label=c, gold_label=c))
            idx += 1
    return Corpus(instances=tuple(instances), num_classes=C, feature_dim=d)


def inject_label_noise(corpus: Corpus, split: str, rate: float, seed: int) -> Corpus:
    """Flip ``floor(rate * |split|)`` labels uniformly to one of the other classes."""
    if not 0.0 <= rate <= 1.0:
        raise ValidationError(f"noise rate {rate} outside [0, 1]")
    if corpus.num_classes < 2:
        raise ValidationError("label noise needs at least 2 classes")
    ids = corpus.split_ids(split)
    n_flip = int(math.floor(rate * len(ids)))
    if n_flip == 0:
        return corpus
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(ids), size=n_flip, replace=False)
    changes = {}
    for p in sorted(int(x) for x in chosen):
        inst = corpus.by_id(ids[p])
        r = int(rng.integers(0, corpus.num_classes - 1))
        changes[inst.id] = r if r < inst.label else r + 1
    return corpus.with_labels(changes, provenance="random_flip")


def inject_confusion_noise(
    corpus: Corpus, split: str, rate: float, seed: int, shift: int = 1
) -> Corpus:
    """Class-conditional label noise: flip floor(rate * |split|) labels c -> c+shift.

    Models systematic annotator confusion between adjacent categories, which
    (unlike uniform flips) biases a fitted classifier's decision boundaries.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValidationError(f"noise rate {rate} outside [0, 1]")
    if shift % corpus.num_classes == 0:
        raise ValidationError("shift must move labels to a different class")
    ids = corpus.split_ids(split)
    n_flip = int(math.floor(rate * len(ids)))
    if n_flip == 0:
        return corpus
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(ids), size=n_flip, replace=False)
    changes = {}
    for p in sorted(int(x) for x in chosen):
        inst = corpus.by_id(ids[p])
        changes[inst.id] = (inst.label + shift) % corpus.num_classes
    return corpus.with_labels(changes, provenance="random_flip")


def restore_gold(corpus: Corpus, split: str | None = None, provenance: str = "oracle_fix") -> Corpus:
    """Reset labels to gold_label (whole corpus or one split)."""
    ids = corpus.split_ids(split) if split else [inst.id for inst in corpus.instances]
    changes = {}
    for iid in ids:
        inst = corpus.by_id(iid)
        if inst.gold_label is not None and inst.gold_label != inst.label:
            changes[iid] = inst.gold_label
    return corpus.with_labels(changes, provenance=provenance)


# ---------------------------------------------------------------------------
# File I/O


def load_corpus(path: str | Path, format: str = "jsonl") -> Corpus:
    """Read a corpus file (no split assignments).

    JSONL records: ``{"id", "features", "label", "gold_label"?}`` with an
    optional leading ``{"meta": {"num_classes": C}}`` record. CSV columns:
    ``id,label,gold_label,f0..f{d-1}`` (gold_label may be empty).
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"corpus file not found: {path}")
    if format == "jsonl":
        records, meta = _read_jsonl(path)
    elif format == "csv":
        records, meta = _read_csv(path)
    else:
        raise ValidationError(f"unknown corpus format {format!r}")
    if not records:
        raise ValidationError("empty corpus")

    dim = len(records[0]["features"])
    instances = []
    for rec in records:
        if len(rec["features"]) != dim:
            raise FormatError(
                f"instance {rec['id']!r} has {len(rec['features'])} features, expected {dim}"
            )
        instances.append(
            Instance(
                id=str(rec["id"]),
                features=np.asarray(rec["features"], dtype=np.float64),
                label=int(rec["label"]),
                gold_label=None if rec.get("gold_label") is None else int(rec["gold_label"]),
                provenance=rec.get("provenance", "human"),
            )
        )
    labels = [i.label for i in instances] + [
        i.gold_label for i in instances if i.gold_label is not None
    ]
    num_classes = int(meta.get("num_classes", max(labels) + 1))
    return Corpus(instances=tuple(instances), num_classes=num_classes, feature_dim=dim)


def _read_jsonl(path: Path) -> tuple[list[dict], dict]:
    records, meta = [], {}
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc})") from None
            if "meta" in rec:
                meta.update(rec["meta"])
                continue
            for key in ("id", "features", "label"):
                if key not in rec:
                    raise FormatError(f"{path}:{lineno}: record missing {key!r}")
            records.append(rec)
    return records, meta


def _read_csv(path: Path) -> tuple[list[dict], dict]:
    records = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return [], {}
        feature_cols = [c for c in reader.fieldnames if c.startswith("f")]
        for row in reader:
            gold = row.get("gold_label", "")
            records.append(
                {
                    "id": row["id"],
                    "label": int(row["label"]),
                    "gold_label": int(gold) if gold not in ("", None) else None,
                    "features": [float(row[c]) for c in feature_cols],
                }
            )
    return records, {}


def save_corpus(corpus: Corpus, path: str | Path, format: str = "jsonl") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if format == "jsonl":
        with path.open("w") as fh:
            fh.write(json.dumps({"meta": {"num_classes": corpus.num_classes}}) + "\n")
            for inst in corpus.instances:
                rec = {"id": inst.id, "features": [float(x) for x in inst.features], "label": inst.label}
                if inst.gold_label is not None:
                    rec["gold_label"] = inst.gold_label
                if inst.provenance != "human":
                    rec["provenance"] = inst.provenance
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    elif format == "csv":
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "label", "gold_label"] + [f"f{j}" for j in range(corpus.feature_dim)])
            for inst in corpus.instances:
                gold = "" if inst.gold_label is None else inst.gold_label
                writer.writerow([inst.id, inst.label, gold] + [repr(float(x)) for x in inst.features])
    else:
        raise ValidationError(f"unknown corpus format {format!r}")


def save_splits(corpus: Corpus, path: str | Path, seed: int | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"splits": {k: list(v) for k, v in corpus.splits.items()}}
    if seed is not None:
        payload["seed"] = seed
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_splits(corpus: Corpus, path: str | Path) -> Corpus:
    payload = json.loads(Path(path).read_text())
    return corpus.with_splits({k: tuple(v) for k, v in payload["splits"].items()})
