import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import inffeed as inf
from inffeed.corpus import inject_confusion_noise
from inffeed.errors import FormatError, ValidationError


def write_jsonl(path, records, meta=None):
    with path.open("w") as fh:
        if meta is not None:
            fh.write(json.dumps({"meta": meta}) + "\n")
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


class TestLoadCorpus:
    def test_basic_jsonl(self, tmp_path):
        p = tmp_path / "c.jsonl"
        write_jsonl(
            p,
            [
                {"id": "a", "features": [0.0, 1.0], "label": 0},
                {"id": "b", "features": [1.0, 0.0], "label": 1, "gold_label": 1},
                {"id": "c", "features": [0.5, 0.5], "label": 1},
            ],
        )
        c = inf.load_corpus(p)
        assert len(c) == 3 and c.num_classes == 2 and c.feature_dim == 2
        assert c.by_id("b").gold_label == 1
        assert c.by_id("a").gold_label is None

    def test_meta_record_sets_num_classes(self, tmp_path):
        p = tmp_path / "c.jsonl"
        write_jsonl(p, [{"id": "a", "features": [0.0], "label": 0}], meta={"num_classes": 4})
        # meta must widen num_classes; d=1 corpora are allowed on load
        assert inf.load_corpus(p).num_classes == 4

    def test_ragged_features_name_offender(self, tmp_path):
        p = tmp_path / "c.jsonl"
        write_jsonl(
            p,
            [
                {"id": "a", "features": [0.0, 1.0], "label": 0},
                {"id": "bad", "features": [0.0, 1.0, 2.0], "label": 0},
            ],
        )
        with pytest.raises(FormatError, match="bad"):
            inf.load_corpus(p)

    def test_duplicate_id(self, tmp_path):
        p = tmp_path / "c.jsonl"
        write_jsonl(
            p,
            [
                {"id": "a", "features": [0.0], "label": 0},
                {"id": "a", "features": [1.0], "label": 0},
            ],
        )
        with pytest.raises(ValidationError, match="duplicate"):
            inf.load_corpus(p)

    def test_label_out_of_range(self, tmp_path):
        p = tmp_path / "c.jsonl"
        write_jsonl(p, [{"id": "a", "features": [0.0], "label": 5}], meta={"num_classes": 2})
        with pytest.raises(ValidationError):
            inf.load_corpus(p)

    def test_empty_file(self, tmp_path):
        p = tmp_path / "c.jsonl"
        p.write_text("")
        with pytest.raises(ValidationError, match="empty corpus"):
            inf.load_corpus(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ValidationError, match="not found"):
            inf.load_corpus(tmp_path / "nope.jsonl")

    def test_jsonl_round_trip(self, tmp_path):
        c = inf.synth_corpus(inf.SynthConfig(num_classes=3, feature_dim=4, per_class=5, seed=3))
        p = tmp_path / "c.jsonl"
        inf.save_corpus(c, p)
        back = inf.load_corpus(p)
        assert len(back) == len(c) and back.num_classes == c.num_classes
        for inst in c.instances:
            np.testing.assert_array_equal(back.by_id(inst.id).features, inst.features)
            assert back.by_id(inst.id).label == inst.label
            assert back.by_id(inst.id).gold_label == inst.gold_label

    def test_csv_round_trip(self, tmp_path):
        c = inf.synth_corpus(inf.SynthConfig(num_classes=2, feature_dim=3, per_class=4, seed=1))
        p = tmp_path / "c.csv"
        inf.save_corpus(c, p, format="csv")
        back = inf.load_corpus(p, format="csv")
        for inst in c.instances:
            np.testing.assert_allclose(back.by_id(inst.id).features, inst.features)

    def test_csv_empty_gold_label(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("id,label,gold_label,f0,f1\na,0,,0.0,1.0\nb,1,1,1.0,0.0\n")
        c = inf.load_corpus(p, format="csv")
        assert c.by_id("a").gold_label is None
        assert c.by_id("b").gold_label == 1


class TestSplits:
    def test_paper_sizes(self):
        c = inf.synth_corpus(inf.SynthConfig(num_classes=2, feature_dim=2, per_class=1250, seed=0))
        spec = inf.SplitSpec(sizes={"T_PR": 1000, "T_CR": 800, "V": 200, "T_S": 500}, seed=0)
        c = inf.make_splits(c, spec)
        assert {k: len(v) for k, v in c.splits.items()} == {
            "T_PR": 1000,
            "T_CR": 800,
            "V": 200,
            "T_S": 500,
        }
        all_ids = [i for ids in c.splits.values() for i in ids]
        assert len(all_ids) == len(set(all_ids))

    def test_deterministic(self):
        c = inf.synth_corpus(inf.SynthConfig(per_class=50, seed=2))
        spec = inf.SplitSpec(sizes={"A": 60, "B": 40}, seed=9)
        assert inf.make_splits(c, spec).splits == inf.make_splits(c, spec).splits

    def test_stratified_balance(self):
        c = inf.synth_corpus(inf.SynthConfig(num_classes=2, feature_dim=2, per_class=50, seed=0))
        c = inf.make_splits(c, inf.SplitSpec(sizes={"A": 40, "B": 30}, stratified=True, seed=0))
        for name in ("A", "B"):
            labels = c.labels_of(c.split_ids(name))
            assert abs((labels == 0).sum() - (labels == 1).sum()) <= 1

    def test_infeasible_sizes(self):
        c = inf.synth_corpus(inf.SynthConfig(per_class=10, seed=0))
        with pytest.raises(ValidationError):
            inf.make_splits(c, inf.SplitSpec(sizes={"A": 1000}, seed=0))

    def test_fractions(self):
        c = inf.synth_corpus(inf.SynthConfig(per_class=100, seed=0))
        c = inf.make_splits(c, inf.SplitSpec(fractions={"A": 0.5, "B": 0.25}, seed=0))
        assert len(c.split_ids("A")) == 150 and len(c.split_ids("B")) == 75

    def test_sidecar_round_trip(self, tmp_path):
        c = inf.synth_corpus(inf.SynthConfig(per_class=20, seed=0))
        c = inf.make_splits(c, inf.SplitSpec(sizes={"A": 30, "B": 20}, seed=4))
        p = tmp_path / "splits.json"
        from inffeed.corpus import load_splits, save_splits

        save_splits(c, p, seed=4)
        plain = c.with_splits({})
        assert load_splits(plain, p).splits == c.splits


class TestOversample:
    def test_pads_with_copies(self):
        c = inf.synth_corpus(inf.SynthConfig(per_class=10, seed=0))
        c = inf.make_splits(c, inf.SplitSpec(sizes={"A": 10}, seed=0))
        big = inf.oversample(c, "A", 25, seed=1)
        assert len(big.split_ids("A")) == 25
        sources = {i.split("#")[0] for i in big.split_ids("A")}
        assert sources <= set(c.split_ids("A"))

    def test_identity_when_target_equals_size(self):
        c = inf.synth_corpus(inf.SynthConfig(per_class=10, seed=0))
        c = inf.make_splits(c, inf.SplitSpec(sizes={"A": 10}, seed=0))
        assert inf.oversample(c, "A", 10, seed=1) is c

    def test_copy_keeps_gold_label_and_features(self):
        c = inf.synth_corpus(inf.SynthConfig(per_class=5, seed=0))
        c = inf.make_splits(c, inf.SplitSpec(sizes={"A": 5}, seed=0))
        big = inf.oversample(c, "A", 12, seed=1)
        for iid in big.split_ids("A"):
            if "#" in iid:
                src = big.by_id(iid.split("#")[0])
                dup = big.by_id(iid)
                assert dup.gold_label == src.gold_label
                np.testing.assert_array_equal(dup.features, src.features)

    def test_empty_split_rejected(self):
        c = inf.synth_corpus(inf.SynthConfig(per_class=5, seed=0)).with_splits({"A": ()})
        with pytest.raises(ValidationError):
            inf.oversample(c, "A", 10, seed=0)


class TestSynth:
    def test_deterministic(self):
        cfg = inf.SynthConfig(num_classes=3, feature_dim=4, per_class=20, seed=5)
        a, b = inf.synth_corpus(cfg), inf.synth_corpus(cfg)
        for x, y in zip(a.instances, b.instances):
            np.testing.assert_array_equal(x.features, y.features)

    def test_gold_equals_label(self):
        c = inf.synth_corpus(inf.SynthConfig(per_class=10, seed=0))
        assert all(i.gold_label == i.label for i in c.instances)

    def test_separable_limit(self):
        # huge separation, tiny noise: a linear model fits the training set
        c = inf.synth_corpus(
            inf.SynthConfig(num_classes=2, feature_dim=2, per_class=50, separation=100.0, noise=0.01, seed=0)
        )
        c = inf.make_splits(c, inf.SplitSpec(sizes={"T": 80, "V": 20}, seed=0))
        params, _ = inf.train(c, "T", inf.TrainConfig(learning_rate=0.5, epochs=500, l2=0.005), "V")
        preds = inf.predict(params, c.features_of(c.split_ids("T")))
        assert (preds == c.labels_of(c.split_ids("T"))).all()

    def test_reference_blob_train_accuracy(self):
        # frozen reference: 2 classes, separation 4 sigma, logistic fits >= 0.99
        c = inf.synth_corpus(
            inf.SynthConfig(num_classes=2, feature_dim=2, per_class=100, separation=4.0, noise=1.0, seed=0)
        )
        c = inf.make_splits(c, inf.SplitSpec(sizes={"T": 160, "V": 40}, seed=0))
        params, _ = inf.train(
            c, "T", inf.TrainConfig(learning_rate=0.5, epochs=3000, l2=0.005, grad_tol=1e-8), "V"
        )
        preds = inf.predict(params, c.features_of(c.split_ids("T")))
        assert (preds == c.labels_of(c.split_ids("T"))).mean() >= 0.99

    def test_rejects_single_class(self):
        with pytest.raises(ValidationError):
            inf.synth_corpus(inf.SynthConfig(num_classes=1))

    def test_per_class_counts_and_noise(self):
        c = inf.synth_corpus(
            inf.SynthConfig(num_classes=3, feature_dim=2, per_class=(10, 20, 30), noise=(1.0, 1.0, 0.5), seed=0)
        )
        labels = [i.label for i in c.instances]
        assert [labels.count(k) for k in range(3)] == [10, 20, 30]


class TestLabelNoise:
    def corpus(self):
        c = inf.synth_corpus(inf.SynthConfig(num_classes=3, feature_dim=2, per_class=300, seed=0))
        return inf.make_splits(c, inf.SplitSpec(sizes={"T": 800, "V": 100}, seed=0))

    def test_rate_zero_identity(self):
        c = self.corpus()
        assert inf.inject_label_noise(c, "T", 0.0, seed=1) is c

    def test_exact_flip_count_and_disagreement(self):
        c = self.corpus()
        noisy = inf.inject_label_noise(c, "T", 0.05, seed=1)
        flipped = [e for e in noisy.audit if e.provenance == "random_flip"]
        assert len(flipped) == 40
        for e in flipped:
            inst = noisy.by_id(e.instance_id)
            assert inst.label != inst.gold_label
            assert inst.provenance == "random_flip"

    def test_rate_one_binary_inverts_all(self):
        c = inf.synth_corpus(inf.SynthConfig(num_classes=2, feature_dim=2, per_class=20, seed=0))
        c = inf.make_splits(c, inf.SplitSpec(sizes={"T": 40}, seed=0))
        noisy = inf.inject_label_noise(c, "T", 1.0, seed=1)
        for iid in noisy.split_ids("T"):
            assert noisy.by_id(iid).label == 1 - c.by_id(iid).label

    def test_restore_gold_inverts_noise(self):
        c = self.corpus()
        noisy = inf.inject_label_noise(c, "T", 0.2, seed=3)
        restored = inf.restore_gold(noisy, "T")
        assert [i.label for i in restored.instances] == [i.label for i in c.instances]

    def test_confusion_noise_shifts_classes(self):
        c = self.corpus()
        noisy = inject_confusion_noise(c, "T", 0.1, seed=2)
        flipped = [e for e in noisy.audit if e.provenance == "random_flip"]
        assert len(flipped) == 80
        for e in flipped:
            assert e.new_label == (e.old_label + 1) % 3


class TestCorpusInvariants:
    def test_splits_must_be_disjoint(self):
        c = inf.synth_corpus(inf.SynthConfig(per_class=5, seed=0))
        iid = c.instances[0].id
        with pytest.raises(ValidationError):
            c.with_splits({"A": [iid], "B": [iid]})

    def test_tpr_needs_every_class(self):
        c = inf.synth_corpus(inf.SynthConfig(num_classes=2, feature_dim=2, per_class=5, seed=0))
        only_zero = [i.id for i in c.instances if i.label == 0]
        with pytest.raises(ValidationError, match="absent from T_PR"):
            c.with_splits({"T_PR": only_zero})

    def test_audit_append_only(self):
        c = inf.synth_corpus(inf.SynthConfig(per_class=5, seed=0))
        c1 = c.with_labels({c.instances[0].id: (c.instances[0].label + 1) % 3}, "oracle_fix")
        c2 = c1.with_labels({c.instances[1].id: (c.instances[1].label + 1) % 3}, "ui_fix")
        assert c2.audit[: len(c1.audit)] == c1.audit
        assert len(c2.audit) == 2

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_serialization_deterministic(self, seed, tmp_path_factory):
        cfg = inf.SynthConfig(per_class=8, seed=seed)
        d = tmp_path_factory.mktemp("ser")
        p1, p2 = d / "a.jsonl", d / "b.jsonl"
        inf.save_corpus(inf.synth_corpus(cfg), p1)
        inf.save_corpus(inf.synth_corpus(cfg), p2)
        assert p1.read_bytes() == p2.read_bytes()
