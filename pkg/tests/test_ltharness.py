import numpy as np
import pytest

from clusdiff.data import SHAPES, generate_shapes, read_imageset, write_imageset
from clusdiff.errors import ConfigError, DataError
from clusdiff.ltharness import (
    LongTailSpec,
    balance_with_synthetic,
    make_longtail,
    ros,
    rus,
    train_and_eval,
)
from clusdiff.nncore import Rng

CLASSES = list(SHAPES)


def toy_source(seed=0):
    spec = LongTailSpec.toy(CLASSES)
    per_mode = {c: -(-(n + spec.test_per_class) // 3) for c, n in spec.counts.items()}
    return generate_shapes(CLASSES, 3, per_mode, seed=seed), spec


def fake_generator(cls, n, rng):
    images = rng.uniform(0, 1, size=(n, 1, 24, 24))
    return images, [f"{cls}_{1 + k % 2}" for k in range(n)]


class TestSpec:
    def test_toy(self):
        spec = LongTailSpec.toy(CLASSES)
        assert spec.head_classes == ["disk", "square"]
        assert spec.tail_classes == ["cross", "triangle", "ring", "bar"]
        assert spec.test_per_class == 25

    def test_equal_counts_all_head(self):
        spec = LongTailSpec({"a": 5, "b": 5})
        assert spec.head_classes == ["a", "b"] and spec.tail_classes == []

    def test_invalid(self):
        with pytest.raises(ConfigError):
            LongTailSpec({"a": 0})
        with pytest.raises(ConfigError):
            LongTailSpec({})


class TestSplit:
    def test_counts_and_disjoint(self):
        src, spec = toy_source()
        train, test = make_longtail(src, spec, Rng(0))
        assert train.counts() == spec.counts
        assert test.counts() == {c: 25 for c in CLASSES}
        assert not set(train.ids) & set(test.ids)

    def test_equal_counts_balanced(self):
        src = generate_shapes(["disk", "ring"], 3, 5, seed=0)
        train, _ = make_longtail(src, LongTailSpec({"disk": 8, "ring": 8}, test_per_class=4), Rng(1))
        assert train.counts() == {"disk": 8, "ring": 8}

    def test_insufficient(self):
        src = generate_shapes(["disk"], 1, 10, seed=0)
        with pytest.raises(DataError):
            make_longtail(src, LongTailSpec({"disk": 8}, test_per_class=4), Rng(0))

    def test_deterministic(self):
        src, spec = toy_source()
        a, _ = make_longtail(src, spec, Rng(3))
        b, _ = make_longtail(src, spec, Rng(3))
        c, _ = make_longtail(src, spec, Rng(4))
        assert a.ids == b.ids and a.ids != c.ids


class TestBalance:
    def setup_method(self):
        src, spec = toy_source()
        self.train, _ = make_longtail(src, spec, Rng(0))

    def test_topped_up(self):
        out = balance_with_synthetic(self.train, fake_generator, 200, Rng(0))
        assert out.counts() == {c: 200 for c in CLASSES}
        for cls in CLASSES:
            syn = [i for i in out.indices_of(cls) if out.synthetic[i]]
            assert len(syn) == 200 - self.train.counts()[cls]

    def test_real_kept(self):
        out = balance_with_synthetic(self.train, fake_generator, 200, Rng(0))
        real = [i for i in range(len(out)) if not out.synthetic[i]]
        assert [out.ids[i] for i in real] == self.train.ids
        np.testing.assert_array_equal(out.images[real], self.train.images)

    def test_at_target_untouched(self):
        out = balance_with_synthetic(self.train, fake_generator, 10, Rng(0))
        assert out.ids == self.train.ids

    def test_provenance(self):
        out = balance_with_synthetic(self.train, fake_generator, 200, Rng(0))
        for i in range(len(out)):
            if out.synthetic[i]:
                assert out.subclass[i].startswith(out.classes[i] + "_")

    def test_provenance_round_trip(self, tmp_path):
        small = balance_with_synthetic(self.train.subset(range(0, len(self.train), 20)), fake_generator, 12, Rng(0))
        write_imageset(tmp_path, small)
        back = read_imageset(tmp_path)
        assert back.synthetic == small.synthetic
        assert back.subclass == small.subclass
        np.testing.assert_array_equal(back.images, small.images)

    def test_short_generator(self):
        with pytest.raises(DataError):
            balance_with_synthetic(self.train, lambda c, n, r: fake_generator(c, n - 1, r), 200, Rng(0))


class TestResampling:
    def setup_method(self):
        src, spec = toy_source()
        self.train, _ = make_longtail(src, spec, Rng(0))

    def test_ros_counts(self):
        out = ros(self.train, 200, Rng(0))
        assert out.counts() == {c: 200 for c in CLASSES}

    def test_ros_at_target(self):
        head = self.train.subset(self.train.indices_of("disk"))
        assert ros(head, 200, Rng(0)).ids == head.ids

    def test_ros_multiset(self):
        out = ros(self.train, 200, Rng(0))
        for cls in CLASSES:
            before = {self.train.ids[i] for i in self.train.indices_of(cls)}
            after = {out.ids[i].split("#")[0] for i in out.indices_of(cls)}
            assert before == after
        for i, sid in enumerate(out.ids):
            src = self.train.ids.index(sid.split("#")[0])
            np.testing.assert_array_equal(out.images[i], self.train.images[src])

    def test_rus_balanced(self):
        out = rus(self.train, Rng(0))
        assert out.counts() == {c: 10 for c in CLASSES}
        assert set(out.ids) <= set(self.train.ids)


class TestTrainEval:
    def test_overlap_rejected(self):
        src = generate_shapes(["disk", "ring"], 1, 4, seed=0)
        with pytest.raises(DataError):
            train_and_eval(src, src, ["disk"], 1, Rng(0))

    def test_memorization(self):
        src = generate_shapes(["disk", "ring", "cross"], 3, 8, seed=0)
        run = train_and_eval(src, src, ["disk"], 30, Rng(0), allow_overlap=True, lr=2e-3, batch_size=8)
        assert run.metrics.overall >= 95.0

    def test_deterministic(self):
        src, spec = toy_source()
        train, test = make_longtail(src, spec, Rng(0))
        a = train_and_eval(train, test, spec.head_classes, 3, Rng(1))
        b = train_and_eval(train, test, spec.head_classes, 3, Rng(1))
        assert a.metrics.per_class == b.metrics.per_class

    def test_imbalance_hurts_tail(self):
        wins = 0
        for seed in range(5):
            src, spec = toy_source(seed)
            train, test = make_longtail(src, spec, Rng(seed).child("split"))
            m = train_and_eval(train, test, spec.head_classes, 30, Rng(seed).child("clf")).metrics
            wins += m.tail < m.head
        assert wins >= 4
