import numpy as np
import pytest

from clusdiff.apcluster import APConfig, cluster_per_class
from clusdiff.data import generate_shapes
from clusdiff.errors import DataError, MissingArtifactError, NumericError, ShapeError, VocabularyError
from clusdiff.features import (
    FeatureExtractor,
    FeatureMatrix,
    cosine_distance,
    load_features,
    pairwise_cosine_distance,
    save_features,
    train_classifier,
)
from clusdiff.nncore import Rng


class TestCosineDistance:
    def test_cases(self):
        assert cosine_distance([1.0, 2.0], [1.0, 2.0]) == pytest.approx(0.0, abs=1e-15)
        assert cosine_distance([1.0, 0.0], [0.0, 5.0]) == pytest.approx(1.0, abs=1e-15)
        assert cosine_distance([1.0, 1.0], [-2.0, -2.0]) == pytest.approx(2.0, abs=1e-15)

    def test_zero_vector(self):
        with pytest.raises(NumericError):
            cosine_distance([0.0, 0.0], [1.0, 0.0])

    def test_properties(self):
        rs = np.random.default_rng(0)
        for _ in range(200):
            a, b = rs.normal(size=5), rs.normal(size=5)
            d = cosine_distance(a, b)
            assert 0.0 <= d <= 2.0
            assert d == pytest.approx(cosine_distance(b, a), abs=1e-15)
            assert d == pytest.approx(cosine_distance(3.1 * a, 0.2 * b), abs=1e-12)
            assert cosine_distance(a, 2.5 * a) == pytest.approx(0.0, abs=1e-12)

    def test_pairwise_matches_scalar(self):
        z = np.random.default_rng(1).normal(size=(4, 3))
        D = pairwise_cosine_distance(z)
        for i in range(4):
            for j in range(4):
                assert D[i, j] == pytest.approx(cosine_distance(z[i], z[j]), abs=1e-12)


@pytest.fixture(scope="module")
def shapes():
    return generate_shapes(["disk", "cross", "ring"], 3, 20, seed=0)


@pytest.fixture(scope="module")
def extractor(shapes):
    return train_classifier(shapes.images, shapes.classes, 30, Rng(0))


class TestClassifier:
    def test_single_class(self, shapes):
        with pytest.raises(DataError):
            train_classifier(shapes.images[:5], ["disk"] * 5, 1, Rng(0))

    def test_label_count_mismatch(self, shapes):
        with pytest.raises(DataError):
            train_classifier(shapes.images[:5], ["disk", "ring"], 1, Rng(0))

    def test_unknown_label(self, shapes):
        with pytest.raises(VocabularyError):
            train_classifier(shapes.images[:2], ["disk", "ring"], 1, Rng(0), class_names=["disk", "cross"])

    def test_deterministic(self, shapes):
        a = train_classifier(shapes.images[::6], shapes.classes[::6], 2, Rng(5))
        b = train_classifier(shapes.images[::6], shapes.classes[::6], 2, Rng(5))
        assert a.losses == b.losses
        assert a.extractor.checksum() == b.extractor.checksum()

    def test_losses_finite(self, extractor):
        assert np.isfinite(extractor.losses).all()

    def test_train_accuracy_600(self):
        d = generate_shapes(["disk", "cross", "ring"], 3, 67, seed=1)
        d = d.subset(range(600))
        rep = train_classifier(d.images, d.classes, 30, Rng(1))
        assert rep.train_accuracy >= 0.95


class TestExtract:
    def test_unit_rows(self, extractor, shapes):
        fm = extractor.extractor.extract(shapes.images, shapes.ids, shapes.classes)
        assert fm.z.shape == (len(shapes), 32)
        np.testing.assert_allclose(np.linalg.norm(fm.z, axis=1), 1.0, atol=1e-9)

    def test_empty(self, extractor):
        fm = extractor.extractor.extract(np.zeros((0, 1, 24, 24)))
        assert len(fm) == 0 and fm.z.shape == (0, 32)

    def test_duplicates_identical(self, extractor, shapes):
        x = np.concatenate([shapes.images[:1], shapes.images[:1]])
        fm = extractor.extractor.extract(x)
        np.testing.assert_array_equal(fm.z[0], fm.z[1])

    def test_shape_mismatch(self, extractor):
        with pytest.raises(ShapeError):
            extractor.extractor.extract(np.zeros((2, 1, 16, 16)))

    def test_thread_count_invariance(self, extractor, shapes, monkeypatch):
        x = np.concatenate([shapes.images] * 2)
        monkeypatch.setenv("CLUSDIFF_THREADS", "1")
        a = extractor.extractor.extract(x).z
        monkeypatch.setenv("CLUSDIFF_THREADS", "4")
        b = extractor.extractor.extract(x).z
        assert a.tobytes() == b.tobytes()

    def test_save_load_extractor(self, extractor, shapes, tmp_path):
        ext = extractor.extractor
        ext.save(tmp_path / "e.cdck")
        back = FeatureExtractor.load(tmp_path / "e.cdck")
        assert back.checksum() == ext.checksum()
        np.testing.assert_array_equal(back.extract(shapes.images[:4]).z, ext.extract(shapes.images[:4]).z)

    def test_missing_extractor(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            FeatureExtractor.load(tmp_path / "none.cdck")


class TestFeatureFile:
    def test_round_trip(self, tmp_path):
        rs = np.random.default_rng(0)
        z = rs.normal(size=(5, 4))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        fm = FeatureMatrix(z, [f"s{i}" for i in range(5)], ["a", "b", "a", "c_x", "b"])
        save_features(tmp_path / "f.cdft", fm)
        raw = (tmp_path / "f.cdft").read_bytes()
        assert raw[:4] == b"CDFT"
        assert int.from_bytes(raw[4:8], "little") == 5 and int.from_bytes(raw[8:12], "little") == 4
        back = load_features(tmp_path / "f.cdft")
        assert back.ids == fm.ids and back.labels == fm.labels
        np.testing.assert_allclose(back.z, z, atol=1e-6)
        np.testing.assert_allclose(np.linalg.norm(back.z, axis=1), 1.0, atol=1e-12)

    def test_missing(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            load_features(tmp_path / "none.cdft")

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            FeatureMatrix(np.ones((2, 3)), ["a"], ["x"])


@pytest.fixture(scope="module")
def seed_runs():
    runs = []
    for seed in range(5):
        d = generate_shapes(["disk", "cross", "ring"], 3, 20, seed=10 + seed)
        rep = train_classifier(d.images, d.classes, 30, Rng(seed))
        runs.append((d, rep.extractor.extract(d.images, d.ids, d.classes)))
    return runs


def test_modes_separable(seed_runs):
    wins = 0
    for d, fm in seed_runs:
        D = pairwise_cosine_distance(fm.z)
        key = np.array([f"{c}/{m}" for c, m in zip(d.classes, d.modes)])
        same = key[:, None] == key[None, :]
        off = ~np.eye(len(key), dtype=bool)
        wins += D[same & off].mean() < D[~same].mean()
    assert wins >= 4


def test_three_subclasses_recovered(seed_runs):
    wins = 0
    for _, fm in seed_runs:
        res = cluster_per_class(fm, APConfig(damping=0.9))
        wins += all(cc.k == 3 for cc in res.values())
    assert wins >= 4
