import numpy as np
import pytest
from scipy.stats import chisquare

from clusdiff.apcluster import ClassClusters
from clusdiff.conditioning import (
    SubClassDistribution,
    SubClassLabel,
    assign_subclasses,
    empirical_distribution,
    generate,
    sample_label,
    single_cluster_clusters,
)
from clusdiff.data import generate_shapes, to_model_space
from clusdiff.denoiser import UNet, UNetConfig
from clusdiff.diffusion import make_linear_schedule
from clusdiff.errors import DataError, MissingArtifactError, VocabularyError
from clusdiff.latentcodec import Codec
from clusdiff.nncore import Rng


class TestLabel:
    def test_format(self):
        assert str(SubClassLabel("disk", 1)) == "disk_1"

    def test_round_trip(self):
        for name in ("disk", "dark_ring", "a_b_c", "x1"):
            for cid in (1, 2, 17):
                lab = SubClassLabel(name, cid)
                assert SubClassLabel.parse(str(lab)) == lab

    def test_invalid(self):
        for bad in ("disk", "disk_", "disk_x", "_3"):
            with pytest.raises(DataError):
                SubClassLabel.parse(bad)
        with pytest.raises(DataError):
            SubClassLabel("a", 0)

    def test_unique_strings(self):
        pairs = [(c, k) for c in ("a", "a_1", "b") for k in (1, 2, 11)]
        strs = {str(SubClassLabel(c, k)) for c, k in pairs}
        assert len(strs) == len(pairs)


class TestDistribution:
    def test_normalization(self):
        labels = ["x_1"] * 60 + ["x_2"] * 30 + ["x_3"] * 10
        d = empirical_distribution(labels)
        np.testing.assert_allclose(d.probabilities("x"), [0.6, 0.3, 0.1], atol=1e-15)

    def test_single_cluster(self):
        d = empirical_distribution(["y_1"] * 4)
        assert d.probabilities("y").tolist() == [1.0]

    def test_sums_to_one(self):
        rs = np.random.default_rng(0)
        labels = [f"c{rs.integers(5)}_{rs.integers(1, 8)}" for _ in range(1000)]
        d = empirical_distribution(labels)
        for c in d.classes:
            assert abs(d.probabilities(c).sum() - 1.0) < 1e-12
            for cid, count, p in d.entries(c):
                assert p == count / sum(n for _, n, _ in d.entries(c))

    def test_empty_class(self):
        with pytest.raises(DataError):
            SubClassDistribution.from_counts({"a": {}})

    def test_file_round_trip(self, tmp_path):
        d = empirical_distribution(["a_1", "a_2", "a_2", "b_c_3"])
        d.save(tmp_path / "d.tsv")
        back = SubClassDistribution.load(tmp_path / "d.tsv")
        assert back.rows == d.rows
        assert back.vocabulary() == ["a_1", "a_2", "b_c_3"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            SubClassDistribution.load(tmp_path / "none.tsv")


class TestSampleLabel:
    def test_degenerate(self):
        d = SubClassDistribution.from_counts({"a": {4: 9}})
        for i in range(20):
            assert str(sample_label("a", d, Rng(1).child(i))) == "a_4"

    def test_unknown_class(self):
        d = SubClassDistribution.from_counts({"a": {1: 1}})
        with pytest.raises(VocabularyError):
            sample_label("b", d, Rng(0))

    def test_deterministic(self):
        d = SubClassDistribution.from_counts({"a": {1: 6, 2: 3, 3: 1}})
        a = [sample_label("a", d, Rng(5).child(i)).cluster_id for i in range(50)]
        b = [sample_label("a", d, Rng(5).child(i)).cluster_id for i in range(50)]
        assert a == b

    def test_frequencies_concentrate(self):
        d = SubClassDistribution.from_counts({"a": {1: 60, 2: 30, 3: 10}})
        target = np.array([0.6, 0.3, 0.1])
        reps, ok = 100, 0
        for r in range(reps):
            base = Rng(100 + r)
            draws = np.array([sample_label("a", d, base.child(i)).cluster_id for i in range(10_000)])
            freq = np.bincount(draws, minlength=4)[1:] / 10_000
            ok += np.all(np.abs(freq - target) <= 0.02)
        assert ok / reps >= 0.99

    def test_chi_square(self):
        d = SubClassDistribution.from_counts({"a": {1: 7, 2: 2, 5: 11}})
        draws = [sample_label("a", d, Rng(9).child(i)).cluster_id for i in range(10_000)]
        counts = np.array([draws.count(c) for c in (1, 2, 5)])
        assert chisquare(counts, d.probabilities("a") * 10_000).pvalue > 0.001


def _clusters(data):
    out = {}
    for cls in data.class_names:
        idx = data.indices_of(cls)
        ids = [data.ids[i] for i in idx]
        cids = [data.modes[i] + 1 for i in idx]
        out[cls] = ClassClusters(cls, ids, cids, ids, True, 1)
    return out


class TestAssign:
    def test_labels_and_counts(self):
        data = generate_shapes(["disk", "bar"], 3, 2, seed=0)
        ds = assign_subclasses(data, _clusters(data))
        assert len(ds) == len(data)
        assert ds.classes == data.classes
        assert ds.labels[0] == "disk_1"
        assert {lab for lab in ds.labels if lab.startswith("bar")} == {"bar_1", "bar_2", "bar_3"}
        np.testing.assert_array_equal(ds.z, to_model_space(data.images))

    def test_counts_consistent_with_distribution(self):
        data = generate_shapes(["disk", "bar"], 3, {"disk": 4, "bar": 1}, seed=0)
        ds = assign_subclasses(data, _clusters(data))
        dist = empirical_distribution(ds.labels)
        assert [n for _, n, _ in dist.entries("disk")] == [4, 4, 4]
        assert len(dist.entries("bar")) == 3

    def test_missing_assignment(self):
        data = generate_shapes(["disk"], 1, 3, seed=0)
        cl = _clusters(data)
        cl["disk"].ids.pop()
        cl["disk"].cluster_ids.pop()
        with pytest.raises(DataError):
            assign_subclasses(data, cl)

    def test_single_cluster_baseline(self):
        data = generate_shapes(["disk", "ring"], 2, 2, seed=0)
        ds = assign_subclasses(data, single_cluster_clusters(data))
        assert set(ds.labels) == {"disk_1", "ring_1"}

    def test_with_autoencoder(self):
        data = generate_shapes(["disk"], 1, 2, seed=0)
        ds = assign_subclasses(data, _clusters(data), Codec.autoencoder(Rng(0)))
        assert ds.z.shape == (2, 2, 12, 12)


@pytest.fixture(scope="module")
def model():
    cfg = UNetConfig(image_size=8, base_channels=4, d_ctx=6, d_attn=4, time_dim=8, groups=2)
    return UNet(cfg, ["a_1", "a_2", "b_1"], Rng(0))


class TestGenerate:
    def test_empty(self, model):
        d = SubClassDistribution.from_counts({"a": {1: 1}})
        out = generate("a", 0, model, None, make_linear_schedule(5), d, Rng(0))
        assert out.images.shape[0] == 0 and out.labels == []

    def test_extents_and_labels(self, model):
        d = SubClassDistribution.from_counts({"a": {1: 3, 2: 1}})
        out = generate("a", 5, model, None, make_linear_schedule(5), d, Rng(0))
        assert out.images.shape == (5, 1, 8, 8)
        assert out.images.min() >= 0 and out.images.max() <= 1
        assert set(out.labels) <= {"a_1", "a_2"}

    def test_degenerate_distribution(self, model):
        d = SubClassDistribution.from_counts({"a": {2: 5}})
        out = generate("a", 4, model, None, make_linear_schedule(5), d, Rng(0))
        assert out.labels == ["a_2"] * 4

    def test_deterministic_and_thread_invariant(self, model, monkeypatch):
        d = SubClassDistribution.from_counts({"a": {1: 3, 2: 1}})
        sched = make_linear_schedule(4)
        monkeypatch.setenv("CLUSDIFF_THREADS", "1")
        a = generate("a", 70, model, None, sched, d, Rng(3))
        monkeypatch.setenv("CLUSDIFF_THREADS", "3")
        b = generate("a", 70, model, None, sched, d, Rng(3))
        assert a.images.tobytes() == b.images.tobytes()
        assert a.labels == b.labels

    def test_prefix_stable(self, model):
        d = SubClassDistribution.from_counts({"a": {1: 3, 2: 1}})
        sched = make_linear_schedule(4)
        a = generate("a", 3, model, None, sched, d, Rng(3))
        b = generate("a", 6, model, None, sched, d, Rng(3))
        assert a.labels == b.labels[:3]

    def test_unknown_class(self, model):
        d = SubClassDistribution.from_counts({"a": {1: 1}})
        with pytest.raises(VocabularyError):
            generate("zzz", 1, model, None, make_linear_schedule(3), d, Rng(0))
