"""Stage functions shared by the command line and the experiment drivers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from clusdiff.apcluster import ClassClusters, cluster_per_class
from clusdiff.conditioning import (
    SubClassDistribution,
    assign_subclasses,
    empirical_distribution,
    generate,
    single_cluster_clusters,
)
from clusdiff.config import RunConfig
from clusdiff.data import ImageSet, generate_shapes, prototype, to_model_space
from clusdiff.denoiser import TrainResult, UNet, make_optimizer, train
from clusdiff.diffusion import NoiseSchedule
from clusdiff.evaluation import FIDReport, LTMetrics, fid_report, mode_recall
from clusdiff.features import ClassifierReport, FeatureExtractor, FeatureMatrix, train_classifier
from clusdiff.latentcodec import Codec, train_autoencoder
from clusdiff.ltharness import (
    LongTailSpec,
    balance_with_synthetic,
    make_longtail,
    ros,
    rus,
    train_and_eval,
)
from clusdiff.nncore import Rng

log = logging.getLogger(__name__)

LT_METHODS = ("Baseline", "ROS", "RUS", "Baseline + ClusDiff")


def build_dataset(cfg: RunConfig, seed: Optional[int] = None) -> ImageSet:
    d = cfg.data
    return generate_shapes(list(d.classes), d.modes, d.per_mode, seed=cfg.seed if seed is None else seed)


def reference_dataset(cfg: RunConfig) -> ImageSet:
    """Independent real draw used as the Fréchet reference."""
    d = cfg.data
    return generate_shapes(list(d.classes), d.modes, cfg.fid.reference_per_mode, seed=cfg.seed + cfg.fid.reference_seed_offset)


def fit_extractor(data: ImageSet, cfg: RunConfig, rng: Rng) -> ClassifierReport:
    f = cfg.features
    return train_classifier(
        data.images, data.classes, f.epochs, rng, class_names=data.class_names, lr=f.lr, batch_size=f.batch_size, d_f=f.d_f
    )


def cluster(fm: FeatureMatrix, cfg: RunConfig) -> Dict[str, ClassClusters]:
    return cluster_per_class(fm, cfg.ap_config())


def fit_codec(data: ImageSet, cfg: RunConfig, rng: Rng) -> Codec:
    c = cfg.codec
    if c.variant == "identity":
        return Codec(channels=data.images.shape[1])
    res = train_autoencoder(
        to_model_space(data.images), c.epochs, rng, factor=c.factor, latent_channels=c.latent_channels, hidden=c.hidden
    )
    return res.codec


@dataclass
class Generator:
    model: UNet
    codec: Codec
    schedule: NoiseSchedule
    distribution: SubClassDistribution
    training: TrainResult = field(default_factory=TrainResult)

    def sample(self, class_name: str, n: int, rng: Rng) -> ImageSet:
        batch = generate(class_name, n, self.model, self.codec, self.schedule, self.distribution, rng)
        return ImageSet(
            images=batch.images,
            ids=[f"gen-{class_name}-{k:04d}" for k in range(n)],
            classes=[class_name] * n,
            synthetic=[True] * n,
            subclass=list(batch.labels),
        )

    def sample_all(self, classes: Sequence[str], n: int, rng: Rng) -> ImageSet:
        return ImageSet.concat([self.sample(c, n, rng.child("class", c)) for c in classes])


def fit_generator(
    data: ImageSet,
    clusters: Dict[str, ClassClusters],
    codec: Codec,
    cfg: RunConfig,
    rng: Rng,
) -> Generator:
    """Relabel by cluster, then train the label-conditioned denoiser on the encoded images."""
    ds = assign_subclasses(data, clusters, codec)
    dist = empirical_distribution(ds.labels)
    sched = cfg.schedule()
    model = UNet(cfg.unet_config(ds.z.shape[-1], ds.z.shape[1]), dist.vocabulary(), rng.child("init"))
    t = cfg.train
    res = train(model, ds, sched, t.epochs, make_optimizer(model, t.lr), rng.child("fit"), batch_size=t.batch_size)
    return Generator(model, codec, sched, dist, res)


def conditioning_clusters(data: ImageSet, fm: FeatureMatrix, cfg: RunConfig, mode: Optional[str] = None):
    mode = mode or cfg.train.conditioning
    return cluster(fm, cfg) if mode == "subclass" else single_cluster_clusters(data)


def prototype_features(extractor: FeatureExtractor, classes: Sequence[str], modes: int) -> Dict[str, np.ndarray]:
    out = {}
    for cls in classes:
        protos = np.stack([prototype(cls, m) for m in range(modes)])[:, None]
        out[cls] = extractor.extract(protos).z
    return out


@dataclass
class GenerationScore:
    fid: FIDReport
    mode_recall: Dict[str, float]

    @property
    def mean_mode_recall(self) -> float:
        return float(np.mean(list(self.mode_recall.values())))


def score_generation(real: ImageSet, gen: ImageSet, extractor: FeatureExtractor, modes: int) -> GenerationScore:
    fid = fid_report(real.images, real.classes, gen.images, gen.classes, extractor)
    protos = prototype_features(extractor, gen.class_names, modes)
    gf = extractor.extract(gen.images, labels=gen.classes)
    recall = {c: mode_recall(gf.rows_for(c).z, protos[c]) for c in gen.class_names}
    return GenerationScore(fid, recall)


@dataclass
class ConditioningComparison:
    seed: int
    scores: Dict[str, GenerationScore]
    cluster_counts: Dict[str, int]


def compare_conditioning(cfg: RunConfig, progress: Callable[[str], None] = log.info) -> ConditioningComparison:
    """Sub-class versus plain class conditioning on one seed, same data, extractor and budget."""
    seed = cfg.seed
    root = Rng(seed)
    data = build_dataset(cfg)
    extractor = fit_extractor(data, cfg, root.child("features")).extractor
    fm = extractor.extract(data.images, data.ids, data.classes)
    clusters = cluster(fm, cfg)
    codec = fit_codec(data, cfg, root.child("codec"))
    real = reference_dataset(cfg)
    scores = {}
    for name, cl in (("clusdiff", clusters), ("plain", single_cluster_clusters(data))):
        gen = fit_generator(data, cl, codec, cfg, root.child("unet"))
        samples = gen.sample_all(data.class_names, cfg.generate.per_class, root.child("generate"))
        scores[name] = score_generation(real, samples, extractor, cfg.data.modes)
        progress(f"seed {seed} {name}: pooled FD {scores[name].fid.pooled:.5f}")
    return ConditioningComparison(seed, scores, {c: cc.k for c, cc in clusters.items()})


# long-tail study ----------------------------------------------------------------

def lt_spec(cfg: RunConfig) -> LongTailSpec:
    lt = cfg.lt
    counts = {c: lt.head_count if c in lt.head else lt.tail_count for c in lt.classes}
    return LongTailSpec(counts, test_per_class=lt.test_per_class)


def lt_source(cfg: RunConfig, seed: int) -> ImageSet:
    spec = lt_spec(cfg)
    modes = cfg.data.modes
    per_mode = {c: -(-(n + spec.test_per_class) // modes) for c, n in spec.counts.items()}
    return generate_shapes(list(spec.counts), modes, per_mode, seed=seed)


class SyntheticPool:
    """Images generated once per class and handed out as prefixes.

    Every long-tail seed tops its classes up from the same generated pool, so
    the cost of sampling is paid once per study rather than once per seed.
    """

    def __init__(self, generator: Generator, needs: Dict[str, int], rng: Rng):
        self.batches = {c: generator.sample(c, n, rng.child("pool", c)) for c, n in needs.items() if n > 0}

    def __call__(self, cls: str, n: int, rng: Rng) -> Tuple[np.ndarray, List[str]]:
        batch = self.batches[cls]
        return batch.images[:n], batch.subclass[:n]


def fit_lt_generator(cfg: RunConfig, progress: Callable[[str], None] = log.info) -> Tuple[Generator, ImageSet]:
    """Train the sub-class generator on a balanced set drawn independently of every split."""
    lt = cfg.lt
    seed = cfg.seed + lt.generator_seed_offset
    root = Rng(seed)
    data = generate_shapes(list(lt.classes), cfg.data.modes, lt.generator_per_mode, seed=seed)
    extractor = fit_extractor(data, cfg, root.child("features")).extractor
    clusters = cluster(extractor.extract(data.images, data.ids, data.classes), cfg)
    progress("generator clusters: " + ", ".join(f"{c}={cc.k}" for c, cc in clusters.items()))
    codec = fit_codec(data, cfg, root.child("codec"))
    return fit_generator(data, clusters, codec, cfg, root.child("unet")), data


@dataclass
class LTStudy:
    per_seed: Dict[int, Dict[str, LTMetrics]]
    head_classes: List[str]
    synthetic: Dict[str, int]

    def mean(self) -> Dict[str, LTMetrics]:
        out = {}
        for method in LT_METHODS:
            runs = [r[method] for r in self.per_seed.values()]
            out[method] = LTMetrics(
                float(np.mean([m.head for m in runs])),
                float(np.mean([m.tail for m in runs])),
                float(np.mean([m.overall for m in runs])),
                self.head_classes,
                {},
            )
        return out


def run_lt_study(cfg: RunConfig, progress: Callable[[str], None] = log.info) -> LTStudy:
    lt = cfg.lt
    spec = lt_spec(cfg)
    target = max(spec.counts.values())
    generator, _ = fit_lt_generator(cfg, progress)
    needs = {c: target - n for c, n in spec.counts.items()}
    pool = SyntheticPool(generator, needs, Rng(cfg.seed + lt.generator_seed_offset).child("synthesis"))
    progress(f"synthetic pool: {sum(needs.values())} images")
    per_seed = {}
    for seed in lt.seeds:
        root = Rng(seed)
        train_set, test_set = make_longtail(lt_source(cfg, seed), spec, root.child("split"))
        sets = {
            "Baseline": train_set,
            "ROS": ros(train_set, target, root.child("ros")),
            "RUS": rus(train_set, root.child("rus")),
            "Baseline + ClusDiff": balance_with_synthetic(train_set, pool, target, root.child("synth")),
        }
        per_seed[seed] = {}
        for method, ts in sets.items():
            run = train_and_eval(
                ts, test_set, spec.head_classes, lt.epochs, root.child("classifier"),
                classes=list(spec.counts), lr=lt.lr, batch_size=lt.batch_size,
            )
            per_seed[seed][method] = run.metrics
            progress(f"seed {seed} {method}: head {run.metrics.head:.1f} tail {run.metrics.tail:.1f}")
    return LTStudy(per_seed, spec.head_classes, needs)
