"""``clusdiff`` command line: one pipeline stage per subcommand, artifacts under ``--out``."""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional

from clusdiff.apcluster import load_assignments, save_assignments
from clusdiff.conditioning import SubClassDistribution, single_cluster_clusters
from clusdiff.config import RunConfig, load_config
from clusdiff.data import contact_sheet, read_imageset, write_imageset
from clusdiff.denoiser import UNet
from clusdiff.diffusion import load_schedule, save_schedule
from clusdiff.errors import ClusDiffError, MissingArtifactError, NumericError
from clusdiff.evaluation import format_lt_table, write_kv_report, write_records
from clusdiff.features import FeatureExtractor, load_features, save_features
from clusdiff.latentcodec import Codec
from clusdiff.nncore import Rng
from clusdiff.parallel import num_threads
from clusdiff import pipeline

log = logging.getLogger("clusdiff")

EXIT_OK = 0
EXIT_NUMERIC = 1
EXIT_INVALID = 2

STAGE_DIRS = {
    "dataset-gen": "dataset",
    "features": "features",
    "cluster": "cluster",
    "train": "train",
    "generate": "generate",
    "fid": "fid",
    "lt-run": "lt",
}


class OutputExistsError(ClusDiffError):
    pass


class Stage:
    """Output directory, config echo and report writing for one command."""

    def __init__(self, name: str, root: Path, cfg: RunConfig, force: bool):
        self.name = name
        self.root = root
        self.cfg = cfg
        self.dir = root / STAGE_DIRS[name]
        self.force = force
        self.metrics: Dict[str, object] = {}
        self.info: Dict[str, object] = {}
        self.started = time.perf_counter()

    def upstream(self, stage: str, *parts: str) -> Path:
        path = self.root / stage
        path = path.joinpath(*parts) if parts else path
        if not path.exists():
            raise MissingArtifactError(path)
        return path

    def prepare(self) -> None:
        if self.dir.exists():
            if not self.force:
                raise OutputExistsError(f"output directory {self.dir} exists; pass --force to overwrite")
            shutil.rmtree(self.dir)
        self.dir.mkdir(parents=True)
        (self.dir / "config.ini").write_text(self.cfg.to_ini())

    def finish(self) -> None:
        write_kv_report(self.dir / "metrics.txt", self.metrics)
        report = {
            "command": self.name,
            "seed": self.cfg.seed,
            "config_checksum": self.cfg.checksum(),
            **self.info,
            "threads": num_threads(),
            "wall_time_s": round(time.perf_counter() - self.started, 3),
            **self.metrics,
        }
        write_kv_report(self.dir / "report.txt", report)
        log.info("%s: wrote %s", self.name, self.dir)


def _load_extractor(stage: Stage) -> FeatureExtractor:
    extractor = FeatureExtractor.load(stage.upstream("features", "extractor.cdck"))
    stage.info["extractor_checksum"] = extractor.checksum()
    return extractor


def cmd_dataset_gen(stage: Stage) -> None:
    cfg = stage.cfg
    stage.prepare()
    data = pipeline.build_dataset(cfg)
    write_imageset(stage.dir, data)
    stage.metrics.update({"images": len(data), **{f"count_{c}": n for c, n in data.counts().items()}})


def cmd_features(stage: Stage) -> None:
    data = read_imageset(stage.upstream("dataset"))
    stage.prepare()
    rep = pipeline.fit_extractor(data, stage.cfg, Rng(stage.cfg.seed).child("features"))
    rep.extractor.save(stage.dir / "extractor.cdck")
    fm = rep.extractor.extract(data.images, data.ids, data.classes)
    save_features(stage.dir / "features.cdft", fm)
    stage.info["extractor_checksum"] = rep.extractor.checksum()
    stage.metrics.update({"train_accuracy": rep.train_accuracy, "final_loss": rep.losses[-1], "rows": len(fm.ids), "dim": fm.dim})


def cmd_cluster(stage: Stage) -> None:
    fm = load_features(stage.upstream("features", "features.cdft"))
    stage.prepare()
    clusters = pipeline.cluster(fm, stage.cfg)
    save_assignments(stage.dir / "assignments.tsv", clusters)
    for cls, cc in clusters.items():
        stage.metrics[f"k_{cls}"] = cc.k
        stage.metrics[f"converged_{cls}"] = cc.converged
        stage.metrics[f"iterations_{cls}"] = cc.iterations


def cmd_train(stage: Stage) -> None:
    cfg = stage.cfg
    data = read_imageset(stage.upstream("dataset"))
    if cfg.train.conditioning == "subclass":
        clusters = load_assignments(stage.upstream("cluster", "assignments.tsv"))
    else:
        clusters = single_cluster_clusters(data)
    stage.prepare()
    root = Rng(cfg.seed)
    codec = pipeline.fit_codec(data, cfg, root.child("codec"))
    gen = pipeline.fit_generator(data, clusters, codec, cfg, root.child("unet"))
    gen.model.save(stage.dir / "denoiser.cdck")
    codec.save(stage.dir / "codec.cdck")
    save_schedule(stage.dir / "schedule.cdtn", gen.schedule)
    gen.distribution.save(stage.dir / "distribution.tsv")
    write_records(stage.dir / "losses.tsv", ("epoch", "mean_loss"), list(enumerate(gen.training.epoch_means, 1)))
    stage.metrics.update({
        "conditioning": cfg.train.conditioning,
        "vocabulary": len(gen.distribution.vocabulary()),
        "final_epoch_loss": gen.training.epoch_means[-1],
    })


def _load_generator(stage: Stage) -> pipeline.Generator:
    model = UNet.load(stage.upstream("train", "denoiser.cdck"))
    codec = Codec.load(stage.upstream("train", "codec.cdck"))
    sched = load_schedule(stage.upstream("train", "schedule.cdtn"))
    dist = SubClassDistribution.load(stage.upstream("train", "distribution.tsv"))
    return pipeline.Generator(model, codec, sched, dist)


def cmd_generate(stage: Stage) -> None:
    cfg = stage.cfg
    gen = _load_generator(stage)
    stage.prepare()
    samples = gen.sample_all(gen.distribution.classes, cfg.generate.per_class, Rng(cfg.seed).child("generate"))
    write_imageset(stage.dir / "samples", samples)
    contact_sheet(stage.dir / "contact_sheet.png", samples.images, samples.subclass, cols=min(cfg.generate.per_class, 10))
    stage.metrics["images"] = len(samples)
    for cls in gen.distribution.classes:
        for label in gen.distribution.labels(cls):
            stage.metrics[f"drawn_{label}"] = samples.subclass.count(label)


def cmd_fid(stage: Stage) -> None:
    cfg = stage.cfg
    extractor = _load_extractor(stage)
    samples = read_imageset(stage.upstream("generate", "samples"))
    stage.prepare()
    real = pipeline.reference_dataset(cfg)
    score = pipeline.score_generation(real, samples, extractor, cfg.data.modes)
    stage.metrics["extractor_checksum"] = extractor.checksum()
    for cls, d in score.fid.per_class.items():
        stage.metrics[f"fd_{cls}"] = d
    stage.metrics["fd_pooled"] = score.fid.pooled
    for cls, r in score.mode_recall.items():
        stage.metrics[f"mode_recall_{cls}"] = r
    stage.metrics["mode_recall_mean"] = score.mean_mode_recall
    write_records(stage.dir / "fid.tsv", ("class", "frechet_distance"), score.fid.rows())


def cmd_lt(stage: Stage) -> None:
    stage.prepare()
    study = pipeline.run_lt_study(stage.cfg, log.info)
    rows = []
    for seed, methods in study.per_seed.items():
        for method, m in methods.items():
            rows.append((seed, method, m.head, m.tail, m.overall))
    write_records(stage.dir / "results.tsv", ("seed", "method", "head", "tail", "overall"), rows)
    table = format_lt_table(study.mean())
    (stage.dir / "table.txt").write_text(table)
    for method, m in study.mean().items():
        key = method.lower().replace(" + ", "_").replace(" ", "_")
        stage.metrics.update({f"{key}_head": m.head, f"{key}_tail": m.tail, f"{key}_overall": m.overall})
    print(table, end="")


COMMANDS: Dict[str, Callable[[Stage], None]] = {
    "dataset-gen": cmd_dataset_gen,
    "features": cmd_features,
    "cluster": cmd_cluster,
    "train": cmd_train,
    "generate": cmd_generate,
    "fid": cmd_fid,
    "lt-run": cmd_lt,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clusdiff", description="Clustering-conditioned diffusion pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="INI run configuration")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--out", type=Path, default=Path("clusdiff-run"), help="run directory holding every stage")
        p.add_argument("--force", action="store_true", help="replace an existing stage output")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.with_seed(args.seed)
        cfg.validate()
        stage = Stage(args.command, args.out, cfg, args.force)
        COMMANDS[args.command](stage)
        stage.finish()
    except NumericError as e:
        print(f"error: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ClusDiffError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
