"""INI run configuration: typed sections, validation, canonical echo and checksum."""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Tuple, get_type_hints

from clusdiff.apcluster import APConfig
from clusdiff.data import MODE_OFFSETS, SHAPES
from clusdiff.denoiser import UNetConfig
from clusdiff.diffusion import NoiseSchedule, make_linear_schedule
from clusdiff.errors import ClusDiffError, ConfigError, MissingArtifactError


@dataclass
class RunSection:
    seed: int = 0


@dataclass
class DataSection:
    classes: Tuple[str, ...] = ("disk", "cross", "ring")
    modes: int = 3
    per_mode: int = 40


@dataclass
class FeaturesSection:
    epochs: int = 30
    lr: float = 2e-3
    batch_size: int = 32
    d_f: int = 32


@dataclass
class ClusterSection:
    damping: float = 0.9
    max_iter: int = 200
    window: int = 15
    preference: str = "median"


@dataclass
class DiffusionSection:
    steps: int = 200
    # 1e-4 -> 0.02 scaled by 1000 / steps, so x_T is pure noise as at T = 1000
    beta_start: float = 5e-4
    beta_end: float = 0.1


@dataclass
class UNetSection:
    base_channels: int = 16
    depth: int = 2
    channel_mult: Tuple[int, ...] = (1, 2, 2)
    attention: Tuple[str, ...] = ("bottleneck", "dec1", "dec0")
    d_ctx: int = 64
    d_attn: int = 32
    time_dim: int = 64
    groups: int = 8


@dataclass
class TrainSection:
    epochs: int = 150
    batch_size: int = 16
    lr: float = 2e-3
    conditioning: str = "subclass"


@dataclass
class CodecSection:
    variant: str = "identity"
    factor: int = 2
    latent_channels: int = 2
    hidden: int = 16
    epochs: int = 40


@dataclass
class GenerateSection:
    per_class: int = 60


@dataclass
class FidSection:
    reference_per_mode: int = 20
    reference_seed_offset: int = 1000


@dataclass
class LTSection:
    classes: Tuple[str, ...] = SHAPES
    head: Tuple[str, ...] = ("disk", "square")
    head_count: int = 200
    tail_count: int = 10
    test_per_class: int = 25
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    generator_per_mode: int = 20
    generator_seed_offset: int = 500


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    features: FeaturesSection = field(default_factory=FeaturesSection)
    cluster: ClusterSection = field(default_factory=ClusterSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    unet: UNetSection = field(default_factory=UNetSection)
    train: TrainSection = field(default_factory=TrainSection)
    codec: CodecSection = field(default_factory=CodecSection)
    generate: GenerateSection = field(default_factory=GenerateSection)
    fid: FidSection = field(default_factory=FidSection)
    lt: LTSection = field(default_factory=LTSection)

    @property
    def seed(self) -> int:
        return self.run.seed

    def ap_config(self) -> APConfig:
        c = self.cluster
        try:
            pref = c.preference if c.preference == "median" else float(c.preference)
        except ValueError as e:
            raise ConfigError(f"cluster.preference must be 'median' or a number, got {c.preference!r}") from e
        return APConfig(damping=c.damping, max_iter=c.max_iter, window=c.window, preference=pref)

    def schedule(self) -> NoiseSchedule:
        d = self.diffusion
        return make_linear_schedule(d.steps, d.beta_start, d.beta_end)

    def unet_config(self, image_size: int, in_channels: int) -> UNetConfig:
        u = self.unet
        return UNetConfig(
            in_channels=in_channels,
            image_size=image_size,
            base_channels=u.base_channels,
            depth=u.depth,
            channel_mult=tuple(u.channel_mult),
            attention=tuple(u.attention),
            d_ctx=u.d_ctx,
            d_attn=u.d_attn,
            time_dim=u.time_dim,
            groups=u.groups,
        )

    def validate(self) -> "RunConfig":
        """Raise ConfigError on the first invalid value; returns self."""
        d = self.data
        if not d.classes or len(set(d.classes)) != len(d.classes):
            raise ConfigError("data.classes must be a nonempty list of distinct shapes")
        for name in tuple(d.classes) + tuple(self.lt.classes):
            if name not in SHAPES:
                raise ConfigError(f"unknown shape class {name!r}; choose from {', '.join(SHAPES)}")
        if not 1 <= d.modes <= len(MODE_OFFSETS):
            raise ConfigError(f"data.modes must be in 1..{len(MODE_OFFSETS)}")
        _positive(self, [
            ("data", "per_mode"), ("features", "epochs"), ("features", "lr"), ("features", "batch_size"),
            ("features", "d_f"), ("train", "epochs"), ("train", "batch_size"), ("train", "lr"),
            ("generate", "per_class"), ("fid", "reference_per_mode"), ("lt", "head_count"),
            ("lt", "tail_count"), ("lt", "test_per_class"), ("lt", "epochs"), ("lt", "lr"),
            ("lt", "batch_size"), ("lt", "generator_per_mode"), ("codec", "epochs"),
        ])
        if self.train.conditioning not in ("subclass", "class"):
            raise ConfigError("train.conditioning must be 'subclass' or 'class'")
        if self.codec.variant not in ("identity", "ae"):
            raise ConfigError("codec.variant must be 'identity' or 'ae'")
        if self.lt.head_count < self.lt.tail_count:
            raise ConfigError("lt.head_count must be at least lt.tail_count")
        unknown = set(self.lt.head) - set(self.lt.classes)
        if unknown:
            raise ConfigError(f"lt.head names classes outside lt.classes: {sorted(unknown)}")
        if not self.lt.seeds:
            raise ConfigError("lt.seeds must list at least one seed")
        try:
            self.ap_config().validate()
            self.schedule()
            image = 24 // (self.codec.factor if self.codec.variant == "ae" else 1)
            self.unet_config(image, 1).validate()
        except ClusDiffError as e:
            raise ConfigError(str(e)) from e
        return self

    def to_ini(self) -> str:
        """Canonical text: every section and key, defaults included, fixed order."""
        lines = []
        for f in fields(self):
            lines.append(f"[{f.name}]")
            section = getattr(self, f.name)
            for sf in fields(section):
                lines.append(f"{sf.name} = {_format(getattr(section, sf.name))}")
            lines.append("")
        return "\n".join(lines)

    def checksum(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "RunConfig":
        self.run.seed = int(seed)
        return self


def _positive(cfg: RunConfig, keys) -> None:
    for sec, key in keys:
        if getattr(getattr(cfg, sec), key) <= 0:
            raise ConfigError(f"{sec}.{key} must be positive")


def _format(value) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, typ, where: str):
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw.strip()
        items = [p.strip() for p in raw.split(",") if p.strip()]
        if typ == Tuple[int, ...]:
            return tuple(int(p) for p in items)
        return tuple(items)
    except ValueError as e:
        raise ConfigError(f"{where}: cannot parse {raw!r} ({e})") from e


def parse_config(text: str) -> RunConfig:
    """Build a config from INI text; unspecified keys keep their defaults."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e
    cfg = RunConfig()
    sections = {f.name: f for f in fields(cfg)}
    for name in parser.sections():
        if name not in sections:
            raise ConfigError(f"unknown config section [{name}]")
        section = getattr(cfg, name)
        hints = get_type_hints(type(section))
        for key, raw in parser[name].items():
            if key not in hints:
                raise ConfigError(f"unknown key {name}.{key}")
            setattr(section, key, _parse(raw, hints[key], f"{name}.{key}"))
    return cfg


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path)
    return parse_config(path.read_text())

