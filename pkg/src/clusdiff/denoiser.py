"""Conditional denoising U-Net with cross-attention on a learned label embedding."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from clusdiff import checkpoint
from clusdiff.diffusion import NoiseSchedule, denoise_loss, forward_sample
from clusdiff.errors import ConfigError, DataError, NumericError, ShapeError, VocabularyError
from clusdiff.nncore import (
    AdamState,
    Conv1x1,
    Conv2d,
    Embedding,
    GroupNorm,
    Linear,
    Module,
    Rng,
    Tensor,
    adam_step,
    no_grad,
    ops,
)

log = logging.getLogger(__name__)

ATTN_SITES = ("bottleneck", "dec")


@dataclass
class UNetConfig:
    in_channels: int = 1
    image_size: int = 24
    base_channels: int = 32
    depth: int = 2
    channel_mult: Tuple[int, ...] = (1, 2, 2)
    # "bottleneck", "dec<l>" and "enc<l>" sites; default: bottleneck + every decoder level
    attention: Tuple[str, ...] = ("bottleneck", "dec1", "dec0")
    d_ctx: int = 64
    d_attn: int = 32
    time_dim: int = 64
    groups: int = 8
    dtype: str = "float32"

    def validate(self) -> None:
        if self.image_size % (2**self.depth):
            raise ConfigError(f"image size {self.image_size} not divisible by 2^{self.depth}")
        if len(self.channel_mult) != self.depth + 1:
            raise ConfigError(f"channel_mult needs {self.depth + 1} entries, got {len(self.channel_mult)}")
        if self.time_dim % 2:
            raise ConfigError("time_dim must be even")
        valid = {"bottleneck"} | {f"enc{l}" for l in range(self.depth)} | {f"dec{l}" for l in range(self.depth)}
        bad = set(self.attention) - valid
        if bad:
            raise ConfigError(f"unknown attention sites {sorted(bad)}")
        for c in self.channels:
            if c % self.groups:
                raise ConfigError(f"groups={self.groups} does not divide {c} channels")

    @property
    def channels(self) -> List[int]:
        return [self.base_channels * m for m in self.channel_mult]

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        d["attention"] = list(self.attention)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        d = dict(d)
        d["channel_mult"] = tuple(d["channel_mult"])
        d["attention"] = tuple(d["attention"])
        return cls(**d)


def _groups_for(channels: int, groups: int) -> int:
    g = min(groups, channels)
    while channels % g:
        g -= 1
    return g


SIBLING_SHARE = 0.75


def label_group(label: str) -> str:
    """``"disk_2"`` -> ``"disk"``; labels without a numeric suffix form their own group."""
    head, sep, tail = label.rpartition("_")
    return head if sep and head and tail.isdigit() else label


def sibling_init(vocabulary: Sequence[str], own: np.ndarray, rng: Rng) -> np.ndarray:
    """Mix a shared per-class vector into each row so sub-classes of one class start close.

    Rows keep unit expected variance; siblings start with cosine similarity
    about ``SIBLING_SHARE``.
    """
    groups = [label_group(lab) for lab in vocabulary]
    shared = {g: rng.child("class", g).normal((own.shape[1],), own.dtype) for g in dict.fromkeys(groups)}
    base = np.stack([shared[g] for g in groups]) if groups else own
    return (math.sqrt(SIBLING_SHARE) * base + math.sqrt(1.0 - SIBLING_SHARE) * own).astype(own.dtype)


class LabelEmbedder(Module):
    """Closed-vocabulary label -> context vector: table lookup then a 2-layer MLP."""

    def __init__(self, vocabulary: Sequence[str], d_ctx: int, rng: Rng, dtype=np.float64):
        self.vocabulary = list(vocabulary)
        if len(set(self.vocabulary)) != len(self.vocabulary):
            raise VocabularyError("duplicate labels in vocabulary")
        self.index = {lab: i for i, lab in enumerate(self.vocabulary)}
        self.d_ctx = d_ctx
        self.table = Embedding(len(self.vocabulary), d_ctx, rng.child("table"), dtype)
        self.table.table.data = sibling_init(self.vocabulary, self.table.table.data, rng.child("shared"))
        self.fc1 = Linear(d_ctx, d_ctx, rng.child("fc1"), dtype=dtype)
        self.fc2 = Linear(d_ctx, d_ctx, rng.child("fc2"), dtype=dtype)

    def indices(self, labels: Sequence[str]) -> np.ndarray:
        try:
            return np.array([self.index[lab] for lab in labels], dtype=np.int64)
        except KeyError as e:
            raise VocabularyError(f"unknown label {e.args[0]!r}") from None

    def forward(self, labels: Sequence[str]) -> Tensor:
        """``[B, 1, d_ctx]`` context (one token per label)."""
        e = self.table(self.indices(labels))
        e = self.fc2(ops.silu(self.fc1(e)))
        return ops.reshape(e, (len(labels), 1, self.d_ctx))

    def embed_label(self, label: str) -> np.ndarray:
        with no_grad():
            return self.forward([label]).data.reshape(1, self.d_ctx)


def attend(q: Tensor, k: Tensor, v: Tensor) -> Tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d)) v over the last two axes; returns (output, attention)."""
    d = q.shape[-1]
    kt = ops.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    scores = ops.mul(ops.matmul(q, kt), 1.0 / math.sqrt(d))
    a = ops.softmax(scores, axis=-1)
    return ops.matmul(a, v), a


class CrossAttnLayer(Module):
    def __init__(self, d_l: int, d_ctx: int, d_a: int, rng: Rng, groups: int = 8, dtype=np.float64):
        self.d_l, self.d_ctx, self.d_a = d_l, d_ctx, d_a
        self.norm = GroupNorm(_groups_for(d_l, groups), d_l, dtype)
        self.w_q = Linear(d_l, d_a, rng.child("q"), bias=False, dtype=dtype)
        self.w_k = Linear(d_ctx, d_a, rng.child("k"), bias=False, dtype=dtype)
        self.w_v = Linear(d_ctx, d_a, rng.child("v"), bias=False, dtype=dtype)
        self.w_o = Linear(d_a, d_l, rng.child("o"), dtype=dtype)

    def tokens(self, z: Tensor, ctx: Tensor) -> Tuple[Tensor, Tensor]:
        """Residual cross-attention on token matrices ``[.., n, d_l]`` and ``[.., m, d_ctx]``."""
        if z.shape[-1] != self.d_l:
            raise ShapeError(f"query width {z.shape[-1]} != layer width {self.d_l}")
        if ctx.shape[-1] != self.d_ctx:
            raise ShapeError(f"context width {ctx.shape[-1]} != {self.d_ctx}")
        out, a = attend(self.w_q(z), self.w_k(ctx), self.w_v(ctx))
        return ops.add(z, self.w_o(out)), a

    def forward(self, x: Tensor, ctx: Tensor) -> Tensor:
        B, C, H, W = x.shape
        h = self.norm(x)
        tok = ops.transpose(ops.reshape(h, (B, C, H * W)), (0, 2, 1))
        if ctx.shape[-1] != self.d_ctx:
            raise ShapeError(f"context width {ctx.shape[-1]} != {self.d_ctx}")
        out, _ = attend(self.w_q(tok), self.w_k(ctx), self.w_v(ctx))
        out = ops.transpose(self.w_o(out), (0, 2, 1))
        return ops.add(x, ops.reshape(out, (B, C, H, W)))


def cross_attention(z: Tensor, ctx: Tensor, layer: CrossAttnLayer) -> Tensor:
    """Token-level cross-attention: ``z + W_o(A v)`` with ``A = softmax(q k^T / sqrt(d_a))``."""
    return layer.tokens(z, ctx)[0]


class ResBlock(Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int, groups: int, rng: Rng, dtype):
        self.norm1 = GroupNorm(_groups_for(c_in, groups), c_in, dtype)
        self.conv1 = Conv2d(c_in, c_out, rng.child("conv1"), dtype=dtype)
        self.time = Linear(time_dim, c_out, rng.child("time"), dtype=dtype)
        self.norm2 = GroupNorm(_groups_for(c_out, groups), c_out, dtype)
        self.conv2 = Conv2d(c_out, c_out, rng.child("conv2"), dtype=dtype)
        self.skip = Conv1x1(c_in, c_out, rng.child("skip"), dtype) if c_in != c_out else None

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(ops.silu(self.norm1(x)))
        tb = self.time(ops.silu(temb))
        h = ops.add(h, ops.reshape(tb, tb.shape + (1, 1)))
        h = self.conv2(ops.silu(self.norm2(h)))
        return ops.add(h, x if self.skip is None else self.skip(x))


class UNet(Module):
    """eps_theta(x_t, t, tau(y)): residual conv U-Net with cross-attention sites."""

    def __init__(self, config: UNetConfig, vocabulary: Sequence[str], rng: Rng):
        config.validate()
        self.config = config
        dt = config.np_dtype
        ch = config.channels
        g = config.groups
        td = config.time_dim
        self.embedder = LabelEmbedder(vocabulary, config.d_ctx, rng.child("embedder"), dt)
        self.time1 = Linear(td, td, rng.child("time1"), dtype=dt)
        self.time2 = Linear(td, td, rng.child("time2"), dtype=dt)
        self.conv_in = Conv2d(config.in_channels, ch[0], rng.child("conv_in"), dtype=dt)

        def attn(site, width):
            if site in config.attention:
                return CrossAttnLayer(width, config.d_ctx, config.d_attn, rng.child("attn", site), g, dt)
            return None

        self.enc = [ResBlock(ch[l], ch[l], td, g, rng.child("enc", l), dt) for l in range(config.depth)]
        self.enc_attn = [attn(f"enc{l}", ch[l]) for l in range(config.depth)]
        self.down = [Conv2d(ch[l], ch[l + 1], rng.child("down", l), stride=2, dtype=dt) for l in range(config.depth)]
        self.mid1 = ResBlock(ch[-1], ch[-1], td, g, rng.child("mid1"), dt)
        self.mid_attn = attn("bottleneck", ch[-1])
        self.mid2 = ResBlock(ch[-1], ch[-1], td, g, rng.child("mid2"), dt)
        self.dec = [ResBlock(ch[l + 1] + ch[l], ch[l], td, g, rng.child("dec", l), dt) for l in range(config.depth)]
        self.dec_attn = [attn(f"dec{l}", ch[l]) for l in range(config.depth)]
        self.norm_out = GroupNorm(_groups_for(ch[0], g), ch[0], dt)
        self.conv_out = Conv2d(ch[0], config.in_channels, rng.child("conv_out"), dtype=dt)
        self.assign_ids()

    @property
    def vocabulary(self) -> List[str]:
        return self.embedder.vocabulary

    def time_embedding(self, t) -> Tensor:
        e = Tensor(ops.sinusoidal_time_embed(np.asarray(t), self.config.time_dim, self.config.np_dtype))
        return self.time2(ops.silu(self.time1(e)))

    def forward(self, x, t, labels: Sequence[str] = None, ctx: Optional[Tensor] = None) -> Tensor:
        cfg = self.config
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=cfg.np_dtype))
        if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ShapeError(f"input {x.shape} does not match [B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}]")
        B = x.shape[0]
        t = np.broadcast_to(np.asarray(t), (B,))
        if ctx is None:
            if labels is None or len(labels) != B:
                raise ShapeError("need one label per sample")
            ctx = self.embedder(labels)
        temb = self.time_embedding(t)
        h = self.conv_in(x)
        skips = []
        for l in range(cfg.depth):
            h = self.enc[l](h, temb)
            if self.enc_attn[l] is not None:
                h = self.enc_attn[l](h, ctx)
            skips.append(h)
            h = self.down[l](h)
        h = self.mid1(h, temb)
        if self.mid_attn is not None:
            h = self.mid_attn(h, ctx)
        h = self.mid2(h, temb)
        for l in reversed(range(cfg.depth)):
            h = ops.concat([ops.upsample2x(h), skips[l]], axis=1)
            h = self.dec[l](h, temb)
            if self.dec_attn[l] is not None:
                h = self.dec_attn[l](h, ctx)
        return self.conv_out(ops.silu(self.norm_out(h)))

    def denoise(self, x_t, t, labels: Sequence[str]) -> np.ndarray:
        with no_grad():
            return self.forward(x_t, t, labels).data

    def eps_fn(self, labels: Sequence[str]):
        """Closure for :func:`clusdiff.diffusion.sample_loop`; the context is embedded once."""
        with no_grad():
            ctx = self.embedder(labels) if len(labels) else None

        def fn(x, t, _cond=None):
            with no_grad():
                return self.forward(x.astype(self.config.np_dtype, copy=False), t, ctx=ctx).data

        return fn

    # persistence -------------------------------------------------------------
    def save(self, path, extra: Optional[dict] = None) -> None:
        manifest = {"config": self.config.to_dict(), "vocabulary": self.vocabulary}
        if extra:
            manifest.update(extra)
        checkpoint.save(path, "denoiser", manifest, self.state_dict())

    @classmethod
    def load(cls, path) -> "UNet":
        manifest, state = checkpoint.load(path, expect_kind="denoiser")
        model = cls(UNetConfig.from_dict(manifest["config"]), manifest["vocabulary"], Rng(0))
        model.load_state_dict(state)
        return model


@dataclass
class TrainResult:
    losses: List[float] = field(default_factory=list)
    epoch_means: List[float] = field(default_factory=list)


def loss_on_batch(model: UNet, x0: np.ndarray, labels: Sequence[str], t: np.ndarray, eps: np.ndarray, sched: NoiseSchedule) -> Tensor:
    """Conditional denoising loss for explicit (t, eps) draws."""
    x_t = forward_sample(x0, t, eps, sched)
    pred = model(Tensor(x_t.astype(model.config.np_dtype)), t, labels)
    return denoise_loss(pred, eps.astype(model.config.np_dtype))


def train(
    model: UNet,
    dataset,
    sched: NoiseSchedule,
    epochs: int,
    opt: AdamState,
    rng: Rng,
    batch_size: int = 32,
    log_every: int = 0,
) -> TrainResult:
    """Regress injected noise with uniformly drawn steps; embedder and U-Net train jointly.

    ``dataset`` needs ``.z`` (``[N, C, H, W]``) and ``.labels`` (N strings).
    Noise and step for sample ``i`` in epoch ``e`` come from stream ``("sample", e, i)``.
    """
    z = np.asarray(dataset.z)
    labels = list(dataset.labels)
    n = len(labels)
    if n == 0 or z.shape[0] != n:
        raise DataError("training needs a nonempty dataset with one label per sample")
    model.embedder.indices(labels)  # fail fast on unknown labels
    dt = model.config.np_dtype
    params = model.parameters()
    res = TrainResult()
    for epoch in range(epochs):
        order = rng.child("perm", epoch).permutation(n)
        ep_losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            ts = np.empty(len(idx), dtype=np.int64)
            eps = np.empty((len(idx),) + z.shape[1:], dtype=np.float64)
            for j, i in enumerate(idx):
                g = rng.child("sample", epoch, int(i)).generator()
                ts[j] = g.integers(1, sched.T + 1)
                eps[j] = g.standard_normal(z.shape[1:])
            batch_labels = [labels[i] for i in idx]
            try:
                loss = loss_on_batch(model, z[idx].astype(dt), batch_labels, ts, eps.astype(dt), sched)
            except NumericError as e:
                raise NumericError(f"non-finite value at epoch {epoch} step {start // batch_size}: {e}") from e
            val = loss.item()
            if not np.isfinite(val):
                raise NumericError(f"non-finite loss at epoch {epoch} step {start // batch_size}")
            loss.backward()
            adam_step(params, opt)
            res.losses.append(val)
            ep_losses.append(val)
        res.epoch_means.append(float(np.mean(ep_losses)))
        if log_every and (epoch + 1) % log_every == 0:
            log.info("epoch %d loss %.5f", epoch + 1, res.epoch_means[-1])
    return res


def make_optimizer(model: Module, lr: float = 1e-3) -> AdamState:
    return AdamState.for_params(model.parameters(), lr=lr)
