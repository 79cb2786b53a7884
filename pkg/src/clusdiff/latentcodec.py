"""Encoder/decoder pair mapping model-space images to the diffusion working space.

The default ``identity`` codec keeps diffusion in pixel space. The ``ae``
variant is a small convolutional autoencoder with downsample factor 1 or 2,
trained on plain reconstruction MSE.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from clusdiff import checkpoint
from clusdiff.errors import ConfigError, DataError, NumericError, ShapeError
from clusdiff.nncore import AdamState, Conv2d, Module, Rng, Tensor, adam_step, no_grad, ops

log = logging.getLogger(__name__)

VARIANTS = ("identity", "ae")


class ConvAutoencoder(Module):
    def __init__(self, channels: int, latent_channels: int, hidden: int, factor: int, rng: Rng, dtype=np.float32):
        if factor not in (1, 2):
            raise ConfigError(f"downsample factor must be 1 or 2, got {factor}")
        self.factor = factor
        self.enc1 = Conv2d(channels, hidden, rng.child("enc1"), dtype=dtype)
        self.enc2 = Conv2d(hidden, hidden, rng.child("enc2"), stride=factor, dtype=dtype)
        self.enc3 = Conv2d(hidden, latent_channels, rng.child("enc3"), dtype=dtype)
        self.dec1 = Conv2d(latent_channels, hidden, rng.child("dec1"), dtype=dtype)
        self.dec2 = Conv2d(hidden, hidden, rng.child("dec2"), dtype=dtype)
        self.dec3 = Conv2d(hidden, channels, rng.child("dec3"), dtype=dtype)
        self.assign_ids()

    def encode(self, x: Tensor) -> Tensor:
        h = ops.silu(self.enc1(x))
        h = ops.silu(self.enc2(h))
        return self.enc3(h)

    def decode(self, z: Tensor) -> Tensor:
        h = ops.silu(self.dec1(z))
        if self.factor == 2:
            h = ops.upsample2x(h)
        h = ops.silu(self.dec2(h))
        return self.dec3(h)

    def forward(self, x: Tensor) -> Tensor:
        return self.decode(self.encode(x))


@dataclass
class Codec:
    """``encode``/``decode`` over ``[B, C, H, W]`` arrays.

    ``factor`` is the spatial downsample factor; the identity codec has factor 1
    and returns its input unchanged.
    """

    variant: str = "identity"
    factor: int = 1
    channels: int = 1
    latent_channels: int = 1
    hidden: int = 16
    net: Optional[ConvAutoencoder] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown codec variant {self.variant!r}")
        if self.variant == "identity":
            self.factor = 1
            self.latent_channels = self.channels
        elif self.factor not in (1, 2):
            raise ConfigError(f"downsample factor must be 1 or 2, got {self.factor}")

    @classmethod
    def autoencoder(cls, rng: Rng, factor: int = 2, channels: int = 1, latent_channels: int = 2, hidden: int = 16, dtype=np.float32) -> "Codec":
        net = ConvAutoencoder(channels, latent_channels, hidden, factor, rng, dtype)
        return cls("ae", factor, channels, latent_channels, hidden, net)

    def _check(self, x: np.ndarray, channels: int, what: str) -> None:
        if x.ndim != 4 or x.shape[1] != channels:
            raise ShapeError(f"{what} must be [B, {channels}, H, W], got {x.shape}")

    def latent_shape(self, image_shape) -> tuple:
        c, h, w = image_shape
        if h % self.factor or w % self.factor:
            raise ShapeError(f"extents {h}x{w} not divisible by factor {self.factor}")
        return (self.latent_channels, h // self.factor, w // self.factor)

    def encode(self, x) -> np.ndarray:
        x = np.asarray(x)
        self._check(x, self.channels, "images")
        self.latent_shape(x.shape[1:])
        if self.variant == "identity":
            return x
        with no_grad():
            return self.net.encode(Tensor(x.astype(self.net.enc1.k.dtype))).data

    def decode(self, z) -> np.ndarray:
        z = np.asarray(z)
        self._check(z, self.latent_channels, "latents")
        if self.variant == "identity":
            return z
        with no_grad():
            return self.net.decode(Tensor(z.astype(self.net.enc1.k.dtype))).data

    # persistence -------------------------------------------------------------
    def manifest(self) -> dict:
        return {
            "variant": self.variant,
            "factor": self.factor,
            "channels": self.channels,
            "latent_channels": self.latent_channels,
            "hidden": self.hidden,
        }

    def save(self, path) -> None:
        state = self.net.state_dict() if self.net is not None else {}
        checkpoint.save(path, "codec", self.manifest(), state)

    @classmethod
    def load(cls, path) -> "Codec":
        m, state = checkpoint.load(path, expect_kind="codec")
        if m["variant"] == "identity":
            return cls("identity", channels=m["channels"])
        codec = cls.autoencoder(Rng(0), m["factor"], m["channels"], m["latent_channels"], m["hidden"])
        codec.net.load_state_dict(state)
        return codec


@dataclass
class AETrainResult:
    codec: Codec
    losses: List[float] = field(default_factory=list)
    epoch_means: List[float] = field(default_factory=list)


def reconstruction_mse(codec: Codec, x) -> float:
    x = np.asarray(x)
    return float(np.mean((codec.decode(codec.encode(x)) - x) ** 2))


def train_autoencoder(
    data,
    epochs: int,
    rng: Rng,
    opt: Optional[AdamState] = None,
    factor: int = 2,
    latent_channels: int = 2,
    hidden: int = 16,
    lr: float = 5e-3,
    batch_size: int = 8,
) -> AETrainResult:
    """Fit an autoencoder codec to ``data`` (``[N, C, H, W]``, model space) by MSE."""
    x = np.asarray(data)
    if x.ndim != 4 or x.shape[0] == 0:
        raise DataError("autoencoder training needs a nonempty [N, C, H, W] array")
    codec = Codec.autoencoder(rng.child("init"), factor, x.shape[1], latent_channels, hidden)
    codec.latent_shape(x.shape[1:])
    net = codec.net
    params = net.parameters()
    opt = opt if opt is not None else AdamState.for_params(params, lr=lr)
    xf = x.astype(np.float32)
    res = AETrainResult(codec)
    n = len(xf)
    for epoch in range(epochs):
        order = rng.child("perm", epoch).permutation(n)
        ep = []
        for start in range(0, n, batch_size):
            batch = Tensor(xf[order[start:start + batch_size]])
            loss = ops.mse(net(batch), batch.data)
            val = loss.item()
            if not np.isfinite(val):
                raise NumericError(f"non-finite reconstruction loss at epoch {epoch}")
            loss.backward()
            adam_step(params, opt)
            res.losses.append(val)
            ep.append(val)
        res.epoch_means.append(float(np.mean(ep)))
        log.debug("codec epoch %d mse %.6f", epoch + 1, res.epoch_means[-1])
    return res
