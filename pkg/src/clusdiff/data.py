"""The "shapes-mm" toy dataset, image sets, manifests and PNG storage.

Every class is a shape; every class has up to three planted modes, each mode
fixing the shape's centre offset and intensity. Pixel values live in [0, 1]
and are quantised to 8 bits so in-memory and on-disk copies agree exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image

from clusdiff.errors import ConfigError, DataError, MissingArtifactError
from clusdiff.nncore import Rng

SHAPES = ("disk", "square", "cross", "triangle", "ring", "bar")
MODE_OFFSETS = ((-5, -5), (0, 0), (5, 5))
MODE_INTENSITIES = (0.4, 0.7, 1.0)
NOISE_AMPLITUDE = 0.02
IMAGE_SIZE = 24


def shape_mask(shape: str, dy: float, dx: float, size: int = IMAGE_SIZE) -> np.ndarray:
    """Boolean mask of ``shape`` centred at ``size/2 + (dy, dx)``."""
    c = size / 2.0
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    y = yy - (c + dy)
    x = xx - (c + dx)
    r2 = x * x + y * y
    if shape == "disk":
        return r2 <= 4.0**2
    if shape == "square":
        return np.maximum(np.abs(x), np.abs(y)) <= 3.5
    if shape == "cross":
        return ((np.abs(x) <= 1.5) & (np.abs(y) <= 4.5)) | ((np.abs(y) <= 1.5) & (np.abs(x) <= 4.5))
    if shape == "triangle":
        return (y >= -4.5) & (y <= 4.5) & (np.abs(x) <= (y + 4.5) / 2.0)
    if shape == "ring":
        return (r2 >= 2.5**2) & (r2 <= 4.5**2)
    if shape == "bar":
        return (np.abs(x) <= 4.5) & (np.abs(y) <= 1.5)
    raise ConfigError(f"unknown shape {shape!r}")


def prototype(shape: str, mode: int, size: int = IMAGE_SIZE) -> np.ndarray:
    """Noise-free render of one planted mode."""
    dy, dx = MODE_OFFSETS[mode]
    return MODE_INTENSITIES[mode] * shape_mask(shape, dy, dx, size).astype(np.float64)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


@dataclass
class ImageSet:
    """Images ``[N, C, H, W]`` in [0, 1] with per-sample metadata."""

    images: np.ndarray
    ids: List[str]
    classes: List[str]
    modes: List[Optional[int]] = field(default_factory=list)
    synthetic: List[bool] = field(default_factory=list)
    subclass: List[Optional[str]] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.ids)
        if not self.modes:
            self.modes = [None] * n
        if not self.synthetic:
            self.synthetic = [False] * n
        if not self.subclass:
            self.subclass = [None] * n
        if self.images.shape[0] != n or len(self.classes) != n or len(self.modes) != n or len(self.synthetic) != n:
            raise DataError("image set fields disagree in length")
        if len(set(self.ids)) != n:
            raise DataError("sample ids must be unique")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def class_names(self) -> List[str]:
        """Distinct classes in order of first appearance."""
        return list(dict.fromkeys(self.classes))

    def subset(self, idx: Sequence[int]) -> "ImageSet":
        idx = list(idx)
        return ImageSet(
            images=self.images[idx] if idx else self.images[:0],
            ids=[self.ids[i] for i in idx],
            classes=[self.classes[i] for i in idx],
            modes=[self.modes[i] for i in idx],
            synthetic=[self.synthetic[i] for i in idx],
            subclass=[self.subclass[i] for i in idx],
        )

    def indices_of(self, cls: str) -> List[int]:
        return [i for i, c in enumerate(self.classes) if c == cls]

    def counts(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for c in self.classes:
            out[c] = out.get(c, 0) + 1
        return out

    @staticmethod
    def concat(sets: Sequence["ImageSet"]) -> "ImageSet":
        sets = list(sets)
        return ImageSet(
            images=np.concatenate([s.images for s in sets]),
            ids=[i for s in sets for i in s.ids],
            classes=[c for s in sets for c in s.classes],
            modes=[m for s in sets for m in s.modes],
            synthetic=[f for s in sets for f in s.synthetic],
            subclass=[y for s in sets for y in s.subclass],
        )

    def with_(self, **kw) -> "ImageSet":
        return replace(self, **kw)


def generate_shapes(
    classes: Sequence[str],
    n_modes: int,
    n_per_mode,
    seed: int,
    size: int = IMAGE_SIZE,
) -> ImageSet:
    """Render the shapes-mm dataset.

    ``n_per_mode`` is an int or a per-class mapping. Sample ``id`` is
    ``"<class>-m<mode>-<k>"``; its noise comes from stream ``("img", id)``.
    """
    if not 1 <= n_modes <= len(MODE_OFFSETS):
        raise ConfigError(f"n_modes must be in 1..{len(MODE_OFFSETS)}")
    rng = Rng(seed)
    imgs, ids, cls_list, modes = [], [], [], []
    for cls in classes:
        if cls not in SHAPES:
            raise ConfigError(f"unknown shape class {cls!r}; choose from {SHAPES}")
        count = n_per_mode[cls] if isinstance(n_per_mode, dict) else n_per_mode
        for m in range(n_modes):
            base = prototype(cls, m, size)
            for k in range(count):
                sid = f"{cls}-m{m}-{k:04d}"
                noise = rng.child("img", sid).uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, size=(size, size))
                imgs.append(quantize(base + noise))
                ids.append(sid)
                cls_list.append(cls)
                modes.append(m)
    images = np.stack(imgs)[:, None] if imgs else np.zeros((0, 1, size, size))
    return ImageSet(images=images, ids=ids, classes=cls_list, modes=modes)


# PNG + manifest storage --------------------------------------------------------

MANIFEST = "manifest.tsv"
_HEADER = ("id", "path", "class", "mode", "synthetic", "subclass")


def save_png(path, img: np.ndarray) -> None:
    """Write a ``[1, H, W]`` or ``[H, W]`` image in [0, 1] as 8-bit grayscale."""
    arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr[0]
    u8 = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(u8, mode="L").save(path, format="PNG", optimize=False)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64)[None] / 255.0


def write_imageset(root, data: ImageSet) -> Path:
    """Store images as PNGs plus a TSV manifest; returns the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    _, c, h, w = data.images.shape if len(data) else (0, 1, IMAGE_SIZE, IMAGE_SIZE)
    lines = ["# clusdiff manifest v1", f"# height={h} width={w} channels={c}", "\t".join(_HEADER)]
    for i, sid in enumerate(data.ids):
        rel = f"images/{sid}.png"
        save_png(root / rel, data.images[i])
        mode = "" if data.modes[i] is None else str(data.modes[i])
        sub = data.subclass[i] or ""
        lines.append("\t".join([sid, rel, data.classes[i], mode, str(int(data.synthetic[i])), sub]))
    path = root / MANIFEST
    path.write_text("\n".join(lines) + "\n")
    return path


def read_imageset(root) -> ImageSet:
    root = Path(root)
    path = root / MANIFEST
    if not path.exists():
        raise MissingArtifactError(path)
    rows = []
    extents = None
    for line in path.read_text().splitlines():
        if line.startswith("#"):
            if "height=" in line:
                kv = dict(part.split("=") for part in line[1:].split())
                extents = (int(kv["channels"]), int(kv["height"]), int(kv["width"]))
            continue
        if not line.strip() or line.startswith("id\t"):
            continue
        rows.append(line.split("\t"))
    imgs, ids, classes, modes, synth, subs = [], [], [], [], [], []
    for row in rows:
        row = row + [""] * (len(_HEADER) - len(row))
        sid, rel, cls, mode, syn, sub = row[:6]
        p = root / rel
        if not p.exists():
            raise MissingArtifactError(p)
        img = load_png(p)
        if extents is not None and img.shape != extents:
            raise DataError(f"{p}: extents {img.shape} differ from manifest {extents}")
        imgs.append(img)
        ids.append(sid)
        classes.append(cls)
        modes.append(int(mode) if mode else None)
        synth.append(syn == "1")
        subs.append(sub or None)
    c, h, w = extents if extents else (1, IMAGE_SIZE, IMAGE_SIZE)
    images = np.stack(imgs) if imgs else np.zeros((0, c, h, w))
    return ImageSet(images=images, ids=ids, classes=classes, modes=modes, synthetic=synth, subclass=subs)


def contact_sheet(path, images: np.ndarray, captions: Sequence[str], cols: int = 8, scale: int = 3) -> None:
    """Grid of upscaled samples with a caption strip under each cell."""
    from PIL import ImageDraw

    n = len(images)
    if n == 0:
        Image.new("L", (1, 1)).save(path)
        return
    h, w = images.shape[-2:]
    cw, ch = w * scale, h * scale
    cap_h = 12
    cols = min(cols, n)
    rows = -(-n // cols)
    cell_w = max(cw, 72)
    sheet = Image.new("L", (cols * cell_w, rows * (ch + cap_h)), color=0)
    draw = ImageDraw.Draw(sheet)
    for i in range(n):
        r, c = divmod(i, cols)
        arr = np.round(np.clip(np.asarray(images[i]).reshape(h, w), 0, 1) * 255).astype(np.uint8)
        tile = Image.fromarray(arr, mode="L").resize((cw, ch), Image.NEAREST)
        x0, y0 = c * cell_w, r * (ch + cap_h)
        sheet.paste(tile, (x0, y0))
        draw.text((x0 + 1, y0 + ch), captions[i][:12], fill=255)
    sheet.save(path, format="PNG")


def to_model_space(images: np.ndarray) -> np.ndarray:
    """[0, 1] pixels -> [-1, 1] diffusion working range."""
    return np.asarray(images) * 2.0 - 1.0


def from_model_space(x: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(x) + 1.0) / 2.0, 0.0, 1.0)


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
