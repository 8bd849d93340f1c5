"""Datasets: loading image/ground-truth pairs, synthetic shapes, augmentation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .model import pad_to_multiple
from .tensor import ContractError, Tensor, bilinear_resize

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm")


@dataclass(frozen=True)
class Sample:
    image: np.ndarray  # [3, h, w] in [0, 1]
    gt_prob: np.ndarray  # [1, h, w] in [0, 1]
    id: str
    orig_size: Optional[tuple] = None  # (h, w) before padding

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ContractError(f"{self.id}: image must be [3,h,w], got {self.image.shape}")
        if self.gt_prob.shape != (1, *self.image.shape[1:]):
            raise ContractError(f"{self.id}: gt {self.gt_prob.shape} does not match image {self.image.shape}")

    def crop(self, arr: np.ndarray) -> np.ndarray:
        """Cut a padded-resolution map back to the original size."""
        if self.orig_size is None:
            return arr
        h, w = self.orig_size
        return arr[..., :h, :w]


def read_image(path) -> np.ndarray:
    """RGB image as ``[3, h, w]`` float32 in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def read_gray(path) -> np.ndarray:
    """8-bit graymap as ``[h, w]`` float32 probabilities (value / 255)."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read graymap {path}: {exc}") from exc


def write_pgm(path, prob: np.ndarray) -> Path:
    """Write a ``[h, w]`` (or ``[1, h, w]``) map in [0, 1] as binary PGM, maxval 255."""
    arr = np.asarray(prob, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[0]
    h, w = arr.shape
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())
    return path


def write_ppm(path, image: np.ndarray) -> Path:
    arr = np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())
    return path


def load_dataset(directory, multiple: int = 32) -> list:
    """Read ``images/<id>.png|ppm`` paired with ``gt/<id>.pgm``.

    Samples come back in lexicographic id order, edge-padded to a multiple
    of ``multiple`` with the original size kept on each sample.
    """
    root = Path(directory)
    img_dir, gt_dir = root / "images", root / "gt"
    images = {p.stem: p for p in sorted(img_dir.glob("*")) if p.suffix.lower() in IMAGE_SUFFIXES} if img_dir.is_dir() else {}
    gts = {p.stem: p for p in sorted(gt_dir.glob("*.pgm"))} if gt_dir.is_dir() else {}
    if not images and not gts:
        logger.warning("no samples found under %s", root)
        return []
    unpaired = sorted(set(images) ^ set(gts))
    if unpaired:
        raise ValueError(f"unpaired files under {root}: {unpaired}")
    samples = []
    for key in sorted(images):
        img = read_image(images[key])
        gt = read_gray(gts[key])[None]
        if gt.shape[1:] != img.shape[1:]:
            raise ValueError(f"{key}: image {img.shape[1:]} and gt {gt.shape[1:]} differ in size")
        size = img.shape[1:]
        samples.append(Sample(pad_to_multiple(img, multiple), pad_to_multiple(gt, multiple), key, tuple(size)))
    return samples


def save_dataset(samples: Sequence[Sample], directory) -> Path:
    root = Path(directory)
    for s in samples:
        write_ppm(root / "images" / f"{s.id}.ppm", s.crop(s.image))
        write_pgm(root / "gt" / f"{s.id}.pgm", s.crop(s.gt_prob))
    return root


# ------------------------------------------------------------------ synthetic

_SUPERSAMPLE = 4
_SHADES = np.linspace(0.05, 0.95, 19)
_MIN_CONTRAST = 0.2


def _shape_mask(kind: str, params: tuple, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    if kind == "ellipse":
        cy, cx, ry, rx, theta = params
        c, s = np.cos(theta), np.sin(theta)
        dy, dx = yy - cy, xx - cx
        u = (dx * c + dy * s) / rx
        v = (-dx * s + dy * c) / ry
        return u * u + v * v <= 1.0
    verts = params[0]
    inside = np.zeros(yy.shape, bool)
    n = len(verts)
    for i in range(n):
        (y0, x0), (y1, x1) = verts[i], verts[(i + 1) % n]
        crosses = (y0 > yy) != (y1 > yy)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x0 + (yy - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (xx < xint)
    return inside


def _random_shape(rng: np.random.Generator, size: int) -> tuple:
    lo, hi = 0.15 * size, 0.85 * size
    if rng.random() < 0.5:
        return "ellipse", (
            rng.uniform(lo, hi), rng.uniform(lo, hi),
            rng.uniform(0.12, 0.3) * size, rng.uniform(0.12, 0.3) * size,
            rng.uniform(0, np.pi),
        )
    n = int(rng.integers(3, 7))
    cy, cx = rng.uniform(lo, hi, size=2)
    radius = rng.uniform(0.15, 0.32) * size
    angles = np.sort(rng.uniform(0, 2 * np.pi, n))
    r = radius * rng.uniform(0.7, 1.0, n)
    verts = tuple((cy + ri * np.sin(a), cx + ri * np.cos(a)) for ri, a in zip(r, angles))
    return "polygon", (verts,)


def _smooth_noise(rng: np.random.Generator, size: int, cells: int = 4) -> np.ndarray:
    coarse = Tensor(rng.random((1, cells, cells)), dtype=np.float64)
    return bilinear_resize(coarse, size, size).data[0]


def synth_sample(rng: np.random.Generator, size: int, ident: str) -> Sample:
    """One image of overlapping shapes on a textured background."""
    ss = _SUPERSAMPLE
    fine = (np.arange(size * ss) + 0.5) / ss
    yy_f, xx_f = np.meshgrid(fine, fine, indexing="ij")
    centers = np.arange(size) + 0.5
    yy, xx = np.meshgrid(centers, centers, indexing="ij")

    bg = rng.uniform(0.15, 0.85)
    base = np.empty((3, size, size))
    tint = rng.uniform(-0.08, 0.08, 3)
    texture = 0.1 * (_smooth_noise(rng, size) - 0.5) + 0.02 * rng.standard_normal((size, size))
    for ch in range(3):
        base[ch] = bg + tint[ch] + texture
    label = np.zeros((size, size), np.int32)
    shades = [bg]
    n_shapes = int(rng.integers(1, 4))
    for k in range(1, n_shapes + 1):
        kind, params = _random_shape(rng, size)
        free = [g for g in _SHADES if min(abs(g - s) for s in shades) >= _MIN_CONTRAST]
        if not free:
            break
        shade = float(rng.choice(free))
        shades.append(shade)
        cover = _shape_mask(kind, params, yy_f, xx_f).reshape(size, ss, size, ss).mean(axis=(1, 3))
        color = shade + rng.uniform(-0.05, 0.05, 3)
        for ch in range(3):
            base[ch] = base[ch] * (1.0 - cover) + color[ch] * cover
        label[_shape_mask(kind, params, yy, xx)] = k
    image = np.clip(base, 0.0, 1.0).astype(np.float32)
    return Sample(image, outline(label)[None].astype(np.float32), ident)


def outline(label: np.ndarray) -> np.ndarray:
    """1-px boundaries: a pixel is marked when a 4-neighbour has a lower label."""
    edge = np.zeros(label.shape, bool)
    edge[1:, :] |= label[1:, :] > label[:-1, :]
    edge[:-1, :] |= label[:-1, :] > label[1:, :]
    edge[:, 1:] |= label[:, 1:] > label[:, :-1]
    edge[:, :-1] |= label[:, :-1] > label[:, 1:]
    return edge


def synth_dataset(n: int, size: int = 64, seed: int = 7) -> list:
    """``n`` deterministic synthetic samples of ``size`` x ``size`` pixels."""
    if size % 32:
        raise ContractError(f"synthetic size must be a multiple of 32, got {size}")
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        while True:
            s = synth_sample(rng, size, f"synth_{seed}_{i:04d}")
            npos = int(s.gt_prob.sum())
            if 1 <= npos <= size * size // 4:
                break
        out.append(s)
    return out


# ----------------------------------------------------------------- augmentation


def _resize(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    return bilinear_resize(Tensor(arr, dtype=np.float32), h, w).data


def augment(sample: Sample, ops: Sequence) -> Sample:
    """Apply geometric ops in order to image and ground truth alike.

    Ops: ``"hflip"``, ``"vflip"``, ``("rot90", k)`` and ``("scale", s)`` with
    ``s`` in {0.5, 1.0, 1.5}. Scaling is bilinear for both the image and the
    probability map.
    """
    img, gt = sample.image, sample.gt_prob
    for op in ops:
        name, arg = (op, None) if isinstance(op, str) else op
        if name == "hflip":
            img, gt = img[:, :, ::-1], gt[:, :, ::-1]
        elif name == "vflip":
            img, gt = img[:, ::-1, :], gt[:, ::-1, :]
        elif name == "rot90":
            img, gt = np.rot90(img, arg, axes=(1, 2)), np.rot90(gt, arg, axes=(1, 2))
        elif name == "scale":
            if arg not in (0.5, 1.0, 1.5):
                raise ContractError(f"scale must be 0.5, 1.0 or 1.5, got {arg}")
            h = int(round(img.shape[1] * arg))
            w = int(round(img.shape[2] * arg))
            img, gt = _resize(np.ascontiguousarray(img), h, w), _resize(np.ascontiguousarray(gt), h, w)
        else:
            raise ContractError(f"unknown augmentation {op!r}")
    return replace(
        sample,
        image=np.ascontiguousarray(img, np.float32),
        gt_prob=np.ascontiguousarray(gt, np.float32),
        orig_size=None,
    )
