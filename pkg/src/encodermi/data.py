"""Images, dataset loaders, split construction and the augmentation pipeline.

Images are float32 numpy arrays of shape (H, W, C) with values in [0, 1] and
C == 3 (grayscale inputs are replicated on load). Datasets keep their raw
pixels and hand out such arrays on access, already resized to the dataset's
working resolution.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import pickle
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image
from scipy.ndimage import gaussian_filter

from .rng import child_rng


class InsufficientDataError(ValueError):
    pass


class UnknownRoleError(ValueError):
    pass


class OddPoolError(ValueError):
    pass


class SplitOverlapError(ValueError):
    pass


# ---------------------------------------------------------------------------
# image tensors

def as_image(pixels) -> np.ndarray:
    """Validate and normalize an image to float32 HxWx3 in [0, 1].

    uint8 input is scaled by 1/255; 2-D and single-channel input is
    replicated to three channels.
    """
    arr = np.asarray(pixels)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    else:
        arr = arr.astype(np.float32, copy=False)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3) or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"expected an HxWx1 or HxWx3 image, got shape {arr.shape}")
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return arr


def resize(image: np.ndarray, height: int, width: int, box=None) -> np.ndarray:
    """Bilinear resize of an HxWxC float image, optionally of the crop ``box``.

    ``box`` is (left, upper, right, lower) in pixel coordinates. Aspect ratio
    is not preserved (stretch-to-fit).
    """
    h, w = image.shape[:2]
    if box is None and (h, w) == (height, width):
        return image.copy()
    out = np.empty((height, width, image.shape[2]), dtype=np.float32)
    for c in range(image.shape[2]):
        # mode "F" reads the buffer as float32, so the cast is required
        chan = Image.fromarray(np.ascontiguousarray(image[:, :, c], dtype=np.float32), mode="F")
        out[:, :, c] = np.asarray(
            chan.resize((width, height), Image.BILINEAR, box=box), dtype=np.float32
        )
    return np.clip(out, 0.0, 1.0)


def to_grayscale(image: np.ndarray) -> np.ndarray:
    return image[..., 0] * 0.299 + image[..., 1] * 0.587 + image[..., 2] * 0.114


# ---------------------------------------------------------------------------
# augmentation

AUG_KINDS = (
    "random-resized-crop",
    "random-grayscale",
    "random-horizontal-flip",
    "color-jitter",
    "gaussian-blur",
)

_DEFAULT_PARAMS = {
    "random-resized-crop": {"scale": (0.2, 1.0), "ratio": (3 / 4, 4 / 3)},
    "random-grayscale": {"p": 0.2},
    "random-horizontal-flip": {"p": 0.5},
    "color-jitter": {"brightness": 0.4, "contrast": 0.4, "saturation": 0.4, "hue": 0.1, "p": 1.0},
    "gaussian-blur": {"sigma": (0.1, 2.0), "kernel_frac": 0.1, "p": 0.5},
}


def _check_prob(kind, p):
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"{kind}: probability must be in [0, 1], got {p}")


@dataclasses.dataclass(frozen=True)
class AugmentationOp:
    kind: str
    params: tuple = ()

    def __post_init__(self):
        if self.kind not in AUG_KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        merged = dict(_DEFAULT_PARAMS[self.kind])
        for key, value in dict(self.params).items():
            if key not in merged:
                raise ValueError(f"{self.kind}: unknown parameter {key!r}")
            merged[key] = tuple(value) if isinstance(value, (list, tuple)) else value
        if "p" in merged:
            _check_prob(self.kind, merged["p"])
        if self.kind == "random-resized-crop":
            lo, hi = merged["scale"]
            if not 0.0 < lo <= hi <= 1.0:
                raise ValueError(f"crop scale must satisfy 0 < lo <= hi <= 1, got {merged['scale']}")
            rlo, rhi = merged["ratio"]
            if not 0.0 < rlo <= rhi:
                raise ValueError(f"crop ratio must satisfy 0 < lo <= hi, got {merged['ratio']}")
        elif self.kind == "color-jitter":
            for key in ("brightness", "contrast", "saturation"):
                if not 0.0 <= merged[key] <= 1.0:
                    raise ValueError(f"color-jitter {key} must be in [0, 1]")
            if not 0.0 <= merged["hue"] <= 0.5:
                raise ValueError("color-jitter hue must be in [0, 0.5]")
        elif self.kind == "gaussian-blur":
            lo, hi = merged["sigma"]
            if not 0.0 < lo <= hi:
                raise ValueError("gaussian-blur sigma range must be positive and ordered")
        object.__setattr__(self, "params", tuple(sorted(merged.items())))

    @property
    def p(self):
        return dict(self.params)

    def to_dict(self):
        return {"kind": self.kind, "params": {k: list(v) if isinstance(v, tuple) else v
                                              for k, v in self.params}}


def op(kind, **params) -> AugmentationOp:
    return AugmentationOp(kind, tuple(params.items()))


@dataclasses.dataclass(frozen=True)
class AugmentationPipeline:
    ops: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))

    def to_dict(self):
        return {"ops": [o.to_dict() for o in self.ops]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(op(o["kind"], **o.get("params", {})) for o in d["ops"]))

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def kinds(self):
        return [o.kind for o in self.ops]


def moco_v1_pipeline() -> AugmentationPipeline:
    """Crop, grayscale, color jitter, flip with the MoCo-v1 style defaults."""
    return AugmentationPipeline((
        op("random-resized-crop"),
        op("random-grayscale"),
        op("color-jitter"),
        op("random-horizontal-flip"),
    ))


def simclr_pipeline() -> AugmentationPipeline:
    return AugmentationPipeline((
        op("random-resized-crop", scale=(0.08, 1.0)),
        op("random-horizontal-flip"),
        op("color-jitter", brightness=0.4, contrast=0.4, saturation=0.4, hue=0.1, p=0.8),
        op("random-grayscale"),
    ))


def crop_only_pipeline() -> AugmentationPipeline:
    return AugmentationPipeline((op("random-resized-crop"),))


def pipeline_from_kinds(kinds: Sequence[str]) -> AugmentationPipeline:
    return AugmentationPipeline(tuple(op(k) for k in kinds))


PIPELINES = {
    "moco": moco_v1_pipeline,
    "simclr": simclr_pipeline,
    "crop-only": crop_only_pipeline,
}


def _crop_box(rng, h, w, scale, ratio):
    area = h * w
    log_ratio = np.log(ratio)
    for _ in range(10):
        target_area = area * rng.uniform(scale[0], scale[1])
        aspect = np.exp(rng.uniform(log_ratio[0], log_ratio[1]))
        cw = int(round(np.sqrt(target_area * aspect)))
        ch = int(round(np.sqrt(target_area / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return left, top, left + cw, top + ch
    # central-crop fallback
    in_ratio = w / h
    if in_ratio < ratio[0]:
        cw, ch = w, int(round(w / ratio[0]))
    elif in_ratio > ratio[1]:
        ch, cw = h, int(round(h * ratio[1]))
    else:
        cw, ch = w, h
    top, left = (h - ch) // 2, (w - cw) // 2
    return left, top, left + cw, top + ch


def _adjust_hue(image, shift):
    hsv = rgb_to_hsv(image)
    hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
    return hsv_to_rgb(hsv).astype(np.float32)


def _color_jitter(image, rng, prm):
    b, c, s, hue = prm["brightness"], prm["contrast"], prm["saturation"], prm["hue"]
    order = rng.permutation(4)
    factors = (
        rng.uniform(1 - b, 1 + b),
        rng.uniform(1 - c, 1 + c),
        rng.uniform(1 - s, 1 + s),
        rng.uniform(-hue, hue),
    )
    out = image
    for idx in order:
        f = factors[idx]
        if idx == 0:
            out = np.clip(out * f, 0, 1)
        elif idx == 1:
            mean = to_grayscale(out).mean()
            out = np.clip(out * f + mean * (1 - f), 0, 1)
        elif idx == 2:
            gray = to_grayscale(out)[..., None]
            out = np.clip(out * f + gray * (1 - f), 0, 1)
        elif f != 0.0:
            out = _adjust_hue(out, f)
    return out.astype(np.float32)


def _apply(op_: AugmentationOp, image, rng):
    prm = op_.p
    h, w = image.shape[:2]
    kind = op_.kind
    if kind == "random-resized-crop":
        box = _crop_box(rng, h, w, prm["scale"], prm["ratio"])
        return resize(image, h, w, box=box)
    if kind == "random-grayscale":
        if rng.random() < prm["p"]:
            gray = to_grayscale(image)
            return np.repeat(gray[..., None], 3, axis=2).astype(np.float32)
        return image
    if kind == "random-horizontal-flip":
        if rng.random() < prm["p"]:
            return image[:, ::-1].copy()
        return image
    if kind == "color-jitter":
        if rng.random() < prm["p"]:
            return _color_jitter(image, rng, prm)
        return image
    if kind == "gaussian-blur":
        if rng.random() < prm["p"]:
            sigma = rng.uniform(*prm["sigma"])
            radius = max(1, int(round(prm["kernel_frac"] * min(h, w) / 2)))
            out = gaussian_filter(image, sigma=(sigma, sigma, 0), mode="reflect",
                                  truncate=radius / sigma)
            return np.clip(out, 0, 1).astype(np.float32)
        return image
    raise AssertionError(kind)


def augment(image: np.ndarray, pipeline: AugmentationPipeline, rng: np.random.Generator) -> np.ndarray:
    """Apply ``pipeline`` to ``image`` drawing all randomness from ``rng``.

    The output has the same shape as the input. The input is never modified.
    """
    out = image
    for op_ in pipeline.ops:
        out = _apply(op_, out, rng)
    if out is image:
        out = image.copy()
    return out


def augment_views(image, pipeline, rng, n) -> np.ndarray:
    """``n`` independent augmented views stacked as (n, H, W, C)."""
    return np.stack([augment(image, pipeline, rng) for _ in range(n)])


# ---------------------------------------------------------------------------
# datasets

class ImageDataset:
    """Indexable collection of images with optional integer labels."""

    name: str = "dataset"
    resolution: int | None = None
    labels: np.ndarray | None = None

    def __len__(self):
        raise NotImplementedError

    def _raw(self, i) -> np.ndarray:
        raise NotImplementedError

    def image(self, i) -> np.ndarray:
        img = as_image(self._raw(int(i)))
        if self.resolution is not None and img.shape[:2] != (self.resolution, self.resolution):
            img = resize(img, self.resolution, self.resolution)
        return img

    def images(self, ids) -> np.ndarray:
        return np.stack([self.image(i) for i in ids]) if len(ids) else np.zeros((0, 0, 0, 3), np.float32)

    def label(self, i) -> int:
        if self.labels is None:
            raise MissingLabelsError(f"dataset {self.name!r} has no labels")
        return int(self.labels[int(i)])

    @property
    def has_labels(self):
        return self.labels is not None


class MissingLabelsError(ValueError):
    pass


class ArrayDataset(ImageDataset):
    """Images held in an (N, H, W, C) array (uint8 or float in [0, 1])."""

    def __init__(self, name, images, labels=None, resolution=None):
        self.name = name
        self.array = images
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        self.resolution = resolution
        if self.labels is not None and len(self.labels) != len(images):
            raise ValueError("labels and images differ in length")

    def __len__(self):
        return len(self.array)

    def _raw(self, i):
        return self.array[i]


class FileDataset(ImageDataset):
    """Images read lazily from files via PIL."""

    def __init__(self, name, paths, labels=None, resolution=None):
        self.name = name
        self.paths = [str(p) for p in paths]
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        self.resolution = resolution

    def __len__(self):
        return len(self.paths)

    def _raw(self, i):
        with Image.open(self.paths[i]) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)


class ConcatDataset(ImageDataset):
    """Several datasets addressed with one contiguous id space."""

    def __init__(self, name, parts, resolution=None):
        self.name = name
        self.parts = list(parts)
        self.resolution = resolution
        self.offsets = np.cumsum([0] + [len(p) for p in self.parts])
        if all(p.labels is not None for p in self.parts):
            self.labels = np.concatenate([p.labels for p in self.parts])
        else:
            self.labels = None

    def __len__(self):
        return int(self.offsets[-1])

    def part_range(self, k):
        return range(int(self.offsets[k]), int(self.offsets[k + 1]))

    def _raw(self, i):
        k = int(np.searchsorted(self.offsets, i, side="right") - 1)
        return self.parts[k].image(i - self.offsets[k])


def load_cifar10(root, part="train", resolution=32) -> ArrayDataset:
    """Load the python-pickle CIFAR10 layout (``cifar-10-batches-py``)."""
    base = Path(root)
    if (base / "cifar-10-batches-py").is_dir():
        base = base / "cifar-10-batches-py"
    files = [f"data_batch_{i}" for i in range(1, 6)] if part == "train" else ["test_batch"]
    if part not in ("train", "test"):
        raise ValueError(f"CIFAR10 part must be train or test, got {part!r}")
    data, labels = [], []
    for fname in files:
        path = base / fname
        if not path.exists():
            raise FileNotFoundError(f"CIFAR10 batch not found: {path}")
        with open(path, "rb") as fh:
            batch = pickle.load(fh, encoding="bytes")
        data.append(np.asarray(batch[b"data"], dtype=np.uint8))
        labels.extend(batch[b"labels"])
    images = np.concatenate(data).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return ArrayDataset(f"cifar10-{part}", np.ascontiguousarray(images), labels, resolution)


def load_stl10(root, part="unlabeled", resolution=32) -> ArrayDataset:
    """Load the binary STL10 layout (``stl10_binary``), memory-mapped."""
    base = Path(root)
    if (base / "stl10_binary").is_dir():
        base = base / "stl10_binary"
    if part not in ("train", "test", "unlabeled"):
        raise ValueError(f"STL10 part must be train, test or unlabeled, got {part!r}")
    xpath = base / f"{part}_X.bin"
    if not xpath.exists():
        raise FileNotFoundError(f"STL10 file not found: {xpath}")
    raw = np.memmap(xpath, dtype=np.uint8, mode="r").reshape(-1, 3, 96, 96)
    # stored column-major per channel
    images = raw.transpose(0, 3, 2, 1)
    labels = None
    ypath = base / f"{part}_y.bin"
    if part != "unlabeled" and ypath.exists():
        labels = np.fromfile(ypath, dtype=np.uint8).astype(np.int64) - 1
    return ArrayDataset(f"stl10-{part}", images, labels, resolution)


def load_tiny_imagenet(root, part="train", resolution=32) -> FileDataset:
    """Load the ``tiny-imagenet-200`` directory layout."""
    base = Path(root)
    if (base / "tiny-imagenet-200").is_dir():
        base = base / "tiny-imagenet-200"
    wnids = (base / "wnids.txt").read_text().split()
    index = {w: k for k, w in enumerate(wnids)}
    paths, labels = [], []
    if part == "train":
        for w in wnids:
            for p in sorted((base / "train" / w / "images").glob("*.JPEG")):
                paths.append(p)
                labels.append(index[w])
    elif part in ("val", "test"):
        for line in (base / "val" / "val_annotations.txt").read_text().splitlines():
            fields = line.split("\t")
            if len(fields) >= 2:
                paths.append(base / "val" / "images" / fields[0])
                labels.append(index[fields[1]])
    else:
        raise ValueError(f"Tiny-ImageNet part must be train or val, got {part!r}")
    return FileDataset(f"tiny-imagenet-{part}", paths, labels, resolution)


IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}


def load_image_directory(root, resolution=None, name=None, labeled=False) -> FileDataset:
    """Every image file under ``root`` in sorted order.

    With ``labeled=True`` the first-level subdirectory names are the classes.
    """
    root = Path(root)
    paths = sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    labels = None
    if labeled:
        classes = sorted({p.relative_to(root).parts[0] for p in paths if len(p.relative_to(root).parts) > 1})
        cidx = {c: k for k, c in enumerate(classes)}
        paths = [p for p in paths if len(p.relative_to(root).parts) > 1]
        labels = [cidx[p.relative_to(root).parts[0]] for p in paths]
    return FileDataset(name or root.name, paths, labels, resolution)


# -- procedural data -----------------------------------------------------

def _shape_mask(cls, yy, xx, rng):
    angle = rng.uniform(0, np.pi)
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * xx + sa * yy
    v = -sa * xx + ca * yy
    r = np.sqrt(xx ** 2 + yy ** 2)
    if cls == 0:
        return r < 1.0
    if cls == 1:
        return (np.abs(u) < 0.8) & (np.abs(v) < 0.8)
    if cls == 2:
        return (v > -0.6) & (v < 0.9 - 1.6 * np.abs(u))
    if cls == 3:
        return ((np.abs(u) < 0.25) | (np.abs(v) < 0.25)) & (np.maximum(np.abs(u), np.abs(v)) < 1.0)
    if cls == 4:
        return (r < 1.0) & (r > 0.55)
    if cls == 5:
        return (np.abs(u) < 1.0) & (np.abs(v) < 1.0) & (np.sin(v * 6) > 0)
    if cls == 6:
        return (np.abs(u) + np.abs(v)) < 1.0
    if cls == 7:
        return (u / 1.1) ** 2 + (v / 0.45) ** 2 < 1.0
    if cls == 8:
        return (np.abs(u) < 1.0) & (np.abs(v) < 1.0) & ((np.floor(u * 2) + np.floor(v * 2)) % 2 == 0)
    return (r < 1.0) & (np.cos(5 * np.arctan2(v, u)) > 0)


def make_synthetic_dataset(n, seed=0, resolution=32, num_classes=10, style="shapes", name=None):
    """Procedural labeled images: one colored shape per image on a noisy background.

    ``style="shapes"`` uses smooth gradient backgrounds; ``style="textures"``
    uses sinusoidal texture backgrounds and a muted palette, giving a second,
    visibly different distribution.
    """
    if style not in ("shapes", "textures"):
        raise ValueError(f"unknown synthetic style {style!r}")
    rng = child_rng(seed, "synthetic", style)
    res = resolution
    grid = (np.arange(res) + 0.5) / res * 2 - 1
    gy, gx = np.meshgrid(grid, grid, indexing="ij")
    images = np.empty((n, res, res, 3), dtype=np.uint8)
    labels = rng.integers(0, num_classes, size=n)
    for k in range(n):
        if style == "shapes":
            c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
            a = rng.uniform(0, 2 * np.pi)
            t = (gx * np.cos(a) + gy * np.sin(a) + 1) / 2
            bg = c0 * (1 - t[..., None]) + c1 * t[..., None]
            fg = rng.uniform(0, 1, 3)
        else:
            f = rng.uniform(2, 8, 2)
            ph = rng.uniform(0, 2 * np.pi, 2)
            tex = 0.5 + 0.25 * np.sin(f[0] * np.pi * gx + ph[0]) * np.cos(f[1] * np.pi * gy + ph[1])
            base = rng.uniform(0.2, 0.6, 3)
            bg = base * (0.5 + tex[..., None])
            fg = rng.uniform(0.3, 0.8, 3)
        size = rng.uniform(0.35, 0.7)
        cy, cx = rng.uniform(-0.4, 0.4, 2)
        mask = _shape_mask(labels[k] % 10, (gy - cy) / size, (gx - cx) / size, rng)
        img = np.where(mask[..., None], fg, bg)
        img = img + rng.normal(0, 0.06, img.shape)
        images[k] = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    return ArrayDataset(name or f"synthetic-{style}", images, labels, resolution)


def load_dataset(kind, root=None, part="train", resolution=32, **kwargs) -> ImageDataset:
    """Dispatch on a dataset kind name as used in experiment manifests."""
    if root is None and kind in ("cifar10", "stl10", "tiny-imagenet", "directory"):
        root = os.environ.get("ENCODERMI_DATA_ROOT")
        if root is None:
            raise FileNotFoundError(
                f"no root given for dataset {kind!r} and ENCODERMI_DATA_ROOT is unset")
        if kind != "directory":
            root = Path(root)
    if kind == "cifar10":
        return load_cifar10(root, part, resolution)
    if kind == "stl10":
        return load_stl10(root, part, resolution)
    if kind == "tiny-imagenet":
        return load_tiny_imagenet(root, part, resolution)
    if kind == "directory":
        return load_image_directory(root, resolution, **kwargs)
    if kind.startswith("synthetic-"):
        seed = kwargs.get("seed", 0)
        n = kwargs.get("size", 6000)
        # distinct parts get distinct images from the same generator family
        offset = {"train": 0, "test": 1, "unlabeled": 2}.get(part, 3)
        return make_synthetic_dataset(n, seed=seed * 10 + offset, resolution=resolution,
                                      style=kind.split("-", 1)[1], name=f"{kind}-{part}")
    raise ValueError(f"unknown dataset kind {kind!r}")


# ---------------------------------------------------------------------------
# splits

ROLES = (
    "pretrain-member",
    "shadow-member",
    "shadow-nonmember",
    "eval-member",
    "eval-nonmember",
    "downstream-train",
    "downstream-test",
)


@dataclasses.dataclass(frozen=True)
class DatasetSplit:
    name: str
    role: str
    indices: tuple
    source: str = ""

    def __post_init__(self):
        if self.role not in ROLES:
            raise UnknownRoleError(f"unknown split role {self.role!r}")
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))

    def __len__(self):
        return len(self.indices)

    def to_dict(self):
        return {"name": self.name, "role": self.role, "source": self.source,
                "indices": list(self.indices)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["role"], tuple(d["indices"]), d.get("source", ""))


def make_splits(dataset, sizes: Mapping[str, int], seed: int,
                pools: Mapping[str, Sequence[int]] | None = None) -> list[DatasetSplit]:
    """Sample disjoint id lists for each requested role.

    Roles are drawn in canonical order without replacement from the dataset
    (or from ``pools[role]`` when given). ``eval-member`` is the one
    exception: it is drawn from the ``pretrain-member`` ids, since evaluation
    members must be actual pre-training members.
    """
    n_total = len(dataset)
    for role, size in sizes.items():
        if role not in ROLES:
            raise UnknownRoleError(f"unknown split role {role!r}")
        if int(size) < 0:
            raise ValueError(f"split size for {role} must be >= 0")
    if "eval-member" in sizes and sizes["eval-member"] > sizes.get("pretrain-member", 0):
        raise InsufficientDataError(
            "eval-member size exceeds pretrain-member size")
    disjoint = sum(int(s) for r, s in sizes.items() if r != "eval-member")
    if pools is None and disjoint > n_total:
        raise InsufficientDataError(
            f"requested {disjoint} records but dataset {dataset.name!r} has {n_total}")
    rng = child_rng(seed, "splits", dataset.name)
    used = np.zeros(n_total, dtype=bool)
    out = {}
    for role in ROLES:
        if role not in sizes or role == "eval-member":
            continue
        size = int(sizes[role])
        pool = np.arange(n_total) if pools is None or role not in pools else np.asarray(pools[role])
        pool = pool[~used[pool]]
        if size > len(pool):
            raise InsufficientDataError(
                f"role {role}: requested {size} records, only {len(pool)} available")
        chosen = np.sort(rng.choice(pool, size=size, replace=False)) if size else np.zeros(0, int)
        used[chosen] = True
        out[role] = DatasetSplit(role, role, tuple(chosen), dataset.name)
    if "eval-member" in sizes:
        members = np.asarray(out["pretrain-member"].indices, dtype=int)
        size = int(sizes["eval-member"])
        chosen = np.sort(rng.choice(members, size=size, replace=False)) if size else np.zeros(0, int)
        out["eval-member"] = DatasetSplit("eval-member", "eval-member", tuple(chosen), dataset.name)
    return [out[r] for r in ROLES if r in out]


def check_disjoint(splits: Sequence[DatasetSplit]):
    """Raise SplitOverlapError if two splits from one source share an id.

    ``eval-member`` is checked for containment in ``pretrain-member`` instead.
    """
    by_role = {s.role: s for s in splits}
    plain = [s for s in splits if s.role != "eval-member"]
    for a_pos, a in enumerate(plain):
        for b in plain[a_pos + 1:]:
            if a.source == b.source and set(a.indices) & set(b.indices):
                raise SplitOverlapError(f"splits {a.name!r} and {b.name!r} overlap")
    if "eval-member" in by_role:
        em = by_role["eval-member"]
        pm = by_role.get("pretrain-member")
        if pm is None or not set(em.indices) <= set(pm.indices):
            raise SplitOverlapError("eval-member ids must be a subset of pretrain-member ids")
        for s in plain:
            if s.role != "pretrain-member" and s.source == em.source and set(em.indices) & set(s.indices):
                raise SplitOverlapError(f"eval-member overlaps {s.name!r}")


def save_split_manifest(path, splits, seed):
    payload = {"seed": int(seed), "splits": {s.name: s.to_dict() for s in splits}}
    Path(path).write_text(json.dumps(payload, indent=1))


def load_split_manifest(path):
    payload = json.loads(Path(path).read_text())
    return [DatasetSplit.from_dict(d) for d in payload["splits"].values()], payload["seed"]


# ---------------------------------------------------------------------------
# concatenated non-members

def make_concat_nonmembers(pool: Sequence[np.ndarray], seed: int, size=None) -> list[np.ndarray]:
    """Pair the pool at random and join each pair side by side.

    Both images of a pair are first resized to ``size`` (H, W); by default
    the size of the pair's first image. Each output is H x 2W.
    """
    if len(pool) % 2:
        raise OddPoolError(f"pool size must be even, got {len(pool)}")
    order = child_rng(seed, "concat-pairs").permutation(len(pool))
    out = []
    for a, b in zip(order[0::2], order[1::2]):
        left, right = as_image(pool[a]), as_image(pool[b])
        h, w = size if size is not None else left.shape[:2]
        out.append(np.concatenate([resize(left, h, w), resize(right, h, w)], axis=1))
    return out
