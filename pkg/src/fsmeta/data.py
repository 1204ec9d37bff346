"""Dataset catalog, on-disk ingestion, synthetic scenes and class splits."""

from __future__ import annotations

import colorsys
import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .numerics.serialize import FormatError, load_tensor, save_tensor
from .seeding import component_rng

PathLike = Union[str, Path]


class DataError(ValueError):
    """Bad or inconsistent dataset input."""


@dataclass(frozen=True)
class DatasetIndex:
    """Class-partitioned catalog. Class ids are positions in ``classes``."""

    classes: tuple  # of (name, tuple of sample ids)
    image_shape: tuple

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def class_names(self) -> list[str]:
        return [name for name, _ in self.classes]

    def samples_of(self, class_id: int) -> tuple:
        return self.classes[class_id][1]


@dataclass
class Dataset:
    """Sample store plus its index; immutable by convention once built."""

    class_names: list[str]
    images: np.ndarray  # [N, 3, H, W], values in [0, 1]
    labels: np.ndarray  # [N] global class ids
    source_ids: list[str]
    index: DatasetIndex = field(init=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise DataError(f"images must be [N,3,H,W], got {self.images.shape}")
        if len(self.labels) != len(self.images) or len(self.source_ids) != len(self.images):
            raise DataError("images, labels and source ids disagree in length")
        if len(set(self.source_ids)) != len(self.source_ids):
            raise DataError("duplicate source ids")
        classes = []
        for k, name in enumerate(self.class_names):
            ids = tuple(int(i) for i in np.flatnonzero(self.labels == k))
            if not ids:
                raise DataError(f"class {name!r} has no samples")
            classes.append((name, ids))
        self.index = DatasetIndex(tuple(classes), tuple(self.images.shape[1:]))

    def __len__(self) -> int:
        return len(self.images)

    def same_as(self, other: "Dataset") -> bool:
        return (
            self.class_names == other.class_names
            and self.source_ids == other.source_ids
            and np.array_equal(self.labels, other.labels)
            and self.images.dtype == other.images.dtype
            and self.images.tobytes() == other.images.tobytes()
        )


# ---------------------------------------------------------------- file formats


_PPM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_ppm(path: PathLike) -> np.ndarray:
    """Binary PPM (P6) to a float32 ``[3, H, W]`` array scaled to [0, 1]."""
    raw = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PPM_TOKEN.match(raw, pos)
        if m is None:
            raise DataError(f"{path}: truncated PPM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P6":
        raise DataError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"{path}: malformed PPM header") from None
    if not 0 < maxval < 65536 or width <= 0 or height <= 0:
        raise DataError(f"{path}: invalid PPM dimensions or maxval")
    pos += 1  # single whitespace byte before the raster
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    count = width * height * 3
    if len(raw) - pos < count * dtype.itemsize:
        raise DataError(f"{path}: truncated PPM raster")
    pix = np.frombuffer(raw, dtype=dtype, count=count, offset=pos).reshape(height, width, 3)
    return (pix.astype(np.float32) / np.float32(maxval)).transpose(2, 0, 1).copy()


def write_ppm(path: PathLike, image: np.ndarray) -> None:
    """Write a ``[3, H, W]`` image in [0, 1] as an 8-bit P6 file."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    pix = np.round(img * 255.0).astype(np.uint8).transpose(1, 2, 0)
    h, w = pix.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(pix.tobytes())


def center_crop_resize(image: np.ndarray, size: tuple) -> np.ndarray:
    """Center-crop to the target aspect ratio, then nearest-neighbour resize."""
    _, h, w = image.shape
    th, tw = size
    if h * tw > w * th:
        ch, cw = max(1, round(w * th / tw)), w
    else:
        ch, cw = h, max(1, round(h * tw / th))
    top, left = (h - ch) // 2, (w - cw) // 2
    crop = image[:, top : top + ch, left : left + cw]
    rows = np.minimum((np.arange(th) + 0.5) * ch / th, ch - 1).astype(np.intp)
    cols = np.minimum((np.arange(tw) + 0.5) * cw / tw, cw - 1).astype(np.intp)
    return crop[:, rows][:, :, cols]


def _read_image(path: Path) -> np.ndarray:
    suffix = path.suffix.lower()
    try:
        if suffix == ".ppm":
            return read_ppm(path)
        if suffix == ".mmtn":
            arr = load_tensor(path)
            if arr.ndim != 3 or arr.shape[0] != 3:
                raise DataError(f"{path}: MMTN image must be [3,H,W], got {arr.shape}")
            return arr.astype(np.float32)
    except (OSError, FormatError) as exc:
        raise DataError(f"{path}: unreadable ({exc})") from exc
    raise DataError(f"{path}: unsupported file type")


def load_directory(root: PathLike, resize: Optional[tuple] = None) -> Dataset:
    """Load ``root/<class_name>/<file>`` (``.ppm`` or ``.mmtn``).

    Classes are ordered lexicographically by folder name, which fixes the
    global class ids. With ``resize=(H, W)`` every image is center-cropped
    and resized; otherwise all images must already share one shape.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    class_dirs = sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: p.name)
    if len(class_dirs) < 2:
        raise DataError(f"{root}: need at least 2 class folders, found {len(class_dirs)}")
    images, labels, source_ids = [], [], []
    for k, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.is_file() and p.suffix.lower() in (".ppm", ".mmtn"))
        if not files:
            raise DataError(f"{cdir}: empty class folder")
        for path in files:
            img = _read_image(path)
            if resize is not None:
                img = center_crop_resize(img, tuple(resize))
            if images and img.shape != images[0].shape:
                raise DataError(
                    f"{path}: shape {img.shape} differs from {images[0].shape}; enable resize"
                )
            if img.min() < 0 or img.max() > 1:
                raise DataError(f"{path}: pixel values outside [0, 1]")
            images.append(img)
            labels.append(k)
            source_ids.append(f"{cdir.name}/{path.name}")
    return Dataset([d.name for d in class_dirs], np.stack(images), np.array(labels), source_ids)


def write_directory(dataset: Dataset, root: PathLike, fmt: str = "ppm") -> list[Path]:
    """Write one file per sample under ``root/<class_name>/``."""
    root = Path(root)
    written = []
    for k, (name, ids) in enumerate(dataset.index.classes):
        cdir = root / name
        cdir.mkdir(parents=True, exist_ok=True)
        for j, i in enumerate(ids):
            path = cdir / f"{j:04d}.{fmt}"
            if fmt == "ppm":
                write_ppm(path, dataset.images[i])
            elif fmt == "mmtn":
                save_tensor(path, dataset.images[i])
            else:
                raise ValueError(f"unknown format {fmt!r}")
            written.append(path)
    return written


# ---------------------------------------------------------------- synthetic scenes


def generate_synthetic(num_classes: int, per_class: int, shape: Sequence[int] = (3, 32, 32), seed: int = 0) -> Dataset:
    """Procedural texture families, one per class.

    Each class fixes a base hue, a stripe orientation/frequency and a blob
    frequency. Samples add a random translation of up to 2 px, a +-10%
    brightness change and Gaussian pixel noise (sigma 0.05).
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if per_class < 2:
        raise ValueError("per_class must be >= 2")
    c, h, w = (int(v) for v in shape)
    if c != 3 or h < 1 or w < 1:
        raise ValueError(f"shape must be [3, H, W], got {tuple(shape)}")

    rng = component_rng(seed, "synthetic")
    hue_offset = rng.uniform()
    orient_rank = rng.permutation(num_classes)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    images = np.empty((num_classes * per_class, 3, h, w), dtype=np.float32)
    labels = np.repeat(np.arange(num_classes), per_class)
    for k in range(num_classes):
        hue = (hue_offset + k / num_classes) % 1.0
        color = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.5, 0.8), rng.uniform(0.65, 0.9)))
        theta = math.pi * (orient_rank[k] + rng.uniform(0.0, 0.5)) / num_classes
        stripe_freq = rng.uniform(2.0, 5.0) * 2 * math.pi / max(h, w)
        blob_freq = rng.uniform(1.0, 3.0) * 2 * math.pi / max(h, w)
        for j in range(per_class):
            dy, dx = rng.integers(-2, 3, size=2)
            ys, xs = yy - dy, xx - dx
            stripes = np.cos(stripe_freq * (xs * math.cos(theta) + ys * math.sin(theta)))
            blobs = np.cos(blob_freq * xs) * np.cos(blob_freq * ys)
            pattern = 0.6 + 0.25 * stripes + 0.15 * blobs
            img = color[:, None, None] * pattern[None] * rng.uniform(0.9, 1.1)
            img = img + rng.normal(0.0, 0.05, size=img.shape)
            images[k * per_class + j] = np.clip(img, 0.0, 1.0)
    names = [f"class_{k:02d}" for k in range(num_classes)]
    source_ids = [f"{names[k]}/{j:04d}" for k in range(num_classes) for j in range(per_class)]
    return Dataset(names, images, labels, source_ids)


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint seen/unseen/validation class sets.

    ``train_samples`` optionally narrows which samples of each seen class
    are visible to training (scene-ratio ablations).
    """

    seen: tuple
    unseen: tuple
    val: tuple
    seed: int
    train_samples: Optional[Mapping[int, tuple]] = None

    def __post_init__(self):
        s, u, v = set(self.seen), set(self.unseen), set(self.val)
        if s & u or s & v or u & v:
            raise DataError("seen, unseen and val class sets must be disjoint")

    def seen_pool(self, index: DatasetIndex) -> dict[int, tuple]:
        if self.train_samples is not None:
            return {k: tuple(self.train_samples[k]) for k in self.seen}
        return {k: index.samples_of(k) for k in self.seen}

    def pool(self, index: DatasetIndex, which: str) -> dict[int, tuple]:
        if which == "seen":
            return self.seen_pool(index)
        classes = {"unseen": self.unseen, "val": self.val}[which]
        return {k: index.samples_of(k) for k in classes}

    def to_json(self) -> dict:
        out = {"seen": list(self.seen), "unseen": list(self.unseen), "val": list(self.val), "seed": self.seed}
        if self.train_samples is not None:
            out["train_samples"] = {str(k): list(v) for k, v in sorted(self.train_samples.items())}
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "SplitSpec":
        ts = obj.get("train_samples")
        if ts is not None:
            ts = {int(k): tuple(v) for k, v in ts.items()}
        return cls(tuple(obj["seen"]), tuple(obj["unseen"]), tuple(obj["val"]), int(obj["seed"]), ts)

    def save(self, path: PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path: PathLike) -> "SplitSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


def _finish_split(index, unseen, rest, val_fraction, seed, min_seen) -> SplitSpec:
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must be in [0, 1)")
    n_val = int(round(val_fraction * len(rest)))
    val, seen = rest[:n_val], rest[n_val:]
    if min_seen is not None and len(seen) < min_seen:
        raise DataError(f"split leaves {len(seen)} seen classes, episodes need {min_seen}")
    return SplitSpec(tuple(sorted(seen)), tuple(sorted(unseen)), tuple(sorted(val)), int(seed))


def split_classes(
    index: DatasetIndex, fold: int, val_fraction: float = 0.0, seed: int = 0, min_seen: Optional[int] = None
) -> SplitSpec:
    """Three-fold class split: fold ``fold`` is unseen, the rest seen (+ val)."""
    n = index.num_classes
    if n < 3:
        raise DataError(f"three-fold split needs >= 3 classes, got {n}")
    if fold not in (0, 1, 2):
        raise ValueError("fold must be 0, 1 or 2")
    perm = [int(k) for k in component_rng(seed, "split").permutation(n)]
    folds = np.array_split(np.array(perm), 3)
    unseen = [int(k) for k in folds[fold]]
    rest = [k for k in perm if k not in set(unseen)]
    return _finish_split(index, unseen, rest, val_fraction, seed, min_seen)


def holdout_split(
    index: DatasetIndex, n_unseen: int, val_fraction: float = 0.0, seed: int = 0, min_seen: Optional[int] = None
) -> SplitSpec:
    """Hold out ``n_unseen`` randomly chosen classes as unseen."""
    n = index.num_classes
    if not 1 <= n_unseen < n:
        raise DataError(f"cannot hold out {n_unseen} of {n} classes")
    perm = [int(k) for k in component_rng(seed, "split").permutation(n)]
    return _finish_split(index, perm[:n_unseen], perm[n_unseen:], val_fraction, seed, min_seen)


def keep_count(ratio: float, n: int) -> int:
    """Number of items kept when a fraction ``ratio`` of ``n`` survives (rounded up)."""
    return int(math.ceil(ratio * n - 1e-9))


def subsample_train(
    split: SplitSpec,
    index: DatasetIndex,
    mode: str,
    keep_ratio: float,
    seed: int = 0,
    min_classes: int = 1,
    min_per_class: int = 1,
    clamp: bool = False,
) -> SplitSpec:
    """Shrink the seen pool by class count (``categories``) or per-class samples (``scenes``).

    A kept count below ``min_classes`` / ``min_per_class`` is an error, or
    is raised to that minimum when ``clamp`` is set.
    """
    if not 0.0 < keep_ratio <= 1.0:
        raise ValueError("keep_ratio must be in (0, 1]")
    if mode not in ("categories", "scenes"):
        raise ValueError(f"unknown subsample mode {mode!r}")
    if keep_ratio == 1.0:
        return split
    rng = component_rng(seed, f"subsample-{mode}")
    if mode == "categories":
        n_keep = keep_count(keep_ratio, len(split.seen))
        if n_keep < min_classes:
            if not clamp or min_classes > len(split.seen):
                raise DataError(f"keeping {n_keep} seen classes, episodes need {min_classes}")
            n_keep = min_classes
        kept = sorted(int(k) for k in rng.choice(np.array(split.seen), size=n_keep, replace=False))
        dropped = split.train_samples
        ts = None if dropped is None else {k: dropped[k] for k in kept}
        return replace(split, seen=tuple(kept), train_samples=ts)
    pool = split.seen_pool(index)
    samples = {}
    for k in split.seen:
        ids = np.array(pool[k])
        n_keep = keep_count(keep_ratio, len(ids))
        if n_keep < min_per_class:
            if not clamp or min_per_class > len(ids):
                raise DataError(f"keeping {n_keep} samples of class {k}, episodes need {min_per_class}")
            n_keep = min_per_class
        samples[k] = tuple(sorted(int(i) for i in rng.choice(ids, size=n_keep, replace=False)))
    return replace(split, train_samples=samples)
