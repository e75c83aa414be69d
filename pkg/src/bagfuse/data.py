"""Datasets: binary container IO, synthetic generation, splitting, preprocessing.

Container layout (little-endian): magic ``AEIB``, u32 version=1, u32 N, u32 C,
u32 H, u32 W, then N*C*H*W u8 pixels, then N u16 labels, then u32 class_count.

Split plans persist as text: a header line ``N=<n> seed=<s>`` followed by one
``index,subset`` pair per line.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractError, FormatError, LabelError, PartitionError, ShapeError, SplitError
from .tensor import Tensor

__all__ = [
    "Dataset",
    "PreprocessSpec",
    "SplitPlan",
    "save_dataset",
    "load_dataset",
    "generate_synthetic",
    "stratified_disjoint_split",
    "semantic_split_override",
    "preprocess",
    "bilinear_resize",
    "nearest_resize",
    "batch_iter",
]

logger = logging.getLogger(__name__)

_MAGIC = b"AEIB"
_VERSION = 1


@dataclass
class Dataset:
    """Images as uint8 [N, C, H, W] with integer labels in [0, class_count)."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split_tag: str = "train"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ShapeError(f"Dataset: images must be [N, C, H, W], got {self.images.shape}")
        if len(self.labels) != self.images.shape[0]:
            raise ShapeError(
                f"Dataset: {self.images.shape[0]} images but {len(self.labels)} labels"
            )
        if self.images.shape[0] < 1:
            raise ContractError("Dataset: need at least one sample")
        if self.class_count < 1:
            raise ContractError(f"Dataset: class_count must be >= 1, got {self.class_count}")
        if ((self.labels < 0) | (self.labels >= self.class_count)).any():
            bad = int(self.labels[(self.labels < 0) | (self.labels >= self.class_count)][0])
            raise LabelError(f"Dataset: label {bad} outside [0, {self.class_count})")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices, tag: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.class_count, tag or self.split_tag)

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


def save_dataset(ds: Dataset, path) -> None:
    n, c, h, w = ds.images.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIIII", _VERSION, n, c, h, w))
        fh.write(ds.images.tobytes())
        fh.write(ds.labels.astype("<u2").tobytes())
        fh.write(struct.pack("<I", ds.class_count))


def load_dataset(path, split_tag: str = "train") -> Dataset:
    """Decode a container file, validating structure and label range."""
    raw = Path(path).read_bytes()
    if len(raw) < 24:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != _MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, n, c, h, w = struct.unpack_from("<IIIII", raw, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if n < 1 or c < 1 or h < 1 or w < 1:
        raise FormatError(f"{path}: non-positive dimensions {(n, c, h, w)}")
    pix_len = n * c * h * w
    expected = 24 + pix_len + 2 * n + 4
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    off = 24
    images = np.frombuffer(raw, dtype=np.uint8, count=pix_len, offset=off).reshape(n, c, h, w)
    off += pix_len
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=off).astype(np.int64)
    off += 2 * n
    (class_count,) = struct.unpack_from("<I", raw, off)
    ds = Dataset(images.copy(), labels, class_count, split_tag)
    logger.info("loaded %s: %d samples, histogram %s", path, n, ds.label_histogram().tolist())
    return ds


# ---------------------------------------------------------------------------
# synthetic data

# Tuned so a compact CNN overfits a subset within ~50 epochs while held-out
# accuracy stays well below 100%, leaving headroom for ensembling gains.
_PATTERN_AMPLITUDE = 25.0
_NOISE_SIGMA = 80.0
_PATTERN_GRID = 4


def generate_synthetic(
    classes: int,
    per_class: int,
    size: tuple[int, int, int] = (3, 32, 32),
    seed: int = 0,
    pattern_seed: int | None = None,
) -> Dataset:
    """Deterministic images: a smooth class-specific pattern plus pixel noise.

    ``pattern_seed`` pins the class patterns independently of the noise so
    that train/valid/test splits can share class identities while drawing
    fresh noise.
    """
    if classes < 2:
        raise ContractError(f"generate_synthetic: need >= 2 classes, got {classes}")
    if per_class < 1:
        raise ContractError(f"generate_synthetic: per_class must be >= 1, got {per_class}")
    c, h, w = size
    pat_rng = np.random.default_rng(np.random.SeedSequence([pattern_seed if pattern_seed is not None else seed, 0x9A7]))
    coarse = pat_rng.uniform(-1.0, 1.0, size=(classes, c, _PATTERN_GRID, _PATTERN_GRID))
    patterns = bilinear_resize(coarse, h, w) * _PATTERN_AMPLITUDE

    noise_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x11F]))
    images = np.empty((classes * per_class, c, h, w), dtype=np.uint8)
    for cls in range(classes):
        noise = noise_rng.normal(0.0, _NOISE_SIGMA, size=(per_class, c, h, w))
        block = 128.0 + patterns[cls] + noise
        images[cls * per_class : (cls + 1) * per_class] = np.clip(block, 0.0, 255.0).astype(np.uint8)
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    return Dataset(images, labels, classes)


# ---------------------------------------------------------------------------
# splitting


@dataclass
class SplitPlan:
    """Per-sample assignment to one of ``n_subsets`` disjoint subsets."""

    n_subsets: int
    assignment: np.ndarray
    seed: int

    def __post_init__(self):
        self.assignment = np.ascontiguousarray(self.assignment, dtype=np.int64)
        if self.n_subsets < 1:
            raise ContractError(f"SplitPlan: n_subsets must be >= 1, got {self.n_subsets}")
        if ((self.assignment < 0) | (self.assignment >= self.n_subsets)).any():
            raise ContractError("SplitPlan: assignment value outside [0, n_subsets)")

    def subset_indices(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == i)

    def subset_sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_subsets)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"N={self.n_subsets} seed={self.seed}\n")
            for i, a in enumerate(self.assignment):
                fh.write(f"{i},{a}\n")

    @staticmethod
    def load(path) -> "SplitPlan":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("N="):
            raise FormatError(f"{path}: missing split-plan header")
        try:
            head = dict(tok.split("=", 1) for tok in lines[0].split())
            n = int(head["N"])
            seed = int(head["seed"])
            pairs = [tuple(int(v) for v in ln.split(",")) for ln in lines[1:] if ln.strip()]
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{path}: malformed split plan ({exc})") from exc
        assignment = np.full(len(pairs), -1, dtype=np.int64)
        for idx, sub in pairs:
            if not 0 <= idx < len(pairs):
                raise FormatError(f"{path}: sample index {idx} out of range")
            assignment[idx] = sub
        return SplitPlan(n, assignment, seed)


def stratified_disjoint_split(train: Dataset, n: int, seed: int) -> SplitPlan:
    """Deal each class round-robin into ``n`` disjoint subsets.

    Classes are shuffled independently with ``seed``.  The dealing offset
    rotates across classes by each class's remainder, so subset sizes differ
    by at most one both per class and overall.
    """
    if n < 1:
        raise ContractError(f"stratified_disjoint_split: n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    assignment = np.full(len(train), -1, dtype=np.int64)
    offset = 0
    for cls in range(train.class_count):
        idx = np.flatnonzero(train.labels == cls)
        if 0 < len(idx) < n:
            raise SplitError(f"class {cls} has {len(idx)} samples, fewer than {n} subsets")
        perm = rng.permutation(idx)
        for j, sample in enumerate(perm):
            assignment[sample] = (offset + j) % n
        offset = (offset + len(idx) % n) % n
    return SplitPlan(n, assignment, seed)


def semantic_split_override(train: Dataset, groups: Sequence[Sequence[int]]) -> SplitPlan:
    """Assign each subset all samples of one class group (groups must partition)."""
    seen: set[int] = set()
    for g in groups:
        for cls in g:
            if cls in seen:
                raise PartitionError(f"class {cls} appears in more than one group")
            seen.add(cls)
    expected = set(range(train.class_count))
    if seen != expected:
        missing = sorted(expected - seen)
        extra = sorted(seen - expected)
        raise PartitionError(f"groups do not partition classes (missing {missing}, unknown {extra})")
    class_to_group = np.empty(train.class_count, dtype=np.int64)
    for gi, g in enumerate(groups):
        for cls in g:
            class_to_group[cls] = gi
    return SplitPlan(len(groups), class_to_group[train.labels], seed=-1)


# ---------------------------------------------------------------------------
# preprocessing


@dataclass(frozen=True)
class PreprocessSpec:
    """Resize target plus per-channel standardization constants."""

    target_size: tuple[int, int]
    channel_means: tuple[float, float, float]
    channel_stds: tuple[float, float, float]

    def __post_init__(self):
        if len(self.target_size) != 2 or min(self.target_size) < 1:
            raise ContractError(f"PreprocessSpec: bad target_size {self.target_size}")
        if any(s <= 0 for s in self.channel_stds):
            raise ContractError(f"PreprocessSpec: stds must be positive, got {self.channel_stds}")


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-aligned bilinear resize over the last two axes (float64)."""
    a = np.asarray(arr, dtype=np.float64)
    in_h, in_w = a.shape[-2:]
    if (in_h, in_w) == (out_h, out_w):
        return a.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5, 0.0, in_h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5, 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0).reshape(-1, 1)
    wx = xs - x0
    rows = a[..., y0, :] * (1.0 - wy) + a[..., y1, :] * wy
    return rows[..., :, x0] * (1.0 - wx) + rows[..., :, x1] * wx


def nearest_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float64)
    in_h, in_w = a.shape[-2:]
    if (in_h, in_w) == (out_h, out_w):
        return a.copy()
    ys = np.minimum(((np.arange(out_h) + 0.5) * (in_h / out_h)).astype(np.int64), in_h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * (in_w / out_w)).astype(np.int64), in_w - 1)
    return a[..., ys, :][..., :, xs]


_RESIZE_KERNELS = {"bilinear": bilinear_resize, "nearest": nearest_resize}


def preprocess(batch, spec: PreprocessSpec, kernel: str = "bilinear") -> Tensor:
    """Resize raw pixels then standardize: (x/255 - mean) / std per channel.

    Accepts uint8 or float pixel batches shaped [B, 3, H, W]; intermediate
    math runs in float64 and the result is a float32 tensor.
    """
    arr = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    if arr.ndim != 4:
        raise ShapeError(f"preprocess: batch must be [B, C, H, W], got {arr.shape}")
    if arr.shape[1] != 3:
        raise ShapeError(f"preprocess: expected 3 channels, got {arr.shape[1]}")
    if kernel not in _RESIZE_KERNELS:
        raise ContractError(f"preprocess: unknown resize kernel {kernel!r}")
    th, tw = spec.target_size
    resized = _RESIZE_KERNELS[kernel](arr, th, tw)
    means = np.asarray(spec.channel_means, dtype=np.float64).reshape(1, 3, 1, 1)
    stds = np.asarray(spec.channel_stds, dtype=np.float64).reshape(1, 3, 1, 1)
    out = (resized / 255.0 - means) / stds
    return Tensor(out.astype(np.float32))


def batch_iter(dataset, batch_size: int, shuffle: bool = False, seed: int = 0) -> Iterator[np.ndarray]:
    """Yield index arrays covering the dataset; the final batch may be short."""
    if batch_size < 1:
        raise ContractError(f"batch_iter: batch_size must be >= 1, got {batch_size}")
    n = dataset if isinstance(dataset, int) else len(dataset)
    order = np.arange(n)
    if shuffle:
        order = np.random.default_rng(seed).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]
