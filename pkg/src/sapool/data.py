"""Datasets: IDX and CIFAR-10 binary readers plus a synthetic non-local task."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import FormatError
from .rng import RngState

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073
CIFAR_SIDE = 32

_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float in [0, 1]
    labels: np.ndarray  # [N] int64
    split: str = "train"
    mean: tuple[float, ...] = ()
    std: tuple[float, ...] = ()
    num_classes: int = 10
    _norm_cache: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise FormatError(f"images must be [N,C,H,W], got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise FormatError(f"labels outside [0, {self.num_classes})")
        c = self.images.shape[1]
        if not self.mean:
            self.mean = (0.0,) * c
        if not self.std:
            self.std = (1.0,) * c
        if len(self.mean) != c or len(self.std) != c:
            raise FormatError(f"normalisation needs {c} mean/std values")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def normalized(self, dtype=np.float32) -> np.ndarray:
        if self._norm_cache is None or self._norm_cache.dtype != dtype:
            m = np.asarray(self.mean, dtype=np.float64).reshape(1, -1, 1, 1)
            s = np.asarray(self.std, dtype=np.float64).reshape(1, -1, 1, 1)
            self._norm_cache = ((self.images - m) / s).astype(dtype)
        return self._norm_cache

    def with_normalization(self, mean, std) -> "Dataset":
        return replace(self, mean=tuple(mean), std=tuple(std), _norm_cache=None)

    def fit_normalization(self) -> tuple[tuple[float, ...], tuple[float, ...]]:
        mean = self.images.mean(axis=(0, 2, 3))
        std = self.images.std(axis=(0, 2, 3))
        return tuple(float(v) for v in mean), tuple(float(max(v, 1e-8)) for v in std)

    def pad(self, p: int) -> "Dataset":
        if p == 0:
            return self
        imgs = np.pad(self.images, ((0, 0), (0, 0), (p, p), (p, p)))
        return replace(self, images=imgs, _norm_cache=None)

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        return replace(
            self, images=self.images[idx], labels=self.labels[idx], split=split or self.split, _norm_cache=None
        )

    def take(self, n: int, split: str | None = None) -> "Dataset":
        return self.subset(np.arange(min(n, len(self))), split)

    def batches(
        self, batch_size: int, seed: int = 0, epoch: int = 0, shuffle: bool = True, dtype=np.float32
    ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Deterministic mini-batches; the order depends only on (seed, epoch)."""
        n = len(self)
        order = RngState(seed).fork(1000 + epoch).generator().permutation(n) if shuffle else np.arange(n)
        data = self.normalized(dtype)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            yield data[idx], self.labels[idx]


# -- IDX -----------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expect_magic: int | None = None) -> np.ndarray:
    """Parse an IDX file (optionally gzip-compressed) into an ndarray."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated IDX header", offset=len(raw))
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    magic = struct.unpack(">I", raw[:4])[0]
    if zero != 0 or dtype_code not in _IDX_DTYPES or ndim == 0:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}", offset=0)
    if expect_magic is not None and magic != expect_magic:
        raise FormatError(f"{path}: expected magic 0x{expect_magic:08x}, found 0x{magic:08x}", offset=0)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX dimension table", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dt = np.dtype(_IDX_DTYPES[dtype_code])
    need = header + int(np.prod(dims)) * dt.itemsize
    if len(raw) < need:
        raise FormatError(f"{path}: truncated IDX payload ({len(raw)} of {need} bytes)", offset=len(raw))
    if len(raw) > need:
        raise FormatError(f"{path}: {len(raw) - need} trailing bytes after IDX payload", offset=need)
    return np.frombuffer(raw, dtype=dt, count=int(np.prod(dims)), offset=header).reshape(dims)


def write_idx(path, array: np.ndarray, compress: bool | None = None) -> None:
    array = np.asarray(array)
    codes = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_DTYPES.items()}
    code = codes.get(array.dtype.newbyteorder("="))
    if code is None:
        raise FormatError(f"dtype {array.dtype} has no IDX code")
    header = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    payload = header + array.astype(_IDX_DTYPES[code]).tobytes()
    path = Path(path)
    if compress if compress is not None else path.suffix == ".gz":
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


def load_idx(
    images_path, labels_path=None, split: str = "train", mean=(), std=(), num_classes: int = 10
) -> Dataset:
    """IDX image file (magic 0x00000803) and optional label file (0x00000801)."""
    imgs = read_idx(images_path, IDX_IMAGES_MAGIC)
    if labels_path is not None:
        labels = read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
        if len(labels) != len(imgs):
            raise FormatError(f"{labels_path}: {len(labels)} labels for {len(imgs)} images", offset=8)
    else:
        labels = np.zeros(len(imgs), dtype=np.int64)
    scale = 255.0 if imgs.dtype == np.uint8 else 1.0
    images = (imgs.astype(np.float64) / scale)[:, None, :, :]
    return Dataset(images, labels, split, tuple(mean), tuple(std), num_classes)


# -- CIFAR-10 binary -------------------------------------------------------------


def load_cifar_binary(paths, split: str = "train", mean=(), std=(), num_classes: int = 10) -> Dataset:
    """One or more CIFAR-10 binary batch files: 1 label byte + 3072 R,G,B bytes per record."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        raw = _read_bytes(path)
        full = len(raw) // CIFAR_RECORD
        if len(raw) % CIFAR_RECORD:
            raise FormatError(f"{path}: truncated CIFAR record", offset=full * CIFAR_RECORD)
        recs = np.frombuffer(raw, dtype=np.uint8).reshape(full, CIFAR_RECORD)
        bad = np.flatnonzero(recs[:, 0] >= num_classes)
        if bad.size:
            raise FormatError(f"{path}: label {recs[bad[0], 0]} out of range", offset=int(bad[0]) * CIFAR_RECORD)
        labels.append(recs[:, 0].astype(np.int64))
        images.append(recs[:, 1:].reshape(full, 3, CIFAR_SIDE, CIFAR_SIDE).astype(np.float64) / 255.0)
    return Dataset(np.concatenate(images), np.concatenate(labels), split, tuple(mean), tuple(std), num_classes)


def write_cifar_binary(path, images: np.ndarray, labels: np.ndarray) -> None:
    imgs = np.clip(np.round(np.asarray(images) * 255.0), 0, 255).astype(np.uint8).reshape(len(labels), -1)
    recs = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], imgs], axis=1)
    Path(path).write_bytes(recs.tobytes())


# -- synthetic non-local task ------------------------------------------------------

SYNTH_SIDE = 32
BLOB = 3


# coordinates inside a 16-pixel quadrant whose parity is fixed by the coarse
# cell they occupy, so parity is visible on a downsampled grid
_LATTICES = {
    "cell8": (0, 2, 4, 6, 9, 11, 13),
    "cell4": (0, 2, 5, 7, 8, 10, 13),
    "inset4": (1, 4, 9, 12),
}
LAYOUTS = ("cell4", "cell8", "inset4", "mixed", "uniform")
# share of coordinates drawn from the inset lattice in the "mixed" layout
MIXED_LATTICE_SHARE = 0.8


def _coord(rng: np.random.Generator, layout: str, parity: int | None = None) -> int:
    if layout == "mixed":
        layout = "inset4" if rng.random() < MIXED_LATTICE_SHARE else "uniform"
    if layout == "uniform":
        options = range(SYNTH_SIDE // 2 - BLOB + 1)
    else:
        options = _LATTICES[layout]
    options = [v for v in options if parity is None or v % 2 == parity]
    return int(options[rng.integers(0, len(options))])


def _blob_positions(rng: np.random.Generator, want_same: bool, quadrants, layout: str):
    half = SYNTH_SIDE // 2
    (q1r, q1c), (q2r, q2c) = quadrants
    r1, c1, r2 = (_coord(rng, layout) for _ in range(3))
    # the second blob's column parity decides the label
    c2 = _coord(rng, layout, parity=(r1 + c1 + r2 + (0 if want_same else 1)) % 2)
    return (q1r * half + r1, q1c * half + c1), (q2r * half + r2, q2c * half + c2)


def synth_nonlocal_dataset(
    n: int, seed: int = 0, split: str = "train", noise: float = 0.0, layout: str = "mixed"
) -> Dataset:
    """32x32 images with two bright 3x3 blobs in opposite quadrants.

    Label 1 iff the blobs' top-left (row + col) parities agree.  Labels
    alternate before shuffling, so the classes differ in size by at most one.
    ``layout`` picks the in-quadrant corner coordinates: the lattice layouts
    tie a coordinate's parity to a coarse cell (``cell8``: 8-pixel halves,
    ``cell4``/``inset4``: 4-pixel cells, with ``inset4`` keeping each blob
    inside one cell), ``uniform`` allows any position, and the default
    ``mixed`` draws each coordinate from ``inset4`` with probability
    ``MIXED_LATTICE_SHARE`` and uniformly otherwise.
    """
    if n < 4:
        raise FormatError(f"synthetic dataset needs n >= 4 (2 per class), got {n}")
    if layout not in LAYOUTS:
        raise FormatError(f"unknown synthetic layout {layout!r}; expected one of {LAYOUTS}")
    rng = RngState(seed).fork(77).generator()
    images = np.zeros((n, 1, SYNTH_SIDE, SYNTH_SIDE))
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    diagonals = (((0, 0), (1, 1)), ((0, 1), (1, 0)))
    for i in range(n):
        quads = diagonals[rng.integers(0, 2)]
        if rng.integers(0, 2):
            quads = quads[::-1]
        (ra, ca), (rb, cb) = _blob_positions(rng, bool(labels[i]), quads, layout)
        images[i, 0, ra : ra + BLOB, ca : ca + BLOB] = 1.0
        images[i, 0, rb : rb + BLOB, cb : cb + BLOB] = 1.0
    if noise > 0:
        images = np.clip(images + rng.uniform(0, noise, size=images.shape), 0.0, 1.0)
    return Dataset(images, labels, split, num_classes=2)


def synth_label(image: np.ndarray) -> int | None:
    """Recover the label from a noise-free synthetic image (None if not exactly two blobs)."""
    img = image.reshape(SYNTH_SIDE, SYNTH_SIDE) >= 0.5
    corners = []
    for r in range(SYNTH_SIDE - BLOB + 1):
        for c in range(SYNTH_SIDE - BLOB + 1):
            if img[r : r + BLOB, c : c + BLOB].all() and (r == 0 or not img[r - 1, c]) and (c == 0 or not img[r, c - 1]):
                corners.append((r, c))
    if len(corners) != 2:
        return None
    (r1, c1), (r2, c2) = corners
    return int((r1 + c1) % 2 == (r2 + c2) % 2)
