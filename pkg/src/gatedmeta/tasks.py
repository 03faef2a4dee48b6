"""Task generation and data ingestion.

* quadratic federations with a controlled spectrum (diagnostics substrate)
* non-IID class-restricted partitions of a labelled dataset
* IDX (MNIST) reading/writing, block-average downsampling
* a seeded synthetic 8x8 multi-channel image generator for the CNN
"""
from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .nets import Batch

__all__ = [
    "QuadraticTask",
    "NodeTask",
    "ConfigurationError",
    "IDXParseError",
    "gen_quadratic_federation",
    "non_iid_split",
    "load_idx",
    "write_idx",
    "downsample",
    "synthetic_images",
    "write_manifest",
]


class ConfigurationError(ValueError):
    pass


class IDXParseError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class QuadraticTask:
    """``L(w) = 0.5 w'Aw - b'w`` with symmetric PSD ``A``."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.A.shape != (self.b.size, self.b.size):
            raise ValueError("A must be square and match b")
        if np.max(np.abs(self.A - self.A.T), initial=0.0) > 1e-12:
            raise ValueError("A must be symmetric")

    @property
    def dim(self):
        return self.b.size

    def value_and_grad(self, w):
        Aw = self.A @ w
        return 0.5 * float(w @ Aw) - float(self.b @ w), Aw - self.b


@dataclass
class NodeTask:
    """One node: an id, train/test data (or a quadratic loss) and its sample indices."""

    id: int
    train: Optional[Batch] = None
    test: Optional[Batch] = None
    quadratic: Optional[QuadraticTask] = None
    class_ids: Tuple[int, ...] = ()
    indices: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def loss_kind(self):
        return "quadratic" if self.quadratic is not None else "network"

    @property
    def n_train(self):
        return len(self.train) if self.train is not None else 0

    def manifest(self):
        return {
            "node_id": self.id,
            "class_ids": [int(c) for c in self.class_ids],
            "train_count": self.n_train,
            "test_count": len(self.test) if self.test is not None else 0,
        }


# --------------------------------------------------------------------------
# quadratic federations


def gen_quadratic_federation(N: int, dim: int, rho: float, heterogeneity: float = 1.0, seed: int = 0) -> List[QuadraticTask]:
    """``N`` quadratics whose Hessians have eigenvalues uniform in ``[rho/2, rho]``.

    ``b_i = b_common + heterogeneity * noise_i``.
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    if dim < 1 or N < 1:
        raise ValueError("N and dim must be at least 1")
    rng = np.random.default_rng(seed)
    b_common = rng.normal(size=dim)
    tasks = []
    for _ in range(N):
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        eig = rng.uniform(rho / 2, rho, size=dim)
        A = (q * eig) @ q.T
        A = 0.5 * (A + A.T)
        b = b_common + heterogeneity * rng.normal(size=dim)
        tasks.append(QuadraticTask(A, b))
    return tasks


# --------------------------------------------------------------------------
# non-IID partitions


def non_iid_split(
    images: np.ndarray,
    labels: np.ndarray,
    N: int,
    classes_per_node: int = 2,
    size_range: Optional[Tuple[int, int]] = None,
    seed: int = 0,
    train_fraction: float = 0.8,
) -> List[NodeTask]:
    """Partition a labelled dataset into ``N`` class-restricted nodes.

    Each node draws a size uniformly from ``size_range`` (inclusive), picks
    ``classes_per_node`` distinct classes at random among those with enough
    unassigned samples, and takes an equal share from each. No sample is used
    twice. Nodes are split ``train_fraction``/rest into train and test,
    stratified by class.
    """
    labels = np.asarray(labels, dtype=np.int64)
    images = np.asarray(images)
    classes = np.unique(labels)
    if classes_per_node < 1 or classes_per_node > classes.size:
        raise ConfigurationError(f"classes_per_node={classes_per_node} with {classes.size} classes")
    if size_range is None:
        size_range = (labels.size // N, labels.size // N)
    lo, hi = int(size_range[0]), int(size_range[1])
    if lo < classes_per_node or hi < lo:
        raise ConfigurationError(f"infeasible size_range {size_range}")
    if N * lo > labels.size:
        raise ConfigurationError(f"{N} nodes of at least {lo} samples exceed dataset size {labels.size}")
    rng = np.random.default_rng(seed)
    pools = {int(c): list(rng.permutation(np.flatnonzero(labels == c))) for c in classes}
    nodes = []
    for node_id in range(N):
        size = int(rng.integers(lo, hi + 1))
        shares = [size // classes_per_node + (1 if k < size % classes_per_node else 0) for k in range(classes_per_node)]
        need = shares[0]
        feasible = [c for c, pool in pools.items() if len(pool) >= need]
        if len(feasible) < classes_per_node:
            raise ConfigurationError(
                f"size_range {size_range} infeasible: node {node_id} cannot find "
                f"{classes_per_node} classes with {need} unused samples"
            )
        chosen = sorted(int(c) for c in rng.choice(feasible, size=classes_per_node, replace=False))
        train_idx, test_idx = [], []
        for c, share in zip(chosen, shares):
            take = [pools[c].pop() for _ in range(share)]
            n_train = max(1, int(round(train_fraction * share))) if share > 1 else share
            train_idx.extend(take[:n_train])
            test_idx.extend(take[n_train:])
        train_idx = np.array(sorted(train_idx), dtype=np.int64)
        test_idx = np.array(sorted(test_idx), dtype=np.int64)
        train = Batch(images[train_idx], labels[train_idx])
        test = Batch(images[test_idx], labels[test_idx]) if test_idx.size else None
        nodes.append(
            NodeTask(
                node_id,
                train=train,
                test=test,
                class_ids=tuple(chosen),
                indices=np.concatenate([train_idx, test_idx]),
            )
        )
    return nodes


def write_manifest(path, nodes: Sequence[NodeTask]) -> None:
    Path(path).write_text(json.dumps([n.manifest() for n in nodes], indent=1))


# --------------------------------------------------------------------------
# IDX files

_IMAGES_MAGIC = 0x00000803
_LABELS_MAGIC = 0x00000801


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, ndim: int):
    if len(raw) < 4:
        raise IDXParseError("file too short for magic number", len(raw))
    (got,) = struct.unpack_from(">I", raw, 0)
    if got != magic:
        raise IDXParseError(f"bad magic 0x{got:08x}, expected 0x{magic:08x}", 0)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXParseError("truncated header", len(raw))
    dims = struct.unpack_from(">" + "I" * ndim, raw, 4)
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise IDXParseError(f"truncated data: expected {count} bytes", len(raw))
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)
    return data


def load_idx(images_path, labels_path):
    """Read an IDX image/label pair; pixels are scaled to ``[0, 1]``.

    Gzip-compressed files are detected and decompressed transparently.
    """
    images = _parse_idx(_read_bytes(images_path), _IMAGES_MAGIC, 3)
    labels = _parse_idx(_read_bytes(labels_path), _LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IDXParseError(f"image count {images.shape[0]} != label count {labels.shape[0]}", 4)
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


def write_idx(images_path, labels_path, images, labels, compress=None) -> None:
    """Write uint8 images ``(n, rows, cols)`` and labels as IDX files.

    Float images in ``[0, 1]`` are scaled by 255 and rounded. ``compress``
    defaults to gzip when the path ends in ``.gz``.
    """
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    labels = np.asarray(labels).astype(np.uint8)
    if images.ndim != 3:
        raise ValueError("images must be (n, rows, cols)")
    img = struct.pack(">IIII", _IMAGES_MAGIC, *images.shape) + images.tobytes()
    lab = struct.pack(">II", _LABELS_MAGIC, labels.size) + labels.tobytes()
    for path, blob in ((images_path, img), (labels_path, lab)):
        gz = str(path).endswith(".gz") if compress is None else compress
        Path(path).write_bytes(gzip.compress(blob, mtime=0) if gz else blob)


def downsample(images, factor: int):
    """Non-overlapping ``factor x factor`` average pooling over the last two axes."""
    images = np.asarray(images, dtype=np.float64)
    if factor < 1:
        raise ValueError("factor must be positive")
    h, w = images.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"image size {h}x{w} not divisible by {factor}")
    if factor == 1:
        return images.copy()
    shp = images.shape[:-2] + (h // factor, factor, w // factor, factor)
    return images.reshape(shp).mean(axis=(-3, -1))


# --------------------------------------------------------------------------
# synthetic images


def synthetic_images(
    n_classes: int = 10,
    n_per_class: int = 300,
    channels: int = 3,
    size: int = 8,
    n_motifs: int = 16,
    motifs_per_class: int = 3,
    noise: float = 0.35,
    seed: int = 0,
):
    """A seeded stand-in for small colour images.

    There is a shared bank of ``n_motifs`` smooth spatial patterns, each with
    its own colour profile. Every class is a fixed random combination of
    ``motifs_per_class`` of them. A sample places its class motifs with random
    amplitude and a random shift of up to one pixel, then adds Gaussian noise.
    Classes share some motifs, so which features matter depends on the class pair.

    Returns ``(images (n, channels, size, size), labels)``.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    bank = []
    for _ in range(n_motifs):
        fy, fx = rng.uniform(0.5, 2.0, size=2)
        py, px = rng.uniform(0, 2 * np.pi, size=2)
        pattern = np.sin(2 * np.pi * fy * yy + py) * np.cos(2 * np.pi * fx * xx + px)
        colour = rng.normal(size=channels)
        colour /= np.linalg.norm(colour)
        bank.append(colour[:, None, None] * pattern[None])
    bank = np.array(bank)
    recipes = [rng.choice(n_motifs, size=motifs_per_class, replace=False) for _ in range(n_classes)]
    xs, ys = [], []
    for c in range(n_classes):
        for _ in range(n_per_class):
            img = np.zeros((channels, size, size))
            for m in recipes[c]:
                amp = rng.uniform(0.6, 1.4)
                dy, dx = rng.integers(-1, 2, size=2)
                img += amp * np.roll(bank[m], (dy, dx), axis=(1, 2))
            img += noise * rng.normal(size=img.shape)
            xs.append(img)
            ys.append(c)
    order = rng.permutation(len(ys))
    return np.array(xs)[order], np.array(ys, dtype=np.int64)[order]
