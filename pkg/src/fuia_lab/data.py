"""Datasets: synthetic class patterns, PGM/PPM and IDX IO, client partitions."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataFormatError
from .rng import derive_rng


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [N, C, H, W], values in [0, 1]
    labels: np.ndarray  # [N] int64
    class_count: int

    def __post_init__(self):
        images = np.clip(np.asarray(self.images, dtype=np.float64), 0.0, 1.0)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if images.ndim != 4:
            raise DataFormatError(f"images must be [N, C, H, W], got shape {images.shape}")
        if images.shape[0] != labels.shape[0]:
            raise DataFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise DataFormatError(f"label out of range [0, {self.class_count})")
        images.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.class_count)

    def without(self, indices) -> "Dataset":
        mask = np.ones(len(self), dtype=bool)
        mask[np.asarray(indices, dtype=np.int64)] = False
        return self.subset(np.flatnonzero(mask))

    def of_classes(self, classes, keep=True) -> "Dataset":
        mask = np.isin(self.labels, list(classes))
        return self.subset(np.flatnonzero(mask if keep else ~mask))


# -- synthesis --------------------------------------------------------------

def _prototype(c: int, h: int, w: int) -> np.ndarray:
    """Geometric prototype for class ``c`` on an h x w grid."""
    yy, xx = np.mgrid[0:h, 0:w]
    u, v = yy / max(h - 1, 1), xx / max(w - 1, 1)
    kind = c % 10
    if kind == 0:
        img = (np.abs(u - 0.2) < 0.15).astype(float)
    elif kind == 1:
        img = (np.abs(u - 0.75) < 0.15).astype(float)
    elif kind == 2:
        img = (np.abs(v - 0.2) < 0.15).astype(float)
    elif kind == 3:
        img = (np.abs(v - 0.75) < 0.15).astype(float)
    elif kind == 4:
        img = (np.abs(u - v) < 0.18).astype(float)
    elif kind == 5:
        img = (np.abs(u + v - 1.0) < 0.18).astype(float)
    elif kind == 6:
        img = np.exp(-((u - 0.28) ** 2 + (v - 0.28) ** 2) / 0.03)
    elif kind == 7:
        img = np.exp(-((u - 0.72) ** 2 + (v - 0.72) ** 2) / 0.03)
    elif kind == 8:
        r = np.sqrt((u - 0.5) ** 2 + (v - 0.5) ** 2)
        img = (np.abs(r - 0.38) < 0.12).astype(float)
    else:
        img = ((np.abs(u - 0.5) < 0.12) | (np.abs(v - 0.5) < 0.12)).astype(float)
    if c >= 10:
        # Beyond ten classes, overlay a second pattern chosen by the decade.
        img = np.maximum(img, 0.6 * _prototype((c // 10 + kind + 1) % 10, h, w))
    return img


def synthesize(n_classes: int, per_class: int, shape=(1, 8, 8), seed: int = 0) -> Dataset:
    """Class-separable bar/blob patterns with per-sample shift, contrast and noise."""
    if n_classes < 2:
        raise ValueError("n_classes must be at least 2")
    if per_class < 1:
        raise ValueError("per_class must be at least 1")
    c, h, w = (int(s) for s in shape)
    rng = derive_rng(seed, "synthesize")
    images, labels = [], []
    for cls in range(n_classes):
        proto = _prototype(cls, h, w)
        for _ in range(per_class):
            dy, dx = rng.integers(-1, 2, size=2)
            base = np.roll(proto, (int(dy), int(dx)), axis=(0, 1))
            lo = rng.uniform(0.0, 0.25)
            hi = rng.uniform(0.7, 1.0)
            img = lo + (hi - lo) * base
            chans = []
            for ch in range(c):
                tint = 1.0 if c == 1 else rng.uniform(0.6, 1.0)
                chans.append(img * tint + rng.normal(0.0, 0.06, size=(h, w)))
            images.append(np.stack(chans))
            labels.append(cls)
    order = rng.permutation(len(labels))
    return Dataset(np.clip(np.asarray(images)[order], 0.0, 1.0), np.asarray(labels)[order], n_classes)


# -- image files ------------------------------------------------------------

def quantize(values) -> np.ndarray:
    """Pixel bytes: round(clamp(v, 0, 1) * 255), halves rounded up."""
    return np.floor(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_pnm(path, image: np.ndarray) -> None:
    """Write a [C, H, W] image as P5 (C=1) or P6 (C=3)."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    c, h, w = image.shape
    if c not in (1, 3):
        raise DataFormatError(f"PNM output needs 1 or 3 channels, got {c}")
    magic = b"P5" if c == 1 else b"P6"
    body = quantize(image).transpose(1, 2, 0).tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(magic + f"\n{w} {h}\n255\n".encode("ascii") + body)


def _pnm_tokens(raw: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace() and raw[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DataFormatError("truncated PNM header")
        tokens.append(raw[start:pos])
    return tokens, pos + 1


def read_pnm(path) -> np.ndarray:
    """Read a binary P5/P6 file into a [C, H, W] array in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens, start = _pnm_tokens(raw, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DataFormatError(f"{path}: unsupported magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DataFormatError(f"{path}: malformed header") from exc
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise DataFormatError(f"{path}: bad dimensions or maxval")
    c = 1 if magic == b"P5" else 3
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    n = w * h * c * np.dtype(dtype).itemsize
    body = raw[start : start + n]
    if len(body) != n:
        raise DataFormatError(f"{path}: expected {n} pixel bytes, found {len(body)}")
    pixels = np.frombuffer(body, dtype=dtype).astype(np.float64).reshape(h, w, c)
    return pixels.transpose(2, 0, 1) / maxval


_IDX_UBYTE = 0x08


def _write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">BBBB", 0, 0, _IDX_UBYTE, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def _read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise DataFormatError(f"{path}: bad IDX magic")
    if raw[2] != _IDX_UBYTE:
        raise DataFormatError(f"{path}: only unsigned-byte IDX payloads are supported")
    ndim = raw[3]
    if len(raw) < 4 + 4 * ndim:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    body = raw[4 + 4 * ndim :]
    if len(body) != int(np.prod(dims)):
        raise DataFormatError(f"{path}: payload has {len(body)} bytes, header implies {int(np.prod(dims))}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def _idx_labels_path(images_path: Path) -> Path:
    name = images_path.name
    if "images" in name:
        return images_path.with_name(name.replace("images", "labels"))
    return images_path.with_name(images_path.stem + "-labels" + images_path.suffix)


def load_images(path, format: str = "auto", class_count: int | None = None, labels_path=None) -> Dataset:
    """Load a PGM/PPM class tree (``root/<class_id>/<name>.pgm``) or an IDX pair.

    Labels at or above ``class_count`` are rejected; when ``class_count`` is
    omitted it is taken as ``max(label) + 1``.
    """
    path = Path(path)
    if format == "auto":
        format = "pnm" if path.is_dir() else "idx"
    if format in ("pnm", "pgm", "ppm"):
        images, labels = [], []
        class_dirs = sorted((d for d in path.iterdir() if d.is_dir()), key=lambda d: d.name)
        for d in class_dirs:
            try:
                label = int(d.name)
            except ValueError as exc:
                raise DataFormatError(f"class directory {d.name!r} is not an integer id") from exc
            for f in sorted(d.iterdir()):
                if f.suffix.lower() in (".pgm", ".ppm", ".pnm"):
                    images.append(read_pnm(f))
                    labels.append(label)
        if not images:
            raise DataFormatError(f"{path}: no PGM/PPM images found")
        if len({im.shape for im in images}) != 1:
            raise DataFormatError(f"{path}: images have differing shapes")
        images = np.stack(images)
    elif format == "idx":
        raw = _read_idx(path)
        labels = _read_idx(Path(labels_path) if labels_path else _idx_labels_path(path)).astype(np.int64)
        if raw.ndim == 3:
            raw = raw[:, None]
        if raw.ndim != 4 or labels.ndim != 1:
            raise DataFormatError("IDX images must be [N, H, W] or [N, C, H, W] with 1-D labels")
        images = raw.astype(np.float64) / 255.0
    else:
        raise DataFormatError(f"unknown image format {format!r}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and labels.min() < 0:
        raise DataFormatError("negative label")
    n = class_count if class_count is not None else int(labels.max()) + 1
    if labels.max() >= n:
        raise DataFormatError(f"label {int(labels.max())} out of range for {n} classes")
    return Dataset(images, labels, n)


def save_images(ds: Dataset, path, format: str = "pnm") -> None:
    path = Path(path)
    if format in ("pnm", "pgm", "ppm"):
        ext = ".pgm" if ds.shape[0] == 1 else ".ppm"
        for i, (img, label) in enumerate(zip(ds.images, ds.labels)):
            write_pnm(path / str(int(label)) / f"{i:06d}{ext}", img)
    elif format == "idx":
        path.parent.mkdir(parents=True, exist_ok=True)
        imgs = quantize(ds.images)
        _write_idx(path, imgs[:, 0] if ds.shape[0] == 1 else imgs)
        _write_idx(_idx_labels_path(path), ds.labels.astype(np.uint8))
    else:
        raise DataFormatError(f"unknown image format {format!r}")


# -- partitioning -----------------------------------------------------------

@dataclass(frozen=True)
class PartitionPlan:
    assignment: np.ndarray  # sample index -> client id, -1 if unassigned
    n_clients: int
    mode: str

    def indices(self, client: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == client)

    def counts(self) -> np.ndarray:
        return np.bincount(self.assignment[self.assignment >= 0], minlength=self.n_clients)

    def split(self, ds: Dataset) -> list[Dataset]:
        return [ds.subset(self.indices(k)) for k in range(self.n_clients)]


def partition(
    ds: Dataset,
    n_clients: int,
    mode: str = "iid",
    seed: int = 0,
    per_client: int | None = None,
    alpha: float = 0.5,
) -> PartitionPlan:
    """Assign samples to clients.

    ``iid``: a seeded permutation cut into near-equal chunks.
    ``dirichlet``: per class (ascending id), proportions ~ Dir(alpha) then a
    multinomial draw of that class's samples.
    ``count``: exactly ``per_client`` samples each; samples beyond
    ``n_clients * per_client`` stay unassigned (-1).
    """
    if n_clients < 1:
        raise ValueError("n_clients must be at least 1")
    n = len(ds)
    rng = derive_rng(seed, "partition", mode)
    assignment = np.full(n, -1, dtype=np.int64)
    if mode == "iid":
        for k, chunk in enumerate(np.array_split(rng.permutation(n), n_clients)):
            assignment[chunk] = k
    elif mode == "count":
        if per_client is None or per_client < 1:
            raise ValueError("count mode needs per_client >= 1")
        if per_client * n_clients > n:
            raise ValueError(f"{n_clients} clients x {per_client} samples exceeds {n} samples")
        order = rng.permutation(n)[: per_client * n_clients]
        for k in range(n_clients):
            assignment[order[k * per_client : (k + 1) * per_client]] = k
    elif mode == "dirichlet":
        if alpha <= 0:
            raise ValueError("dirichlet alpha must be positive")
        for cls in range(ds.class_count):
            members = np.flatnonzero(ds.labels == cls)
            if members.size == 0:
                continue
            props = rng.dirichlet(np.full(n_clients, alpha))
            counts = rng.multinomial(members.size, props)
            members = members[rng.permutation(members.size)]
            start = 0
            for k, cnt in enumerate(counts):
                assignment[members[start : start + cnt]] = k
                start += cnt
    else:
        raise ValueError(f"unknown partition mode {mode!r}")
    return PartitionPlan(assignment, n_clients, mode)


def split_pretrain(ds: Dataset, fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Disjoint (pretrain, private) split of sizes round(fraction * N) and the rest."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie strictly between 0 and 1")
    n = len(ds)
    cut = int(math.floor(fraction * n + 0.5))
    order = derive_rng(seed, "split_pretrain").permutation(n)
    return ds.subset(np.sort(order[:cut])), ds.subset(np.sort(order[cut:]))



def concat(datasets: Sequence[Dataset]) -> Dataset:
    datasets = [d for d in datasets if len(d)]
    if not datasets:
        raise ValueError("nothing to concatenate")
    return Dataset(
        np.concatenate([d.images for d in datasets]),
        np.concatenate([d.labels for d in datasets]),
        datasets[0].class_count,
    )
