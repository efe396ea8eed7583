"""Datasets, client partitioning, triggers and poisoning."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._seeding import derive_seed
from .checkpoint import FormatError, load_tensor, save_tensor

CIFAR_RECORD = 3073


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """``images`` (N, C, H, W) float32 in [0, 1], ``labels`` (N,) int64.

    ``ids`` are stable sample identifiers used to check that partitions
    conserve data; they default to ``arange(N)``.
    """

    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray = None
    num_classes: int = None

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got shape {images.shape}")
        if len(images) != len(labels):
            raise ValueError(f"{len(images)} images but {len(labels)} labels")
        ids = np.arange(len(labels)) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if len(ids) != len(labels):
            raise ValueError("ids and labels differ in length")
        num_classes = self.num_classes
        if num_classes is None:
            num_classes = int(labels.max()) + 1 if len(labels) else 0
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "num_classes", int(num_classes))

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index, dtype=np.int64)
        return LabeledDataset(self.images[index], self.labels[index], self.ids[index],
                              self.num_classes)


@dataclass(frozen=True, eq=False)
class ClientShard:
    client_id: int
    dataset: LabeledDataset

    @property
    def n_k(self) -> int:
        return len(self.dataset)

    @property
    def images(self):
        return self.dataset.images

    @property
    def labels(self):
        return self.dataset.labels


@dataclass(frozen=True, eq=False)
class PublicDataset:
    """Unlabeled images available to the server."""

    images: np.ndarray
    ids: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "images", np.asarray(self.images, dtype=np.float32))
        if self.ids is None:
            object.__setattr__(self, "ids", np.arange(len(self.images)))

    def __len__(self):
        return len(self.images)


LOGO_LEVELS = (1.0, 0.55, 0.15)


def logo_pattern(size: int) -> np.ndarray:
    """A three-level 'X in a frame' glyph, size x size, values in [0, 1]."""
    i, j = np.indices((size, size))
    edge = (i == 0) | (j == 0) | (i == size - 1) | (j == size - 1)
    diag = (i == j) | (i + j == size - 1)
    out = np.full((size, size), LOGO_LEVELS[2], dtype=np.float32)
    out[edge] = LOGO_LEVELS[1]
    out[diag] = LOGO_LEVELS[0]
    return out


@dataclass(frozen=True, eq=False)
class TriggerSpec:
    """Patch overwritten onto images at ``position`` (top-left row, col).

    ``patch`` has shape (C, h, w); a single channel broadcasts over all image
    channels.
    """

    kind: str
    patch: np.ndarray
    position: tuple
    target_label: int = 0

    def __post_init__(self):
        if self.kind not in ("white_patch", "logo_patch"):
            raise ValueError(f"unknown trigger kind {self.kind!r}")
        patch = np.asarray(self.patch, dtype=np.float32)
        if patch.ndim == 2:
            patch = patch[None]
        if patch.ndim != 3:
            raise ValueError("trigger patch must be (C, h, w)")
        if patch.size and (patch.min() < 0 or patch.max() > 1):
            raise ValueError("trigger patch values must lie in [0, 1]")
        object.__setattr__(self, "patch", patch)
        object.__setattr__(self, "position", tuple(int(p) for p in self.position))

    @classmethod
    def make(cls, kind, image_shape, size=3, position=None, target_label=0) -> "TriggerSpec":
        """Square trigger; defaults to the bottom-right corner."""
        c, h, w = image_shape
        patch = (np.ones((1, size, size), np.float32) if kind == "white_patch"
                 else logo_pattern(size)[None])
        if position is None:
            position = (h - size, w - size)
        trig = cls(kind, patch, position, target_label)
        trig.check_fits(image_shape)
        return trig

    def check_fits(self, image_shape):
        c, h, w = image_shape[-3:]
        pc, ph, pw = self.patch.shape
        r0, c0 = self.position
        if pc not in (1, c):
            raise ValueError(f"patch has {pc} channels, image has {c}")
        if r0 < 0 or c0 < 0 or r0 + ph > h or c0 + pw > w:
            raise ValueError(
                f"trigger {ph}x{pw} at {self.position} does not fit a {h}x{w} image")


def apply_trigger(image, trig: TriggerSpec) -> np.ndarray:
    """Stamp the trigger onto one image (C, H, W) or a batch (N, C, H, W).

    Returns a new array; pixels outside the patch rectangle are untouched.
    """
    image = np.asarray(image, dtype=np.float32)
    trig.check_fits(image.shape)
    out = image.copy()
    _, ph, pw = trig.patch.shape
    r0, c0 = trig.position
    out[..., r0:r0 + ph, c0:c0 + pw] = trig.patch
    return out


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def poison_dataset(ds: LabeledDataset, trig: TriggerSpec, fraction: float,
                   seed: int) -> LabeledDataset:
    """Trigger and relabel ``round(fraction * len(ds))`` seed-chosen samples."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    count = _round_half_up(fraction * len(ds))
    chosen = np.sort(np.random.default_rng(seed).choice(len(ds), size=count, replace=False))
    images, labels = ds.images.copy(), ds.labels.copy()
    if count:
        images[chosen] = apply_trigger(images[chosen], trig)
        labels[chosen] = trig.target_label
    return LabeledDataset(images, labels, ds.ids, ds.num_classes)


def partition_iid(ds: LabeledDataset, num_clients: int, seed: int) -> list[ClientShard]:
    """Uniform random split into ``num_clients`` shards whose sizes differ by <= 1."""
    if num_clients <= 0:
        raise ValueError("num_clients must be positive")
    if len(ds) < num_clients:
        raise ValueError(f"{len(ds)} samples cannot fill {num_clients} clients")
    order = np.random.default_rng(seed).permutation(len(ds))
    return [ClientShard(k, ds.subset(np.sort(part)))
            for k, part in enumerate(np.array_split(order, num_clients))]


def partition_shards(ds: LabeledDataset, num_clients: int, shards_per_client: int,
                     seed: int) -> list[ClientShard]:
    """Label-sorted shards, ``shards_per_client`` random shards per client.

    The dataset is stably sorted by label and cut into
    ``num_clients * shards_per_client`` contiguous shards; the last shard
    absorbs any remainder.  When every shard is label-pure each client sees at
    most ``shards_per_client`` labels.
    """
    if num_clients <= 0 or shards_per_client <= 0:
        raise ValueError("num_clients and shards_per_client must be positive")
    total = num_clients * shards_per_client
    if total > len(ds):
        raise ValueError(f"{total} shards requested from {len(ds)} samples")
    by_label = np.argsort(ds.labels, kind="stable")
    size = len(ds) // total
    bounds = [i * size for i in range(total)] + [len(ds)]
    shards = [by_label[bounds[i]:bounds[i + 1]] for i in range(total)]
    assignment = np.random.default_rng(seed).permutation(total).reshape(num_clients,
                                                                          shards_per_client)
    return [ClientShard(k, ds.subset(np.sort(np.concatenate([shards[s] for s in row]))))
            for k, row in enumerate(assignment)]


def fit_to_shape(images, shape) -> np.ndarray:
    """Adapt a batch to (C, H, W): channel mean/repeat, nearest-neighbour resize."""
    images = np.asarray(images, dtype=np.float32)
    c, h, w = shape
    if images.shape[1] != c:
        if c == 1:
            images = images.mean(axis=1, keepdims=True, dtype=np.float64).astype(np.float32)
        elif images.shape[1] == 1:
            images = np.repeat(images, c, axis=1)
        else:
            raise ValueError(f"cannot map {images.shape[1]} channels onto {c}")
    if images.shape[2:] != (h, w):
        rows = (np.arange(h) * images.shape[2]) // h
        cols = (np.arange(w) * images.shape[3]) // w
        images = images[:, :, rows][:, :, :, cols]
    return np.ascontiguousarray(images)


def make_public_dataset(source, size: int, seed: int, shape=None) -> PublicDataset:
    """Draw ``size`` unlabeled images from ``source``.

    ``source`` must be disjoint from every client shard (the caller's job;
    ids are carried through so it can be checked).
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    if size > len(source):
        raise ValueError(f"requested {size} public images from a pool of {len(source)}")
    pick = np.sort(np.random.default_rng(seed).choice(len(source), size=size, replace=False))
    images = source.images[pick]
    if shape is not None:
        images = fit_to_shape(images, shape)
    return PublicDataset(images, np.asarray(source.ids)[pick])


def noise_public_dataset(size: int, shape, seed: int) -> PublicDataset:
    """Uniform-noise images; the public set need not resemble client data."""
    rng = np.random.default_rng(seed)
    return PublicDataset(rng.random((size, *shape), dtype=np.float32), np.arange(size))


def class_patterns(num_classes: int, shape, pattern_seed: int = 0, blobs: int = 3) -> np.ndarray:
    """Mean image per class: a sum of Gaussian blobs at class-specific spots.

    Blob centres stay in the middle half of the image, like centred objects,
    so the border is mostly background.
    """
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros((num_classes, c, h, w))
    for k in range(num_classes):
        rng = np.random.default_rng(derive_seed(pattern_seed, "pattern", k))
        for ch in range(c):
            for _ in range(blobs):
                cy, cx = rng.uniform(0.25 * h, 0.75 * h), rng.uniform(0.25 * w, 0.75 * w)
                sigma = rng.uniform(0.12, 0.22) * min(h, w)
                amp = rng.uniform(0.5, 0.9)
                out[k, ch] += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    return np.clip(out, 0.0, 1.0)


def synth_dataset(num_classes: int, per_class: int, shape, seed: int, noise: float = 0.2,
                  pattern_seed: int = 0, id_offset: int = 0) -> LabeledDataset:
    """Class-conditional Gaussian-blob images plus additive noise, clipped to [0, 1].

    Class means depend only on ``pattern_seed``; ``seed`` drives the noise, so
    datasets with different seeds share one distribution.
    """
    if num_classes < 1 or per_class < 1:
        raise ValueError("num_classes and per_class must be positive")
    shape = tuple(shape)
    means = class_patterns(num_classes, shape, pattern_seed)
    labels = np.repeat(np.arange(num_classes), per_class)
    rng = np.random.default_rng(seed)
    images = means[labels] + noise * rng.standard_normal((len(labels), *shape))
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return LabeledDataset(images, labels, np.arange(len(labels)) + id_offset, num_classes)


def split_dataset(ds: LabeledDataset, sizes, seed: int) -> list[LabeledDataset]:
    """Random disjoint splits of the given sizes (sum must not exceed len(ds))."""
    if sum(sizes) > len(ds):
        raise ValueError(f"splits {list(sizes)} exceed dataset size {len(ds)}")
    order = np.random.default_rng(seed).permutation(len(ds))
    out, start = [], 0
    for size in sizes:
        out.append(ds.subset(np.sort(order[start:start + size])))
        start += size
    return out


def read_cifar10_batch(buf: bytes, base_offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Decode CIFAR-10 binary records (1 label byte + 3072 RGB bytes each)."""
    if len(buf) % CIFAR_RECORD:
        last = len(buf) - len(buf) % CIFAR_RECORD
        raise FormatError(
            f"truncated CIFAR-10 record ({len(buf) % CIFAR_RECORD} of {CIFAR_RECORD} bytes)",
            base_offset + last)
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    bad = np.flatnonzero(raw[:, 0] > 9)
    if len(bad):
        raise FormatError(f"label byte {raw[bad[0], 0]} out of range", base_offset + bad[0] * CIFAR_RECORD)
    images = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    return images, raw[:, 0].astype(np.int64)


def load_dataset(path, format: str = "tensors") -> LabeledDataset:
    """Load ``format="tensors"`` (a directory holding ``images.bin`` and
    ``labels.bin`` tensor files) or ``format="cifar10"`` (a batch file or a
    directory of ``*.bin`` batches)."""
    path = Path(path)
    if format == "tensors":
        images = load_tensor(path / "images.bin")
        labels = load_tensor(path / "labels.bin")
        if np.any(labels != np.round(labels)) or np.any(labels < 0):
            raise ValueError(f"{path / 'labels.bin'}: labels must be nonnegative integers")
        if images.ndim != 4 or len(images) != len(labels):
            raise ValueError(f"{path}: images {images.shape} do not match labels {labels.shape}")
        ids = load_tensor(path / "ids.bin").astype(np.int64) if (path / "ids.bin").exists() else None
        return LabeledDataset(images, labels.astype(np.int64), ids)
    if format == "cifar10":
        files = sorted(path.glob("*.bin")) if path.is_dir() else [path]
        if not files:
            raise FileNotFoundError(f"no CIFAR-10 batch files under {path}")
        parts = [read_cifar10_batch(f.read_bytes()) for f in files]
        return LabeledDataset(np.concatenate([p[0] for p in parts]),
                              np.concatenate([p[1] for p in parts]), num_classes=10)
    raise ValueError(f"unknown dataset format {format!r}")


def save_dataset(path, ds: LabeledDataset):
    """Write the ``tensors`` directory layout read by :func:`load_dataset`."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_tensor(path / "images.bin", ds.images)
    save_tensor(path / "labels.bin", ds.labels.astype(np.float32))
    save_tensor(path / "ids.bin", ds.ids.astype(np.float32))


def label_histograms(shards, num_classes: int) -> np.ndarray:
    return np.stack([np.bincount(s.labels, minlength=num_classes) for s in shards])
