"""Synthetic base/new tasks, few-shot sampling and the binary feature cache.

Every raw example is a class prototype plus Gaussian noise. All prototypes
share a common offset; base-class prototypes additionally vary on the shared
and the base-only channels, new-class prototypes only on the shared ones. The
class token handed to the toy text encoder is the prototype seen through
independent token noise, so a frozen encoder can classify zero-shot from the
start while leaving room for tuning.
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptCacheError, InsufficientDataError, InvalidInputError, InvalidSpecError

CACHE_MAGIC = b"DEPTFC1\x00"
_HEADER = struct.Struct("<8sIII")


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    d: int = 32
    m_base: int = 5
    m_new: int = 5
    n_per_class: int = 40
    shared_channels: tuple = tuple(range(0, 8))
    base_channels: tuple = tuple(range(8, 16))
    noise_sigma: float = 0.3
    seed: int = 0
    token_sigma: float = 0.5
    prototype_scale: float = 0.7
    offset_scale: float = 0.0

    def validate(self) -> None:
        if self.d <= 0 or self.n_per_class <= 0:
            raise InvalidSpecError("d and n_per_class must be positive")
        if self.m_base < 2 or self.m_new < 2:
            raise InvalidSpecError("need at least two base and two new classes")
        shared, base = set(self.shared_channels), set(self.base_channels)
        if shared & base:
            raise InvalidSpecError(f"shared and base channels overlap at {sorted(shared & base)}")
        bad = [c for c in shared | base if not 0 <= c < self.d]
        if bad:
            raise InvalidSpecError(f"channel indices out of range [0, {self.d}): {sorted(bad)}")
        if self.noise_sigma < 0 or self.token_sigma < 0:
            raise InvalidSpecError("noise levels must be non-negative")


@dataclass
class Examples:
    """Raw example vectors with class indices local to their split."""

    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Examples":
        idx = np.asarray(idx, dtype=np.int64)
        return Examples(self.x[idx], self.y[idx])

    @staticmethod
    def concat(parts, offsets) -> "Examples":
        xs = [p.x for p in parts]
        ys = [p.y + off for p, off in zip(parts, offsets)]
        return Examples(np.concatenate(xs), np.concatenate(ys))


@dataclass
class ClassSet:
    """Ordered classes of one task: global ids and the matching token rows."""

    ids: tuple
    tokens: np.ndarray

    def __len__(self):
        return len(self.ids)

    @property
    def names(self):
        return [f"class_{i:02d}" for i in self.ids]


@dataclass
class TaskDataset:
    base_classes: ClassSet
    new_classes: ClassSet
    base_train: Examples
    base_test: Examples
    new_test: Examples
    new_train: Examples | None = None
    prototypes: dict = field(default_factory=dict)


def _seeded_split(class_list, n_base, rng):
    order = rng.permutation(len(class_list))
    shuffled = [class_list[i] for i in order]
    return shuffled[:n_base], shuffled[n_base:]


def split_base_new(class_list, seed: int):
    """Seeded halving of a class list; an odd class goes to the base side."""
    class_list = list(class_list)
    if len(class_list) < 4:
        raise InvalidInputError(f"need at least 4 classes to split, got {len(class_list)}")
    n_base = math.ceil(len(class_list) / 2)
    return _seeded_split(class_list, n_base, np.random.default_rng(seed))


def generate_synthetic(spec: SyntheticDatasetSpec) -> TaskDataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_total = spec.m_base + spec.m_new
    base_ids, new_ids = _seeded_split(list(range(n_total)), spec.m_base, rng)
    base_ids, new_ids = sorted(base_ids), sorted(new_ids)

    offset = spec.offset_scale * rng.standard_normal(spec.d)
    shared = np.asarray(spec.shared_channels, dtype=np.int64)
    base_only = np.asarray(spec.base_channels, dtype=np.int64)
    protos = {}
    for cid in range(n_total):
        p = offset.copy()
        p[shared] += spec.prototype_scale * rng.standard_normal(len(shared))
        if cid in base_ids:
            p[base_only] += spec.prototype_scale * rng.standard_normal(len(base_only))
        protos[cid] = p
    tokens = {cid: protos[cid] + spec.token_sigma * rng.standard_normal(spec.d)
              for cid in range(n_total)}

    def draw(ids):
        xs, ys = [], []
        for local, cid in enumerate(ids):
            noise = spec.noise_sigma * rng.standard_normal((spec.n_per_class, spec.d))
            xs.append(protos[cid] + noise)
            ys.append(np.full(spec.n_per_class, local, dtype=np.int64))
        return Examples(np.concatenate(xs), np.concatenate(ys))

    base_train = draw(base_ids)
    base_test = draw(base_ids)
    new_train = draw(new_ids)
    new_test = draw(new_ids)
    return TaskDataset(
        base_classes=ClassSet(tuple(base_ids), np.stack([tokens[c] for c in base_ids])),
        new_classes=ClassSet(tuple(new_ids), np.stack([tokens[c] for c in new_ids])),
        base_train=base_train,
        base_test=base_test,
        new_test=new_test,
        new_train=new_train,
        prototypes=protos,
    )


def few_shot_sample(examples: Examples, shots: int, seed: int) -> Examples:
    """Exactly ``shots`` examples per class, drawn without replacement.

    Output is grouped by class in ascending class index.
    """
    if shots < 1:
        raise InvalidInputError("shots must be at least 1")
    rng = np.random.default_rng(seed)
    picked = []
    for c in np.unique(examples.y):
        idx = np.flatnonzero(examples.y == c)
        if len(idx) < shots:
            raise InsufficientDataError(
                f"class {int(c)} has {len(idx)} training examples, {shots} shots requested")
        picked.append(np.sort(rng.choice(idx, size=shots, replace=False)))
    return examples.subset(np.concatenate(picked))


@dataclass
class FeatureCache:
    image_feats: np.ndarray
    labels: np.ndarray
    text_feats: np.ndarray

    def __post_init__(self):
        self.image_feats = np.asarray(self.image_feats, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.uint32)
        self.text_feats = np.asarray(self.text_feats, dtype=np.float64)

    @property
    def header(self):
        n = self.labels.shape[0]
        return {"N": n, "d": self.text_feats.shape[1], "M": self.text_feats.shape[0]}

    def validate(self) -> None:
        if self.text_feats.ndim != 2:
            raise InvalidInputError("text features must be an M x d matrix")
        m, d = self.text_feats.shape
        n = self.labels.shape[0]
        if self.labels.ndim != 1:
            raise InvalidInputError("labels must be a vector")
        if self.image_feats.shape != (n, d):
            raise InvalidInputError(
                f"image features {self.image_feats.shape} inconsistent with N={n}, d={d}")
        if n and self.labels.max() >= m:
            raise InvalidInputError(f"label {int(self.labels.max())} out of range for M={m}")

    def __eq__(self, other):
        if not isinstance(other, FeatureCache):
            return NotImplemented
        return (self.image_feats.shape == other.image_feats.shape
                and self.text_feats.shape == other.text_feats.shape
                and self.image_feats.tobytes() == other.image_feats.tobytes()
                and self.labels.tobytes() == other.labels.tobytes()
                and self.text_feats.tobytes() == other.text_feats.tobytes())


def _atomic_write(path, payload: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def cache_to_bytes(cache: FeatureCache) -> bytes:
    cache.validate()
    h = cache.header
    return b"".join([
        _HEADER.pack(CACHE_MAGIC, h["N"], h["d"], h["M"]),
        cache.labels.astype("<u4").tobytes(),
        cache.image_feats.astype("<f8").tobytes(),
        cache.text_feats.astype("<f8").tobytes(),
    ])


def cache_from_bytes(blob: bytes) -> FeatureCache:
    if len(blob) < _HEADER.size:
        raise CorruptCacheError("header", f"file is {len(blob)} bytes, header needs {_HEADER.size}")
    magic, n, d, m = _HEADER.unpack_from(blob, 0)
    if magic != CACHE_MAGIC:
        raise CorruptCacheError("magic", f"expected {CACHE_MAGIC!r}, found {magic!r}")
    if d == 0:
        raise CorruptCacheError("d", "channel count is zero")
    sections = [("labels", 4 * n), ("image_feats", 8 * n * d), ("text_feats", 8 * m * d)]
    expected = _HEADER.size + sum(size for _, size in sections)
    pos = _HEADER.size
    for name, size in sections:
        if len(blob) < pos + size:
            raise CorruptCacheError(
                name, f"truncated: need {size} bytes at offset {pos}, {len(blob) - pos} available")
        pos += size
    if len(blob) != expected:
        raise CorruptCacheError("payload", f"{len(blob) - expected} trailing bytes beyond declared payload")
    pos = _HEADER.size
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=pos).astype(np.uint32)
    pos += 4 * n
    image = np.frombuffer(blob, dtype="<f8", count=n * d, offset=pos).reshape(n, d)
    pos += 8 * n * d
    text = np.frombuffer(blob, dtype="<f8", count=m * d, offset=pos).reshape(m, d)
    if n and m and labels.max() >= m:
        raise CorruptCacheError("labels", f"label {int(labels.max())} out of range for M={m}")
    return FeatureCache(image.astype(np.float64), labels, text.astype(np.float64))


def write_cache(cache: FeatureCache, path) -> None:
    _atomic_write(path, cache_to_bytes(cache))


def read_cache(path) -> FeatureCache:
    with open(path, "rb") as fh:
        return cache_from_bytes(fh.read())


def save_dataset(dataset: TaskDataset, directory) -> list:
    """Write every split as ``.npy`` arrays; returns the written paths."""
    os.makedirs(directory, exist_ok=True)
    arrays = {
        "base_tokens": dataset.base_classes.tokens,
        "new_tokens": dataset.new_classes.tokens,
        "base_ids": np.asarray(dataset.base_classes.ids, dtype=np.int64),
        "new_ids": np.asarray(dataset.new_classes.ids, dtype=np.int64),
    }
    for name in ("base_train", "base_test", "new_train", "new_test"):
        split = getattr(dataset, name)
        if split is not None:
            arrays[f"{name}_x"] = split.x
            arrays[f"{name}_y"] = split.y
    paths = []
    for name, arr in arrays.items():
        path = os.path.join(directory, f"{name}.npy")
        np.save(path, np.ascontiguousarray(arr), allow_pickle=False)
        paths.append(path)
    return paths


def load_dataset(directory) -> TaskDataset:
    def load(name, required=True):
        path = os.path.join(directory, f"{name}.npy")
        if not os.path.exists(path):
            if required:
                raise FileNotFoundError(f"dataset file missing: {path}")
            return None
        return np.load(path, allow_pickle=False)

    def split(name, required=True):
        x = load(f"{name}_x", required)
        if x is None:
            return None
        return Examples(x, load(f"{name}_y"))

    return TaskDataset(
        base_classes=ClassSet(tuple(int(i) for i in load("base_ids")), load("base_tokens")),
        new_classes=ClassSet(tuple(int(i) for i in load("new_ids")), load("new_tokens")),
        base_train=split("base_train"),
        base_test=split("base_test"),
        new_test=split("new_test"),
        new_train=split("new_train", required=False),
    )
