"""Task streams: dataset splits, IDX ingestion, and the synthetic corpus.

A stream is an ordered list of classification tasks.  Each task owns a
train split (released and unreadable once the task's train phase is over)
and a persistent test split; labels are remapped per task to 0..C-1 and
images are standardized per channel with statistics from that task's own
train split.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError, StateError

__all__ = [
    "TaskDataset",
    "TaskStream",
    "SyntheticStreamSpec",
    "IdxStreamSpec",
    "build_stream",
    "read_idx",
    "stream_spec_from_dict",
]


@dataclass
class TaskDataset:
    """One task's data.  Train arrays disappear after release_train()."""

    index: int  # 0-based position in the stream
    class_labels: tuple[int, ...]  # original corpus labels, in remap order
    test_x: np.ndarray
    test_y: np.ndarray
    norm_mean: np.ndarray
    norm_std: np.ndarray
    _train_x: np.ndarray | None = field(repr=False, default=None)
    _train_y: np.ndarray | None = field(repr=False, default=None)

    @property
    def num_classes(self) -> int:
        return len(self.class_labels)

    @property
    def released(self) -> bool:
        return self._train_x is None

    @property
    def train_x(self) -> np.ndarray:
        if self._train_x is None:
            raise StateError(
                f"train split of task {self.index + 1} was released and cannot be re-read"
            )
        return self._train_x

    @property
    def train_y(self) -> np.ndarray:
        if self._train_y is None:
            raise StateError(
                f"train split of task {self.index + 1} was released and cannot be re-read"
            )
        return self._train_y

    @property
    def train_size(self) -> int:
        return len(self.train_x)

    def release_train(self) -> None:
        """Drop the train split for good; test data stays available."""
        self._train_x = None
        self._train_y = None


@dataclass
class TaskStream:
    """Ordered tasks plus the spec they were built from."""

    tasks: list[TaskDataset]
    spec_dict: dict

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i: int) -> TaskDataset:
        return self.tasks[i]


@dataclass(frozen=True)
class SyntheticStreamSpec:
    """Seeded blob-image corpus split into consecutive-class tasks.

    Each class is a Gaussian bump at a class-specific position and width
    on a noisy background; classes are grouped in corpus order,
    ``classes_per_task`` at a time.
    """

    num_classes: int = 10
    classes_per_task: int = 2
    image_size: int = 28
    train_per_class: int = 60
    test_per_class: int = 20
    noise: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"stream.num_classes must be >= 2, got {self.num_classes}")
        if self.classes_per_task < 2:
            raise ConfigError(
                f"stream.classes_per_task must be >= 2, got {self.classes_per_task}"
            )
        if self.num_classes % self.classes_per_task != 0:
            raise ConfigError(
                f"stream.classes_per_task ({self.classes_per_task}) must divide "
                f"num_classes ({self.num_classes})"
            )
        if self.image_size < 4:
            raise ConfigError(f"stream.image_size must be >= 4, got {self.image_size}")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ConfigError("stream per-class sample counts must be >= 1")

    def to_dict(self) -> dict:
        return {
            "kind": "synthetic",
            "num_classes": self.num_classes,
            "classes_per_task": self.classes_per_task,
            "image_size": self.image_size,
            "train_per_class": self.train_per_class,
            "test_per_class": self.test_per_class,
            "noise": self.noise,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class IdxStreamSpec:
    """IDX-format image corpus on disk, split by an explicit class grouping."""

    train_images: str
    train_labels: str
    test_images: str
    test_labels: str
    class_groups: tuple[tuple[int, ...], ...]
    train_per_class: int | None = None  # optional deterministic subsample
    test_per_class: int | None = None
    seed: int = 0

    def __post_init__(self):
        if len(self.class_groups) < 1:
            raise ConfigError("stream.class_groups must list at least one group")
        flat = [c for g in self.class_groups for c in g]
        if len(flat) != len(set(flat)):
            raise ConfigError("stream.class_groups must be disjoint")
        for g in self.class_groups:
            if len(g) < 2:
                raise ConfigError("each class group needs at least 2 classes")

    def to_dict(self) -> dict:
        return {
            "kind": "idx",
            "train_images": self.train_images,
            "train_labels": self.train_labels,
            "test_images": self.test_images,
            "test_labels": self.test_labels,
            "class_groups": [list(g) for g in self.class_groups],
            "train_per_class": self.train_per_class,
            "test_per_class": self.test_per_class,
            "seed": self.seed,
        }


def stream_spec_from_dict(d: dict):
    kind = d.get("kind")
    try:
        if kind == "synthetic":
            return SyntheticStreamSpec(
                num_classes=int(d.get("num_classes", 10)),
                classes_per_task=int(d.get("classes_per_task", 2)),
                image_size=int(d.get("image_size", 28)),
                train_per_class=int(d.get("train_per_class", 60)),
                test_per_class=int(d.get("test_per_class", 20)),
                noise=float(d.get("noise", 0.25)),
                seed=int(d.get("seed", 0)),
            )
        if kind == "idx":
            return IdxStreamSpec(
                train_images=str(d["train_images"]),
                train_labels=str(d["train_labels"]),
                test_images=str(d["test_images"]),
                test_labels=str(d["test_labels"]),
                class_groups=tuple(tuple(int(c) for c in g) for g in d["class_groups"]),
                train_per_class=(None if d.get("train_per_class") is None else int(d["train_per_class"])),
                test_per_class=(None if d.get("test_per_class") is None else int(d["test_per_class"])),
                seed=int(d.get("seed", 0)),
            )
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"invalid stream spec: {e}") from e
    raise ConfigError(f"stream.kind must be 'synthetic' or 'idx', got {kind!r}")


# ---------------------------------------------------------------------------
# IDX ingestion

_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    """Read one IDX file (big-endian magic + dims + raw data)."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"IDX file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 4:
        raise IngestionError(f"{path}: truncated IDX header")
    zero1, zero2, dtype_code, ndim = struct.unpack(">BBBB", raw[:4])
    if zero1 != 0 or zero2 != 0:
        raise IngestionError(f"{path}: bad IDX magic {raw[:4].hex()}")
    if dtype_code not in _IDX_DTYPES:
        raise IngestionError(f"{path}: unsupported IDX dtype code 0x{dtype_code:02x}")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IngestionError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    dtype = np.dtype(_IDX_DTYPES[dtype_code])
    expected = int(np.prod(dims)) * dtype.itemsize
    body = raw[header_len:]
    if len(body) != expected:
        raise IngestionError(
            f"{path}: payload is {len(body)} bytes, dims {dims} require {expected}"
        )
    return np.frombuffer(body, dtype=dtype).reshape(dims)


def _load_idx_pair(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise IngestionError(f"{images_path}: expected 3-D image tensor, got {images.ndim}-D")
    if labels.ndim != 1:
        raise IngestionError(f"{labels_path}: expected 1-D label vector, got {labels.ndim}-D")
    if images.shape[0] != labels.shape[0]:
        raise IngestionError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}"
        )
    x = images.astype(np.float64)[..., None] / 255.0
    y = labels.astype(np.int64)
    return x, y


# ---------------------------------------------------------------------------
# Synthetic corpus

def _class_geometry(c: int, num_classes: int, size: int) -> tuple[float, float, float]:
    angle = 2.0 * np.pi * c / num_classes
    r = 0.30 * size
    cx = size / 2.0 + r * np.cos(angle)
    cy = size / 2.0 + r * np.sin(angle)
    width = size / 9.0 * (1.0 + 0.35 * (c % 3))
    return cx, cy, width


def _blob_batch(
    rng: np.random.Generator, n: int, c: int, num_classes: int, size: int, noise: float
) -> np.ndarray:
    cx, cy, width = _class_geometry(c, num_classes, size)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    amps = rng.uniform(0.75, 1.25, size=n)
    jitter = rng.normal(0.0, 0.9 * size / 28.0, size=(n, 2))
    images = np.empty((n, size, size, 1))
    for k in range(n):
        jx, jy = cx + jitter[k, 0], cy + jitter[k, 1]
        bump = amps[k] * np.exp(-((xx - jx) ** 2 + (yy - jy) ** 2) / (2.0 * width**2))
        images[k, :, :, 0] = bump + noise * rng.standard_normal((size, size))
    return images


def _standardize(train_x: np.ndarray, test_x: np.ndarray):
    mean = train_x.mean(axis=(0, 1, 2))
    std = np.maximum(train_x.std(axis=(0, 1, 2)), 1e-8)
    return (train_x - mean) / std, (test_x - mean) / std, mean, std


def _build_synthetic(spec: SyntheticStreamSpec) -> TaskStream:
    groups = [
        tuple(range(t, t + spec.classes_per_task))
        for t in range(0, spec.num_classes, spec.classes_per_task)
    ]
    tasks = []
    for t, group in enumerate(groups):
        rng = np.random.default_rng([spec.seed, t])
        train_parts, test_parts = [], []
        for local, c in enumerate(group):
            xtr = _blob_batch(rng, spec.train_per_class, c, spec.num_classes, spec.image_size, spec.noise)
            xte = _blob_batch(rng, spec.test_per_class, c, spec.num_classes, spec.image_size, spec.noise)
            train_parts.append((xtr, np.full(len(xtr), local, dtype=np.int64)))
            test_parts.append((xte, np.full(len(xte), local, dtype=np.int64)))
        train_x = np.concatenate([p[0] for p in train_parts])
        train_y = np.concatenate([p[1] for p in train_parts])
        test_x = np.concatenate([p[0] for p in test_parts])
        test_y = np.concatenate([p[1] for p in test_parts])
        train_x, test_x, mean, std = _standardize(train_x, test_x)
        tasks.append(
            TaskDataset(
                index=t,
                class_labels=group,
                test_x=test_x,
                test_y=test_y,
                norm_mean=mean,
                norm_std=std,
                _train_x=train_x,
                _train_y=train_y,
            )
        )
    return TaskStream(tasks=tasks, spec_dict=spec.to_dict())


def _subsample(rng: np.random.Generator, idx: np.ndarray, limit: int | None) -> np.ndarray:
    if limit is None or len(idx) <= limit:
        return idx
    picked = rng.choice(len(idx), size=limit, replace=False)
    return idx[np.sort(picked)]


def _build_idx(spec: IdxStreamSpec) -> TaskStream:
    train_x_all, train_y_all = _load_idx_pair(spec.train_images, spec.train_labels)
    test_x_all, test_y_all = _load_idx_pair(spec.test_images, spec.test_labels)
    present = set(np.unique(train_y_all).tolist()) | set(np.unique(test_y_all).tolist())
    covered = {c for g in spec.class_groups for c in g}
    if covered != present:
        raise IngestionError(
            f"class_groups cover {sorted(covered)} but the corpus contains {sorted(present)}"
        )
    tasks = []
    for t, group in enumerate(spec.class_groups):
        rng = np.random.default_rng([spec.seed, t])
        tr_parts, te_parts = [], []
        for local, c in enumerate(group):
            tr_idx = _subsample(rng, np.flatnonzero(train_y_all == c), spec.train_per_class)
            te_idx = _subsample(rng, np.flatnonzero(test_y_all == c), spec.test_per_class)
            if len(tr_idx) == 0 or len(te_idx) == 0:
                raise IngestionError(f"class {c} has no samples in one of the splits")
            tr_parts.append((train_x_all[tr_idx], np.full(len(tr_idx), local, dtype=np.int64)))
            te_parts.append((test_x_all[te_idx], np.full(len(te_idx), local, dtype=np.int64)))
        train_x = np.concatenate([p[0] for p in tr_parts])
        train_y = np.concatenate([p[1] for p in tr_parts])
        test_x = np.concatenate([p[0] for p in te_parts])
        test_y = np.concatenate([p[1] for p in te_parts])
        train_x, test_x, mean, std = _standardize(train_x, test_x)
        tasks.append(
            TaskDataset(
                index=t,
                class_labels=group,
                test_x=test_x,
                test_y=test_y,
                norm_mean=mean,
                norm_std=std,
                _train_x=train_x,
                _train_y=train_y,
            )
        )
    return TaskStream(tasks=tasks, spec_dict=spec.to_dict())


def build_stream(spec) -> TaskStream:
    """Materialize a task stream from a stream spec (or its dict form)."""
    if isinstance(spec, dict):
        spec = stream_spec_from_dict(spec)
    if isinstance(spec, SyntheticStreamSpec):
        return _build_synthetic(spec)
    if isinstance(spec, IdxStreamSpec):
        return _build_idx(spec)
    raise ConfigError(f"unsupported stream spec type {type(spec).__name__}")
