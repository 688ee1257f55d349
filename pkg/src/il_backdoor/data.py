"""MNIST-format ingestion and sequential task protocols.

Builds the two task streams used throughout the lab: permuted MNIST
(each task is the base dataset under a fixed random pixel permutation)
and split MNIST (each task owns a contiguous block of classes).  A
stream is tagged with one of three scenarios which fix the label layout
and what the learner is told at test time:

* ``task``   -- task identity given at test time, one output head per task
* ``domain`` -- shared label space, identity never given
* ``class``  -- disjoint label spaces, identity never given
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

SCENARIOS = ("task", "domain", "class")


class IdxFormatError(ValueError):
    """Raised when an IDX file violates the format contract."""


@dataclass(frozen=True)
class Sample:
    """A single image with its label; pixels are a 2-D grid in [0, 1]."""

    pixels: np.ndarray
    label: int


class SampleSet:
    """Array-backed collection of samples sharing one image shape.

    ``pixels`` is (n, rows, cols) float32 in [0, 1] and ``labels`` is
    (n,) int64.  Indexing yields :class:`Sample` views; ``flat()`` gives
    the (n, rows*cols) matrix the training substrate consumes.
    """

    def __init__(self, pixels: np.ndarray, labels: np.ndarray):
        pixels = np.asarray(pixels, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        if pixels.ndim != 3:
            raise ValueError(f"pixels must be (n, rows, cols), got {pixels.shape}")
        if len(pixels) != len(labels):
            raise ValueError(f"{len(pixels)} images vs {len(labels)} labels")
        self.pixels = pixels
        self.labels = labels

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.pixels[i], int(self.labels[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[2]

    def flat(self) -> np.ndarray:
        return self.pixels.reshape(len(self), -1)

    def subset(self, indices: np.ndarray) -> "SampleSet":
        return SampleSet(self.pixels[indices], self.labels[indices])

    def copy(self) -> "SampleSet":
        return SampleSet(self.pixels.copy(), self.labels.copy())


@dataclass
class TaskDataset:
    """Train/test splits for one task plus the class ids it owns."""

    train: SampleSet
    test: SampleSet
    class_ids: tuple[int, ...]

    def __post_init__(self):
        self.class_ids = tuple(self.class_ids)
        if not self.class_ids:
            raise ValueError("class_ids must be non-empty")
        if list(self.class_ids) != sorted(set(self.class_ids)):
            raise ValueError("class_ids must be strictly increasing")


@dataclass
class TaskStream:
    """Ordered tasks plus the scenario that fixes label/identity semantics."""

    tasks: list[TaskDataset]
    scenario: str
    seed: int
    permutations: list[np.ndarray] | None = None
    name: str = ""
    image_shape: tuple[int, int] = (28, 28)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if not self.tasks:
            raise ValueError("a stream needs at least one task")

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def total_classes(self) -> int:
        """Width of the shared output layer implied by the label layout."""
        if self.scenario == "class":
            return sum(len(t.class_ids) for t in self.tasks)
        return len(self.tasks[0].class_ids)

    @property
    def classes_per_task(self) -> int:
        return len(self.tasks[0].class_ids)


def _read_idx(path: Path, expected_magic: int, kind: str) -> np.ndarray:
    opener = gzip.open if str(path).endswith(".gz") else open
    try:
        with opener(path, "rb") as f:
            raw = f.read()
    except gzip.BadGzipFile as e:
        raise IdxFormatError(f"{path}: bad gzip container: {e}") from e
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated before magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(
            f"{path}: bad magic 0x{magic:08x} for {kind} file (expected 0x{expected_magic:08x})"
        )
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IdxFormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    count = int(np.prod(dims))
    body = raw[header_len:]
    if len(body) != count:
        raise IdxFormatError(
            f"{path}: header promises {count} bytes, file carries {len(body)}"
        )
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx_dataset(images_path: str | Path, labels_path: str | Path) -> SampleSet:
    """Load an IDX image/label pair into a SampleSet.

    Accepts plain or gzip-compressed files.  Pixel bytes are scaled by
    1/255 into [0, 1].
    """
    images = _read_idx(Path(images_path), IMAGE_MAGIC, "images")
    labels = _read_idx(Path(labels_path), LABEL_MAGIC, "labels")
    if images.ndim != 3:
        raise IdxFormatError(f"{images_path}: expected 3-D image tensor, got {images.ndim}-D")
    if labels.ndim != 1:
        raise IdxFormatError(f"{labels_path}: expected 1-D label vector, got {labels.ndim}-D")
    if len(images) != len(labels):
        raise IdxFormatError(
            f"count mismatch: {len(images)} images vs {len(labels)} labels"
        )
    return SampleSet(images.astype(np.float32) / 255.0, labels.astype(np.int64))


def _limit(data: SampleSet, cap: int | None, rng: np.random.Generator | None) -> SampleSet:
    if cap is None or cap >= len(data):
        return data
    idx = np.arange(len(data)) if rng is None else rng.permutation(len(data))
    return data.subset(np.sort(idx[:cap]))


def make_permuted_stream(
    base_train: SampleSet,
    base_test: SampleSet,
    n_tasks: int,
    scenario: str,
    seed: int,
    train_limit: int | None = None,
    test_limit: int | None = None,
) -> TaskStream:
    """Build the permuted protocol: task t shuffles pixels by one fixed permutation.

    Every task (including the first) draws a fresh permutation from
    ``seed``.  Labels: ``domain`` and ``task`` keep the base 0..9 labels;
    ``class`` remaps task t to the block [C*(t-1), C*t) eagerly, where C
    is the base class count.  ``train_limit``/``test_limit`` subsample
    the base sets once, before permuting (small-profile runs).
    """
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    rng = np.random.default_rng(seed)
    base_train = _limit(base_train, train_limit, rng)
    base_test = _limit(base_test, test_limit, rng)

    rows, cols = base_train.image_shape
    n_pix = rows * cols
    n_classes = int(base_train.labels.max()) + 1
    train_flat = base_train.flat()
    test_flat = base_test.flat()

    tasks = []
    perms = []
    for t in range(n_tasks):
        perm = rng.permutation(n_pix)
        perms.append(perm)
        tr_pix = train_flat[:, perm].reshape(-1, rows, cols)
        te_pix = test_flat[:, perm].reshape(-1, rows, cols)
        if scenario == "class":
            offset = n_classes * t
            tr_lab = base_train.labels + offset
            te_lab = base_test.labels + offset
            class_ids = tuple(range(offset, offset + n_classes))
        else:
            tr_lab = base_train.labels.copy()
            te_lab = base_test.labels.copy()
            class_ids = tuple(range(n_classes))
        tasks.append(TaskDataset(SampleSet(tr_pix, tr_lab), SampleSet(te_pix, te_lab), class_ids))

    return TaskStream(
        tasks=tasks,
        scenario=scenario,
        seed=seed,
        permutations=perms,
        name=f"permuted-{n_tasks}",
        image_shape=(rows, cols),
    )


def make_split_stream(
    base_train: SampleSet,
    base_test: SampleSet,
    classes_per_task: int,
    scenario: str,
    seed: int = 0,
    train_limit: int | None = None,
    test_limit: int | None = None,
) -> TaskStream:
    """Build the split protocol: task t owns one contiguous block of classes."""
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    n_classes = int(max(base_train.labels.max(), base_test.labels.max())) + 1
    if n_classes % classes_per_task != 0:
        raise ValueError(
            f"{n_classes} classes not divisible by {classes_per_task} per task"
        )
    rng = np.random.default_rng(seed)
    base_train = _limit(base_train, train_limit, rng)
    base_test = _limit(base_test, test_limit, rng)

    n_tasks = n_classes // classes_per_task
    tasks = []
    for t in range(n_tasks):
        block = tuple(range(t * classes_per_task, (t + 1) * classes_per_task))
        tr_idx = np.flatnonzero(np.isin(base_train.labels, block))
        te_idx = np.flatnonzero(np.isin(base_test.labels, block))
        train = base_train.subset(tr_idx)
        test = base_test.subset(te_idx)
        if scenario == "domain":
            # shared label space: position within the block
            train = SampleSet(train.pixels, train.labels % classes_per_task)
            test = SampleSet(test.pixels, test.labels % classes_per_task)
            class_ids = tuple(range(classes_per_task))
        else:
            class_ids = block
        tasks.append(TaskDataset(train, test, class_ids))

    rows, cols = base_train.image_shape
    return TaskStream(
        tasks=tasks,
        scenario=scenario,
        seed=seed,
        permutations=None,
        name=f"split-{classes_per_task}",
        image_shape=(rows, cols),
    )
