"""Trigger construction and training-set poisoning.

The threat model: the attacker controls a small fraction of one task's
training data, stamps a fixed pixel pattern onto copies of clean
samples, flips their labels to a chosen target class, and appends the
copies to the training set.  Distributed variants split one global
trigger into row bands planted across several tasks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Sample, SampleSet, TaskDataset

DEFAULT_RATIO_CAP = 0.05


@dataclass(frozen=True)
class TriggerPattern:
    """A pixel overlay: values written wherever mask is set.

    mask and values share one (h, w) footprint anchored at ``origin``
    (row, col) in image coordinates.
    """

    mask: np.ndarray
    values: np.ndarray
    origin: tuple = (0, 0)

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        values = np.asarray(self.values, dtype=np.float32)
        if mask.ndim != 2 or mask.shape != values.shape:
            raise ValueError(
                f"mask {mask.shape} and values {values.shape} must be congruent 2-D grids"
            )
        if values.min() < 0.0 or values.max() > 1.0:
            raise ValueError("trigger values must lie in [0, 1]")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "origin", (int(self.origin[0]), int(self.origin[1])))

    @property
    def footprint(self) -> tuple:
        return self.mask.shape

    def check_fits(self, image_shape: tuple):
        r0, c0 = self.origin
        h, w = self.mask.shape
        rows, cols = image_shape
        if r0 < 0 or c0 < 0 or r0 + h > rows or c0 + w > cols:
            raise ValueError(
                f"trigger footprint {h}x{w} at {self.origin} overflows {rows}x{cols} image"
            )


def make_checkerboard_trigger(size: int, origin: tuple = (0, 0),
                              image_shape: tuple = (28, 28)) -> TriggerPattern:
    """Full-mask checkerboard: 1.0 where (row+col) is even, 0.0 elsewhere."""
    if size < 1:
        raise ValueError("trigger size must be >= 1")
    rr, cc = np.indices((size, size))
    values = ((rr + cc) % 2 == 0).astype(np.float32)
    trig = TriggerPattern(np.ones((size, size), dtype=bool), values, origin)
    trig.check_fits(image_shape)
    return trig


def split_trigger(global_trigger: TriggerPattern, row_ranges) -> list:
    """Cut a trigger into row bands; each keeps the global values on its rows.

    ``row_ranges`` is a list of inclusive (start, end) row intervals
    within the trigger footprint.  Overlaying locals whose ranges cover
    every row reconstructs the global trigger exactly.
    """
    h, w = global_trigger.footprint
    locals_ = []
    for start, end in row_ranges:
        if not (0 <= start <= end < h):
            raise ValueError(f"row range ({start}, {end}) outside trigger rows [0, {h})")
        mask = np.zeros((h, w), dtype=bool)
        mask[start : end + 1] = global_trigger.mask[start : end + 1]
        values = np.where(mask, global_trigger.values, 0.0).astype(np.float32)
        locals_.append(TriggerPattern(mask, values, global_trigger.origin))
    return locals_


def default_row_split(global_trigger: TriggerPattern, n_parts: int) -> list:
    """Deterministic adjacent row bands covering the trigger top to bottom."""
    h, _ = global_trigger.footprint
    if not 1 <= n_parts <= h:
        raise ValueError(f"cannot split {h} rows into {n_parts} parts")
    bounds = np.linspace(0, h, n_parts + 1).round().astype(int)
    return split_trigger(global_trigger, [(int(a), int(b) - 1) for a, b in zip(bounds[:-1], bounds[1:])])


def apply_trigger(sample: Sample, trigger: TriggerPattern) -> Sample:
    """Stamp the trigger onto a copy of the sample; the label is untouched."""
    trigger.check_fits(sample.pixels.shape)
    pixels = sample.pixels.copy()
    r0, c0 = trigger.origin
    h, w = trigger.footprint
    region = pixels[r0 : r0 + h, c0 : c0 + w]
    region[trigger.mask] = trigger.values[trigger.mask]
    return Sample(pixels, sample.label)


def apply_trigger_set(samples: SampleSet, trigger: TriggerPattern) -> SampleSet:
    """Stamp the trigger onto a copy of every sample in the set."""
    trigger.check_fits(samples.image_shape)
    pixels = samples.pixels.copy()
    r0, c0 = trigger.origin
    h, w = trigger.footprint
    region = pixels[:, r0 : r0 + h, c0 : c0 + w]
    region[:, trigger.mask] = trigger.values[trigger.mask]
    return SampleSet(pixels, samples.labels.copy())


@dataclass(frozen=True)
class PoisonEvent:
    """One scheduled poisoning: which task, how much, with what."""

    task_index: int
    ratio: float
    trigger: TriggerPattern
    target_label: int | None = None  # None -> the task's first class
    seed: int | None = None          # None -> derived from the run seed

    def __post_init__(self):
        if self.task_index < 1:
            raise ValueError("task_index is 1-based")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"poison ratio must be in [0, 1], got {self.ratio}")


@dataclass(frozen=True)
class PoisonRecord:
    """Ground truth for defense scoring: where the poisoned copies sit."""

    task_index: int
    poisoned_indices: np.ndarray  # positions within the augmented train set
    original_labels: np.ndarray
    target_label: int

    def __post_init__(self):
        idx = np.asarray(self.poisoned_indices, dtype=np.int64)
        if len(np.unique(idx)) != len(idx):
            raise ValueError("poisoned indices must be unique")
        object.__setattr__(self, "poisoned_indices", idx)
        object.__setattr__(
            self, "original_labels", np.asarray(self.original_labels, dtype=np.int64)
        )


def poison_task(task: TaskDataset, event: PoisonEvent,
                ratio_cap: float = DEFAULT_RATIO_CAP,
                replace: bool = False):
    """Poisoned copy of a task's train set plus the ground-truth record.

    Selects round(ratio * n) samples uniformly at random, stamps the
    trigger, flips labels to the target, and appends the copies
    (``replace=True`` overwrites the originals in place instead).  The
    test set is never touched.
    """
    if event.ratio > ratio_cap + 1e-12:
        raise ValueError(f"poison ratio {event.ratio} exceeds the cap {ratio_cap}")
    if event.seed is None:
        raise ValueError("poison event needs a concrete seed at application time")
    target = event.target_label if event.target_label is not None else task.class_ids[0]
    n = len(task.train)
    k = int(round(event.ratio * n))
    if k == 0:
        record = PoisonRecord(event.task_index, np.empty(0, np.int64), np.empty(0, np.int64), target)
        return task, record
    event.trigger.check_fits(task.train.image_shape)
    rng = np.random.default_rng(event.seed)
    picked = rng.choice(n, size=k, replace=False)

    stamped = task.train.subset(picked)
    stamped = apply_trigger_set(stamped, event.trigger)
    flipped = SampleSet(stamped.pixels, np.full(k, target, dtype=np.int64))

    if replace:
        pixels = task.train.pixels.copy()
        labels = task.train.labels.copy()
        pixels[picked] = flipped.pixels
        labels[picked] = target
        train = SampleSet(pixels, labels)
        where = np.sort(picked)
        originals = task.train.labels[where]
    else:
        train = SampleSet(
            np.concatenate([task.train.pixels, flipped.pixels], axis=0),
            np.concatenate([task.train.labels, flipped.labels]),
        )
        where = np.arange(n, n + k, dtype=np.int64)
        originals = task.train.labels[picked]

    record = PoisonRecord(event.task_index, where, originals, target)
    return TaskDataset(train, task.test, task.class_ids), record


def compromise_stats(n: int, p: float):
    """(probability at least one of n tasks is compromised, expected count)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    return 1.0 - (1.0 - p) ** n, n * p
