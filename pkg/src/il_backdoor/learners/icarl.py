"""Exemplar-based class-incremental learner.

Training uses per-class binary cross-entropy over the classes seen so
far, with the previous model's (temperature-softened) sigmoid outputs
as targets for old classes.  A herding pass keeps the exemplars whose
feature mean tracks each class mean; prediction is nearest class mean
in penultimate-feature space.
"""

from __future__ import annotations

import numpy as np

from ..losses import BinaryCrossEntropyTerm, LossSpec, sigmoid
from .base import BaseLearner


def herd_indices(features: np.ndarray, m: int) -> np.ndarray:
    """Greedy herding order: indices whose running mean best matches the class mean.

    Returns min(m, n) unique indices.  Ties break toward the lowest
    index, so the ordering is deterministic for identical inputs.
    """
    feats = np.asarray(features, dtype=np.float64)
    n = len(feats)
    m = min(m, n)
    mu = feats.mean(axis=0)
    chosen = np.empty(m, dtype=np.int64)
    taken = np.zeros(n, dtype=bool)
    running = np.zeros_like(mu)
    for k in range(1, m + 1):
        # argmin_i || (running + f_i)/k - mu ||  ==  argmin_i || f_i - (k*mu - running) ||
        target = k * mu - running
        d2 = ((feats - target) ** 2).sum(axis=1)
        d2[taken] = np.inf
        i = int(np.argmin(d2))
        chosen[k - 1] = i
        taken[i] = True
        running += feats[i]
    return chosen


class ICaRL(BaseLearner):
    method = "iCaRL"

    def __init__(self, config, meta, seed):
        super().__init__(config, meta, seed)
        self.exemplar_x: dict[int, np.ndarray] = {}  # class -> (k, d) flats in herding order
        self.class_means: dict[int, np.ndarray] = {}
        self.prev_model = None

    def begin_task(self, task, task_index):
        super().begin_task(task, task_index)
        if self.exemplar_x:
            ex = np.concatenate(list(self.exemplar_x.values()), axis=0)
            ey = np.concatenate(
                [np.full(len(a), c, dtype=np.int64) for c, a in self.exemplar_x.items()]
            )
            self._cur_x = np.concatenate([self._cur_x, ex], axis=0)
            self._cur_y = np.concatenate([self._cur_y, ey])

    def step(self, xb, yb, t):
        hi = self.class_hi
        targets = np.zeros((len(xb), hi), dtype=np.float32)
        targets[np.arange(len(xb)), yb] = 1.0
        if self.prev_model is not None:
            old_hi = self.meta.class_offsets[t - 1]
            prev = self.prev_model.logits(xb)[:, :old_hi]
            targets[:, :old_hi] = sigmoid(prev.astype(np.float64) / self.config.T)
        spec = LossSpec([BinaryCrossEntropyTerm(targets, cols=slice(0, hi))])
        return self._apply(xb, spec)

    def _consolidate(self, task, task_index):
        budget_per_class = self.config.exemplar_budget // max(self.class_hi, 1)
        for c in list(self.exemplar_x):
            self.exemplar_x[c] = self.exemplar_x[c][:budget_per_class]
        x = task.train.flat()
        y = task.train.labels
        for c in task.class_ids:
            pool = x[y == c]
            if len(pool) == 0:
                continue
            feats = self.penultimate_activations(pool)
            order = herd_indices(feats, budget_per_class)
            self.exemplar_x[c] = pool[order].copy()
        self.prev_model = self.model.copy()
        self._recompute_means()

    def _recompute_means(self):
        self.class_means = {
            c: self.penultimate_activations(arr).mean(axis=0)
            for c, arr in self.exemplar_x.items()
            if len(arr)
        }

    def predict(self, samples, task_id: int | None = None) -> np.ndarray:
        if not self.class_means:
            raise ValueError("no class means yet; train and consolidate first")
        feats = self.penultimate_activations(samples).astype(np.float64)
        classes = np.array(sorted(self.class_means), dtype=np.int64)
        means = np.stack([self.class_means[c] for c in classes]).astype(np.float64)
        # ||f - m||^2 without the (n, C, d) intermediate
        d2 = (feats * feats).sum(axis=1, keepdims=True)
        d2 = d2 - 2.0 * feats @ means.T
        d2 += (means * means).sum(axis=1)
        return classes[np.argmin(d2, axis=1)]

    def aux_arrays(self):
        return {f"exemplars.{c}": arr for c, arr in self.exemplar_x.items()}

    def restore_aux(self, aux, meta):
        self.exemplar_x = {}
        for key, arr in aux.items():
            if key.startswith("exemplars."):
                self.exemplar_x[int(key.split(".", 1)[1])] = arr.astype(np.float32)
        self.exemplar_x = dict(sorted(self.exemplar_x.items()))
        if self.tasks_seen > 0:
            self.prev_model = self.model.copy()
            self._recompute_means()
