"""Buffer-based replay learners: ER and A-GEM.

Both keep a small class-balanced store of past samples.  ER mixes a
buffer batch into every optimization step; A-GEM instead uses the
buffer to build a reference gradient and projects away the conflicting
component of the current gradient.
"""

from __future__ import annotations

import numpy as np

from ..losses import CrossEntropyTerm, LossSpec, loss_and_grad
from .base import BaseLearner


def project_gradient(g: np.ndarray, g_ref: np.ndarray) -> np.ndarray:
    """Drop the component of g that conflicts with the reference direction.

    In-place on g: when g.g_ref < 0, g <- g - (g.g_ref / g_ref.g_ref) g_ref,
    which leaves the projected gradient with non-negative dot product.
    """
    dot = float(np.dot(g, g_ref))
    if dot >= 0.0:
        return g
    denom = float(np.dot(g_ref, g_ref))
    if denom == 0.0:
        return g
    g -= (dot / denom) * g_ref
    return g


class BufferedLearner(BaseLearner):
    """Shared fixed-capacity sample store with random eviction."""

    def __init__(self, config, meta, seed):
        super().__init__(config, meta, seed)
        cap = config.buffer_capacity
        self.buf_x = np.empty((cap, meta.n_inputs), dtype=np.float32)
        self.buf_y = np.empty(cap, dtype=np.int64)
        self.buf_task = np.empty(cap, dtype=np.int64)  # 1-based task index
        self.buf_n = 0

    def _consolidate(self, task, task_index):
        self._fold_into_buffer(task, task_index)

    def _fold_into_buffer(self, task, task_index):
        cap = self.config.buffer_capacity
        if cap == 0:
            return
        quota = max(1, cap // self.meta.n_tasks)
        x = task.train.flat()
        y = task.train.labels
        classes = task.class_ids
        base, rem = divmod(quota, len(classes))
        picks = []
        for j, c in enumerate(classes):
            want = base + (1 if j < rem else 0)
            pool = np.flatnonzero(y == c)
            if want == 0 or len(pool) == 0:
                continue
            take = min(want, len(pool))
            picks.append(self.rng.choice(pool, size=take, replace=False))
        if not picks:
            return
        picks = np.concatenate(picks)
        n_new = len(picks)
        overflow = self.buf_n + n_new - cap
        if overflow > 0:
            # evict exactly `overflow` old entries, chosen uniformly
            keep = self.rng.choice(self.buf_n, size=self.buf_n - overflow, replace=False)
            keep.sort()
            self.buf_x[: len(keep)] = self.buf_x[keep]
            self.buf_y[: len(keep)] = self.buf_y[keep]
            self.buf_task[: len(keep)] = self.buf_task[keep]
            self.buf_n = len(keep)
        sl = slice(self.buf_n, self.buf_n + n_new)
        self.buf_x[sl] = x[picks]
        self.buf_y[sl] = y[picks]
        self.buf_task[sl] = task_index
        self.buf_n += n_new

    def _draw_replay(self, size):
        idx = self.rng.choice(self.buf_n, size=size, replace=self.buf_n < size)
        return self.buf_x[idx], self.buf_y[idx], self.buf_task[idx]

    def _grouped_replay_terms(self, rx, ry, rtask, base_row, total_weight):
        """Task-IL: split a mixed replay batch into per-head CE terms.

        Rows are reordered so each head's slice is contiguous; weights
        are proportional to each task's share of the replay batch.
        """
        order = np.argsort(rtask, kind="stable")
        rx, ry, rtask = rx[order], ry[order], rtask[order]
        n = len(ry)
        terms = []
        start = 0
        while start < n:
            t_id = int(rtask[start])
            end = start + int(np.searchsorted(rtask[start:], t_id, side="right"))
            w = total_weight * (end - start) / n
            terms.append(
                CrossEntropyTerm(
                    ry[start:end] - self.meta.class_offsets[t_id - 1],
                    weight=w,
                    rows=slice(base_row + start, base_row + end),
                    cols=self.model.head_cols(t_id - 1),
                )
            )
            start = end
        return rx, terms

    def aux_arrays(self):
        return {
            "buffer.x": self.buf_x[: self.buf_n],
            "buffer.y": self.buf_y[: self.buf_n],
            "buffer.task": self.buf_task[: self.buf_n],
        }

    def restore_aux(self, aux, meta):
        if "buffer.x" not in aux:
            return
        n = len(aux["buffer.x"])
        self.buf_x[:n] = aux["buffer.x"].astype(np.float32)
        self.buf_y[:n] = aux["buffer.y"].astype(np.int64)
        self.buf_task[:n] = aux["buffer.task"].astype(np.int64)
        self.buf_n = n


class ER(BufferedLearner):
    """Joint step on the current batch plus a uniform buffer draw."""

    method = "ER"

    def step(self, xb, yb, t):
        if self.buf_n == 0:
            return self._apply(xb, LossSpec([self._ce_current(yb, t)]), head=self._base_head(t))
        nb = len(xb)
        nr = max(1, int(round(self.config.replay_ratio * nb)))
        rx, ry, rtask = self._draw_replay(nr)
        rnt = 1.0 / t
        if self.scenario == "task":
            rx, replay_terms = self._grouped_replay_terms(rx, ry, rtask, nb, 1.0 - rnt)
            terms = [self._ce_current(yb, t, weight=rnt, rows=slice(0, nb), all_heads=True)]
            terms += replay_terms
            head = "all"
        else:
            terms = [
                self._ce_current(yb, t, weight=rnt, rows=slice(0, nb)),
                CrossEntropyTerm(ry, weight=1.0 - rnt, rows=slice(nb, nb + nr)),
            ]
            head = None
        x = np.concatenate([xb, rx], axis=0)
        return self._apply(x, LossSpec(terms), head=head)


class AGEM(BufferedLearner):
    """Gradient-projection replay: never move against the buffer gradient."""

    method = "AGEM"

    def __init__(self, config, meta, seed):
        super().__init__(config, meta, seed)
        self._grad_ref = np.zeros(self.model.n_params, dtype=self.model.dtype)

    def step(self, xb, yb, t):
        loss, g = loss_and_grad(
            self.model,
            xb,
            LossSpec([self._ce_current(yb, t)]),
            head=self._base_head(t),
            grad_out=self._grad_buf,
        )
        if self.tasks_seen > 0:
            if self.buf_n == 0:
                raise ValueError("A-GEM has no buffered samples to build a reference gradient")
            nr = max(1, int(round(self.config.replay_ratio * len(xb))))
            rx, ry, rtask = self._draw_replay(nr)
            if self.scenario == "task":
                rx, terms = self._grouped_replay_terms(rx, ry, rtask, 0, 1.0)
                _, g_ref = loss_and_grad(
                    self.model, rx, LossSpec(terms), head="all", grad_out=self._grad_ref
                )
            else:
                _, g_ref = loss_and_grad(
                    self.model, rx, LossSpec([CrossEntropyTerm(ry)]), grad_out=self._grad_ref
                )
            g = project_gradient(g, g_ref)
        self.opt.step(self.model.params, g)
        return loss
