"""Learners that protect old tasks without storing data.

EWC and its online variant anchor parameters with Fisher-weighted
quadratic penalties, SI does the same with a path-integral importance
measure, LwF distills the previous model's outputs on current inputs,
and XdG freezes a random sub-network per task.
"""

from __future__ import annotations

import numpy as np

from ..losses import (
    CrossEntropyTerm,
    DistillationTerm,
    LossSpec,
    QuadraticPenaltyTerm,
    loss_and_grad,
    softmax,
)
from .base import BaseLearner


def estimate_fisher(learner: BaseLearner, task, task_index: int) -> np.ndarray:
    """Diagonal Fisher estimate at the current parameters.

    Per-sample squared gradient of the log-likelihood at a label drawn
    from the model's own predictive distribution, averaged over
    ``fisher_samples`` training inputs.  Batch size 1 keeps the
    per-sample gradients exact.
    """
    model = learner.model
    x = task.train.flat()
    m = min(learner.config.fisher_samples, len(x))
    if m == 0:
        return np.zeros(model.n_params, dtype=model.dtype)
    # own rng stream: estimating the Fisher must not perturb the batch sequence
    rng = np.random.default_rng([learner.seed, 23, task_index])
    idx = rng.choice(len(x), size=m, replace=False)
    head = learner._base_head(task_index)
    fisher = np.zeros(model.n_params, dtype=np.float64)
    buf = np.empty(model.n_params, dtype=model.dtype)
    for i in idx:
        logits, cache = model.forward(x[i : i + 1], head=head)
        p = softmax(logits.astype(np.float64))[0]
        cum = np.cumsum(p)
        y = min(int(np.searchsorted(cum, rng.random() * cum[-1])), len(p) - 1)
        d = p.astype(model.dtype)[None, :]
        d[0, y] -= 1.0
        g = model.backward(cache, d, out=buf)
        fisher += np.multiply(g, g, dtype=np.float64)
    fisher /= m
    return fisher.astype(model.dtype)


class EWC(BaseLearner):
    """Separate quadratic anchor per past task, weighted by its Fisher diagonal."""

    method = "EWC"

    def __init__(self, config, meta, seed):
        super().__init__(config, meta, seed)
        self.fishers: list[tuple[np.ndarray, np.ndarray]] = []  # (fisher, anchor) per task

    def step(self, xb, yb, t):
        terms = [self._ce_current(yb, t)]
        for fisher, anchor in self.fishers:
            terms.append(QuadraticPenaltyTerm(0.5 * self.config.lam, fisher, anchor))
        return self._apply(xb, LossSpec(terms), head=self._base_head(t))

    def _consolidate(self, task, task_index):
        fisher = estimate_fisher(self, task, task_index)
        self.fishers.append((fisher, self.model.params.copy()))

    def aux_arrays(self):
        out = {}
        for k, (fisher, anchor) in enumerate(self.fishers):
            out[f"fisher.{k}"] = fisher
            out[f"anchor.{k}"] = anchor
        return out

    def restore_aux(self, aux, meta):
        self.fishers = []
        k = 0
        while f"fisher.{k}" in aux:
            self.fishers.append(
                (
                    aux[f"fisher.{k}"].astype(self.model.dtype),
                    aux[f"anchor.{k}"].astype(self.model.dtype),
                )
            )
            k += 1


class OnlineEWC(BaseLearner):
    """Single running Fisher, decayed by gamma at each consolidation."""

    method = "OnlineEWC"

    def __init__(self, config, meta, seed):
        super().__init__(config, meta, seed)
        self.fisher: np.ndarray | None = None
        self.anchor: np.ndarray | None = None

    def step(self, xb, yb, t):
        terms = [self._ce_current(yb, t)]
        if self.fisher is not None:
            terms.append(QuadraticPenaltyTerm(0.5 * self.config.lam, self.fisher, self.anchor))
        return self._apply(xb, LossSpec(terms), head=self._base_head(t))

    def _consolidate(self, task, task_index):
        fresh = estimate_fisher(self, task, task_index)
        if self.fisher is None:
            self.fisher = fresh
        else:
            self.fisher = self.config.gamma * self.fisher + fresh
        self.anchor = self.model.params.copy()

    def aux_arrays(self):
        if self.fisher is None:
            return {}
        return {"fisher": self.fisher, "anchor": self.anchor}

    def restore_aux(self, aux, meta):
        if "fisher" in aux:
            self.fisher = aux["fisher"].astype(self.model.dtype)
            self.anchor = aux["anchor"].astype(self.model.dtype)


class SI(BaseLearner):
    """Synaptic importance from the loss-gradient path integral.

    During training omega accumulates -grad * delta(theta) per step; at
    consolidation it is normalized by the squared task displacement and
    folded into the running importance Omega.
    """

    method = "SI"

    def __init__(self, config, meta, seed):
        super().__init__(config, meta, seed)
        n = self.model.n_params
        self.omega = np.zeros(n, dtype=np.float64)
        self.importance = np.zeros(n, dtype=self.model.dtype)
        self.anchor = self.model.params.copy()
        self._task_start = self.model.params.copy()
        self._theta_scratch = np.empty(n, dtype=self.model.dtype)

    def begin_task(self, task, task_index):
        super().begin_task(task, task_index)
        self._task_start[...] = self.model.params

    def step(self, xb, yb, t):
        terms = [self._ce_current(yb, t)]
        if self.tasks_seen > 0:
            terms.append(QuadraticPenaltyTerm(self.config.c, self.importance, self.anchor))
        params = self.model.params
        self._theta_scratch[...] = params
        loss, grad = loss_and_grad(
            self.model, xb, LossSpec(terms), head=self._base_head(t), grad_out=self._grad_buf
        )
        self.opt.step(params, grad)
        np.subtract(params, self._theta_scratch, out=self._theta_scratch)  # realized step
        self.omega -= np.multiply(grad, self._theta_scratch, dtype=np.float64)
        return loss

    def _consolidate(self, task, task_index):
        delta = self.model.params.astype(np.float64) - self._task_start.astype(np.float64)
        self.importance += (self.omega / (delta * delta + self.config.xi)).astype(self.model.dtype)
        self.omega[...] = 0.0
        self.anchor = self.model.params.copy()

    def aux_arrays(self):
        return {"omega": self.omega, "importance": self.importance, "anchor": self.anchor}

    def restore_aux(self, aux, meta):
        self.omega = aux["omega"].astype(np.float64)
        self.importance = aux["importance"].astype(self.model.dtype)
        self.anchor = aux["anchor"].astype(self.model.dtype)


class LwF(BaseLearner):
    """Distill the previous model's logits on current inputs.

    The current-task cross-entropy gets weight 1/t and the distillation
    part 1 - 1/t, so old knowledge dominates as the stream grows.  In
    task-IL every earlier head is distilled under the full-width
    forward pass.
    """

    method = "LwF"

    def __init__(self, config, meta, seed):
        super().__init__(config, meta, seed)
        self.prev_model = None

    def step(self, xb, yb, t):
        if self.prev_model is None:
            return self._apply(xb, LossSpec([self._ce_current(yb, t)]), head=self._base_head(t))
        rnt = 1.0 / t
        if self.scenario == "domain":
            teacher = self.prev_model.logits(xb)
            spec = LossSpec(
                [
                    CrossEntropyTerm(yb, weight=rnt),
                    DistillationTerm(teacher, T=self.config.T, weight=1.0 - rnt),
                ]
            )
            return self._apply(xb, spec)
        teacher = self.prev_model.logits(xb, head="all")
        terms = [self._ce_current(yb, t, weight=rnt, all_heads=True)]
        w = (1.0 - rnt) / (t - 1)
        for h in range(t - 1):
            cols = self.model.head_cols(h)
            terms.append(
                DistillationTerm(teacher[:, cols], T=self.config.T, weight=w, cols=cols)
            )
        return self._apply(xb, LossSpec(terms), head="all")

    def _consolidate(self, task, task_index):
        self.prev_model = self.model.copy()

    def aux_arrays(self):
        if self.prev_model is None:
            return {}
        return {"prev_model.params": self.prev_model.params}

    def restore_aux(self, aux, meta):
        if "prev_model.params" in aux:
            self.prev_model = self.model.copy()
            self.prev_model.params[...] = aux["prev_model.params"].astype(self.model.dtype)


class XdG(BaseLearner):
    """Context-dependent gating: a frozen random sub-network per task."""

    method = "XdG"

    def __init__(self, config, meta, seed):
        super().__init__(config, meta, seed)
        widths = set(config.hidden)
        if len(widths) != 1:
            raise ValueError("gating expects uniform hidden widths")
        width = self.model.hidden_width
        n_on = int(round((1.0 - config.gate_fraction) * width))
        if n_on < 1:
            raise ValueError("gate_fraction leaves no active hidden units")
        for h in range(meta.n_tasks):
            m = np.zeros((self.model.n_hidden_layers, width), dtype=self.model.dtype)
            for layer in range(self.model.n_hidden_layers):
                on = self.rng.choice(width, size=n_on, replace=False)
                m[layer, on] = 1.0
            self.model.set_gate_mask(h, m)

    def step(self, xb, yb, t):
        spec = LossSpec([CrossEntropyTerm(self._local_labels(yb, t))])
        return self._apply(xb, spec, head=t - 1, mask=t - 1)
