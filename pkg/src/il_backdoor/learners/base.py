"""Shared learner machinery: configuration, scenario wiring, train loop.

Every method subclasses :class:`BaseLearner` and overrides ``step`` (one
optimizer update from one batch) and ``_consolidate`` (end-of-task
bookkeeping).  The harness only touches the four public operations --
``train_task``, ``consolidate``, ``predict``,
``penultimate_activations`` -- so methods stay interchangeable.

Label conventions by scenario:

* ``task``   -- multi-head model, one head per task; labels are stored
  globally and localized to the head on the way in/out
* ``domain`` -- single shared head, labels 0..C-1
* ``class``  -- single wide head over all classes of the stream; labels
  are already global in the data
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..data import TaskDataset, TaskStream
from ..losses import CrossEntropyTerm, LossSpec, loss_and_grad
from ..nets import ClassifierMLP
from ..optim import Adam

METHODS = (
    "EWC",
    "OnlineEWC",
    "SI",
    "LwF",
    "XdG",
    "DGR",
    "DGRdistill",
    "ER",
    "AGEM",
    "iCaRL",
)

# Which scenarios each method supports.  Asking for anything else is a
# hard error, not a silent fallback.
VALID_SCENARIOS = {
    "EWC": ("task", "domain"),
    "OnlineEWC": ("task", "domain"),
    "SI": ("task", "domain"),
    "LwF": ("task", "domain"),
    "XdG": ("task",),
    "DGR": ("task", "domain", "class"),
    "DGRdistill": ("task", "domain", "class"),
    "ER": ("task", "domain", "class"),
    "AGEM": ("task", "domain", "class"),
    "iCaRL": ("class",),
}

EVAL_CHUNK = 4096


class MethodScenarioError(ValueError):
    """A learner method was asked to run in a scenario it does not support."""


class TrainingDivergence(RuntimeError):
    """Loss went non-finite during training."""


@dataclass
class LearnerConfig:
    """One learner's method tag plus every strength/budget it might need.

    Unused fields are simply ignored by methods that do not read them;
    keeping them in one flat record makes configs file-serializable.
    """

    method: str
    lam: float = 100.0           # EWC-family penalty weight (lambda)
    gamma: float = 1.0           # online-EWC fisher decay
    c: float = 0.5               # SI strength
    xi: float = 0.1              # SI damping
    T: float = 2.0               # distillation temperature
    buffer_capacity: int = 1000  # ER / A-GEM sample store
    exemplar_budget: int = 2000  # iCaRL, total across classes
    gate_fraction: float = 0.8   # XdG: fraction of hidden units gated OFF per task
    fisher_samples: int = 500
    # architecture / optimization plumbing
    hidden: tuple = (1000, 1000)
    lr: float = 1e-4
    batch_size: int = 128
    replay_ratio: float = 1.0    # replayed batch size relative to the current batch
    vae_hidden: tuple = (400, 400)
    vae_latent: int = 100
    # class-IL alternative: restrict training losses to classes seen so far
    active_classes_only: bool = False

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.vae_hidden = tuple(int(h) for h in self.vae_hidden)
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; know {METHODS}")
        for name in ("lam", "c", "xi", "T", "lr"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if not 0.0 < self.gate_fraction < 1.0:
            raise ValueError(f"gate_fraction must be in (0, 1), got {self.gate_fraction}")
        for name in ("buffer_capacity", "exemplar_budget", "fisher_samples", "batch_size"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class StreamMeta:
    """The facts about a task stream a learner needs before seeing data."""

    scenario: str
    n_tasks: int
    classes_per_task: int
    total_classes: int
    image_shape: tuple
    class_offsets: tuple  # first class id of each task

    @property
    def n_inputs(self) -> int:
        return int(np.prod(self.image_shape))

    @classmethod
    def of(cls, stream: TaskStream) -> "StreamMeta":
        return cls(
            scenario=stream.scenario,
            n_tasks=stream.n_tasks,
            classes_per_task=stream.classes_per_task,
            total_classes=stream.total_classes,
            image_shape=tuple(stream.image_shape),
            class_offsets=tuple(t.class_ids[0] for t in stream.tasks),
        )


def as_matrix(samples) -> np.ndarray:
    """SampleSet or pixel array -> (n, n_inputs) float32 matrix."""
    if hasattr(samples, "flat") and not isinstance(samples, np.ndarray):
        return samples.flat()
    x = np.asarray(samples, dtype=np.float32)
    if x.ndim == 3:
        x = x.reshape(len(x), -1)
    if x.ndim != 2:
        raise ValueError(f"expected (n, d) or (n, rows, cols) pixels, got {x.shape}")
    return x


class BaseLearner:
    """Plain fine-tuning; method subclasses override step/_consolidate."""

    method = "finetune"

    def __init__(self, config: LearnerConfig, meta: StreamMeta, seed: int):
        self.config = config
        self.meta = meta
        self.scenario = meta.scenario
        self.seed = int(seed)
        self.rng = np.random.default_rng([self.seed, 1])

        if meta.scenario == "task":
            n_heads = meta.n_tasks
            out_width = meta.n_tasks * meta.classes_per_task
        else:
            n_heads = None
            out_width = meta.total_classes
        dims = [meta.n_inputs, *config.hidden, out_width]
        self.model = ClassifierMLP(dims, n_heads=n_heads, rng=self.rng)
        self.opt = Adam(self.model.n_params, lr=config.lr, dtype=self.model.dtype)
        self._grad_buf = np.zeros(self.model.n_params, dtype=self.model.dtype)

        self.tasks_seen = 0
        self._trained_through = 0
        # highest class index with a trained output unit (grows in class-IL)
        self.class_hi = 0 if meta.scenario == "class" else out_width
        self._cur_x: np.ndarray | None = None
        self._cur_y: np.ndarray | None = None

    # -- training ----------------------------------------------------------

    def begin_task(self, task: TaskDataset, task_index: int):
        # Fresh draw stream per task. Batch picks, replay draws and buffer
        # folds all flow through self.rng, so without this a run whose task-1
        # train set grew by a few poisoned samples would consume the stream
        # differently and desynchronize every later task from its clean twin.
        # Task-scoped streams keep seed-matched runs batch-identical on all
        # tasks the attack never touched.
        self.rng = np.random.default_rng([self.seed, 1, task_index])
        self._cur_x = task.train.flat()
        self._cur_y = task.train.labels
        if self.scenario == "class":
            self.class_hi = max(self.class_hi, task.class_ids[-1] + 1)

    def train_task(self, task: TaskDataset, task_index: int, iterations: int,
                   batch_size: int | None = None) -> "BaseLearner":
        if task_index != self.tasks_seen + 1:
            raise ValueError(
                f"tasks must arrive in order: expected {self.tasks_seen + 1}, got {task_index}"
            )
        self.begin_task(task, task_index)
        n = len(self._cur_y)
        bs = min(batch_size or self.config.batch_size, n)
        for it in range(iterations):
            sel = self.rng.integers(0, n, size=bs)
            loss = self.step(self._cur_x[sel], self._cur_y[sel], task_index)
            if not np.isfinite(loss):
                raise TrainingDivergence(
                    f"{self.method}: non-finite loss at task {task_index}, iteration {it}"
                )
        self._trained_through = task_index
        return self

    def consolidate(self, task: TaskDataset, task_index: int) -> "BaseLearner":
        if task_index == self.tasks_seen:
            raise ValueError(f"task {task_index} was already consolidated")
        if task_index != self.tasks_seen + 1:
            raise ValueError(
                f"consolidate out of order: expected {self.tasks_seen + 1}, got {task_index}"
            )
        if self._trained_through != task_index:
            raise ValueError("consolidate must immediately follow train_task for the same index")
        self._consolidate(task, task_index)
        self.tasks_seen = task_index
        return self

    def fine_tune(self, samples, task_index: int | None = None,
                  iterations: int = 500, batch_size: int | None = None) -> "BaseLearner":
        """Extra training steps on a replacement dataset for an already-seen task.

        Runs the learner's own step, so replay buffers, penalties and
        distillation teachers stay in effect (post-hoc remediation).
        """
        if self.tasks_seen < 1:
            raise ValueError("fine_tune needs at least one consolidated task")
        t = task_index if task_index is not None else self.tasks_seen
        if not 1 <= t <= self.tasks_seen:
            raise ValueError(f"task {t} has not been trained yet")
        x = as_matrix(samples)
        y = np.asarray(samples.labels, dtype=np.int64)
        n = len(y)
        bs = min(batch_size or self.config.batch_size, n)
        for it in range(iterations):
            sel = self.rng.integers(0, n, size=bs)
            loss = self.step(x[sel], y[sel], t)
            if not np.isfinite(loss):
                raise TrainingDivergence(
                    f"{self.method}: non-finite loss while fine-tuning task {t}, iteration {it}"
                )
        return self

    def step(self, xb: np.ndarray, yb: np.ndarray, t: int) -> float:
        spec = LossSpec([self._ce_current(yb, t)])
        return self._apply(xb, spec, head=self._base_head(t))

    def _consolidate(self, task: TaskDataset, task_index: int):
        pass

    def _apply(self, x, spec, head=None, mask=None) -> float:
        loss, grad = loss_and_grad(
            self.model, x, spec, head=head, mask=mask, grad_out=self._grad_buf
        )
        self.opt.step(self.model.params, grad)
        return loss

    # -- loss plumbing -------------------------------------------------------

    def _base_head(self, t: int):
        """Forward head argument when the loss only touches the current task."""
        return t - 1 if self.scenario == "task" else None

    def _local_labels(self, y: np.ndarray, t: int) -> np.ndarray:
        off = self.meta.class_offsets[t - 1]
        return y - off if off else y

    def _ce_current(self, yb, t, weight=1.0, rows=None, all_heads=False):
        """Cross-entropy term for the current batch under this scenario.

        ``all_heads`` marks that the forward pass runs with head="all",
        so the term must pick out the current head's columns itself.
        """
        if self.scenario == "task":
            cols = self.model.head_cols(t - 1) if all_heads else None
            return CrossEntropyTerm(self._local_labels(yb, t), weight=weight, rows=rows, cols=cols)
        cols = None
        if self.scenario == "class" and self.config.active_classes_only:
            cols = slice(0, self.class_hi)
        return CrossEntropyTerm(yb, weight=weight, rows=rows, cols=cols)

    # -- inference -----------------------------------------------------------

    def _gate(self, head: int):
        return head if head in self.model.gate_masks else None

    def predict(self, samples, task_id: int | None = None) -> np.ndarray:
        x = as_matrix(samples)
        out = np.empty(len(x), dtype=np.int64)
        if self.scenario == "task":
            if task_id is None:
                raise ValueError("task identity is required for task-IL prediction")
            h = task_id - 1
            for s in range(0, len(x), EVAL_CHUNK):
                e = min(s + EVAL_CHUNK, len(x))
                out[s:e] = self.model.logits(x[s:e], head=h, mask=self._gate(h)).argmax(axis=1)
            return out + self.meta.class_offsets[h]
        hi = self.class_hi
        for s in range(0, len(x), EVAL_CHUNK):
            e = min(s + EVAL_CHUNK, len(x))
            out[s:e] = self.model.logits(x[s:e])[:, :hi].argmax(axis=1)
        return out

    def penultimate_activations(self, samples) -> np.ndarray:
        x = as_matrix(samples)
        feats = np.empty((len(x), self.model.hidden_width), dtype=self.model.dtype)
        for s in range(0, len(x), EVAL_CHUNK):
            e = min(s + EVAL_CHUNK, len(x))
            feats[s:e] = self.model.features(x[s:e])
        return feats

    # -- serialization hooks ---------------------------------------------------

    def aux_arrays(self) -> dict:
        """Method-specific arrays for the checkpoint container."""
        return {}

    def aux_meta(self) -> dict:
        return {}

    def restore_aux(self, aux: dict, meta: dict):
        pass

    def describe(self) -> dict:
        return {
            "method": self.method,
            "config": asdict(self.config),
            "stream": asdict(self.meta),
            "seed": self.seed,
            "tasks_seen": self.tasks_seen,
            "class_hi": self.class_hi,
        }
