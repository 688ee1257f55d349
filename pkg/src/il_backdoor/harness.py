"""Experiment orchestration.

One experiment = (protocol, scenario, learner, poison plan, seeds).
Per seed: build the stream, train task by task with scheduled
poisoning, then evaluate every task's test set twice -- clean, and
with the global trigger stamped onto copies.  Test sets are never
mutated and poisoning only ever touches the scheduled tasks' train
sets.

Poisoned tasks are additionally measured right after they finish
training, before any later task can erode the freshly planted
backdoor.  That snapshot keeps two triggered accuracies: over the
whole test set (the convention used for the end-of-stream matrices),
and over the samples whose true label differs from the poison target.
The second one is the honest success measure for a label-flip attack
on its own task: target-class samples stay "correct" no matter how
hard the trigger fires, which floors the whole-set number at the
target class share (about 10% on MNIST).
"""

from __future__ import annotations

import gc
import math
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .attack import (
    PoisonEvent,
    TriggerPattern,
    apply_trigger_set,
    poison_task,
)
from .data import (
    SampleSet,
    TaskStream,
    load_idx_dataset,
    make_permuted_stream,
    make_split_stream,
)
from .learners import LearnerConfig, create_learner, save_learner

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

_mnist_cache: dict[str, tuple] = {}


def data_dir() -> Path:
    env = os.environ.get("IL_BACKDOOR_DATA")
    if env:
        return Path(env)
    local = Path("data/mnist")
    if local.is_dir():
        return local
    return Path(__file__).resolve().parents[2] / "data" / "mnist"


def _find(dirpath: Path, stem: str) -> Path:
    for cand in (dirpath / f"{stem}.gz", dirpath / stem):
        if cand.exists():
            return cand
    raise FileNotFoundError(
        f"missing {stem}[.gz] under {dirpath}; set IL_BACKDOOR_DATA to the MNIST directory"
    )


def load_mnist(dirpath: str | Path | None = None):
    """(train, test) SampleSets; cached per directory."""
    d = Path(dirpath) if dirpath else data_dir()
    key = str(d.resolve())
    if key not in _mnist_cache:
        train = load_idx_dataset(_find(d, MNIST_FILES["train_images"]),
                                 _find(d, MNIST_FILES["train_labels"]))
        test = load_idx_dataset(_find(d, MNIST_FILES["test_images"]),
                                _find(d, MNIST_FILES["test_labels"]))
        _mnist_cache[key] = (train, test)
    return _mnist_cache[key]


@dataclass
class ExperimentConfig:
    learner: LearnerConfig
    protocol: str = "permuted"
    scenario: str = "domain"
    n_tasks: int = 10           # permuted protocol
    classes_per_task: int = 2   # split protocol
    poison_plan: list = field(default_factory=list)
    eval_trigger: TriggerPattern | None = None
    seeds: tuple = (0, 6666, 8888)
    iterations: int = 2000
    train_limit: int | None = None
    test_limit: int | None = None
    stop_after: int | None = None   # train/evaluate only the first k tasks
    ratio_cap: float = 0.05
    poison_replace: bool = False
    eval_each_task: bool = False    # diagnostic: also evaluate after every task
    name: str = ""

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.protocol not in ("permuted", "split"):
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.poison_plan and self.eval_trigger is None:
            raise ValueError("a poison plan needs an eval_trigger to measure it with")
        seen = set()
        for ev in self.poison_plan:
            if ev.task_index in seen:
                raise ValueError(f"two poison events target task {ev.task_index}")
            seen.add(ev.task_index)


@dataclass
class RunReport:
    """End-of-stream accuracies, one row per seed, one column per task."""

    config_digest: str
    name: str
    seeds: tuple
    clean_acc: np.ndarray
    trigger_acc: np.ndarray | None
    wall_time: float
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.clean_acc = np.asarray(self.clean_acc, dtype=np.float64)
        if self.clean_acc.shape[0] != len(self.seeds):
            raise ValueError("clean_acc rows must match seeds")
        if self.clean_acc.min() < 0 or self.clean_acc.max() > 1:
            raise ValueError("accuracies must lie in [0, 1]")
        if self.trigger_acc is not None:
            self.trigger_acc = np.asarray(self.trigger_acc, dtype=np.float64)
            if self.trigger_acc.shape != self.clean_acc.shape:
                raise ValueError("trigger_acc shape must match clean_acc")
            if self.trigger_acc.min() < 0 or self.trigger_acc.max() > 1:
                raise ValueError("accuracies must lie in [0, 1]")

    @property
    def n_tasks(self) -> int:
        return self.clean_acc.shape[1]

    @property
    def clean_avg(self) -> float:
        return float(self.clean_acc.mean())

    @property
    def trigger_avg(self) -> float | None:
        return None if self.trigger_acc is None else float(self.trigger_acc.mean())


def derive_event_seed(run_seed: int, task_index: int) -> int:
    return int(np.random.SeedSequence([run_seed, 7, task_index]).generate_state(1)[0])


def build_stream(config: ExperimentConfig, seed: int) -> TaskStream:
    train, test = load_mnist()
    if config.protocol == "permuted":
        return make_permuted_stream(
            train, test, config.n_tasks, config.scenario, seed,
            train_limit=config.train_limit, test_limit=config.test_limit,
        )
    return make_split_stream(
        train, test, config.classes_per_task, config.scenario, seed,
        train_limit=config.train_limit, test_limit=config.test_limit,
    )


def concrete_event(ev: PoisonEvent, run_seed: int, task) -> PoisonEvent:
    """Fill in the run-dependent blanks: sampling seed and target label."""
    out = ev
    if out.seed is None:
        out = replace(out, seed=derive_event_seed(run_seed, out.task_index))
    if out.target_label is None:
        out = replace(out, target_label=int(task.class_ids[0]))
    return out


def accuracy(learner, samples: SampleSet, task_id: int | None = None) -> float:
    preds = learner.predict(samples, task_id=task_id)
    return float(np.mean(preds == samples.labels))


def evaluate_stream(learner, stream: TaskStream, trigger: TriggerPattern | None,
                    upto: int | None = None):
    """(clean, triggered) per-task accuracy vectors for one trained learner."""
    n = upto or stream.n_tasks
    clean = np.zeros(n)
    trig = np.zeros(n) if trigger is not None else None
    for t in range(1, n + 1):
        task = stream.tasks[t - 1]
        tid = t if stream.scenario == "task" else None
        clean[t - 1] = accuracy(learner, task.test, task_id=tid)
        if trigger is not None:
            trig[t - 1] = accuracy(learner, apply_trigger_set(task.test, trigger), task_id=tid)
    return clean, trig


def attack_time_metrics(learner, stream: TaskStream, task_index: int,
                        trigger: TriggerPattern, target_label: int) -> dict:
    """Snapshot of the freshly poisoned task, taken right after it trains.

    trigger_all counts every test sample; trigger_nontarget drops the
    samples already labeled as the poison target (those can only be
    "correct" under a firing trigger, so they mask the damage).
    """
    test = stream.tasks[task_index - 1].test
    tid = task_index if stream.scenario == "task" else None
    preds = learner.predict(apply_trigger_set(test, trigger), task_id=tid)
    hits = preds == test.labels
    nontarget = test.labels != target_label
    out = {
        "clean": accuracy(learner, test, task_id=tid),
        "trigger_all": float(hits.mean()),
        "trigger_nontarget": float(hits[nontarget].mean()) if nontarget.any() else 1.0,
        "target_label": int(target_label),
        "target_share": float(np.mean(~nontarget)),
    }
    out["trigger_target"] = float(hits[~nontarget].mean()) if (~nontarget).any() else 0.0
    return out


def run_experiment(config: ExperimentConfig, state_dir: str | Path | None = None) -> RunReport:
    from .report import config_digest  # local import; report knows how to hash configs

    t0 = time.perf_counter()
    digest = config_digest(config)
    events = {ev.task_index: ev for ev in config.poison_plan}
    n_run = config.stop_after or (
        config.n_tasks if config.protocol == "permuted" else None
    )

    clean_rows, trig_rows = [], []
    history = []
    attack_time: dict = {}
    for seed in config.seeds:
        stream = build_stream(config, seed)
        total = stream.n_tasks
        upto = min(n_run or total, total)
        for ti in events:
            if ti > upto:
                raise ValueError(f"poison event targets task {ti} beyond the stream ({upto})")
        learner = create_learner(config.learner, stream, seed)
        seed_hist = []
        seed_snaps = {}
        for t in range(1, upto + 1):
            task = stream.tasks[t - 1]
            ev = events.get(t)
            if ev is not None:
                ev = concrete_event(ev, seed, task)
                task, _rec = poison_task(
                    task, ev, ratio_cap=config.ratio_cap, replace=config.poison_replace
                )
            learner.train_task(task, t, config.iterations)
            learner.consolidate(task, t)
            if ev is not None:
                seed_snaps[str(t)] = attack_time_metrics(
                    learner, stream, t, config.eval_trigger, ev.target_label
                )
            if config.eval_each_task:
                c, g = evaluate_stream(learner, stream, config.eval_trigger, upto=t)
                seed_hist.append(
                    {"task": t, "clean": c.tolist(),
                     "trigger": None if g is None else g.tolist()}
                )
        clean, trig = evaluate_stream(learner, stream, config.eval_trigger, upto=upto)
        clean_rows.append(clean)
        if trig is not None:
            trig_rows.append(trig)
        if config.eval_each_task:
            history.append(seed_hist)
        if seed_snaps:
            attack_time[str(seed)] = seed_snaps
        if state_dir is not None:
            save_learner(learner, Path(state_dir) / f"state-{digest}-seed{seed}.npz")
        del learner, stream
        gc.collect()

    extras: dict = {}
    if history:
        extras["history"] = history
    if attack_time:
        extras["attack_time"] = attack_time
    return RunReport(
        config_digest=digest,
        name=config.name,
        seeds=config.seeds,
        clean_acc=np.stack(clean_rows),
        trigger_acc=np.stack(trig_rows) if trig_rows else None,
        wall_time=time.perf_counter() - t0,
        extras=extras,
    )


def sweep_ratios(config: ExperimentConfig, ratios) -> list[RunReport]:
    """One run per poison ratio, sharing seeds; ratio 0 is always included."""
    rs = [float(r) for r in ratios]
    if not all(0.0 <= r <= config.ratio_cap for r in rs):
        raise ValueError(f"ratios must lie in [0, {config.ratio_cap}]")
    if 0.0 not in rs:
        rs = [0.0] + rs
    reports = []
    for r in rs:
        plan = [replace(ev, ratio=r) for ev in config.poison_plan]
        cfg = replace(config, poison_plan=plan,
                      name=f"{config.name or 'sweep'}@ratio={r:g}")
        rep = run_experiment(cfg)
        rep.extras["ratio"] = r
        reports.append(rep)
    return reports


def run_distributed(config: ExperimentConfig, compromised_tasks, local_triggers,
                    ratio: float) -> RunReport:
    """Plant one local trigger per compromised task; evaluate with the global one."""
    tasks = list(compromised_tasks)
    trigs = list(local_triggers)
    if len(tasks) != len(trigs):
        raise ValueError(f"{len(tasks)} tasks vs {len(trigs)} local triggers")
    plan = [PoisonEvent(task_index=int(t), ratio=ratio, trigger=trig)
            for t, trig in zip(tasks, trigs)]
    cfg = replace(config, poison_plan=plan)
    return run_experiment(cfg)


def trigger_patch_correlation(images: np.ndarray, trigger: TriggerPattern) -> float:
    """Mean |pearson r| between each image's trigger-footprint patch and the trigger.

    Constant patches (no variance) count as correlation 0.
    """
    r0, c0 = trigger.origin
    h, w = trigger.footprint
    patches = images[:, r0 : r0 + h, c0 : c0 + w].reshape(len(images), -1).astype(np.float64)
    v = trigger.values.reshape(-1).astype(np.float64)
    v = v - v.mean()
    vn = np.sqrt((v * v).sum())
    p = patches - patches.mean(axis=1, keepdims=True)
    pn = np.sqrt((p * p).sum(axis=1))
    ok = (pn > 1e-12) & (vn > 1e-12)
    r = np.zeros(len(images))
    r[ok] = (p[ok] @ v) / (pn[ok] * vn)
    return float(np.abs(r).mean())


def dump_replay_grid(learner, n: int, out_path: str | Path,
                     trigger: TriggerPattern | None = None,
                     rng: np.random.Generator | None = None) -> dict:
    """Tile n generator samples into one PNG; optionally score trigger leakage."""
    from PIL import Image

    if n < 1:
        raise ValueError("n must be >= 1")
    if not hasattr(learner, "replay_samples"):
        raise ValueError(f"{learner.method} has no generator to sample from")
    rows, cols = learner.meta.image_shape
    flat = learner.replay_samples(n, rng if rng is not None else np.random.default_rng(0))
    images = flat.reshape(n, rows, cols)

    k = math.ceil(math.sqrt(n))
    grid = np.zeros((k * rows, k * cols), dtype=np.float32)
    for i in range(n):
        r, c = divmod(i, k)
        grid[r * rows : (r + 1) * rows, c * cols : (c + 1) * cols] = images[i]
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.clip(grid, 0, 1) * 255).round().astype(np.uint8)).save(out_path)

    info = {"path": str(out_path), "n": n}
    if trigger is not None:
        info["trigger_correlation"] = trigger_patch_correlation(images, trigger)
    return info
