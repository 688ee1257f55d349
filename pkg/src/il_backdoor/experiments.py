"""Acceptance experiment manifest, result cache, and batch runner.

Every headline claim maps to one or two named entries here.  Results are
cached as JSON keyed by the config digest, so re-running the module (or
the acceptance tests) only trains what is missing or stale.

    python3 -m il_backdoor.experiments --profile full

runs the whole queue in priority order; expect hours at the full
profile on one core.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
import traceback
from dataclasses import dataclass
from pathlib import Path

from .attack import PoisonEvent, default_row_split, make_checkerboard_trigger
from .harness import ExperimentConfig, RunReport, dump_replay_grid, run_experiment
from .learners import LearnerConfig, load_learner
from .report import config_digest, report_from_dict, write_run_report

TRIGGER = make_checkerboard_trigger(6)

DOMAIN_METHODS = ("EWC", "SI", "LwF", "ER", "AGEM", "OnlineEWC", "DGR", "DGRdistill")
TASKIL_METHODS = ("XdG", "EWC", "SI", "LwF", "DGR")
DISTRIBUTED_METHODS = ("EWC", "SI", "ER", "DGR")
DISTRIBUTED_TASKS = (2, 5, 8)


def results_root() -> Path:
    env = os.environ.get("IL_BACKDOOR_RESULTS")
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[2] / "results"


@dataclass
class Entry:
    name: str
    config: ExperimentConfig
    save_states: bool = False
    dump_replay: bool = False  # sample the generator of each saved state
    note: str = ""


def _learner(method: str, protocol: str) -> LearnerConfig:
    hidden = (1000, 1000) if protocol == "permuted" else (400, 400)
    return LearnerConfig(method=method, hidden=hidden)


def _poison(task_index: int, ratio: float, trigger=TRIGGER) -> PoisonEvent:
    return PoisonEvent(task_index=task_index, ratio=ratio, trigger=trigger)


def manifest(profile: str = "full") -> dict[str, Entry]:
    """Priority-ordered name -> Entry map for one profile."""
    if profile not in ("full", "ci"):
        raise ValueError(f"unknown profile {profile!r}")
    full = profile == "full"
    base = dict(
        iterations=2000 if full else 500,
        seeds=(0, 6666, 8888) if full else (0,),
        train_limit=None if full else 10000,
        test_limit=None if full else 2000,
    )

    def run(name, scenario, method, plan=(), protocol="permuted", **kw):
        cfg = ExperimentConfig(
            learner=_learner(method, protocol),
            protocol=protocol,
            scenario=scenario,
            poison_plan=list(plan),
            eval_trigger=TRIGGER,
            name=name,
            **base,
            **kw,
        )
        return Entry(name=name, config=cfg)

    entries: list[Entry] = []

    def add(entry, **flags):
        for k, v in flags.items():
            setattr(entry, k, v)
        entries.append(entry)

    # Domain-IL permuted MNIST: attacked at task 1 plus the matched clean run.
    for m in ("EWC", "SI", "LwF", "ER", "AGEM", "OnlineEWC"):
        add(run(f"p1-domain-{m}", "domain", m, [_poison(1, 0.05)]))
        add(run(f"clean-domain-{m}", "domain", m))
        if m == "EWC":
            add(run("tiny-domain-EWC", "domain", m, [_poison(1, 0.001)]),
                note="0.1% poison ratio")

    # Generator contamination probe: split MNIST, poison task 1, sample the
    # generator after task 2 (that is exactly what gets replayed during task 3).
    split_kw = dict(protocol="split", classes_per_task=2, stop_after=2)
    add(run("gen-split-DGR", "class", "DGR", [_poison(1, 0.05)], **split_kw),
        save_states=True, dump_replay=True)
    add(run("gen-split-DGR-clean", "class", "DGR", **split_kw),
        save_states=True, dump_replay=True)

    # Generative-replay heavyweights; saved states feed the defense study.
    add(run("p10-domain-DGR", "domain", "DGR", [_poison(10, 0.05)]), save_states=True)
    add(run("clean-domain-DGR", "domain", "DGR"), save_states=True)
    add(run("p1-domain-DGR", "domain", "DGR", [_poison(1, 0.05)]))
    add(run("p1-domain-DGRdistill", "domain", "DGRdistill", [_poison(1, 0.05)]))
    add(run("clean-domain-DGRdistill", "domain", "DGRdistill"))

    # Distributed split-trigger attack, global trigger at evaluation time.
    parts = default_row_split(TRIGGER, len(DISTRIBUTED_TASKS))
    dist_plan = [PoisonEvent(task_index=t, ratio=0.01, trigger=p)
                 for t, p in zip(DISTRIBUTED_TASKS, parts)]
    for m in DISTRIBUTED_METHODS:
        add(run(f"dist-domain-{m}", "domain", m, dist_plan))

    # Task-IL leakage: multi-head runs, attacked and clean.
    for m in TASKIL_METHODS:
        add(run(f"p1-task-{m}", "task", m, [_poison(1, 0.05)]))
        add(run(f"clean-task-{m}", "task", m))

    out = {}
    for e in entries:
        if e.name in out:
            raise ValueError(f"duplicate manifest entry {e.name}")
        out[e.name] = e
    return out


def entry_paths(entry: Entry, root: Path) -> dict:
    digest = config_digest(entry.config)
    return {
        "digest": digest,
        "json": root / "runs" / f"{entry.name}.json",
        "csv": root / "runs" / f"{entry.name}.csv",
        "states": root / "states" / entry.name,
        "state_files": [
            root / "states" / entry.name / f"state-{digest}-seed{s}.npz"
            for s in entry.config.seeds
        ],
    }


def load_result(entry: Entry, root: Path | None = None) -> RunReport | None:
    """Cached report for this entry, or None if absent / built from a stale config."""
    root = root or results_root()
    paths = entry_paths(entry, root)
    if not paths["json"].exists():
        return None
    with open(paths["json"]) as f:
        payload = json.load(f)
    if payload.get("config_digest") != paths["digest"]:
        return None
    if entry.save_states and not all(p.exists() for p in paths["state_files"]):
        return None
    return report_from_dict(payload)


def run_entry(entry: Entry, root: Path | None = None) -> RunReport:
    root = root or results_root()
    paths = entry_paths(entry, root)
    state_dir = paths["states"] if entry.save_states else None
    report = run_experiment(entry.config, state_dir=state_dir)
    if entry.dump_replay:
        replay = {}
        for seed, state_file in zip(entry.config.seeds, paths["state_files"]):
            learner = load_learner(state_file)
            png = root / "replay" / f"{entry.name}-seed{seed}.png"
            replay[str(seed)] = dump_replay_grid(learner, 100, png,
                                                 trigger=entry.config.eval_trigger)
        report.extras["replay"] = replay
    write_run_report(report, root / "runs", stem=entry.name)
    return report


def load_or_run(name: str, profile: str = "full", root: Path | None = None) -> RunReport:
    entry = manifest(profile)[name]
    cached = load_result(entry, root)
    if cached is not None:
        return cached
    return run_entry(entry, root)


def state_files(name: str, profile: str = "full", root: Path | None = None) -> list[Path]:
    entry = manifest(profile)[name]
    return entry_paths(entry, root or results_root())["state_files"]


def run_defense_study(profile: str = "full", root: Path | None = None,
                      force: bool = False) -> dict:
    """Detection + remediation on the saved DGR states; cached as JSON.

    Attacked arm: 5% poison at the final task, per seed -> suspect class,
    recall/precision, recovered-trigger correlation, post-remediation
    accuracy.  Clean arm: the same detector must return attack-free
    verdicts on every seed.
    """
    import gc
    from dataclasses import asdict

    from .attack import poison_task
    from .defense import DefenseConfig, detect_poison, remediate
    from .harness import (
        build_stream,
        concrete_event,
        evaluate_stream,
        trigger_patch_correlation,
    )
    from .plots import plot_defense_scatter
    from .report import atomic_write_text, to_jsonable

    root = root or results_root()
    out_path = root / "defense" / "study.json"
    entries = manifest(profile)
    attacked, clean = entries["p10-domain-DGR"], entries["clean-domain-DGR"]
    dcfg = DefenseConfig()
    key = {
        "attacked": config_digest(attacked.config),
        "clean": config_digest(clean.config),
        "defense": asdict(dcfg),
    }
    if out_path.exists() and not force:
        with open(out_path) as f:
            cached = json.load(f)
        if cached.get("key") == key:
            return cached

    load_or_run(attacked.name, profile, root)
    load_or_run(clean.name, profile, root)

    results = {"key": key, "attacked": {}, "clean": {}}
    event = attacked.config.poison_plan[0]
    analyzed = event.task_index

    for seed, state in zip(attacked.config.seeds,
                           entry_paths(attacked, root)["state_files"]):
        stream = build_stream(attacked.config, seed)
        task = stream.tasks[analyzed - 1]
        ev = concrete_event(event, seed, task)
        poisoned, record = poison_task(task, ev, ratio_cap=attacked.config.ratio_cap)
        learner = load_learner(state)
        rep = detect_poison(poisoned.train, learner, dcfg, truth=record)
        plot_defense_scatter(rep, root / "defense", stem=f"attacked-seed{seed}")
        trig_corr = None
        if rep.recovered_trigger is not None:
            trig_corr = trigger_patch_correlation(
                rep.recovered_trigger[None], attacked.config.eval_trigger)
        entry_result = {
            "suspect_class": rep.suspect_class,
            "detected": int(len(rep.detected_indices)),
            "truth": int(len(record.poisoned_indices)),
            "recall": rep.recall,
            "precision": rep.precision,
            "trigger_correlation": trig_corr,
            "silhouettes": {str(c): a.silhouette for c, a in rep.per_class.items()},
            "cluster_sizes": {str(c): list(a.cluster_sizes) for c, a in rep.per_class.items()},
            "notes": list(rep.notes),
        }
        if not rep.attack_free:
            remediate(learner, poisoned.train, rep, truth=record, mode="correct",
                      iterations=dcfg.fine_tune_iterations, task_index=analyzed)
            c_acc, t_acc = evaluate_stream(learner, stream, attacked.config.eval_trigger)
            entry_result["post_clean_acc"] = c_acc.tolist()
            entry_result["post_trigger_acc"] = t_acc.tolist()
        results["attacked"][str(seed)] = entry_result
        del learner, stream
        gc.collect()

    for seed, state in zip(clean.config.seeds,
                           entry_paths(clean, root)["state_files"]):
        stream = build_stream(clean.config, seed)
        task = stream.tasks[-1]
        learner = load_learner(state)
        rep = detect_poison(task.train, learner, dcfg)
        results["clean"][str(seed)] = {
            "attack_free": rep.attack_free,
            "suspect_class": rep.suspect_class,
            "silhouettes": {str(c): a.silhouette for c, a in rep.per_class.items()},
            "notes": list(rep.notes),
        }
        del learner, stream
        gc.collect()

    atomic_write_text(out_path, json.dumps(to_jsonable(results), indent=2) + "\n")
    return results


def _log(root: Path, line: str) -> None:
    stamp = time.strftime("%Y-%m-%d %H:%M:%S")
    msg = f"[{stamp}] {line}"
    print(msg, flush=True)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "queue.log", "a") as f:
        f.write(msg + "\n")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="run the acceptance experiment queue")
    ap.add_argument("--profile", default="full", choices=("full", "ci"))
    ap.add_argument("--results", default=None, help="results directory override")
    ap.add_argument("--only", nargs="*", default=None, help="subset of entry names")
    ap.add_argument("--list", action="store_true", help="print the queue and exit")
    ap.add_argument("--force", action="store_true", help="ignore cached results")
    ap.add_argument("--defense", action="store_true",
                    help="run the detection/remediation study on the saved states")
    args = ap.parse_args(argv)

    root = Path(args.results) if args.results else results_root()
    entries = manifest(args.profile)
    names = args.only if args.only else list(entries)
    unknown = [n for n in names if n not in entries]
    if unknown:
        print(f"unknown entries: {', '.join(unknown)}", file=sys.stderr)
        return 2
    if args.list:
        for n in names:
            e = entries[n]
            print(f"{n}  digest={config_digest(e.config)}"
                  f"{'  [states]' if e.save_states else ''}"
                  f"{'  [replay]' if e.dump_replay else ''}")
        return 0
    if args.defense:
        _log(root, "defense study: running...")
        study = run_defense_study(args.profile, root, force=args.force)
        verdicts = [r.get("attack_free") for r in study["clean"].values()]
        _log(root, f"defense study: {len(study['attacked'])} attacked seed(s), "
                   f"{sum(bool(v) for v in verdicts)}/{len(verdicts)} clean seeds attack-free")
        return 0

    failures = 0
    for i, n in enumerate(names, 1):
        entry = entries[n]
        if not args.force:
            cached = load_result(entry, root)
            if cached is not None:
                _log(root, f"({i}/{len(names)}) {n}: cached, skipping")
                continue
        _log(root, f"({i}/{len(names)}) {n}: running...")
        try:
            rep = run_entry(entry, root)
        except Exception:
            failures += 1
            _log(root, f"({i}/{len(names)}) {n}: FAILED\n{traceback.format_exc()}")
            continue
        trig = "-" if rep.trigger_avg is None else f"{rep.trigger_avg:.4f}"
        _log(root, f"({i}/{len(names)}) {n}: done in {rep.wall_time:.1f}s "
                   f"clean={rep.clean_avg:.4f} trigger={trig}")
    _log(root, f"queue finished, {failures} failure(s)")
    return 1 if failures else 0


if __name__ == "__main__":
    raise SystemExit(main())
