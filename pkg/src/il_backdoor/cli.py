"""Command-line front end.

Subcommands: run, sweep, distributed, defend, plot, risk.  Exit codes:
0 success, 2 configuration error, 3 missing data/input, 4 training
divergence.  The MNIST directory can be overridden with the
IL_BACKDOOR_DATA environment variable.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .attack import compromise_stats, default_row_split, poison_task
from .config import (
    ConfigError,
    build_defense,
    build_experiment,
    load_config_file,
)
from .defense import defense_report_to_dict, detect_poison, remediate
from .harness import (
    build_stream,
    concrete_event,
    evaluate_stream,
    run_distributed,
    run_experiment,
    sweep_ratios,
)
from .learners import TrainingDivergence, load_learner
from .plots import plot_defense_scatter, plot_ratio_curves, plot_task_lines
from .report import atomic_write_text, config_digest, report_to_dict, write_run_report

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4

DEFAULT_RATIOS = (0.05, 0.025, 0.01, 0.005, 0.0025, 0.001)


def _parse_seeds(text: str | None):
    if not text:
        return None
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError as e:
        raise ConfigError(f"--seed expects comma-separated integers: {e}") from e


def _load(args):
    doc = load_config_file(args.config)
    cfg = build_experiment(doc, profile=args.profile, seeds=_parse_seeds(args.seed))
    out = Path(args.out or doc.get("out") or "results/cli")
    return doc, cfg, out


def _print_report(rep, paths=None):
    trig = "-" if rep.trigger_avg is None else f"{rep.trigger_avg:.4f}"
    print(f"config {rep.config_digest}  clean={rep.clean_avg:.4f}  backdoor={trig}")
    for kind, p in (paths or {}).items():
        print(f"  {kind}: {p}")


def cmd_run(args) -> int:
    _, cfg, out = _load(args)
    state_dir = out / "states" if args.save_states else None
    rep = run_experiment(cfg, state_dir=state_dir)
    paths = write_run_report(rep, out)
    _print_report(rep, paths)
    return EXIT_OK


def cmd_sweep(args) -> int:
    _, cfg, out = _load(args)
    if not cfg.poison_plan:
        raise ConfigError("sweep needs a poison plan to vary the ratio of")
    ratios = tuple(float(v) for v in args.ratios.split(","))
    reports = sweep_ratios(cfg, ratios)
    combined = []
    for rep in reports:
        paths = write_run_report(rep, out)
        _print_report(rep, paths)
        combined.append(report_to_dict(rep))
    atomic_write_text(out / "sweep-summary.json", json.dumps(combined, indent=2) + "\n")
    return EXIT_OK


def cmd_distributed(args) -> int:
    _, cfg, out = _load(args)
    tasks = tuple(int(v) for v in args.tasks.split(","))
    parts = default_row_split(cfg.eval_trigger, len(tasks))
    rep = run_distributed(cfg, tasks, parts, args.ratio)
    paths = write_run_report(rep, out)
    _print_report(rep, paths)
    return EXIT_OK


def cmd_defend(args) -> int:
    doc, cfg, out = _load(args)
    defense_cfg = build_defense(doc.get("defense"))
    digest = config_digest(cfg)
    seed = cfg.seeds[0]
    stream = build_stream(cfg, seed)
    analyzed = args.analyze_task or cfg.stop_after or stream.n_tasks
    if not 1 <= analyzed <= stream.n_tasks:
        raise ConfigError(f"no task {analyzed} in a {stream.n_tasks}-task stream")

    task = stream.tasks[analyzed - 1]
    samples, truth = task.train, None
    events = {ev.task_index: ev for ev in cfg.poison_plan}
    if analyzed in events:
        ev = concrete_event(events[analyzed], seed, task)
        poisoned, truth = poison_task(task, ev, ratio_cap=cfg.ratio_cap,
                                      replace=cfg.poison_replace)
        samples = poisoned.train

    learner = load_learner(args.state)
    task_id = analyzed if cfg.scenario == "task" else None
    report = detect_poison(samples, learner, defense_cfg, truth=truth, task_id=task_id)

    payload = {"config_digest": digest, "seed": seed, "analyzed_task": analyzed}
    payload.update(defense_report_to_dict(report))
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "defense.json", json.dumps(payload, indent=2) + "\n")
    figures = plot_defense_scatter(report, out, stem="defense")

    if report.attack_free:
        print(f"config {digest}  verdict: attack-free")
    else:
        extra = ""
        if report.recall is not None:
            extra = f"  recall={report.recall:.4f} precision={report.precision:.4f}"
        print(f"config {digest}  suspect class {report.suspect_class}, "
              f"{len(report.detected_indices)} samples flagged{extra}")
    for kind, p in figures.items():
        print(f"  {kind}: {p}")

    if args.remediate != "none" and not report.attack_free:
        remediate(learner, samples, report, truth=truth, mode=args.remediate,
                  iterations=defense_cfg.fine_tune_iterations, task_index=analyzed)
        upto = cfg.stop_after or stream.n_tasks
        clean, trig = evaluate_stream(learner, stream, cfg.eval_trigger, upto=upto)
        post = {
            "config_digest": digest,
            "mode": args.remediate,
            "clean_acc": clean.tolist(),
            "trigger_acc": None if trig is None else trig.tolist(),
        }
        atomic_write_text(out / "defense-post.json", json.dumps(post, indent=2) + "\n")
        trig_txt = "-" if trig is None else f"{trig[analyzed - 1]:.4f}"
        print(f"  after {args.remediate}: task {analyzed} clean={clean[analyzed - 1]:.4f} "
              f"backdoor={trig_txt}")
    return EXIT_OK


def cmd_plot(args) -> int:
    inputs = [Path(p) for p in args.inputs]
    for p in inputs:
        if not p.exists():
            raise FileNotFoundError(f"input {p} does not exist")
    if args.kind == "tasks":
        paths = plot_task_lines(inputs, args.out)
    elif args.kind == "ratios":
        paths = plot_ratio_curves(inputs, args.out)
    else:
        if len(inputs) != 1:
            raise ConfigError("scatter plots take exactly one defense report")
        with open(inputs[0]) as f:
            payload = json.load(f)
        paths = plot_defense_scatter(payload, Path(args.out))
    for kind, p in paths.items():
        print(f"{kind}: {p}")
    return EXIT_OK


def cmd_risk(args) -> int:
    prob, expect = compromise_stats(args.tasks, args.p)
    print(f"compromise probability: {prob:.6f}")
    print(f"expected compromised tasks: {expect:.6f}")
    return EXIT_OK


def _add_config_flags(sp, seed_help="comma-separated seed override"):
    sp.add_argument("--config", required=True, help="YAML experiment config")
    sp.add_argument("--profile", choices=("full", "ci"), default=None)
    sp.add_argument("--out", default=None, help="output directory")
    sp.add_argument("--seed", default=None, help=seed_help)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="il-backdoor",
        description="incremental-learning backdoor laboratory",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("run", help="train and evaluate one experiment")
    _add_config_flags(sp)
    sp.add_argument("--save-states", action="store_true",
                    help="checkpoint the trained learner per seed")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="repeat the run over poison ratios")
    _add_config_flags(sp)
    sp.add_argument("--ratios", default=",".join(str(r) for r in DEFAULT_RATIOS))
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("distributed", help="split the trigger across several tasks")
    _add_config_flags(sp)
    sp.add_argument("--tasks", default="2,5,8", help="comma-separated task indices")
    sp.add_argument("--ratio", type=float, default=0.01)
    sp.set_defaults(func=cmd_distributed)

    sp = sub.add_parser("defend", help="activation clustering on a saved learner")
    _add_config_flags(sp, seed_help="seed whose stream/poison is reconstructed")
    sp.add_argument("--state", required=True, help="learner checkpoint (.npz)")
    sp.add_argument("--analyze-task", type=int, default=None)
    sp.add_argument("--remediate", choices=("none", "correct", "drop"), default="none")
    sp.set_defaults(func=cmd_defend)

    sp = sub.add_parser("plot", help="render figures from emitted reports")
    sp.add_argument("--kind", choices=("tasks", "ratios", "scatter"), required=True)
    sp.add_argument("--inputs", nargs="+", required=True)
    sp.add_argument("--out", required=True, help="image path (directory for scatter)")
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("risk", help="distributed-attack compromise odds")
    sp.add_argument("--tasks", type=int, required=True)
    sp.add_argument("--p", type=float, required=True)
    sp.set_defaults(func=cmd_risk)

    return ap


def _fail(kind: str, exc: BaseException, code: int) -> int:
    print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        return _fail("config", e, EXIT_CONFIG)
    except FileNotFoundError as e:
        return _fail("data", e, EXIT_DATA)
    except TrainingDivergence as e:
        return _fail("divergence", e, EXIT_DIVERGENCE)
    except ValueError as e:
        return _fail("config", e, EXIT_CONFIG)


if __name__ == "__main__":
    raise SystemExit(main())
