"""Config files: YAML documents validated against the shipped schema.

A document maps onto ExperimentConfig + LearnerConfig + the poison plan
+ DefenseConfig.  Unknown keys are rejected.  Profiles supply the
iteration/seed defaults; explicit keys in the document win over the
profile, and CLI flags win over the document.
"""

from __future__ import annotations

import json
from dataclasses import fields
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .attack import PoisonEvent, TriggerPattern, make_checkerboard_trigger, split_trigger
from .defense import DefenseConfig
from .harness import ExperimentConfig
from .learners import LearnerConfig


class ConfigError(ValueError):
    """Invalid or unexpressible configuration."""


SCHEMA_PATH = Path(__file__).parent / "schema" / "config.schema.json"

PROFILES = {
    "full": dict(iterations=2000, seeds=(0, 6666, 8888), train_limit=None, test_limit=None),
    "ci": dict(iterations=500, seeds=(0,), train_limit=10000, test_limit=2000),
}

# document key -> LearnerConfig field (everything else matches by name)
_LEARNER_ALIASES = {"lambda": "lam"}
_LEARNER_FIELDS = {f.name for f in fields(LearnerConfig)}


def load_schema() -> dict:
    with open(SCHEMA_PATH) as f:
        return json.load(f)


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} does not exist")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return validate_config(doc, source=str(path))


def validate_config(doc: dict, source: str = "<config>") -> dict:
    try:
        jsonschema.validate(doc, load_schema())
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "top level"
        raise ConfigError(f"{source}: {e.message} (at {where})") from e
    return doc


def build_trigger(doc: dict | None) -> TriggerPattern:
    doc = doc or {}
    size = int(doc.get("size", 6))
    origin = tuple(doc.get("origin", (0, 0)))
    return make_checkerboard_trigger(size, origin=origin)


def build_learner(doc: dict, protocol: str) -> LearnerConfig:
    kw = {}
    for key, value in doc.items():
        name = _LEARNER_ALIASES.get(key, key)
        if name not in _LEARNER_FIELDS:
            raise ConfigError(f"unknown learner option {key!r}")
        if isinstance(value, list):
            value = tuple(value)
        kw[name] = value
    if "hidden" not in kw:
        kw["hidden"] = (1000, 1000) if protocol == "permuted" else (400, 400)
    try:
        return LearnerConfig(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"learner: {e}") from e


def build_poison_plan(events: list | None, trigger: TriggerPattern) -> list:
    plan = []
    for ev in events or []:
        trig = trigger
        if "rows" in ev and ev["rows"] is not None:
            start, end = (int(v) for v in ev["rows"])
            trig = split_trigger(trigger, [(start, end)])[0]
        plan.append(PoisonEvent(
            task_index=int(ev["task"]),
            ratio=float(ev["ratio"]),
            trigger=trig,
            target_label=ev.get("target"),
            seed=ev.get("seed"),
        ))
    return plan


def build_experiment(doc: dict, profile: str | None = None,
                     seeds: tuple | None = None) -> ExperimentConfig:
    """Document + overrides -> ExperimentConfig (which profile keys lose to)."""
    prof = profile or doc.get("profile", "full")
    if prof not in PROFILES:
        raise ConfigError(f"unknown profile {prof!r}")
    merged = dict(PROFILES[prof])
    for key in ("iterations", "seeds", "train_limit", "test_limit"):
        if key in doc:
            merged[key] = doc[key]
    if seeds is not None:
        merged["seeds"] = seeds

    protocol = doc.get("protocol", "permuted")
    trigger = build_trigger(doc.get("trigger"))
    plan = build_poison_plan(doc.get("poison"), trigger)
    try:
        return ExperimentConfig(
            learner=build_learner(doc["learner"], protocol),
            protocol=protocol,
            scenario=doc.get("scenario", "domain"),
            n_tasks=int(doc.get("n_tasks", 10)),
            classes_per_task=int(doc.get("classes_per_task", 2)),
            poison_plan=plan,
            eval_trigger=trigger,
            seeds=tuple(merged["seeds"]),
            iterations=int(merged["iterations"]),
            train_limit=merged["train_limit"],
            test_limit=merged["test_limit"],
            stop_after=doc.get("stop_after"),
            ratio_cap=float(doc.get("ratio_cap", 0.05)),
            poison_replace=bool(doc.get("poison_replace", False)),
            eval_each_task=bool(doc.get("eval_each_task", False)),
            name=doc.get("name", ""),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(str(e)) from e


def build_defense(doc: dict | None) -> DefenseConfig:
    try:
        return DefenseConfig(**(doc or {}))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"defense: {e}") from e


def _trigger_doc(trigger: TriggerPattern) -> dict:
    """Reverse-map a checkerboard trigger onto its document form."""
    ref = make_checkerboard_trigger(trigger.footprint[0], origin=trigger.origin)
    if trigger.footprint[0] != trigger.footprint[1]:
        raise ConfigError("only square checkerboard triggers are doc-expressible")
    if not (np.array_equal(trigger.mask, ref.mask)
            and np.array_equal(trigger.values, ref.values)):
        raise ConfigError("trigger is not a plain checkerboard")
    return {"kind": "checkerboard", "size": int(trigger.footprint[0]),
            "origin": [int(v) for v in trigger.origin]}


def _event_doc(ev: PoisonEvent, global_trigger: TriggerPattern) -> dict:
    out = {"task": ev.task_index, "ratio": ev.ratio,
           "target": ev.target_label, "seed": ev.seed}
    trig = ev.trigger
    if np.array_equal(trig.mask, global_trigger.mask) and np.array_equal(
            trig.values, global_trigger.values):
        return out
    # a row-band part of the global trigger?
    rows = np.flatnonzero(trig.mask.any(axis=1))
    if len(rows) == 0:
        raise ConfigError("event trigger has an empty mask")
    start, end = int(rows[0]), int(rows[-1])
    part = split_trigger(global_trigger, [(start, end)])[0]
    if not (np.array_equal(trig.mask, part.mask)
            and np.array_equal(trig.values, part.values)
            and trig.origin == part.origin):
        raise ConfigError("event trigger is not a row band of the global trigger")
    out["rows"] = [start, end]
    return out


def emit_config(cfg: ExperimentConfig, profile: str = "full") -> dict:
    """ExperimentConfig -> validated document; build_experiment inverts it."""
    trig = cfg.eval_trigger if cfg.eval_trigger is not None else make_checkerboard_trigger(6)
    doc = {
        "name": cfg.name,
        "profile": profile,
        "protocol": cfg.protocol,
        "scenario": cfg.scenario,
        "n_tasks": cfg.n_tasks,
        "classes_per_task": cfg.classes_per_task,
        "iterations": cfg.iterations,
        "seeds": [int(s) for s in cfg.seeds],
        "train_limit": cfg.train_limit,
        "test_limit": cfg.test_limit,
        "stop_after": cfg.stop_after,
        "ratio_cap": cfg.ratio_cap,
        "poison_replace": cfg.poison_replace,
        "eval_each_task": cfg.eval_each_task,
        "trigger": _trigger_doc(trig),
        "poison": [_event_doc(ev, trig) for ev in cfg.poison_plan],
        "learner": {},
    }
    back = {v: k for k, v in _LEARNER_ALIASES.items()}
    for f in fields(LearnerConfig):
        val = getattr(cfg.learner, f.name)
        if isinstance(val, tuple):
            val = list(val)
        doc["learner"][back.get(f.name, f.name)] = val
    return validate_config(doc, source="<emitted>")
