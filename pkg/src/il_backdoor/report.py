"""Run-report serialization: config digests, CSV and JSON emission.

The CSV is the byte-stable artifact (fixed column order, %.6f, no
timestamps).  The JSON summary carries everything else, including the
volatile wall time.  Both start with the config digest so results can
be traced back to the exact configuration that produced them.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import re
import tempfile
from pathlib import Path

import numpy as np

CSV_HEADER = "seed,task,condition,accuracy"


def to_jsonable(obj):
    """Recursively convert dataclasses / numpy values into plain JSON types."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def config_digest(config) -> str:
    """12-hex-digit digest of the canonical JSON form of a config."""
    payload = json.dumps(to_jsonable(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


def run_csv_text(report) -> str:
    """Per seed x task x condition accuracy rows, deterministic bytes."""
    lines = [f"# config {report.config_digest}", CSV_HEADER]
    for i, seed in enumerate(report.seeds):
        for t in range(report.n_tasks):
            lines.append(f"{seed},{t + 1},clean,{report.clean_acc[i, t]:.6f}")
            if report.trigger_acc is not None:
                lines.append(f"{seed},{t + 1},backdoor,{report.trigger_acc[i, t]:.6f}")
    return "\n".join(lines) + "\n"


def report_to_dict(report) -> dict:
    return {
        "config_digest": report.config_digest,
        "name": report.name,
        "seeds": list(report.seeds),
        "clean_acc": report.clean_acc.tolist(),
        "trigger_acc": None if report.trigger_acc is None else report.trigger_acc.tolist(),
        "clean_avg": report.clean_avg,
        "trigger_avg": report.trigger_avg,
        "wall_time": report.wall_time,
        "extras": to_jsonable(report.extras),
    }


def report_from_dict(payload: dict):
    from .harness import RunReport

    trig = payload.get("trigger_acc")
    return RunReport(
        config_digest=payload["config_digest"],
        name=payload.get("name", ""),
        seeds=tuple(payload["seeds"]),
        clean_acc=np.asarray(payload["clean_acc"], dtype=np.float64),
        trigger_acc=None if trig is None else np.asarray(trig, dtype=np.float64),
        wall_time=float(payload.get("wall_time", 0.0)),
        extras=payload.get("extras", {}) or {},
    )


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def safe_stem(name: str) -> str:
    stem = re.sub(r"[^A-Za-z0-9._@=+-]+", "-", name).strip("-")
    return stem or "run"


def write_run_report(report, out_dir: str | Path, stem: str | None = None) -> dict:
    """Emit <stem>.csv and <stem>.json under out_dir; returns their paths."""
    out_dir = Path(out_dir)
    stem = safe_stem(stem if stem is not None else (report.name or report.config_digest))
    csv_path = out_dir / f"{stem}.csv"
    json_path = out_dir / f"{stem}.json"
    atomic_write_text(csv_path, run_csv_text(report))
    atomic_write_text(json_path, json.dumps(report_to_dict(report), indent=2) + "\n")
    return {"csv": str(csv_path), "json": str(json_path)}


def read_run_report(json_path: str | Path):
    with open(json_path) as f:
        return report_from_dict(json.load(f))
