"""Trace CSV, trigger JSONL, and sweep-table persistence.

Numeric fields use shortest round-trip decimal formatting (Python repr) so
a parsed trace replays bit-exactly. All writes are whole-file atomic.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .config import TOOL_VERSION, config_hash, config_json
from .errors import ConfigError
from .harness import RunRecord, SweepCell

TRACE_COLUMNS = (
    "step",
    "domain",
    "severity",
    "accuracy",
    "lf_raw",
    "lf_smoothed",
    "min_estimate",
    "armed",
    "triggered",
    "weight_norm",
    "num_selected",
)


def atomic_write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x) -> str:
    return repr(float(x))


def write_trace(path: str, record: RunRecord) -> None:
    echo = record.config_echo or {}
    lines = [
        "# driftlab-trace v1",
        f"# tool-version: {TOOL_VERSION}",
        f"# config-hash: {config_hash(echo)}",
        f"# config: {config_json(echo)}",
        ",".join(TRACE_COLUMNS),
    ]
    for i in range(len(record)):
        lines.append(
            ",".join(
                (
                    str(int(record.step[i])),
                    record.domain[i],
                    _fmt(record.severity[i]),
                    _fmt(record.accuracy[i]),
                    _fmt(record.lf_raw[i]),
                    _fmt(record.lf_smoothed[i]),
                    _fmt(record.min_estimate[i]),
                    str(int(record.armed[i])),
                    str(int(record.triggered[i])),
                    _fmt(record.weight_norm[i]),
                    str(int(record.num_selected[i])),
                )
            )
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_trace(path: str) -> dict:
    """Parse a trace file back into columns plus its embedded config."""
    try:
        with open(path) as fh:
            raw = fh.read().splitlines()
    except FileNotFoundError:
        raise ConfigError(f"trace file not found: {path}")
    meta: dict = {}
    rows: list[list[str]] = []
    header_seen = False
    for line in raw:
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("config:"):
                try:
                    meta["config"] = json.loads(body[len("config:") :].strip())
                except json.JSONDecodeError:
                    raise ConfigError(f"malformed embedded config in {path}")
            elif body.startswith("config-hash:"):
                meta["config_hash"] = body.split(":", 1)[1].strip()
            continue
        if not line.strip():
            continue
        if not header_seen:
            if tuple(line.split(",")) != TRACE_COLUMNS:
                raise ConfigError(f"unexpected trace columns in {path}")
            header_seen = True
            continue
        parts = line.split(",")
        if len(parts) != len(TRACE_COLUMNS):
            raise ConfigError(f"malformed trace row in {path}: {line!r}")
        rows.append(parts)
    if not header_seen or not rows:
        raise ConfigError(f"trace file has no data rows: {path}")
    cols = list(zip(*rows))
    out = {
        "step": np.array([int(v) for v in cols[0]], dtype=np.int64),
        "domain": list(cols[1]),
        "severity": np.array([float(v) for v in cols[2]]),
        "accuracy": np.array([float(v) for v in cols[3]]),
        "lf_raw": np.array([float(v) for v in cols[4]]),
        "lf_smoothed": np.array([float(v) for v in cols[5]]),
        "min_estimate": np.array([float(v) for v in cols[6]]),
        "armed": np.array([bool(int(v)) for v in cols[7]]),
        "triggered": np.array([bool(int(v)) for v in cols[8]]),
        "weight_norm": np.array([float(v) for v in cols[9]]),
        "num_selected": np.array([int(v) for v in cols[10]], dtype=np.int64),
    }
    meta["columns"] = out
    return meta


def write_events(path: str, events: list[dict], echo: dict | None = None) -> None:
    """Trigger event log; the first line is a config header record."""
    header = {"type": "config", "config_hash": config_hash(echo or {}), "config": echo or {}}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(dict(e, type="trigger"), sort_keys=True) for e in events]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_events(path: str) -> list[dict]:
    with open(path) as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    return [r for r in records if r.get("type") == "trigger"]


def _params_str(params: dict) -> str:
    return ";".join(f"{k}={params[k]}" for k in sorted(params)) if params else "-"


def write_sweep_table(path: str, cells: list[SweepCell], base_echo: dict) -> None:
    lines = [
        "# driftlab-sweep v1",
        f"# base-config-hash: {config_hash(base_echo)}",
        f"# config: {config_json(base_echo)}",
        "cell,params,status,mean_accuracy,num_triggers,message",
    ]
    for cell in cells:
        acc = _fmt(cell.mean_accuracy) if cell.mean_accuracy is not None else ""
        trig = str(cell.num_triggers) if cell.num_triggers is not None else ""
        msg = cell.message.replace(",", ";").replace("\n", " ")
        lines.append(f"{cell.index},{_params_str(cell.params)},{cell.status},{acc},{trig},{msg}")
    atomic_write_text(path, "\n".join(lines) + "\n")
