"""Experiment loop: stream -> adapter -> reset policy -> per-step log.

Also home to the paired plasticity measurement and the parameter sweep.
Runs are deterministic functions of their config; adapters never see
labels (the harness strips them and keeps the labeled batch on the
metrics path only).
"""

from __future__ import annotations

import concurrent.futures
import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .adapters import Adapter
from .config import RunConfig, apply_override, config_hash, config_json, run_config_from_document
from .errors import ConfigError, ContractError, NumericError
from .flip import apply_reinit, label_flip_score
from .model import ModelState, train_source, weight_l2_norm
from .policies import PolicyState
from .stream import StreamState, make_source_dataset, severity_at

PLASTICITY_WINDOW = 500


@dataclass
class RunRecord:
    """One row per stream step plus the trigger event log and config echo."""

    step: np.ndarray
    domain: list[str]
    severity: np.ndarray
    accuracy: np.ndarray
    lf_raw: np.ndarray
    lf_smoothed: np.ndarray
    min_estimate: np.ndarray
    armed: np.ndarray
    triggered: np.ndarray
    weight_norm: np.ndarray
    num_selected: np.ndarray
    events: list[dict] = field(default_factory=list)
    config_echo: Optional[dict] = None

    def __len__(self) -> int:
        return len(self.step)

    @property
    def mean_accuracy(self) -> float:
        return float(self.accuracy.mean())

    @property
    def num_triggers(self) -> int:
        return int(self.triggered.sum())


class _RowBuffer:
    def __init__(self):
        self.rows: list[tuple] = []
        self.events: list[dict] = []

    def to_record(self, echo: Optional[dict]) -> RunRecord:
        cols = list(zip(*self.rows)) if self.rows else [[] for _ in range(11)]
        return RunRecord(
            step=np.array(cols[0], dtype=np.int64),
            domain=list(cols[1]),
            severity=np.array(cols[2], dtype=np.float64),
            accuracy=np.array(cols[3], dtype=np.float64),
            lf_raw=np.array(cols[4], dtype=np.float64),
            lf_smoothed=np.array(cols[5], dtype=np.float64),
            min_estimate=np.array(cols[6], dtype=np.float64),
            armed=np.array(cols[7], dtype=bool),
            triggered=np.array(cols[8], dtype=bool),
            weight_norm=np.array(cols[9], dtype=np.float64),
            num_selected=np.array(cols[10], dtype=np.int64),
            events=self.events,
            config_echo=echo,
        )


def train_source_model(config: RunConfig) -> ModelState:
    """Source pre-training exactly as the config's source section specifies."""
    sampler = config.build_sampler()
    src = config.source_section
    x, y = make_source_dataset(sampler, src["num_samples"], src["seed"])
    return train_source(
        config.arch,
        x,
        y,
        epochs=src["epochs"],
        seed=src["seed"],
        lr=src["lr"],
        batch_size=src["batch_size"],
    )


def _pre_hash(model: ModelState) -> bytes:
    return hashlib.sha256(model.theta_pre.tobytes()).digest()


def _stats_snapshot(model: ModelState) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(m.copy(), v.copy()) for m, v in model.source_stats]


def run_experiment(config: RunConfig, source_model: Optional[ModelState] = None) -> RunRecord:
    """Run the stream to exhaustion under the configured adapter and policy.

    A numeric failure mid-run raises NumericError carrying the 1-based step
    index and the partial record (`error.partial_record`), flushed up to the
    failing step.
    """
    if source_model is None:
        source_model = train_source_model(config)
    if source_model.arch != config.arch:
        raise ConfigError("checkpoint architecture does not match the config architecture")
    model = source_model.copy()
    model.mode = "frozen-stats"

    schedule = config.build_schedule()
    sampler = config.build_sampler()
    stream = StreamState(schedule, sampler, config.stream_section["seed"])
    adapter = Adapter(config.adapter)
    policy = PolicyState(config.policy, config.flip, config.seed)
    batch_size = config.stream_section["batch_size"]

    frozen = _pre_hash(model)
    frozen_stats = _stats_snapshot(model)
    buf = _RowBuffer()
    for t in range(schedule.total_steps):
        step_no = t + 1
        batch = stream.sample_batch(batch_size)
        try:
            result = adapter.step(model, batch.without_labels())
        except NumericError as e:
            e.step = step_no
            e.partial_record = buf.to_record(config.echo)
            raise
        accuracy = float(np.mean(result.preds_after.predicted_class == batch.labels))
        lf = label_flip_score(result.preds_before, result.preds_after)
        fired, snap = policy.decide(lf, step_no)
        if fired:
            pre_norm = weight_l2_norm(model)
            apply_reinit(model, config.policy.reinit_mode, config.shrink_restore)
            buf.events.append(
                {
                    "step": step_no,
                    "policy": config.policy.kind,
                    "pre_norm": pre_norm,
                    "post_norm": weight_l2_norm(model),
                }
            )
        if _pre_hash(model) != frozen:
            raise ContractError(f"theta_pre changed at step {step_no}")
        blend = severity_at(schedule, t)
        buf.rows.append(
            (
                step_no,
                blend.dominant_tag,
                blend.scalar_severity,
                accuracy,
                snap.lf_raw,
                snap.lf_smoothed,
                snap.min_estimate,
                snap.armed,
                fired,
                weight_l2_norm(model),
                result.num_selected,
            )
        )
    for (m0, v0), (m1, v1) in zip(frozen_stats, model.source_stats):
        if not (np.array_equal(m0, m1) and np.array_equal(v0, v1)):
            raise ContractError("source norm statistics changed during the run")
    return buf.to_record(config.echo)


def windowed_mean(values: np.ndarray, window: int) -> np.ndarray:
    """Means over consecutive windows; a trailing partial window is kept."""
    if window < 1:
        raise ContractError("window must be >= 1")
    values = np.asarray(values, dtype=np.float64)
    out = []
    for start in range(0, len(values), window):
        out.append(values[start : start + window].mean())
    return np.array(out)


def paired_gap(record_a: RunRecord, record_b: RunRecord, window: int) -> np.ndarray:
    """Windowed accuracy of a minus b; records must come from the same stream."""
    if len(record_a) != len(record_b):
        raise ContractError("records must have equal length")
    if record_a.config_echo and record_b.config_echo:
        if record_a.config_echo["stream"]["seed"] != record_b.config_echo["stream"]["seed"]:
            raise ContractError("records must come from the identical stream seed")
    return windowed_mean(record_a.accuracy, window) - windowed_mean(record_b.accuracy, window)


@dataclass
class SweepCell:
    index: int
    params: dict
    status: str  # "ok" | "config-error" | "run-error"
    mean_accuracy: Optional[float] = None
    num_triggers: Optional[int] = None
    message: str = ""


def _grid_cells(grid: dict) -> list[dict]:
    keys = sorted(grid)
    cells = [{}]
    for key in keys:
        values = grid[key]
        if not isinstance(values, list) or not values:
            raise ConfigError(f"grid entry {key!r} must be a non-empty list")
        cells = [dict(c, **{key: v}) for c in cells for v in values]
    return cells


def sweep(base_doc: dict, grid: dict, threads: int = 1) -> list[SweepCell]:
    """One run per grid cell over the base document; cells never abort the sweep.

    The source model is trained once per distinct (architecture, source,
    sampler) combination and copied into each run; cells are independent and
    may execute concurrently, results are merged by cell index.
    """
    cells = _grid_cells(grid)
    prepared: list[tuple[int, dict, Optional[RunConfig], str]] = []
    source_cache: dict[str, ModelState] = {}
    for i, params in enumerate(cells):
        doc = base_doc
        for key, value in params.items():
            doc = apply_override(doc, key, value)
        try:
            cfg = run_config_from_document(doc)
            key = config_json(
                {
                    "architecture": cfg.echo["architecture"],
                    "source": cfg.echo["source"],
                    "sampler_seed": cfg.stream_section["sampler_seed"],
                    "sigma": cfg.stream_section["sigma"],
                    "separation": cfg.stream_section["separation"],
                }
            )
            if key not in source_cache:
                source_cache[key] = train_source_model(cfg)
            prepared.append((i, params, cfg, key))
        except ConfigError as e:
            prepared.append((i, params, None, str(e)))

    results: dict[int, SweepCell] = {}

    def run_cell(item) -> SweepCell:
        i, params, cfg, key = item
        try:
            record = run_experiment(cfg, source_cache[key].copy())
            return SweepCell(i, params, "ok", record.mean_accuracy, record.num_triggers)
        except NumericError as e:
            return SweepCell(i, params, "run-error", message=str(e))

    runnable = [item for item in prepared if item[2] is not None]
    if threads > 1 and len(runnable) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            for cell in pool.map(run_cell, runnable):
                results[cell.index] = cell
    else:
        for item in runnable:
            cell = run_cell(item)
            results[cell.index] = cell
    for i, params, cfg, msg in prepared:
        if cfg is None:
            results[i] = SweepCell(i, params, "config-error", message=msg)
    return [results[i] for i in range(len(cells))]
