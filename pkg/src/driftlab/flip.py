"""Label-flip signal and the adaptive shrink-restore reset rule.

The per-step flip score sums, over samples whose predicted class changed
during one adaptation step, the new model's confidence times the gain in
that class's probability. The smoothed score is tracked with an EMA; a
reset fires when the smoothed value climbs above `pi` times the estimated
minimum of the trajectory (the mean of the smoothed values in a small
window around the lowest point). Re-initialization blends the current
weights with the frozen source weights, theta <- lam*theta + gamma*theta_pre,
with lam + gamma < 1 so repeated resets keep the weight magnitude bounded.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractError
from .model import ModelState, ProbOutput


@dataclass(frozen=True)
class FlipConfig:
    beta: float = 0.8
    pi: float = 2.0
    neighborhood_radius: int = 75
    burn_in: int = 250

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError(f"flip.beta must be in [0, 1), got {self.beta}")
        if not self.pi > 1.0:
            raise ConfigError(f"flip.pi must be > 1, got {self.pi}")
        if self.neighborhood_radius < 0:
            raise ConfigError("flip.neighborhood_radius must be >= 0")
        if self.burn_in < 1:
            raise ConfigError("flip.burn_in must be >= 1")


@dataclass(frozen=True)
class ShrinkRestoreConfig:
    lam: float = 0.2
    gamma: float = 0.75

    def __post_init__(self):
        if not 0.0 < self.lam < 1.0:
            raise ConfigError(f"shrink_restore.lam must be in (0, 1), got {self.lam}")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"shrink_restore.gamma must be in (0, 1), got {self.gamma}")
        if self.lam + self.gamma >= 1.0:
            raise ConfigError(
                f"shrink_restore.lam + shrink_restore.gamma must be < 1, got {self.lam + self.gamma}"
            )


@dataclass
class FlipTrace:
    """Flip-score history since the last re-initialization.

    `min_estimate` is the mean of the smoothed values in the window
    [min_index - k, min_index + k] clipped to valid indices, computed with
    a plain left-to-right sum (the summation order is part of the contract
    so recorded traces replay exactly).
    """

    raw: list[float] = field(default_factory=list)
    smoothed: list[float] = field(default_factory=list)
    min_estimate: Optional[float] = None
    min_index: Optional[int] = None
    armed: bool = False
    steps_since_reinit: int = 0

    def clear(self) -> None:
        self.raw.clear()
        self.smoothed.clear()
        self.min_estimate = None
        self.min_index = None
        self.armed = False
        self.steps_since_reinit = 0


def label_flip_score(before: ProbOutput, after: ProbOutput) -> float:
    """Confidence-weighted flip score for one adaptation step.

    Samples that keep their predicted class contribute 0. A flipped sample
    contributes c * (c - p_before), where c is the new model's confidence in
    its predicted class and p_before that class's probability under the old
    model. Negative contributions are kept.
    """
    if before.probs.shape != after.probs.shape:
        raise ContractError(
            f"before/after must cover the identical batch, got {before.probs.shape} vs {after.probs.shape}"
        )
    flipped = after.predicted_class != before.predicted_class
    if not np.any(flipped):
        return 0.0
    new_class = after.predicted_class[flipped]
    c_now = after.confidence[flipped]
    c_prev = before.probs[np.flatnonzero(flipped), new_class]
    return float(np.sum(c_now * (c_now - c_prev)))


def ema_update(trace: FlipTrace, lf: float, config: FlipConfig) -> FlipTrace:
    """Append one raw score and its EMA; the first value seeds the EMA."""
    lf = float(lf)
    if trace.smoothed:
        s = config.beta * trace.smoothed[-1] + (1.0 - config.beta) * lf
    else:
        s = lf
    trace.raw.append(lf)
    trace.smoothed.append(s)
    trace.steps_since_reinit += 1
    return trace


def update_min(trace: FlipTrace, config: FlipConfig) -> FlipTrace:
    """Track the trajectory minimum and arm the trigger once it is passed.

    The minimum index moves only on a strict new low (first occurrence wins
    ties). Arming requires the burn-in to have elapsed and the current
    smoothed value to sit strictly above the running minimum; once armed,
    the trace stays armed until cleared.
    """
    if not trace.smoothed:
        raise ContractError("update_min on an empty trace")
    last = trace.smoothed[-1]
    if trace.min_index is None:
        # full scan (first occurrence); incremental path keeps this exact
        best = 0
        for i in range(1, len(trace.smoothed)):
            if trace.smoothed[i] < trace.smoothed[best]:
                best = i
        trace.min_index = best
    elif last < trace.smoothed[trace.min_index]:
        trace.min_index = len(trace.smoothed) - 1
    k = config.neighborhood_radius
    lo = max(0, trace.min_index - k)
    hi = min(len(trace.smoothed), trace.min_index + k + 1)
    window = trace.smoothed[lo:hi]
    trace.min_estimate = sum(window) / len(window)
    if (
        not trace.armed
        and trace.steps_since_reinit >= config.burn_in
        and last > trace.smoothed[trace.min_index]
    ):
        trace.armed = True
    return trace


def should_trigger(trace: FlipTrace, config: FlipConfig) -> bool:
    """True iff armed and the current smoothed score exceeds pi * Min."""
    if not trace.armed or not trace.smoothed or trace.min_estimate is None:
        return False
    return trace.smoothed[-1] > config.pi * trace.min_estimate


def shrink_restore(theta_t: np.ndarray, theta_pre: np.ndarray, config: ShrinkRestoreConfig) -> np.ndarray:
    """Blend current weights toward the source snapshot: lam*theta_t + gamma*theta_pre."""
    theta_t = np.asarray(theta_t, dtype=np.float64)
    theta_pre = np.asarray(theta_pre, dtype=np.float64)
    if theta_t.shape != theta_pre.shape:
        raise ContractError("theta_t and theta_pre must have equal length")
    return config.lam * theta_t + config.gamma * theta_pre


@dataclass(frozen=True)
class TraceSnapshot:
    """Per-step view of the trigger machinery, taken before any clearing."""

    lf_raw: float
    lf_smoothed: float
    min_estimate: float
    armed: bool


def apply_reinit(model: ModelState, mode: str, sr_config: ShrinkRestoreConfig) -> None:
    """Overwrite theta_t per the re-init mode and restore source norm stats."""
    if mode == "shrink-restore":
        model.theta_t = shrink_restore(model.theta_t, model.theta_pre, sr_config)
    elif mode == "full-restore":
        model.theta_t = model.theta_pre.copy()
    else:
        raise ConfigError(f"unknown reinit mode: {mode}")
    model.restore_source_stats()


def asr_step(
    trace: FlipTrace,
    model: ModelState,
    preds_before: ProbOutput,
    preds_after: ProbOutput,
    flip_config: FlipConfig,
    sr_config: ShrinkRestoreConfig,
    reinit_mode: str = "shrink-restore",
) -> tuple[ModelState, bool, TraceSnapshot]:
    """One full pass of the adaptive policy on an adapter step's predictions.

    Scores the flip, updates the EMA and minimum, evaluates the trigger, and
    on firing re-initializes the model, restores source norm statistics, and
    clears the trace.
    """
    lf = label_flip_score(preds_before, preds_after)
    ema_update(trace, lf, flip_config)
    update_min(trace, flip_config)
    fired = should_trigger(trace, flip_config)
    snapshot = TraceSnapshot(
        lf_raw=lf,
        lf_smoothed=trace.smoothed[-1],
        min_estimate=trace.min_estimate,
        armed=trace.armed,
    )
    if fired:
        apply_reinit(model, reinit_mode, sr_config)
        trace.clear()
    return model, fired, snapshot
