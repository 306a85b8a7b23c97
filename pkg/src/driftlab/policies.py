"""Reset policies deciding when to re-initialize the adapting model.

All policies run the flip-score smoothing machinery so every trace logs the
signal, but only the adaptive policy consults it; the counter policies fire
on schedules. The same `decide` path is used when replaying a recorded
trace, which is what makes replay exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError
from .flip import FlipConfig, FlipTrace, ShrinkRestoreConfig, TraceSnapshot, ema_update, should_trigger, update_min

POLICY_KINDS = ("no-reset", "fixed-interval", "random-interval", "asr")

# mixed into the run seed for the random-interval draws so they are
# independent of the stream draws but recoverable from the config echo
_POLICY_SEED_TAG = 9001


@dataclass(frozen=True)
class ResetPolicyConfig:
    kind: str = "asr"
    T: Optional[int] = None
    interval_range: Optional[tuple[int, int]] = None
    reinit_mode: str = "shrink-restore"

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ConfigError(f"unknown policy kind: {self.kind}")
        if self.reinit_mode not in ("full-restore", "shrink-restore"):
            raise ConfigError(f"unknown reinit_mode: {self.reinit_mode}")
        if self.kind == "fixed-interval":
            if self.T is None or self.T < 1:
                raise ConfigError("fixed-interval policy needs T >= 1")
        if self.kind == "random-interval":
            if self.interval_range is None:
                raise ConfigError("random-interval policy needs interval_range")
            lo, hi = self.interval_range
            if not 1 <= lo <= hi:
                raise ConfigError("interval_range must satisfy 1 <= lo <= hi")


class PolicyState:
    """Counters plus the flip trace for one run."""

    def __init__(self, config: ResetPolicyConfig, flip_config: FlipConfig, seed: int):
        self.config = config
        self.flip_config = flip_config
        self.trace = FlipTrace()
        self.steps_since_reset = 0
        self._rng = np.random.default_rng([seed, _POLICY_SEED_TAG])
        self._next_interval: Optional[int] = None
        if config.kind == "random-interval":
            self._next_interval = self._draw_interval()

    def _draw_interval(self) -> int:
        lo, hi = self.config.interval_range
        return int(self._rng.integers(lo, hi + 1))

    def decide(self, lf: float, step_no: int) -> tuple[bool, TraceSnapshot]:
        """Consume one flip score at 1-based step_no; returns whether to reset.

        On a reset decision the flip trace is cleared and counters restart;
        applying the re-init to the model is the caller's job.
        """
        ema_update(self.trace, lf, self.flip_config)
        update_min(self.trace, self.flip_config)
        snapshot = TraceSnapshot(
            lf_raw=self.trace.raw[-1],
            lf_smoothed=self.trace.smoothed[-1],
            min_estimate=self.trace.min_estimate,
            armed=self.trace.armed,
        )
        kind = self.config.kind
        if kind == "no-reset":
            fired = False
        elif kind == "fixed-interval":
            fired = step_no % self.config.T == 0
        elif kind == "random-interval":
            self.steps_since_reset += 1
            fired = self.steps_since_reset >= self._next_interval
        else:
            fired = should_trigger(self.trace, self.flip_config)
        if fired:
            self.trace.clear()
            self.steps_since_reset = 0
            if kind == "random-interval":
                self._next_interval = self._draw_interval()
        return fired, snapshot


def replay_columns(
    lf_raw: list[float],
    policy_config: ResetPolicyConfig,
    flip_config: FlipConfig,
    seed: int,
) -> tuple[list[float], list[float], list[bool], list[bool]]:
    """Re-run the scalar machinery over a recorded lf_raw column.

    Returns (smoothed, min_estimate, armed, triggered); exact float equality
    with the recorded run is expected.
    """
    policy = PolicyState(policy_config, flip_config, seed)
    smoothed: list[float] = []
    min_est: list[float] = []
    armed: list[bool] = []
    triggered: list[bool] = []
    for i, lf in enumerate(lf_raw):
        fired, snap = policy.decide(float(lf), i + 1)
        smoothed.append(snap.lf_smoothed)
        min_est.append(snap.min_estimate)
        armed.append(snap.armed)
        triggered.append(fired)
    return smoothed, min_est, armed, triggered
