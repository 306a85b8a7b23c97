"""Seeded non-stationary classification streams.

Clean data is a class-conditional Gaussian blob task; corruption kinds are
parametric transforms of the feature matrix, identity at severity 0 and
scaled up to severity 5 (mirroring common corruption severity levels).
Schedules hold one corruption at its peak severity and blend linearly into
the next kind across a transition window, so the effective severity is
piecewise linear in the step index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractError
from .model import Batch

SEVERITY_MAX = 5.0

CORRUPTION_TAGS = ("gaussian-noise", "feature-scale", "plane-rotation", "feature-mask", "mean-shift")

_KIND_DEFAULTS = {
    "gaussian-noise": {"noise_scale": 0.5},
    "feature-scale": {"alpha": 0.12},
    "plane-rotation": {"angle_per_severity": 0.3},
    "feature-mask": {"mask_fraction": 0.25},
    "mean-shift": {"shift_scale": 1.0},
}


@dataclass(frozen=True)
class CorruptionKind:
    """One corruption transform: a tag plus resolved numeric parameters.

    Derived parameters (mask indices, shift direction, rotation planes) are
    resolved at schedule build time from the schedule seed, so rebuilding
    the same schedule config yields the same transforms.
    """

    tag: str
    params: dict

    def apply(self, x: np.ndarray, severity: float, rng: np.random.Generator) -> np.ndarray:
        return apply_corruption(x, self, severity, rng)


def apply_corruption(x: np.ndarray, kind: CorruptionKind, severity: float, rng: np.random.Generator) -> np.ndarray:
    """Closed-form transforms; exact identity at severity 0."""
    if severity < 0:
        raise ContractError(f"severity must be >= 0, got {severity}")
    if severity == 0.0:
        return x
    p = kind.params
    if kind.tag == "gaussian-noise":
        return x + severity * p["noise_scale"] * rng.standard_normal(x.shape)
    if kind.tag == "feature-scale":
        return x * (1.0 + p["alpha"] * severity)
    if kind.tag == "plane-rotation":
        theta = p["angle_per_severity"] * severity
        c, s = math.cos(theta), math.sin(theta)
        out = x.copy()
        for i, j in p["planes"]:
            xi = x[:, i]
            xj = x[:, j]
            out[:, i] = c * xi - s * xj
            out[:, j] = s * xi + c * xj
        return out
    if kind.tag == "feature-mask":
        out = x.copy()
        factor = max(0.0, 1.0 - severity / SEVERITY_MAX)
        out[:, p["mask_indices"]] *= factor
        return out
    if kind.tag == "mean-shift":
        return x + severity * p["shift_vector"]
    raise ConfigError(f"unknown corruption kind: {kind.tag}")


def _resolve_kind(tag: str, overrides: dict, dim: int, seed: int, segment_index: int) -> CorruptionKind:
    if tag not in _KIND_DEFAULTS:
        raise ConfigError(f"unknown corruption kind: {tag}")
    params = dict(_KIND_DEFAULTS[tag])
    for key, value in overrides.items():
        if key not in params:
            raise ConfigError(f"unknown parameter {key!r} for corruption {tag!r}")
        params[key] = float(value)
    derive_rng = np.random.default_rng([seed, segment_index])
    if tag == "plane-rotation":
        params["planes"] = tuple((2 * i, 2 * i + 1) for i in range(dim // 2))
    elif tag == "feature-mask":
        n_masked = max(1, int(round(params["mask_fraction"] * dim)))
        idx = derive_rng.choice(dim, size=min(n_masked, dim), replace=False)
        params["mask_indices"] = tuple(int(i) for i in np.sort(idx))
    elif tag == "mean-shift":
        v = derive_rng.standard_normal(dim)
        v = v / np.linalg.norm(v)
        params["shift_vector"] = v * params["shift_scale"]
    return CorruptionKind(tag, params)


@dataclass(frozen=True)
class Segment:
    kind: CorruptionKind
    peak_severity: float
    hold_steps: int


@dataclass(frozen=True)
class BlendedCorruption:
    """Active kinds at one step: (kind, severity, weight), weights sum to 1."""

    components: tuple[tuple[CorruptionKind, float, float], ...]

    @property
    def scalar_severity(self) -> float:
        return sum(w * s for _, s, w in self.components)

    @property
    def dominant_tag(self) -> str:
        best = max(self.components, key=lambda c: c[2])
        return best[0].tag


@dataclass(frozen=True)
class DomainSchedule:
    segments: tuple[Segment, ...]
    transition_steps: int
    seed: int
    total_steps: int
    # start offset of each hold / transition region, precomputed
    _hold_starts: tuple[int, ...] = field(default=(), repr=False)

    def region_starts(self) -> tuple[int, ...]:
        return self._hold_starts


def build_schedule(
    segments: list[dict],
    transition_steps: int,
    seed: int,
    dim: int,
) -> DomainSchedule:
    """Validate a segment list and resolve per-kind derived parameters."""
    if not segments:
        raise ConfigError("schedule needs at least one segment")
    if transition_steps < 0:
        raise ConfigError("transition_steps must be >= 0")
    resolved = []
    for i, seg in enumerate(segments):
        hold = int(seg["hold_steps"])
        if hold < 1:
            raise ConfigError(f"segment {i}: hold_steps must be >= 1")
        sev = float(seg["peak_severity"])
        if not 0.0 <= sev <= SEVERITY_MAX:
            raise ConfigError(f"segment {i}: peak_severity must be in [0, {SEVERITY_MAX}]")
        kind = _resolve_kind(seg["kind"], seg.get("params", {}), dim, seed, i)
        resolved.append(Segment(kind, sev, hold))
    starts = []
    pos = 0
    for i, seg in enumerate(resolved):
        starts.append(pos)
        pos += seg.hold_steps
        if i < len(resolved) - 1:
            starts.append(pos)
            pos += transition_steps
    return DomainSchedule(
        segments=tuple(resolved),
        transition_steps=transition_steps,
        seed=seed,
        total_steps=pos,
        _hold_starts=tuple(starts),
    )


def severity_at(schedule: DomainSchedule, t: int) -> BlendedCorruption:
    """Active corruption blend at 0-based step t.

    Inside a hold the segment's kind carries weight 1. At 0-based offset o
    of a transition of length L, the incoming kind's weight is (o+1)/L and
    the outgoing kind's is 1-(o+1)/L; a zero-weight component is dropped.
    """
    if not 0 <= t < schedule.total_steps:
        raise ContractError(f"step {t} outside schedule of {schedule.total_steps} steps")
    starts = schedule.region_starts()
    # region index: holds at even positions, transitions at odd positions
    idx = int(np.searchsorted(starts, t, side="right")) - 1
    offset = t - starts[idx]
    if idx % 2 == 0:
        seg = schedule.segments[idx // 2]
        return BlendedCorruption(((seg.kind, seg.peak_severity, 1.0),))
    out_seg = schedule.segments[idx // 2]
    in_seg = schedule.segments[idx // 2 + 1]
    w_in = (offset + 1) / schedule.transition_steps
    w_out = 1.0 - w_in
    comps: list[tuple[CorruptionKind, float, float]] = []
    if w_out > 0.0:
        comps.append((out_seg.kind, out_seg.peak_severity, w_out))
    comps.append((in_seg.kind, in_seg.peak_severity, w_in))
    return BlendedCorruption(tuple(comps))


@dataclass(frozen=True)
class BlobSampler:
    """Class-conditional Gaussian mixture with uniform class prior."""

    means: np.ndarray
    sigma: float

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def make_sampler(num_classes: int, dim: int, separation: float, sigma: float, seed: int) -> BlobSampler:
    """Random class means rescaled so the closest pair sits `separation * sigma` apart."""
    if num_classes < 2:
        raise ConfigError("sampler needs at least 2 classes")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((num_classes, dim))
    dmin = np.inf
    for i in range(num_classes):
        for j in range(i + 1, num_classes):
            dmin = min(dmin, float(np.linalg.norm(means[i] - means[j])))
    if dmin == 0.0:
        raise ConfigError("degenerate sampler means")
    means = means * (separation * sigma / dmin)
    return BlobSampler(means=means, sigma=float(sigma))


def sample_labeled(sampler: BlobSampler, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    labels = rng.integers(0, sampler.num_classes, size=n)
    x = sampler.means[labels] + sampler.sigma * rng.standard_normal((n, sampler.dim))
    return x, labels


def make_source_dataset(sampler: BlobSampler, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Clean labeled draw for source pre-training."""
    rng = np.random.default_rng(seed)
    return sample_labeled(sampler, n, rng)


class StreamState:
    """Sequential batch source; advancing the cursor is the only mutation."""

    def __init__(self, schedule: DomainSchedule, sampler: BlobSampler, seed: int):
        self.schedule = schedule
        self.sampler = sampler
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.cursor = 0

    @property
    def done(self) -> bool:
        return self.cursor >= self.schedule.total_steps

    def sample_batch(self, batch_size: int) -> Optional[Batch]:
        """Next corrupted batch with evaluation-only labels, or None at end of stream."""
        if batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.done:
            return None
        blend = severity_at(self.schedule, self.cursor)
        x_clean, labels = sample_labeled(self.sampler, batch_size, self.rng)
        x = np.zeros_like(x_clean)
        for kind, sev, weight in blend.components:
            x += weight * apply_corruption(x_clean, kind, sev, self.rng)
        batch = Batch(x, labels, step_index=self.cursor)
        self.cursor += 1
        return batch
