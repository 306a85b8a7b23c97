"""Test-time adaptation methods.

Every step captures the model's predictions on the batch before any update
(preds_before) and after all updates (preds_after), which is what the
flip score consumes. Predictions read the running norm statistics; tent
and eata-lite pull those statistics toward each batch with a momentum
update before taking their gradient step, and the stats-replacement method
swaps them for the batch statistics outright. With lr=0 the gradient
methods disable all updates and act as the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractError, NumericError
from .model import (
    Batch,
    ModelState,
    ProbOutput,
    entropy_and_grad,
    forward,
    full_mask,
    norm_affine_mask,
    sgd_step,
    update_norm_stats,
)

ADAPTER_METHODS = ("bn-stats", "tent", "eata-lite")


@dataclass(frozen=True)
class AdapterConfig:
    method: str = "tent"
    lr: float = 0.05
    trainable_mask_policy: str = "norm-affine-only"
    update_norm_stats: bool = True
    stats_momentum: float = 0.02
    # eata-lite only
    entropy_threshold: Optional[float] = None
    diversity_threshold: Optional[float] = None
    anchor_weight: Optional[float] = None
    prob_avg_momentum: Optional[float] = None

    def __post_init__(self):
        if self.method not in ADAPTER_METHODS:
            raise ConfigError(f"unknown adapter method: {self.method}")
        if self.lr < 0:
            raise ConfigError(f"adapter.lr must be >= 0, got {self.lr}")
        if self.trainable_mask_policy not in ("norm-affine-only", "all-parameters"):
            raise ConfigError(f"unknown trainable_mask_policy: {self.trainable_mask_policy}")
        if not 0.0 < self.stats_momentum <= 1.0:
            raise ConfigError("adapter.stats_momentum must be in (0, 1]")
        if self.method == "eata-lite":
            if self.entropy_threshold is None or self.entropy_threshold < 0:
                raise ConfigError("eata-lite needs entropy_threshold >= 0")
            if self.diversity_threshold is None or not 0.0 < self.diversity_threshold <= 1.0:
                raise ConfigError("eata-lite needs diversity_threshold in (0, 1]")
            if self.anchor_weight is None or self.anchor_weight < 0:
                raise ConfigError("eata-lite needs anchor_weight >= 0")
            if self.prob_avg_momentum is None or not 0.0 <= self.prob_avg_momentum < 1.0:
                raise ConfigError("eata-lite needs prob_avg_momentum in [0, 1)")


@dataclass
class AdaptStepResult:
    preds_before: ProbOutput
    preds_after: ProbOutput
    loss: float
    num_selected: int


def trainable_mask_for(model: ModelState, policy: str) -> np.ndarray:
    if policy == "norm-affine-only":
        return norm_affine_mask(model.arch)
    return full_mask(model.arch)


def bn_stats_step(model: ModelState, batch: Batch) -> AdaptStepResult:
    """Replace running norm statistics with this batch's statistics.

    Weights and affine parameters stay untouched; repeated identical
    batches are a fixed point.
    """
    if batch.size < 2:
        raise ContractError("stats replacement needs batch_size >= 2")
    preds_before = forward(model, batch, update_stats=False)
    update_norm_stats(model, batch.features, momentum=1.0)
    preds_after = forward(model, batch, update_stats=False)
    return AdaptStepResult(preds_before, preds_after, loss=0.0, num_selected=batch.size)


def tent_step(model: ModelState, batch: Batch, config: AdapterConfig) -> AdaptStepResult:
    """One entropy-minimization step on the trainable parameters."""
    preds_before = forward(model, batch, update_stats=False)
    if config.lr == 0.0:
        return AdaptStepResult(preds_before, preds_before, loss=0.0, num_selected=batch.size)
    cache = None
    if config.update_norm_stats:
        cache = update_norm_stats(model, batch.features, momentum=config.stats_momentum)
    mask = trainable_mask_for(model, config.trainable_mask_policy)
    loss, grad = entropy_and_grad(model, batch, mask, reuse_cache=cache)
    if not np.isfinite(loss):
        raise NumericError("non-finite entropy loss", step=batch.step_index)
    sgd_step(model, grad, config.lr)
    preds_after = forward(model, batch, update_stats=False)
    return AdaptStepResult(preds_before, preds_after, loss=loss, num_selected=batch.size)


@dataclass
class EataState:
    """Running average of selected prediction vectors (diversity reference)."""

    running_prob_avg: Optional[np.ndarray] = None


def eata_lite_step(
    model: ModelState,
    batch: Batch,
    config: AdapterConfig,
    state: EataState,
) -> AdaptStepResult:
    """Entropy step on a filtered, reweighted subset with an L2 anchor.

    Samples with entropy >= the threshold are dropped; of the rest, samples
    whose prediction cosine-matches the running average above the diversity
    threshold are dropped; survivors are weighted exp(H0 - H_i) (weights not
    differentiated through). The loss adds anchor_weight * ||theta - theta_pre||^2
    over trainable entries. With nothing selected the step is statistics-only.
    """
    preds_before = forward(model, batch, update_stats=False)
    if config.lr == 0.0:
        return AdaptStepResult(preds_before, preds_before, loss=0.0, num_selected=0)
    cache = None
    if config.update_norm_stats:
        cache = update_norm_stats(model, batch.features, momentum=config.stats_momentum)

    p = cache.probs if cache is not None else forward(model, batch, update_stats=False).probs
    logp = np.log(np.maximum(p, 1e-12))
    entropies = -(p * logp).sum(axis=1)
    keep = entropies < config.entropy_threshold
    if state.running_prob_avg is not None and np.any(keep):
        avg = state.running_prob_avg
        denom = np.linalg.norm(p, axis=1) * np.linalg.norm(avg)
        cos = (p @ avg) / np.maximum(denom, 1e-12)
        keep &= cos <= config.diversity_threshold
    num_selected = int(np.count_nonzero(keep))

    loss = 0.0
    if num_selected > 0:
        weights = np.zeros(batch.size)
        weights[keep] = np.exp(config.entropy_threshold - entropies[keep]) / num_selected
        mask = trainable_mask_for(model, config.trainable_mask_policy)
        loss, grad = entropy_and_grad(model, batch, mask, sample_weights=weights, reuse_cache=cache)
        delta = model.theta_t - model.theta_pre
        loss += float(config.anchor_weight * np.sum(delta[mask] ** 2))
        anchor_grad = np.zeros_like(grad)
        anchor_grad[mask] = 2.0 * config.anchor_weight * delta[mask]
        grad = grad + anchor_grad
        if not np.isfinite(loss):
            raise NumericError("non-finite eata-lite loss", step=batch.step_index)
        sgd_step(model, grad, config.lr)
        mean_selected = p[keep].mean(axis=0)
        m = config.prob_avg_momentum
        if state.running_prob_avg is None:
            state.running_prob_avg = mean_selected
        else:
            state.running_prob_avg = m * state.running_prob_avg + (1.0 - m) * mean_selected

    preds_after = forward(model, batch, update_stats=False)
    return AdaptStepResult(preds_before, preds_after, loss=loss, num_selected=num_selected)


class Adapter:
    """Stateful wrapper dispatching to the configured method."""

    def __init__(self, config: AdapterConfig):
        self.config = config
        self.eata_state = EataState()

    def step(self, model: ModelState, batch: Batch) -> AdaptStepResult:
        if self.config.method == "bn-stats":
            return bn_stats_step(model, batch)
        if self.config.method == "tent":
            return tent_step(model, batch, self.config)
        return eata_lite_step(model, batch, self.config, self.eata_state)
