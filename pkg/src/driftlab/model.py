"""Minimal differentiable classifier used as the adaptation substrate.

Dense layers with tanh activations, optional batch-statistics normalization
after each hidden layer (running mean/variance plus learnable scale/shift),
and a softmax head. Parameters live in one flat float64 vector so reset
policies can blend whole models with plain vector arithmetic. All gradients
are hand-derived; see `entropy_and_grad` and `cross_entropy_and_grad`.

Normalization modes:
  * ``train-stats``: normalize by the current batch's statistics (used for
    source training); running stats chase the batch with `stats_momentum`.
  * ``frozen-stats``: normalize by the stored running statistics (used at
    test time); stats only move when an adapter asks for an update.

Parameters and running stats are snapped to float32-representable values at
`init_model` and when `train_source` returns, so the binary32 checkpoint
format round-trips bit-exactly while in-memory math stays float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, InputError, NumericError, ShapeError, TrainingError

NORM_EPS = 1e-5
LOG_CLAMP = 1e-12
STATS_MOMENTUM = 0.1
VAR_FLOOR = 1e-12


@dataclass(frozen=True)
class Architecture:
    """Shape of the classifier: dense widths plus per-layer norm flags."""

    input_dim: int
    hidden_widths: tuple[int, ...]
    num_classes: int
    norm_after_hidden: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        object.__setattr__(self, "norm_after_hidden", tuple(bool(f) for f in self.norm_after_hidden))
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if any(w < 1 for w in self.hidden_widths):
            raise ConfigError(f"hidden widths must be >= 1, got {self.hidden_widths}")
        if len(self.norm_after_hidden) != len(self.hidden_widths):
            raise ConfigError(
                "norm_after_hidden must have one flag per hidden layer "
                f"({len(self.hidden_widths)} layers, {len(self.norm_after_hidden)} flags)"
            )

    @property
    def param_count(self) -> int:
        return layout_for(self).size

    @property
    def num_norm_layers(self) -> int:
        return sum(self.norm_after_hidden)


@dataclass(frozen=True)
class _LayerSlices:
    w: slice
    b: slice
    scale: Optional[slice]
    shift: Optional[slice]
    fan_in: int
    fan_out: int


@dataclass(frozen=True)
class ParamLayout:
    """Maps named parameter blocks onto slices of the flat vector.

    Order: per hidden layer W, b, then scale, shift when the layer is
    normalized; finally the output layer W, b.
    """

    hidden: tuple[_LayerSlices, ...]
    out_w: slice
    out_b: slice
    size: int
    names: tuple[tuple[str, slice], ...]

    def views(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        return {name: theta[sl] for name, sl in self.names}


@lru_cache(maxsize=None)
def layout_for(arch: Architecture) -> ParamLayout:
    pos = 0
    names: list[tuple[str, slice]] = []

    def take(name: str, n: int) -> slice:
        nonlocal pos
        sl = slice(pos, pos + n)
        pos += n
        names.append((name, sl))
        return sl

    hidden = []
    fan_in = arch.input_dim
    for i, width in enumerate(arch.hidden_widths):
        w = take(f"w{i}", fan_in * width)
        b = take(f"b{i}", width)
        scale = shift = None
        if arch.norm_after_hidden[i]:
            scale = take(f"scale{i}", width)
            shift = take(f"shift{i}", width)
        hidden.append(_LayerSlices(w, b, scale, shift, fan_in, width))
        fan_in = width
    out_w = take("w_out", fan_in * arch.num_classes)
    out_b = take("b_out", arch.num_classes)
    return ParamLayout(tuple(hidden), out_w, out_b, pos, tuple(names))


def norm_affine_mask(arch: Architecture) -> np.ndarray:
    """Boolean mask selecting only normalization scale/shift parameters."""
    layout = layout_for(arch)
    mask = np.zeros(layout.size, dtype=bool)
    for layer in layout.hidden:
        if layer.scale is not None:
            mask[layer.scale] = True
            mask[layer.shift] = True
    return mask


def full_mask(arch: Architecture) -> np.ndarray:
    return np.ones(layout_for(arch).size, dtype=bool)


@dataclass
class Batch:
    """One step's worth of stream data.

    Labels are evaluation-only; the harness strips them before handing the
    batch to an adapter.
    """

    features: np.ndarray
    labels: Optional[np.ndarray]
    step_index: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ShapeError(f"features must be [batch, dim] with batch >= 1, got {self.features.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.features.shape[0],):
                raise ShapeError("labels must be one integer per row")

    @property
    def size(self) -> int:
        return self.features.shape[0]

    def without_labels(self) -> "Batch":
        return Batch(self.features, None, self.step_index)


@dataclass
class ProbOutput:
    """Softmax probabilities plus the argmax class and its probability."""

    probs: np.ndarray
    predicted_class: np.ndarray
    confidence: np.ndarray

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> "ProbOutput":
        pred = np.argmax(probs, axis=1)
        conf = probs[np.arange(probs.shape[0]), pred]
        return cls(probs=probs, predicted_class=pred, confidence=conf)


@dataclass
class ModelState:
    """Flat current parameters, the frozen source snapshot, and norm stats.

    `theta_pre` and `source_stats` never change after `train_source`
    returns; reset policies read them to restore plasticity.
    """

    arch: Architecture
    theta_t: np.ndarray
    theta_pre: np.ndarray
    norm_stats: list[tuple[np.ndarray, np.ndarray]]
    source_stats: list[tuple[np.ndarray, np.ndarray]]
    mode: str = "train-stats"
    stats_momentum: float = STATS_MOMENTUM

    def copy(self) -> "ModelState":
        return ModelState(
            arch=self.arch,
            theta_t=self.theta_t.copy(),
            theta_pre=self.theta_pre.copy(),
            norm_stats=[(m.copy(), v.copy()) for m, v in self.norm_stats],
            source_stats=[(m.copy(), v.copy()) for m, v in self.source_stats],
            mode=self.mode,
            stats_momentum=self.stats_momentum,
        )

    def restore_source_stats(self) -> None:
        self.norm_stats = [(m.copy(), v.copy()) for m, v in self.source_stats]


def _snap_f32(x: np.ndarray) -> np.ndarray:
    # float64 values exactly representable in binary32: lossless checkpoint round trip
    return x.astype(np.float32).astype(np.float64)


def init_model(arch: Architecture, seed: int) -> ModelState:
    """Seeded init: W ~ U(+-1/sqrt(fan_in)), biases/shift 0, scale 1, stats (0, 1)."""
    layout = layout_for(arch)
    rng = np.random.default_rng(seed)
    theta = np.zeros(layout.size, dtype=np.float64)
    for layer in layout.hidden:
        bound = 1.0 / np.sqrt(layer.fan_in)
        theta[layer.w] = rng.uniform(-bound, bound, layer.fan_in * layer.fan_out)
        if layer.scale is not None:
            theta[layer.scale] = 1.0
    fan_in = arch.hidden_widths[-1] if arch.hidden_widths else arch.input_dim
    bound = 1.0 / np.sqrt(fan_in)
    theta[layout.out_w] = rng.uniform(-bound, bound, fan_in * arch.num_classes)
    theta = _snap_f32(theta)
    stats = [
        (np.zeros(w, dtype=np.float64), np.ones(w, dtype=np.float64))
        for w, flag in zip(arch.hidden_widths, arch.norm_after_hidden)
        if flag
    ]
    return ModelState(
        arch=arch,
        theta_t=theta,
        theta_pre=theta.copy(),
        norm_stats=[(m.copy(), v.copy()) for m, v in stats],
        source_stats=stats,
    )


def _check_features(arch: Architecture, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise ShapeError(f"expected features [batch, {arch.input_dim}], got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InputError("non-finite feature values")
    return x


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class _ForwardCache:
    __slots__ = ("inputs", "xhat", "inv_std", "acts", "probs", "batch_stats")

    def __init__(self):
        self.inputs: list[np.ndarray] = []
        self.xhat: list[Optional[np.ndarray]] = []
        self.inv_std: list[Optional[np.ndarray]] = []
        self.acts: list[np.ndarray] = []
        self.batch_stats: list[Optional[tuple[np.ndarray, np.ndarray]]] = []
        self.probs: Optional[np.ndarray] = None


def _forward_pass(model: ModelState, x: np.ndarray, update_stats: bool, momentum: Optional[float] = None) -> _ForwardCache:
    """Single pass; fills the cache needed by `_backward_pass`.

    In frozen-stats mode with update_stats, running stats are updated layer
    by layer before normalizing, so later layers see inputs produced under
    the new statistics (momentum 1.0 therefore reproduces a batch-stats
    pass, which is what the stats-replacement adapter relies on).
    """
    layout = layout_for(model.arch)
    theta = model.theta_t
    m = model.stats_momentum if momentum is None else momentum
    batch_mode = model.mode == "train-stats"
    cache = _ForwardCache()
    a = x
    norm_idx = 0
    for layer in layout.hidden:
        cache.inputs.append(a)
        w = theta[layer.w].reshape(layer.fan_in, layer.fan_out)
        z = a @ w + theta[layer.b]
        if layer.scale is not None:
            if batch_mode or update_stats:
                mu_b = z.mean(axis=0)
                centered = z - mu_b
                var_b = (centered * centered).mean(axis=0)
                cache.batch_stats.append((mu_b, var_b))
            else:
                centered = None
                cache.batch_stats.append(None)
            if update_stats:
                run_m, run_v = model.norm_stats[norm_idx]
                new_m = (1.0 - m) * run_m + m * mu_b
                new_v = np.maximum((1.0 - m) * run_v + m * var_b, VAR_FLOOR)
                model.norm_stats[norm_idx] = (new_m, new_v)
            if batch_mode:
                mu, var = mu_b, var_b
            else:
                mu, var = model.norm_stats[norm_idx]
            inv_std = 1.0 / np.sqrt(var + NORM_EPS)
            if batch_mode and centered is not None:
                xhat = centered * inv_std
            else:
                xhat = (z - mu) * inv_std
            h = theta[layer.scale] * xhat + theta[layer.shift]
            cache.xhat.append(xhat)
            cache.inv_std.append(inv_std)
            norm_idx += 1
        else:
            h = z
            cache.xhat.append(None)
            cache.inv_std.append(None)
            cache.batch_stats.append(None)
        a = np.tanh(h)
        cache.acts.append(a)
    cache.inputs.append(a)
    w_out = theta[layout.out_w].reshape(-1, model.arch.num_classes)
    logits = a @ w_out + theta[layout.out_b]
    cache.probs = _softmax(logits)
    return cache


def forward(model: ModelState, batch: Batch, update_stats: bool = False) -> ProbOutput:
    """Softmax probabilities for a batch.

    With update_stats=False this is referentially transparent: it never
    mutates the model. With update_stats=True, running norm statistics are
    updated from the batch with the model's stats momentum.
    """
    x = _check_features(model.arch, batch.features)
    cache = _forward_pass(model, x, update_stats=update_stats)
    return ProbOutput.from_probs(cache.probs)


def update_norm_stats(model: ModelState, features: np.ndarray, momentum: Optional[float] = None) -> Optional[_ForwardCache]:
    """Pull running norm statistics toward this batch's statistics.

    momentum=1.0 replaces them outright (batch-stats adaptation). Returns
    the forward cache of the pass, which already reflects the updated
    statistics, so a following loss evaluation on the same batch can reuse
    it instead of re-running the forward.
    """
    x = _check_features(model.arch, features)
    if model.arch.num_norm_layers == 0:
        return None
    saved_mode = model.mode
    model.mode = "frozen-stats"
    try:
        return _forward_pass(model, x, update_stats=True, momentum=momentum)
    finally:
        model.mode = saved_mode


def _backward_pass(model: ModelState, cache: _ForwardCache, dlogits: np.ndarray) -> np.ndarray:
    """Exact gradient of a scalar loss wrt the flat parameter vector.

    dlogits must already include any 1/batch weighting. Handles both
    normalization modes: batch statistics contribute the usual three-term
    correction, frozen statistics act as a fixed affine map.
    """
    layout = layout_for(model.arch)
    theta = model.theta_t
    batch_mode = model.mode == "train-stats"
    grad = np.zeros_like(theta)
    a_last = cache.inputs[-1]
    w_out = theta[layout.out_w].reshape(-1, model.arch.num_classes)
    grad[layout.out_w] = (a_last.T @ dlogits).ravel()
    grad[layout.out_b] = dlogits.sum(axis=0)
    da = dlogits @ w_out.T
    norm_idx = model.arch.num_norm_layers
    for i in range(len(layout.hidden) - 1, -1, -1):
        layer = layout.hidden[i]
        act = cache.acts[i]
        dh = da * (1.0 - act * act)
        if layer.scale is not None:
            norm_idx -= 1
            xhat = cache.xhat[i]
            inv_std = cache.inv_std[i]
            grad[layer.scale] = (dh * xhat).sum(axis=0)
            grad[layer.shift] = dh.sum(axis=0)
            dxhat = dh * theta[layer.scale]
            if batch_mode:
                n = dh.shape[0]
                dz = (inv_std / n) * (
                    n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
                )
            else:
                dz = dxhat * inv_std
        else:
            dz = dh
        a_in = cache.inputs[i]
        grad[layer.w] = (a_in.T @ dz).ravel()
        grad[layer.b] = dz.sum(axis=0)
        da = dz @ theta[layer.w].reshape(layer.fan_in, layer.fan_out).T
    return grad


def entropy_and_grad(
    model: ModelState,
    batch: Batch,
    trainable_mask: np.ndarray,
    sample_weights: Optional[np.ndarray] = None,
    reuse_cache: Optional[_ForwardCache] = None,
) -> tuple[float, np.ndarray]:
    """Mean prediction entropy and its exact gradient, zeroed outside the mask.

    With `sample_weights` the loss is sum_i w_i * H_i (weights treated as
    constants, not differentiated through); the default is uniform 1/batch,
    i.e. the mean entropy. Logs are clamped at 1e-12, which leaves gradients
    untouched away from saturation. Normalization follows `model.mode`; the
    model is never mutated. `reuse_cache` accepts a forward cache already
    computed for this exact (model, batch) state and skips the forward.
    """
    x = _check_features(model.arch, batch.features)
    if batch.size < 1:
        raise ContractError("empty batch")
    mask = np.asarray(trainable_mask, dtype=bool)
    if mask.shape != model.theta_t.shape:
        raise ContractError(f"mask length {mask.shape} != parameter count {model.theta_t.shape}")
    cache = reuse_cache if reuse_cache is not None else _forward_pass(model, x, update_stats=False)
    p = cache.probs
    logp = np.log(np.maximum(p, LOG_CLAMP))
    ent = -(p * logp).sum(axis=1)
    if sample_weights is None:
        w = np.full(batch.size, 1.0 / batch.size)
    else:
        w = np.asarray(sample_weights, dtype=np.float64)
        if w.shape != (batch.size,):
            raise ContractError("one weight per sample required")
    loss = float(w @ ent)
    dlogits = -(w[:, None] * p) * (logp + ent[:, None])
    grad = _backward_pass(model, cache, dlogits)
    grad[~mask] = 0.0
    return loss, grad


def cross_entropy_and_grad(model: ModelState, batch: Batch, trainable_mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy against batch labels with its exact gradient."""
    if batch.labels is None:
        raise ContractError("cross entropy needs labels")
    x = _check_features(model.arch, batch.features)
    mask = np.asarray(trainable_mask, dtype=bool)
    if mask.shape != model.theta_t.shape:
        raise ContractError("mask length != parameter count")
    cache = _forward_pass(model, x, update_stats=False)
    p = cache.probs
    n = batch.size
    idx = np.arange(n)
    loss = float(-np.log(np.maximum(p[idx, batch.labels], LOG_CLAMP)).mean())
    dlogits = p.copy()
    dlogits[idx, batch.labels] -= 1.0
    dlogits /= n
    grad = _backward_pass(model, cache, dlogits)
    grad[~mask] = 0.0
    return loss, grad


def sgd_step(model: ModelState, grad: np.ndarray, lr: float) -> ModelState:
    """theta_t <- theta_t - lr * grad; theta_pre is untouched."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != model.theta_t.shape:
        raise ContractError("gradient length != parameter count")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient")
    model.theta_t = model.theta_t - lr * grad
    return model


def weight_l2_norm(model: ModelState) -> float:
    return float(np.linalg.norm(model.theta_t))


def classification_accuracy(model: ModelState, features: np.ndarray, labels: np.ndarray) -> float:
    out = forward(model, Batch(features, labels), update_stats=False)
    return float(np.mean(out.predicted_class == np.asarray(labels)))


def train_source(
    arch: Architecture,
    features: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    seed: int,
    lr: float = 0.05,
    batch_size: int = 64,
) -> ModelState:
    """Supervised pre-training on the clean source distribution.

    Plain mini-batch SGD on cross-entropy with the learning rate decayed
    x0.1 at 2/3 of the epochs; batch-stats normalization throughout. The
    running statistics are then re-estimated in one full-batch pass at the
    final weights (so they describe the returned model, not a momentum
    average over stale ones). On return the model is in frozen-stats mode,
    theta_pre is frozen equal to theta_t, and the statistics are
    snapshotted as the source stats.
    """
    x = _check_features(arch, features)
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise ContractError("source data must be non-empty")
    if y.shape != (x.shape[0],):
        raise ShapeError("labels must be one integer per sample")
    if y.min() < 0 or y.max() >= arch.num_classes:
        raise ContractError("labels out of range")

    model = init_model(arch, seed)
    model.mode = "train-stats"
    mask = full_mask(arch)
    shuffle_rng = np.random.default_rng(seed)
    n = x.shape[0]
    decay_at = int(np.ceil(epochs * 2 / 3))
    step = 0
    for epoch in range(epochs):
        cur_lr = lr * (0.1 if epoch >= decay_at else 1.0)
        order = shuffle_rng.permutation(n)
        for start in range(0, n, batch_size):
            rows = order[start : start + batch_size]
            batch = Batch(x[rows], y[rows], step_index=step)
            cache = _forward_pass(model, batch.features, update_stats=True)
            p = cache.probs
            idx = np.arange(len(rows))
            loss = float(-np.log(np.maximum(p[idx, batch.labels], LOG_CLAMP)).mean())
            if not np.isfinite(loss):
                raise TrainingError(f"training diverged at step {step}", step=step)
            dlogits = p.copy()
            dlogits[idx, batch.labels] -= 1.0
            dlogits /= len(rows)
            grad = _backward_pass(model, cache, dlogits)
            grad[~mask] = 0.0
            sgd_step(model, grad, cur_lr)
            step += 1

    model.theta_t = _snap_f32(model.theta_t)
    model.theta_pre = model.theta_t.copy()
    if arch.num_norm_layers:
        model.mode = "frozen-stats"
        _forward_pass(model, x, update_stats=True, momentum=1.0)
    model.norm_stats = [(_snap_f32(m), np.maximum(_snap_f32(v), VAR_FLOOR)) for m, v in model.norm_stats]
    model.source_stats = [(m.copy(), v.copy()) for m, v in model.norm_stats]
    model.mode = "frozen-stats"
    return model
