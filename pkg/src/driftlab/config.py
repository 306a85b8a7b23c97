"""Run configuration: JSON documents, validation, defaults, echoes.

A config document is a nested JSON object. Loading rejects unknown keys,
materializes every default, and checks the cross-field constraints
(lam + gamma < 1, beta in [0, 1), pi > 1, ...), so the echoed document that
ends up in every output file is self-describing and re-runnable.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass

from .adapters import AdapterConfig
from .errors import ConfigError
from .flip import FlipConfig, ShrinkRestoreConfig
from .model import Architecture
from .policies import ResetPolicyConfig
from .stream import CORRUPTION_TAGS, SEVERITY_MAX, BlobSampler, DomainSchedule, build_schedule, make_sampler

SCHEMA_VERSION = 1
TOOL_VERSION = "0.1.0"

# Default drifting stream: 13 holds (4000 down to 2400 steps, so domain
# churn densifies late in the run) + 12 transitions of 550 steps = exactly
# 50,000 steps. Rotation segments alternate direction so an adapted state
# cannot carry over from one rotation domain to the next.
_DEFAULT_SEGMENTS = [
    {"kind": "gaussian-noise", "peak_severity": 3.5, "hold_steps": 4000},
    {"kind": "mean-shift", "peak_severity": 4.0, "hold_steps": 4000},
    {"kind": "plane-rotation", "peak_severity": 4.0, "hold_steps": 4000, "params": {"angle_per_severity": 0.3}},
    {"kind": "feature-scale", "peak_severity": 3.0, "hold_steps": 4000},
    {"kind": "gaussian-noise", "peak_severity": 4.5, "hold_steps": 4000},
    {"kind": "plane-rotation", "peak_severity": 4.0, "hold_steps": 4000, "params": {"angle_per_severity": -0.3}},
    {"kind": "mean-shift", "peak_severity": 4.5, "hold_steps": 3000},
    {"kind": "plane-rotation", "peak_severity": 4.5, "hold_steps": 3000, "params": {"angle_per_severity": 0.3}},
    {"kind": "gaussian-noise", "peak_severity": 5.0, "hold_steps": 3000},
    {"kind": "plane-rotation", "peak_severity": 4.5, "hold_steps": 3000, "params": {"angle_per_severity": -0.3}},
    {"kind": "mean-shift", "peak_severity": 5.0, "hold_steps": 2500},
    {"kind": "plane-rotation", "peak_severity": 4.5, "hold_steps": 2500, "params": {"angle_per_severity": 0.3}},
    {"kind": "gaussian-noise", "peak_severity": 4.5, "hold_steps": 2400},
]

_EATA_KEYS = ("entropy_threshold", "diversity_threshold", "anchor_weight", "prob_avg_momentum")


def default_document(seed: int = 0) -> dict:
    return validate_document(
        {
            "schema_version": SCHEMA_VERSION,
            "seed": seed,
            "architecture": {},
            "source": {},
            "stream": {},
            "adapter": {},
            "policy": {},
            "flip": {},
            "shrink_restore": {},
        }
    )


def _require_keys(section: dict, allowed: set, path: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {path}")


def _get(section: dict, key: str, default, types, path: str):
    value = section.get(key, default)
    if not isinstance(value, types) or isinstance(value, bool) and bool not in (
        types if isinstance(types, tuple) else (types,)
    ):
        raise ConfigError(f"{path}.{key} has wrong type")
    return value


def validate_document(doc: dict) -> dict:
    """Check a raw document and return the fully materialized echo."""
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    _require_keys(
        doc,
        {"schema_version", "seed", "architecture", "source", "stream", "adapter", "policy", "flip", "shrink_restore"},
        "config",
    )
    out: dict = {}
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")
    out["schema_version"] = SCHEMA_VERSION
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    out["seed"] = seed

    arch_in = doc.get("architecture", {}) or {}
    _require_keys(arch_in, {"input_dim", "hidden_widths", "num_classes", "norm_after_hidden"}, "architecture")
    input_dim = int(_get(arch_in, "input_dim", 16, int, "architecture"))
    hidden = list(arch_in.get("hidden_widths", [64, 64]))
    num_classes = int(_get(arch_in, "num_classes", 5, int, "architecture"))
    norm_flags = list(arch_in.get("norm_after_hidden", [True] * len(hidden)))
    arch = Architecture(input_dim, tuple(hidden), num_classes, tuple(norm_flags))  # validates
    out["architecture"] = {
        "input_dim": arch.input_dim,
        "hidden_widths": list(arch.hidden_widths),
        "num_classes": arch.num_classes,
        "norm_after_hidden": list(arch.norm_after_hidden),
    }

    src_in = doc.get("source", {}) or {}
    _require_keys(src_in, {"seed", "num_samples", "epochs", "batch_size", "lr"}, "source")
    out["source"] = {
        "seed": int(src_in.get("seed", seed + 2000)),
        "num_samples": int(_get(src_in, "num_samples", 4000, int, "source")),
        "epochs": int(_get(src_in, "epochs", 30, int, "source")),
        "batch_size": int(_get(src_in, "batch_size", 64, int, "source")),
        "lr": float(_get(src_in, "lr", 0.05, (int, float), "source")),
    }
    if out["source"]["num_samples"] < 1 or out["source"]["epochs"] < 0:
        raise ConfigError("source.num_samples must be >= 1 and source.epochs >= 0")
    if out["source"]["lr"] <= 0 or out["source"]["batch_size"] < 1:
        raise ConfigError("source.lr must be > 0 and source.batch_size >= 1")

    stream_in = doc.get("stream", {}) or {}
    _require_keys(
        stream_in,
        {"seed", "sampler_seed", "batch_size", "sigma", "separation", "transition_steps", "segments"},
        "stream",
    )
    segments = copy.deepcopy(stream_in.get("segments", _DEFAULT_SEGMENTS))
    if not isinstance(segments, list) or not segments:
        raise ConfigError("stream.segments must be a non-empty list")
    for i, seg in enumerate(segments):
        if not isinstance(seg, dict):
            raise ConfigError(f"stream.segments[{i}] must be an object")
        _require_keys(seg, {"kind", "peak_severity", "hold_steps", "params"}, f"stream.segments[{i}]")
        if seg.get("kind") not in CORRUPTION_TAGS:
            raise ConfigError(f"stream.segments[{i}].kind must be one of {CORRUPTION_TAGS}")
        sev = seg.get("peak_severity", None)
        if not isinstance(sev, (int, float)) or not 0 <= float(sev) <= SEVERITY_MAX:
            raise ConfigError(f"stream.segments[{i}].peak_severity must be in [0, {SEVERITY_MAX}]")
        seg["peak_severity"] = float(sev)
        hold = seg.get("hold_steps", None)
        if not isinstance(hold, int) or hold < 1:
            raise ConfigError(f"stream.segments[{i}].hold_steps must be an integer >= 1")
    out["stream"] = {
        "seed": int(stream_in.get("seed", seed + 1000)),
        "sampler_seed": int(stream_in.get("sampler_seed", seed + 3000)),
        "batch_size": int(_get(stream_in, "batch_size", 64, int, "stream")),
        "sigma": float(_get(stream_in, "sigma", 1.0, (int, float), "stream")),
        "separation": float(_get(stream_in, "separation", 6.0, (int, float), "stream")),
        "transition_steps": int(_get(stream_in, "transition_steps", 550, int, "stream")),
        "segments": segments,
    }
    if out["stream"]["batch_size"] < 1:
        raise ConfigError("stream.batch_size must be >= 1")
    if out["stream"]["sigma"] <= 0:
        raise ConfigError("stream.sigma must be > 0")
    if out["stream"]["separation"] <= 0:
        raise ConfigError("stream.separation must be > 0")
    if out["stream"]["transition_steps"] < 0:
        raise ConfigError("stream.transition_steps must be >= 0")

    adapter_in = doc.get("adapter", {}) or {}
    method = adapter_in.get("method", "tent")
    base_keys = {"method", "lr", "trainable_mask_policy", "update_norm_stats", "stats_momentum"}
    if method == "eata-lite":
        _require_keys(adapter_in, base_keys | set(_EATA_KEYS), "adapter")
    elif method == "bn-stats":
        _require_keys(adapter_in, {"method"}, "adapter")
    else:
        _require_keys(adapter_in, base_keys, "adapter")
    adapter_out = {"method": method}
    if method != "bn-stats":
        adapter_out.update(
            {
                "lr": float(_get(adapter_in, "lr", 0.05, (int, float), "adapter")),
                "trainable_mask_policy": adapter_in.get("trainable_mask_policy", "norm-affine-only"),
                "update_norm_stats": bool(adapter_in.get("update_norm_stats", True)),
                "stats_momentum": float(_get(adapter_in, "stats_momentum", 0.02, (int, float), "adapter")),
            }
        )
    if method == "eata-lite":
        adapter_out.update(
            {
                "entropy_threshold": float(
                    adapter_in.get("entropy_threshold", 0.4 * math.log(arch.num_classes))
                ),
                "diversity_threshold": float(adapter_in.get("diversity_threshold", 0.95)),
                "anchor_weight": float(adapter_in.get("anchor_weight", 2e-3)),
                "prob_avg_momentum": float(adapter_in.get("prob_avg_momentum", 0.9)),
            }
        )
    # constructing the runtime config performs the numeric validation
    _adapter_config(adapter_out)
    out["adapter"] = adapter_out

    policy_in = doc.get("policy", {}) or {}
    kind = policy_in.get("kind", "asr")
    if kind == "fixed-interval":
        _require_keys(policy_in, {"kind", "T", "reinit_mode"}, "policy")
        policy_out = {
            "kind": kind,
            "T": int(_get(policy_in, "T", 1000, int, "policy")),
            "reinit_mode": policy_in.get("reinit_mode", "full-restore"),
        }
    elif kind == "random-interval":
        _require_keys(policy_in, {"kind", "interval_range", "reinit_mode"}, "policy")
        rng = policy_in.get("interval_range", [500, 2000])
        if not (isinstance(rng, list) and len(rng) == 2 and all(isinstance(v, int) for v in rng)):
            raise ConfigError("policy.interval_range must be [lo, hi] integers")
        policy_out = {
            "kind": kind,
            "interval_range": rng,
            "reinit_mode": policy_in.get("reinit_mode", "full-restore"),
        }
    elif kind == "no-reset":
        _require_keys(policy_in, {"kind"}, "policy")
        policy_out = {"kind": kind}
    elif kind == "asr":
        _require_keys(policy_in, {"kind", "reinit_mode"}, "policy")
        policy_out = {"kind": kind, "reinit_mode": policy_in.get("reinit_mode", "shrink-restore")}
    else:
        raise ConfigError(f"unknown policy kind: {kind}")
    policy_config_from_section(policy_out)
    out["policy"] = policy_out

    flip_in = doc.get("flip", {}) or {}
    _require_keys(flip_in, {"beta", "pi", "neighborhood_radius", "burn_in"}, "flip")
    out["flip"] = {
        "beta": float(_get(flip_in, "beta", 0.8, (int, float), "flip")),
        "pi": float(_get(flip_in, "pi", 2.0, (int, float), "flip")),
        "neighborhood_radius": int(_get(flip_in, "neighborhood_radius", 75, int, "flip")),
        "burn_in": int(_get(flip_in, "burn_in", 250, int, "flip")),
    }
    FlipConfig(**out["flip"])

    sr_in = doc.get("shrink_restore", {}) or {}
    _require_keys(sr_in, {"lam", "gamma"}, "shrink_restore")
    out["shrink_restore"] = {
        "lam": float(_get(sr_in, "lam", 0.2, (int, float), "shrink_restore")),
        "gamma": float(_get(sr_in, "gamma", 0.75, (int, float), "shrink_restore")),
    }
    ShrinkRestoreConfig(**out["shrink_restore"])
    return out


def _adapter_config(section: dict) -> AdapterConfig:
    return AdapterConfig(**section)


def policy_config_from_section(section: dict) -> ResetPolicyConfig:
    kwargs = dict(section)
    if "interval_range" in kwargs:
        kwargs["interval_range"] = tuple(kwargs["interval_range"])
    return ResetPolicyConfig(**kwargs)


@dataclass(frozen=True)
class RunConfig:
    """Typed view of a validated document plus the echo itself."""

    echo: dict
    arch: Architecture
    adapter: AdapterConfig
    policy: ResetPolicyConfig
    flip: FlipConfig
    shrink_restore: ShrinkRestoreConfig

    @property
    def seed(self) -> int:
        return self.echo["seed"]

    @property
    def stream_section(self) -> dict:
        return self.echo["stream"]

    @property
    def source_section(self) -> dict:
        return self.echo["source"]

    def build_schedule(self) -> DomainSchedule:
        s = self.stream_section
        return build_schedule(s["segments"], s["transition_steps"], s["seed"], self.arch.input_dim)

    def build_sampler(self) -> BlobSampler:
        s = self.stream_section
        return make_sampler(
            self.arch.num_classes, self.arch.input_dim, s["separation"], s["sigma"], s["sampler_seed"]
        )


def run_config_from_document(doc: dict) -> RunConfig:
    echo = validate_document(doc)
    arch = Architecture(
        echo["architecture"]["input_dim"],
        tuple(echo["architecture"]["hidden_widths"]),
        echo["architecture"]["num_classes"],
        tuple(echo["architecture"]["norm_after_hidden"]),
    )
    return RunConfig(
        echo=echo,
        arch=arch,
        adapter=_adapter_config(echo["adapter"]),
        policy=policy_config_from_section(echo["policy"]),
        flip=FlipConfig(**echo["flip"]),
        shrink_restore=ShrinkRestoreConfig(**echo["shrink_restore"]),
    )


def load_config_file(path: str, seed_override: int | None = None) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e}")
    if seed_override is not None:
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        doc = copy.deepcopy(doc)
        doc["seed"] = seed_override
        # derived seeds follow the override unless pinned explicitly
        for section, key in (("source", "seed"), ("stream", "seed"), ("stream", "sampler_seed")):
            if section in doc and isinstance(doc[section], dict) and key in doc[section]:
                del doc[section][key]
    return run_config_from_document(doc)


def config_json(echo: dict) -> str:
    return json.dumps(echo, sort_keys=True, separators=(",", ":"))


def config_hash(echo: dict) -> str:
    return hashlib.sha256(config_json(echo).encode()).hexdigest()[:16]


def apply_override(doc: dict, dotted_key: str, value) -> dict:
    """Set a dotted-path key in a copy of the document (sweep cells)."""
    out = copy.deepcopy(doc)
    parts = dotted_key.split(".")
    node = out
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value
    return out
