from __future__ import annotations

import numpy as np
import pytest

import driftlab as dl


@pytest.fixture(scope="session")
def tiny_arch():
    return dl.Architecture(input_dim=6, hidden_widths=(7, 5), num_classes=4, norm_after_hidden=(True, False))


@pytest.fixture(scope="session")
def tiny_model(tiny_arch):
    return dl.init_model(tiny_arch, seed=3)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)


def small_run_doc(seed=0, policy=None, steps="short", **extra):
    """Raw config document for fast end-to-end runs (a few hundred steps)."""
    if steps == "short":
        segments = [
            {"kind": "gaussian-noise", "peak_severity": 2.0, "hold_steps": 120},
            {"kind": "mean-shift", "peak_severity": 3.0, "hold_steps": 120},
            {"kind": "plane-rotation", "peak_severity": 2.5, "hold_steps": 110},
        ]
        transition = 25
    else:
        segments = steps
        transition = extra.pop("transition_steps", 25)
    doc = {
        "seed": seed,
        "architecture": {"input_dim": 8, "hidden_widths": [12, 10], "num_classes": 3,
                         "norm_after_hidden": [True, True]},
        "source": {"num_samples": 600, "epochs": 8, "batch_size": 32, "lr": 0.05},
        "stream": {"segments": segments, "transition_steps": transition, "batch_size": 16},
        "adapter": {"lr": 0.02},
        "policy": policy or {"kind": "asr"},
        "flip": {"beta": 0.8, "pi": 1.5, "neighborhood_radius": 5, "burn_in": 20},
    }
    doc.update(extra)
    return doc
