from __future__ import annotations

import numpy as np
import pytest

import driftlab as dl
from driftlab.errors import ConfigError
from driftlab.policies import PolicyState, ResetPolicyConfig, replay_columns


class TestPolicyConfig:
    def test_fixed_interval_needs_positive_T(self):
        with pytest.raises(ConfigError):
            ResetPolicyConfig(kind="fixed-interval", T=0)

    def test_random_interval_needs_ordered_range(self):
        with pytest.raises(ConfigError):
            ResetPolicyConfig(kind="random-interval", interval_range=(10, 5))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            ResetPolicyConfig(kind="sometimes")


class TestDecide:
    def flip_cfg(self):
        return dl.FlipConfig(beta=0.5, pi=1.2, neighborhood_radius=1, burn_in=5)

    def test_no_reset_never_fires(self, rng):
        policy = PolicyState(ResetPolicyConfig(kind="no-reset"), self.flip_cfg(), seed=0)
        assert not any(policy.decide(float(v), i + 1)[0] for i, v in enumerate(rng.uniform(0, 9, 300)))

    def test_fixed_fires_on_exact_multiples(self, rng):
        policy = PolicyState(ResetPolicyConfig(kind="fixed-interval", T=25), self.flip_cfg(), seed=0)
        fired = [i + 1 for i, v in enumerate(rng.uniform(0, 9, 120)) if policy.decide(float(v), i + 1)[0]]
        assert fired == [25, 50, 75, 100]

    def test_trace_clears_after_any_reset(self, rng):
        policy = PolicyState(ResetPolicyConfig(kind="fixed-interval", T=10), self.flip_cfg(), seed=0)
        for i in range(10):
            policy.decide(float(rng.uniform()), i + 1)
        assert policy.trace.raw == [] and policy.trace.steps_since_reinit == 0

    def test_random_interval_redraws_deterministically(self, rng):
        cfg = ResetPolicyConfig(kind="random-interval", interval_range=(5, 15))
        values = rng.uniform(0, 3, 200)
        fired_a = [policy_fired for policy_fired in _drive(cfg, self.flip_cfg(), values, seed=4)]
        fired_b = [policy_fired for policy_fired in _drive(cfg, self.flip_cfg(), values, seed=4)]
        fired_c = [policy_fired for policy_fired in _drive(cfg, self.flip_cfg(), values, seed=5)]
        assert fired_a == fired_b
        assert fired_a != fired_c


def _drive(cfg, flip_cfg, values, seed):
    policy = PolicyState(cfg, flip_cfg, seed=seed)
    return [policy.decide(float(v), i + 1)[0] for i, v in enumerate(values)]


class TestReplayColumns:
    def test_replay_reproduces_asr_run_exactly(self, rng):
        flip_cfg = dl.FlipConfig(beta=0.8, pi=1.3, neighborhood_radius=2, burn_in=10)
        cfg = ResetPolicyConfig(kind="asr")
        values = list(np.abs(rng.normal(1.0, 0.8, 500)))
        policy = PolicyState(cfg, flip_cfg, seed=7)
        recorded = [policy.decide(v, i + 1) for i, v in enumerate(values)]
        smoothed, min_est, armed, triggered = replay_columns(values, cfg, flip_cfg, seed=7)
        assert smoothed == [s.lf_smoothed for _, s in recorded]
        assert min_est == [s.min_estimate for _, s in recorded]
        assert armed == [s.armed for _, s in recorded]
        assert triggered == [f for f, _ in recorded]

    def test_replay_reproduces_random_interval_run(self, rng):
        flip_cfg = dl.FlipConfig()
        cfg = ResetPolicyConfig(kind="random-interval", interval_range=(20, 60), reinit_mode="full-restore")
        values = list(np.abs(rng.normal(1.0, 0.5, 300)))
        policy = PolicyState(cfg, flip_cfg, seed=3)
        recorded = [policy.decide(v, i + 1)[0] for i, v in enumerate(values)]
        _, _, _, triggered = replay_columns(values, cfg, flip_cfg, seed=3)
        assert triggered == recorded
