from __future__ import annotations

import numpy as np
import pytest

import driftlab as dl
from driftlab.errors import ConfigError, ContractError
from driftlab.flip import FlipTrace, TraceSnapshot, apply_reinit
from driftlab.model import ProbOutput


def probs_out(rows):
    return ProbOutput.from_probs(np.asarray(rows, dtype=np.float64))


class BruteForceTrigger:
    """Independent scalar re-implementation of the smoothing/minimum/trigger rules.

    Recomputes everything from the raw history each step: the EMA by
    rerunning the recurrence from the epoch start, the minimum by a linear
    scan, the window mean by a left-to-right sum. Used as the oracle for
    the incremental implementation.
    """

    def __init__(self, beta, pi, k, burn_in):
        self.beta = beta
        self.pi = pi
        self.k = k
        self.burn_in = burn_in
        self.history: list[float] = []
        self.armed = False

    def _smoothed_series(self):
        out = []
        for i, v in enumerate(self.history):
            out.append(v if i == 0 else self.beta * out[-1] + (1.0 - self.beta) * v)
        return out

    def step(self, lf: float) -> bool:
        self.history.append(float(lf))
        series = self._smoothed_series()
        lowest = min(series)
        min_index = series.index(lowest)
        lo = min_index - self.k
        if lo < 0:
            lo = 0
        hi = min_index + self.k + 1
        if hi > len(series):
            hi = len(series)
        total = 0.0
        for v in series[lo:hi]:
            total += v
        min_estimate = total / (hi - lo)
        if not self.armed and len(self.history) >= self.burn_in and series[-1] > lowest:
            self.armed = True
        fired = self.armed and series[-1] > self.pi * min_estimate
        if fired:
            self.history = []
            self.armed = False
        return fired


class TestLabelFlipScore:
    def test_no_flip_gives_zero(self):
        before = probs_out([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1]])
        after = probs_out([[0.6, 0.3, 0.1], [0.2, 0.7, 0.1]])
        assert dl.label_flip_score(before, after) == 0.0

    def test_single_flip_hand_value(self):
        # after confidence 0.9 in class 1, before gave class 1 probability 0.3
        before = probs_out([[0.7, 0.3]])
        after = probs_out([[0.1, 0.9]])
        assert abs(dl.label_flip_score(before, after) - 0.9 * (0.9 - 0.3)) < 1e-12
        assert abs(dl.label_flip_score(before, after) - 0.54) < 1e-12

    def test_additivity_of_contributions(self):
        # 0.54 from sample one, 0.9*(0.9-0.7667...) adjusted to yield 0.12
        before = probs_out([[0.7, 0.3], [0.6, 0.4]])
        after = probs_out([[0.1, 0.9], [0.4, 0.6]])
        expected = 0.9 * (0.9 - 0.3) + 0.6 * (0.6 - 0.4)
        assert abs(dl.label_flip_score(before, after) - expected) < 1e-12
        assert abs(expected - 0.66) < 1e-12

    def test_negative_contributions_not_clamped(self):
        # flip to a class that lost probability mass contributes negatively
        before = probs_out([[0.42, 0.41, 0.17]])
        after = probs_out([[0.30, 0.40, 0.30]])
        expected = 0.40 * (0.40 - 0.41)
        assert abs(dl.label_flip_score(before, after) - expected) < 1e-12
        assert dl.label_flip_score(before, after) < 0.0

    def test_batch_size_mismatch_rejected(self):
        with pytest.raises(ContractError):
            dl.label_flip_score(probs_out([[0.5, 0.5]]), probs_out([[0.5, 0.5], [0.5, 0.5]]))


class TestEmaUpdate:
    def test_hand_arithmetic(self):
        trace = FlipTrace(raw=[10.0], smoothed=[10.0], steps_since_reinit=1)
        dl.ema_update(trace, 20.0, dl.FlipConfig(beta=0.8))
        assert abs(trace.smoothed[-1] - 12.0) < 1e-12

    def test_beta_zero_tracks_input_exactly(self):
        trace = FlipTrace()
        cfg = dl.FlipConfig(beta=0.0)
        for v in (3.0, 7.5, 1.25):
            dl.ema_update(trace, v, cfg)
            assert trace.smoothed[-1] == v

    def test_constant_input_is_fixed_point(self):
        trace = FlipTrace()
        cfg = dl.FlipConfig(beta=0.8)
        for _ in range(50):
            dl.ema_update(trace, 4.25, cfg)
        assert all(s == 4.25 for s in trace.smoothed)

    def test_first_value_seeds_ema(self):
        trace = FlipTrace()
        dl.ema_update(trace, 17.0, dl.FlipConfig(beta=0.8))
        assert trace.smoothed == [17.0]


class TestUpdateMin:
    def cfg(self, k=1, burn_in=1):
        return dl.FlipConfig(beta=0.8, pi=1.2, neighborhood_radius=k, burn_in=burn_in)

    def make_trace(self, smoothed):
        return FlipTrace(raw=list(smoothed), smoothed=list(smoothed), steps_since_reinit=len(smoothed))

    def test_window_mean_hand_value(self):
        trace = self.make_trace([5.0, 3.0, 4.0])
        dl.update_min(trace, self.cfg(k=1))
        assert trace.min_index == 1
        assert abs(trace.min_estimate - 4.0) < 1e-12

    def test_k_zero_min_is_exact_minimum(self):
        trace = self.make_trace([5.0, 3.0, 4.0, 3.5])
        dl.update_min(trace, self.cfg(k=0))
        assert trace.min_estimate == 3.0

    def test_strictly_decreasing_never_arms(self):
        trace = FlipTrace()
        cfg = self.cfg(k=1, burn_in=2)
        for v in (5.0, 4.0, 3.0, 2.0, 1.0):
            dl.ema_update(trace, v, dl.FlipConfig(beta=0.0))
            dl.update_min(trace, cfg)
        assert trace.min_index == len(trace.smoothed) - 1
        assert not trace.armed

    def test_arms_after_burn_in_once_minimum_passed(self):
        trace = FlipTrace()
        cfg = self.cfg(k=0, burn_in=3)
        for v in (5.0, 1.0, 2.0):
            dl.ema_update(trace, v, dl.FlipConfig(beta=0.0))
            dl.update_min(trace, cfg)
        assert trace.armed

    def test_first_occurrence_wins_ties(self):
        trace = self.make_trace([4.0, 2.0, 2.0, 3.0])
        dl.update_min(trace, self.cfg(k=0))
        assert trace.min_index == 1

    def test_empty_trace_rejected(self):
        with pytest.raises(ContractError):
            dl.update_min(FlipTrace(), self.cfg())


class TestShouldTrigger:
    def test_fires_above_pi_times_min(self):
        trace = FlipTrace(raw=[6.5], smoothed=[6.5], min_estimate=5.0, min_index=0, armed=True, steps_since_reinit=10)
        assert dl.should_trigger(trace, dl.FlipConfig(pi=1.2))

    def test_holds_at_or_below_pi_times_min(self):
        trace = FlipTrace(raw=[5.5], smoothed=[5.5], min_estimate=5.0, min_index=0, armed=True, steps_since_reinit=10)
        assert not dl.should_trigger(trace, dl.FlipConfig(pi=1.2))

    def test_unarmed_never_fires(self):
        trace = FlipTrace(raw=[100.0], smoothed=[100.0], min_estimate=0.1, min_index=0, armed=False, steps_since_reinit=10)
        assert not dl.should_trigger(trace, dl.FlipConfig(pi=1.2))


class TestShrinkRestore:
    def cfg(self, lam=0.2, gamma=0.75):
        return dl.ShrinkRestoreConfig(lam=lam, gamma=gamma)

    def test_paper_coefficients_hand_value(self):
        out = dl.shrink_restore(np.array([1.0, -2.0]), np.array([0.0, 4.0]), self.cfg())
        assert np.allclose(out, [0.2, 2.6], atol=1e-12)

    def test_equal_vectors_scale_by_lam_plus_gamma(self):
        v = np.array([2.0, -1.0, 0.5])
        out = dl.shrink_restore(v, v, self.cfg())
        assert np.allclose(out, 0.95 * v, atol=1e-12)

    def test_iteration_converges_to_affine_fixed_point(self):
        pre = np.array([1.0, -3.0, 2.0])
        theta = np.array([50.0, 80.0, -40.0])
        cfg = self.cfg()
        for _ in range(400):
            theta = dl.shrink_restore(theta, pre, cfg)
        assert np.allclose(theta, (0.75 / 0.8) * pre, atol=1e-9)
        assert abs(0.75 / 0.8 - 0.9375) < 1e-15

    def test_norm_bound_triangle_inequality(self, rng):
        cfg = self.cfg()
        for _ in range(25):
            a = rng.normal(size=40)
            b = rng.normal(size=40)
            out = dl.shrink_restore(a, b, cfg)
            assert np.linalg.norm(out) <= 0.2 * np.linalg.norm(a) + 0.75 * np.linalg.norm(b) + 1e-12

    def test_lam_plus_gamma_must_be_below_one(self):
        with pytest.raises(ConfigError):
            dl.ShrinkRestoreConfig(lam=0.3, gamma=0.7)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ContractError):
            dl.shrink_restore(np.zeros(3), np.zeros(4), self.cfg())


class TestAsrStep:
    def run_scalar_sequence(self, lf_values, flip_cfg):
        """Feed a synthetic scalar LF sequence through the policy machinery."""
        trace = FlipTrace()
        fired_steps = []
        for i, lf in enumerate(lf_values):
            dl.ema_update(trace, lf, flip_cfg)
            dl.update_min(trace, flip_cfg)
            if dl.should_trigger(trace, flip_cfg):
                fired_steps.append(i)
                trace.clear()
        return fired_steps

    def test_descent_then_jump_fires_at_first_exceedance(self):
        # scalar oracle: simulate the recurrence directly, no model needed.
        # descend 100 -> 10, let the EMA settle at 10, then jump above pi*Min;
        # k=0 makes Min the exact trajectory minimum, so the 1% margin clears it
        flip_cfg = dl.FlipConfig(beta=0.8, pi=1.2, neighborhood_radius=0, burn_in=50)
        descent = list(np.linspace(100.0, 10.0, 120)) + [10.0] * 80
        jump = [10.0 * 1.2 * 1.01] * 60
        fired = self.run_scalar_sequence(descent + jump, flip_cfg)
        oracle = BruteForceTrigger(0.8, 1.2, 0, 50)
        expected = [i for i, lf in enumerate(descent + jump) if oracle.step(lf)]
        assert fired == expected
        assert fired and fired[0] >= len(descent)  # fires post-jump, not during descent

    def test_monotone_decreasing_never_fires(self):
        flip_cfg = dl.FlipConfig(beta=0.8, pi=1.2, neighborhood_radius=2, burn_in=5)
        fired = self.run_scalar_sequence(list(np.linspace(50.0, 1.0, 400)), flip_cfg)
        assert fired == []

    def test_trigger_overwrites_theta_with_shrink_restore(self, tiny_arch, rng):
        model = dl.init_model(tiny_arch, 0)
        model.theta_t = model.theta_t + rng.normal(size=model.theta_t.shape)
        model.norm_stats[0][0][:] = 9.0  # perturb stats away from source
        pre_trigger_theta = model.theta_t.copy()
        flip_cfg = dl.FlipConfig(beta=0.0, pi=1.1, neighborhood_radius=0, burn_in=1)
        sr_cfg = dl.ShrinkRestoreConfig(0.2, 0.75)
        trace = FlipTrace()
        # descend then jump: second step arms, third fires
        before = probs_out([[1.0, 0.0, 0.0, 0.0]])
        after = probs_out([[1.0, 0.0, 0.0, 0.0]])
        seq = [5.0, 1.0, 50.0]
        fired_flags = []
        for lf in seq:
            # drive with synthetic lf by faking the flip: feed identical preds and
            # append the raw value directly through ema_update path
            dl.ema_update(trace, lf, flip_cfg)
            dl.update_min(trace, flip_cfg)
            fired = dl.should_trigger(trace, flip_cfg)
            fired_flags.append(fired)
            if fired:
                apply_reinit(model, "shrink-restore", sr_cfg)
                trace.clear()
        assert fired_flags == [False, False, True]
        expected = 0.2 * pre_trigger_theta + 0.75 * model.theta_pre
        assert np.array_equal(model.theta_t, expected)
        # stats restored to source snapshot
        for (m0, v0), (m1, v1) in zip(model.norm_stats, model.source_stats):
            assert np.array_equal(m0, m1) and np.array_equal(v0, v1)

    def test_asr_step_composition_scores_and_resets(self, tiny_arch):
        model = dl.init_model(tiny_arch, 1)
        flip_cfg = dl.FlipConfig(beta=0.0, pi=1.1, neighborhood_radius=0, burn_in=1)
        sr_cfg = dl.ShrinkRestoreConfig(0.2, 0.75)
        trace = FlipTrace()
        # three adapter steps with synthetic predictions: flip scores 2.25*, small, larger
        seqs = [
            (probs_out([[0.2, 0.8, 0.0, 0.0]]), probs_out([[0.9, 0.1, 0.0, 0.0]])),  # flip
            (probs_out([[0.9, 0.1, 0.0, 0.0]]), probs_out([[0.9, 0.1, 0.0, 0.0]])),  # none
            (probs_out([[0.3, 0.7, 0.0, 0.0]]), probs_out([[0.8, 0.2, 0.0, 0.0]])),  # flip, fires
        ]
        fired_seq = []
        for before, after in seqs:
            model, fired, snap = dl.asr_step(trace, model, before, after, flip_cfg, sr_cfg)
            fired_seq.append(fired)
            assert isinstance(snap, TraceSnapshot)
        assert fired_seq == [False, False, True]
        assert trace.raw == [] and not trace.armed

    def test_trigger_decisions_deterministic_in_lf_and_config(self, rng):
        flip_cfg = dl.FlipConfig(beta=0.8, pi=1.3, neighborhood_radius=3, burn_in=10)
        seq = list(np.abs(rng.normal(size=500)))
        assert self.run_scalar_sequence(seq, flip_cfg) == self.run_scalar_sequence(seq, flip_cfg)


class TestOracleAgreement:
    def random_sequence(self, rng):
        kind = rng.integers(0, 4)
        n = int(rng.integers(30, 400))
        if kind == 0:  # noisy descent then plateau
            base = np.concatenate([np.linspace(rng.uniform(5, 50), rng.uniform(0.1, 2), n // 2),
                                   np.full(n - n // 2, rng.uniform(0.1, 2))])
            return np.abs(base + rng.normal(0, rng.uniform(0.05, 2.0), n))
        if kind == 1:  # random walk
            return np.abs(np.cumsum(rng.normal(0, 1, n)) + rng.uniform(0, 10))
        if kind == 2:  # sparse spikes over near-zero baseline
            seq = np.zeros(n)
            spikes = rng.integers(0, n, max(1, n // 10))
            seq[spikes] = rng.uniform(0.5, 5.0, len(spikes))
            return seq
        return rng.uniform(0, 1, n)  # pure noise

    def test_incremental_matches_brute_force_on_1000_sequences(self):
        rng = np.random.default_rng(777)
        for case in range(1000):
            beta = float(rng.uniform(0.0, 0.99))
            pi = float(rng.uniform(1.01, 3.0))
            k = int(rng.integers(0, 8))
            burn_in = int(rng.integers(1, 40))
            flip_cfg = dl.FlipConfig(beta=beta, pi=pi, neighborhood_radius=k, burn_in=burn_in)
            seq = self.random_sequence(rng)
            oracle = BruteForceTrigger(beta, pi, k, burn_in)
            trace = FlipTrace()
            mine, theirs = [], []
            for i, lf in enumerate(seq):
                dl.ema_update(trace, float(lf), flip_cfg)
                dl.update_min(trace, flip_cfg)
                fired = dl.should_trigger(trace, flip_cfg)
                if fired:
                    trace.clear()
                mine.append(fired)
                theirs.append(oracle.step(float(lf)))
            assert mine == theirs, f"divergence in case {case}"
