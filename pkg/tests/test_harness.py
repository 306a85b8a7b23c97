from __future__ import annotations

import numpy as np
import pytest

import driftlab as dl
from driftlab.errors import ConfigError, ContractError, NumericError
from driftlab.harness import run_experiment, paired_gap, sweep, train_source_model, windowed_mean

from conftest import small_run_doc


def run_doc(doc, model=None):
    cfg = dl.run_config_from_document(doc)
    return run_experiment(cfg, model)


@pytest.fixture(scope="module")
def shared_source():
    cfg = dl.run_config_from_document(small_run_doc())
    return cfg, train_source_model(cfg)


class TestRunExperiment:
    def test_frozen_adapter_matches_frozen_source_accuracy(self, shared_source):
        # nothing adapts: accuracy trace equals evaluating the frozen source model
        _, model = shared_source
        doc = small_run_doc(policy={"kind": "no-reset"})
        doc["adapter"] = {"lr": 0.0, "update_norm_stats": False}
        record = run_doc(doc, model.copy())
        cfg = dl.run_config_from_document(doc)
        stream = dl.StreamState(cfg.build_schedule(), cfg.build_sampler(), cfg.stream_section["seed"])
        expected = []
        frozen = model.copy()
        while not stream.done:
            batch = stream.sample_batch(cfg.stream_section["batch_size"])
            out = dl.forward(frozen, batch, update_stats=False)
            expected.append(float(np.mean(out.predicted_class == batch.labels)))
        assert np.array_equal(record.accuracy, np.array(expected))

    def test_fixed_interval_triggers_exactly_at_multiples(self, shared_source):
        _, model = shared_source
        doc = small_run_doc(policy={"kind": "fixed-interval", "T": 100, "reinit_mode": "full-restore"})
        record = run_doc(doc, model.copy())
        fired_steps = record.step[record.triggered]
        expected = np.arange(100, len(record) + 1, 100)
        assert np.array_equal(fired_steps, expected)

    def test_no_reset_never_triggers(self, shared_source):
        _, model = shared_source
        record = run_doc(small_run_doc(policy={"kind": "no-reset"}), model.copy())
        assert record.num_triggers == 0

    def test_bit_identical_records_for_equal_config(self, shared_source):
        _, model = shared_source
        doc = small_run_doc(policy={"kind": "asr"})
        a = run_doc(doc, model.copy())
        b = run_doc(doc, model.copy())
        assert np.array_equal(a.accuracy, b.accuracy)
        assert np.array_equal(a.lf_smoothed, b.lf_smoothed)
        assert np.array_equal(a.triggered, b.triggered)
        assert np.array_equal(a.weight_norm, b.weight_norm)

    def test_trigger_count_equals_event_count(self, shared_source):
        _, model = shared_source
        doc = small_run_doc(policy={"kind": "random-interval", "interval_range": [40, 80],
                                    "reinit_mode": "full-restore"})
        record = run_doc(doc, model.copy())
        assert record.num_triggers == len(record.events) > 0

    def test_random_interval_within_bounds(self, shared_source):
        _, model = shared_source
        doc = small_run_doc(policy={"kind": "random-interval", "interval_range": [40, 80],
                                    "reinit_mode": "full-restore"})
        record = run_doc(doc, model.copy())
        steps = [e["step"] for e in record.events]
        gaps = np.diff([0] + steps)
        assert np.all((gaps >= 40) & (gaps <= 80))

    def test_full_restore_returns_theta_to_pre_bit_exact(self, shared_source):
        _, model = shared_source
        m = model.copy()
        m.theta_t = m.theta_t + 0.25
        dl.flip.apply_reinit(m, "full-restore", dl.ShrinkRestoreConfig(0.2, 0.75))
        assert np.array_equal(m.theta_t, m.theta_pre)

    def test_architecture_mismatch_rejected(self, shared_source):
        _, model = shared_source
        doc = small_run_doc()
        doc["architecture"]["hidden_widths"] = [9, 9]
        with pytest.raises(ConfigError):
            run_doc(doc, model.copy())

    def test_numeric_failure_flushes_partial_record(self, shared_source, monkeypatch):
        _, model = shared_source
        doc = small_run_doc(policy={"kind": "no-reset"})
        calls = {"n": 0}
        original = dl.adapters.Adapter.step

        def exploding(self, model_, batch_):
            calls["n"] += 1
            if calls["n"] == 8:
                raise NumericError("boom", step=batch_.step_index)
            return original(self, model_, batch_)

        monkeypatch.setattr(dl.adapters.Adapter, "step", exploding)
        with pytest.raises(NumericError) as info:
            run_doc(doc, model.copy())
        assert info.value.step == 8
        assert len(info.value.partial_record) == 7

    def test_adapters_never_see_labels(self, shared_source, monkeypatch):
        _, model = shared_source
        seen = []
        original = dl.adapters.Adapter.step

        def spy(self, m, batch):
            seen.append(batch.labels)
            return original(self, m, batch)

        monkeypatch.setattr(dl.adapters.Adapter, "step", spy)
        run_doc(small_run_doc(policy={"kind": "no-reset"}), model.copy())
        assert seen and all(l is None for l in seen)


class TestWindowedHelpers:
    def test_windowed_mean_partial_tail_kept(self):
        vals = np.arange(10.0)
        out = windowed_mean(vals, 4)
        assert np.allclose(out, [1.5, 5.5, 8.5])

    def test_gap_with_itself_is_zero(self, shared_source):
        _, model = shared_source
        record = run_doc(small_run_doc(policy={"kind": "no-reset"}), model.copy())
        assert np.all(paired_gap(record, record, 50) == 0.0)

    def test_full_length_window_is_overall_mean_difference(self, shared_source):
        _, model = shared_source
        a = run_doc(small_run_doc(policy={"kind": "no-reset"}), model.copy())
        b = run_doc(small_run_doc(policy={"kind": "fixed-interval", "T": 100,
                                          "reinit_mode": "full-restore"}), model.copy())
        gap = paired_gap(a, b, len(a))
        assert gap.shape == (1,)
        assert abs(gap[0] - (a.mean_accuracy - b.mean_accuracy)) < 1e-12

    def test_length_mismatch_rejected(self, shared_source):
        _, model = shared_source
        doc_short = small_run_doc(policy={"kind": "no-reset"})
        doc_short["stream"]["segments"] = doc_short["stream"]["segments"][:2]
        a = run_doc(small_run_doc(policy={"kind": "no-reset"}), model.copy())
        b = run_doc(doc_short, model.copy())
        with pytest.raises(ContractError):
            paired_gap(a, b, 50)


class TestSweep:
    def test_single_cell_matches_run_experiment(self, shared_source):
        cfg, model = shared_source
        doc = small_run_doc(policy={"kind": "fixed-interval", "T": 120, "reinit_mode": "full-restore"})
        cells = sweep(doc, {"policy.T": [120]})
        assert len(cells) == 1 and cells[0].status == "ok"
        direct = run_doc(doc)
        assert cells[0].mean_accuracy == direct.mean_accuracy

    def test_invalid_cell_reported_not_raised(self):
        doc = small_run_doc(policy={"kind": "asr"})
        cells = sweep(doc, {"shrink_restore.lam": [0.2, 0.5]})  # 0.5 + 0.75 >= 1
        assert [c.status for c in cells] == ["ok", "config-error"]
        assert "shrink_restore" in cells[1].message

    def test_threaded_equals_sequential(self):
        doc = small_run_doc(policy={"kind": "fixed-interval", "T": 150, "reinit_mode": "full-restore"})
        grid = {"policy.T": [80, 160], "adapter.lr": [0.01, 0.03]}
        seq = sweep(doc, grid, threads=1)
        par = sweep(doc, grid, threads=2)
        assert [(c.params, c.mean_accuracy) for c in seq] == [(c.params, c.mean_accuracy) for c in par]

    def test_grid_order_is_sorted_cartesian(self):
        from driftlab.harness import _grid_cells
        out = _grid_cells({"b.x": [1, 2], "a.y": [3]})
        assert out == [{"a.y": 3, "b.x": 1}, {"a.y": 3, "b.x": 2}]
