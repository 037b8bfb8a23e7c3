import dataclasses
import math

import numpy as np
import pytest
import torch

from dept import harness
from dept.data import SyntheticDatasetSpec, generate_synthetic
from dept.encoders import ToyEncoderSpec, build_toy_bundle
from dept.errors import InvalidConfigError, MissingDataError
from dept.harness import TrainConfig

SMALL = SyntheticDatasetSpec(n_per_class=20, seed=1)


@pytest.fixture(scope="module")
def setup():
    return build_toy_bundle(ToyEncoderSpec(seed=1)), generate_synthetic(SMALL)


@pytest.mark.parametrize("b,n,h", [(81.50, 69.77, 75.18), (83.66, 71.82, 77.29),
                                   (84.21, 75.75, 79.76)])
def test_harmonic_mean_reference_rows(b, n, h):
    assert abs(harness.harmonic_mean(b, n) - h) <= 0.01


def test_harmonic_mean_edges():
    assert harness.harmonic_mean(0.0, 50.0) == 0.0
    assert harness.harmonic_mean(60.0, 60.0) == 60.0


def test_training_is_deterministic(setup):
    bundle, ds = setup
    cfg = TrainConfig(epochs=2, seed=3)
    a, b = harness.train(bundle, ds, cfg), harness.train(bundle, ds, cfg)
    assert a.loss_history == b.loss_history
    assert torch.equal(a.prompt.vectors, b.prompt.vectors)
    assert all(torch.equal(x, y) for x, y in zip(a.cat_params.tensors(), b.cat_params.tensors()))


def test_lambda_zero_matches_itm_only_trajectory(setup):
    bundle, ds = setup
    a = harness.train(bundle, ds, TrainConfig(lam=0.0, epochs=3, method="dept"), record_prompts=True)
    b = harness.train(bundle, ds, TrainConfig(epochs=3, method="itm_only"), record_prompts=True)
    ta, tb = a.metadata["prompt_trajectory"], b.metadata["prompt_trajectory"]
    assert len(ta) == len(tb) > 0
    assert all(torch.equal(x, y) for x, y in zip(ta, tb))


def test_encoder_frozen_and_loss_decreases(setup):
    bundle, ds = setup
    before = bundle.checksum()
    state = harness.train(bundle, ds, TrainConfig(epochs=6))
    assert bundle.checksum() == before == state.metadata["encoder_checksum"]
    means = state.epoch_means()
    assert len(means) == 6 and means[-1] < means[0]


def test_batches_cover_set_once_per_epoch():
    rng = np.random.default_rng(0)
    batches = harness._batches(20, 8, rng)
    assert [len(b) for b in batches] == [8, 8, 4]
    assert sorted(np.concatenate(batches).tolist()) == list(range(20))
    assert [b.tolist() for b in harness._batches(5, 8, rng)] == [[0, 1, 2, 3, 4]]


def test_report_fields(setup):
    bundle, ds = setup
    itm = harness.evaluate_base_to_new(
        harness.train(bundle, ds, TrainConfig(method="itm_only", epochs=1)), bundle, ds)
    assert "fusion" not in itm.to_dict() and itm.lam == 0.0
    dept = harness.evaluate_base_to_new(
        harness.train(bundle, ds, TrainConfig(method="dept", lam=0.7, epochs=1)), bundle, ds)
    d = dept.to_dict()
    assert d["lambda"] == 0.7 and d["fusion"]["lambda"] == 0.7
    assert set(d["fusion"]) == {"lambda", "base_acc_itm", "base_acc_cat"}
    assert d["harmonic"] == round(harness.harmonic_mean(d["base_acc"], d["new_acc"]), 2)
    assert len(d["per_class_acc"]) == 10


def test_argmax_ties_go_to_lowest_index():
    probs = torch.tensor([[0.4, 0.4, 0.2], [0.1, 0.45, 0.45]])
    assert harness._argmax(probs).tolist() == [0, 1]


def test_oracle_needs_new_training_data(setup):
    bundle, ds = setup
    bare = dataclasses.replace(ds, new_train=None)
    with pytest.raises(MissingDataError):
        harness.train(bundle, bare, TrainConfig(method="oracle", epochs=1))
    state = harness.train(bundle, ds, TrainConfig(method="oracle", epochs=1))
    assert state.cat_params is None


def test_config_validation():
    with pytest.raises(InvalidConfigError):
        TrainConfig(method="coop").validate()
    with pytest.raises(InvalidConfigError):
        TrainConfig(lam=1.5).validate()
    with pytest.raises(ValueError):
        TrainConfig(variant="v9").validate()
    with pytest.raises(InvalidConfigError):
        TrainConfig(shots=0).validate()
    cfg = TrainConfig(lam=0.3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_suite_aggregates_and_records_failures(setup):
    bundle, ds = setup
    base = TrainConfig(epochs=1, shots=4)
    grid = harness.sweep_grid("lambda", [0.0, 1.0], base, seeds=[0, 1])
    assert len(grid) == 2 * 2 + 2  # dept over both values, one itm_only baseline
    grid.append(dataclasses.replace(base, shots=999))
    suite = harness.run_experiment_suite(grid, bundle, ds)
    assert len(suite.failures) == 1 and "InsufficientDataError" in suite.failures[0].error
    rows = suite.sweep_table("lambda")
    dept_rows = [r for r in rows if r["method"] == "dept"]
    assert [r["lambda"] for r in dept_rows] == [0.0, 1.0]
    assert all(r["n_seeds"] == 2 for r in rows)
    by_hand = np.mean([r.report.new_acc for r in suite.runs
                       if r.report and r.config.method == "dept" and r.config.lam == 1.0])
    assert dept_rows[1]["new_acc"] == pytest.approx(by_hand)


def test_parallel_suite_matches_serial(setup):
    bundle, ds = setup
    grid = [TrainConfig(epochs=1, shots=4, seed=s) for s in range(2)]
    serial = harness.run_experiment_suite(grid, bundle, ds, jobs=1)
    parallel = harness.run_experiment_suite(grid, bundle, ds, jobs=2)
    assert [r.to_dict() for r in serial.reports] == [r.to_dict() for r in parallel.reports]


def test_sweep_values_and_empty_grid(setup):
    assert harness.default_sweep_values("lambda") == [round(0.1 * i, 1) for i in range(11)]
    with pytest.raises(InvalidConfigError):
        harness.default_sweep_values("lr")
    with pytest.raises(InvalidConfigError):
        harness.run_experiment_suite([], *setup)
    assert math.isnan(harness.mean_or_nan([]))
