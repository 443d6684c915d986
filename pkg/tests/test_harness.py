import csv

import numpy as np
import pytest

import netobserve.harness as harness
from netobserve.harness import (ExperimentConfig, build_constraints, compare_methods, generate_truth, load_config,
                                optimal_masks, run_sweep, selection_probabilities, sensor_count, stream,
                                write_probabilities_csv)
from netobserve.integrators import DiscreteModel, StepFailure
from netobserve.models import ModelConfigError, bundled_model_path
from netobserve.selection import JacobianObjective, SelectionConstraints, SensorMask, select_exhaustive, select_greedy


def bundled(name):
    return str(bundled_model_path(name))


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------------------
# truths and configuration

def test_generate_truth_laws(h2o2):
    for seed in range(20):
        x = generate_truth(h2o2, "one_plus_uniform", seed)
        assert np.all((x > 1) & (x < 2))
        u = generate_truth(h2o2, "uniform01", seed)
        assert np.all((u > 0) & (u < 1))
    assert not np.array_equal(generate_truth(h2o2, "uniform01", 0), generate_truth(h2o2, "uniform01", 1))
    np.testing.assert_array_equal(generate_truth(h2o2, "uniform01", 5), generate_truth(h2o2, "uniform01", 5))
    with pytest.raises(ValueError):
        generate_truth(h2o2, "normal", 0)


def test_streams_are_independent_of_key_order():
    a = stream(3, 1, 0).random(4)
    b = stream(3, 0, 1).random(4)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, stream(3, 1, 0).random(4))


def test_sensor_count():
    assert sensor_count(1.0, 9) == 9
    assert sensor_count(0.3, 9) == 3
    assert sensor_count(0.05, 9) == 1
    assert sensor_count(0.5, 5) == 3


def test_config_validation():
    with pytest.raises(ModelConfigError):
        ExperimentConfig(model="hill5", N=())
    with pytest.raises(ModelConfigError):
        ExperimentConfig(model="hill5", realizations=0)
    with pytest.raises(ModelConfigError):
        ExperimentConfig(model="hill5", f=(0.0,))
    with pytest.raises(ModelConfigError):
        ExperimentConfig(model="hill5", solver="nomad")
    with pytest.raises(ModelConfigError):
        ExperimentConfig(model="hill5", init_law="normal")


def test_config_hash_ignores_output_and_workers():
    a = ExperimentConfig(model="hill5", out="x", workers=1)
    b = ExperimentConfig(model="hill5", out="y", workers=4)
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != ExperimentConfig(model="hill5", seed=1).config_hash()


def test_load_config(tmp_path):
    (tmp_path / "m.toml").write_text(open(bundled("hill5")).read())
    p = tmp_path / "exp.toml"
    p.write_text('model = "m.toml"\nN = [20, 40]\nf = [0.4]\nseed = 9\n')
    cfg = load_config(p, seed=11)
    assert cfg.model == str(tmp_path / "m.toml")
    assert cfg.N == (20, 40) and cfg.seed == 11
    p.write_text('model = "hill5"\ncolour = "red"\n')
    with pytest.raises(ModelConfigError):
        load_config(p)


def test_constraints_cover_root_components(h2o2):
    cfg = ExperimentConfig(model="h2o2_mini")
    cons = build_constraints(h2o2, 3, cfg)
    assert len(cons.cover) == 1
    ar = h2o2.node_names.index("AR")
    assert ar not in cons.cover[0]
    blind = build_constraints(h2o2, 3, ExperimentConfig(model="h2o2_mini", oid_blind=True))
    assert blind.cover == ()
    forced = build_constraints(h2o2, 1, ExperimentConfig(model="h2o2_mini", forced=("AR", "H2")))
    assert forced.r == 2 and forced.forced == {ar, h2o2.node_names.index("H2")}
    with pytest.raises(ModelConfigError):
        build_constraints(h2o2, 2, ExperimentConfig(model="h2o2_mini", forced=("XX",)))


# ---------------------------------------------------------------------------
# sweeps

def test_full_observation_same_model_sweep(tmp_path):
    cfg = ExperimentConfig(model=bundled("h2o2_mini"), N=(50,), f=(1.0,), same_model_data=True,
                           out=str(tmp_path))
    (rec,) = run_sweep(cfg)
    assert rec.eta < 1e-8 and rec.converged and rec.failure == ""
    rows = read_rows(tmp_path / "sweep.csv")
    assert rows[0] == harness.SWEEP_COLUMNS and len(rows) == 2


@pytest.mark.slow
def test_error_decreases_with_horizon():
    cfg = ExperimentConfig(model=bundled("cd_toy"), N=(25, 50, 100), f=(0.3,), realizations=10, seed=0)
    recs = run_sweep(cfg, write=False)
    med = [np.median([r.eta for r in recs if r.N == N]) for N in cfg.N]
    assert med[0] >= med[1] >= med[2]


def _strip_timing(path):
    rows = read_rows(path)
    k = rows[0].index("wall_time")
    return [r[:k] + r[k + 1:] for r in rows]


def test_sweep_determinism_serial_and_parallel(tmp_path):
    base = dict(model=bundled("hill5"), N=(15, 30), f=(0.4, 1.0), realizations=2, seed=4, solver="stochastic",
                budget=20)
    run_sweep(ExperimentConfig(out=str(tmp_path / "a"), **base))
    run_sweep(ExperimentConfig(out=str(tmp_path / "b"), **base))
    run_sweep(ExperimentConfig(out=str(tmp_path / "c"), workers=2, **base))
    a = _strip_timing(tmp_path / "a" / "sweep.csv")
    assert a == _strip_timing(tmp_path / "b" / "sweep.csv")
    assert a == _strip_timing(tmp_path / "c" / "sweep.csv")
    assert len(a) == 1 + 2 * 2 * 2


def test_failures_are_tagged_and_sweep_continues(monkeypatch):
    real = harness.make_data

    def flaky(model, dm, x_true, N, same_model):
        if N == 10:
            raise StepFailure("Newton diverged", 1.0, 2)
        return real(model, dm, x_true, N, same_model)

    monkeypatch.setattr(harness, "make_data", flaky)
    recs = run_sweep(ExperimentConfig(model=bundled("hill5"), N=(10, 20), f=(1.0,)), write=False)
    assert [r.failure for r in recs] == ["StepFailure", ""]
    assert np.isnan(recs[0].eta) and np.isfinite(recs[1].eta)


def test_truth_and_guess_are_paired_across_cells(monkeypatch):
    seen = {}
    real = harness.estimate_with_mask

    def spy(model, dm, states, mask, x_true, x_guess, max_iter):
        seen.setdefault(float(x_true[0]), set()).add(tuple(x_guess))
        return real(model, dm, states, mask, x_true, x_guess, max_iter)

    monkeypatch.setattr(harness, "estimate_with_mask", spy)
    cfg = ExperimentConfig(model=bundled("hill5"), N=(10, 20), f=(0.4, 1.0), realizations=2, seed=1)
    run_sweep(cfg, write=False)
    # one truth per realization, each always paired with the same guess
    assert len(seen) == 2
    assert all(len(guesses) == 1 for guesses in seen.values())


# ---------------------------------------------------------------------------
# method comparison

def test_compare_methods_tiny_instance(tmp_path, hill5):
    cfg = ExperimentConfig(model=bundled("hill5"), N=(15,), f=(0.4,), seed=1, out=str(tmp_path))
    # precondition: greedy is optimal on this instance (exhaustive oracle)
    x_true = generate_truth(hill5, "uniform01", stream(1, 0, harness._TRUTH))
    obj = JacobianObjective(DiscreteModel(hill5, "irk", hill5.meta["recommended_h"]), x_true, 15)
    cons = SelectionConstraints(5, 2)
    assert select_greedy(obj, cons).mask == select_exhaustive(obj, cons).mask
    rows = compare_methods(cfg)
    by_method = {res.method: res for *_, res in rows}
    assert by_method[3].mask == by_method[4].mask == select_exhaustive(obj, cons).mask
    sims = {m: by_method[m].simulations for m in (1, 2, 3)}
    assert sims[3] < sims[1] < sims[2]
    assert sims[3] == 1 and sims[1] == 2 * 5 and sims[2] == 2 * 5 * 2 * 4
    csv_rows = read_rows(tmp_path / "compare.csv")
    header = csv_rows[0]
    assert header == harness.COMPARE_COLUMNS
    m3 = [r for r in csv_rows[1:] if r[header.index("method")] == "3"][0]
    assert float(m3[header.index("log_eta_minus_m3")]) == 0.0


def test_compare_rejects_unknown_method():
    with pytest.raises(ModelConfigError):
        compare_methods(ExperimentConfig(model=bundled("hill5")), methods=(5,), write=False)


# ---------------------------------------------------------------------------
# selection frequencies

def test_selection_probability_examples():
    forced = SensorMask.from_nodes([0], 3)
    other = SensorMask.from_nodes([0, 2], 3)
    probs = selection_probabilities({0.3: [forced], 0.6: [other]})
    assert probs[0] == 1.0
    assert probs[1] == 0.0
    assert probs[2] == 0.5
    # within one f the masks are averaged first
    probs = selection_probabilities({0.3: [[1, 0, 0], [0, 1, 0]], 0.6: [[1, 1, 1]]})
    np.testing.assert_allclose(probs, [0.75, 0.75, 0.5])
    with pytest.raises(ValueError):
        selection_probabilities({})
    with pytest.raises(ValueError):
        selection_probabilities({0.3: []})


def test_optimal_masks_and_probabilities_csv(tmp_path, h2o2):
    cfg = ExperimentConfig(model=bundled("h2o2_mini"), N=(20,), f=(0.3, 0.6), realizations=2, solver="greedy",
                           forced=("AR",))
    masks = optimal_masks(cfg)
    assert set(masks) == {0.3, 0.6}
    ar = h2o2.node_names.index("AR")
    probs = selection_probabilities(masks)
    assert probs[ar] == 1.0
    write_probabilities_csv(h2o2.node_names, probs, tmp_path / "p.csv")
    rows = read_rows(tmp_path / "p.csv")
    assert rows[0] == ["node", "probability"] and len(rows) == 10
