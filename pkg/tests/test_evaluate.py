import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from crystal_pirnn.datagen import build_dataset
from crystal_pirnn.errors import DivergenceError, NumericError, ValidationError
from crystal_pirnn.evaluate import (StudyConfig, confidence_band, evaluate,
                                    integrated_abs_error, mse, noise_floor, parameter_log_mse,
                                    reevaluate_ode, run_study, study_cells)
from crystal_pirnn.model import PIRNN, ModelConfig
from crystal_pirnn.pbm import KineticParameters
from crystal_pirnn.train import EnsembleResult, TrainConfig, TrainedModel, TrainHistory

REF = KineticParameters.reference()
TINY_MODEL = ModelConfig(hidden=8, dropout=0.0, batchnorm=False, param_coordinates="centered")


@pytest.fixture(scope="module")
def clean_data():
    return build_dataset(10, seed=2, dt=5.0)


@pytest.fixture(scope="module")
def noisy_data():
    return build_dataset(10, noise_level=0.3, seed=2, dt=5.0)


def _member(ds, log_theta=None, seed=0):
    m = PIRNN(TINY_MODEL, seed=seed)
    if log_theta is not None:
        m.set_log_theta(log_theta)
    return TrainedModel(m, TrainHistory(), 0, 0.0, TrainConfig(), ds.scales.copy(), ds.T_scale)


# ------------------------------------------------------------------ mse

def test_mse_examples():
    a = np.random.default_rng(0).uniform(size=(7, 5))
    assert mse(a, a) == 0.0
    assert mse(a + 0.1, a) == pytest.approx(0.01)
    assert mse(np.array([0.0, 0.0]), np.array([3.0, 4.0])) == pytest.approx(12.5)


def test_mse_mask_and_errors():
    a, b = np.zeros((3, 5)), np.ones((3, 5))
    b[1] = 5.0
    m = np.zeros((3, 5), dtype=bool)
    m[[0, 2]] = True
    assert mse(a, b, m) == 1.0
    with pytest.raises(ValidationError):
        mse(a, b, np.zeros_like(m))
    with pytest.raises(ValidationError):
        mse(a, b[:2])


@settings(max_examples=60, deadline=None)
@given(arrays(float, (4, 5), elements=st.floats(-1e3, 1e3)),
       arrays(float, (4, 5), elements=st.floats(-1e3, 1e3)))
def test_mse_is_symmetric_and_non_negative(a, b):
    assert mse(a, b) == mse(b, a) >= 0.0


# ------------------------------------------------------------------ parameter metrics

def test_parameter_log_mse_examples():
    assert parameter_log_mse(REF) == 0.0
    v = REF.physical_vector().copy()
    v[2] *= math.e
    assert parameter_log_mse(v) == pytest.approx(1 / 6)
    with pytest.raises(ValidationError):
        parameter_log_mse(np.array([1.0, -1.0, 1, 1, 1, 1]))


@settings(max_examples=40, deadline=None)
@given(arrays(float, 6, elements=st.floats(-3, 3)))
def test_parameter_log_mse_matches_definition(d):
    v = REF.physical_vector() * np.exp(d)
    assert parameter_log_mse(v) == pytest.approx(np.mean(d * d), abs=1e-12)


# ------------------------------------------------------------------ bands and integrals

def test_identical_members_have_zero_band():
    p = np.random.default_rng(1).uniform(size=(6, 5))
    mean, lo, hi = confidence_band([p, p, p])
    np.testing.assert_array_equal(lo, hi)
    np.testing.assert_array_equal(mean, p)


def test_band_is_mean_plus_minus_1_96_std():
    a, b = np.zeros((2, 5)), np.full((2, 5), 2.0)
    mean, lo, hi = confidence_band([a, b])
    np.testing.assert_allclose(mean, 1.0)
    np.testing.assert_allclose(hi - mean, 1.96)
    np.testing.assert_allclose(mean - lo, 1.96)


def test_integrated_abs_error():
    t = np.linspace(0.0, 500.0, 11)
    a = np.zeros((11, 5))
    assert integrated_abs_error(a, a, t) == 0.0
    assert integrated_abs_error(a + 0.3, a, t) == pytest.approx(0.3)
    with pytest.raises(ValidationError):
        integrated_abs_error(a, a, t[:5])


def test_noise_floor(clean_data, noisy_data):
    assert noise_floor(clean_data.test, clean_data.scales) == 0.0
    nf = noise_floor(noisy_data.test, noisy_data.scales)
    assert 0 < nf < 1


# ------------------------------------------------------------------ ODE re-evaluation

def test_reference_parameters_reproduce_clean_runs(clean_data):
    for run in clean_data.test:
        traj = reevaluate_ode(REF, run)
        rel = np.abs(traj.states - run.clean) / np.maximum(np.abs(run.clean).max(axis=0), 1e-300)
        assert rel.max() < 1e-5


def test_reevaluation_accepts_trained_model(clean_data):
    tm = _member(clean_data, REF.log_vector())
    run = clean_data.test[0]
    np.testing.assert_allclose(reevaluate_ode(tm, run).states, reevaluate_ode(REF, run).states)


def test_zero_rates_give_constant_trajectory(clean_data):
    v = REF.physical_vector().copy()
    v[0] = v[3] = 1e-300  # kb2 and kg effectively zero
    params = KineticParameters.from_physical(*v)
    run = clean_data.test[0]
    traj = reevaluate_ode(params, run)
    np.testing.assert_allclose(traj.states, np.tile(run.clean[0], (len(run.t), 1)), rtol=1e-12)


def test_non_finite_parameters_rejected(clean_data):
    lv = REF.log_vector().copy()
    lv[1] = np.nan
    with pytest.raises(ValidationError):
        reevaluate_ode(KineticParameters.from_log_vector(lv), clean_data.test[0])


# ------------------------------------------------------------------ reports

def test_report_with_reference_parameters(clean_data):
    members = [_member(clean_data, REF.log_vector(), seed=s) for s in (0, 1)]
    rep = evaluate(members, clean_data, band_runs=1)
    assert rep.ode_mse_clean < 1e-10
    assert rep.ode_mse_obs == pytest.approx(rep.ode_mse_clean)
    assert rep.parameter_log_mse == pytest.approx(0.0, abs=1e-20)
    assert len(rep.parameter_table) == 6
    assert all(r["std"] == 0.0 for r in rep.parameter_table)
    assert rep.forward_mse_obs >= 0 and rep.forward_mse_clean >= 0
    assert rep.n_ode_failed == 0 and rep.noise_floor == 0.0
    assert len(rep.per_run) == len(clean_data.test)
    (band,) = rep.bands.values()
    lo, mid, hi = (np.array(band[k]) for k in ("lower", "mean", "upper"))
    assert np.all(lo <= mid) and np.all(mid <= hi) and np.any(hi > lo)  # distinct networks
    metrics = rep.metrics()
    assert {"forward_mse_obs", "ode_mse_clean", "param_kb2"} <= metrics.keys()


def test_diverging_runs_are_excluded_and_counted(clean_data, monkeypatch):
    import crystal_pirnn.evaluate as E

    calls = {"n": 0}
    real = E.reevaluate_ode

    def flaky(params, run, *a, **kw):
        calls["n"] += 1
        if calls["n"] == 1:
            raise DivergenceError("blow-up", 12.0, run.index)
        return real(params, run, *a, **kw)

    monkeypatch.setattr(E, "reevaluate_ode", flaky)
    rep = E.evaluate([_member(clean_data, REF.log_vector())], clean_data)
    assert rep.n_ode_failed == 1
    assert math.isnan(rep.per_run[0]["ode_mse_clean"])
    assert rep.ode_mse_clean < 1e-10


def test_report_serialisation(clean_data, tmp_path):
    rep = evaluate([_member(clean_data)], clean_data)
    data = json.loads(rep.to_json(tmp_path / "r.json").read_text())
    assert data["parameter_log_mse"] == rep.parameter_log_mse
    rows = list(csv.DictReader(rep.per_run_csv(tmp_path / "p.csv").open()))
    assert len(rows) == len(clean_data.test)


def test_evaluation_is_deterministic(clean_data):
    a = evaluate([_member(clean_data, seed=3)], clean_data)
    b = evaluate([_member(clean_data, seed=3)], clean_data)
    assert a.metrics() == b.metrics()


# ------------------------------------------------------------------ studies

def test_study_grids():
    sc = StudyConfig()
    assert len(study_cells("noise", sc)) == 4 * 5
    assert len(study_cells("lambda", sc)) == 7 * 5
    assert all(c.shift == 0.1 for c in study_cells("lambda", sc))
    sampling = study_cells("sampling", sc)
    assert {c.scheme for c in sampling} == {"p2", "p3", "p5", "p9"}
    assert max(c.lam for c in sampling) == 1e10
    assert all(c.n_train == 10 for c in sampling)
    with pytest.raises(ValidationError):
        study_cells("other", sc)
    with pytest.raises(ValidationError):
        StudyConfig(n_seeds=1)


def _fake_trainer(calls):
    def trainer(ds, cfg, n_seeds, model_cfg, consts, sol, jobs):
        calls.append(cfg.lambda_physics)
        if cfg.lambda_physics == 13.0:
            raise NumericError("synthetic failure")
        members = [_member(ds, REF.log_vector() if cfg.lambda_physics else None, seed=s)
                   for s in range(n_seeds)]
        for m in members:
            m.history.append(0, 0.1, 0.01, 0.2, 1e-3, 0.1, np.ones(6))
        return EnsembleResult(members, list(range(n_seeds)))
    return trainer


def test_study_is_resumable_and_complete(tmp_path):
    sc = StudyConfig(n_runs=10, dt=25.0, train_sizes=(3,), lambdas=(0.0, 1.0, 13.0), n_seeds=2)
    calls: list[float] = []
    summary = run_study("lambda", sc, TrainConfig(epochs=1), tmp_path,
                        trainer=_fake_trainer(calls))
    assert summary["n_cells"] == 3 and summary["completed"] == 2
    assert summary["failed"] == ["lambda=13/n=3"]
    rows = list(csv.DictReader((tmp_path / "results.csv").open()))
    assert set(rows[0]) == {"study", "cell", "metric", "value"}
    cells = {r["cell"] for r in rows}
    assert cells == {"lambda=0/n=3", "lambda=1/n=3", "lambda=13/n=3"}  # no silent gaps
    assert any(r["metric"] == "ode_reference_mse_obs" for r in rows)
    failed = json.loads((tmp_path / "cells" / "lambda-13__n-3.json").read_text())
    assert failed["status"] == "failed" and "synthetic" in failed["error"]
    calls.clear()
    run_study("lambda", sc, TrainConfig(epochs=1), tmp_path, trainer=_fake_trainer(calls))
    assert calls == [13.0]  # completed cells skipped, failed cell retried


def test_sampling_study_emits_loss_curves(tmp_path):
    sc = StudyConfig(n_runs=10, dt=25.0, schemes=("p2",), sampling_lambdas=(0.0, 1e4),
                     sampling_train_runs=3, n_seeds=2)
    run_study("sampling", sc, TrainConfig(epochs=1), tmp_path, trainer=_fake_trainer([]))
    metrics = {r["metric"] for r in csv.DictReader((tmp_path / "results.csv").open())}
    assert {"data_loss", "weighted_physics_loss", "mid_trajectory_iae",
            "parameter_log_mse"} <= metrics
