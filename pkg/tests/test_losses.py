import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crystal_pirnn.autodiff import Tensor, gradcheck
from crystal_pirnn.datagen import build_dataset
from crystal_pirnn.errors import ContractError, NumericError, ValidationError
from crystal_pirnn.losses import (LossConfig, data_loss, huber, noise_weight, physics_loss,
                                  physics_residual_array, smoothness_loss, total_loss)
from crystal_pirnn.pbm import KineticParameters, PhysicalConstants, SolubilityModel
from crystal_pirnn.train import prepare_run

CONSTS = PhysicalConstants()
REF = KineticParameters.reference()


@pytest.fixture(scope="module")
def fine_runs():
    ds = build_dataset(10, seed=1, dt=1.0)
    return ds, [prepare_run(r, ds.scales, ds.T_scale) for r in ds.train]


# ------------------------------------------------------------------ huber

def test_huber_examples():
    assert huber(0.05, 0.1) == pytest.approx(0.00125)
    assert huber(0.2, 0.1) == pytest.approx(0.015)
    assert huber(0.1, 0.1) == pytest.approx(0.5 * 0.1 ** 2)
    with pytest.raises(ValidationError):
        huber(0.1, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 1.0))
def test_huber_is_c1_at_threshold(delta):
    eps = 1e-9 * delta
    lo, hi = huber(delta - eps, delta), huber(delta + eps, delta)
    assert hi - lo == pytest.approx(2 * eps * delta, rel=1e-3)


def test_huber_tensor_matches_array():
    r = np.array([-0.3, -0.05, 0.0, 0.07, 0.4])
    np.testing.assert_allclose(huber(Tensor(r), 0.1).data, huber(r, 0.1))


# ------------------------------------------------------------------ smoothness

def test_smoothness_examples():
    assert smoothness_loss(Tensor(np.ones((6, 5)))).item() == 0.0
    k = np.arange(7.0)
    lin = np.tile(3.0 + 0.5 * k[:, None], (1, 5))
    assert smoothness_loss(Tensor(lin)).item() == pytest.approx(0.0, abs=1e-28)
    quad = (k ** 2)[:, None]
    assert smoothness_loss(Tensor(quad)).item() == pytest.approx(4.0)
    with pytest.raises(ContractError):
        smoothness_loss(Tensor(np.ones((2, 5))))


# ------------------------------------------------------------------ data loss

def test_noise_weight_at_default():
    assert noise_weight(0.1).item() == pytest.approx(0.4750, abs=5e-5)
    assert noise_weight(50.0).item() < 1e-20


def test_perfect_prediction_leaves_smoothness_only():
    rng = np.random.default_rng(0)
    obs = rng.uniform(size=(8, 5))
    pred = Tensor(obs.copy())
    loss = data_loss(pred, obs, np.ones_like(obs, dtype=bool), Tensor(np.array(0.1)))
    assert loss.item() == pytest.approx(smoothness_loss(Tensor(obs)).item(), rel=1e-15)


def test_large_eta_gives_huber_mixture():
    rng = np.random.default_rng(1)
    obs, pred = rng.uniform(size=(8, 5)), rng.uniform(size=(8, 5))
    m = np.ones_like(obs, dtype=bool)
    loss = data_loss(Tensor(pred), obs, m, 60.0, w_smooth=0.0).item()
    assert loss == pytest.approx(np.mean(huber(pred - obs, 0.1)), rel=1e-12)


def test_mask_hides_unobserved_entries():
    obs = np.zeros((6, 5))
    pred = np.zeros((6, 5))
    pred[2] = 10.0  # far off, but unobserved
    m = np.zeros_like(obs, dtype=bool)
    m[[0, -1]] = True
    loss = data_loss(Tensor(pred), obs, m, 0.1, w_smooth=0.0).item()
    assert loss == 0.0
    with pytest.raises(ContractError):
        data_loss(Tensor(pred), obs, np.zeros_like(m), 0.1)
    with pytest.raises(ContractError):
        data_loss(Tensor(pred[:5]), obs, m, 0.1)


def test_identical_pred_and_obs_are_mask_invariant():
    obs = np.random.default_rng(2).uniform(size=(7, 5))
    full = data_loss(Tensor(obs), obs, np.ones_like(obs, dtype=bool), 0.1).item()
    m = np.zeros_like(obs, dtype=bool)
    m[::3] = True
    assert data_loss(Tensor(obs), obs, m, 0.1).item() == full


def test_eta_gradient_nonzero_when_mse_differs_from_huber():
    rng = np.random.default_rng(3)
    obs, pred = rng.uniform(size=(8, 5)), rng.uniform(size=(8, 5))
    eta = Tensor(np.array(0.1), requires_grad=True)
    data_loss(Tensor(pred), obs, np.ones_like(obs, dtype=bool), eta).backward()
    assert abs(float(eta.grad)) > 0


def test_data_loss_gradcheck():
    rng = np.random.default_rng(4)
    obs = rng.uniform(size=(6, 5))
    m = rng.uniform(size=(6, 5)) < 0.7
    x = rng.uniform(size=(6, 5))
    # keep residuals away from the Huber kink
    x = np.where(np.abs(np.abs(x - obs) - 0.1) < 0.01, x + 0.05, x)
    err = gradcheck(lambda t: data_loss(t, obs, m, 0.3), x)
    assert err < 1e-4


# ------------------------------------------------------------------ physics

def test_exact_trajectory_has_tiny_residual(fine_runs):
    ds, runs = fine_runs
    for r in runs:
        loss = physics_loss(Tensor(r.clean), r.T_kelvin, REF, ds.scales, CONSTS, 1.0,
                            time_scale=500.0).item()
        assert loss < 1e-6


def test_constant_prediction_with_no_drive_is_zero():
    pred = Tensor(np.full((9, 5), 0.5))
    # a concentration far below solubility: S < 1, every rate clamps to zero
    scales = np.array([1e6, 1e5, 1e4, 1e3, 0.1])
    loss = physics_loss(pred, np.full(9, 320.0), REF, scales, CONSTS, 5.0, time_scale=500.0)
    assert loss.item() == 0.0


def test_lambda_is_linear():
    d, p = Tensor(np.array(2.0)), Tensor(np.array(3.0))
    t0, t1, t2 = (total_loss(d, p, lam).item() for lam in (0.0, 1.0, 2.0))
    assert t2 - t0 == pytest.approx(2 * (t1 - t0))
    assert total_loss(2.0, 3.0, 10.0) == 32.0
    assert total_loss(2.0, 0.0, 1.0) == 2.0
    with pytest.raises(ValidationError):
        total_loss(1.0, 1.0, -1.0)


def test_time_scale_multiplies_residual():
    rng = np.random.default_rng(5)
    pred = rng.uniform(0.1, 1.0, size=(8, 5))
    T = np.linspace(310.0, 290.0, 8)
    scales = np.array([3e7, 1e6, 6e4, 7e3, 0.5])
    a = physics_residual_array(pred, T, REF, scales, CONSTS, 5.0, time_scale=1.0)
    b = physics_residual_array(pred, T, REF, scales, CONSTS, 5.0, time_scale=500.0)
    np.testing.assert_allclose(b, 500.0 * a, rtol=1e-12)


def test_array_residual_matches_graph_residual():
    rng = np.random.default_rng(6)
    pred = rng.uniform(0.1, 1.0, size=(10, 5))
    T = np.linspace(315.0, 280.0, 10)
    scales = np.array([3e7, 1e6, 6e4, 7e3, 0.5])
    arr = physics_residual_array(pred, T, REF, scales, CONSTS, 5.0, time_scale=500.0)
    graph = physics_loss(Tensor(pred), T, REF, scales, CONSTS, 5.0, time_scale=500.0).item()
    assert np.mean(arr ** 2) == pytest.approx(graph, rel=1e-12)


def test_normalisation_equivariance():
    rng = np.random.default_rng(7)
    pred = rng.uniform(0.1, 1.0, size=(10, 5))
    T = np.linspace(315.0, 280.0, 10)
    scales = np.array([3e7, 1e6, 6e4, 7e3, 0.5])
    base = physics_residual_array(pred, T, REF, scales, CONSTS, 5.0)
    for i in range(5):
        s2, p2 = scales.copy(), pred.copy()
        s2[i] *= 3.0
        p2[:, i] /= 3.0
        res = physics_residual_array(p2, T, REF, s2, CONSTS, 5.0)
        np.testing.assert_allclose(res[:, i] * 3.0, base[:, i], rtol=1e-10)


def test_non_finite_rate_names_step_and_component():
    pred = np.full((5, 5), 0.5)
    pred[2, 0] = np.inf
    with pytest.raises(NumericError, match="step 2"):
        physics_loss(Tensor(pred), np.full(5, 300.0), REF, np.ones(5) * [1e6, 1e5, 1e4, 1e3, 1.0],
                     CONSTS, 5.0)


def test_physics_loss_needs_three_steps():
    with pytest.raises(ContractError):
        physics_loss(Tensor(np.ones((2, 5))), np.full(2, 300.0), REF, np.ones(5), CONSTS, 1.0)
    with pytest.raises(ContractError):
        physics_loss(Tensor(np.ones((4, 5))), np.full(3, 300.0), REF, np.ones(5), CONSTS, 1.0)


def test_physics_loss_gradcheck_wrt_log_parameters(fine_runs):
    ds, runs = fine_runs
    rng = np.random.default_rng(8)
    for r in runs[:3]:
        pred = Tensor(r.clean[::5])
        T = r.T_kelvin[::5]
        for _ in range(3):
            # moderate perturbations: far from the reference the loss reaches 1e7
            # and central differences can no longer resolve the small components
            lv = REF.log_vector() + rng.normal(scale=0.1, size=6)
            err = gradcheck(lambda t: physics_loss(pred, T, t, ds.scales, CONSTS, 5.0,
                                                   time_scale=500.0), lv)
            assert err < 1e-4


def test_physics_loss_gradcheck_wrt_prediction():
    rng = np.random.default_rng(9)
    x = rng.uniform(0.2, 1.0, size=(6, 5))
    x[:, 4] = np.linspace(0.95, 0.7, 6)  # supersaturated throughout
    T = np.linspace(310.0, 290.0, 6)
    scales = np.array([3e7, 1e6, 6e4, 7e3, 0.5])
    err = gradcheck(lambda t: physics_loss(t, T, REF, scales, CONSTS, 5.0, time_scale=500.0), x)
    assert err < 1e-4


def test_unshifted_default_solubility():
    rng = np.random.default_rng(10)
    pred = Tensor(rng.uniform(0.2, 1.0, size=(6, 5)))
    T = np.linspace(310.0, 290.0, 6)
    scales = np.array([3e7, 1e6, 6e4, 7e3, 0.5])
    a = physics_loss(pred, T, REF, scales, CONSTS, 5.0).item()
    b = physics_loss(pred, T, REF, scales, CONSTS, 5.0, SolubilityModel()).item()
    c = physics_loss(pred, T, REF, scales, CONSTS, 5.0, SolubilityModel().shifted(0.1)).item()
    assert a == b != c


def test_loss_config_validation():
    assert LossConfig().huber_delta == 0.1
    with pytest.raises(ValidationError):
        LossConfig(huber_delta=0.0)
    with pytest.raises(ValidationError):
        LossConfig(dt=0.0)
    with pytest.raises(ValidationError):
        LossConfig(lambda_physics=-1.0)
