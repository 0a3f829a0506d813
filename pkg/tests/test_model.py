import numpy as np
import pytest

from crystal_pirnn import autodiff as ad
from crystal_pirnn.autodiff import Tensor
from crystal_pirnn.errors import NumericError, ParseError, ShapeError, ValidationError, VersionError
from crystal_pirnn.model import (WEIGHT_NAMES, ModelConfig, PIRNN, forward_rollout,
                                 forward_rollout_reference, load_checkpoint, lstm_cell,
                                 save_checkpoint)
from crystal_pirnn.pbm import KineticParameters

RNG = np.random.default_rng(99)


def _inputs(n=12):
    x0 = np.array([0.0, 0.0, 0.0, 0.001, 0.83])
    T = np.concatenate([np.full(n // 3, 0.9), np.linspace(0.9, 0.0, n - n // 3)])
    return x0, T


# ------------------------------------------------------------------ config

def test_defaults_match_table():
    c = ModelConfig()
    assert (c.input_dim, c.output_dim, c.hidden, c.layers, c.dropout, c.batchnorm) == \
        (6, 5, 64, 2, 0.2, True)


@pytest.mark.parametrize("kw", [dict(dropout=1.0), dict(hidden=0), dict(layers=3),
                                dict(activation="relu"), dict(param_coordinates="polar")])
def test_invalid_config(kw):
    with pytest.raises(ValidationError):
        ModelConfig(**kw)


# ------------------------------------------------------------------ cell

def test_zero_cell_is_zero():
    H = 3
    h, c = lstm_cell(np.ones(4), np.zeros(H), np.zeros(H), np.zeros((4 * H, 4)),
                     np.zeros((4 * H, H)), np.zeros(4 * H))
    assert np.all(h.data == 0) and np.all(c.data == 0)


def test_saturated_forget_gate_keeps_cell():
    H = 2
    b = np.zeros(4 * H)
    b[0:H] = -1e3  # input gate closed
    b[H:2 * H] = 1e3  # forget gate open
    c_prev = np.array([0.3, -0.7])
    _, c = lstm_cell(np.ones(3), np.zeros(H), c_prev, np.zeros((4 * H, 3)), np.zeros((4 * H, H)), b)
    np.testing.assert_allclose(c.data, c_prev)


def test_cell_matches_hand_unrolled_step():
    H, D = 4, 3
    Wx, Wh, b = RNG.normal(size=(4 * H, D)), RNG.normal(size=(4 * H, H)), RNG.normal(size=4 * H)
    x, h0, c0 = RNG.normal(size=D), RNG.normal(size=H), RNG.normal(size=H)
    z = Wx @ x + Wh @ h0 + b
    sig = lambda v: 1 / (1 + np.exp(-v))
    i, f, g, o = sig(z[:H]), sig(z[H:2 * H]), np.tanh(z[2 * H:3 * H]), sig(z[3 * H:])
    c = f * c0 + i * g
    h = o * np.tanh(c)
    hh, cc = lstm_cell(x, h0, c0, Wx, Wh, b)
    np.testing.assert_allclose(hh.data, h, rtol=1e-13)
    np.testing.assert_allclose(cc.data, c, rtol=1e-13)


def test_cell_shape_mismatch():
    with pytest.raises(ShapeError):
        lstm_cell(np.ones(5), np.zeros(2), np.zeros(2), np.zeros((8, 4)), np.zeros((8, 2)),
                  np.zeros(8))


# ------------------------------------------------------------------ rollout

def test_output_shape_and_initial_row():
    m = PIRNN(seed=1)
    x0, T = _inputs(500)
    out = forward_rollout(m, x0, T, "eval").data
    assert out.shape == (500, 5)
    np.testing.assert_array_equal(out[0], x0)


def test_softplus_positivity_over_random_weights():
    x0, T = _inputs(20)
    for s in range(100):
        m = PIRNN(ModelConfig(hidden=8), seed=s)
        for t in m.weights.values():
            t.data = t.data * 3.0
        assert forward_rollout(m, x0, T, "eval").data.min() >= 0.0


def test_eval_is_deterministic():
    m = PIRNN(seed=2)
    m.bn_mean, m.bn_var = RNG.normal(size=64) * 0.1, RNG.uniform(0.5, 2.0, size=64)
    x0, T = _inputs()
    a = forward_rollout(m, x0, T, "eval").data
    b = forward_rollout(m, x0, T, "eval").data
    np.testing.assert_array_equal(a, b)


def test_train_mode_stochasticity_follows_dropout():
    x0, T = _inputs()
    m = PIRNN(ModelConfig(dropout=0.2, batchnorm=False), seed=3)
    a = forward_rollout(m, x0, T, "train").data
    b = forward_rollout(m, x0, T, "train").data
    assert not np.array_equal(a, b)
    m0 = PIRNN(ModelConfig(dropout=0.0, batchnorm=False), seed=3)
    np.testing.assert_array_equal(forward_rollout(m0, x0, T, "train").data,
                                  forward_rollout(m0, x0, T, "train").data)


def test_running_statistics_only_move_in_train_mode():
    m = PIRNN(seed=4)
    x0, T = _inputs()
    before = m.bn_mean.copy()
    forward_rollout(m, x0, T, "eval")
    np.testing.assert_array_equal(m.bn_mean, before)
    forward_rollout(m, x0, T, "train")
    assert not np.array_equal(m.bn_mean, before)


def test_fused_rollout_matches_primitive_reference():
    m = PIRNN(ModelConfig(hidden=16), seed=5)
    m.bn_mean, m.bn_var = RNG.normal(size=16) * 0.1, RNG.uniform(0.5, 2.0, size=16)
    x0, T = _inputs(15)
    mask = (RNG.random((15, 16)) > 0.2) / 0.8
    fused = forward_rollout(m, x0, T, "eval", drop_mask=mask)
    ref = forward_rollout_reference(m, x0, T, drop_mask=mask)
    np.testing.assert_allclose(fused.data, ref.data, rtol=1e-12, atol=1e-14)
    g = RNG.normal(size=(15, 5))
    (fused * g).sum().backward()
    fused_grads = {k: m.weights[k].grad.copy() for k in WEIGHT_NAMES}
    m.zero_grad()
    (ref * g).sum().backward()
    for k in WEIGHT_NAMES:
        np.testing.assert_allclose(fused_grads[k], m.weights[k].grad, rtol=1e-9, atol=1e-12,
                                   err_msg=k)


def test_every_weight_receives_gradient():
    m = PIRNN(seed=6)
    m.bn_mean, m.bn_var = RNG.normal(size=64) * 0.1, RNG.uniform(0.5, 2.0, size=64)
    x0, T = _inputs(10)
    x0t = Tensor(x0, requires_grad=True)
    out = forward_rollout(m, x0t, T, "train")
    ad.square(out).sum().backward()
    assert all(np.linalg.norm(m.weights[k].grad) > 0 for k in WEIGHT_NAMES)
    assert np.linalg.norm(x0t.grad) > 0


def test_rollout_gradcheck_small_model():
    m = PIRNN(ModelConfig(hidden=4, batchnorm=True), seed=7)
    m.bn_mean, m.bn_var = RNG.normal(size=4) * 0.1, RNG.uniform(0.5, 2.0, size=4)
    x0, T = _inputs(6)
    for name in ("W1h", "W2x", "bn_gamma", "Wd"):
        def f(t, name=name):
            saved = m.weights[name]
            m.weights[name] = t
            try:
                return ad.square(forward_rollout(m, x0, T, "eval")).sum()
            finally:
                m.weights[name] = saved
        assert ad.gradcheck(f, m.weights[name].data) < 1e-6, name


def test_bad_inputs():
    m = PIRNN(seed=8)
    x0, T = _inputs()
    with pytest.raises(ValidationError):
        forward_rollout(m, x0, T, "predict")
    with pytest.raises((ShapeError, ValidationError)):
        forward_rollout(m, x0[:4], T, "eval")
    with pytest.raises((ShapeError, ValidationError)):
        forward_rollout(m, x0, T[:2], "eval")


def test_non_finite_output_names_step():
    m = PIRNN(ModelConfig(batchnorm=False, dropout=0.0), seed=9)
    x0, T = _inputs()
    T = T.copy()
    T[4] = np.nan
    with pytest.raises(NumericError, match="step 4"):
        forward_rollout(m, x0, T, "eval")


# ------------------------------------------------------------------ learnables and state

def test_parameter_set_covers_all_learnables():
    m = PIRNN(seed=10)
    p = m.parameters()
    assert len(p) == len(WEIGHT_NAMES) + 2
    assert p["log_params"].shape == (6,)
    np.testing.assert_allclose(np.exp(m.log_theta()), np.ones(6))


@pytest.mark.parametrize("coords", ["log", "centered"])
def test_log_theta_round_trip(coords):
    m = PIRNN(ModelConfig(param_coordinates=coords), seed=11)
    v = KineticParameters.reference().log_vector()
    m.set_log_theta(v)
    np.testing.assert_allclose(m.log_theta(), v, rtol=1e-12)
    np.testing.assert_allclose(m.kinetic_parameters().log_vector(), v, rtol=1e-12)


def test_copy_is_independent():
    m = PIRNN(seed=12)
    c = m.copy()
    c.weights["Wd"].data += 1.0
    assert not np.array_equal(c.weights["Wd"].data, m.weights["Wd"].data)


def test_checkpoint_round_trip(tmp_path):
    m = PIRNN(ModelConfig(hidden=8, param_coordinates="centered"), seed=13)
    m.bn_mean = RNG.normal(size=8)
    m.set_log_theta(KineticParameters.reference().log_vector())
    m.dropout_rng.random(5)
    p = save_checkpoint(m, tmp_path / "m.npz", {"epoch": 7})
    back, meta = load_checkpoint(p)
    assert meta == {"epoch": 7}
    assert back.config == m.config
    for k, v in m.state_arrays().items():
        np.testing.assert_array_equal(back.state_arrays()[k], v)
    x0, T = _inputs()
    np.testing.assert_array_equal(forward_rollout(back, x0, T, "train").data,
                                  forward_rollout(m, x0, T, "train").data)


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(ParseError):
        load_checkpoint(bad)
    m = PIRNN(ModelConfig(hidden=4), seed=0)
    p = save_checkpoint(m, tmp_path / "m.npz")
    import io, json
    with np.load(p) as z:
        arrays = {k: z[k] for k in z.files}
    header = json.loads(bytes(arrays["__header__"]).decode())
    header["version"] = 42
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    (tmp_path / "v.npz").write_bytes(buf.getvalue())
    with pytest.raises(VersionError):
        load_checkpoint(tmp_path / "v.npz")
