"""Recurrent state predictor: two LSTM layers, batch norm, dropout, decoder.

The network is rolled out autoregressively over a batch horizon.  At step
``k`` it receives ``[x_hat(k-1), T(k)]`` (normalised) and emits
``x_hat(k)`` through a Softplus, so every prediction is non-negative.
Row 0 of a rollout is the given initial state.

The whole rollout is a single node of the autodiff graph whose forward and
backward passes are the fused kernels of :mod:`crystal_pirnn.kernels`.
:func:`forward_rollout_reference` builds the same computation from
autodiff primitives and exists to cross-check the fused kernels.
"""
from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .pbm import CenteredCoordinates, KineticParameters
from .errors import NumericError, ParseError, ShapeError, ValidationError, VersionError

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
WEIGHT_NAMES = ("W1x", "W1h", "b1", "W2x", "W2h", "b2", "bn_gamma", "bn_beta", "Wd", "bd")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 6
    output_dim: int = 5
    hidden: int = 64
    layers: int = 2
    dropout: float = 0.2
    activation: str = "softplus"
    batchnorm: bool = True
    bn_momentum: float = 0.1
    forget_bias: float = 1.0
    param_coordinates: str = "log"  # "log" or "centered" (see CenteredCoordinates)

    def __post_init__(self):
        if self.param_coordinates not in ("log", "centered"):
            raise ValidationError("param_coordinates must be 'log' or 'centered'")
        if self.input_dim != 6 or self.output_dim != 5:
            raise ValidationError("the state model maps 5 states + temperature to 5 states")
        if self.layers != 2:
            raise ValidationError("the fused rollout kernel implements exactly 2 LSTM layers")
        if self.hidden < 1:
            raise ValidationError("hidden size must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must lie in [0, 1)")
        if self.activation != "softplus":
            raise ValidationError("only the softplus output activation is supported")
        if not 0.0 < self.bn_momentum <= 1.0:
            raise ValidationError("bn_momentum must lie in (0, 1]")


class PIRNN:
    """Network weights plus the learnable noise scale and log kinetic parameters."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        H = self.config.hidden
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))

        def uni(shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        b1 = uni(4 * H, H)
        b2 = uni(4 * H, H)
        b1[H:2 * H] = self.config.forget_bias
        b2[H:2 * H] = self.config.forget_bias
        init = {
            "W1x": uni((4 * H, 6), 6), "W1h": uni((4 * H, H), H), "b1": b1,
            "W2x": uni((4 * H, H), H), "W2h": uni((4 * H, H), H), "b2": b2,
            "bn_gamma": np.ones(H), "bn_beta": np.zeros(H),
            "Wd": uni((5, H), H), "bd": uni(5, H),
        }
        self.weights: dict[str, Tensor] = {k: Tensor(v, requires_grad=True) for k, v in init.items()}
        self.bn_mean = np.zeros(H)
        self.bn_var = np.ones(H)
        self.eta = Tensor(np.array(0.1), requires_grad=True)
        # learnable kinetic coordinates; every physical value starts at 1
        self.log_params = Tensor(self._coords_from_log(np.zeros(6)), requires_grad=True)
        self.dropout_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xD0]))

    # ------------------------------------------------------------------ kinetics
    @property
    def coordinates(self) -> CenteredCoordinates | None:
        return CenteredCoordinates() if self.config.param_coordinates == "centered" else None

    def _coords_from_log(self, v: np.ndarray) -> np.ndarray:
        c = self.coordinates
        return np.array(v, dtype=float) if c is None else c.from_log_vector(v)

    def kinetic_parameters(self) -> KineticParameters:
        """Log kinetic parameters as graph nodes of the learnable tensor."""
        c = self.coordinates
        if c is None:
            return KineticParameters.from_log_vector(self.log_params)
        return c.to_parameters(self.log_params)

    def log_theta(self) -> np.ndarray:
        """Natural logs of the six physical kinetic parameters."""
        c = self.coordinates
        if c is None:
            return self.log_params.data.copy()
        return c.to_parameters(self.log_params.data).log_vector()

    def set_log_theta(self, v) -> None:
        self.log_params.data = self._coords_from_log(np.asarray(v, dtype=float))

    # ------------------------------------------------------------------ access
    def parameters(self) -> dict[str, Tensor]:
        """Every learnable tensor: network weights, ``eta`` and ``log_params``."""
        out = dict(self.weights)
        out["eta"] = self.eta
        out["log_params"] = self.log_params
        return out

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: t.data.copy() for k, t in self.parameters().items()}
        out["bn_mean"] = self.bn_mean.copy()
        out["bn_var"] = self.bn_var.copy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.parameters().items():
            a = np.asarray(arrays[k], dtype=float)
            if a.shape != t.data.shape:
                raise ShapeError(f"state '{k}' has shape {a.shape}, expected {t.data.shape}")
            t.data = a.copy()
        self.bn_mean = np.asarray(arrays["bn_mean"], dtype=float).copy()
        self.bn_var = np.asarray(arrays["bn_var"], dtype=float).copy()

    def copy(self) -> "PIRNN":
        other = PIRNN.__new__(PIRNN)
        other.config = self.config
        other.weights = {k: Tensor(t.data.copy(), requires_grad=True) for k, t in self.weights.items()}
        other.bn_mean = self.bn_mean.copy()
        other.bn_var = self.bn_var.copy()
        other.eta = Tensor(self.eta.data.copy(), requires_grad=True)
        other.log_params = Tensor(self.log_params.data.copy(), requires_grad=True)
        other.dropout_rng = np.random.default_rng()
        other.dropout_rng.bit_generator.state = self.dropout_rng.bit_generator.state
        return other

    # ------------------------------------------------------------------ rollout
    def dropout_mask(self, n: int, mode: str) -> np.ndarray:
        p = self.config.dropout
        H = self.config.hidden
        if mode != "train" or p == 0.0:
            return np.ones((n, H))
        keep = self.dropout_rng.random((n, H)) >= p
        return keep / (1.0 - p)


def _check_inputs(model: PIRNN, x0, T_series, mode: str):
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
    T = np.ascontiguousarray(T_series, dtype=float)
    if T.ndim != 1 or T.shape[0] < 3:
        raise ShapeError(f"forward_rollout: temperature series must be 1-D with N >= 3, got {T.shape}")
    x0t = x0 if isinstance(x0, Tensor) else Tensor(np.asarray(x0, dtype=float))
    if x0t.shape != (5,):
        raise ShapeError(f"forward_rollout: x0 must have shape (5,), got {x0t.shape}")
    return x0t, T


def forward_rollout(model: PIRNN, x0, T_series, mode: str = "eval",
                    drop_mask: np.ndarray | None = None) -> Tensor:
    """Predict the normalised (N, 5) trajectory from ``x0`` and the temperature series.

    In train mode a fresh dropout mask is drawn (unless ``drop_mask`` is
    given) and the batch-norm running statistics are updated from the
    rollout's hidden sequence after the pass.
    """
    x0t, T = _check_inputs(model, x0, T_series, mode)
    N = T.shape[0]
    cfg = model.config
    mask = model.dropout_mask(N, mode) if drop_mask is None else np.ascontiguousarray(drop_mask)
    w = {k: t.data for k, t in model.weights.items()}
    bn_mean, bn_var = model.bn_mean.copy(), model.bn_var.copy()
    out, cache = kernels.rollout_forward(
        w["W1x"], w["W1h"], w["b1"], w["W2x"], w["W2h"], w["b2"], w["bn_gamma"], w["bn_beta"],
        bn_mean, bn_var, w["Wd"], w["bd"], np.ascontiguousarray(x0t.data), T, mask,
        cfg.batchnorm)
    if not np.all(np.isfinite(out)):
        k = int(np.argmax(~np.isfinite(out).all(axis=1)))
        raise NumericError(f"non-finite network output at step {k}")
    if mode == "train" and cfg.batchnorm:
        h2 = cache["h2"][1:]
        m = cfg.bn_momentum
        model.bn_mean = (1 - m) * model.bn_mean + m * h2.mean(axis=0)
        var = h2.var(axis=0, ddof=1) if len(h2) > 1 else np.zeros_like(model.bn_var)
        model.bn_var = (1 - m) * model.bn_var + m * var

    parents = [model.weights[k] for k in WEIGHT_NAMES] + [x0t]

    def backward(g):
        grads = kernels.rollout_backward(w["W1x"], w["W1h"], w["W2x"], w["W2h"], w["bn_gamma"],
                                         bn_mean, bn_var, w["Wd"], cache,
                                         np.ascontiguousarray(g))
        return tuple(grads[k] for k in WEIGHT_NAMES) + (grads["x0"],)

    return ad.make_node(out, parents, backward, "lstm_rollout")


# ------------------------------------------------------------------ primitives

def lstm_cell(x_t, h_prev, c_prev, Wx, Wh, b):
    """One LSTM step from autodiff primitives; gates stacked as (i, f, g, o)."""
    Wx, Wh = ad._wrap(Wx), ad._wrap(Wh)
    H = Wh.shape[1]
    if Wx.shape[0] != 4 * H or Wh.shape[0] != 4 * H or ad._wrap(x_t).shape != (Wx.shape[1],):
        raise ShapeError(f"lstm_cell: incompatible shapes x {ad._wrap(x_t).shape}, "
                         f"Wx {Wx.shape}, Wh {Wh.shape}")
    z = Wx @ x_t + Wh @ h_prev + b
    i = ad.sigmoid(z[0:H])
    f = ad.sigmoid(z[H:2 * H])
    g = ad.tanh(z[2 * H:3 * H])
    o = ad.sigmoid(z[3 * H:4 * H])
    c = f * c_prev + i * g
    h = o * ad.tanh(c)
    return h, c


def forward_rollout_reference(model: PIRNN, x0, T_series, drop_mask: np.ndarray | None = None) -> Tensor:
    """Primitive-by-primitive rollout used to validate the fused kernel."""
    x0t, T = _check_inputs(model, x0, T_series, "eval")
    N, H = T.shape[0], model.config.hidden
    mask = np.ones((N, H)) if drop_mask is None else drop_mask
    w = model.weights
    h1 = c1 = h2 = c2 = Tensor(np.zeros(H))
    rows = [x0t.reshape(1, 5)]
    x = x0t
    if model.config.batchnorm:
        inv = 1.0 / np.sqrt(model.bn_var + kernels.BN_EPS)
    for k in range(1, N):
        inp = ad.concat([x, Tensor(np.array([T[k]]))])
        h1, c1 = lstm_cell(inp, h1, c1, w["W1x"], w["W1h"], w["b1"])
        h2, c2 = lstm_cell(h1, h2, c2, w["W2x"], w["W2h"], w["b2"])
        u = (h2 - model.bn_mean) * inv * w["bn_gamma"] + w["bn_beta"] if model.config.batchnorm else h2
        x = ad.softplus(w["Wd"] @ (u * mask[k]) + w["bd"])
        rows.append(x.reshape(1, 5))
    return ad.concat(rows, axis=0)


# ------------------------------------------------------------------ checkpoints

def save_checkpoint(model: PIRNN, path: str | Path, metadata: dict[str, Any] | None = None) -> Path:
    """Write a versioned ``.npz`` holding config, weights, statistics and metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"version": CHECKPOINT_VERSION, "config": asdict(model.config),
              "dropout_rng": model.dropout_rng.bit_generator.state,
              "metadata": metadata or {}}
    arrays = model.state_arrays()
    buf = io.BytesIO()
    np.savez(buf, __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path: str | Path) -> tuple[PIRNN, dict[str, Any]]:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(bytes(z["__header__"]).decode())
            arrays = {k: z[k] for k in z.files if k != "__header__"}
    except FileNotFoundError:
        raise
    except (OSError, ValueError, KeyError) as exc:
        raise ParseError(f"{path}: unreadable checkpoint ({exc})") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: checkpoint version {header.get('version')!r}, "
                           f"expected {CHECKPOINT_VERSION}")
    model = PIRNN(ModelConfig(**header["config"]))
    model.load_state_arrays(arrays)
    model.dropout_rng.bit_generator.state = header["dropout_rng"]
    return model, header.get("metadata", {})
