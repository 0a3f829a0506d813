"""Adam optimisation with cosine annealing, early-stopping checkpoints, ensembles."""
from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .datagen import DatasetBundle, Run
from .errors import (CrystalPirnnError, EnsembleError, NumericError, ParseError,
                     ValidationError)
from .losses import data_loss, physics_loss, physics_residual_array, total_loss
from .model import PIRNN, ModelConfig, forward_rollout, load_checkpoint, save_checkpoint
from .pbm import PARAM_NAMES, KineticParameters, PhysicalConstants, SolubilityModel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    base_lr: float = 1e-3
    final_lr: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_physics: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0
    param_lr: float | None = None  # learning rate of the log-parameters; None = base_lr
    grad_clip: float | None = None  # global norm cap on network-weight gradients
    huber_delta: float = 0.1
    eta_init: float = 0.1
    w_smooth: float = 1.0
    time_scale: float = 500.0  # minutes per unit of normalised time in the physics residual
    param_optimizer: str = "adam"  # "adam" or "gauss_newton" for the kinetic coordinates
    gn_max_nfev: int = 10  # residual evaluations per Gauss-Newton refit
    physics_warmup: int = 0  # initial epochs trained on the data term alone
    gn_trust: float = 2.0  # per-refit bound on the change of each coordinate
    gn_log_bound: float = 25.0  # refits keep every |log theta| within this bound
    max_aborted_epochs: int = 20  # consecutive epochs cut short by non-finite physics

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be at least 1")
        if not self.base_lr > self.final_lr > 0:
            raise ValidationError("need base_lr > final_lr > 0")
        if self.param_lr is not None and not self.param_lr > self.final_lr:
            raise ValidationError("param_lr must exceed final_lr")
        if self.lambda_physics < 0:
            raise ValidationError("lambda_physics must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValidationError("invalid Adam hyper-parameters")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValidationError("grad_clip must be positive")
        if self.param_optimizer not in ("adam", "gauss_newton"):
            raise ValidationError("param_optimizer must be 'adam' or 'gauss_newton'")
        if not (self.time_scale > 0 and self.gn_max_nfev >= 1 and self.gn_trust > 0):
            raise ValidationError("time_scale, gn_max_nfev and gn_trust must be positive")
        if not self.gn_log_bound > 0:
            raise ValidationError("gn_log_bound must be positive")
        if self.max_aborted_epochs < 1:
            raise ValidationError("max_aborted_epochs must be at least 1")
        if not 0 <= self.physics_warmup < self.epochs:
            raise ValidationError("physics_warmup must lie in [0, epochs)")


# ------------------------------------------------------------------ optimiser

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, p: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(p), np.zeros_like(p), 0)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> np.ndarray:
    """One bias-corrected Adam update; returns the new parameter array."""
    if param.shape != grad.shape:
        raise ValidationError(f"adam_step: parameter {param.shape} vs gradient {grad.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericError("adam_step: non-finite gradient")
    state.step += 1
    state.m = beta1 * state.m + (1 - beta1) * grad
    state.v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = state.m / (1 - beta1 ** state.step)
    v_hat = state.v / (1 - beta2 ** state.step)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps)


def cosine_lr(epoch: float, total: float, base: float = 1e-3, final: float = 1e-7) -> float:
    if not 0 <= epoch <= total:
        raise ValidationError(f"epoch {epoch} outside [0, {total}]")
    return final + 0.5 * (base - final) * (1.0 + math.cos(math.pi * epoch / total))


# ------------------------------------------------------------------ data prep

@dataclass
class PreparedRun:
    """Normalised tensors of one run, ready for a rollout."""

    x0: np.ndarray
    T_in: np.ndarray
    T_kelvin: np.ndarray
    obs: np.ndarray
    clean: np.ndarray
    mask: np.ndarray


def prepare_run(run: Run, scales: np.ndarray, T_scale: float) -> PreparedRun:
    obs = run.observed / scales
    return PreparedRun(x0=np.ascontiguousarray(obs[0]), T_in=run.T_series / T_scale,
                       T_kelvin=run.T_series + 273.15, obs=obs, clean=run.clean / scales,
                       mask=run.mask.copy())


def predict(model: PIRNN, run: PreparedRun) -> np.ndarray:
    return forward_rollout(model, run.x0, run.T_in, mode="eval").data


def masked_mse(pred: np.ndarray, ref: np.ndarray, mask: np.ndarray | None = None) -> float:
    r = pred - ref
    if mask is None:
        return float(np.mean(r * r))
    n = mask.sum()
    if n == 0:
        raise ValidationError("empty mask")
    return float(np.sum(np.where(mask, r * r, 0.0)) / n)


# ------------------------------------------------------------------ history

@dataclass
class TrainHistory:
    epoch: list[int] = field(default_factory=list)
    data_loss: list[float] = field(default_factory=list)
    physics_loss: list[float] = field(default_factory=list)  # lambda * physics
    val_mse: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    eta: list[float] = field(default_factory=list)
    params: list[list[float]] = field(default_factory=list)  # physical values

    def __len__(self) -> int:
        return len(self.epoch)

    def append(self, epoch, dl, pl, vm, lr, eta, params) -> None:
        self.epoch.append(int(epoch))
        self.data_loss.append(float(dl))
        self.physics_loss.append(float(pl))
        self.val_mse.append(float(vm))
        self.lr.append(float(lr))
        self.eta.append(float(eta))
        self.params.append([float(p) for p in params])

    def extend(self, other: "TrainHistory") -> None:
        for name in ("epoch", "data_loss", "physics_loss", "val_mse", "lr", "eta", "params"):
            getattr(self, name).extend(getattr(other, name))

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "data_loss", "physics_loss", "val_mse", "lr", "eta"]
                       + list(PARAM_NAMES))
            for i in range(len(self)):
                w.writerow([self.epoch[i]] + [format(v, ".17g") for v in (
                    self.data_loss[i], self.physics_loss[i], self.val_mse[i], self.lr[i],
                    self.eta[i], *self.params[i])])
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "TrainHistory":
        h = cls()
        with Path(path).open() as fh:
            rows = list(csv.reader(fh))
        for row in rows[1:]:
            vals = [float(x) for x in row]
            h.append(int(vals[0]), vals[1], vals[2], vals[3], vals[4], vals[5], vals[6:12])
        return h


@dataclass
class TrainedModel:
    model: PIRNN
    history: TrainHistory
    best_epoch: int
    best_val: float
    config: TrainConfig
    scales: np.ndarray
    T_scale: float
    wall_time: float = 0.0

    @property
    def kinetic_parameters(self) -> KineticParameters:
        return KineticParameters.from_log_vector(self.model.log_theta())


# ------------------------------------------------------------------ training

def _coordinates_to_parameters(model: PIRNN, u: np.ndarray) -> KineticParameters:
    c = model.coordinates
    return KineticParameters.from_log_vector(u) if c is None else c.to_parameters(u)


def refit_kinetics(model: PIRNN, runs: Sequence[PreparedRun], scales: np.ndarray,
                   consts: PhysicalConstants, dt: float, solubility_model: SolubilityModel,
                   time_scale: float, max_nfev: int = 40, trust: float = 2.0,
                   log_bound: float = 25.0) -> float:
    """Gauss-Newton refit of the kinetic coordinates to the current predictions.

    The kinetic parameters enter the objective only through the physics
    residual, so for fixed network predictions their optimum is a small
    nonlinear least-squares problem.  It is solved with a bounded
    trust-region method started from the current coordinates; each
    coordinate moves by at most ``trust`` per call, and parameter sets with
    any ``|log theta| > log_bound`` count as infeasible (this stops drift
    along the compensating k_g/E_ag direction).  Returns the mean squared
    residual after the refit.
    """
    from scipy.optimize import least_squares

    preds = [predict(model, r) for r in runs]
    u0 = model.log_params.data.copy()
    n_res = sum(5 * (p.shape[0] - 2) for p in preds)

    def residual(u):
        try:
            params = _coordinates_to_parameters(model, u)
            if not np.all(np.abs(params.log_vector()) <= log_bound):
                return np.full(n_res, 1e6)
            out = np.concatenate([physics_residual_array(p, r.T_kelvin, params, scales, consts,
                                                         dt, solubility_model, time_scale).ravel()
                                  for p, r in zip(preds, runs)])
        except (FloatingPointError, OverflowError, CrystalPirnnError):
            return np.full(n_res, 1e6)
        return np.where(np.isfinite(out), out, 1e6)

    r0 = residual(u0)
    sol = least_squares(residual, u0, bounds=(u0 - trust, u0 + trust), x_scale="jac",
                        max_nfev=max_nfev, method="trf")
    if np.all(np.isfinite(sol.x)) and sol.cost <= 0.5 * float(r0 @ r0):
        model.log_params.data = sol.x.copy()
        return float(2 * sol.cost / n_res)
    return float(r0 @ r0 / n_res)


def _clip(grads: dict[str, np.ndarray], names: Sequence[str], limit: float | None) -> None:
    if limit is None:
        return
    norm = math.sqrt(sum(float(np.sum(grads[n] ** 2)) for n in names))
    if norm > limit:
        s = limit / norm
        for n in names:
            grads[n] = grads[n] * s


def train(model: PIRNN, dataset: DatasetBundle, cfg: TrainConfig,
          consts: PhysicalConstants | None = None, learner_solubility: SolubilityModel | None = None,
          start_epoch: int = 0, history: TrainHistory | None = None,
          adam_states: dict[str, AdamState] | None = None,
          best_state: dict[str, np.ndarray] | None = None,
          on_epoch: Callable[[int, "TrainingState"], None] | None = None) -> TrainedModel:
    """Train ``model`` in place and return the best-validation checkpoint.

    One optimiser step per training run; epochs visit the runs in an order
    shuffled by (seed, epoch).  The learner's physics uses
    ``learner_solubility`` (the unshifted correlation by default).

    To resume, pass the epoch to start from together with the saved
    history, optimiser states and best checkpoint (see
    :func:`save_training_state`).  ``on_epoch`` is called after every epoch
    with the live training state.
    """
    consts = consts or PhysicalConstants()
    learner_solubility = learner_solubility or SolubilityModel()
    scales, T_scale = dataset.scales, dataset.T_scale
    train_runs = [prepare_run(r, scales, T_scale) for r in dataset.train]
    val_runs = [prepare_run(r, scales, T_scale) for r in dataset.val] or train_runs
    if not train_runs:
        raise ValidationError("training set is empty")
    dt = dataset.dt
    lam = cfg.lambda_physics
    if lam == 0:
        log.info("physics disabled; PBM parameters frozen")
    params = model.parameters()
    net_names = [n for n in params if n not in ("eta", "log_params")]
    states = adam_states if adam_states is not None else {
        n: AdamState.zeros_like(t.data) for n, t in params.items()}
    if start_epoch == 0:
        model.eta.data = np.array(cfg.eta_init)
    history = history if history is not None else TrainHistory()
    best_val, best_epoch = math.inf, -1
    for i, v in enumerate(history.val_mse):
        if v < best_val:
            best_val, best_epoch = v, history.epoch[i]
    if best_state is None:
        if best_epoch >= 0:
            log.warning("resuming without the best checkpoint; earlier epochs cannot be returned")
            best_val, best_epoch = math.inf, -1
        best_state = model.state_arrays()
    plr_base = cfg.param_lr if cfg.param_lr is not None else cfg.base_lr
    adam_params = lam > 0 and cfg.param_optimizer == "adam"
    t_start = time.perf_counter()
    aborted = 0
    for epoch in range(start_epoch, cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr, cfg.final_lr)
        plr = cosine_lr(epoch, cfg.epochs, plr_base, cfg.final_lr)
        physics_on = lam > 0 and epoch >= cfg.physics_warmup
        if physics_on and cfg.param_optimizer == "gauss_newton":
            refit_kinetics(model, train_runs, scales, consts, dt, learner_solubility,
                           cfg.time_scale, cfg.gn_max_nfev, cfg.gn_trust, cfg.gn_log_bound)
        order = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch])).permutation(
            len(train_runs))
        sum_d = sum_p = 0.0
        n_done = 0
        for idx in order:
            r = train_runs[idx]
            model.zero_grad()
            pred = forward_rollout(model, r.x0, r.T_in, mode="train")
            d = data_loss(pred, r.obs, r.mask, model.eta, cfg.huber_delta, 1.0, cfg.w_smooth)
            if not math.isfinite(d.item()):
                raise NumericError(f"non-finite loss at epoch {epoch}, run {dataset.train[idx].index}")
            try:
                if physics_on:
                    p = physics_loss(pred, r.T_kelvin, model.kinetic_parameters(), scales,
                                     consts, dt, learner_solubility, cfg.time_scale)
                    if not math.isfinite(p.item()):
                        raise NumericError("non-finite physics loss")
                    loss = total_loss(d, p, lam)
                else:
                    p, loss = None, d
                loss.backward()
                grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                         for n, t in params.items()}
                bad = [n for n, g in grads.items() if (n != "log_params" or adam_params)
                       and not np.all(np.isfinite(g))]
                if bad:
                    raise NumericError(f"non-finite gradient in {', '.join(bad)}")
            except NumericError as exc:
                if not physics_on:
                    raise NumericError(f"{exc} at epoch {epoch}, "
                                       f"run {dataset.train[idx].index}") from exc
                aborted += 1
                log.warning("epoch %d aborted at run %d after %d of %d steps: %s; kinetic "
                            "parameters %s", epoch, dataset.train[idx].index, n_done,
                            len(order), exc, np.array2string(np.exp(model.log_theta()),
                                                             precision=3))
                if aborted >= cfg.max_aborted_epochs:
                    raise NumericError(f"{aborted} consecutive epochs aborted on non-finite "
                                       f"physics terms (last at epoch {epoch}, run "
                                       f"{dataset.train[idx].index}): {exc}") from exc
                break
            sum_d += d.item()
            if p is not None:
                sum_p += lam * p.item()
            n_done += 1
            _clip(grads, net_names, cfg.grad_clip)
            for n, t in params.items():
                if n == "log_params" and not (adam_params and physics_on):
                    continue
                step_lr = plr if n == "log_params" else lr
                t.data = adam_step(t.data, grads[n], states[n], step_lr, cfg.beta1, cfg.beta2,
                                   cfg.eps)
        else:
            aborted = 0
        val = float(np.mean([masked_mse(predict(model, r), r.obs, r.mask) for r in val_runs]))
        history.append(epoch, sum_d / max(n_done, 1), sum_p / max(n_done, 1), val, lr,
                       float(model.eta.data), np.exp(model.log_theta()))
        if val < best_val:
            best_val, best_epoch, best_state = val, epoch, model.state_arrays()
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            log.info("epoch %d: data %.3e physics %.3e val %.3e", epoch,
                     history.data_loss[-1], history.physics_loss[-1], val)
        if on_epoch is not None:
            on_epoch(epoch, TrainingState(model, history, states, best_state, best_epoch))
    if best_epoch >= 0:
        model.load_state_arrays(best_state)
    return TrainedModel(model, history, best_epoch, best_val, cfg, scales.copy(), T_scale,
                        time.perf_counter() - t_start)


@dataclass
class TrainingState:
    """Everything needed to continue an interrupted training exactly."""

    model: PIRNN
    history: TrainHistory
    adam_states: dict[str, AdamState]
    best_state: dict[str, np.ndarray]
    best_epoch: int

    @property
    def next_epoch(self) -> int:
        return self.history.epoch[-1] + 1 if len(self.history) else 0


def save_training_state(state: TrainingState, directory: str | Path) -> Path:
    """Persist the latest model, history, optimiser moments and best weights."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state.model, d / "last.npz", {"next_epoch": state.next_epoch})
    state.history.to_csv(d / "history.csv")
    arrays = {}
    for n, st in state.adam_states.items():
        arrays[f"m__{n}"], arrays[f"v__{n}"] = st.m, st.v
        arrays[f"step__{n}"] = np.array(st.step)
    np.savez(d / "optimizer.npz", **arrays)
    np.savez(d / "best_state.npz", **state.best_state)
    return d


def load_training_state(directory: str | Path) -> TrainingState:
    d = Path(directory)
    try:
        model, _ = load_checkpoint(d / "last.npz")
        history = TrainHistory.from_csv(d / "history.csv")
        with np.load(d / "optimizer.npz") as z:
            names = {k.split("__", 1)[1] for k in z.files}
            states = {n: AdamState(z[f"m__{n}"].copy(), z[f"v__{n}"].copy(),
                                   int(z[f"step__{n}"])) for n in names}
        with np.load(d / "best_state.npz") as z:
            best = {k: z[k].copy() for k in z.files}
    except (OSError, KeyError, ValueError) as exc:
        raise ParseError(f"{d}: incomplete training state ({exc})") from exc
    best_epoch = history.epoch[int(np.argmin(history.val_mse))] if len(history) else -1
    return TrainingState(model, history, states, best, best_epoch)


# ------------------------------------------------------------------ ensembles

def format_parenthesis(mean: float, std: float) -> str:
    """Compact uncertainty notation: 1.974 +- 0.003 -> '1.974(3)'.

    The uncertainty is rounded to one significant digit, the mean to the
    same decimal place.  Values whose magnitude is 1e3 or above (or below
    1e-2) are written with a power of ten: '5.376(9)x10^3'.
    """
    if not (math.isfinite(mean) and math.isfinite(std)) or std < 0:
        raise ValidationError("mean and std must be finite with std >= 0")
    exp10 = 0
    if mean != 0 and (abs(mean) >= 1e3 or abs(mean) < 1e-2):
        exp10 = int(math.floor(math.log10(abs(mean))))
    m, s = mean / 10 ** exp10, std / 10 ** exp10
    if s == 0:
        decimals = 3
        digit = 0
    else:
        decimals = max(0, -int(math.floor(math.log10(s))))
        digit = int(round(s * 10 ** decimals))
        if digit >= 10:  # rounding pushed the uncertainty to the next decade
            decimals = max(0, decimals - 1)
            digit = int(round(s * 10 ** decimals))
    body = f"{m:.{decimals}f}({digit})"
    if exp10:
        sup = str(exp10).translate(str.maketrans("-0123456789", "⁻⁰¹²³⁴⁵⁶⁷⁸⁹"))
        body += f"×10{sup}"
    return body


@dataclass
class EnsembleResult:
    members: list[TrainedModel]
    seeds: list[int]

    def physical_parameters(self) -> np.ndarray:
        """(n_members, 6) learned physical parameter values."""
        return np.array([np.exp(m.model.log_theta()) for m in self.members])

    def parameter_stats(self) -> tuple[np.ndarray, np.ndarray]:
        p = self.physical_parameters()
        return p.mean(axis=0), p.std(axis=0)

    def parameter_table(self) -> list[dict]:
        mean, std = self.parameter_stats()
        ref = KineticParameters.reference().physical_vector()
        return [{"parameter": n, "mean": float(mu), "std": float(sd),
                 "formatted": format_parenthesis(float(mu), float(sd)),
                 "reference": float(r), "rel_dev": float(mu / r - 1.0)}
                for n, mu, sd, r in zip(PARAM_NAMES, mean, std, ref)]


def _train_member(args) -> TrainedModel:
    dataset, cfg, model_cfg, consts, learner_solubility = args
    model = PIRNN(model_cfg, seed=cfg.seed)
    return train(model, dataset, cfg, consts, learner_solubility)


def train_ensemble(dataset: DatasetBundle, cfg: TrainConfig, n_seeds: int = 5,
                   model_cfg: ModelConfig | None = None, consts: PhysicalConstants | None = None,
                   learner_solubility: SolubilityModel | None = None, jobs: int = 1,
                   seeds: Sequence[int] | None = None) -> EnsembleResult:
    """Train members with seeds ``cfg.seed + i``; all members must succeed."""
    if n_seeds < 2 and seeds is None:
        raise ValidationError("an ensemble needs at least 2 members")
    seeds = list(seeds) if seeds is not None else [cfg.seed + i for i in range(n_seeds)]
    model_cfg = model_cfg or ModelConfig()
    tasks = [(dataset, replace(cfg, seed=s), model_cfg, consts, learner_solubility) for s in seeds]
    results: list[TrainedModel | None] = [None] * len(seeds)
    failed: list[int] = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_train_member, t) for t in tasks]
            for i, f in enumerate(futures):
                try:
                    results[i] = f.result()
                except CrystalPirnnError as exc:
                    log.error("ensemble member seed %d failed: %s", seeds[i], exc)
                    failed.append(seeds[i])
    else:
        for i, t in enumerate(tasks):
            try:
                results[i] = _train_member(t)
            except CrystalPirnnError as exc:
                log.error("ensemble member seed %d failed: %s", seeds[i], exc)
                failed.append(seeds[i])
    if failed:
        raise EnsembleError(f"{len(failed)} ensemble member(s) failed: seeds {failed}", failed)
    return EnsembleResult([r for r in results if r is not None], seeds)
