"""Metrics, ensemble evaluation reports and the three study protocols."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .datagen import DatasetBundle, Run, SeedState, build_dataset, temperature_profile
from .errors import (CrystalPirnnError, DivergenceError, EnsembleError, ValidationError)
from .integrate import IntegratorConfig, Trajectory, integrate
from .model import ModelConfig
from .pbm import (PARAM_NAMES, KineticParameters, PhysicalConstants, SolubilityModel, rhs_numpy)
from .train import (EnsembleResult, TrainConfig, TrainedModel, prepare_run, predict,
                    train_ensemble)

log = logging.getLogger(__name__)

Z95 = 1.96


# ------------------------------------------------------------------ metrics

def mse(pred, ref, mask=None) -> float:
    """Mean squared residual over the selected entries, pooled over components."""
    pred = np.asarray(pred, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if pred.shape != ref.shape:
        raise ValidationError(f"mse: shapes {pred.shape} and {ref.shape} differ")
    r2 = (pred - ref) ** 2
    if mask is None:
        if r2.size == 0:
            raise ValidationError("mse of empty arrays")
        return float(r2.mean())
    m = np.broadcast_to(np.asarray(mask, dtype=bool), r2.shape)
    n = int(m.sum())
    if n == 0:
        raise ValidationError("mse: the mask selects no entries")
    return float(r2[m].sum() / n)


def _as_log_vector(p) -> np.ndarray:
    if isinstance(p, KineticParameters):
        return p.log_vector()
    a = np.asarray(p, dtype=float)
    if a.shape != (6,) or np.any(~(a > 0)):
        raise ValidationError("expected six positive physical parameter values")
    return np.log(a)


def parameter_log_mse(learned, reference=None) -> float:
    """Mean over the six parameters of (ln learned - ln reference)^2.

    Both arguments are :class:`KineticParameters` or arrays of physical
    values; the reference defaults to the data-generating parameters.
    """
    ref = _as_log_vector(reference if reference is not None else KineticParameters.reference())
    d = _as_log_vector(learned) - ref
    return float(np.mean(d * d))


def relative_deviation(learned, reference=None) -> np.ndarray:
    ref = _as_log_vector(reference if reference is not None else KineticParameters.reference())
    return np.exp(_as_log_vector(learned) - ref) - 1.0


def integrated_abs_error(pred, ref, t) -> float:
    """Trapezoidal integral over normalised time of |pred - ref|, averaged over states."""
    pred, ref, t = (np.asarray(a, dtype=float) for a in (pred, ref, t))
    if pred.shape != ref.shape or pred.shape[0] != t.shape[0]:
        raise ValidationError("integrated_abs_error: inconsistent shapes")
    tau = (t - t[0]) / (t[-1] - t[0])
    a = np.abs(pred - ref)
    return float(np.mean(np.sum(0.5 * (a[1:] + a[:-1]) * np.diff(tau)[:, None], axis=0)))


def confidence_band(preds: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ensemble mean and the 95% band mean +- 1.96 std at every time point."""
    P = np.asarray(preds, dtype=float)
    if P.ndim != 3 or P.shape[0] < 1:
        raise ValidationError("confidence_band expects a stack of (N, 5) predictions")
    # deviations from the first member keep identical members exactly band-free
    D = P - P[0]
    mean = P[0] + D.mean(axis=0)
    sd = D.std(axis=0)
    return mean, mean - Z95 * sd, mean + Z95 * sd


def noise_floor(runs: Iterable[Run], scales) -> float:
    """Pooled normalised MSE between observed and clean states of ``runs``."""
    scales = np.asarray(scales, dtype=float)
    num = den = 0.0
    for r in runs:
        d = (r.observed - r.clean) / scales
        num += float(np.sum(np.where(r.mask, d * d, 0.0)))
        den += float(r.mask.sum())
    if den == 0:
        raise ValidationError("noise_floor: no observed entries")
    return num / den


# ------------------------------------------------------------------ ODE re-evaluation

def reevaluate_ode(params: KineticParameters | TrainedModel, run: Run,
                   consts: PhysicalConstants | None = None,
                   solubility_model: SolubilityModel | None = None,
                   cfg: IntegratorConfig | None = None) -> Trajectory:
    """Integrate the population balance with learned kinetics on the run's grid.

    The run's true initial state and temperature program are used together
    with the learner's solubility correlation (unshifted by default).
    """
    if isinstance(params, TrainedModel):
        params = params.kinetic_parameters
    if not np.all(np.isfinite(params.log_vector())):
        raise ValidationError("learned parameters are not finite")
    cond = run.conditions
    rhs = rhs_numpy(params, solubility_model or SolubilityModel(), consts or PhysicalConstants(),
                    lambda s: temperature_profile(cond, min(s, cond.t_end)))
    x0 = np.maximum(run.clean[0], 0.0)
    try:
        return integrate(rhs, x0, run.t, cfg, breakpoints=(cond.t_plat, cond.t_cool))
    except DivergenceError as exc:
        raise DivergenceError(f"run {run.index}: {exc}", exc.t_fail, run.index) from exc


# ------------------------------------------------------------------ reports

@dataclass
class EvalReport:
    """Test-set metrics of one trained ensemble (or single model)."""

    forward_mse_obs: float
    forward_mse_clean: float
    ode_mse_obs: float
    ode_mse_clean: float
    per_run: list[dict[str, Any]]
    parameter_table: list[dict[str, Any]]
    parameter_log_mse: float
    noise_floor: float
    n_ode_failed: int = 0
    bands: dict[int, dict[str, list[list[float]]]] = field(default_factory=dict)

    def metrics(self) -> dict[str, float]:
        out = {"forward_mse_obs": self.forward_mse_obs, "forward_mse_clean": self.forward_mse_clean,
               "ode_mse_obs": self.ode_mse_obs, "ode_mse_clean": self.ode_mse_clean,
               "parameter_log_mse": self.parameter_log_mse, "noise_floor": self.noise_floor,
               "n_ode_failed": float(self.n_ode_failed)}
        for row in self.parameter_table:
            out[f"param_{row['parameter']}"] = row["mean"]
            out[f"param_{row['parameter']}_std"] = row["std"]
        return out

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=1, default=float) + "\n")
        return path

    def per_run_csv(self, path: str | Path) -> Path:
        path = Path(path)
        keys = list(self.per_run[0]) if self.per_run else ["run"]
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(self.per_run)
        return path


def _members(trained) -> list[TrainedModel]:
    if isinstance(trained, EnsembleResult):
        return trained.members
    if isinstance(trained, TrainedModel):
        return [trained]
    members = list(trained)
    if not members:
        raise ValidationError("nothing to evaluate")
    return members


def ensemble_parameters(members: Sequence[TrainedModel]) -> tuple[np.ndarray, np.ndarray]:
    P = np.array([np.exp(m.model.log_theta()) for m in members])
    return P.mean(axis=0), P.std(axis=0)


def evaluate(trained, dataset: DatasetBundle, runs: Sequence[Run] | None = None,
             consts: PhysicalConstants | None = None,
             learner_solubility: SolubilityModel | None = None,
             band_runs: int = 0) -> EvalReport:
    """Evaluate an ensemble on the test runs (or ``runs``).

    The forward prediction is the ensemble-mean trajectory; the
    re-evaluated ODE uses the ensemble-mean physical parameters, which
    are also the values reported in the parameter table.  Errors against
    observations honour the sampling mask; errors against clean states use
    the full grid.  Runs whose ODE integration diverges are excluded from
    the ODE metrics and counted.
    """
    from .train import format_parenthesis

    members = _members(trained)
    runs = list(runs if runs is not None else dataset.test)
    if not runs:
        raise ValidationError("no runs to evaluate")
    scales, T_scale = members[0].scales, members[0].T_scale
    mean_p, std_p = ensemble_parameters(members)
    learned = KineticParameters.from_physical(*mean_p)
    per_run, bands = [], {}
    f_obs, f_clean, o_obs, o_clean = [], [], [], []
    n_failed = 0
    for j, run in enumerate(runs):
        pr = prepare_run(run, scales, T_scale)
        preds = [predict(m.model, pr) for m in members]
        mean, lo, hi = confidence_band(preds)
        if j < band_runs:
            bands[run.index] = {"mean": mean.tolist(), "lower": lo.tolist(), "upper": hi.tolist()}
        row = {"run": run.index,
               "forward_mse_obs": mse(mean, pr.obs, pr.mask),
               "forward_mse_clean": mse(mean, pr.clean)}
        f_obs.append(row["forward_mse_obs"])
        f_clean.append(row["forward_mse_clean"])
        try:
            traj = reevaluate_ode(learned, run, consts, learner_solubility)
            ode = traj.states / scales
            row["ode_mse_obs"] = mse(ode, pr.obs, pr.mask)
            row["ode_mse_clean"] = mse(ode, pr.clean)
            o_obs.append(row["ode_mse_obs"])
            o_clean.append(row["ode_mse_clean"])
        except CrystalPirnnError as exc:
            log.warning("ODE re-evaluation failed: %s", exc)
            n_failed += 1
            row["ode_mse_obs"] = row["ode_mse_clean"] = float("nan")
        per_run.append(row)
    ref = KineticParameters.reference().physical_vector()
    table = [{"parameter": n, "mean": float(mu), "std": float(sd),
              "formatted": format_parenthesis(float(mu), float(sd)),
              "reference": float(r), "rel_dev": float(mu / r - 1.0)}
             for n, mu, sd, r in zip(PARAM_NAMES, mean_p, std_p, ref)]
    nan = float("nan")
    return EvalReport(
        forward_mse_obs=float(np.mean(f_obs)), forward_mse_clean=float(np.mean(f_clean)),
        ode_mse_obs=float(np.mean(o_obs)) if o_obs else nan,
        ode_mse_clean=float(np.mean(o_clean)) if o_clean else nan,
        per_run=per_run, parameter_table=table, parameter_log_mse=parameter_log_mse(mean_p),
        noise_floor=noise_floor(runs, scales), n_ode_failed=n_failed, bands=bands)


# ------------------------------------------------------------------ studies

@dataclass(frozen=True)
class StudyConfig:
    """Grid and budget of a study; every cell trains one ensemble."""

    noise_levels: tuple[float, ...] = (0.0, 0.1, 0.3, 1.0)
    train_sizes: tuple[int, ...] = (5, 10, 20, 40, 60)
    lambdas: tuple[float, ...] = (0.0, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3)
    shift: float = 0.10
    schemes: tuple[str, ...] = ("p2", "p3", "p5", "p9")
    sampling_lambdas: tuple[float, ...] = (0.0, 1.0, 1e2, 1e4, 1e6, 1e8, 1e10)
    sampling_train_runs: int = 10
    n_runs: int = 100
    dt: float = 1.0
    seed: int = 0
    n_seeds: int = 5
    jobs: int = 1

    def __post_init__(self):
        if self.n_seeds < 2:
            raise ValidationError("studies need ensembles of at least 2 members")
        if any(lv < 0 for lv in self.noise_levels) or any(lam < 0 for lam in self.lambdas):
            raise ValidationError("noise levels and lambdas must be non-negative")
        if not self.train_sizes or min(self.train_sizes) < 1:
            raise ValidationError("train sizes must be positive")


@dataclass
class StudyCell:
    key: str
    noise: float = 0.0
    shift: float = 0.0
    scheme: str = "full"
    n_train: int = 10
    lam: float = 1.0


def study_cells(kind: str, sc: StudyConfig) -> list[StudyCell]:
    if kind == "noise":
        return [StudyCell(f"noise={lv:g}/n={n}", noise=lv, n_train=n)
                for lv in sc.noise_levels for n in sc.train_sizes]
    if kind == "lambda":
        return [StudyCell(f"lambda={lam:g}/n={n}", shift=sc.shift, n_train=n, lam=lam)
                for lam in sc.lambdas for n in sc.train_sizes]
    if kind == "sampling":
        return [StudyCell(f"scheme={s}/lambda={lam:g}", scheme=s, n_train=sc.sampling_train_runs,
                          lam=lam)
                for s in sc.schemes for lam in sc.sampling_lambdas]
    raise ValidationError(f"unknown study {kind!r}; expected noise, lambda or sampling")


def _cell_path(root: Path, cell: StudyCell) -> Path:
    safe = cell.key.replace("/", "__").replace("=", "-")
    return root / "cells" / f"{safe}.json"


def run_study(kind: str, sc: StudyConfig, train_cfg: TrainConfig, out_dir: str | Path,
              model_cfg: ModelConfig | None = None, consts: PhysicalConstants | None = None,
              seed_state: SeedState | None = None,
              trainer: Callable[..., EnsembleResult] = train_ensemble) -> dict[str, Any]:
    """Run (or resume) a study grid and write its long-format table.

    Every finished cell is persisted under ``out_dir/cells`` and skipped on
    a rerun.  Failed cells are recorded with their error and retried on
    the next run.  Returns the summary written to ``summary.json``.
    """
    root = Path(out_dir)
    (root / "cells").mkdir(parents=True, exist_ok=True)
    cells = study_cells(kind, sc)
    datasets: dict[tuple, DatasetBundle] = {}
    records = []
    for cell in cells:
        path = _cell_path(root, cell)
        if path.exists():
            rec = json.loads(path.read_text())
            if rec.get("status") == "ok":
                log.info("cell %s already complete; skipped", cell.key)
                records.append(rec)
                continue
        t0 = time.perf_counter()
        try:
            dkey = (cell.noise, cell.shift, cell.scheme)
            if dkey not in datasets:
                datasets[dkey] = build_dataset(sc.n_runs, cell.noise, cell.shift, cell.scheme,
                                               sc.seed, sc.dt, consts=consts,
                                               seed_state=seed_state, jobs=sc.jobs)
            ds = datasets[dkey].subset(cell.n_train)
            cfg = replace(train_cfg, lambda_physics=cell.lam)
            ens = trainer(ds, cfg, sc.n_seeds, model_cfg, consts, None, sc.jobs)
            rep = evaluate(ens, ds, consts=consts)
            metrics = rep.metrics()
            metrics.update(_training_losses(ens))
            if kind == "lambda":
                metrics["ode_reference_mse_obs"] = _reference_ode_mse(ds, consts)
            if kind == "sampling":
                metrics["mid_trajectory_iae"] = float(np.mean(
                    [_iae_vs_clean(ens, r) for r in ds.test]))
            rec = {"status": "ok", "cell": asdict(cell), "metrics": metrics,
                   "parameter_table": rep.parameter_table,
                   "wall_time": time.perf_counter() - t0}
        except (CrystalPirnnError, EnsembleError) as exc:
            log.error("cell %s failed: %s", cell.key, exc)
            rec = {"status": "failed", "cell": asdict(cell), "error": str(exc),
                   "wall_time": time.perf_counter() - t0}
        path.write_text(json.dumps(rec, indent=1) + "\n")
        records.append(rec)
    _write_long_table(root / "results.csv", kind, records)
    summary = {"study": kind, "n_cells": len(cells),
               "completed": sum(r["status"] == "ok" for r in records),
               "failed": [r["cell"]["key"] for r in records if r["status"] != "ok"],
               "dataset_seed": sc.seed, "train_seed": train_cfg.seed}
    (root / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    return summary


def _training_losses(ens: EnsembleResult) -> dict[str, float]:
    dl, pl = [], []
    for m in ens.members:
        h = m.history
        i = h.epoch.index(m.best_epoch) if m.best_epoch in h.epoch else len(h) - 1
        dl.append(h.data_loss[i])
        pl.append(h.physics_loss[i])
    return {"data_loss": float(np.mean(dl)), "weighted_physics_loss": float(np.mean(pl))}


def _reference_ode_mse(ds: DatasetBundle, consts) -> float:
    vals = []
    for r in ds.test:
        traj = reevaluate_ode(KineticParameters.reference(), r, consts)
        pr = prepare_run(r, ds.scales, ds.T_scale)
        vals.append(mse(traj.states / ds.scales, pr.obs, pr.mask))
    return float(np.mean(vals))


def _iae_vs_clean(ens: EnsembleResult, run: Run) -> float:
    m0 = ens.members[0]
    pr = prepare_run(run, m0.scales, m0.T_scale)
    mean = np.mean([predict(m.model, pr) for m in ens.members], axis=0)
    return integrated_abs_error(mean, pr.clean, run.t)


def _write_long_table(path: Path, kind: str, records: Sequence[dict]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["study", "cell", "metric", "value"])
        for rec in records:
            key = rec["cell"]["key"]
            if rec["status"] != "ok":
                w.writerow([kind, key, "failed", 1])
                continue
            for name, value in rec["metrics"].items():
                w.writerow([kind, key, name, format(float(value), ".10g")])


def run_noise_study(sc: StudyConfig, train_cfg: TrainConfig, out_dir, **kw):
    return run_study("noise", sc, train_cfg, out_dir, **kw)


def run_lambda_sweep(sc: StudyConfig, train_cfg: TrainConfig, out_dir, **kw):
    return run_study("lambda", sc, train_cfg, out_dir, **kw)


def run_sampling_study(sc: StudyConfig, train_cfg: TrainConfig, out_dir, **kw):
    return run_study("sampling", sc, train_cfg, out_dir, **kw)
