"""Synthetic batch-crystallization corpus.

Operating conditions are sampled uniformly, each batch is simulated with
the reference kinetics, Gaussian measurement noise is injected, optional
downsampling masks hide observations, and the runs are split 6:2:2 with
max-normalisation fitted on the training observations.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DatasetError, DivergenceError, ParseError, RangeError, ValidationError, VersionError
from .integrate import IntegratorConfig, Trajectory, integrate
from .pbm import (STATE_NAMES, KineticParameters, PhysicalConstants, SolubilityModel,
                  solubility, rhs_numpy)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
SCHEMES = ("full", "p2", "p3", "p5", "p9")
P9_STAMPS = (0.0, 5.0, 15.0, 35.0, 75.0, 150.0, 250.0, 375.0, 500.0)
T_END = 500.0
T_FINAL = 0.0


@dataclass(frozen=True)
class ConditionRanges:
    T_plat: tuple[float, float] = (30.0, 50.0)
    cool_rate: tuple[float, float] = (0.15, 0.60)
    t_plat: tuple[float, float] = (80.0, 140.0)
    C0: tuple[float, float] = (0.37, 0.50)

    def __post_init__(self):
        for name, (lo, hi) in asdict(self).items():
            if not lo <= hi:
                raise ValidationError(f"range {name}: min {lo} exceeds max {hi}")
        if self.cool_rate[0] <= 0:
            raise ValidationError("cooling rates must be positive magnitudes")


@dataclass(frozen=True)
class RunConditions:
    """One batch recipe; ``cool_rate`` is a positive magnitude in degC/min."""

    T_plat: float
    cool_rate: float
    t_plat: float
    C0: float
    T_final: float = T_FINAL
    t_end: float = T_END

    def __post_init__(self):
        if not self.cool_rate > 0:
            raise ValidationError("cool_rate must be a positive magnitude")
        if not 0 < self.t_plat < self.t_cool <= self.t_end:
            raise ValidationError(
                f"need 0 < t_plat < t_cool <= t_end, got {self.t_plat}, {self.t_cool}, {self.t_end}")
        if not self.C0 > 0:
            raise ValidationError("C0 must be positive")

    @property
    def t_cool(self) -> float:
        return self.t_plat + (self.T_plat - self.T_final) / self.cool_rate

    def within(self, ranges: ConditionRanges) -> bool:
        checks = ((self.T_plat, ranges.T_plat), (self.cool_rate, ranges.cool_rate),
                  (self.t_plat, ranges.t_plat), (self.C0, ranges.C0))
        return all(lo <= v <= hi for v, (lo, hi) in checks)


@dataclass(frozen=True)
class SeedState:
    """Initial crystal moments: ``mu0`` seeds of uniform size ``size`` [um]."""

    mu0: float = 5e-5
    size: float = 50.0

    def __post_init__(self):
        if not (self.mu0 > 0 and self.size > 0):
            raise ValidationError("seed number and size must be positive")

    def initial_state(self, C0: float) -> np.ndarray:
        L = self.size
        return np.array([self.mu0, self.mu0 * L, self.mu0 * L ** 2, self.mu0 * L ** 3, C0])


@dataclass
class Run:
    """One simulated batch on a uniform grid; arrays are (N, 5) in raw units."""

    index: int
    conditions: RunConditions
    t: np.ndarray
    T_series: np.ndarray
    clean: np.ndarray
    observed: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        n = len(self.t)
        for name in ("clean", "observed", "mask"):
            if getattr(self, name).shape != (n, 5):
                raise ValidationError(f"run {self.index}: {name} has shape "
                                      f"{getattr(self, name).shape}, expected {(n, 5)}")
        if self.T_series.shape != (n,):
            raise ValidationError(f"run {self.index}: temperature series length mismatch")

    @property
    def clean_states(self) -> Trajectory:
        return Trajectory(self.t, self.clean)

    @property
    def observed_states(self) -> Trajectory:
        return Trajectory(self.t, self.observed)

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])


def sample_conditions(rng: np.random.Generator, n_runs: int,
                      ranges: ConditionRanges | None = None) -> list[RunConditions]:
    if n_runs < 1:
        raise ValidationError("n_runs must be at least 1")
    r = ranges or ConditionRanges()
    u = rng.uniform(size=(n_runs, 4))
    out = []
    for row in u:
        vals = [lo + (hi - lo) * x for x, (lo, hi) in
                zip(row, (r.T_plat, r.cool_rate, r.t_plat, r.C0))]
        out.append(RunConditions(*vals))
    return out


def temperature_profile(cond: RunConditions, t):
    """Plateau, linear cooling at ``cool_rate``, then a hold at ``T_final`` [degC]."""
    ta = np.asarray(t, dtype=float)
    if ta.size and (ta.min() < 0 or ta.max() > cond.t_end + 1e-9):
        raise RangeError(f"time outside [0, {cond.t_end}]")
    T = np.where(ta < cond.t_plat, cond.T_plat,
                 np.where(ta < cond.t_cool, cond.T_plat - cond.cool_rate * (ta - cond.t_plat),
                          cond.T_final))
    return float(T) if T.ndim == 0 else T


def time_grid(dt: float, t_end: float = T_END) -> np.ndarray:
    n = int(round(t_end / dt))
    if n < 2 or abs(n * dt - t_end) > 1e-9:
        raise ValidationError(f"dt={dt} must divide t_end={t_end} into at least 2 steps")
    return np.linspace(0.0, t_end, n + 1)


def simulate_run(cond: RunConditions, params: KineticParameters | None = None,
                 model: SolubilityModel | None = None, consts: PhysicalConstants | None = None,
                 cfg: IntegratorConfig | None = None, seed: SeedState | None = None,
                 dt: float = 1.0, index: int = 0) -> Run:
    """Integrate one batch and return it with ``observed == clean`` and a full mask."""
    params = params or KineticParameters.reference()
    model = model or SolubilityModel()
    consts = consts or PhysicalConstants()
    seed = seed or SeedState()
    t = time_grid(dt, cond.t_end)
    x0 = seed.initial_state(cond.C0)
    for T_c in (cond.T_plat, cond.T_final):  # the program is monotone between these
        solubility(model, T_c + 273.15)
    rhs = rhs_numpy(params, model, consts, lambda s: temperature_profile(cond, min(s, cond.t_end)))
    try:
        traj = integrate(rhs, x0, t, cfg, breakpoints=(cond.t_plat, cond.t_cool))
    except DivergenceError as exc:
        raise DivergenceError(f"run {index}: {exc}", exc.t_fail, index) from exc
    states = traj.states
    peak = states[:, 0].max()
    if peak > 0 and x0[0] > 1e-3 * peak:
        log.warning("run %d: seed mu0 %.3g is within 3 decades of the trajectory maximum %.3g",
                    index, x0[0], peak)
    T = np.asarray(temperature_profile(cond, t), dtype=float)
    return Run(index, cond, t, T, states, states.copy(), np.ones((len(t), 5), dtype=bool))


def add_noise(run: Run, level: float, rng: np.random.Generator) -> Run:
    """Add N(0, (level * std_t(clean_v))^2) to every state variable; no clamping."""
    if level < 0:
        raise ValidationError("noise level must be non-negative")
    if level == 0:
        return replace(run, observed=run.clean.copy())
    sd = run.clean.std(axis=0)
    noisy = run.clean + rng.standard_normal(run.clean.shape) * (level * sd)
    return replace(run, observed=noisy)


def scheme_stamps(cond: RunConditions, scheme: str) -> tuple[float, ...] | None:
    """Observation times of a sampling scheme (``None`` means every grid point)."""
    if scheme == "full":
        return None
    if scheme == "p2":
        return (0.0, cond.t_end)
    if scheme == "p3":
        return (0.0, float(round(cond.t_plat / 2)), cond.t_end)
    if scheme == "p5":
        return (0.0, float(round(cond.t_plat / 2)), float(round((cond.t_plat + cond.t_cool) / 2)),
                float(round(cond.t_cool)), cond.t_end)
    if scheme == "p9":
        return P9_STAMPS
    raise ValidationError(f"unknown sampling scheme {scheme!r}; expected one of {SCHEMES}")


def downsample_mask(run: Run, scheme: str) -> np.ndarray:
    """Boolean (N, 5) mask; stamps are snapped to the nearest grid time."""
    stamps = scheme_stamps(run.conditions, scheme)
    n = len(run.t)
    if stamps is None:
        return np.ones((n, 5), dtype=bool)
    mask = np.zeros((n, 5), dtype=bool)
    for s in stamps:
        mask[int(np.argmin(np.abs(run.t - s)))] = True
    return mask


@dataclass
class DatasetBundle:
    train: list[Run]
    val: list[Run]
    test: list[Run]
    scales: np.ndarray  # per-state maxima over the training observations
    T_scale: float  # max training temperature [degC]
    noise_level: float = 0.0
    solubility_shift: float = 0.0
    sampling_scheme: str = "full"
    rng_seed: int = 0
    dt: float = 1.0
    version: int = FORMAT_VERSION

    def __post_init__(self):
        self.scales = np.asarray(self.scales, dtype=float)
        if self.scales.shape != (5,) or np.any(~(self.scales > 0)):
            raise DatasetError(f"normalisation scales must be 5 positive values, got {self.scales}")
        if not self.T_scale > 0:
            raise DatasetError("temperature scale must be positive")
        ids = [r.index for r in self.runs]
        if len(ids) != len(set(ids)):
            raise DatasetError("train/val/test splits overlap")

    @property
    def runs(self) -> list[Run]:
        return self.train + self.val + self.test

    def subset(self, n_train: int) -> "DatasetBundle":
        """The first ``n_train`` training runs; scales are refitted on them."""
        if not 1 <= n_train <= len(self.train):
            raise ValidationError(f"n_train must be in [1, {len(self.train)}]")
        train = self.train[:n_train]
        scales, T_scale = fit_scales(train)
        return replace(self, train=train, scales=scales, T_scale=T_scale)

    def normalize(self, states: np.ndarray) -> np.ndarray:
        return np.asarray(states) / self.scales

    def denormalize(self, states: np.ndarray) -> np.ndarray:
        return np.asarray(states) * self.scales

    def checksum(self) -> str:
        h = hashlib.sha256()
        for r in self.runs:
            for a in (r.t, r.T_series, r.clean, r.observed, r.mask.astype(np.uint8)):
                h.update(np.ascontiguousarray(a).tobytes())
        h.update(self.scales.tobytes())
        return h.hexdigest()


def fit_scales(train: Sequence[Run]) -> tuple[np.ndarray, float]:
    """Per-state maxima of the visible training observations, and max temperature."""
    if not train:
        raise DatasetError("cannot fit scales on an empty training set")
    scales = np.full(5, -np.inf)
    for r in train:
        vis = np.where(r.mask, r.observed, -np.inf)
        scales = np.maximum(scales, vis.max(axis=0))
    if np.any(~(scales > 0)):
        bad = [STATE_NAMES[i] for i in np.flatnonzero(~(scales > 0))]
        raise DatasetError(f"degenerate normalisation scale (max <= 0) for {bad}")
    T_scale = max(float(np.max(r.T_series)) for r in train)
    if not T_scale > 0:
        raise DatasetError("degenerate temperature scale")
    return scales, T_scale


def split_sizes(n_runs: int) -> tuple[int, int, int]:
    """6:2:2 with floor for val/test and the remainder to train."""
    n_val = n_test = int(math.floor(0.2 * n_runs))
    n_train = n_runs - n_val - n_test
    if n_train < 1:
        raise ValidationError(f"{n_runs} runs are too few for a 6:2:2 split")
    return n_train, n_val, n_test


def _run_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _generate_one(args) -> Run:
    (index, cond, noise_level, shift, scheme, seed, dt, params, consts, seed_state, cfg) = args
    model = SolubilityModel().shifted(shift)
    run = simulate_run(cond, params, model, consts, cfg, seed_state, dt, index)
    run = add_noise(run, noise_level, _run_rng(seed, index))
    return replace(run, mask=downsample_mask(run, scheme))


def build_dataset(n_runs: int = 100, noise_level: float = 0.0, shift: float = 0.0,
                  scheme: str = "full", seed: int = 0, dt: float = 1.0,
                  ranges: ConditionRanges | None = None,
                  params: KineticParameters | None = None,
                  consts: PhysicalConstants | None = None,
                  seed_state: SeedState | None = None,
                  cfg: IntegratorConfig | None = None, jobs: int = 1) -> DatasetBundle:
    """Simulate, perturb, mask, split and normalise a corpus of batches."""
    if scheme not in SCHEMES:
        raise ValidationError(f"unknown sampling scheme {scheme!r}; expected one of {SCHEMES}")
    n_train, n_val, _ = split_sizes(n_runs)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    conds = sample_conditions(rng, n_runs, ranges)
    params = params or KineticParameters.reference()
    consts = consts or PhysicalConstants()
    seed_state = seed_state or SeedState()
    tasks = [(i, c, noise_level, shift, scheme, seed, dt, params, consts, seed_state, cfg)
             for i, c in enumerate(conds)]
    if jobs > 1 and n_runs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_generate_one, tasks))
    else:
        runs = [_generate_one(t) for t in tasks]
    order = rng.permutation(n_runs)
    train = [runs[i] for i in order[:n_train]]
    val = [runs[i] for i in order[n_train:n_train + n_val]]
    test = [runs[i] for i in order[n_train + n_val:]]
    scales, T_scale = fit_scales(train)
    log.info("built %d runs (%d/%d/%d), noise=%g shift=%g scheme=%s seed=%d",
             n_runs, len(train), len(val), len(test), noise_level, shift, scheme, seed)
    return DatasetBundle(train, val, test, scales, T_scale, noise_level, shift, scheme,
                         seed, dt)


# --------------------------------------------------------------------------- I/O

_CSV_COLUMNS = (["t", "T"] + list(STATE_NAMES) + [f"{s}_clean" for s in STATE_NAMES]
                + [f"mask_{s}" for s in STATE_NAMES])
_CSV_HEADER = ",".join(_CSV_COLUMNS)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_dataset(bundle: DatasetBundle, path: str | Path) -> Path:
    """Write ``meta.json`` plus one CSV per run into directory ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    splits = {"train": bundle.train, "val": bundle.val, "test": bundle.test}
    meta = {
        "format": "crystal_pirnn-dataset",
        "version": bundle.version,
        "seed": bundle.rng_seed,
        "noise_level": bundle.noise_level,
        "solubility_shift": bundle.solubility_shift,
        "sampling_scheme": bundle.sampling_scheme,
        "dt": bundle.dt,
        "scales": [_fmt(s) for s in bundle.scales],
        "T_scale": _fmt(bundle.T_scale),
        "runs": [
            {"index": r.index, "split": name, "file": f"run_{r.index:04d}.csv",
             "conditions": {k: _fmt(v) for k, v in asdict(r.conditions).items()}}
            for name, runs in splits.items() for r in runs
        ],
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=1) + "\n")
    for r in bundle.runs:
        lines = [_CSV_HEADER]
        for k in range(len(r.t)):
            row = [_fmt(r.t[k]), _fmt(r.T_series[k])]
            row += [_fmt(v) for v in r.observed[k]] + [_fmt(v) for v in r.clean[k]]
            row += ["1" if m else "0" for m in r.mask[k]]
            lines.append(",".join(row))
        (root / f"run_{r.index:04d}.csv").write_text("\n".join(lines) + "\n")
    return root


def _read_run_csv(path: Path, index: int, cond: RunConditions) -> Run:
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"{path}: cannot read ({exc})") from exc
    lines = text.splitlines()
    if not lines or lines[0].strip() != _CSV_HEADER:
        raise ParseError(f"{path}:1: unexpected header")
    rows = []
    for ln, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != len(_CSV_COLUMNS):
            raise ParseError(f"{path}:{ln}: expected {len(_CSV_COLUMNS)} fields, got {len(fields)}")
        try:
            nums = [float(f) for f in fields[:12]]
            flags = [int(f) for f in fields[12:]]
        except ValueError as exc:
            raise ParseError(f"{path}:{ln}: {exc}") from None
        if any(f not in (0, 1) for f in flags):
            raise ParseError(f"{path}:{ln}: mask entries must be 0 or 1")
        rows.append(nums + flags)
    if len(rows) < 3:
        raise ParseError(f"{path}: truncated file ({len(rows)} data rows)")
    a = np.array(rows, dtype=float)
    t = a[:, 0]
    if np.any(np.diff(t) <= 0):
        raise ParseError(f"{path}: time column is not strictly increasing")
    return Run(index, cond, t, a[:, 1], a[:, 7:12], a[:, 2:7], a[:, 12:17].astype(bool))


def load_dataset(path: str | Path) -> DatasetBundle:
    root = Path(path)
    meta_path = root / "meta.json"
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError as exc:
        raise ParseError(f"{meta_path}: missing dataset metadata") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{meta_path}:{exc.lineno}: {exc.msg}") from None
    if meta.get("format") != "crystal_pirnn-dataset":
        raise ParseError(f"{meta_path}: not a dataset metadata file")
    if meta.get("version") != FORMAT_VERSION:
        raise VersionError(f"{meta_path}: dataset version {meta.get('version')!r}, "
                           f"this build reads version {FORMAT_VERSION}")
    try:
        splits: dict[str, list[Run]] = {"train": [], "val": [], "test": []}
        for entry in meta["runs"]:
            cond = RunConditions(**{k: float(v) for k, v in entry["conditions"].items()})
            run = _read_run_csv(root / entry["file"], int(entry["index"]), cond)
            splits[entry["split"]].append(run)
        bundle = DatasetBundle(
            splits["train"], splits["val"], splits["test"],
            np.array([float(s) for s in meta["scales"]]), float(meta["T_scale"]),
            float(meta["noise_level"]), float(meta["solubility_shift"]),
            str(meta["sampling_scheme"]), int(meta["seed"]), float(meta["dt"]),
            int(meta["version"]))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"{meta_path}: malformed metadata ({exc!r})") from None
    return bundle
