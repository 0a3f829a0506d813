"""Command-line entry point: generate, train, evaluate, study and gradcheck."""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .config import RootConfig, load_config
from .datagen import SCHEMES, build_dataset, load_dataset, save_dataset
from .errors import (ContractError, CrystalPirnnError, DatasetError, ShapeError, ValidationError)
from .evaluate import evaluate, run_study
from .gradcheck import run_all
from .model import PIRNN, load_checkpoint, save_checkpoint
from .train import (EnsembleResult, TrainedModel, TrainHistory,
                    load_training_state, save_training_state, train)

log = logging.getLogger("crystal_pirnn")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
JOBS_ENV = "CRYSTAL_PIRNN_JOBS"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------------ helpers

def _default_jobs() -> int:
    raw = os.environ.get(JOBS_ENV)
    if raw is None:
        return 1
    try:
        jobs = int(raw)
    except ValueError:
        raise CliError(f"{JOBS_ENV} must be an integer, got {raw!r}", EXIT_VALIDATION) from None
    if jobs < 1:
        raise CliError(f"{JOBS_ENV} must be at least 1", EXIT_VALIDATION)
    return jobs


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    """Translate flags into config overrides (flags win over the file)."""
    o: dict[str, dict[str, Any]] = {"dataset": {}, "train": {}, "study": {}}
    if args.seed is not None:
        if args.command == "generate":
            o["dataset"]["seed"] = args.seed
        elif args.command == "study":
            o["study"]["seed"] = args.seed
            o["train"]["seed"] = args.seed
        else:
            o["train"]["seed"] = args.seed
    if args.lambda_ is not None:
        o["train"]["lambda_physics"] = args.lambda_
    if args.noise is not None:
        o["dataset"]["noise"] = args.noise
    if args.scheme is not None:
        o["dataset"]["scheme"] = args.scheme
    o["study"]["jobs"] = args.jobs
    return {k: v for k, v in o.items() if v}


def _require_empty(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise CliError(f"{path} is not empty; pass --force to overwrite", EXIT_IO)
        shutil.rmtree(path)


def _print_table(rows: list[dict]) -> None:
    print(f"{'parameter':<10}{'value':>18}{'reference':>14}{'rel. dev.':>12}")
    for r in rows:
        print(f"{r['parameter']:<10}{r['formatted']:>18}{r['reference']:>14.5g}"
              f"{100 * r['rel_dev']:>11.1f}%")


# ------------------------------------------------------------------ commands

def cmd_generate(cfg: RootConfig, args) -> int:
    out = Path(args.out or cfg.io.data_dir)
    _require_empty(out, args.force)
    d = cfg.dataset
    bundle = build_dataset(d.n_runs, d.noise, d.shift, d.scheme, d.seed, d.dt, d.ranges,
                           consts=d.constants, seed_state=d.seed_state, jobs=args.jobs)
    save_dataset(bundle, out)
    (out / "config.yaml").write_text(cfg.to_yaml())
    summary = {"train": len(bundle.train), "val": len(bundle.val), "test": len(bundle.test),
               "scales": bundle.scales.tolist(), "T_scale": bundle.T_scale,
               "checksum": bundle.checksum(), "dataset_seed": d.seed}
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(f"dataset written to {out}")
    print(f"split train/val/test: {summary['train']}/{summary['val']}/{summary['test']}")
    print("scales: " + " ".join(f"{s:.4g}" for s in bundle.scales) + f"  T_scale {bundle.T_scale:g}")
    print(f"dataset seed {d.seed}  checksum {summary['checksum']}")
    return EXIT_OK


def _train_member(cfg: RootConfig, dataset, seed: int, directory: Path) -> TrainedModel:
    tcfg = replace(cfg.train, seed=seed)
    every = max(1, tcfg.checkpoint_every)

    def on_epoch(epoch, state):
        if (epoch + 1) % every == 0 or epoch + 1 == tcfg.epochs:
            save_training_state(state, directory)

    if (directory / "last.npz").exists():
        state = load_training_state(directory)
        if state.model.config != cfg.model:
            raise CliError(f"{directory}: saved model configuration differs; use --force",
                           EXIT_VALIDATION)
        log.info("member seed %d: resuming at epoch %d", seed, state.next_epoch)
        if state.next_epoch >= tcfg.epochs:
            state.model.load_state_arrays(state.best_state)
            return TrainedModel(state.model, state.history, state.best_epoch,
                                min(state.history.val_mse), tcfg, dataset.scales.copy(),
                                dataset.T_scale)
        return train(state.model, dataset, tcfg, cfg.dataset.constants,
                     start_epoch=state.next_epoch, history=state.history,
                     adam_states=state.adam_states, best_state=state.best_state,
                     on_epoch=on_epoch)
    model = PIRNN(cfg.model, seed=seed)
    return train(model, dataset, tcfg, cfg.dataset.constants, on_epoch=on_epoch)


def cmd_train(cfg: RootConfig, args) -> int:
    data_dir = Path(args.data or cfg.io.data_dir)
    out = Path(args.out or cfg.io.run_dir)
    if args.force and out.exists():
        shutil.rmtree(out)
    dataset = load_dataset(data_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_yaml())
    seeds = [cfg.train.seed + i for i in range(cfg.study.n_seeds)]
    members = []
    for seed in seeds:
        mdir = out / f"member_{seed}"
        tm = _train_member(cfg, dataset, seed, mdir)
        meta = {"seed": seed, "best_epoch": tm.best_epoch, "best_val": tm.best_val,
                "scales": tm.scales.tolist(), "T_scale": tm.T_scale,
                "dataset_seed": dataset.rng_seed, "dataset_checksum": dataset.checksum()}
        save_checkpoint(tm.model, mdir / "best.npz", meta)
        tm.history.to_csv(mdir / "history.csv")
        members.append(tm)
        print(f"member seed {seed}: best epoch {tm.best_epoch}, validation MSE {tm.best_val:.4g}")
    ens = EnsembleResult(members, seeds)
    table = ens.parameter_table()
    summary = {"members": [f"member_{s}/best.npz" for s in seeds], "parameters": table,
               "train_seed": cfg.train.seed, "dataset_seed": dataset.rng_seed,
               "lambda_physics": cfg.train.lambda_physics}
    (out / "ensemble.json").write_text(json.dumps(summary, indent=1) + "\n")
    _print_table(table)
    print(f"train seed {cfg.train.seed}  dataset seed {dataset.rng_seed}")
    return EXIT_OK


def _load_members(path: Path, cfg: RootConfig) -> list[TrainedModel]:
    if path.is_dir():
        files = sorted(path.glob("member_*/best.npz"))
        if not files:
            raise CliError(f"{path}: no member checkpoints found", EXIT_IO)
    elif path.exists():
        files = [path]
    else:
        raise CliError(f"checkpoint {path} does not exist", EXIT_IO)
    members = []
    for f in files:
        model, meta = load_checkpoint(f)
        try:
            scales, T_scale = np.array(meta["scales"], dtype=float), float(meta["T_scale"])
        except KeyError:
            raise CliError(f"{f}: checkpoint lacks normalisation metadata", EXIT_IO) from None
        members.append(TrainedModel(model, TrainHistory(), int(meta.get("best_epoch", -1)),
                                    float(meta.get("best_val", float("nan"))), cfg.train,
                                    scales, T_scale))
    return members


def cmd_evaluate(cfg: RootConfig, args) -> int:
    if not args.checkpoint:
        raise CliError("evaluate needs --checkpoint", EXIT_VALIDATION)
    members = _load_members(Path(args.checkpoint), cfg)
    dataset = load_dataset(Path(args.data or cfg.io.data_dir))
    report = evaluate(members, dataset, consts=cfg.dataset.constants, band_runs=args.bands)
    out = Path(args.out or Path(args.checkpoint if Path(args.checkpoint).is_dir()
                                else Path(args.checkpoint).parent) / "evaluation")
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "report.json")
    report.per_run_csv(out / "per_run.csv")
    print(f"test runs: {len(report.per_run)}  ensemble members: {len(members)}")
    print(f"forward prediction MSE  vs observed {report.forward_mse_obs:.4g}  "
          f"vs clean {report.forward_mse_clean:.4g}")
    print(f"re-evaluated ODE MSE    vs observed {report.ode_mse_obs:.4g}  "
          f"vs clean {report.ode_mse_clean:.4g}  (diverged runs: {report.n_ode_failed})")
    print(f"noise floor {report.noise_floor:.4g}  parameter log-MSE {report.parameter_log_mse:.4g}")
    _print_table(report.parameter_table)
    print(f"report written to {out}")
    return EXIT_OK


def cmd_study(cfg: RootConfig, args) -> int:
    kind = args.kind
    out = Path(args.out or Path(cfg.io.study_dir) / kind)
    if args.force and out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_yaml())
    summary = run_study(kind, cfg.study, cfg.train, out, model_cfg=cfg.model,
                        consts=cfg.dataset.constants, seed_state=cfg.dataset.seed_state)
    print(f"{kind} study: {summary['completed']}/{summary['n_cells']} cells complete; "
          f"table {out / 'results.csv'}")
    print(f"dataset seed {cfg.study.seed}  train seed {cfg.train.seed}")
    if summary["failed"]:
        print("failed cells: " + ", ".join(summary["failed"]))
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_gradcheck(cfg: RootConfig, args) -> int:
    results = run_all(seed=args.seed or 0)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<30} {r.error:.2e} (tol {r.tolerance:g})")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_NUMERIC if failed else EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate,
            "study": cmd_study, "gradcheck": cmd_gradcheck}


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="seed of the command's random stream")
    common.add_argument("--preset", choices=("desk", "paper"), help="budget preset")
    common.add_argument("--jobs", type=int, default=None,
                        help=f"worker processes (default ${JOBS_ENV} or 1)")
    common.add_argument("--lambda", dest="lambda_", type=float, help="physics loss weight")
    common.add_argument("--noise", type=float, help="noise level in trajectory std units")
    common.add_argument("--scheme", choices=SCHEMES, help="sampling scheme")
    common.add_argument("--force", action="store_true", help="overwrite existing output")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="crystal-pirnn", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="simulate and save a dataset")
    t = sub.add_parser("train", parents=[common], help="train an ensemble (resumable)")
    t.add_argument("--data", help="dataset directory")
    e = sub.add_parser("evaluate", parents=[common], help="evaluate trained checkpoints")
    e.add_argument("--checkpoint", help="member checkpoint or training output directory")
    e.add_argument("--data", help="dataset directory")
    e.add_argument("--bands", type=int, default=3, help="test runs with stored 95%% bands")
    s = sub.add_parser("study", parents=[common], help="run a resumable study grid")
    s.add_argument("kind", choices=("noise", "lambda", "sampling"))
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.jobs is None:
            args.jobs = _default_jobs()
        if args.jobs < 1:
            raise CliError("--jobs must be at least 1", EXIT_VALIDATION)
        cfg = load_config(args.config, args.preset, _overrides(args))
        return COMMANDS[args.command](cfg, args)
    except CliError as exc:
        log.error("%s", exc)
        return exc.code
    except (ValidationError, ContractError, ShapeError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_VALIDATION
    except (DatasetError, OSError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except CrystalPirnnError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
