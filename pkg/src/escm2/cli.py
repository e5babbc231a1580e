"""Command-line entry point: ``escm2 <command> [options]``.

Exit codes: 0 success, 1 configuration error, 2 runtime or numerical failure.
Every command writes its outputs plus a ``manifest.json`` that holds the only
timestamps, so re-running a command with the same config and seed reproduces
all other files byte for byte.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import causal_diag, experiment
from .data import DatasetError, ensure_dir, read_dataset_csv, write_dataset_csv
from .experiment import ExperimentConfig, ExperimentConfigError
from .model import load_checkpoint, save_checkpoint
from .risks import ConfigError
from .synthgen import (SyntheticWorld, WorldConfig, WorldConfigError, generate_world, oracle_cvr_expectation,
                       sample_dataset, write_oracle_csv)
from .trainer import TrainingDivergedError

log = logging.getLogger("escm2")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

CONFIG_DOCS = {
    "world.num_users": "users in the synthetic exposure space",
    "world.num_items": "items in the synthetic exposure space",
    "world.user_fields": "category count of each user feature field",
    "world.item_fields": "category count of each item feature field",
    "world.target_ctr": "mean click probability over all pairs",
    "world.target_cvr": "conversion rate among clicks (click-weighted mean CVR)",
    "world.ctr_scale": "spread of the additive click-logit effects",
    "world.cvr_scale": "spread of the additive conversion-logit effects",
    "world.ctr_interaction": "weight of the user-latent x item-latent click-logit term",
    "world.ctr_noise": "std of per-pair click-logit noise",
    "world.cvr_noise": "std of per-pair conversion-logit noise",
    "world.confound_strength": "coefficient of logit(ctr) in the conversion logit",
    "world.confound_curvature": "extra conversion-logit drop for pairs with below-average click logit",
    "data.n_pairs": "distinct exposure pairs sampled into the dataset",
    "data.world_seed": "seed of the world, the sampled pairs and the split",
    "data.validation_fraction": "share of the non-test rows held out for checkpoint selection",
    "data.test_fraction": "share of all rows held out for evaluation",
    "model.embed_dim": "width of the shared feature embedding",
    "model.tower_widths": "hidden layer widths of every tower",
    "model.activation": "hidden activation: relu, sigmoid or identity",
    "train.learning_rate": "Adam step size",
    "train.weight_decay": "decoupled weight decay",
    "train.adam_beta1": "Adam first-moment decay",
    "train.adam_beta2": "Adam second-moment decay",
    "train.adam_epsilon": "Adam denominator epsilon",
    "train.batch_size": "rows per mini-batch",
    "train.max_iterations": "optimizer steps",
    "train.checkpoint_every": "validation/checkpoint interval in steps",
    "train.lr_schedule": "constant or cosine",
    "train.lr_final_fraction": "final step size as a fraction of learning_rate (cosine only)",
    "risk.variant": "naive, mtl_imp, esmm, escm2_ips or escm2_dr",
    "risk.lambda_c": "weight of the counterfactual CVR risk",
    "risk.lambda_g": "weight of the CTCVR loss",
    "risk.propensity_clip": "lower bound on propensities in IPS/DR denominators",
    "risk.truncate_propensity_gradient": "stop gradients through propensities in the CVR risk",
    "risk.imputation_stops_cvr_gradient": "keep the imputation loss from updating the CVR tower",
    "psm.caliper_factor": "caliper as a multiple of std(logit propensity)",
    "psm.ratio": "unclicked matches per clicked row",
    "sweep.parameter": "lambda_c or lambda_g",
    "sweep.grid": "sorted grid of values",
    "output_dir": "default output directory",
    "seeds": "run seeds (parameter init and batch order)",
}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if np.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")


def write_manifest(out: Path, command: str, argv: List[str], started: float) -> None:
    write_json(out / "manifest.json", {
        "command": command,
        "argv": argv,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "elapsed_seconds": round(time.time() - started, 3),
    })


def _load_config(args) -> ExperimentConfig:
    if args.config is None:
        return ExperimentConfig()
    return experiment.load_config(args.config)


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    return ensure_dir(args.out or cfg.output_dir)


def _seed(args, cfg: ExperimentConfig) -> int:
    return int(args.seed) if args.seed is not None else int(cfg.seeds[0])


def _load_world(data_dir: Path) -> Optional[SyntheticWorld]:
    meta = data_dir / "world.json"
    if not meta.exists():
        return None
    doc = json.loads(meta.read_text())
    return generate_world(WorldConfig(**doc["config"]), int(doc["seed"]))


def _load_dataset(path) -> tuple:
    """``(dataset, world or None)`` from a simulate output directory or a dataset CSV."""
    p = Path(path)
    if p.is_dir():
        return read_dataset_csv(p / "dataset.csv"), _load_world(p)
    return read_dataset_csv(p), _load_world(p.parent)


def cmd_simulate(args, cfg: ExperimentConfig, out: Path) -> None:
    # same world, sample and seeds as an in-memory experiment with data.world_seed = seed
    seed = int(args.seed) if args.seed is not None else cfg.data.world_seed
    world = generate_world(cfg.world, seed)
    dataset, oracle = sample_dataset(world, cfg.data.n_pairs, seed + 1)
    write_dataset_csv(dataset, out / "dataset.csv")
    write_oracle_csv(oracle, out / "oracle.csv")
    summary = world.summary()
    summary["sample_seed"] = seed + 1
    summary["n_pairs"] = len(dataset)
    summary["click_rate"] = dataset.click_rate()
    summary["clicked_conversion_rate"] = dataset.clicked_conversion_rate()
    summary["oracle_cvr_expectation"] = oracle_cvr_expectation(world, dataset.pair_id)
    write_json(out / "world.json", summary)
    log.info("wrote %d rows to %s", len(dataset), out)


def _experiment_from(args, cfg: ExperimentConfig) -> experiment.Experiment:
    if args.data is None:
        return experiment.build_experiment(cfg)
    dataset, world = _load_dataset(args.data)
    seed = world.seed if isinstance(world, SyntheticWorld) else cfg.data.world_seed
    tr, va, te = experiment.split_three(dataset, cfg.data, seed + 2)
    if world is None:
        n_cat = int(dataset.feature_ids.max()) + 1 if dataset.feature_ids.size else 1
        world = _CategoryCount(n_cat)
    return experiment.Experiment(world, dataset, tr, va, te)


class _CategoryCount:
    """Stand-in for a world when only a dataset file is available."""

    def __init__(self, n):
        self.num_feature_categories = n


def cmd_train(args, cfg: ExperimentConfig, out: Path) -> None:
    seed = _seed(args, cfg)
    exp = _experiment_from(args, cfg)
    try:
        params, history = experiment.train_variant(cfg, exp, seed)
    except TrainingDivergedError as exc:
        save_checkpoint(exc.last_good, out / "last_good_checkpoint.json",
                        extra={"variant": cfg.risk.variant, "seed": seed, "diverged_at": exc.iteration})
        exc.history.to_csv(out / "history.csv")
        raise CliError(f"{exc}; last good checkpoint written to {out / 'last_good_checkpoint.json'}",
                       EXIT_RUNTIME) from exc
    save_checkpoint(params, out / "checkpoint.json",
                    extra={"variant": cfg.risk.variant, "seed": seed,
                           "best_iteration": history.best_checkpoint})
    history.to_csv(out / "history.csv")
    log.info("best checkpoint at iteration %s", history.best_checkpoint)


def cmd_evaluate(args, cfg: ExperimentConfig, out: Path) -> None:
    if not args.checkpoint:
        raise CliError("evaluate needs --checkpoint", EXIT_CONFIG)
    params = load_checkpoint(args.checkpoint[0])
    dataset, world = _load_dataset(args.data) if args.data else (None, None)
    if dataset is None:
        exp = experiment.build_experiment(cfg)
        dataset, world = exp.test, exp.world
    reference = experiment.reference_for(world, dataset)
    try:
        report = experiment.evaluate(params, dataset, reference)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_RUNTIME) from exc
    write_json(out / "eval_report.json", report)


def cmd_diagnose(args, cfg: ExperimentConfig, out: Path) -> None:
    if not args.checkpoint:
        raise CliError("diagnose needs at least one --checkpoint", EXIT_CONFIG)
    models = {}
    for path in args.checkpoint:
        name = Path(path).stem
        if Path(path).name == "checkpoint.json":
            name = Path(path).parent.name or name
        while name in models:
            name += "'"
        models[name] = load_checkpoint(path)
    dataset, world = _load_dataset(args.data) if args.data else (None, None)
    if dataset is None:
        exp = experiment.build_experiment(cfg)
        dataset, world = exp.dataset, exp.world
    reference = experiment.reference_for(world, dataset)
    report = experiment.diagnose(models, dataset, cfg.psm, reference)
    write_json(out / "diagnosis.json", report)


def _sweep_cell(cfg_dict: dict, data: Optional[str]):
    """Picklable cell runner for process pools."""
    return _SweepRunner(cfg_dict, data)


class _SweepRunner:
    def __init__(self, cfg_dict, data):
        self.cfg_dict = cfg_dict
        self.data = data
        self._exp = None

    def __call__(self, param, value, seed):
        cfg = experiment.config_from_dict(self.cfg_dict)
        if self._exp is None:
            ns = argparse.Namespace(data=self.data)
            self._exp = _experiment_from(ns, cfg)
        params, _ = experiment.train_variant(cfg, self._exp, seed, **{param: value})
        from .model import predict
        p = predict(params, self._exp.test.feature_ids)
        return causal_diag.ranking_metrics(p, self._exp.test.click, self._exp.test.conversion)


def cmd_sweep(args, cfg: ExperimentConfig, out: Path) -> None:
    parameter = args.param or cfg.sweep.parameter
    grid = [float(g) for g in args.grid.split(",")] if args.grid else list(cfg.sweep.grid)
    if parameter not in ("lambda_c", "lambda_g"):
        raise CliError(f"--param must be lambda_c or lambda_g, not {parameter!r}", EXIT_CONFIG)
    if grid != sorted(grid) or not grid:
        raise CliError("--grid must be a non-empty sorted list", EXIT_CONFIG)
    seeds = [int(args.seed)] if args.seed is not None else list(cfg.seeds)
    runner = _sweep_cell(cfg.to_dict(), args.data)
    cells = causal_diag.sweep(parameter, grid, seeds, runner, jobs=args.jobs)
    causal_diag.write_sweep_csv(cells, out / "sweep.csv")
    write_json(out / "sweep_summary.json", {
        "summary": causal_diag.summarize_sweep(cells),
        "errors": [{"value": c.value, "seed": c.seed, "error": c.error} for c in cells if c.error],
    })


def config_reference() -> dict:
    """Every config key with its default value and meaning."""
    defaults = ExperimentConfig().to_dict()
    out = {}
    for section, value in defaults.items():
        if isinstance(value, dict):
            for key, v in value.items():
                out[f"{section}.{key}"] = {"default": v, "doc": CONFIG_DOCS.get(f"{section}.{key}", "")}
        else:
            out[section] = {"default": value, "doc": CONFIG_DOCS.get(section, "")}
    return out


def cmd_config_reference(args, cfg: ExperimentConfig, out: Optional[Path]) -> None:
    ref = {"defaults": ExperimentConfig().to_dict(), "keys": config_reference()}
    text = json.dumps(ref, indent=2, sort_keys=True) + "\n"
    if args.out:
        ensure_dir(args.out)
        Path(args.out, "config_reference.json").write_text(text)
    else:
        sys.stdout.write(text)


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "diagnose": cmd_diagnose,
    "sweep": cmd_sweep,
    "config-reference": cmd_config_reference,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="escm2", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="run seed (overrides config seeds)")
        p.add_argument("--jobs", type=int, default=1, help="parallel sweep workers")
        if name in ("train", "evaluate", "diagnose", "sweep"):
            p.add_argument("--data", help="simulate output directory or dataset CSV")
        if name in ("evaluate", "diagnose"):
            p.add_argument("--checkpoint", action="append", help="checkpoint JSON (repeatable)")
        if name == "sweep":
            p.add_argument("--param", choices=("lambda_c", "lambda_g"))
            p.add_argument("--grid", help="comma-separated sorted values")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("ESCM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    started = time.time()
    try:
        cfg = _load_config(args)
        if args.jobs < 1:
            raise CliError("--jobs must be >= 1", EXIT_CONFIG)
        if args.command == "config-reference":
            cmd_config_reference(args, cfg, None)
            return EXIT_OK
        out = _out_dir(args, cfg)
        COMMANDS[args.command](args, cfg, out)
        write_manifest(out, args.command, argv, started)
        return EXIT_OK
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ExperimentConfigError, ConfigError, WorldConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ArithmeticError, ValueError, DatasetError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
