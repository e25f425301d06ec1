"""Command-line driver: ``twode gen|train|eval|run|check``.

Exit codes: 0 on success, 2 when some experiment cells failed, 1 on a
configuration or input error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .ablate import VariantKind, variant_grid
from .env import DEFAULT_HORIZON, EnvConfig, EnvKind, PolicySpec, generate, named_target, true_policy_value
from .experiments import (EVAL_HEADER, ConfigError, ExperimentSpec, TrainGrid, parse_config, read_dataset, run,
                          write_csv, write_dataset, write_latents)
from .ntn import Architecture, Batch, init_params, load_checkpoint, loss_and_grad, save_checkpoint
from .ope import OpeConfig, estimate_from_model
from .rng import derive_seed
from .train import TrainingDiverged, grid_search, refit

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2

log = logging.getLogger("twode")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _u64(text):
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _common(p):
    p.add_argument("--config", type=Path, help="INI experiment config")
    p.add_argument("--seed", type=_u64, help="master seed (overrides the config)")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--fast", action="store_true", help="desk-scale shrink of N, T, epochs, m and ground truth")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    p.add_argument("--deterministic", action="store_true", help="byte-stable outputs (zeroes runtime columns)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="twode", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"twode {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="simulate a dataset and write it as CSV")
    _common(g)
    g.add_argument("--env", choices=[e.value for e in EnvKind], default=EnvKind.DYNAMIC_PROCESS.value)
    g.add_argument("--n", type=int, default=100, help="number of trajectories")
    g.add_argument("--horizon", type=int, help="trajectory length (env default if omitted)")
    g.add_argument("--gamma", type=float, default=1.0, help="confounding strength in [0, 1]")

    t = sub.add_parser("train", help="fit a model on a dataset CSV and save a checkpoint")
    _common(t)
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--method", choices=[v.value for v in VariantKind], default=VariantKind.TWD.value)
    t.add_argument("--epochs", type=int, help="override max_epochs")

    e = sub.add_parser("eval", help="plug-in estimate of a target policy value from a checkpoint")
    _common(e)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--target", default="A")
    e.add_argument("--m", type=int, default=100, help="rollouts per trajectory")
    e.add_argument("--gamma", type=float, default=1.0, help="confounding strength for the ground truth")
    e.add_argument("--truth-rollouts", type=int, default=10_000, help="0 skips the ground truth")
    e.add_argument("--method", default="TWD", help="label written to the CSV")

    r = sub.add_parser("run", help="run an experiment recipe from a config")
    _common(r)

    c = sub.add_parser("check", help="validate a config and self-test the gradient")
    _common(c)
    return parser


def _load_spec(args) -> ExperimentSpec | None:
    if args.config is None:
        return None
    spec = parse_config(args.config)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if args.out is not None:
        spec = replace(spec, out=str(args.out))
    if args.fast:
        spec = spec.fast()
    return spec


def _out_dir(args, spec, default="."):
    out = Path(args.out or (spec.out if spec else default))
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen(args) -> int:
    spec = _load_spec(args)
    env = spec.env if spec else EnvKind(args.env)
    horizon = args.horizon or (spec.horizon if spec else DEFAULT_HORIZON[env])
    n = args.n if not args.fast else max(20, args.n // 5)
    seed = args.seed if args.seed is not None else (spec.seed if spec else 0)
    cfg = replace(spec.env_config(n, args.gamma, seed), env_kind=env, horizon=horizon) if spec else \
        EnvConfig(env, n, horizon, gamma=args.gamma, seed=seed)
    dataset, latents = generate(cfg, PolicySpec.behavior())
    out = _out_dir(args, spec)
    paths = [write_dataset(dataset, out / "dataset.csv"), *write_latents(latents, out)]
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_train(args) -> int:
    spec = _load_spec(args)
    grid_spec = spec.train if spec else TrainGrid()
    if args.fast:
        grid_spec = replace(grid_spec, max_epochs=min(grid_spec.max_epochs, 30))
    if args.epochs:
        grid_spec = replace(grid_spec, max_epochs=args.epochs)
    dataset = read_dataset(args.data)
    seed = args.seed if args.seed is not None else (spec.seed if spec else 0)
    cells = variant_grid(args.method, grid_spec.cells(), seed)
    try:
        report = grid_search(dataset, cells)
        model = refit(dataset, report.chosen_hypers, report.best_epoch)
    except TrainingDiverged as exc:
        log.error("%s", exc)
        return EXIT_PARTIAL
    out = _out_dir(args, spec)
    save_checkpoint(model, out / "model.ckpt")
    write_csv(out / "training_curve.csv", ["epoch", "train_loss", "val_loss"], report.curve)
    hp = asdict(report.chosen_hypers)
    hp["encoder"] = report.chosen_hypers.encoder.value
    summary = {"method": args.method, "best_epoch": report.best_epoch, "best_val_loss": report.best_val_loss,
               "hypers": hp, "n_train": len(report.train_idx), "n_val": len(report.val_idx)}
    (out / "train_report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(out / "model.ckpt")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    dataset = read_dataset(args.data)
    if model.arch.n_traj != dataset.n_trajectories or model.arch.horizon != dataset.horizon:
        raise ConfigError("checkpoint and dataset disagree on N or T")
    seed = args.seed if args.seed is not None else 0
    target = named_target(dataset.env_kind, args.target)
    m = min(args.m, 20) if args.fast else args.m
    eta_hat = estimate_from_model(model, dataset, OpeConfig(target, m, seed=seed))
    eta_true = float("nan")
    if args.truth_rollouts > 0:
        spec = _load_spec(args)
        cfg = replace(spec.env_config(1, args.gamma), env_kind=dataset.env_kind, horizon=dataset.horizon) if spec \
            else EnvConfig(dataset.env_kind, 1, dataset.horizon, gamma=args.gamma)
        rollouts = min(args.truth_rollouts, 1000) if args.fast else args.truth_rollouts
        eta_true = true_policy_value(cfg, target, rollouts, seed=derive_seed("truth", seed)).value
    out = _out_dir(args, None)
    row = {"env": dataset.env_kind.value, "method": args.method, "N": dataset.n_trajectories,
           "T": dataset.horizon, "gamma": args.gamma, "target": args.target, "seed": seed,
           "eta_hat": eta_hat, "eta_true": eta_true, "runtime_s": 0.0}
    write_csv(out / "eval.csv", EVAL_HEADER, [row])
    print(f"eta_hat={eta_hat:.6g} eta_true={eta_true:.6g}")
    return EXIT_OK


def cmd_run(args) -> int:
    spec = _load_spec(args)
    if spec is None:
        raise ConfigError("run needs --config")
    manifest = run(spec, args.out, workers=max(1, args.workers), deterministic=args.deterministic,
                   log=log.info)
    n_files = len(manifest.files)
    if manifest.failed_cells:
        log.warning("%d cell(s) failed; see manifest.json", len(manifest.failed_cells))
        return EXIT_PARTIAL
    print(f"wrote {n_files} files to {args.out or spec.out}")
    return EXIT_OK


def gradient_self_test(seed: int = 0) -> float:
    """Worst relative error between the analytic and central-difference gradient on a tiny model."""
    rng = np.random.default_rng(seed)
    arch = Architecture(obs_dim=2, n_actions=2, n_traj=3, horizon=3, embed_dim=2, ntn_slices=2,
                        hidden_dim=3, mlp_width=4)
    params = init_params(arch, rng)
    b = 4
    batch = Batch(rng.integers(0, 3, b), rng.integers(0, 3, b), rng.standard_normal((b, 2)),
                  rng.integers(0, 2, b), rng.standard_normal((b, 3)), np.ones((b, 3)))
    _, grads = loss_and_grad(batch, params, arch, 0.3)
    worst, h = 0.0, 1e-5
    for key, arr in params.items():
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            lp = loss_and_grad(batch, params, arch, 0.3, need_grad=False)[0].total
            arr[idx] = old - h
            lm = loss_and_grad(batch, params, arch, 0.3, need_grad=False)[0].total
            arr[idx] = old
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - grads[key][idx]) / max(abs(fd), abs(grads[key][idx]), 1e-6))
    return worst


def cmd_check(args) -> int:
    spec = _load_spec(args)
    if spec is not None:
        print(json.dumps(spec.to_dict(), indent=2, sort_keys=True))
        print(f"config ok: {spec.recipe} on {spec.env.value}, {len(spec.train.cells())} grid cell(s)")
    err = gradient_self_test()
    ok = err < 1e-4
    print(f"gradient self-test: max relative error {err:.2e} ({'ok' if ok else 'FAILED'})")
    return EXIT_OK if ok else EXIT_PARTIAL


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "run": cmd_run, "check": cmd_check}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"twode: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"twode: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
