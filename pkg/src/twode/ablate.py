"""Ablation variants of the two-way deconfounder and a runner that compares them."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .env import EnvConfig, PolicySpec, generate, true_policy_value
from .ntn import Encoder, init_params
from .ope import OpeConfig, crossfit_estimate, estimate_from_model, metrics
from .rng import derive_seed
from .train import HyperParams, TrainingDiverged, train_for_ope


class VariantKind(str, Enum):
    TWD = "TWD"
    TWD_TO = "TWD_TO"
    TWD_MLP = "TWD_MLP"
    OWD_NI = "OWD_NI"
    OWD_NT = "OWD_NT"


_ENCODER = {
    VariantKind.TWD: Encoder.NTN,
    VariantKind.TWD_TO: Encoder.NTN,
    VariantKind.TWD_MLP: Encoder.MLP,
    VariantKind.OWD_NI: Encoder.MLP_NO_U,
    VariantKind.OWD_NT: Encoder.MLP_NO_W,
}


def make_variant(kind: VariantKind | str, base: HyperParams) -> HyperParams:
    """Hyperparameters for ``kind``; TWD_TO drops the actor loss whatever ``loss_alpha`` says."""
    kind = VariantKind(kind)
    hp = replace(base, encoder=_ENCODER[kind])
    if kind is VariantKind.TWD_TO:
        hp = replace(hp, loss_alpha=0.0)
    return hp


def variant_grid(kind: VariantKind | str, grid, seed: int) -> list:
    """Apply the variant to each grid cell, fix the seed and drop duplicates (order kept)."""
    out = []
    for hp in grid:
        cell = replace(make_variant(kind, hp), seed=seed)
        if cell not in out:
            out.append(cell)
    return out


def fit_and_estimate(dataset, kind, grid, ope_cfg: OpeConfig, seed: int) -> float:
    """Train one method on one dataset and return its plug-in estimate."""
    cells = variant_grid(kind, grid, seed)
    if ope_cfg.crossfit:
        return crossfit_estimate(dataset, lambda part: train_for_ope(part, cells)[0], ope_cfg)
    model, _ = train_for_ope(dataset, cells)
    return estimate_from_model(model, dataset, ope_cfg)


def data_seed(master: int, n: int, gamma: float, rep: int) -> int:
    return derive_seed("data", int(master), int(n), float(gamma), int(rep))


def train_seed(master: int, n: int, gamma: float, method: str, rep: int) -> int:
    return derive_seed("train", int(master), int(n), float(gamma), str(method), int(rep))


def ope_seed(train: int, target_label: str) -> int:
    return derive_seed("ope", int(train), str(target_label))


def truth_seed(master: int, env_kind, gamma: float, target_label: str) -> int:
    return derive_seed("truth", int(master), getattr(env_kind, "value", env_kind), float(gamma), str(target_label))


@dataclass
class AblationRow:
    variant: VariantKind
    estimates: list = field(default_factory=list)
    runtimes: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    lmse: float = float("nan")
    bias: float = float("nan")


@dataclass
class AblationResult:
    env: EnvConfig
    target: PolicySpec
    eta_true: float
    rows: list

    def lmse(self, kind) -> float:
        return next(r.lmse for r in self.rows if r.variant is VariantKind(kind))


def run_ablation(env_config: EnvConfig, variants, ope_cfg: OpeConfig, repetitions: int, grid,
                 master_seed: int = 0, truth_rollouts: int = 10_000, eta_true: float | None = None,
                 log=None, target_label: str = "A") -> AblationResult:
    """Train every variant on the same ``repetitions`` datasets and report LMSE/bias.

    Seeds match the experiment runner, so a single-variant call reproduces
    its numbers; ``target_label`` is the config name of ``ope_cfg.target``.
    """
    variants = [VariantKind(v) for v in variants]
    if not variants:
        raise ValueError("no variants given")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    n, gamma = env_config.n_trajectories, env_config.gamma
    if eta_true is None:
        seed = truth_seed(master_seed, env_config.env_kind, gamma, target_label)
        eta_true = true_policy_value(env_config, ope_cfg.target, truth_rollouts, seed=seed).value
    rows = [AblationRow(v) for v in variants]
    for rep in range(repetitions):
        cfg = replace(env_config, seed=data_seed(master_seed, n, gamma, rep))
        dataset, _ = generate(cfg, PolicySpec.behavior())
        for row in rows:
            seed = train_seed(master_seed, n, gamma, row.variant.value, rep)
            start = time.perf_counter()
            try:
                est = fit_and_estimate(dataset, row.variant, grid,
                                       replace(ope_cfg, seed=ope_seed(seed, target_label)), seed)
            except (TrainingDiverged, FloatingPointError, ValueError) as exc:
                row.failures.append((rep, str(exc)))
                if log:
                    log(f"{row.variant.value} rep {rep} failed: {exc}")
                continue
            row.estimates.append(est)
            row.runtimes.append(time.perf_counter() - start)
            if log:
                log(f"{row.variant.value} N={n} gamma={gamma} rep {rep}: eta_hat={est:.6g}")
    for row in rows:
        if row.estimates:
            row.lmse, row.bias = metrics(row.estimates, eta_true)
    return AblationResult(env_config, ope_cfg.target, float(eta_true), rows)


def parameter_count(hypers: HyperParams, dataset) -> int:
    params = init_params(hypers.architecture(dataset), np.random.default_rng(0))
    return sum(v.size for v in params.values())
