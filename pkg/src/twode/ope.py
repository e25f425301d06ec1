"""Model-based plug-in policy evaluation.

A model is anything with ``n_actions``, ``has_u``, ``has_w`` and
``sample_step(obs, action_ids, u, w, rng) -> (reward, next_obs)`` on the raw
scale: the trained :class:`~twode.ntn.TwoWayModel`, or the simulator's own
:class:`~twode.env.TrueTransition` as an oracle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .env import Dataset, PolicySpec, policy_prob, sample_actions
from .rng import stream

LMSE_FLOOR = math.log(1e-300)
ROW_CHUNK = 20_000


class RolloutError(RuntimeError):
    pass


@dataclass(frozen=True)
class OpeConfig:
    target: PolicySpec
    n_rollouts_per_traj: int = 100
    crossfit: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_rollouts_per_traj < 1:
            raise ValueError("n_rollouts_per_traj must be >= 1")
        if not self.target.is_target:
            raise ValueError("the evaluated policy must be latent-free")


@dataclass
class EvalReport:
    eta_true: float
    estimates: list = field(default_factory=list)
    seeds: list = field(default_factory=list)
    runtime_s: list = field(default_factory=list)

    def add(self, estimate: float, seed: int, runtime_s: float = 0.0):
        self.estimates.append(float(estimate))
        self.seeds.append(int(seed))
        self.runtime_s.append(float(runtime_s))

    @property
    def eta_hat(self) -> float:
        return float(np.mean(self.estimates))

    @property
    def lmse(self) -> float:
        return metrics(self.estimates, self.eta_true)[0]

    @property
    def bias(self) -> float:
        return metrics(self.estimates, self.eta_true)[1]


def _latent_rows(table, rows):
    if table is None:
        return None
    return np.asarray(table, dtype=float)[rows]


def _latent_at(table, t, n):
    if table is None:
        return None
    wt = np.asarray(table[t], dtype=float)
    return np.broadcast_to(wt, (n,) + wt.shape)


def simulate_rewards(model, init_obs, u_rows, w_hats, target: PolicySpec, horizon: int, rng) -> np.ndarray:
    """Roll every row of ``init_obs`` forward ``horizon`` steps; returns (n, horizon) rewards."""
    obs = np.array(init_obs, dtype=float, ndmin=2)
    n = obs.shape[0]
    rewards = np.empty((n, horizon))
    for t in range(horizon):
        probs = policy_prob(target, obs)
        if probs.shape[1] != model.n_actions:
            raise ValueError(f"target policy has {probs.shape[1]} actions, model has {model.n_actions}")
        a = sample_actions(probs, rng.random(n))
        r, obs = model.sample_step(obs, a, u_rows, _latent_at(w_hats, t, n), rng)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(obs))):
            raise RolloutError(f"non-finite sample at step {t + 1}")
        rewards[:, t] = r
    return rewards


def rollout(model, u_hat, w_hats, o1, target: PolicySpec, rng) -> np.ndarray:
    """One trajectory of sampled rewards for t = 1..T, T = len(w_hats)."""
    if w_hats is None:
        raise ValueError("w_hats fixes the horizon; pass a (T, ...) array")
    horizon = len(w_hats)
    u = None if u_hat is None else np.asarray(u_hat, dtype=float)[None]
    return simulate_rewards(model, np.atleast_2d(o1), u, w_hats if model.has_w else None, target, horizon, rng)[0]


def estimate_value(model, init_obs, u_hat, w_hat, cfg: OpeConfig, horizon: int | None = None,
                   return_se: bool = False):
    """Plug-in estimate: average reward over T steps, m runs and all N trajectories.

    ``u_hat`` holds one latent per trajectory (rows aligned with
    ``init_obs``), ``w_hat`` one per time step.  The standard error is taken
    across per-trajectory means.
    """
    init_obs = np.atleast_2d(np.asarray(init_obs, dtype=float))
    n = init_obs.shape[0]
    if model.has_u and (u_hat is None or len(u_hat) != n):
        raise ValueError("missing latent estimates: need one u per trajectory")
    if w_hat is None:
        if model.has_w or horizon is None:
            raise ValueError("missing latent estimates: need w for every time step")
    else:
        horizon = len(w_hat) if horizon is None else horizon
        if len(w_hat) < horizon:
            raise ValueError(f"w_hat covers {len(w_hat)} steps, need {horizon}")
    m = cfg.n_rollouts_per_traj
    rng = stream(cfg.seed, "rollout")
    rows = np.repeat(np.arange(n), m)
    traj_sum = np.zeros(n)
    for s in range(0, rows.size, ROW_CHUNK):
        idx = rows[s:s + ROW_CHUNK]
        u_rows = _latent_rows(u_hat, idx) if model.has_u else None
        rew = simulate_rewards(model, init_obs[idx], u_rows, w_hat if model.has_w else None,
                               cfg.target, horizon, rng)
        np.add.at(traj_sum, idx, rew.sum(axis=1))
    traj_mean = traj_sum / (m * horizon)
    eta = float(traj_mean.mean())
    if return_se:
        se = float(traj_mean.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return eta, se
    return eta


def estimate_from_model(model, dataset: Dataset, cfg: OpeConfig, traj_idx=None) -> float:
    """Pooled estimate using the model's own fitted embeddings."""
    idx = np.arange(dataset.n_trajectories) if traj_idx is None else np.asarray(traj_idx)
    u_hat = model.u_hat[idx] if model.has_u else None
    w_hat = model.w_hat if model.has_w else None
    return estimate_value(model, dataset.initial_observations[idx], u_hat, w_hat, cfg, horizon=dataset.horizon)


def crossfit_folds(n_trajectories: int, seed: int = 0):
    """Halve the trajectories; with odd N the extra one goes to fold 1."""
    n = int(n_trajectories)
    if n < 2:
        raise ValueError("cross-fitting needs at least two trajectories")
    perm = stream(seed, "split", 1).permutation(n)
    n1 = (n + 1) // 2
    return np.sort(perm[:n1]), np.sort(perm[n1:])


def crossfit_estimate(dataset: Dataset, trainer, cfg: OpeConfig, folds=None) -> float:
    """Average of the two fold estimates, each using the other fold's network.

    ``trainer(dataset) -> model`` fits one fold (same hyperparameters for
    both).  Fold j's initial observations and latents (u from fold j's model
    for its own trajectories, w from fold j's model) are pushed through the
    transition network learned on the other fold.
    """
    f1, f2 = crossfit_folds(dataset.n_trajectories, cfg.seed) if folds is None else folds
    f1, f2 = np.sort(np.asarray(f1)), np.sort(np.asarray(f2))  # order within a fold is irrelevant
    parts = [dataset.subset(f1), dataset.subset(f2)]
    models = [trainer(parts[0]), trainer(parts[1])]
    etas = []
    for j in (0, 1):
        own, other = models[j], models[1 - j]
        u_hat = own.u_hat if other.has_u else None
        w_hat = own.w_hat if other.has_w else None
        etas.append(estimate_value(other, parts[j].initial_observations, u_hat, w_hat, cfg,
                                   horizon=dataset.horizon))
    return 0.5 * (etas[0] + etas[1])


def metrics(estimates, eta_true: float):
    """(lmse, bias): log mean squared error, floored at ln(1e-300), and mean error."""
    est = np.asarray(estimates, dtype=float).reshape(-1)
    if est.size < 1:
        raise ValueError("need at least one estimate")
    err = est - float(eta_true)
    mse = float(np.mean(err * err))
    lmse = math.log(mse) if mse > 1e-300 else LMSE_FLOOR
    return lmse, float(err.mean())
