"""Linear fixed-effects deconfounders under UUC, OWUC and TWUC.

Each assumption is a least-squares problem ``Y = Z zeta + D beta_fe + e``
where ``Z`` holds the observed regressors (observation coordinates and
action components) and ``D`` is a block of dummy columns:

* UUC  - one dummy per (i, t) cell (identity block),
* OWUC - one dummy per trajectory,
* TWUC - one dummy per trajectory plus one per time index.

Small systems are solved with an SVD pseudo-inverse of the dense design.
Large ones use an exact structured route that returns the same
minimum-norm solution without materialising ``X``: a Woodbury identity for
UUC and within (demeaning) transforms for OWUC/TWUC.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .env import (
    ACTION_COMPONENTS,
    Dataset,
    EnvConfig,
    EnvKind,
    LatentTable,
    PolicySpec,
    component_probs,
    conditional_means,
    gen_linear,
    transition_mean,
)
from .rng import stream

DENSE_CELL_LIMIT = 250_000
MAX_ROWS = 50_000_000


class AssumptionKind(str, Enum):
    UUC = "UUC"
    OWUC = "OWUC"
    TWUC = "TWUC"


@dataclass
class DesignSystem:
    kind: AssumptionKind
    Z: np.ndarray  # (n_rows, q) observed regressors
    y: np.ndarray  # (n_rows,)
    n_traj: int
    n_time: int
    column_map: list
    target: str = "reward"

    @property
    def n_rows(self) -> int:
        return self.y.shape[0]

    @property
    def q(self) -> int:
        return self.Z.shape[1]

    @property
    def n_dummies(self) -> int:
        if self.kind is AssumptionKind.UUC:
            return self.n_traj * self.n_time
        if self.kind is AssumptionKind.OWUC:
            return self.n_traj
        return self.n_traj + self.n_time

    @property
    def p(self) -> int:
        return self.q + self.n_dummies

    def dummy_block(self) -> np.ndarray:
        n, t = self.n_traj, self.n_time
        if self.kind is AssumptionKind.UUC:
            return np.eye(n * t)
        traj = np.kron(np.eye(n), np.ones((t, 1)))
        if self.kind is AssumptionKind.OWUC:
            return traj
        return np.hstack([traj, np.tile(np.eye(t), (n, 1))])

    def dense(self) -> np.ndarray:
        return np.hstack([self.Z, self.dummy_block()])

    def x_dot(self, beta: np.ndarray) -> np.ndarray:
        """``X @ beta`` without forming X."""
        zeta, fe = beta[: self.q], beta[self.q:]
        return self.Z @ zeta + _expand_effects(self.kind, fe, self.n_traj, self.n_time).reshape(-1)

    def xt_dot(self, r: np.ndarray) -> np.ndarray:
        """``X.T @ r`` without forming X."""
        grid = r.reshape(self.n_traj, self.n_time)
        parts = [self.Z.T @ r]
        if self.kind is AssumptionKind.UUC:
            parts.append(r)
        else:
            parts.append(grid.sum(axis=1))
            if self.kind is AssumptionKind.TWUC:
                parts.append(grid.sum(axis=0))
        return np.concatenate(parts)


@dataclass
class LseFit:
    beta_hat: np.ndarray
    fitted: np.ndarray
    rank: int
    pinv_tolerance: float
    system: DesignSystem
    method: str

    @property
    def zeta(self) -> np.ndarray:
        return self.beta_hat[: self.system.q]

    def effects(self) -> np.ndarray:
        """Estimated fixed effect for every (i, t) cell, shape (N, T_eff)."""
        s = self.system
        return _expand_effects(s.kind, self.beta_hat[s.q:], s.n_traj, s.n_time)

    @property
    def residual_sd(self) -> float:
        dof = self.system.n_rows - self.rank
        if dof <= 0:
            return 0.0
        resid = self.system.y - self.fitted
        return float(np.sqrt(resid @ resid / dof))


def _expand_effects(kind, fe, n, t):
    if kind is AssumptionKind.UUC:
        return fe.reshape(n, t)
    if kind is AssumptionKind.OWUC:
        return np.repeat(fe[:, None], t, axis=1)
    return fe[:n, None] + fe[None, n:]


def _regressors(dataset: Dataset, horizon: int) -> tuple[np.ndarray, list]:
    d = dataset.obs_dim
    obs = dataset.observations[:, :horizon, :].reshape(-1, d)
    acts = dataset.actions[:, :horizon, :].reshape(-1, dataset.actions.shape[2]).astype(float)
    names = [f"zeta_obs{k + 1}" for k in range(d)] + [f"zeta_act{k + 1}" for k in range(acts.shape[1])]
    return np.hstack([obs, acts]), names


def build_design(dataset: Dataset, kind: AssumptionKind | str, target="reward",
                 max_rows: int = MAX_ROWS) -> DesignSystem:
    """Design for the reward regression or for next-observation coordinate k.

    ``target`` is ``"reward"`` or ``("obs", k)``.  Observation targets drop
    the last time index (no successor is recorded there), so their time
    dimension is ``T - 1``.
    """
    kind = AssumptionKind(kind)
    n, horizon = dataset.n_trajectories, dataset.horizon
    if target == "reward":
        t_eff = horizon
        y = dataset.rewards.reshape(-1)
        label = "reward"
    else:
        _, k = target
        if horizon < 2:
            raise ValueError("next-observation regression needs T >= 2")
        t_eff = horizon - 1
        y = dataset.observations[:, 1:, k].reshape(-1)
        label = f"obs{k + 1}"
    if n * t_eff > max_rows:
        raise ValueError(f"N*T = {n * t_eff} exceeds the configured maximum of {max_rows} rows")
    Z, names = _regressors(dataset, t_eff)
    if kind is AssumptionKind.UUC:
        names += [f"z_{i + 1}_{t + 1}" for i in range(n) for t in range(t_eff)]
    else:
        names += [f"u_{i + 1}" for i in range(n)]
        if kind is AssumptionKind.TWUC:
            names += [f"w_{t + 1}" for t in range(t_eff)]
    return DesignSystem(kind, Z, np.asarray(y, dtype=float).copy(), n, t_eff, names, label)


def pinv_solve(X: np.ndarray, y: np.ndarray):
    """Minimum-norm least squares via SVD; tolerance ``p * eps * s_max``."""
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    tol = max(X.shape[1], 1) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    keep = s > tol
    coef = Vt[keep].T @ ((U[:, keep].T @ y) / s[keep])
    return coef, int(keep.sum()), float(tol)


def _demean_traj(a, n, t):
    g = a.reshape(n, t, -1)
    return (g - g.mean(axis=1, keepdims=True)).reshape(n * t, -1)


def _demean_two_way(a, n, t):
    g = a.reshape(n, t, -1)
    out = g - g.mean(axis=1, keepdims=True) - g.mean(axis=0, keepdims=True) + g.mean(axis=(0, 1), keepdims=True)
    return out.reshape(n * t, -1)


def _fit_structured(s: DesignSystem):
    n, t, Z, y = s.n_traj, s.n_time, s.Z, s.y
    if s.kind is AssumptionKind.UUC:
        # min ||beta|| s.t. Z zeta + z = y  ->  beta = X^T (I + Z Z^T)^{-1} y
        small = np.eye(s.q) + Z.T @ Z
        v = y - Z @ np.linalg.solve(small, Z.T @ y)
        beta = np.concatenate([Z.T @ v, v])
        s_max = np.sqrt(1.0 + np.linalg.norm(Z, 2) ** 2)
        return beta, s.n_rows, float(s.p * np.finfo(float).eps * s_max)
    two_way = s.kind is AssumptionKind.TWUC
    Zd = _demean_two_way(Z, n, t) if two_way else _demean_traj(Z, n, t)
    yd = (_demean_two_way(y, n, t) if two_way else _demean_traj(y, n, t))[:, 0]
    # right singular vectors of the within design from its q x q Gram matrix
    ev, V = np.linalg.eigh(Zd.T @ Zd)
    order = np.argsort(ev)[::-1]
    sv, Vt = np.sqrt(np.clip(ev[order], 0.0, None)), V[:, order].T
    # the Gram route resolves singular values only down to ~sqrt(eps) * s_max
    tol = max(s.q, 1) * np.sqrt(np.finfo(float).eps) * max(np.linalg.norm(Z, 2) if Z.size else 0.0, 1.0)
    r = int((sv > tol).sum())
    zeta = Vt[:r].T @ ((Vt[:r] @ (Zd.T @ yd)) / sv[:r] ** 2) if r else np.zeros(s.q)

    def effects(e):
        e = e.reshape(n, t)
        if not two_way:
            return e.mean(axis=1)
        e_bar = e.mean()
        c = t * e_bar / (n + t)  # minimum-norm split of the common level between u and w
        return np.concatenate([e.mean(axis=1) - e_bar + c, e.mean(axis=0) - c])

    beta = np.concatenate([zeta, effects(y - Z @ zeta)])
    # regressors lying in the span of the dummies leave a null space in X;
    # project it out so the result is the minimum-norm solution
    null = [np.concatenate([a, -effects(Z @ a)]) for a in Vt[r:]]
    if two_way:
        null.append(np.concatenate([np.zeros(s.q), np.ones(n), -np.ones(t)]))
    if null:
        Q, _ = np.linalg.qr(np.array(null).T)
        beta = beta - Q @ (Q.T @ beta)
    return beta, r + n + (t - 1 if two_way else 0), float(tol)


def fit_lse(system: DesignSystem, method: str = "auto") -> LseFit:
    """Minimum-norm least-squares fit.

    ``method`` is ``"dense"`` (SVD pseudo-inverse of X), ``"structured"`` or
    ``"auto"`` (dense when X has at most ``DENSE_CELL_LIMIT`` entries).
    """
    if system.n_rows == 0:
        raise ValueError("empty design")
    if not (np.isfinite(system.Z).all() and np.isfinite(system.y).all()):
        raise ValueError("design contains non-finite entries")
    if method == "auto":
        method = "dense" if system.n_rows * system.p <= DENSE_CELL_LIMIT else "structured"
    if method == "dense":
        beta, rank, tol = pinv_solve(system.dense(), system.y)
    elif method == "structured":
        beta, rank, tol = _fit_structured(system)
    else:
        raise ValueError(f"unknown method {method!r}")
    fitted = system.x_dot(beta)
    return LseFit(beta, fitted, rank, tol, system, method)


def prediction_mse(fit: LseFit, truth: np.ndarray) -> float:
    """Mean squared distance between fitted values and the true conditional means."""
    truth = np.asarray(truth, dtype=float).reshape(-1)
    if truth.shape != fit.fitted.shape:
        raise ValueError(f"truth has shape {truth.shape}, expected {fit.fitted.shape}")
    diff = fit.fitted - truth
    return float(diff @ diff / diff.size)


def train_mse(fit: LseFit) -> float:
    resid = fit.system.y - fit.fitted
    return float(resid @ resid / resid.size)


def theoretical_mse(kind: AssumptionKind | str, sigma2: float, n: int, t: int, var_w: float = 0.0) -> float:
    """Closed-form prediction MSE of the reward regression.

    UUC stays at the noise variance; TWUC decays as sigma2 (N+T+2)/(NT);
    a misspecified OWUC fit approaches the variance of the omitted time
    effect (``var_w``) as T grows.
    """
    kind = AssumptionKind(kind)
    if sigma2 < 0:
        raise ValueError("sigma2 must be non-negative")
    if kind is AssumptionKind.UUC:
        return float(sigma2)
    if kind is AssumptionKind.TWUC:
        return float(sigma2) * (n + t + 2) / (n * t)
    return float(var_w)


# --------------------------------------------------------------------------
# plug-in OPE with the fitted linear system


@dataclass
class LinearPlugin:
    """Fitted linear dynamics with per-cell latent effects."""

    reward_coef: np.ndarray  # (q,)
    reward_effects: np.ndarray  # (N, T)
    obs_coef: np.ndarray  # (d_o, q)
    obs_effects: np.ndarray  # (d_o, N, T-1)
    reward_sd: float
    obs_sd: np.ndarray  # (d_o,)
    n_components: int

    @classmethod
    def from_fits(cls, reward_fit: LseFit, obs_fits: list, n_components: int) -> "LinearPlugin":
        n, horizon = reward_fit.system.n_traj, reward_fit.system.n_time
        if obs_fits:
            obs_coef = np.stack([f.zeta for f in obs_fits])
            obs_eff = np.stack([f.effects() for f in obs_fits])
            obs_sd = np.array([f.residual_sd for f in obs_fits])
        else:
            obs_coef = np.zeros((0, reward_fit.system.q))
            obs_eff = np.zeros((0, n, max(horizon - 1, 0)))
            obs_sd = np.zeros(0)
        return cls(reward_fit.zeta.copy(), reward_fit.effects(), obs_coef, obs_eff,
                   reward_fit.residual_sd, obs_sd, n_components)


def fit_linear_plugin(dataset: Dataset, kind: AssumptionKind | str, method: str = "auto") -> LinearPlugin:
    kind = AssumptionKind(kind)
    rfit = fit_lse(build_design(dataset, kind, "reward"), method)
    ofits = []
    if dataset.horizon >= 2:
        ofits = [fit_lse(build_design(dataset, kind, ("obs", k)), method) for k in range(dataset.obs_dim)]
    return LinearPlugin.from_fits(rfit, ofits, dataset.actions.shape[2])


def linear_ope(model: LinearPlugin, initial_obs: np.ndarray, target: PolicySpec, *, n_rollouts: int = 20,
               seed: int = 0, noise: bool = True) -> float:
    """Monte Carlo value of ``target`` under the fitted linear system.

    Every trajectory starts from its observed initial observation and uses
    its own estimated effects; the result averages rewards over N x T cells
    and ``n_rollouts`` replicates.
    """
    if not target.is_target:
        raise ValueError("linear_ope needs a latent-free target policy")
    init = np.asarray(initial_obs, dtype=float)
    n, horizon = model.reward_effects.shape
    d = init.shape[1]
    rng = stream(seed, "rollout", 0)
    obs = np.repeat(init[None], n_rollouts, axis=0).reshape(n_rollouts * n, d)
    total = 0.0
    for t in range(horizon):
        p1 = component_probs(target, obs)
        acts = (rng.random(p1.shape) < p1).astype(float)
        z = np.hstack([obs, acts])
        r = z @ model.reward_coef + np.tile(model.reward_effects[:, t], n_rollouts)
        if noise and model.reward_sd > 0:
            r = r + model.reward_sd * rng.standard_normal(r.shape)
        total += r.sum()
        if t < horizon - 1:
            eff = np.tile(model.obs_effects[:, :, t], (1, n_rollouts)).T
            obs = z @ model.obs_coef.T + eff
            if noise:
                obs = obs + model.obs_sd * rng.standard_normal(obs.shape)
    return float(total / (n_rollouts * n * horizon))


def conditional_target_value(config: EnvConfig, latents: LatentTable, initial_obs: np.ndarray,
                             target: PolicySpec) -> float:
    """Exact E^pi of the average reward given (O_1, U, W) for Linear/DP.

    Valid for state-independent targets: the dynamics are linear in (O, A)
    so expectations propagate through the mean recursion with E[A] = p.
    """
    if config.env_kind is EnvKind.TUMOR:
        raise ValueError("closed-form conditional value is only available for Linear/DP")
    p = component_probs(target, initial_obs)[:, 0]
    if not np.allclose(p, p[0]):
        raise ValueError("target policy must not depend on the observation")
    obs = np.asarray(initial_obs, dtype=float).copy()
    horizon = latents.w.shape[0]
    total = 0.0
    for t in range(horizon):
        w = np.full(obs.shape[0], latents.w[t])
        r, nxt = transition_mean(config, obs, p, latents.u, w)
        total += r.sum()
        obs = nxt
    return float(total / (obs.shape[0] * horizon))


def linear_replication(n: int, horizon: int, seed: int, *, target: PolicySpec | None = None,
                       n_rollouts: int = 20, reward_var: float = 2.0) -> list:
    """One replication of the three-assumption comparison on the linear env.

    Returns one row per assumption with the training MSE (against observed
    rewards), the prediction MSE (against true conditional means), the
    closed-form MSE, the OWUC floor computed from the drawn time effects, and
    the squared OPE error against the exact value given the drawn latents.
    """
    target = target or PolicySpec.random(0.5)
    cfg = EnvConfig(EnvKind.LINEAR, n, horizon, seed=seed, linear_reward_var=reward_var)
    data, lat = gen_linear(cfg, PolicySpec.behavior())
    truth_r, _ = conditional_means(cfg, data, lat)
    time_effect = 2.0 * lat.w
    floor = float(((time_effect - time_effect.mean()) ** 2).mean())
    eta_ref = conditional_target_value(cfg, lat, data.initial_observations, target)
    rows = []
    for kind in AssumptionKind:
        rfit = fit_lse(build_design(data, kind, "reward"))
        ofits = [fit_lse(build_design(data, kind, ("obs", k))) for k in range(data.obs_dim)]
        plugin = LinearPlugin.from_fits(rfit, ofits, ACTION_COMPONENTS[cfg.env_kind])
        eta_hat = linear_ope(plugin, data.initial_observations, target, n_rollouts=n_rollouts, seed=seed)
        rows.append({
            "seed": seed,
            "assumption": kind.value,
            "N": n,
            "T": horizon,
            "train_mse": train_mse(rfit),
            "theory_mse": theoretical_mse(kind, reward_var, n, horizon, floor),
            "ope_mse": (eta_hat - eta_ref) ** 2,
            "pred_mse": prediction_mse(rfit, truth_r),
            "owuc_floor": floor,
        })
    return rows
