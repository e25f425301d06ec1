"""Seeded simulators for the linear, dynamic-process and tumor-growth settings.

All three simulators share one vectorised stepping loop (``_simulate``); the
per-setting pieces are the transition/reward equations and the behavior
policy.  Random inputs (initial states, latents, noise, action uniforms) are
drawn up front from per-trajectory streams, so a dataset can be regenerated
with a different latent table while every other random input stays fixed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy.special import expit

from .rng import stream


class EnvKind(str, Enum):
    LINEAR = "Linear"
    DYNAMIC_PROCESS = "DynamicProcess"
    TUMOR = "TumorGrowth"


OBS_DIM = {EnvKind.LINEAR: 1, EnvKind.DYNAMIC_PROCESS: 4, EnvKind.TUMOR: 2}
ACTION_COMPONENTS = {EnvKind.LINEAR: 1, EnvKind.DYNAMIC_PROCESS: 1, EnvKind.TUMOR: 2}
DEFAULT_HORIZON = {EnvKind.LINEAR: 50, EnvKind.DYNAMIC_PROCESS: 50, EnvKind.TUMOR: 60}


def sphere_diameter(volume):
    return np.cbrt(6.0 * np.asarray(volume, dtype=float) / math.pi)


@dataclass(frozen=True)
class TumorParams:
    """PK-PD constants for the tumor simulator.

    The defaults are illustrative, not calibrated values: growth rate and
    carrying capacity are shared by all patients, the three treatment
    sensitivities are looked up by the patient's group label (1, 2, 3).
    """

    rho: float = 0.07
    K: float = 100.0
    beta_c: tuple = (0.015, 0.02, 0.025)
    alpha: tuple = (0.08, 0.10, 0.12)
    beta: tuple = (0.008, 0.010, 0.012)
    d_max: float = 0.0  # 0 means "diameter of a tumor at volume K"
    gamma_c: float = 10.0
    gamma_r: float = 10.0
    v0_low: float = 1.0
    v0_high: float = 50.0
    v_min: float = 1e-3
    volume_noise_sd: float = 0.01

    def __post_init__(self):
        for name in ("beta_c", "alpha", "beta"):
            val = tuple(float(x) for x in getattr(self, name))
            if len(val) != 3:
                raise ValueError(f"tumor.{name} needs one entry per group (3), got {len(val)}")
            object.__setattr__(self, name, val)
        if self.K <= 0 or self.v_min <= 0:
            raise ValueError("tumor.K and tumor.v_min must be positive")
        if not 0 < self.v0_low <= self.v0_high:
            raise ValueError("tumor initial volume interval must satisfy 0 < low <= high")

    @property
    def diameter_max(self) -> float:
        return float(self.d_max) if self.d_max > 0 else float(sphere_diameter(self.K))


@dataclass(frozen=True)
class EnvConfig:
    env_kind: EnvKind
    n_trajectories: int
    horizon: int | None = None
    gamma: float = 1.0
    seed: int = 0
    linear_reward_var: float = 2.0
    latent_sd: float = 1.0
    noise_scale: float = 1.0
    init_sd: float = 1.0
    tumor: TumorParams = field(default_factory=TumorParams)

    def __post_init__(self):
        object.__setattr__(self, "env_kind", EnvKind(self.env_kind))
        if self.horizon is None:
            object.__setattr__(self, "horizon", DEFAULT_HORIZON[self.env_kind])
        if int(self.n_trajectories) < 1:
            raise ValueError("n_trajectories must be >= 1")
        if int(self.horizon) < 1:
            raise ValueError("horizon must be >= 1")
        if not 0.0 <= float(self.gamma) <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.linear_reward_var < 0 or self.latent_sd < 0 or self.noise_scale < 0 or self.init_sd < 0:
            raise ValueError("variances and scales must be non-negative")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def obs_dim(self) -> int:
        return OBS_DIM[self.env_kind]

    @property
    def n_actions(self) -> int:
        return 2 ** ACTION_COMPONENTS[self.env_kind]


@dataclass
class Dataset:
    """N x T grid of observation/action/reward triples.

    ``actions`` has one column per binary treatment component: a single
    column for Linear/DP, ``(A^r, A^c)`` for the tumor setting.
    """

    env_kind: EnvKind
    observations: np.ndarray  # (N, T, d_o)
    actions: np.ndarray  # (N, T, c) int
    rewards: np.ndarray  # (N, T)

    def __post_init__(self):
        self.env_kind = EnvKind(self.env_kind)
        self.observations = np.asarray(self.observations, dtype=float)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=float)
        n, t = self.rewards.shape
        if self.observations.shape[:2] != (n, t) or self.actions.shape[:2] != (n, t):
            raise ValueError("observations, actions and rewards must share (N, T)")
        if self.observations.shape[2] != OBS_DIM[self.env_kind]:
            raise ValueError("observation dimension does not match env kind")
        if self.actions.shape[2] != ACTION_COMPONENTS[self.env_kind]:
            raise ValueError("action components do not match env kind")
        if not (np.isfinite(self.observations).all() and np.isfinite(self.rewards).all()):
            raise ValueError("dataset contains non-finite entries")
        if ((self.actions != 0) & (self.actions != 1)).any():
            raise ValueError("actions must be binary")

    @property
    def n_trajectories(self) -> int:
        return self.rewards.shape[0]

    @property
    def horizon(self) -> int:
        return self.rewards.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.observations.shape[2]

    @property
    def n_actions(self) -> int:
        return 2 ** self.actions.shape[2]

    @property
    def initial_observations(self) -> np.ndarray:
        return self.observations[:, 0, :]

    def action_ids(self) -> np.ndarray:
        """Categorical action index per cell; tumor pairs map to ``2*A^r + A^c``."""
        return encode_actions(self.actions)

    def subset(self, traj_idx) -> "Dataset":
        idx = np.asarray(traj_idx)
        return Dataset(self.env_kind, self.observations[idx], self.actions[idx], self.rewards[idx])


@dataclass
class LatentTable:
    u: np.ndarray  # (N,) trajectory confounder (group label for tumor)
    w: np.ndarray  # (T,) time confounder (sin(0.1*pi*t) for tumor)
    aux: dict = field(default_factory=dict)

    def permuted(self, traj_perm=None, time_perm=None) -> "LatentTable":
        u = self.u if traj_perm is None else self.u[np.asarray(traj_perm)]
        w = self.w if time_perm is None else self.w[np.asarray(time_perm)]
        aux = dict(self.aux)
        if traj_perm is not None:
            for key, val in self.aux.items():
                if isinstance(val, np.ndarray) and val.shape[:1] == self.u.shape[:1]:
                    aux[key] = val[np.asarray(traj_perm)]
        return LatentTable(u.copy(), w.copy(), aux)


def encode_actions(actions: np.ndarray) -> np.ndarray:
    actions = np.asarray(actions, dtype=np.int64)
    ids = np.zeros(actions.shape[:-1], dtype=np.int64)
    for c in range(actions.shape[-1]):
        ids = 2 * ids + actions[..., c]
    return ids


def decode_actions(ids: np.ndarray, n_components: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    out = np.empty(ids.shape + (n_components,), dtype=np.int64)
    for c in range(n_components - 1, -1, -1):
        out[..., c] = ids % 2
        ids = ids // 2
    return out


# --------------------------------------------------------------------------
# policies


class PolicyKind(str, Enum):
    BEHAVIOR = "Behavior"
    TARGET_RANDOM = "TargetRandom"
    TARGET_A = "TargetA"
    TARGET_B = "TargetB"
    TUMOR_TARGET_A = "TumorTargetA"
    TUMOR_TARGET_B = "TumorTargetB"


_FIXED_P = {PolicyKind.TARGET_A: 0.3, PolicyKind.TARGET_B: 0.5, PolicyKind.TUMOR_TARGET_A: 0.05}


@dataclass(frozen=True)
class PolicySpec:
    kind: PolicyKind
    p: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        if self.kind is PolicyKind.TARGET_RANDOM:
            if self.p is None or not 0.0 <= self.p <= 1.0:
                raise ValueError("TargetRandom needs p in [0, 1]")

    @property
    def is_target(self) -> bool:
        return self.kind is not PolicyKind.BEHAVIOR

    @property
    def n_components(self) -> int | None:
        if self.kind in (PolicyKind.TUMOR_TARGET_A, PolicyKind.TUMOR_TARGET_B):
            return 2
        if self.kind is PolicyKind.BEHAVIOR:
            return None
        return 1

    @classmethod
    def behavior(cls):
        return cls(PolicyKind.BEHAVIOR)

    @classmethod
    def random(cls, p: float):
        return cls(PolicyKind.TARGET_RANDOM, p)


def named_target(env_kind: EnvKind | str, name: str) -> PolicySpec:
    """Map the short target names used in configs (``A``/``B``) to policies."""
    env_kind = EnvKind(env_kind)
    name = name.strip()
    if env_kind is EnvKind.TUMOR:
        table = {"A": PolicyKind.TUMOR_TARGET_A, "B": PolicyKind.TUMOR_TARGET_B}
    elif env_kind is EnvKind.DYNAMIC_PROCESS:
        table = {"A": PolicyKind.TARGET_A, "B": PolicyKind.TARGET_B}
    else:
        table = {"A": None}
    if name not in table:
        raise ValueError(f"unknown target {name!r} for {env_kind.value}")
    kind = table[name]
    return PolicySpec.random(0.5) if kind is None else PolicySpec(kind)


def tumor_target_b_prob(volume):
    v = np.asarray(volume, dtype=float)
    return np.select([v > 88.0, v > 44.0, v > 5.0], [0.2, 0.1, 0.05], default=0.01)


def component_probs(policy: PolicySpec, obs, latents=None, config: EnvConfig | None = None) -> np.ndarray:
    """P(component = 1) for each binary action component, shape ``(n, c)``."""
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    n = obs.shape[0]
    kind = policy.kind
    if kind is PolicyKind.BEHAVIOR:
        if latents is None:
            raise ValueError("behavior policy needs the latent confounders")
        if config is None:
            raise ValueError("behavior policy needs the env config")
        u, w = (np.broadcast_to(np.asarray(x, dtype=float), (n,)) for x in latents)
        return _behavior_probs(config, obs, u, w)
    if kind is PolicyKind.TARGET_RANDOM:
        return np.full((n, 1), float(policy.p))
    if kind in (PolicyKind.TARGET_A, PolicyKind.TARGET_B):
        return np.full((n, 1), _FIXED_P[kind])
    if kind is PolicyKind.TUMOR_TARGET_A:
        return np.full((n, 2), _FIXED_P[kind])
    if kind is PolicyKind.TUMOR_TARGET_B:
        p = tumor_target_b_prob(obs[:, 0])
        return np.repeat(p[:, None], 2, axis=1)
    raise ValueError(f"unhandled policy {kind}")


def policy_prob(policy: PolicySpec, obs, latents=None, config: EnvConfig | None = None) -> np.ndarray:
    """Categorical action distribution, shape ``(n, 2**c)``.

    Components are independent Bernoullis; category ``k`` has the binary
    expansion of ``k`` as its component values (first component most
    significant).
    """
    p1 = component_probs(policy, obs, latents, config)
    n, c = p1.shape
    probs = np.ones((n, 2**c))
    for k in range(2**c):
        bits = decode_actions(np.array(k), c)
        for j in range(c):
            probs[:, k] *= p1[:, j] if bits[j] else 1.0 - p1[:, j]
    return probs


def sample_actions(probs: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw of categorical ids from ``probs`` with given uniforms."""
    cdf = np.cumsum(probs, axis=1)
    ids = (uniforms[:, None] >= cdf[:, :-1]).sum(axis=1)
    return ids.astype(np.int64)


def _behavior_probs(cfg: EnvConfig, obs, u, w):
    g = float(cfg.gamma)
    if cfg.env_kind is EnvKind.LINEAR:
        return expit(obs[:, 0] + u + w)[:, None]
    if cfg.env_kind is EnvKind.DYNAMIC_PROCESS:
        logit = 0.25 * obs.sum(axis=1) - 4.0 + g * 3.0 * (u * w + u + w)
        return expit(logit)[:, None]
    tp = cfg.tumor
    dmax = tp.diameter_max
    diam = sphere_diameter(obs[:, 0])
    conf = g * (3.0 * expit(u - 2.0) - 0.75 * w)
    p_r = expit(tp.gamma_r / dmax * (diam - dmax / 2.0) + conf)
    p_c = expit(tp.gamma_c / dmax * (diam - dmax / 2.0) + conf)
    return np.stack([p_r, p_c], axis=1)


# --------------------------------------------------------------------------
# dynamics


def transition_mean(cfg: EnvConfig, obs, act, u, w, aux_groups=None):
    """Noise-free reward and next observation for Linear/DP.

    ``act`` holds the binary action (first component); latents are scalars
    per row.  The tumor model is not linear-Gaussian and is handled inside
    :func:`step`.
    """
    g = float(cfg.gamma)
    a = np.asarray(act, dtype=float)
    if cfg.env_kind is EnvKind.LINEAR:
        o = obs[:, 0]
        r = o + 3.0 * a + 2.0 * u + 2.0 * w
        nxt = 0.7 * o + a + 2.0 * u + 2.0 * w - 0.5
        return r, nxt[:, None]
    if cfg.env_kind is EnvKind.DYNAMIC_PROCESS:
        f = np.stack([u - w, u + w, -u - w, -u + w], axis=1)
        r = 0.25 * obs.sum(axis=1) + g * 3.0 * u * w + 2.5 * a
        nxt = 0.8 * obs + g * 0.1 * f + a[:, None] - 0.5
        return r, nxt
    raise ValueError("transition_mean is only defined for Linear and DynamicProcess")


def _tumor_group_params(tp: TumorParams, groups):
    idx = np.asarray(groups, dtype=np.int64) - 1
    return (np.asarray(tp.beta_c)[idx], np.asarray(tp.alpha)[idx], np.asarray(tp.beta)[idx])


def step(cfg: EnvConfig, obs, actions, u, w, eps_obs, eps_rew):
    """One transition for every row.

    ``actions`` is ``(n, c)`` binary; ``eps_obs`` (n, d_o) and ``eps_rew`` (n,)
    are standard normal draws that this function scales.  Returns
    ``(reward, next_obs, clamped)``.
    """
    s = float(cfg.noise_scale)
    n = obs.shape[0]
    if cfg.env_kind is EnvKind.LINEAR:
        r, nxt = transition_mean(cfg, obs, actions[:, 0], u, w)
        r = r + s * math.sqrt(cfg.linear_reward_var) * eps_rew
        return r, nxt + s * eps_obs, np.zeros(n, dtype=bool)
    if cfg.env_kind is EnvKind.DYNAMIC_PROCESS:
        r, nxt = transition_mean(cfg, obs, actions[:, 0], u, w)
        return r + s * eps_rew, nxt + s * eps_obs, np.zeros(n, dtype=bool)

    tp = cfg.tumor
    a_r = actions[:, 0].astype(float)
    a_c = actions[:, 1].astype(float)
    v_prev, c_prev = obs[:, 0], obs[:, 1]
    beta_c, alpha, beta = _tumor_group_params(tp, u)
    conc = c_prev / 2.0 + 5.0 * a_c
    growth = (
        1.0
        + tp.rho * np.log(tp.K / v_prev)
        - beta_c * conc
        - (alpha * a_r + beta * a_r**2)
        + s * tp.volume_noise_sd * eps_obs[:, 0]
    )
    vol = growth * v_prev
    clamped = vol <= tp.v_min
    vol = np.where(clamped, tp.v_min, vol)
    r = (
        1.5 * np.exp(-vol)
        + np.exp(-((a_r + a_c) ** 2))
        + float(cfg.gamma) * (4.0 * expit(u - 2.0) - w)
        + s * eps_rew
    )
    return r, np.stack([vol, conc], axis=1), clamped


def tumor_time_confounder(horizon: int) -> np.ndarray:
    t = np.arange(1, horizon + 1, dtype=float)
    return np.sin(0.1 * math.pi * t)


@dataclass
class _Draws:
    init: np.ndarray  # (N, d_o)
    u: np.ndarray  # (N,)
    eps_obs: np.ndarray  # (N, T, d_o)
    eps_rew: np.ndarray  # (N, T)
    unif: np.ndarray  # (N, T, c)


def _draw_inputs(cfg: EnvConfig, n: int, horizon: int, index_offset: int = 0) -> _Draws:
    d = cfg.obs_dim
    c = ACTION_COMPONENTS[cfg.env_kind]
    init = np.empty((n, d))
    u = np.empty(n)
    eps = np.empty((n, horizon, d + 1))
    unif = np.empty((n, horizon, c))
    tp = cfg.tumor
    for i in range(n):
        j = i + index_offset
        g_init = stream(cfg.seed, "init", j)
        g_u = stream(cfg.seed, "latent_u", j)
        if cfg.env_kind is EnvKind.TUMOR:
            init[i] = (g_init.uniform(tp.v0_low, tp.v0_high), 0.0)
            u[i] = g_u.integers(1, 4)
        else:
            init[i] = cfg.init_sd * g_init.standard_normal(d)
            u[i] = cfg.latent_sd * g_u.standard_normal()
        eps[i] = stream(cfg.seed, "noise", j).standard_normal((horizon, d + 1))
        unif[i] = stream(cfg.seed, "actions", j).random((horizon, c))
    return _Draws(init, u, eps[:, :, :d], eps[:, :, d], unif)


def _draw_w(cfg: EnvConfig, horizon: int, index: int = 0) -> np.ndarray:
    if cfg.env_kind is EnvKind.TUMOR:
        return tumor_time_confounder(horizon)
    return cfg.latent_sd * stream(cfg.seed, "latent_w", index).standard_normal(horizon)


def _simulate(cfg: EnvConfig, policy: PolicySpec, u, w, draws: _Draws):
    """Run the vectorised loop; ``w`` is (T,) shared or (N, T) per trajectory."""
    n, horizon = draws.eps_rew.shape
    d = cfg.obs_dim
    c = ACTION_COMPONENTS[cfg.env_kind]
    if policy.n_components not in (None, c):
        raise ValueError(f"policy {policy.kind.value} does not act in {cfg.env_kind.value}")
    w = np.asarray(w, dtype=float)
    w_nt = np.broadcast_to(w, (n, horizon)) if w.ndim == 1 else w
    obs = np.empty((n, horizon, d))
    acts = np.empty((n, horizon, c), dtype=np.int64)
    rews = np.empty((n, horizon))
    clamped = np.zeros(n, dtype=bool)
    cur = draws.init.copy()
    for t in range(horizon):
        obs[:, t] = cur
        wt = w_nt[:, t]
        p1 = component_probs(policy, cur, (u, wt), cfg)
        a = (draws.unif[:, t, :] < p1).astype(np.int64)
        acts[:, t] = a
        r, cur, cl = step(cfg, cur, a, u, wt, draws.eps_obs[:, t], draws.eps_rew[:, t])
        rews[:, t] = r
        clamped |= cl
    return obs, acts, rews, clamped


def _generate(cfg: EnvConfig, policy: PolicySpec, latents: LatentTable | None):
    n, horizon = int(cfg.n_trajectories), int(cfg.horizon)
    draws = _draw_inputs(cfg, n, horizon)
    if latents is None:
        u, w = draws.u, _draw_w(cfg, horizon)
    else:
        u, w = np.asarray(latents.u, dtype=float), np.asarray(latents.w, dtype=float)
        if u.shape != (n,) or w.shape != (horizon,):
            raise ValueError("latent table does not match (N, T)")
    obs, acts, rews, clamped = _simulate(cfg, policy, u, w, draws)
    aux: dict = {}
    if cfg.env_kind is EnvKind.TUMOR:
        tp = cfg.tumor
        beta_c, alpha, beta = _tumor_group_params(tp, u)
        aux = {
            "group": u.astype(np.int64),
            "rho": np.full(n, tp.rho),
            "K": np.full(n, tp.K),
            "beta_c": beta_c,
            "alpha": alpha,
            "beta": beta,
            "clamped": clamped,
        }
    return Dataset(cfg.env_kind, obs, acts, rews), LatentTable(u.copy(), w.copy(), aux)


def gen_linear(config: EnvConfig, policy: PolicySpec, latents: LatentTable | None = None):
    if config.env_kind is not EnvKind.LINEAR:
        raise ValueError("gen_linear needs env_kind=Linear")
    return _generate(config, policy, latents)


def gen_dynamic_process(config: EnvConfig, policy: PolicySpec, latents: LatentTable | None = None):
    if config.env_kind is not EnvKind.DYNAMIC_PROCESS:
        raise ValueError("gen_dynamic_process needs env_kind=DynamicProcess")
    return _generate(config, policy, latents)


def gen_tumor(config: EnvConfig, policy: PolicySpec, latents: LatentTable | None = None):
    if config.env_kind is not EnvKind.TUMOR:
        raise ValueError("gen_tumor needs env_kind=TumorGrowth")
    return _generate(config, policy, latents)


def generate(config: EnvConfig, policy: PolicySpec, latents: LatentTable | None = None):
    """Dispatch on ``config.env_kind``."""
    return _generate(config, policy, latents)


def conditional_means(config: EnvConfig, dataset: Dataset, latents: LatentTable):
    """E[R | O, A, U, W] and E[O' | O, A, U, W] on every observed cell."""
    n, horizon = dataset.n_trajectories, dataset.horizon
    obs = dataset.observations.reshape(n * horizon, -1)
    act = dataset.actions[..., 0].reshape(-1)
    u = np.repeat(latents.u, horizon)
    w = np.tile(latents.w, n)
    r, nxt = transition_mean(config, obs, act, u, w)
    return r.reshape(n, horizon), nxt.reshape(n, horizon, -1)


@dataclass(frozen=True)
class PolicyValue:
    value: float
    stderr: float
    n_rollouts: int


def true_policy_value(config: EnvConfig, policy: PolicySpec, n_rollouts: int = 10_000, seed: int | None = None,
                      chunk: int = 2000) -> PolicyValue:
    """Monte Carlo ground truth of the per-cell average reward under ``policy``.

    Each rollout is an independent trajectory with its own trajectory
    confounder and its own time-confounder path, so the per-rollout means are
    i.i.d. and the standard error is the usual ``sd / sqrt(n)``.
    """
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    if not policy.is_target:
        raise ValueError("true_policy_value needs a latent-free target policy")
    cfg = replace(config, seed=config.seed if seed is None else seed)
    horizon = int(cfg.horizon)
    means = np.empty(n_rollouts)
    for start in range(0, n_rollouts, chunk):
        m = min(chunk, n_rollouts - start)
        draws = _draw_inputs(cfg, m, horizon, index_offset=start)
        w = np.stack([_draw_w(cfg, horizon, index=1 + start + i) for i in range(m)])
        _, _, rews, _ = _simulate(cfg, policy, draws.u, w, draws)
        means[start:start + m] = rews.mean(axis=1)
    se = float(means.std(ddof=1) / math.sqrt(n_rollouts)) if n_rollouts > 1 else 0.0
    return PolicyValue(float(means.mean()), se, n_rollouts)


class TrueTransition:
    """The simulator's own dynamics exposed through the model-sampler interface.

    Used as an oracle "model" for the plug-in estimator: ``sample_step`` takes
    categorical action ids and scalar latents per row.
    """

    def __init__(self, config: EnvConfig):
        self.config = config
        self.n_actions = config.n_actions
        self.obs_dim = config.obs_dim
        self.has_u = True
        self.has_w = True

    def sample_step(self, obs, action_ids, u, w, rng: np.random.Generator):
        n = obs.shape[0]
        c = ACTION_COMPONENTS[self.config.env_kind]
        acts = decode_actions(action_ids, c)
        eps = rng.standard_normal((n, self.obs_dim + 1))
        u = np.asarray(u, dtype=float).reshape(n)
        w = np.asarray(w, dtype=float).reshape(n)
        r, nxt, _ = step(self.config, obs, acts, u, w, eps[:, :-1], eps[:, -1])
        return r, nxt
