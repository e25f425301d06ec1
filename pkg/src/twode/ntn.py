"""Two-way deconfounder network with hand-written backpropagation.

Architecture (per cell ``(i, t)``)::

    tau    = [o, u_i, w_t]
    pre_m  = u_i^T W[m] w_t + (M tau)_m + b_m        m = 1..k
    hidden = F tanh(pre) + fb
    (mu, raw) = MLP_P([onehot(a), hidden]);  sigma = min(softplus(raw) + s_min, s_max)
    logits    = MLP_pi(hidden)

The ablation encoders drop the bilinear term (``mlp``) and additionally one
of the two embeddings (``mlp_no_u``, ``mlp_no_w``).  Parameters live in a
plain ``dict`` whose insertion order is the declared (checkpoint) order.
"""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, fields
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .env import Dataset

CHECKPOINT_MAGIC = b"TWODE-CKPT"
CHECKPOINT_VERSION = 1


class Encoder(str, Enum):
    NTN = "ntn"
    MLP = "mlp"
    MLP_NO_U = "mlp_no_u"
    MLP_NO_W = "mlp_no_w"


@dataclass(frozen=True)
class Architecture:
    obs_dim: int
    n_actions: int
    n_traj: int
    horizon: int
    embed_dim: int = 4
    ntn_slices: int = 8
    hidden_dim: int = 16
    mlp_width: int = 64
    mlp_depth: int = 2
    sigma_min: float = 1e-2
    sigma_max: float = 10.0
    encoder: Encoder = Encoder.NTN

    def __post_init__(self):
        object.__setattr__(self, "encoder", Encoder(self.encoder))
        if self.embed_dim < 1 or self.ntn_slices < 1:
            raise ValueError("embed_dim and ntn_slices must be >= 1")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")

    @property
    def has_u(self) -> bool:
        return self.encoder is not Encoder.MLP_NO_U

    @property
    def has_w(self) -> bool:
        return self.encoder is not Encoder.MLP_NO_W

    @property
    def out_dim(self) -> int:
        return 1 + self.obs_dim

    @property
    def tau_dim(self) -> int:
        return self.obs_dim + self.embed_dim * (int(self.has_u) + int(self.has_w))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.value
        return d


@dataclass
class TransitionPrediction:
    mu: np.ndarray  # (B, 1 + d_o) standardized reward then next observation
    sigma: np.ndarray  # (B, 1 + d_o)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mu + self.sigma * rng.standard_normal(self.mu.shape)


@dataclass(frozen=True)
class LossBreakdown:
    l_transition: float
    l_actor: float
    alpha: float
    total: float


@dataclass
class Batch:
    traj: np.ndarray  # (B,)
    time: np.ndarray  # (B,)
    obs: np.ndarray  # (B, d_o) standardized
    action: np.ndarray  # (B,) categorical ids
    target: np.ndarray  # (B, 1 + d_o) standardized (reward, next obs)
    mask: np.ndarray  # (B, 1 + d_o) 1 where the target entry is observed

    def __len__(self):
        return self.traj.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(self.traj[idx], self.time[idx], self.obs[idx], self.action[idx], self.target[idx], self.mask[idx])


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def init_params(arch: Architecture, rng: np.random.Generator) -> dict:
    d, k, h = arch.embed_dim, arch.ntn_slices, arch.hidden_dim
    p: dict = {}
    if arch.has_u:
        p["u_table"] = 0.1 * rng.standard_normal((arch.n_traj, d))
    if arch.has_w:
        p["w_table"] = 0.1 * rng.standard_normal((arch.horizon, d))
    if arch.encoder is Encoder.NTN:
        p["W_tensor"] = _uniform(rng, (k, d, d), d * d)
    p["M"] = _uniform(rng, (k, arch.tau_dim), arch.tau_dim)
    p["b"] = np.zeros(k)
    p["F"] = _uniform(rng, (h, k), k)
    p["fb"] = np.zeros(h)
    _init_mlp(p, "P", arch.n_actions + h, arch.mlp_width, arch.mlp_depth, 2 * arch.out_dim, rng)
    _init_mlp(p, "pi", h, arch.mlp_width, arch.mlp_depth, arch.n_actions, rng)
    return p


def _init_mlp(p, prefix, n_in, width, depth, n_out, rng):
    sizes = [n_in] + [width] * depth + [n_out]
    for layer in range(depth + 1):
        p[f"{prefix}{layer}.W"] = _uniform(rng, (sizes[layer + 1], sizes[layer]), sizes[layer])
        p[f"{prefix}{layer}.b"] = np.zeros(sizes[layer + 1])


def _mlp_forward(p, prefix, depth, x):
    acts = [x]
    a = x
    for layer in range(depth):
        a = np.tanh(a @ p[f"{prefix}{layer}.W"].T + p[f"{prefix}{layer}.b"])
        acts.append(a)
    out = a @ p[f"{prefix}{depth}.W"].T + p[f"{prefix}{depth}.b"]
    return out, acts


def _mlp_backward(p, prefix, depth, acts, dout, grads):
    d = dout
    for layer in range(depth, -1, -1):
        grads[f"{prefix}{layer}.W"] = d.T @ acts[layer]
        grads[f"{prefix}{layer}.b"] = d.sum(axis=0)
        d = d @ p[f"{prefix}{layer}.W"]
        if layer > 0:
            d = d * (1.0 - acts[layer] ** 2)
    return d


def _encode(p, arch: Architecture, obs, u, w):
    parts = [obs]
    if arch.has_u:
        parts.append(u)
    if arch.has_w:
        parts.append(w)
    tau = np.hstack(parts)
    pre = tau @ p["M"].T + p["b"]
    uW = None
    if arch.encoder is Encoder.NTN:
        # uW[b, m, j] = sum_i u[b, i] W[m, i, j]
        k, d, _ = p["W_tensor"].shape
        uW = (u @ p["W_tensor"].transpose(1, 0, 2).reshape(d, k * d)).reshape(-1, k, d)
        pre = pre + (uW * w[:, None, :]).sum(axis=2)
    g = np.tanh(pre)
    hidden = g @ p["F"].T + p["fb"]
    return hidden, (tau, g, uW)


def ntn_forward(o, u, w, params: dict, arch: Architecture) -> np.ndarray:
    """Hidden vector ``F tanh(u^T W w + M [o; u; w] + b) + fb`` for each row."""
    o = np.atleast_2d(np.asarray(o, dtype=float))
    u = None if u is None else np.atleast_2d(np.asarray(u, dtype=float))
    w = None if w is None else np.atleast_2d(np.asarray(w, dtype=float))
    if o.shape[1] != arch.obs_dim:
        raise ValueError(f"observation has dim {o.shape[1]}, expected {arch.obs_dim}")
    for name, val, needed in (("u", u, arch.has_u), ("w", w, arch.has_w)):
        if needed and (val is None or val.shape[1] != arch.embed_dim):
            raise ValueError(f"{name} must have dim {arch.embed_dim}")
    hidden, _ = _encode(params, arch, o, u, w)
    return hidden


def _onehot(a, n):
    a = np.asarray(a, dtype=np.int64)
    if a.size and (a.min() < 0 or a.max() >= n):
        raise ValueError(f"action id out of range [0, {n})")
    out = np.zeros((a.shape[0], n))
    out[np.arange(a.shape[0]), a] = 1.0
    return out


def _sigma(raw, arch):
    unclamped = np.logaddexp(0.0, raw) + arch.sigma_min
    return np.minimum(unclamped, arch.sigma_max), unclamped


def transition_head(a, hidden, params: dict, arch: Architecture) -> TransitionPrediction:
    x = np.hstack([_onehot(a, arch.n_actions), hidden])
    out, _ = _mlp_forward(params, "P", arch.mlp_depth, x)
    D = arch.out_dim
    sigma, _ = _sigma(out[:, D:], arch)
    return TransitionPrediction(out[:, :D], sigma)


def actor_head(hidden, params: dict, arch: Architecture) -> np.ndarray:
    logits, _ = _mlp_forward(params, "pi", arch.mlp_depth, hidden)
    return softmax(logits, axis=1)


def _gather(params, arch, batch):
    u = params["u_table"][batch.traj] if arch.has_u else None
    w = params["w_table"][batch.time] if arch.has_w else None
    return u, w


def loss_and_grad(batch: Batch, params: dict, arch: Architecture, alpha: float, need_grad: bool = True):
    """Summed joint loss over the batch and (optionally) its exact gradient."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    p = params
    u, w = _gather(p, arch, batch)
    hidden, (tau, g, uW) = _encode(p, arch, batch.obs, u, w)
    x_p = np.hstack([_onehot(batch.action, arch.n_actions), hidden])
    out, acts_p = _mlp_forward(p, "P", arch.mlp_depth, x_p)
    D = arch.out_dim
    mu, raw = out[:, :D], out[:, D:]
    sigma, unclamped = _sigma(raw, arch)
    z = (mu - batch.target) / sigma
    mask = batch.mask
    l_t = 0.5 * float(np.sum(mask * (z * z + 2.0 * np.log(sigma))))

    use_actor = alpha > 0.0
    l_a = 0.0
    if use_actor:
        logits, acts_pi = _mlp_forward(p, "pi", arch.mlp_depth, hidden)
        logp = log_softmax(logits, axis=1)
        l_a = -float(np.sum(logp[np.arange(len(batch)), batch.action]))
    total = (1.0 - alpha) * l_t + alpha * l_a
    breakdown = LossBreakdown(l_t, l_a, float(alpha), total)
    if not need_grad:
        return breakdown, None

    grads: dict = {}
    wt = (1.0 - alpha) * mask
    d_mu = wt * z / sigma
    d_sigma = wt * (1.0 - z * z) / sigma
    d_raw = d_sigma * (unclamped < arch.sigma_max) * expit(raw)
    dx_p = _mlp_backward(p, "P", arch.mlp_depth, acts_p, np.hstack([d_mu, d_raw]), grads)
    d_hidden = dx_p[:, arch.n_actions:]
    if use_actor:
        d_logits = alpha * (np.exp(logp) - _onehot(batch.action, arch.n_actions))
        d_hidden = d_hidden + _mlp_backward(p, "pi", arch.mlp_depth, acts_pi, d_logits, grads)
    else:
        for key in p:
            if key.startswith("pi"):
                grads[key] = np.zeros_like(p[key])

    grads["F"] = d_hidden.T @ g
    grads["fb"] = d_hidden.sum(axis=0)
    d_pre = (d_hidden @ p["F"]) * (1.0 - g * g)
    grads["M"] = d_pre.T @ tau
    grads["b"] = d_pre.sum(axis=0)
    d_tau = d_pre @ p["M"]
    col = arch.obs_dim
    de = arch.embed_dim
    du = dw = None
    if arch.has_u:
        du = d_tau[:, col:col + de]
        col += de
    if arch.has_w:
        dw = d_tau[:, col:col + de]
    if arch.encoder is Encoder.NTN:
        Wt = p["W_tensor"]
        k, d, _ = Wt.shape
        B = d_pre.shape[0]
        grads["W_tensor"] = ((d_pre[:, :, None] * u[:, None, :]).reshape(B, k * d).T @ w).reshape(k, d, d)
        Ww = (w @ Wt.reshape(k * d, d).T).reshape(B, k, d)
        du = du + (d_pre[:, :, None] * Ww).sum(axis=1)
        dw = dw + (d_pre[:, :, None] * uW).sum(axis=1)
    if arch.has_u:
        gu = np.zeros_like(p["u_table"])
        np.add.at(gu, batch.traj, du)
        grads["u_table"] = gu
    if arch.has_w:
        gw = np.zeros_like(p["w_table"])
        np.add.at(gw, batch.time, dw)
        grads["w_table"] = gw
    return breakdown, {k: grads[k] for k in p}


def loss(batch: Batch, params: dict, arch: Architecture, alpha: float) -> LossBreakdown:
    return loss_and_grad(batch, params, arch, alpha, need_grad=False)[0]


def grad(batch: Batch, params: dict, arch: Architecture, alpha: float) -> dict:
    return loss_and_grad(batch, params, arch, alpha)[1]


# --------------------------------------------------------------------------
# model wrapper: normalisation, cell arrays, sampling, checkpoints


@dataclass
class Normalizer:
    obs_mean: np.ndarray
    obs_std: np.ndarray
    rew_mean: float
    rew_std: float

    @classmethod
    def fit(cls, dataset: Dataset, traj_idx=None) -> "Normalizer":
        data = dataset if traj_idx is None else dataset.subset(traj_idx)
        obs = data.observations.reshape(-1, data.obs_dim)
        o_std = obs.std(axis=0)
        r_std = float(data.rewards.std())
        return cls(obs.mean(axis=0), np.where(o_std > 1e-8, o_std, 1.0),
                   float(data.rewards.mean()), r_std if r_std > 1e-8 else 1.0)

    @classmethod
    def identity(cls, obs_dim: int) -> "Normalizer":
        return cls(np.zeros(obs_dim), np.ones(obs_dim), 0.0, 1.0)


class TwoWayModel:
    """Parameters plus the normalisation used for inputs and targets."""

    def __init__(self, arch: Architecture, params: dict, norm: Normalizer):
        self.arch = arch
        self.params = params
        self.norm = norm

    @classmethod
    def initialize(cls, arch: Architecture, norm: Normalizer, rng: np.random.Generator) -> "TwoWayModel":
        return cls(arch, init_params(arch, rng), norm)

    @property
    def n_actions(self) -> int:
        return self.arch.n_actions

    @property
    def has_u(self) -> bool:
        return self.arch.has_u

    @property
    def has_w(self) -> bool:
        return self.arch.has_w

    @property
    def u_hat(self):
        return self.params.get("u_table")

    @property
    def w_hat(self):
        return self.params.get("w_table")

    def copy(self) -> "TwoWayModel":
        return TwoWayModel(self.arch, {k: v.copy() for k, v in self.params.items()}, self.norm)

    def n_embedding_params(self) -> int:
        return sum(self.params[k].size for k in ("u_table", "w_table") if k in self.params)

    def cells(self, dataset: Dataset) -> Batch:
        """Every (i, t) cell of ``dataset`` as one standardized batch."""
        n, horizon, d = dataset.n_trajectories, dataset.horizon, dataset.obs_dim
        nm = self.norm
        obs = (dataset.observations - nm.obs_mean) / nm.obs_std
        target = np.zeros((n, horizon, 1 + d))
        mask = np.ones((n, horizon, 1 + d))
        target[:, :, 0] = (dataset.rewards - nm.rew_mean) / nm.rew_std
        target[:, :-1, 1:] = obs[:, 1:, :]
        mask[:, -1, 1:] = 0.0
        traj, time = np.meshgrid(np.arange(n), np.arange(horizon), indexing="ij")
        return Batch(traj.reshape(-1), time.reshape(-1), obs.reshape(-1, d), dataset.action_ids().reshape(-1),
                     target.reshape(-1, 1 + d), mask.reshape(-1, 1 + d))

    def loss(self, batch: Batch, alpha: float) -> LossBreakdown:
        return loss(batch, self.params, self.arch, alpha)

    def predict(self, obs, action_ids, u, w) -> TransitionPrediction:
        """Standardized transition prediction for raw observations."""
        obs_s = (np.atleast_2d(obs) - self.norm.obs_mean) / self.norm.obs_std
        hidden, _ = _encode(self.params, self.arch, obs_s, u, w)
        return transition_head(action_ids, hidden, self.params, self.arch)

    def behavior_probs(self, obs, u, w) -> np.ndarray:
        obs_s = (np.atleast_2d(obs) - self.norm.obs_mean) / self.norm.obs_std
        hidden, _ = _encode(self.params, self.arch, obs_s, u, w)
        return actor_head(hidden, self.params, self.arch)

    def sample_step(self, obs, action_ids, u, w, rng: np.random.Generator):
        """Draw (reward, next observation) on the raw scale."""
        pred = self.predict(obs, action_ids, u, w)
        phi = pred.sample(rng)
        nm = self.norm
        return phi[:, 0] * nm.rew_std + nm.rew_mean, phi[:, 1:] * nm.obs_std + nm.obs_mean


def _ordered_arrays(model: TwoWayModel):
    nm = model.norm
    arrays = [(k, np.asarray(v, dtype="<f8")) for k, v in model.params.items()]
    arrays += [
        ("norm.obs_mean", np.asarray(nm.obs_mean, dtype="<f8")),
        ("norm.obs_std", np.asarray(nm.obs_std, dtype="<f8")),
        ("norm.rew_mean", np.asarray([nm.rew_mean], dtype="<f8")),
        ("norm.rew_std", np.asarray([nm.rew_std], dtype="<f8")),
    ]
    return arrays


def checkpoint_bytes(model: TwoWayModel) -> bytes:
    arrays = _ordered_arrays(model)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "architecture": model.arch.to_dict(),
        "arrays": [[name, list(a.shape)] for name, a in arrays],
        "dtype": "<f8",
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC + b" %d\n" % CHECKPOINT_VERSION)
    buf.write(b"%d\n" % len(head))
    buf.write(head)
    for _, a in arrays:
        buf.write(np.ascontiguousarray(a).tobytes())
    return buf.getvalue()


def save_checkpoint(model: TwoWayModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def model_from_bytes(raw: bytes) -> TwoWayModel:
    stream = io.BytesIO(raw)
    magic = stream.readline().rstrip(b"\n").split(b" ")
    if magic[0] != CHECKPOINT_MAGIC:
        raise ValueError("not a twode checkpoint")
    if int(magic[1]) != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {magic[1].decode()}")
    n_head = int(stream.readline())
    header = json.loads(stream.read(n_head))
    known = {f.name for f in fields(Architecture)}
    arch = Architecture(**{k: v for k, v in header["architecture"].items() if k in known})
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        data = stream.read(8 * count)
        if len(data) != 8 * count:
            raise ValueError("truncated checkpoint")
        arrays[name] = np.frombuffer(data, dtype="<f8").reshape(shape).astype(float)
    norm = Normalizer(arrays.pop("norm.obs_mean"), arrays.pop("norm.obs_std"),
                      float(arrays.pop("norm.rew_mean")[0]), float(arrays.pop("norm.rew_std")[0]))
    return TwoWayModel(arch, arrays, norm)


def load_checkpoint(path) -> TwoWayModel:
    return model_from_bytes(Path(path).read_bytes())
