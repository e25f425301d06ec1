"""Minibatch training of the two-way deconfounder.

Trajectories are split 75/25; held-out trajectories get their own ``u`` rows,
fitted with every shared parameter frozen, so the validation loss measures
generalisation to new individuals.  After model selection the chosen
hyperparameters are refit on all trajectories for the selected epoch count.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .env import Dataset
from .ntn import Architecture, Batch, Encoder, Normalizer, TwoWayModel, loss_and_grad
from .rng import stream

DEFAULT_GRID = {
    "lr": (0.005, 0.001),
    "batch_size": (256, 512, 1024, 2048, 4096),
    "weight_decay": (0.01, 0.0001),
    "embed_dim": (2, 4, 8),
    "loss_alpha": (0.0, 0.3, 0.5, 0.7),
}


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, detail: str):
        super().__init__(f"non-finite loss at epoch {epoch}: {detail}")
        self.epoch = epoch


@dataclass(frozen=True)
class HyperParams:
    lr: float = 0.005
    batch_size: int = 256
    weight_decay: float = 1e-4
    embed_dim: int = 4
    loss_alpha: float = 0.3
    max_epochs: int = 500
    patience: int = 20
    ntn_slices: int = 8
    seed: int = 0
    hidden_dim: int = 16
    mlp_width: int = 64
    mlp_depth: int = 2
    sigma_min: float = 1e-2
    sigma_max: float = 10.0
    encoder: Encoder = Encoder.NTN
    val_embed_steps: int = 5
    val_embed_lr_scale: float = 10.0
    ema_decay: float = 0.995  # per-step weight averaging; 0 evaluates the raw iterate

    def __post_init__(self):
        object.__setattr__(self, "encoder", Encoder(self.encoder))
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ValueError("lr must be finite and >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0.0 <= self.loss_alpha < 1.0:
            raise ValueError("loss_alpha must lie in [0, 1)")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")

    def architecture(self, dataset: Dataset) -> Architecture:
        return Architecture(
            obs_dim=dataset.obs_dim, n_actions=dataset.n_actions, n_traj=dataset.n_trajectories,
            horizon=dataset.horizon, embed_dim=self.embed_dim, ntn_slices=self.ntn_slices,
            hidden_dim=self.hidden_dim, mlp_width=self.mlp_width, mlp_depth=self.mlp_depth,
            sigma_min=self.sigma_min, sigma_max=self.sigma_max, encoder=self.encoder,
        )


def expand_grid(base: HyperParams, **axes) -> list:
    """Cartesian product of ``axes`` over ``base`` in a fixed (row-major) order."""
    grid = [base]
    for name, values in axes.items():
        grid = [replace(h, **{name: v}) for h in grid for v in values]
    return grid


@dataclass
class TrainReport:
    model: TwoWayModel
    best_val_loss: float
    best_epoch: int
    curve: list  # [(epoch, train_loss, val_loss)]
    chosen_hypers: HyperParams
    train_idx: np.ndarray = field(default=None, repr=False)
    val_idx: np.ndarray = field(default=None, repr=False)
    runtime_s: float = 0.0

    @property
    def best_params(self) -> dict:
        return self.model.params


def split(n_trajectories: int, fraction: float = 0.75, seed: int = 0):
    """Trajectory-level train/validation split; ``floor(fraction * N)`` go to training."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    n = int(n_trajectories)
    if n < 1:
        raise ValueError("need at least one trajectory")
    n_train = max(1, int(math.floor(fraction * n)))
    perm = stream(seed, "split").permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


class Adam:
    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float, keys=None):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k in keys if keys is not None else grads:
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _check(value: float, epoch: int, what: str):
    if not math.isfinite(value):
        raise TrainingDiverged(epoch, f"{what} = {value}")


def _decay_grads(grads: dict, params: dict, wd: float, u_rows=None):
    if wd == 0.0:
        return
    for k, g in grads.items():
        if k == "u_table" and u_rows is not None:
            g[u_rows] += wd * params[k][u_rows]
        else:
            g += wd * params[k]


def _mean_loss(model: TwoWayModel, batch: Batch, alpha: float, chunk: int = 8192) -> float:
    total = 0.0
    for s in range(0, len(batch), chunk):
        total += model.loss(batch.take(slice(s, s + chunk)), alpha).total
    return total / max(len(batch), 1)


def _transition_nll(model: TwoWayModel, batch: Batch, chunk: int = 8192) -> float:
    total = 0.0
    for s in range(0, len(batch), chunk):
        total += model.loss(batch.take(slice(s, s + chunk)), 0.0).l_transition
    return total / max(len(batch), 1)


def _fit_val_embeddings(model, val_cells, val_rows, opt, lr, steps, epoch):
    if not model.has_u or len(val_cells) == 0 or lr == 0.0:
        return
    for _ in range(steps):
        bd, g = loss_and_grad(val_cells, model.params, model.arch, 0.0)
        _check(bd.total, epoch, "validation embedding loss")
        gu = {"u_table": np.zeros_like(g["u_table"])}
        gu["u_table"][val_rows] = g["u_table"][val_rows] / len(val_cells)
        opt.step(model.params, gu, lr, keys=("u_table",))


def ema_decay_at(decay: float, step: int) -> float:
    """Warm-up schedule so short runs are not dominated by the initial weights."""
    return min(decay, (1.0 + step) / (10.0 + step))


def _ema_update(avg: dict, params: dict, decay: float, u_rows=None):
    for k, v in params.items():
        if k == "u_table" and u_rows is not None:
            avg[k][u_rows] += (1.0 - decay) * (v[u_rows] - avg[k][u_rows])
        else:
            avg[k] += (1.0 - decay) * (v - avg[k])


def run_epochs(model: TwoWayModel, train_cells: Batch, hypers: HyperParams, n_epochs: int,
               val_cells: Batch = None, val_rows=None, train_rows=None, seed_index: int = 0):
    """Optimise ``model`` in place; returns (curve, best_state) where best_state = (epoch, val, params).

    With ``hypers.ema_decay > 0`` losses, checkpoints and the final
    ``model.params`` use an exponential moving average of the iterates.
    """
    h = hypers
    opt = Adam(model.params)
    live = model.params
    evaluated = TwoWayModel(model.arch, {k: v.copy() for k, v in live.items()}, model.norm) \
        if h.ema_decay > 0.0 else model
    val_opt = Adam({"u_table": evaluated.params["u_table"]}) if model.has_u else None
    n = len(train_cells)
    curve = []
    best = (0, math.inf, None)
    stale = 0
    step = 0
    for epoch in range(1, n_epochs + 1):
        order = stream(h.seed, "shuffle", seed_index * 100_000 + epoch).permutation(n)
        for s in range(0, n, h.batch_size):
            mb = train_cells.take(order[s:s + h.batch_size])
            bd, grads = loss_and_grad(mb, live, model.arch, h.loss_alpha)
            _check(bd.total, epoch, "minibatch loss")
            scale = 1.0 / len(mb)
            for g in grads.values():
                g *= scale
            _decay_grads(grads, live, h.weight_decay, train_rows)
            if h.lr > 0.0:
                opt.step(live, grads, h.lr)
            step += 1
            if evaluated is not model:
                _ema_update(evaluated.params, live, ema_decay_at(h.ema_decay, step), train_rows)
        train_loss = _mean_loss(evaluated, train_cells, h.loss_alpha)
        _check(train_loss, epoch, "training loss")
        if val_cells is not None and len(val_cells) > 0:
            _fit_val_embeddings(evaluated, val_cells, val_rows, val_opt, h.lr * h.val_embed_lr_scale,
                                h.val_embed_steps, epoch)
            val_loss = _transition_nll(evaluated, val_cells)
        else:
            val_loss = _transition_nll(evaluated, train_cells)
        _check(val_loss, epoch, "validation loss")
        curve.append((epoch, train_loss, val_loss))
        if val_loss < best[1]:
            best = (epoch, val_loss, {k: v.copy() for k, v in evaluated.params.items()})
            stale = 0
        else:
            stale += 1
            if val_cells is not None and stale >= h.patience:
                break
    model.params = evaluated.params
    return curve, best


def fit(dataset: Dataset, hypers: HyperParams, fraction: float = 0.75) -> TrainReport:
    """Train with early stopping on the held-out trajectories; returns the best-epoch model."""
    start = time.perf_counter()
    train_idx, val_idx = split(dataset.n_trajectories, fraction, hypers.seed)
    norm = Normalizer.fit(dataset, train_idx)
    model = TwoWayModel.initialize(hypers.architecture(dataset), norm, stream(hypers.seed, "init_params"))
    cells = model.cells(dataset)
    in_train = np.isin(cells.traj, train_idx)
    train_cells, val_cells = cells.take(in_train), cells.take(~in_train)
    curve, (best_epoch, best_val, best_params) = run_epochs(
        model, train_cells, hypers, hypers.max_epochs, val_cells=val_cells, val_rows=val_idx, train_rows=train_idx)
    model.params = best_params
    return TrainReport(model, best_val, best_epoch, curve, hypers, train_idx, val_idx,
                       time.perf_counter() - start)


def refit(dataset: Dataset, hypers: HyperParams, n_epochs: int) -> TwoWayModel:
    """Train on every trajectory for a fixed number of epochs (no validation)."""
    norm = Normalizer.fit(dataset)
    model = TwoWayModel.initialize(hypers.architecture(dataset), norm, stream(hypers.seed, "init_params", 1))
    run_epochs(model, model.cells(dataset), hypers, max(1, n_epochs), seed_index=1)
    return model


def grid_search(dataset: Dataset, grid, fraction: float = 0.75) -> TrainReport:
    """Fit every cell; the smallest best_val_loss wins, earlier cells win ties."""
    grid = list(grid)
    if not grid:
        raise ValueError("empty hyperparameter grid")
    winner = None
    failures = []
    for hypers in grid:
        try:
            report = fit(dataset, hypers, fraction)
        except TrainingDiverged as exc:
            failures.append(exc)
            continue
        if winner is None or report.best_val_loss < winner.best_val_loss:
            winner = report
    if winner is None:
        raise TrainingDiverged(failures[-1].epoch, f"all {len(grid)} grid cells diverged")
    return winner


def train_for_ope(dataset: Dataset, grid, fraction: float = 0.75, do_refit: bool = True):
    """Model selection on the split, then (optionally) a full-data refit; returns (model, report)."""
    report = grid_search(dataset, grid, fraction)
    if not do_refit:
        return report.model, report
    return refit(dataset, report.chosen_hypers, report.best_epoch), report
