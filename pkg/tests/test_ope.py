import math

import numpy as np
import pytest

from twode.env import EnvConfig, EnvKind, PolicySpec, TrueTransition, gen_dynamic_process, named_target
from twode.ntn import Architecture, Normalizer, TwoWayModel, init_params
from twode.ope import (
    LMSE_FLOOR, EvalReport, OpeConfig, RolloutError, crossfit_estimate, crossfit_folds, estimate_value, metrics,
    rollout,
)


class ConstantReward:
    n_actions, has_u, has_w = 2, True, True

    def __init__(self, value=1.0):
        self.value = value
        self.calls = 0

    def sample_step(self, obs, action_ids, u, w, rng):
        self.calls += 1
        return np.full(obs.shape[0], self.value), obs


class LinearGaussian:
    """o' = rho o + b a + u + w + s e,  r = c o + k a + u + w + s e'."""

    n_actions, has_u, has_w = 2, True, True

    def __init__(self, rho=0.7, b=0.5, c=1.0, k=2.0, s=0.5):
        self.rho, self.b, self.c, self.k, self.s = rho, b, c, k, s

    def sample_step(self, obs, action_ids, u, w, rng):
        n = obs.shape[0]
        a = np.asarray(action_ids, float)
        lat = np.asarray(u).reshape(n) + np.asarray(w).reshape(n)
        o = obs[:, 0]
        r = self.c * o + self.k * a + lat + self.s * rng.standard_normal(n)
        nxt = self.rho * o + self.b * a + lat + self.s * rng.standard_normal(n)
        return r, nxt[:, None]

    def expected(self, o1, u, w, p):
        """Symbolic unrolling of the mean recursion."""
        total = 0.0
        for o0, ui in zip(o1[:, 0], u):
            mean_o = o0
            for t in range(len(w)):
                total += self.c * mean_o + self.k * p + ui + w[t]
                mean_o = self.rho * mean_o + self.b * p + ui + w[t]
        return total / (len(u) * len(w))


TARGET = PolicySpec.random(0.3)


def test_constant_reward_gives_one():
    cfg = OpeConfig(TARGET, 7)
    assert estimate_value(ConstantReward(), np.zeros((3, 1)), np.zeros(3), np.zeros(5), cfg) == 1.0


def test_linear_gaussian_closed_form():
    model = LinearGaussian()
    rng = np.random.default_rng(0)
    o1, u, w = rng.standard_normal((20, 1)), rng.standard_normal(20), rng.standard_normal(8)
    eta, se = estimate_value(model, o1, u, w, OpeConfig(TARGET, 200, seed=4), return_se=True)
    want = model.expected(o1, u, w, 0.3)
    # the reported SE spans trajectories; the MC error of a fixed design is smaller
    assert abs(eta - want) < 3 * se


def test_mc_error_shrinks_with_m():
    model = LinearGaussian()
    o1, u, w = np.zeros((4, 1)), np.zeros(4), np.zeros(6)
    sds = []
    for m in (10, 20, 40, 160):
        est = [estimate_value(model, o1, u, w, OpeConfig(TARGET, m, seed=s)) for s in range(30)]
        sds.append(np.std(est, ddof=1))
    assert 0.5 < sds[1] / sds[0] < 0.95  # about 1/sqrt(2)
    assert sds[0] >= sds[2] >= sds[3]


def test_same_seed_same_estimate():
    model = LinearGaussian()
    args = (np.ones((3, 1)), np.zeros(3), np.zeros(4))
    assert estimate_value(model, *args, OpeConfig(TARGET, 5, seed=9)) == \
        estimate_value(model, *args, OpeConfig(TARGET, 5, seed=9))
    r1 = rollout(model, 0.0, np.zeros(6), np.ones(1), TARGET, np.random.default_rng(3))
    r2 = rollout(model, 0.0, np.zeros(6), np.ones(1), TARGET, np.random.default_rng(3))
    assert r1.shape == (6,) and np.array_equal(r1, r2)


def test_single_step_rollout():
    model = ConstantReward(2.5)
    out = rollout(model, 0.0, np.zeros(1), np.zeros(1), TARGET, np.random.default_rng(0))
    assert out.tolist() == [2.5] and model.calls == 1


def test_near_deterministic_network():
    arch = Architecture(obs_dim=1, n_actions=2, n_traj=3, horizon=5, embed_dim=2, ntn_slices=2, hidden_dim=3,
                        mlp_width=4, mlp_depth=1, sigma_min=1e-3)
    params = init_params(arch, np.random.default_rng(0))
    params["P1.W"][:] = 0.0
    params["P1.b"][:] = [0.7, 0.0, -40.0, -40.0]
    model = TwoWayModel(arch, params, Normalizer.identity(1))
    rewards = rollout(model, model.u_hat[0], model.w_hat, np.zeros(1), TARGET, np.random.default_rng(1))
    assert np.all(np.abs(rewards - 0.7) < 5 * arch.sigma_min)


def test_missing_latents_rejected():
    cfg = OpeConfig(TARGET, 2)
    with pytest.raises(ValueError):
        estimate_value(ConstantReward(), np.zeros((3, 1)), None, np.zeros(4), cfg)
    with pytest.raises(ValueError):
        estimate_value(ConstantReward(), np.zeros((3, 1)), np.zeros(2), np.zeros(4), cfg)
    with pytest.raises(ValueError):
        estimate_value(ConstantReward(), np.zeros((3, 1)), np.zeros(3), None, cfg)


def test_non_finite_rollout_aborts():
    with pytest.raises(RolloutError):
        estimate_value(ConstantReward(np.nan), np.zeros((2, 1)), np.zeros(2), np.zeros(3), OpeConfig(TARGET, 1))


def test_config_validation():
    with pytest.raises(ValueError):
        OpeConfig(TARGET, 0)
    with pytest.raises(ValueError):
        OpeConfig(PolicySpec.behavior())


def test_latent_policy_decoupling():
    cfg = EnvConfig(EnvKind.DYNAMIC_PROCESS, 30, 10, seed=5)
    d1, lat1 = gen_dynamic_process(cfg, PolicySpec.behavior())
    d2, lat2 = gen_dynamic_process(cfg, PolicySpec.random(0.9))
    assert not np.array_equal(d1.actions, d2.actions)
    oracle = TrueTransition(cfg)
    ope = OpeConfig(named_target(EnvKind.DYNAMIC_PROCESS, "A"), 3, seed=2)
    a = estimate_value(oracle, d1.initial_observations, lat1.u, lat1.w, ope)
    b = estimate_value(oracle, d2.initial_observations, lat2.u, lat2.w, ope)
    assert a == b


# ---------------------------------------------------------------- cross-fitting


def test_crossfit_folds():
    f1, f2 = crossfit_folds(7, seed=1)
    assert len(f1) == 4 and len(f2) == 3
    assert sorted(np.concatenate([f1, f2]).tolist()) == list(range(7))
    with pytest.raises(ValueError):
        crossfit_folds(1)


class Affine:
    """Deterministic reward k * o + u, observation unchanged."""

    n_actions, has_u, has_w = 2, True, True

    def __init__(self, k, u_hat, horizon):
        self.k, self.u_hat, self.w_hat = k, np.asarray(u_hat, float), np.zeros(horizon)

    def sample_step(self, obs, action_ids, u, w, rng):
        return self.k * obs[:, 0] + np.asarray(u).reshape(-1), obs


def affine_trainer(dataset):
    # slope depends on the fold's data, u is ten times the first observation
    o = dataset.initial_observations[:, 0]
    return Affine(k=float(o.sum()), u_hat=10 * o, horizon=dataset.horizon)


def test_crossfit_by_hand():
    cfg = EnvConfig(EnvKind.LINEAR, 2, 1, seed=0)
    from twode.env import gen_linear
    data, _ = gen_linear(cfg, PolicySpec.behavior())
    o = data.initial_observations[:, 0]
    ope = OpeConfig(PolicySpec.random(0.5), 3)
    got = crossfit_estimate(data, affine_trainer, ope, folds=(np.array([0]), np.array([1])))
    # fold 1 through fold 2's slope and vice versa
    want = 0.5 * ((o[1] * o[0] + 10 * o[0]) + (o[0] * o[1] + 10 * o[1]))
    assert got == pytest.approx(want, abs=1e-12)


def oracle_trainer(cfg, data, lat):
    """'Training' that returns the true dynamics with the fold's true latents."""

    def trainer(part):
        idx = [int(np.flatnonzero((data.observations == part.observations[i]).all(axis=(1, 2)))[0])
               for i in range(part.n_trajectories)]
        model = TrueTransition(cfg)
        model.u_hat, model.w_hat = lat.u[idx], lat.w
        return model

    return trainer


def test_crossfit_order_within_folds_irrelevant():
    cfg = EnvConfig(EnvKind.DYNAMIC_PROCESS, 10, 4, seed=3)
    data, lat = gen_dynamic_process(cfg, PolicySpec.behavior())

    trainer = oracle_trainer(cfg, data, lat)
    ope = OpeConfig(named_target(EnvKind.DYNAMIC_PROCESS, "A"), 5, seed=1)
    f1, f2 = crossfit_folds(10, seed=0)
    a = crossfit_estimate(data, trainer, ope, folds=(f1, f2))
    b = crossfit_estimate(data, trainer, ope, folds=(f1[::-1], np.roll(f2, 1)))
    assert a == b


def test_crossfit_with_identical_models_matches_pooled():
    cfg = EnvConfig(EnvKind.DYNAMIC_PROCESS, 40, 6, seed=8)
    data, lat = gen_dynamic_process(cfg, PolicySpec.behavior())
    oracle = TrueTransition(cfg)

    trainer = oracle_trainer(cfg, data, lat)
    ope = OpeConfig(named_target(EnvKind.DYNAMIC_PROCESS, "A"), 50, seed=2)
    pooled, se = estimate_value(oracle, data.initial_observations, lat.u, lat.w, ope, return_se=True)
    cross = crossfit_estimate(data, trainer, ope)
    assert abs(cross - pooled) < 4 * se


# ---------------------------------------------------------------- metrics


def test_metrics_examples():
    assert metrics([3.0, 3.0], 2.0) == (0.0, 1.0)
    assert metrics([2.0, 2.0], 2.0) == (LMSE_FLOOR, 0.0)
    lmse, bias = metrics([1.0, 3.0], 2.0)
    assert lmse == 0.0 and bias == 0.0
    assert LMSE_FLOOR == pytest.approx(math.log(1e-300))
    with pytest.raises(ValueError):
        metrics([], 0.0)


def test_eval_report():
    rep = EvalReport(eta_true=1.0)
    for s, e in enumerate([1.5, 0.5, 2.0]):
        rep.add(e, s)
    assert rep.eta_hat == pytest.approx(4 / 3)
    assert rep.bias == pytest.approx(1 / 3)
    assert rep.bias ** 2 <= math.exp(rep.lmse)
    assert rep.seeds == [0, 1, 2]
