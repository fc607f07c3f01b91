import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from d2ac.actor import (
    Denoiser,
    DiffusionActor,
    GaussianActor,
    NoiseSchedule,
    Temperature,
    d2ac_loss,
    denoise,
    edm_coeffs,
    noise_levels,
    pg_loss,
    pg_policy_update,
    pg_weight,
    policy_update,
    return_weights,
    sample_action,
    sampling_levels,
    sigma_at,
    tanh_log_prob,
)
from d2ac.checks import lower_bound_oracle, lower_bound_verdict, sigma_oracle
from d2ac.errors import ConfigError, ModelError, TrainingError
from d2ac.nn import AdamW, numeric_grad_check

# 50-digit Decimal evaluation of the closed form, frozen at creation time.
SIGMA_HALF = 0.40209923959089605
SIGMA_QUARTER = 0.15319027084245915

SCHED = NoiseSchedule()


class ConstantDenoiser:
    """Oracle denoiser that always predicts ``c`` with unit std."""

    def __init__(self, c, action_dim=1):
        self.c = c
        self.action_dim = action_dim

    def __call__(self, state, u, sigma):
        return np.full_like(u, self.c), np.ones_like(u)


def zero_f_denoiser(obs_dim=2, action_dim=2, seed=0):
    den = Denoiser(obs_dim, action_dim, hidden_units=8, embed_dim=4, rng=np.random.default_rng(seed))
    den.net.heads[0].weight.value[...] = 0.0
    den.net.heads[0].bias.value[...] = 0.0
    den.net.bump()
    return den


def test_schedule_endpoints_and_midpoint():
    assert sigma_at(SCHED, 0.0) == 0.05
    assert sigma_at(SCHED, 1.0) == 2.0
    assert sigma_at(SCHED, 0.5) == pytest.approx(0.402, abs=1e-3)
    assert sigma_at(SCHED, 0.5) == pytest.approx(SIGMA_HALF, rel=1e-14)
    assert sigma_at(SCHED, 0.25) == pytest.approx(SIGMA_QUARTER, rel=1e-14)


def test_decimal_oracle_matches_frozen_values():
    assert sigma_oracle(0.5) == SIGMA_HALF
    assert sigma_oracle(0.0) == 0.05 and sigma_oracle(1.0) == 2.0


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_schedule_monotone(a, b):
    lo, hi = sorted((a, b))
    if lo < hi:
        assert sigma_at(SCHED, lo) < sigma_at(SCHED, hi) or hi - lo < 1e-12
    assert 0.05 <= sigma_at(SCHED, a) <= 2.0


def test_ladders():
    np.testing.assert_allclose(noise_levels(SCHED, 5)[[0, 2, 4]], [0.05, SIGMA_HALF, 2.0], rtol=1e-14)
    np.testing.assert_array_equal(noise_levels(SCHED, 1), [0.05])
    np.testing.assert_array_equal(sampling_levels(SCHED, 1), [2.0])
    np.testing.assert_array_equal(sampling_levels(SCHED, 2), [0.05, 2.0])


@pytest.mark.parametrize("kw", [dict(sigma_min=0.0), dict(sigma_min=3.0), dict(rho=0.0), dict(k=0), dict(k_train=0)])
def test_schedule_validation(kw):
    with pytest.raises(ConfigError):
        NoiseSchedule(**kw)


def test_edm_coeffs_examples():
    c_skip, c_out, c_in, c_noise = edm_coeffs(1.0, 1.0)
    assert c_skip == 0.5
    assert c_out == pytest.approx(1 / math.sqrt(2), abs=1e-15)
    assert c_in == pytest.approx(1 / math.sqrt(2), abs=1e-15)
    assert c_noise == 0.0
    c_skip, c_out, _, _ = edm_coeffs(1e-9, 1.0)
    assert c_skip == pytest.approx(1.0, abs=1e-15) and c_out < 1e-8


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-4, 100), st.floats(0.1, 10))
def test_edm_c_in_identity(sigma, sigma_data):
    _, _, c_in, _ = edm_coeffs(sigma, sigma_data)
    assert c_in ** 2 * (sigma ** 2 + sigma_data ** 2) == pytest.approx(1.0, rel=1e-12)


def test_denoise_skip_path_only():
    den = zero_f_denoiser()
    u = np.array([[2.0, -2.0], [0.3, 0.7]])
    mu, sig = denoise(den, np.zeros((2, 2)), u, np.array([1.0, 0.4]))
    np.testing.assert_allclose(mu[0], [1.0, -1.0], atol=1e-15)
    np.testing.assert_allclose(mu[1], u[1] / (1 + 0.16), atol=1e-15)
    assert np.all((sig >= 1e-3) & (sig <= 2.0))


def test_denoise_non_finite_is_model_error():
    den = Denoiser(1, 1, hidden_units=4, embed_dim=2)
    with pytest.raises(ModelError):
        den(np.array([[np.nan]]), np.zeros((1, 1)), np.array([0.5]))


@pytest.mark.parametrize("seed", range(5))
def test_denoiser_mean_gradient(seed):
    rng = np.random.default_rng(seed)
    den = Denoiser(3, 2, hidden_units=8, embed_dim=4, rng=rng)
    for p in den.net.params():
        p.value += 0.1 * rng.standard_normal(p.shape)
    obs, u, sigma = rng.standard_normal((4, 3)), rng.standard_normal((4, 2)), rng.uniform(0.05, 2, 4)
    w = rng.standard_normal((4, 2))

    def loss():
        return (den.forward(obs, u, sigma)[0] * w).sum()

    den.net.zero_grad()
    _, _, cache = den.forward(obs, u, sigma)
    den.backward(cache, w, np.zeros_like(w))
    params = den.net.params()
    assert numeric_grad_check(params, loss, [p.grad.copy() for p in params]) < 1e-6


@pytest.mark.parametrize("k", [1, 2, 5])
def test_constant_denoiser_final_mean(k):
    rng = np.random.default_rng(0)
    a, chain = sample_action(ConstantDenoiser(0.4), np.zeros((3, 1)), NoiseSchedule(k=k), rng, use_final_mean=True)
    np.testing.assert_allclose(chain[-1], 0.4, atol=1e-15)
    np.testing.assert_allclose(a, math.tanh(0.4), atol=1e-15)
    assert len(chain) == k + 1


def test_single_step_sampler_uses_sigma_max():
    seen = []

    class Recorder(ConstantDenoiser):
        def __call__(self, state, u, sigma):
            seen.append((u.copy(), sigma.copy()))
            return super().__call__(state, u, sigma)

    a, chain = sample_action(Recorder(-0.2), np.zeros((2, 1)), NoiseSchedule(k=1), np.random.default_rng(1),
                             use_final_mean=True)
    np.testing.assert_array_equal(seen[0][1], 2.0)
    np.testing.assert_array_equal(seen[0][0], chain[0])
    np.testing.assert_allclose(a, math.tanh(-0.2))


def test_point_mass_oracle_monte_carlo():
    rng = np.random.default_rng(2)
    n = 10_000
    _, chain = sample_action(ConstantDenoiser(0.7), np.zeros((n, 1)), NoiseSchedule(k=5), rng)
    u0 = chain[-1][:, 0]
    se = u0.std() / math.sqrt(n)
    assert abs(u0.mean() - 0.7) < 3 * se
    assert np.std(chain[0]) == pytest.approx(2.0, rel=0.05)


def test_sampled_actions_strictly_bounded():
    rng = np.random.default_rng(3)
    den = Denoiser(2, 3, hidden_units=8, embed_dim=4, rng=rng)
    for p in den.net.params():
        p.value *= 100.0
    den.net.bump()
    for mean in (False, True):
        a, _ = sample_action(den, rng.standard_normal((500, 2)) * 10, SCHED, rng, use_final_mean=mean)
        assert np.all(np.abs(a) < 1.0)


def test_tanh_log_prob_examples():
    assert tanh_log_prob(np.zeros(1), np.zeros(1), np.ones(1)) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)
    u = np.array([30.0, 60.0])
    f = tanh_log_prob(u[:, None], u[:, None], np.ones((2, 1)))
    # correction grows like 2u
    assert f[1] - f[0] == pytest.approx(60.0, abs=1e-9)
    assert np.all(np.isfinite(tanh_log_prob(np.array([500.0]), np.zeros(1), np.ones(1))))


@settings(max_examples=300, deadline=None)
@given(st.floats(-5, 5), st.floats(-3, 3), st.floats(0.01, 3))
def test_tanh_log_prob_matches_direct_formula(u, mu, sigma):
    direct = -0.5 * ((u - mu) / sigma) ** 2 - math.log(sigma) - 0.5 * math.log(2 * math.pi)
    direct -= math.log(1 - math.tanh(u) ** 2)
    assert abs(tanh_log_prob(np.array([u]), np.array([mu]), np.array([sigma])) - direct) < 1e-9


def test_policy_update_fixed_point():
    rng = np.random.default_rng(4)
    den = Denoiser(2, 2, hidden_units=8, embed_dim=4, rng=rng)
    temp = Temperature(2)
    temp.log_alpha.value[0] = -np.inf
    grads = []
    optim = AdamW(den.net.params(), lr=1e-3, weight_decay=0.0, owners=[den.net])
    step = optim.step
    optim.step = lambda: (grads.append([p.grad.copy() for p in den.net.params()]), step())
    temp.optim.step = lambda: None
    loss, _, _ = policy_update(den, temp, rng.standard_normal((16, 2)), np.tanh(rng.standard_normal((16, 2))),
                               np.full(16, 0.3), lambda s, a: (np.zeros(len(a)), np.zeros_like(a)), rng, optim)
    assert loss == 0.0
    assert all(np.all(g == 0.0) for g in grads[0])


def test_policy_update_pushes_toward_q_optimum():
    rng = np.random.default_rng(5)
    den = Denoiser(1, 1, hidden_units=16, embed_dim=4, rng=rng)
    temp = Temperature(1, alpha_init=0.01, lr=0.0)
    optim = AdamW(den.net.params(), lr=1e-3, weight_decay=0.0, owners=[den.net])
    state = np.zeros((32, 1))
    action = np.full((32, 1), 0.8)
    probe_u = np.full((1, 1), math.atanh(0.8))

    def q_grad(s, a):
        return -(a ** 2).sum(axis=1), -2.0 * a

    norms = []
    for _ in range(500):
        policy_update(den, temp, state, action, np.full(32, 0.3), q_grad, rng, optim)
        mu, _ = den(np.zeros((1, 1)), probe_u, np.array([0.3]))
        norms.append(abs(math.tanh(mu[0, 0])))
    assert np.mean(norms[-50:]) < np.mean(norms[:50]) < 0.8
    assert np.mean(norms[-50:]) < 0.2


def test_policy_update_rejects_non_finite_q_gradient():
    rng = np.random.default_rng(6)
    den = Denoiser(1, 1, hidden_units=4, embed_dim=2, rng=rng)
    optim = AdamW(den.net.params(), lr=1e-3, owners=[den.net])
    with pytest.raises(TrainingError):
        policy_update(den, Temperature(1), np.zeros((2, 1)), np.zeros((2, 1)), 0.5,
                      lambda s, a: (np.zeros(2), np.full_like(a, np.nan)), rng, optim)


def test_policy_update_handles_boundary_actions():
    rng = np.random.default_rng(7)
    den = Denoiser(1, 2, hidden_units=4, embed_dim=2, rng=rng)
    optim = AdamW(den.net.params(), lr=1e-3, owners=[den.net])
    loss, _, _ = policy_update(den, Temperature(2), np.zeros((2, 1)), np.array([[1.0, -1.0], [0.0, 1.0]]), 0.5,
                               lambda s, a: (np.zeros(2), np.zeros_like(a)), rng, optim)
    assert np.isfinite(loss)


@pytest.mark.parametrize("seed", range(5))
def test_actor_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    den = Denoiser(3, 2, hidden_units=8, embed_dim=4, rng=rng)
    for p in den.net.params():
        p.value += 0.1 * rng.standard_normal(p.shape)
    obs, u_t = rng.standard_normal((6, 3)), rng.standard_normal((6, 2))
    sigma, eps2 = rng.uniform(0.05, 2, 6), rng.standard_normal((6, 2))
    x_target, weights = rng.standard_normal((6, 2)), rng.uniform(0.5, 1.5, 6)

    def loss_fn():
        mu, sig, _ = den.forward(obs, u_t, sigma)
        return d2ac_loss(mu + eps2 * sig, mu, sig, eps2, x_target, 0.3, weights)[0]

    den.net.zero_grad()
    mu, sig, cache = den.forward(obs, u_t, sigma)
    _, _, d_mu, d_sig = d2ac_loss(mu + eps2 * sig, mu, sig, eps2, x_target, 0.3, weights)
    den.backward(cache, d_mu, d_sig)
    params = den.net.params()
    assert numeric_grad_check(params, loss_fn, [p.grad.copy() for p in params]) < 1e-5


def test_temperature_step_direction():
    # a concentrated policy (high log-likelihood) raises alpha, a diffuse one lowers it
    temp = Temperature(2, alpha_init=0.2, lambda_ent=0.0, lr=0.01)
    temp.update(np.array([5.0, 5.0]))
    assert temp.alpha > 0.2
    temp = Temperature(2, alpha_init=0.2, lambda_ent=0.0, lr=0.01)
    temp.update(np.array([-5.0]))
    assert temp.alpha < 0.2
    temp = Temperature(2, alpha_init=0.2, lambda_ent=1.0, lr=0.01)
    temp.update(np.array([1.5]))
    assert temp.alpha < 0.2


def test_pg_weight_examples():
    assert pg_weight(SCHED, 1, n_levels=2) == pytest.approx(399.75, rel=1e-14)
    assert pg_weight(SCHED, 1, levels=[0.3, 0.3]) == 0.0
    for k in range(1, 5):
        assert pg_weight(SCHED, k) > 0
    with pytest.raises(ConfigError):
        pg_weight(SCHED, 5)


def test_pg_loss_zero_weight_and_perfect_denoiser():
    rng = np.random.default_rng(8)
    den = Denoiser(1, 1, hidden_units=4, embed_dim=2, rng=rng)
    state, u, noisy = np.zeros((4, 1)), rng.standard_normal((4, 1)), rng.standard_normal((4, 1))
    sigma, lam = np.full(4, 0.5), np.full(4, 3.0)
    loss, _, d_mu = pg_loss(den, state, u, noisy, sigma, lam, np.zeros(4))
    assert loss == 0.0 and np.all(d_mu == 0.0)
    mu = den(state, noisy, sigma)[0]
    loss, _, d_mu = pg_loss(den, state, mu, noisy, sigma, lam, np.ones(4))
    assert loss == 0.0 and np.all(d_mu == 0.0)


def test_pg_loss_gradient():
    rng = np.random.default_rng(9)
    den = Denoiser(2, 2, hidden_units=8, embed_dim=4, rng=rng)
    for p in den.net.params():
        p.value += 0.1 * rng.standard_normal(p.shape)
    state, u, noisy = rng.standard_normal((5, 2)), rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    sigma, lam, w = rng.uniform(0.05, 2, 5), rng.uniform(1, 10, 5), rng.uniform(0, 1, 5)
    den.net.zero_grad()
    _, cache, d_mu = pg_loss(den, state, u, noisy, sigma, lam, w)
    den.backward(cache, d_mu, np.zeros_like(d_mu))
    params = den.net.params()

    def loss_fn():
        mu = den.forward(state, noisy, sigma)[0]
        return ((lam * w) * ((u - mu) ** 2).sum(axis=1)).mean()

    assert numeric_grad_check(params, loss_fn, [p.grad.copy() for p in params]) < 1e-5


def test_return_weights_overflow_safe():
    w = return_weights(np.array([1e4, 1e4 - 1.0, -1e4]), 1.0)
    assert np.all(np.isfinite(w)) and w.max() == 1.0
    assert w[1] == pytest.approx(math.exp(-1.0))


def test_pg_policy_update_runs_and_validates():
    rng = np.random.default_rng(10)
    den = Denoiser(2, 1, hidden_units=4, embed_dim=2, rng=rng)
    optim = AdamW(den.net.params(), lr=1e-3, owners=[den.net])
    loss = pg_policy_update(den, np.zeros((8, 2)), np.zeros((8, 1)), np.ones(8), SCHED, rng, optim)
    assert np.isfinite(loss)
    with pytest.raises(TrainingError):
        pg_policy_update(den, np.zeros((1, 2)), np.zeros((1, 1)), np.array([np.inf]), SCHED, rng, optim)
    with pytest.raises(ConfigError):
        pg_policy_update(den, np.zeros((1, 2)), np.zeros((1, 1)), np.ones(1), NoiseSchedule(k_train=1), rng, optim)


def test_train_levels_follow_training_ladder():
    actor = DiffusionActor(2, 1, SCHED, hidden_units=4, embed_dim=2, rng=np.random.default_rng(0))
    idx, sig = actor.train_levels(np.random.default_rng(1), 2000, 5)
    assert set(np.unique(idx)) == {1, 2, 3, 4, 5}
    np.testing.assert_array_equal(sig, noise_levels(SCHED, 5)[idx - 1])
    idx, sig = actor.train_levels(np.random.default_rng(1), 10, 1)
    np.testing.assert_array_equal(sig, 0.05)


def test_unknown_actor_loss():
    with pytest.raises(ConfigError):
        DiffusionActor(2, 1, SCHED, loss="ppo")


def test_gaussian_actor_acts_in_bounds():
    actor = GaussianActor(3, 2, hidden_units=8, rng=np.random.default_rng(0))
    a = actor.act(np.random.default_rng(1).standard_normal((50, 3)), np.random.default_rng(2))
    assert a.shape == (50, 2) and np.all(np.abs(a) < 1)


def test_lower_bound_oracle():
    rows, diag = lower_bound_oracle()
    ok, report = lower_bound_verdict(rows)
    assert ok, report
    assert diag["denoiser_error"] < 0.05
    assert {r.k for r in rows} == {0, 1}
