"""Self-checks run by ``d2ac check``: numerical properties of every module plus
the one-step lower-bound verification on a 1-D Gaussian oracle.

Each check returns ``(passed, detail)``. Implementations under test are looked
up on an ``impl`` namespace so a deliberately broken function can be injected.
"""
from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass, replace
from decimal import Decimal, getcontext
from types import SimpleNamespace

import numpy as np

from . import actor as act
from . import critic as crit
from .nn import AdamW, MlpNetwork, Parameter, adamw_step, finite_diff_check, numeric_grad_check


@dataclass
class CheckResult:
    check_id: str
    passed: bool
    seconds: float
    detail: str


def default_impl() -> SimpleNamespace:
    return SimpleNamespace(
        two_hot=crit.two_hot, project_dist=crit.project_dist, project_twohot=crit.project_twohot,
        clip_select=crit.clip_select, critic_loss_and_grad=crit.critic_loss_and_grad,
        sigma_at=act.sigma_at, tanh_log_prob=act.tanh_log_prob,
    )


# --- nn-core -----------------------------------------------------------------


def _quadratic_head_loss(rng, dims):
    targets = [rng.standard_normal(d) for d in dims]

    def loss(outs):
        value = sum(((o - t) ** 2).sum() for o, t in zip(outs, targets))
        return value, [2.0 * (o - t) for o, t in zip(outs, targets)]

    return loss


def check_mlp_gradients(impl, seeds: int = 20):
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        net = MlpNetwork(5, [3, 2], hidden_units=8, hidden_layers=2, rng=rng)
        # perturb LayerNorm parameters away from their trivial init
        for p in net.params():
            p.value += 0.1 * rng.standard_normal(p.value.shape)
        x = rng.standard_normal((4, 5))
        worst = max(worst, finite_diff_check(net, x, _quadratic_head_loss(rng, [3, 2]), eps=1e-6))
    return worst < 1e-6, f"max rel err {worst:.2e} over {seeds} seeds"


def check_critic_gradients(impl, seeds: int = 20):
    worst = 0.0
    support = crit.make_support(-5, 5, 11)
    for seed in range(seeds):
        rng = np.random.default_rng(100 + seed)
        net = MlpNetwork(6, [support.n_atoms], hidden_units=8, hidden_layers=2, rng=rng)
        for p in net.params():
            p.value += 0.1 * rng.standard_normal(p.value.shape)
        x = rng.standard_normal((4, 6))
        label = rng.dirichlet(np.ones(support.n_atoms), size=4)

        def loss(outs, label=label):
            lp = crit.log_softmax(outs[0])
            return -(label * lp).sum(), [np.exp(lp) - label]

        worst = max(worst, finite_diff_check(net, x, loss, eps=1e-6))
    return worst < 1e-6, f"max rel err {worst:.2e} over {seeds} seeds"


def check_denoiser_gradients(impl, seeds: int = 20):
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(200 + seed)
        den = act.Denoiser(3, 2, hidden_units=8, hidden_layers=2, embed_dim=4, rng=rng)
        for p in den.net.params():
            p.value += 0.1 * rng.standard_normal(p.value.shape)
        obs, u = rng.standard_normal((4, 3)), rng.standard_normal((4, 2))
        sigma = rng.uniform(0.05, 2.0, 4)
        w_mu, w_sig = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))

        def loss_fn():
            mu, sig, _ = den.forward(obs, u, sigma)
            return (w_mu * mu).sum() + (w_sig * sig).sum()

        den.net.zero_grad()
        _, _, cache = den.forward(obs, u, sigma)
        den.backward(cache, w_mu, w_sig)
        params = den.net.params()
        worst = max(worst, numeric_grad_check(params, loss_fn, [p.grad.copy() for p in params], eps=1e-6))
    return worst < 1e-6, f"max rel err {worst:.2e} over {seeds} seeds"


def check_forward_determinism(impl):
    outs = []
    for _ in range(2):
        net = MlpNetwork(4, [3], 16, 2, np.random.default_rng(7))
        outs.append(net.forward(np.linspace(-1, 1, 8).reshape(2, 4))[0][0])
    return bool(np.array_equal(outs[0], outs[1])), "bit-identical" if np.array_equal(*outs) else "differs"


def check_adamw_decoupling(impl):
    rng = np.random.default_rng(0)
    p = Parameter("w", rng.standard_normal(5))
    before = p.value.copy()
    adamw_step([p], lr=0.01, weight_decay=0.1)
    err = float(np.max(np.abs(p.value - before * (1 - 0.001))))
    return err == 0.0, f"max deviation from pure decay {err:.1e}"


# --- categorical critic ---------------------------------------------------------


def _random_support(rng):
    v_min = rng.uniform(-100, 0)
    return crit.make_support(v_min, v_min + rng.uniform(1, 200), int(rng.integers(2, 60)))


def check_mass_conservation(impl, cases: int = 300):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(cases):
        s = _random_support(rng)
        z = rng.uniform(s.v_min - 20, s.v_max + 20, size=s.n_atoms)
        p = rng.dirichlet(np.ones(s.n_atoms) * rng.uniform(0.1, 2))
        worst = max(worst, abs(impl.two_hot(s, z[0]).sum() - 1.0),
                    abs(impl.project_dist(z, p, s).sum() - 1.0))
    return worst < 1e-12, f"max |mass - 1| {worst:.1e}"


def check_mean_preservation(impl, cases: int = 300):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(cases):
        s = _random_support(rng)
        z = rng.uniform(s.v_min - 20, s.v_max + 20, size=s.n_atoms)
        p = rng.dirichlet(np.ones(s.n_atoms))
        worst = max(worst,
                    abs(impl.two_hot(s, z[0]) @ s.atoms - np.clip(z[0], s.v_min, s.v_max)),
                    abs(impl.project_dist(z, p, s) @ s.atoms - p @ np.clip(z, s.v_min, s.v_max)))
    return worst < 1e-10, f"max mean error {worst:.1e}"


def check_onehot_equivalence(impl, cases: int = 1000):
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(cases):
        s = _random_support(rng)
        z = rng.uniform(s.v_min - 20, s.v_max + 20, size=s.n_atoms)
        p = np.zeros(s.n_atoms)
        p[rng.integers(s.n_atoms)] = 1.0
        if not np.array_equal(impl.project_dist(z, p, s), impl.project_twohot(z, p, s)):
            mismatches += 1
    return mismatches == 0, f"{mismatches}/{cases} mismatches"


def check_clip_semantics(impl, cases: int = 500):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(cases):
        s = _random_support(rng)
        d1, d2 = rng.dirichlet(np.ones(s.n_atoms), size=2)
        if rng.random() < 0.1:
            d2 = d1.copy()
        got = crit.expected_value(impl.clip_select(d1, d2, s), s)
        worst = max(worst, abs(got - min(crit.expected_value(d1, s), crit.expected_value(d2, s))))
    return worst == 0.0, f"max deviation {worst:.1e}"


def check_projection_linearity(impl, cases: int = 300):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(cases):
        s = _random_support(rng)
        z = rng.uniform(s.v_min - 20, s.v_max + 20, size=s.n_atoms)
        p, q = rng.dirichlet(np.ones(s.n_atoms), size=2)
        a = rng.random()
        lhs = impl.project_dist(z, a * p + (1 - a) * q, s)
        rhs = a * impl.project_dist(z, p, s) + (1 - a) * impl.project_dist(z, q, s)
        worst = max(worst, float(np.abs(lhs - rhs).max()))
    return worst < 1e-12, f"max deviation {worst:.1e}"


def check_critic_loss_gradient(impl, cases: int = 20):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(cases):
        n = int(rng.integers(2, 30))
        l1 = Parameter("l1", rng.standard_normal(n) * 3)
        l2 = Parameter("l2", rng.standard_normal(n) * 3)
        label = rng.dirichlet(np.ones(n))
        _, g1, g2 = impl.critic_loss_and_grad(l1.value, l2.value, label)
        worst = max(worst, numeric_grad_check(
            [l1, l2], lambda: impl.critic_loss_and_grad(l1.value, l2.value, label)[0], [g1, g2], eps=1e-6))
    return worst < 1e-8, f"max rel err {worst:.2e}"


# --- diffusion actor ------------------------------------------------------------


def sigma_oracle(eta: float, sigma_min=0.05, sigma_max=2.0, rho=7, digits: int = 50) -> float:
    """Closed-form noise level evaluated in 50-digit decimal arithmetic."""
    getcontext().prec = digits
    inv = Decimal(1) / Decimal(rho)
    lo = Decimal(str(sigma_min)) ** inv
    hi = Decimal(str(sigma_max)) ** inv
    return float((lo + Decimal(str(eta)) * (hi - lo)) ** Decimal(rho))


def check_schedule(impl):
    sched = act.NoiseSchedule()
    ends = (impl.sigma_at(sched, 0.0) == sched.sigma_min, impl.sigma_at(sched, 1.0) == sched.sigma_max)
    mid = float(impl.sigma_at(sched, 0.5))
    err = abs(mid - sigma_oracle(0.5))
    grid = impl.sigma_at(sched, np.linspace(0, 1, 1001))
    mono = bool(np.all(np.diff(grid) > 0))
    ok = all(ends) and err < 1e-3 and abs(mid - 0.402) < 1e-3 and mono
    return ok, f"endpoints exact={all(ends)} sigma(0.5)={mid:.6f} oracle err={err:.1e} monotone={mono}"


def check_fent_equivalence(impl):
    rng = np.random.default_rng(8)
    u = rng.uniform(-5, 5, (2000, 3))
    mu = rng.uniform(-2, 2, u.shape)
    sig = rng.uniform(0.05, 2, u.shape)
    gauss = (-0.5 * ((u - mu) / sig) ** 2 - np.log(sig) - 0.5 * math.log(2 * math.pi)).sum(-1)
    direct = gauss - np.log(1.0 - np.tanh(u) ** 2).sum(-1)
    err = float(np.abs(impl.tanh_log_prob(u, mu, sig) - direct).max())
    return err < 1e-9, f"max abs diff {err:.1e}"


def check_actions_bounded(impl):
    rng = np.random.default_rng(9)
    den = act.Denoiser(2, 3, hidden_units=16, rng=rng)
    for p in den.net.params():
        p.value *= 50.0
    ok = True
    for k in (1, 2, 5):
        a, _ = act.sample_action(den, rng.standard_normal((256, 2)) * 10, act.NoiseSchedule(k=k), rng)
        ok &= bool(np.all(np.abs(a) < 1.0))
    return ok, "all actions strictly inside (-1, 1)" if ok else "action on the boundary"


def check_policy_loss_fixed_point(impl):
    rng = np.random.default_rng(10)
    den = act.Denoiser(2, 2, hidden_units=16, rng=rng)
    temp = act.Temperature(2, alpha_init=1.0)
    temp.log_alpha.value[0] = -np.inf
    obs = rng.standard_normal((32, 2))
    a = np.tanh(rng.standard_normal((32, 2)))
    optim = AdamW(den.net.params(), lr=1e-3, weight_decay=0.0, owners=[den.net])
    seen = []

    def zero_grad(s, x):
        return np.zeros(len(x)), np.zeros_like(x)

    # capture gradients before the optimizer clears them
    original = optim.step
    optim.step = lambda: (seen.append(max(float(np.abs(p.grad).max()) for p in den.net.params())), original())
    temp.optim.step = lambda: None
    loss, _, _ = act.policy_update(den, temp, obs, a, np.full(32, 0.5), zero_grad, rng, optim)
    return seen[0] == 0.0 and loss == 0.0, f"loss={loss} max |grad|={seen[0]}"


def check_policy_update_gradient(impl, seeds: int = 5):
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(300 + seed)
        den = act.Denoiser(3, 2, hidden_units=8, embed_dim=4, rng=rng)
        for p in den.net.params():
            p.value += 0.1 * rng.standard_normal(p.value.shape)
        obs = rng.standard_normal((6, 3))
        u_t = rng.standard_normal((6, 2))
        sigma = rng.uniform(0.05, 2, 6)
        eps2 = rng.standard_normal((6, 2))
        x_target = rng.standard_normal((6, 2))
        alpha = 0.3

        def loss_fn():
            mu, sig, _ = den.forward(obs, u_t, sigma)
            return act.d2ac_loss(mu + eps2 * sig, mu, sig, eps2, x_target, alpha)[0]

        den.net.zero_grad()
        mu, sig, cache = den.forward(obs, u_t, sigma)
        _, _, d_mu, d_sig = act.d2ac_loss(mu + eps2 * sig, mu, sig, eps2, x_target, alpha)
        den.backward(cache, d_mu, d_sig)
        params = den.net.params()
        worst = max(worst, numeric_grad_check(params, loss_fn, [p.grad.copy() for p in params], eps=1e-6))
    return worst < 1e-5, f"max rel err {worst:.2e}"


# --- one-step lower bound on a Gaussian oracle -----------------------------------


@dataclass
class LowerBoundRow:
    sigma_hat: float
    k: int
    e_hat: float
    e_p0: float
    se: float
    kl_premise: bool
    holds: bool


def _gauss_kl(mean, var, target_var):
    return 0.5 * (var / target_var + mean ** 2 / target_var - 1.0 - math.log(var / target_var))


def train_gaussian_denoiser(mean: float, std: float, levels, steps: int = 3000, seed: int = 0,
                            hidden_units: int = 32):
    """Fit a 1-D denoiser on samples of ``N(mean, std^2)`` at the given noise levels.

    Plain denoising regression; the last 40% of steps use large batches and
    decayed learning rates so the fit approaches the posterior mean.
    """
    rng = np.random.default_rng(seed)
    den = act.Denoiser(1, 1, hidden_units=hidden_units, hidden_layers=2, embed_dim=8, rng=rng)
    lr = 3e-3
    optim = AdamW(den.net.params(), lr=lr, weight_decay=0.0, owners=[den.net])
    levels = np.asarray(levels, dtype=np.float64)
    for step in range(steps):
        n = 256 if step < 0.6 * steps else 2048
        if step == int(0.6 * steps):
            optim.lr = lr / 10
        if step == int(0.85 * steps):
            optim.lr = lr / 100
        sigma = levels[rng.integers(len(levels), size=n)]
        a0 = mean + std * rng.standard_normal((n, 1))
        u = a0 + sigma[:, None] * rng.standard_normal((n, 1))
        mu, _, cache = den.forward(np.zeros((n, 1)), u, sigma)
        optim.zero_grad()
        den.backward(cache, 2.0 * (mu - a0) / n, np.zeros_like(mu))
        optim.step()
    return den


def lower_bound_oracle(n_samples: int = 100_000, seed: int = 0, mean: float = 0.3, std: float = 0.1,
                       alpha: float = 0.01, sigma_hats=None, steps: int = 3000):
    """Monte-Carlo test of ``E_{p_hat_k}[Q] <= E_{p_0}[Q]`` with ``Q(a) = -a^2``.

    The clean policy is ``N(mean, std^2)``, noise levels follow the default
    five-level training ladder, and ``p* ~ exp(Q / alpha)``. Returns rows per
    ``(sigma_hat, k)`` together with assumption diagnostics fitted by moments.
    """
    sched = act.NoiseSchedule()
    ladder = act.noise_levels(sched, sched.k_train)
    sigma_hats = [sched.sigma_min, 2 * sched.sigma_min, 4 * sched.sigma_min] if sigma_hats is None else sigma_hats
    den = train_gaussian_denoiser(mean, std, ladder[1:3], steps=steps, seed=seed)
    rng = np.random.default_rng(seed + 1)
    zeros = np.zeros((n_samples, 1))
    target_var = alpha / 2.0

    a0 = mean + std * rng.standard_normal((n_samples, 1))
    p0 = a0 + ladder[0] * rng.standard_normal((n_samples, 1))
    q0 = -(p0[:, 0] ** 2)
    kl_p0 = _gauss_kl(p0.mean(), p0.var(), target_var)
    rows, fit = [], {}
    denoised = {}
    for k in (0, 1):
        a = mean + std * rng.standard_normal((n_samples, 1))
        u = a + ladder[k + 1] * rng.standard_normal((n_samples, 1))
        denoised[k] = den(zeros, u, np.full(n_samples, ladder[k + 1]))[0][:, 0]
    for s_hat in sigma_hats:
        for k in (0, 1):
            y = denoised[k] + s_hat * rng.standard_normal(n_samples)
            q = -(y ** 2)
            se = math.sqrt(q.var() / n_samples + q0.var() / n_samples)
            kl_hat = _gauss_kl(y.mean(), y.var(), target_var)
            fit[(s_hat, k)] = (y.var(), kl_hat)
            rows.append(LowerBoundRow(s_hat, k, float(q.mean()), float(q0.mean()), se,
                                      kl_hat >= kl_p0, bool(q.mean() <= q0.mean() + 3 * se)))
    diag = {
        "p0_var": float(p0.var()),
        "kl_p0": kl_p0,
        "fit": fit,
        "assumption_iii": {s: fit[(s, 0)][1] >= kl_p0 for s in sigma_hats},
        "entropy_increasing_hat": {s: fit[(s, 1)][0] > fit[(s, 0)][0] for s in sigma_hats},
        "denoiser_error": _denoiser_error(den, mean, std, ladder[1:3]),
    }
    return rows, diag


def _denoiser_error(den, mean, std, levels) -> float:
    worst = 0.0
    for s in levels:
        spread = 3.0 * math.hypot(std, s)
        u = np.linspace(mean - spread, mean + spread, 61)[:, None]
        exact = mean + std ** 2 / (std ** 2 + s ** 2) * (u[:, 0] - mean)
        got = den(np.zeros((len(u), 1)), u, np.full(len(u), s))[0][:, 0]
        worst = max(worst, float(np.abs(got - exact).max()))
    return worst


def lower_bound_verdict(rows) -> tuple[bool, str]:
    """Pass when the bound holds wherever its KL premise holds and at ``sigma_hat = 4 sigma_min``."""
    largest = max(r.sigma_hat for r in rows)
    applicable = [r for r in rows if r.kl_premise]
    ok = all(r.holds for r in applicable) and all(r.holds for r in rows if r.sigma_hat == largest)
    parts = [f"s_hat={r.sigma_hat:.2f} k={r.k}: E_hat={r.e_hat:.5f} E_p0={r.e_p0:.5f} "
             f"se={r.se:.1e} premise={'y' if r.kl_premise else 'n'} bound={'holds' if r.holds else 'fails'}"
             for r in rows]
    return ok, "; ".join(parts)


def check_lower_bound(impl):
    rows, _ = lower_bound_oracle()
    return lower_bound_verdict(rows)


# --- engine, environments, harness ------------------------------------------------


def _tiny_config(**kw):
    from .config import RunConfig

    base = dict(hidden_units=8, batch_size=16, initial_random_trajectories=2, workers=2, n_atoms=11,
                v_min=-60.0, v_max=0.0, eval_episodes=2, total_steps=0, embed_dim=4)
    base.update(kw)
    cfg = RunConfig(**base)
    cfg.validate()
    return cfg


def check_her_consistency(impl):
    from .engine import Transition, her_relabel
    from .envs import sparse_reward_fn

    rng = np.random.default_rng(11)
    ep = []
    s = rng.uniform(-1, 1, 4)
    goal = rng.uniform(-1, 1, 2)
    for _ in range(20):
        s2 = s + 0.05 * rng.standard_normal(4)
        ep.append(Transition(s, np.tanh(rng.standard_normal(2)), -1.0, s2, False, goal))
        s = s2
    out = her_relabel(ep, 4, sparse_reward_fn, rng, achieved_fn=lambda x: x[:2])
    bad = sum(tr.reward != sparse_reward_fn(tr.next_state[:2], tr.goal) for tr in out[1::5])
    return bad == 0 and len(out) == 100, f"{len(out)} transitions, {bad} inconsistent rewards"


def check_polyak(impl):
    from .engine import polyak_update

    rng = np.random.default_rng(12)
    online = MlpNetwork(3, [2], 8, 1, rng)
    target = online.clone()
    hist = target.params()[0].value.copy()
    for _ in range(5):
        for p in online.params():
            p.value += rng.standard_normal(p.value.shape)
        polyak_update(target, online, 0.995)
        hist = 0.995 * hist + 0.005 * online.params()[0].value
    err = float(np.abs(target.params()[0].value - hist).max())
    copy_net = MlpNetwork(3, [2], 8, 1, np.random.default_rng(1))
    polyak_update(copy_net, online, 0.0)
    exact = all(np.array_equal(a.value, b.value) for a, b in zip(copy_net.params(), online.params()))
    return err < 1e-12 and exact, f"geometric average err {err:.1e}, tau=0 exact copy={exact}"


def check_zero_lr_identity(impl):
    from .engine import Trainer, train_step

    cfg = _tiny_config(lr_actor=0.0, lr_critic=0.0, lr_alpha=0.0, polyak=1.0)
    tr = Trainer(cfg, "point_mass_dense")
    tr.warmup()
    before = tr.agent.snapshot()
    for _ in range(20):
        train_step(tr.agent, tr.buffer, cfg, tr.train_rng)
    after = tr.agent.snapshot()
    same = all(np.array_equal(before[k], after[k]) for k in before if not k.endswith((".m", ".v")))
    return same, "parameters bit-identical after 20 steps" if same else "parameters changed"


def check_evaluate_purity(impl):
    from .engine import Trainer, evaluate
    from .envs import make_env

    cfg = _tiny_config()
    tr = Trainer(cfg, "point_mass_dense")
    tr.warmup()
    before = tr.agent.snapshot()
    size = len(tr.buffer)
    env = make_env("point_mass_dense", 3)
    env.reset(3)
    pos = env.pos.copy()
    m1 = evaluate(tr.agent, env, 3, np.random.default_rng(0))
    m2 = evaluate(tr.agent, env, 3, np.random.default_rng(0))
    after = tr.agent.snapshot()
    ok = (all(np.array_equal(before[k], after[k]) for k in before) and len(tr.buffer) == size
          and np.array_equal(env.pos, pos) and m1 == m2)
    return ok, "agent, buffer and env untouched; metrics reproducible" if ok else "evaluation had side effects"


def check_env_determinism(impl):
    from .envs import ENV_NAMES, make_env

    ok = True
    for name in ENV_NAMES:
        trajs = []
        for _ in range(2):
            env = make_env(name, 5)
            rng = np.random.default_rng(0)
            obs = [env.reset(5)]
            for _ in range(30):
                o, r, done, _ = env.step(rng.uniform(-1, 1, env.spec.action_dim))
                obs.append(np.append(o, r))
                if done:
                    obs.append(env.reset())
            trajs.append(np.concatenate(obs))
        ok &= bool(np.array_equal(*trajs))
    return ok, "identical trajectories for equal seeds" if ok else "non-deterministic environment"


def check_predator_spawn(impl):
    from .envs import PredatorPrey

    env = PredatorPrey(seed=13)
    bad = 0
    for i in range(100):
        env.reset(i)
        s = env.state
        rel = s.predator - s.prey
        angle = abs((math.atan2(rel[1], rel[0]) - s.heading + math.pi) % (2 * math.pi) - math.pi)
        bad += angle <= env.fov_half_angle
    return bad == 0, f"{bad}/100 spawns inside the field of view"


def check_pursuit_monotone(impl):
    from .envs import PredatorPrey

    env = PredatorPrey(seed=14)
    worst = 0.0
    for i in range(20):
        env.reset(i)
        hold = env.state.prey * 2.0 - 1.0
        dist = np.linalg.norm(env.state.predator - env.state.prey)
        for _ in range(40):
            _, _, done, _ = env.step(hold)
            new = np.linalg.norm(env.state.predator - env.state.prey)
            worst = max(worst, new - dist)
            dist = new
            if done:
                break
    return worst <= 0.0, f"max distance increase {worst:.1e}"


def check_episode_bounds(impl):
    from .envs import ENV_NAMES, make_env

    rng = np.random.default_rng(15)
    ok = True
    for name in ENV_NAMES:
        env = make_env(name, 1)
        for ep in range(3):
            env.reset(ep)
            t, done = 0, False
            while not done:
                _, r, done, _ = env.step(rng.uniform(-1, 1, env.spec.action_dim))
                t += 1
                if name == "point_mass_dense":
                    ok &= -2 * math.sqrt(8) <= r <= 0
                if name == "point_mass_goal":
                    ok &= r in (-1.0, 0.0)
            ok &= t <= env.spec.max_steps
            try:
                env.step(np.zeros(env.spec.action_dim))
                ok = False
            except RuntimeError:
                pass
    return ok, "lengths within max_steps, done sticky, rewards in range" if ok else "bound violated"


def check_config_roundtrip(impl):
    from .config import format_config, parse_config_text

    ok = True
    for text in ("", "env = point_mass_goal\n", "ablation = scalar_single\ngamma = 0.95\nk = 3\n"):
        cfg = parse_config_text(text)
        ok &= parse_config_text(format_config(cfg)) == cfg
    return ok, "parse(format(c)) == c" if ok else "round trip changed the config"


def check_checkpoint_roundtrip(impl):
    import filecmp
    import os

    from .checkpoint import load_checkpoint, save_checkpoint
    from .runner import build_agent

    cfg = _tiny_config()
    agent = build_agent(cfg)
    for p in agent.networks()["critic0"].params():
        p.m += 0.5
        p.step_count = 3
    other = build_agent(replace(cfg, seed=99))
    with tempfile.TemporaryDirectory() as tmp:
        a, b = os.path.join(tmp, "a"), os.path.join(tmp, "b")
        save_checkpoint(a, agent, {"env_steps": 10})
        load_checkpoint(a, other)
        save_checkpoint(b, other, {"env_steps": 10})
        names = sorted(os.listdir(a))
        same = names == sorted(os.listdir(b)) and all(
            filecmp.cmp(os.path.join(a, n), os.path.join(b, n), shallow=False) for n in names)
    return same, f"{len(names)} files byte-identical" if same else "checkpoint files differ"


CHECKS = [
    ("nn-core/backward-vs-finite-difference/mlp", check_mlp_gradients),
    ("nn-core/backward-vs-finite-difference/critic", check_critic_gradients),
    ("nn-core/backward-vs-finite-difference/denoiser", check_denoiser_gradients),
    ("nn-core/determinism", check_forward_determinism),
    ("nn-core/adamw-decoupling", check_adamw_decoupling),
    ("categorical-critic/mass-conservation", check_mass_conservation),
    ("categorical-critic/mean-preservation", check_mean_preservation),
    ("categorical-critic/one-hot-equivalence", check_onehot_equivalence),
    ("categorical-critic/clip-semantics", check_clip_semantics),
    ("categorical-critic/convexity", check_projection_linearity),
    ("categorical-critic/loss-gradient", check_critic_loss_gradient),
    ("diffusion-actor/schedule", check_schedule),
    ("diffusion-actor/fent-equivalence", check_fent_equivalence),
    ("diffusion-actor/actions-bounded", check_actions_bounded),
    ("diffusion-actor/policy-loss-fixed-point", check_policy_loss_fixed_point),
    ("diffusion-actor/policy-loss-gradient", check_policy_update_gradient),
    ("diffusion-actor/one-step-lower-bound", check_lower_bound),
    ("rl-engine/her-reward-consistency", check_her_consistency),
    ("rl-engine/target-lag", check_polyak),
    ("rl-engine/zero-lr-identity", check_zero_lr_identity),
    ("rl-engine/evaluate-purity", check_evaluate_purity),
    ("environments/determinism", check_env_determinism),
    ("environments/predator-spawn-outside-fov", check_predator_spawn),
    ("environments/pursuit-monotone", check_pursuit_monotone),
    ("environments/episode-bounds", check_episode_bounds),
    ("cli-harness/config-round-trip", check_config_roundtrip),
    ("cli-harness/checkpoint-round-trip", check_checkpoint_roundtrip),
]


def run_check(only=None, impl: SimpleNamespace | None = None) -> list[CheckResult]:
    """Run every check (or those whose id contains one of ``only``) with timing."""
    impl = impl or default_impl()
    results = []
    for check_id, fn in CHECKS:
        if only and not any(o in check_id for o in only):
            continue
        t0 = time.perf_counter()
        try:
            passed, detail = fn(impl)
        except Exception as exc:  # a crashing check is a failing check
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(check_id, bool(passed), time.perf_counter() - t0, detail))
    return results


def format_report(results: list[CheckResult]) -> str:
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.check_id}  ({r.seconds:.2f}s)  {r.detail}" for r in results]
    failed = sum(not r.passed for r in results)
    total = sum(r.seconds for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} checks passed in {total:.1f}s")
    return "\n".join(lines)
