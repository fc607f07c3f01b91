"""Diffusion actor with EDM preconditioning, plus a tanh-Gaussian actor for ablations.

Actions live in pre-tanh space ``u`` throughout the denoising chain and are
squashed once at the end. Noise levels are per-sample arrays so a single
network pass can mix several levels in one batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ModelError, TrainingError
from .nn import AdamW, MlpNetwork, Parameter, positional_embedding

ACTION_EPS = 1e-6
LOG_SIGMA_MIN = math.log(1e-3)
LOG_SIGMA_MAX = math.log(2.0)
LOG_2PI = math.log(2.0 * math.pi)
LOG_2 = math.log(2.0)


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.05
    sigma_max: float = 2.0
    rho: float = 7.0
    k: int = 2
    k_train: int = 5

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ConfigError(f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}")
        if self.rho <= 0:
            raise ConfigError(f"rho must be positive, got {self.rho}")
        if self.k < 1 or self.k_train < 1:
            raise ConfigError(f"step counts must be >= 1, got k={self.k}, k_train={self.k_train}")


def sigma_at(schedule: NoiseSchedule, eta):
    """Karras interpolation between ``sigma_min`` (eta=0) and ``sigma_max`` (eta=1)."""
    inv = 1.0 / schedule.rho
    lo = schedule.sigma_min ** inv
    hi = schedule.sigma_max ** inv
    eta = np.asarray(eta, dtype=np.float64)
    sigma = np.clip((lo + eta * (hi - lo)) ** schedule.rho, schedule.sigma_min, schedule.sigma_max)
    # pin the endpoints; the root/power round trip is not exact in floating point
    sigma = np.where(eta == 0.0, schedule.sigma_min, np.where(eta == 1.0, schedule.sigma_max, sigma))
    return sigma[()] if sigma.ndim == 0 else sigma


def noise_levels(schedule: NoiseSchedule, n: int) -> np.ndarray:
    """``sigma((i-1)/(n-1))`` for i=1..n, ascending; a one-level ladder is ``[sigma_min]``."""
    if n == 1:
        return np.array([schedule.sigma_min])
    return sigma_at(schedule, np.arange(n) / (n - 1))


def sampling_levels(schedule: NoiseSchedule, k: int) -> np.ndarray:
    """Noise levels visited by a ``k``-step sampler, ascending, ending at ``sigma_max``."""
    if k == 1:
        return np.array([schedule.sigma_max])
    return noise_levels(schedule, k)


def edm_coeffs(sigma, sigma_data: float = 1.0):
    """Return ``(c_skip, c_out, c_in, c_noise)`` for noise level ``sigma``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    total = sigma ** 2 + sigma_data ** 2
    c_skip = sigma_data ** 2 / total
    c_out = sigma * sigma_data / np.sqrt(total)
    c_in = 1.0 / np.sqrt(total)
    c_noise = np.log(sigma)
    return c_skip, c_out, c_in, c_noise


def noise_embedding(sigma, dim: int) -> np.ndarray:
    return positional_embedding(1e3 * np.log(sigma) / 4.0, dim)


def softplus(x):
    return np.logaddexp(0.0, x)


def tanh_log_prob(u, mu, sigma):
    """Log-likelihood of ``tanh(u)`` when ``u ~ N(mu, sigma^2)``, summed over the last axis.

    The Jacobian term is written with softplus so it stays finite for large |u|.
    """
    u = np.asarray(u)
    z = (u - mu) / sigma
    gauss = -0.5 * z * z - np.log(sigma) - 0.5 * LOG_2PI
    squash = LOG_2 - u - softplus(-2.0 * u)
    return (gauss - 2.0 * squash).sum(axis=-1)


def squash(u) -> np.ndarray:
    return np.clip(np.tanh(u), -1.0 + ACTION_EPS, 1.0 - ACTION_EPS)


def unsquash(a) -> np.ndarray:
    return np.arctanh(np.clip(a, -1.0 + ACTION_EPS, 1.0 - ACTION_EPS))


class Temperature:
    """Entropy coefficient ``alpha = exp(log_alpha)`` with its own optimizer."""

    def __init__(self, action_dim: int, alpha_init: float = 0.2, lambda_ent: float = 0.0,
                 lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.action_dim = action_dim
        self.lambda_ent = lambda_ent
        self.log_alpha = Parameter("log_alpha", np.array([math.log(alpha_init)]))
        self.optim = AdamW([self.log_alpha], lr, betas[0], betas[1], eps, weight_decay=0.0)

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.value[0]))

    def update(self, log_likelihood: np.ndarray) -> float:
        """Step on ``-alpha * (f - lambda_ent*|A|)`` with ``f`` treated as data."""
        target = float(np.mean(log_likelihood)) - self.lambda_ent * self.action_dim
        alpha = self.alpha
        self.log_alpha.grad[0] += -alpha * target
        self.optim.step()
        return -alpha * target


class Denoiser:
    """State-conditioned EDM denoiser with a second head for a per-dimension std."""

    def __init__(self, obs_dim: int, action_dim: int, hidden_units: int = 256,
                 hidden_layers: int = 2, sigma_data: float = 1.0, embed_dim: int = 32,
                 rng: np.random.Generator | None = None, name: str = "denoiser"):
        self.obs_dim, self.action_dim = obs_dim, action_dim
        self.sigma_data = sigma_data
        self.embed_dim = embed_dim
        self.net = MlpNetwork(obs_dim + action_dim + embed_dim, [action_dim, action_dim],
                              hidden_units, hidden_layers, rng, name)

    def forward(self, obs, u, sigma):
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (len(u),))
        c_skip, c_out, c_in, _ = edm_coeffs(sigma, self.sigma_data)
        x = np.concatenate([obs, c_in[:, None] * u, noise_embedding(sigma, self.embed_dim)], axis=1)
        (f_out, raw), cache = self.net.forward(x)
        inside = (raw > LOG_SIGMA_MIN) & (raw < LOG_SIGMA_MAX)
        sig = np.exp(np.clip(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX))
        mu = c_skip[:, None] * u + c_out[:, None] * f_out
        return mu, sig, (cache, c_out, sig, inside)

    def backward(self, cache, d_mu, d_sig) -> None:
        net_cache, c_out, sig, inside = cache
        self.net.backward(net_cache, [c_out[:, None] * d_mu, d_sig * sig * inside])

    def __call__(self, obs, u, sigma):
        mu, sig, _ = self.forward(obs, u, sigma)
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sig))):
            raise ModelError("denoiser produced non-finite outputs")
        return mu, sig


def denoise(denoiser: Denoiser, state, u, sigma):
    return denoiser(state, u, sigma)


def sample_action(denoiser, state, schedule: NoiseSchedule, rng: np.random.Generator,
                  use_final_mean: bool = False, k: int | None = None,
                  learned_step_noise: bool = False):
    """Run the Euler-Maruyama denoising chain from ``N(0, sigma_max^2)``.

    ``denoiser(state, u, sigma) -> (D, sigma_phi)``. Returns the squashed
    action and the list of pre-tanh iterates ``[u_K, ..., u_0]``.
    """
    k = schedule.k if k is None else k
    levels = sampling_levels(schedule, k)
    state = np.atleast_2d(state)
    n = len(state)
    d = denoiser.action_dim
    u = rng.standard_normal((n, d)) * schedule.sigma_max
    chain = [u]
    for step in range(k, 0, -1):
        s_k = levels[step - 1]
        s_prev = levels[step - 2] if step > 1 else 0.0
        drop = s_k ** 2 - s_prev ** 2
        target, sig_phi = denoiser(state, u, np.full(n, s_k))
        mean = u + drop / s_k ** 2 * (target - u)
        if step == 1 and use_final_mean:
            u = mean
        else:
            std = sig_phi if learned_step_noise else math.sqrt(drop)
            u = mean + std * rng.standard_normal((n, d))
        chain.append(u)
    return squash(u), chain


# --- policy losses ---------------------------------------------------------


def d2ac_loss(x, mu, sig, eps2, x_target, alpha: float, weights=None):
    """Per-batch D2AC actor loss and its gradient w.r.t. ``(mu, sig)``.

    ``x = mu + eps2*sig`` is the reparameterized sample; ``x_target`` is
    constant. Returns ``(mean_loss, log_likelihood_per_sample, d_mu, d_sig)``
    with gradients of the batch mean.
    """
    n = len(x)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    diff = x - x_target
    f = tanh_log_prob(x, mu, sig)
    loss = (w * (diff * diff).sum(axis=1) + alpha * f).mean()
    t = np.tanh(x)
    d_x = 2.0 * w[:, None] * diff
    d_mu = (d_x + alpha * 2.0 * t) / n
    d_sig = (d_x * eps2 + alpha * (-1.0 / sig + 2.0 * t * eps2)) / n
    return loss, f, d_mu, d_sig


def policy_update(denoiser: Denoiser, temperature: Temperature, state, action, sigma,
                  q_grad, rng: np.random.Generator, optim: AdamW, weights=None):
    """One value-gradient step on the denoiser and one temperature step.

    ``q_grad(state, action) -> (q, dq/da)``. ``sigma`` is a per-sample array
    of noise levels. Returns ``(actor_loss, alpha_loss, diagnostics)``.
    """
    action = np.asarray(action, dtype=np.float64)
    n, d = action.shape
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,))
    eps = rng.standard_normal((n, d))
    eps2 = rng.standard_normal((n, d))
    u_tilde = unsquash(action) + eps * sigma[:, None]
    mu, sig, cache = denoiser.forward(state, u_tilde, sigma)
    x = mu + eps2 * sig
    q, dq_da = q_grad(state, np.tanh(x))
    grad_x = dq_da * (1.0 - np.tanh(x) ** 2)
    if not np.all(np.isfinite(grad_x)):
        raise TrainingError("non-finite critic action-gradient in policy update")
    x_target = x + grad_x
    alpha = temperature.alpha
    loss, f, d_mu, d_sig = d2ac_loss(x, mu, sig, eps2, x_target, alpha, weights)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite actor loss {loss}")
    optim.zero_grad()
    denoiser.backward(cache, d_mu, d_sig)
    optim.step()
    alpha_loss = temperature.update(f)
    diag = {
        "q": float(np.mean(q)),
        "log_likelihood": float(np.mean(f)),
        "q_grad_norm": float(np.mean(np.linalg.norm(grad_x, axis=1))),
    }
    return loss, alpha_loss, diag


def pg_weight(schedule: NoiseSchedule, k: int, n_levels: int | None = None, levels=None) -> float:
    """Variational weight ``(1/s_{k-1}^2 - 1/s_k^2) * n/2`` on an ``n``-level ladder.

    The ladder is indexed from 0 (``sigma_min``) to ``n-1`` (``sigma_max``),
    so valid pair indices are ``1..n-1``.
    """
    if levels is None:
        n_levels = schedule.k_train if n_levels is None else n_levels
        levels = noise_levels(schedule, n_levels)
    levels = np.asarray(levels, dtype=np.float64)
    n = len(levels)
    if not 1 <= k <= n - 1:
        raise ConfigError(f"pair index {k} outside 1..{n - 1}")
    return float((1.0 / levels[k - 1] ** 2 - 1.0 / levels[k] ** 2) * n / 2.0)


def pg_loss(denoiser: Denoiser, state, u_clean, noisy, sigma, lam, w):
    """Weighted denoising regression; returns ``(mean loss, cache, d_mu)``."""
    mu, _, cache = denoiser.forward(state, noisy, sigma)
    diff = u_clean - mu
    scale = lam * w
    loss = float((scale * (diff * diff).sum(axis=1)).mean())
    d_mu = -2.0 * scale[:, None] * diff / len(diff)
    return loss, cache, d_mu


def pg_policy_update(denoiser: Denoiser, state, action, weights, schedule: NoiseSchedule,
                     rng: np.random.Generator, optim: AdamW) -> float:
    """Return-weighted denoising step (policy-gradient comparator).

    ``weights`` are non-negative per-sample weights, typically
    ``exp((Q - max Q) / temperature)``.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(weights)):
        raise TrainingError("non-finite return weights")
    levels = noise_levels(schedule, schedule.k_train)
    if len(levels) < 2:
        raise ConfigError("policy-gradient actor needs k_train >= 2")
    n = len(action)
    k = rng.integers(1, len(levels), size=n)
    lam = np.array([pg_weight(schedule, int(i), levels=levels) for i in range(1, len(levels))])[k - 1]
    sigma = levels[k]
    u = unsquash(action)
    noisy = u + sigma[:, None] * rng.standard_normal(u.shape)
    loss, cache, d_mu = pg_loss(denoiser, state, u, noisy, sigma, lam, weights)
    optim.zero_grad()
    denoiser.backward(cache, d_mu, np.zeros_like(d_mu))
    optim.step()
    return loss


def return_weights(q: np.ndarray, temperature: float) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return np.exp((q - q.max()) / temperature)


# --- actors used by the agent ----------------------------------------------


class DiffusionActor:
    def __init__(self, obs_dim: int, action_dim: int, schedule: NoiseSchedule, *,
                 hidden_units: int = 256, hidden_layers: int = 2, sigma_data: float = 1.0,
                 embed_dim: int = 32, lr: float = 1e-3, weight_decay: float = 1e-4,
                 alpha_init: float = 0.2, alpha_lr: float = 1e-4, lambda_ent: float = 0.0,
                 betas=(0.9, 0.999), adam_eps: float = 1e-8, loss: str = "d2ac",
                 discount_weighting: bool = False, gamma: float = 0.99,
                 learned_step_noise: bool = False, pg_temperature: float = 1.0,
                 rng: np.random.Generator | None = None):
        if loss not in ("d2ac", "pg"):
            raise ConfigError(f"unknown actor loss {loss!r}")
        self.obs_dim, self.action_dim = obs_dim, action_dim
        self.schedule = schedule
        self.loss = loss
        self.discount_weighting = discount_weighting
        self.gamma = gamma
        self.learned_step_noise = learned_step_noise
        self.pg_temperature = pg_temperature
        self.denoiser = Denoiser(obs_dim, action_dim, hidden_units, hidden_layers, sigma_data,
                                 embed_dim, rng)
        self.temperature = Temperature(action_dim, alpha_init, lambda_ent, alpha_lr, betas, adam_eps)
        self.optim = AdamW(self.denoiser.net.params(), lr, betas[0], betas[1], adam_eps,
                           weight_decay, owners=[self.denoiser.net])

    def networks(self) -> dict[str, MlpNetwork]:
        return {"denoiser": self.denoiser.net}

    def extra_params(self) -> list[Parameter]:
        return [self.temperature.log_alpha]

    def act(self, obs, rng, deterministic: bool = False, k: int | None = None) -> np.ndarray:
        a, _ = sample_action(self.denoiser, obs, self.schedule, rng, use_final_mean=deterministic,
                             k=k, learned_step_noise=self.learned_step_noise)
        return a

    def train_levels(self, rng, n: int, k: int):
        """Per-sample step index in 1..k and the matching training noise level."""
        idx = rng.integers(1, k + 1, size=n)
        return idx, noise_levels(self.schedule, k)[idx - 1]

    def update(self, obs, actions, sigmas, steps, horizons, critic, rng):
        if self.loss == "pg":
            q = critic.q_value(obs, actions)
            loss = pg_policy_update(self.denoiser, obs, actions, return_weights(q, self.pg_temperature),
                                    self.schedule, rng, self.optim)
            return {"actor_loss": loss, "alpha_loss": 0.0, "q": float(np.mean(q))}
        weights = None
        if self.discount_weighting:
            weights = self.gamma ** (2.0 * steps) / self.gamma ** horizons
        loss, alpha_loss, diag = policy_update(self.denoiser, self.temperature, obs, actions, sigmas,
                                               critic.q_and_action_grad, rng, self.optim, weights)
        return {"actor_loss": loss, "alpha_loss": alpha_loss, **diag}


class GaussianActor:
    """Tanh-squashed Gaussian policy trained with the usual reparameterized objective."""

    def __init__(self, obs_dim: int, action_dim: int, *, hidden_units: int = 256,
                 hidden_layers: int = 2, lr: float = 1e-3, weight_decay: float = 1e-4,
                 alpha_init: float = 0.2, alpha_lr: float = 1e-4, lambda_ent: float = 0.0,
                 betas=(0.9, 0.999), adam_eps: float = 1e-8,
                 rng: np.random.Generator | None = None, **_ignored):
        self.obs_dim, self.action_dim = obs_dim, action_dim
        self.net = MlpNetwork(obs_dim, [action_dim, action_dim], hidden_units, hidden_layers, rng,
                              "gaussian_actor")
        self.temperature = Temperature(action_dim, alpha_init, lambda_ent, alpha_lr, betas, adam_eps)
        self.optim = AdamW(self.net.params(), lr, betas[0], betas[1], adam_eps, weight_decay,
                           owners=[self.net])

    def networks(self) -> dict[str, MlpNetwork]:
        return {"gaussian_actor": self.net}

    def extra_params(self) -> list[Parameter]:
        return [self.temperature.log_alpha]

    def _heads(self, obs):
        (mu, raw), cache = self.net.forward(obs)
        inside = (raw > LOG_SIGMA_MIN) & (raw < LOG_SIGMA_MAX)
        sig = np.exp(np.clip(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX))
        return mu, sig, (cache, sig, inside)

    def act(self, obs, rng, deterministic: bool = False, k: int | None = None) -> np.ndarray:
        mu, sig, _ = self._heads(np.atleast_2d(obs))
        if deterministic:
            return squash(mu)
        return squash(mu + sig * rng.standard_normal(mu.shape))

    def train_levels(self, rng, n: int, k: int):
        return np.ones(n, dtype=int), np.zeros(n)

    def update(self, obs, actions, sigmas, steps, horizons, critic, rng):
        mu, sig, (cache, sig_c, inside) = self._heads(obs)
        n = len(mu)
        eps = rng.standard_normal(mu.shape)
        u = mu + eps * sig
        q, dq_da = critic.q_and_action_grad(obs, np.tanh(u))
        g = dq_da * (1.0 - np.tanh(u) ** 2)
        alpha = self.temperature.alpha
        f = tanh_log_prob(u, mu, sig)
        loss = float((alpha * f - q).mean())
        t = np.tanh(u)
        d_mu = (alpha * 2.0 * t - g) / n
        d_sig = (alpha * (-1.0 / sig + 2.0 * t * eps) - g * eps) / n
        self.optim.zero_grad()
        self.net.backward(cache, [d_mu, d_sig * sig_c * inside])
        self.optim.step()
        alpha_loss = self.temperature.update(f)
        return {"actor_loss": loss, "alpha_loss": alpha_loss, "q": float(np.mean(q)),
                "log_likelihood": float(np.mean(f))}
