"""Categorical return distributions and the clipped double distributional critic.

The pure functions at the top operate on single distributions or on batches
(leading axis) interchangeably. The critic classes below wrap the networks
and expose the two things the training loop needs: a TD update from a batch
and the action-gradient of the expected Q-value.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .nn import AdamW, MlpNetwork, as_float


@dataclass(frozen=True)
class Support:
    v_min: float
    v_max: float
    n_atoms: int

    def __post_init__(self):
        if not self.v_min < self.v_max:
            raise ConfigError(f"support needs v_min < v_max, got [{self.v_min}, {self.v_max}]")
        if self.n_atoms < 2:
            raise ConfigError(f"support needs at least 2 atoms, got {self.n_atoms}")

    @property
    def delta(self) -> float:
        return (self.v_max - self.v_min) / (self.n_atoms - 1)

    @property
    def atoms(self) -> np.ndarray:
        return self.v_min + np.arange(self.n_atoms) * self.delta


def make_support(v_min: float, v_max: float, n_atoms: int) -> Support:
    return Support(float(v_min), float(v_max), int(n_atoms))


def two_hot(support: Support, z) -> np.ndarray:
    """Split each value of ``z`` between its two neighbouring atoms.

    Values outside the support land entirely on the nearest end atom.
    """
    z = np.asarray(z, dtype=np.float64)
    out = np.zeros(z.shape + (support.n_atoms,))
    lo, w_hi = _bracket(support, z)
    np.put_along_axis(out, lo[..., None], (1.0 - w_hi)[..., None], axis=-1)
    hi_vals = np.take_along_axis(out, (lo + 1)[..., None], axis=-1) + w_hi[..., None]
    np.put_along_axis(out, (lo + 1)[..., None], hi_vals, axis=-1)
    return out


def _bracket(support: Support, z: np.ndarray):
    pos = (np.clip(z, support.v_min, support.v_max) - support.v_min) / support.delta
    lo = np.clip(np.floor(pos).astype(np.int64), 0, support.n_atoms - 2)
    # rounding in pos can overshoot the last atom by an ulp
    return lo, np.clip(pos - lo, 0.0, 1.0)


def project_dist(z_p, p, support: Support) -> np.ndarray:
    """Distributional projection: two-hot every shifted atom, weight by ``p``, sum.

    ``z_p`` and ``p`` share shape ``(..., n)``; the result has shape
    ``(..., support.n_atoms)``.
    """
    z_p = np.asarray(z_p, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if z_p.shape != p.shape:
        raise ValueError(f"shifted atoms {z_p.shape} and probabilities {p.shape} differ in shape")
    lo, w_hi = _bracket(support, z_p)
    lead = p.shape[:-1]
    m = support.n_atoms
    rows = lo.reshape(-1, p.shape[-1]).shape[0]
    base = (np.arange(rows) * m)[:, None]
    flat = (lo.reshape(rows, -1) + base).reshape(-1)
    mass = p.reshape(-1)
    w = w_hi.reshape(-1)
    out = np.bincount(flat, mass * (1.0 - w), minlength=rows * m)
    out += np.bincount(flat + 1, mass * w, minlength=rows * m)
    return out.reshape(lead + (support.n_atoms,))


def project_twohot(z_p, p, support: Support) -> np.ndarray:
    """Two-hot encode the mean of the shifted distribution (sum and two-hot swapped)."""
    mean = (np.asarray(z_p, dtype=np.float64) * np.asarray(p, dtype=np.float64)).sum(axis=-1)
    return two_hot(support, mean)


def expected_value(dist, support: Support):
    return np.asarray(dist, dtype=np.float64) @ support.atoms


def clip_select(d1, d2, support: Support) -> np.ndarray:
    """Pick, per row, the whole distribution with the lower mean (ties go to ``d1``)."""
    d1 = np.asarray(d1, dtype=np.float64)
    d2 = np.asarray(d2, dtype=np.float64)
    first = expected_value(d1, support) <= expected_value(d2, support)
    return np.where(np.asarray(first)[..., None], d1, d2)


def critic_target(r, gamma: float, done, next_clip, support: Support) -> np.ndarray:
    """Bootstrapped label ``project_dist(r + gamma*(1-done)*z, next_clip)``."""
    r = np.asarray(r, dtype=np.float64)
    live = 1.0 - np.asarray(done, dtype=np.float64)
    z_p = r[..., None] + (gamma * live)[..., None] * support.atoms
    return project_dist(z_p, next_clip, support)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def critic_loss_and_grad(logits1, logits2, label):
    """Joint cross-entropy of both critics against one label.

    Batched inputs give the summed loss; callers divide by batch size.
    """
    label = np.asarray(label, dtype=np.float64)
    lp1, lp2 = log_softmax(as_float(logits1)), log_softmax(as_float(logits2))
    loss = -(label * (lp1 + lp2)).sum()
    return loss, np.exp(lp1) - label, np.exp(lp2) - label


# --- critic networks -------------------------------------------------------


class _CriticBase:
    """Shared wiring for one or two online critics with polyak-averaged targets."""

    def __init__(self, obs_dim: int, act_dim: int, out_dim: int, n_critics: int,
                 hidden_units: int, hidden_layers: int, rng: np.random.Generator,
                 lr: float, weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.online = [
            MlpNetwork(obs_dim + act_dim, [out_dim], hidden_units, hidden_layers, rng, f"critic{i}")
            for i in range(n_critics)
        ]
        self.target = [net.clone(f"target_critic{i}") for i, net in enumerate(self.online)]
        params = [p for net in self.online for p in net.params()]
        self.optim = AdamW(params, lr, betas[0], betas[1], eps, weight_decay, owners=list(self.online))

    def networks(self) -> dict[str, MlpNetwork]:
        out = {}
        for i, (net, tgt) in enumerate(zip(self.online, self.target)):
            out[f"critic{i}"] = net
            out[f"target_critic{i}"] = tgt
        return out

    def _values(self, outputs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _value_grad(self, outputs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def q_and_action_grad(self, obs: np.ndarray, actions: np.ndarray):
        """Expected Q under the online critics and its gradient w.r.t. the action.

        With two critics the lower one is used per sample.
        """
        x = np.concatenate([obs, actions], axis=1)
        passes = [net.forward(x) for net in self.online]
        values = np.stack([self._values(outs[0]) for outs, _ in passes])
        pick = np.argmin(values, axis=0) if len(passes) > 1 else np.zeros(len(x), dtype=int)
        grad = np.zeros((len(x), self.act_dim))
        for i, (net, (outs, cache)) in enumerate(zip(self.online, passes)):
            rows = pick == i
            if not rows.any():
                continue
            g_out = self._value_grad(outs[0]) * rows[:, None]
            dx = net.backward(cache, [g_out], accumulate=False)
            grad += dx[:, self.obs_dim:]
        q = values[pick, np.arange(len(x))]
        return q, grad

    def q_value(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        x = np.concatenate([obs, actions], axis=1)
        values = np.stack([self._values(net.forward(x)[0][0]) for net in self.online])
        return values.min(axis=0)


class DistributionalCritic(_CriticBase):
    """Categorical critics; with two of them the bootstrap uses the clipped distribution."""

    def __init__(self, obs_dim: int, act_dim: int, support: Support, n_critics: int = 2, **kw):
        self.support = support
        self.atoms = support.atoms
        super().__init__(obs_dim, act_dim, support.n_atoms, n_critics, **kw)

    def _values(self, logits):
        return softmax(logits) @ self.atoms

    def _value_grad(self, logits):
        p = softmax(logits)
        q = p @ self.atoms
        return p * (self.atoms - q[:, None])

    def target_label(self, next_obs, next_actions, rewards, dones, gamma: float) -> np.ndarray:
        x = np.concatenate([next_obs, next_actions], axis=1)
        dists = [softmax(net.forward(x)[0][0]) for net in self.target]
        clipped = dists[0] if len(dists) == 1 else clip_select(dists[0], dists[1], self.support)
        return critic_target(rewards, gamma, dones, clipped, self.support)

    def update(self, obs, actions, label) -> tuple[float, float]:
        """One optimizer step toward ``label``; returns (mean loss, mean online Q)."""
        x = np.concatenate([obs, actions], axis=1)
        n = len(x)
        self.optim.zero_grad()
        passes = [net.forward(x) for net in self.online]
        if len(passes) == 2:
            loss, g1, g2 = critic_loss_and_grad(passes[0][0][0], passes[1][0][0], label)
            grads = [g1, g2]
        else:
            logits = passes[0][0][0]
            loss = -float((label * log_softmax(logits)).sum())
            grads = [softmax(logits) - label]
        for net, (_, cache), g in zip(self.online, passes, grads):
            net.backward(cache, [g / n])
        mean_q = float(np.mean([self._values(outs[0]).mean() for outs, _ in passes]))
        self.optim.step()
        return loss / n, mean_q


class ScalarCritic(_CriticBase):
    """Point-estimate critics trained by squared TD error (ablation baseline)."""

    def __init__(self, obs_dim: int, act_dim: int, n_critics: int = 2, **kw):
        super().__init__(obs_dim, act_dim, 1, n_critics, **kw)

    def _values(self, outputs):
        return outputs[:, 0]

    def _value_grad(self, outputs):
        return np.ones_like(outputs)

    def target_label(self, next_obs, next_actions, rewards, dones, gamma: float) -> np.ndarray:
        x = np.concatenate([next_obs, next_actions], axis=1)
        values = np.stack([net.forward(x)[0][0][:, 0] for net in self.target]).min(axis=0)
        return np.asarray(rewards) + gamma * (1.0 - np.asarray(dones, dtype=np.float64)) * values

    def update(self, obs, actions, label) -> tuple[float, float]:
        x = np.concatenate([obs, actions], axis=1)
        n = len(x)
        self.optim.zero_grad()
        loss = 0.0
        qs = []
        for net in self.online:
            outs, cache = net.forward(x)
            err = outs[0][:, 0] - label
            loss += float((err ** 2).sum())
            qs.append(outs[0][:, 0].mean())
            net.backward(cache, [2.0 * err[:, None] / n])
        self.optim.step()
        return loss / n, float(np.mean(qs))
