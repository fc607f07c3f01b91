"""Off-policy training machinery: replay, hindsight relabeling, updates, evaluation."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from .actor import DiffusionActor, GaussianActor, NoiseSchedule
from .critic import DistributionalCritic, ScalarCritic, Support, make_support
from .envs import EnvSpec, make_env, new_visit_grid, sparse_reward_fn, visit_grid_update
from .errors import ConfigError, TrainingError, UsageError
from .nn import MlpNetwork

EVAL_STREAM = 104729
ABLATIONS = ("full", "no_cdq", "scalar_cdq", "scalar_single", "gaussian_actor", "pg_actor")


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool
    goal: np.ndarray | None = None

    def __post_init__(self):
        self.state = np.asarray(self.state, dtype=np.float64)
        self.action = np.asarray(self.action, dtype=np.float64)
        self.next_state = np.asarray(self.next_state, dtype=np.float64)
        if self.goal is not None:
            self.goal = np.asarray(self.goal, dtype=np.float64)
        if np.any(np.abs(self.action) >= 1.0):
            raise ValueError("transition action must lie strictly inside (-1, 1)")
        parts = [self.state, self.action, self.next_state, [self.reward]]
        if self.goal is not None:
            parts.append(self.goal)
        if not all(np.all(np.isfinite(p)) for p in parts):
            raise ValueError("transition has non-finite entries")


@dataclass
class Batch:
    state: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_state: np.ndarray
    done: np.ndarray
    goal: np.ndarray | None = None

    def inputs(self) -> tuple[np.ndarray, np.ndarray]:
        """Policy/critic inputs for ``s`` and ``s'`` (goal appended when present)."""
        if self.goal is None:
            return self.state, self.next_state
        return (np.concatenate([self.state, self.goal], axis=1),
                np.concatenate([self.next_state, self.goal], axis=1))


class ReplayBuffer:
    """Fixed-capacity ring of transitions with uniform sampling with replacement.

    Storage grows geometrically up to ``capacity`` so large nominal capacities
    cost nothing until filled.
    """

    _KEYS = ("state", "action", "reward", "next_state", "done", "goal")

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError(f"buffer capacity must be positive, got {capacity}")
        self.capacity = int(capacity)
        self.size = 0
        self.cursor = 0
        self._data: dict[str, np.ndarray] | None = None

    def __len__(self) -> int:
        return self.size

    def _allocate(self, tr: Transition, n: int) -> dict[str, np.ndarray]:
        data = {
            "state": np.zeros((n,) + tr.state.shape),
            "action": np.zeros((n,) + tr.action.shape),
            "reward": np.zeros(n),
            "next_state": np.zeros((n,) + tr.next_state.shape),
            "done": np.zeros(n, dtype=bool),
        }
        if tr.goal is not None:
            data["goal"] = np.zeros((n,) + tr.goal.shape)
        return data

    def append(self, tr: Transition) -> None:
        if self._data is None:
            self._data = self._allocate(tr, min(self.capacity, 1024))
        allocated = len(self._data["reward"])
        if self.cursor >= allocated:
            grown = self._allocate(tr, min(self.capacity, 2 * allocated))
            for key, arr in self._data.items():
                grown[key][:allocated] = arr
            self._data = grown
        i = self.cursor
        for key in self._data:
            self._data[key][i] = getattr(tr, key)
        self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def extend(self, transitions) -> None:
        for tr in transitions:
            self.append(tr)

    def get(self, i: int) -> Transition:
        if not 0 <= i < self.size:
            raise IndexError(i)
        d = self._data
        goal = d["goal"][i].copy() if "goal" in d else None
        return Transition(d["state"][i].copy(), d["action"][i].copy(), float(d["reward"][i]),
                          d["next_state"][i].copy(), bool(d["done"][i]), goal)

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise UsageError("cannot sample from an empty replay buffer")
        return rng.integers(0, self.size, size=n)

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        idx = self.sample_indices(n, rng)
        d = self._data
        return Batch(d["state"][idx], d["action"][idx], d["reward"][idx], d["next_state"][idx],
                     d["done"][idx], d["goal"][idx] if "goal" in d else None)


def buffer_append(buffer: ReplayBuffer, transition: Transition) -> None:
    buffer.append(transition)


def buffer_sample(buffer: ReplayBuffer, n: int, rng: np.random.Generator) -> Batch:
    return buffer.sample(n, rng)


def her_relabel(episode: list[Transition], k_future: int, reward_fn: Callable, rng: np.random.Generator,
                achieved_fn: Callable = lambda s: s, terminal_on_success: bool = True,
                success_reward: float = 0.0) -> list[Transition]:
    """"future" hindsight relabeling.

    Each transition is kept and followed by ``k_future`` copies whose goal is
    the achieved goal of ``next_state`` at a uniformly drawn step ``t' >= t``.
    Rewards are recomputed with ``reward_fn(achieved, goal)``; when
    ``terminal_on_success`` the done flag becomes "relabeled goal reached".
    """
    out: list[Transition] = []
    T = len(episode)
    for t, tr in enumerate(episode):
        out.append(tr)
        if k_future <= 0:
            continue
        for t_future in rng.integers(t, T, size=k_future):
            goal = np.array(achieved_fn(episode[t_future].next_state), dtype=np.float64)
            reward = float(reward_fn(achieved_fn(tr.next_state), goal))
            done = (reward == success_reward) if terminal_on_success else tr.done
            out.append(Transition(tr.state, tr.action, reward, tr.next_state, bool(done), goal))
    return out


def coverage_metrics(visit_counts, thresholds=(1, 10)) -> dict[int, float]:
    """Fraction of grid cells visited at least ``tau`` times, per threshold."""
    grid = np.asarray(visit_counts)
    if grid.size == 0:
        raise ValueError("visit grid is empty")
    return {int(t): float((grid >= t).sum() / grid.size) for t in thresholds}


def polyak_update(target: MlpNetwork, online: MlpNetwork, tau: float) -> None:
    """``target <- tau*target + (1-tau)*online``.

    Written as an increment so that equal networks stay bit-identical.
    """
    for t, o in zip(target.params(), online.params()):
        if t.value.shape != o.value.shape:
            raise ValueError(f"shape mismatch {t.name}: {t.value.shape} vs {o.value.shape}")
        if tau == 0.0:
            t.value[...] = o.value
        else:
            t.value += (1.0 - tau) * (o.value - t.value)
    target.bump()


# --- configuration and agent -------------------------------------------------


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 256
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    lr_alpha: float = 1e-4
    alpha_init: float = 0.2
    weight_decay: float = 1e-4
    hidden_units: int = 256
    hidden_layers: int = 2
    gamma: float = 0.99
    polyak: float = 0.995
    lambda_ent: float = 0.0
    target_update_interval: int = 1
    env_opt_ratio: int = 1
    initial_random_trajectories: int = 200
    workers: int = 4
    buffer_size: int = 1_000_000
    v_min: float = -100.0
    v_max: float = 100.0
    n_atoms: int = 201
    sigma_min: float = 0.05
    sigma_max: float = 2.0
    rho: float = 7.0
    k: int = 2
    k_train: int = 5
    sigma_data: float = 1.0
    embed_dim: int = 32
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    her: bool = False
    k_future: int = 4
    ablation: str = "full"
    actor_loss: str = "d2ac"
    learned_step_noise: bool = False
    discount_weighting: bool = False
    pg_temperature: float = 1.0

    def validate(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not 0.0 <= self.polyak <= 1.0:
            raise ConfigError(f"polyak must lie in [0, 1], got {self.polyak}")
        positive = ("batch_size", "target_update_interval", "env_opt_ratio", "workers", "buffer_size",
                    "hidden_units", "hidden_layers", "n_atoms", "k", "k_train", "alpha_init",
                    "sigma_min", "sigma_max", "rho", "sigma_data", "embed_dim", "pg_temperature")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        non_negative = ("lr_actor", "lr_critic", "lr_alpha", "weight_decay", "lambda_ent",
                        "initial_random_trajectories", "k_future", "adam_eps")
        for name in non_negative:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; choose from {', '.join(ABLATIONS)}")
        if self.actor_loss not in ("d2ac", "pg"):
            raise ConfigError(f"unknown actor_loss {self.actor_loss!r}")
        if self.workers % self.env_opt_ratio:
            raise ConfigError("workers must be a multiple of env_opt_ratio")
        self.support()
        self.schedule()

    def support(self) -> Support:
        return make_support(self.v_min, self.v_max, self.n_atoms)

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.sigma_min, self.sigma_max, self.rho, self.k, self.k_train)


def config_fields(cls=TrainConfig) -> list[str]:
    return [f.name for f in fields(cls)]


@dataclass
class StepDiagnostics:
    critic_loss: float
    mean_q: float
    actor_loss: float
    alpha_loss: float
    alpha: float
    extra: dict = field(default_factory=dict)


class Agent:
    """Actor (denoiser + temperature) and critic wired per the ablation selector."""

    def __init__(self, obs_dim: int, action_dim: int, config: TrainConfig,
                 rng: np.random.Generator | None = None):
        rng = np.random.default_rng(config.seed) if rng is None else rng
        self.config = config
        self.obs_dim, self.action_dim = obs_dim, action_dim
        self.support = config.support()
        self.schedule = config.schedule()
        self.updates = 0
        net_kw = dict(hidden_units=config.hidden_units, hidden_layers=config.hidden_layers)
        opt_kw = dict(betas=(config.adam_beta1, config.adam_beta2), eps=config.adam_eps)
        critic_kw = dict(rng=rng, lr=config.lr_critic, weight_decay=config.weight_decay, **net_kw, **opt_kw)
        ab = config.ablation
        n_critics = 1 if ab in ("no_cdq", "scalar_single") else 2
        if ab in ("scalar_cdq", "scalar_single"):
            self.critic = ScalarCritic(obs_dim, action_dim, n_critics, **critic_kw)
        else:
            self.critic = DistributionalCritic(obs_dim, action_dim, self.support, n_critics, **critic_kw)
        actor_kw = dict(lr=config.lr_actor, weight_decay=config.weight_decay, alpha_init=config.alpha_init,
                        alpha_lr=config.lr_alpha, lambda_ent=config.lambda_ent,
                        betas=(config.adam_beta1, config.adam_beta2), adam_eps=config.adam_eps,
                        rng=rng, **net_kw)
        if ab == "gaussian_actor":
            self.actor = GaussianActor(obs_dim, action_dim, **actor_kw)
        else:
            loss = "pg" if ab == "pg_actor" else config.actor_loss
            self.actor = DiffusionActor(obs_dim, action_dim, self.schedule, sigma_data=config.sigma_data,
                                        embed_dim=config.embed_dim, loss=loss,
                                        discount_weighting=config.discount_weighting, gamma=config.gamma,
                                        learned_step_noise=config.learned_step_noise,
                                        pg_temperature=config.pg_temperature, **actor_kw)

    def networks(self) -> dict[str, MlpNetwork]:
        return {**self.actor.networks(), **self.critic.networks()}

    def extra_params(self):
        return self.actor.extra_params()

    def act(self, obs, rng, deterministic: bool = False) -> np.ndarray:
        return self.actor.act(np.atleast_2d(obs), rng, deterministic)

    def snapshot(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and optimizer moment, keyed by name."""
        out = {}
        for net in self.networks().values():
            for p in net.params():
                out[p.name] = p.value.copy()
                out[p.name + ".m"] = p.m.copy()
                out[p.name + ".v"] = p.v.copy()
        for p in self.extra_params():
            out[p.name] = p.value.copy()
            out[p.name + ".m"] = p.m.copy()
            out[p.name + ".v"] = p.v.copy()
        return out


def train_step(agent: Agent, buffer: ReplayBuffer, config: TrainConfig,
               rng: np.random.Generator) -> StepDiagnostics:
    """One learner iteration: critic step, actor steps on (s, a) and (s', a'), target update."""
    if len(buffer) < config.batch_size:
        raise UsageError(f"buffer holds {len(buffer)} transitions, need {config.batch_size}")
    batch = buffer.sample(config.batch_size, rng)
    obs, next_obs = batch.inputs()
    n = len(obs)
    next_actions = agent.actor.act(next_obs, rng, deterministic=False)
    label = agent.critic.target_label(next_obs, next_actions, batch.reward, batch.done, config.gamma)
    critic_loss, mean_q = agent.critic.update(obs, batch.action, label)
    if not np.isfinite(critic_loss):
        raise TrainingError(f"non-finite critic loss {critic_loss}")
    i, sig_i = agent.actor.train_levels(rng, n, config.k_train)
    j, sig_j = agent.actor.train_levels(rng, n, config.k)
    diag = agent.actor.update(
        np.concatenate([obs, next_obs]),
        np.concatenate([batch.action, next_actions]),
        np.concatenate([sig_i, sig_j]),
        np.concatenate([i, j]),
        np.concatenate([np.full(n, config.k_train), np.full(n, config.k)]),
        agent.critic, rng)
    agent.updates += 1
    if agent.updates % config.target_update_interval == 0:
        for online, target in zip(agent.critic.online, agent.critic.target):
            polyak_update(target, online, config.polyak)
    extra = {k: v for k, v in diag.items() if k not in ("actor_loss", "alpha_loss")}
    return StepDiagnostics(critic_loss, mean_q, float(diag["actor_loss"]), float(diag["alpha_loss"]),
                           agent.actor.temperature.alpha, extra)


# --- interaction -------------------------------------------------------------


def policy_input(env, obs) -> np.ndarray:
    if env.spec.goal_dim:
        return np.concatenate([obs, env.goal])
    return np.asarray(obs, dtype=np.float64)


def input_dim(spec: EnvSpec) -> int:
    return spec.obs_dim + (spec.goal_dim or 0)


@dataclass
class EvalMetrics:
    mean_return: float
    success_rate: float
    survival_rate: float
    returns: list = field(default_factory=list)


def evaluate(agent: Agent, env, n_episodes: int, rng: np.random.Generator,
             visit_grid: np.ndarray | None = None) -> EvalMetrics:
    """Run ``n_episodes`` with final-mean actions on private copies of ``env``.

    Episodes run in lockstep so the actor sees one batch per step. Neither
    the agent nor ``env`` is modified. Survival means the episode ended at
    the goal and was never caught.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    envs = [copy.deepcopy(env) for _ in range(n_episodes)]
    seeds = rng.integers(0, 2**31 - 1, size=n_episodes)
    for e, s in zip(envs, seeds):
        if hasattr(e, "predator_rng"):
            e.predator_rng = np.random.default_rng([int(s), 7919])
    obs = [e.reset(int(s)) for e, s in zip(envs, seeds)]
    returns = np.zeros(n_episodes)
    success = np.zeros(n_episodes, dtype=bool)
    caught = np.zeros(n_episodes, dtype=bool)
    live = list(range(n_episodes))
    while live:
        x = np.stack([policy_input(envs[i], obs[i]) for i in live])
        actions = agent.act(x, rng, deterministic=True)
        still = []
        for row, i in enumerate(live):
            obs[i], r, done, info = envs[i].step(actions[row])
            returns[i] += r
            success[i] |= bool(info.get("success", False)) and bool(info.get("terminal", False))
            caught[i] |= bool(info.get("caught", False))
            if visit_grid is not None and "position" in info:
                visit_grid_update(visit_grid, info["position"], *arena_bounds(envs[i]))
            if not done:
                still.append(i)
        live = still
    return EvalMetrics(float(returns.mean()), float(success.mean()),
                       float((success & ~caught).mean()), returns.tolist())


def arena_bounds(env) -> tuple[float, float]:
    return (0.0, 1.0) if env.spec.name == "predator_prey" else (-1.0, 1.0)


class Trainer:
    """Round-robin collection over ``workers`` environments interleaved with learner steps.

    Every ``workers`` environment steps the learner runs
    ``workers // env_opt_ratio`` train steps. Warmup trajectories use uniform
    random actions and count toward the environment-step budget.
    """

    def __init__(self, config: TrainConfig, env_name: str, agent: Agent | None = None):
        config.validate()
        self.config = config
        self.env_name = env_name
        seq = np.random.SeedSequence(config.seed)
        s_init, s_env, s_act, s_train = seq.spawn(4)
        self.envs = [make_env(env_name, int(s.generate_state(1)[0])) for s in s_env.spawn(config.workers)]
        self.spec = self.envs[0].spec
        if agent is None:
            agent = Agent(input_dim(self.spec), self.spec.action_dim, config, np.random.default_rng(s_init))
        self.agent = agent
        self.act_rng = np.random.default_rng(s_act)
        self.train_rng = np.random.default_rng(s_train)
        self.buffer = ReplayBuffer(config.buffer_size)
        self.env_steps = 0
        self.episodes = 0
        self.visit_grid = new_visit_grid()
        self._obs = [e.reset(int(self.act_rng.integers(2**31 - 1))) for e in self.envs]
        self._episode = [[] for _ in self.envs]
        self._returns = np.zeros(len(self.envs))
        self.recent_returns: list[float] = []
        self.last_diag: StepDiagnostics | None = None

    def reseed(self, env_steps: int) -> None:
        """Re-derive the interaction and learner streams, e.g. after a resume."""
        s_act, s_train = np.random.SeedSequence([self.config.seed, env_steps]).spawn(2)
        self.act_rng = np.random.default_rng(s_act)
        self.train_rng = np.random.default_rng(s_train)

    def _finish_episode(self, w: int) -> None:
        episode = self._episode[w]
        if self.config.her and self.spec.goal_dim:
            episode = her_relabel(episode, self.config.k_future, sparse_reward_fn, self.train_rng,
                                  achieved_fn=self.envs[w].achieved_goal)
        self.buffer.extend(episode)
        self._episode[w] = []
        self.recent_returns.append(float(self._returns[w]))
        self.recent_returns = self.recent_returns[-100:]
        self._returns[w] = 0.0
        self.episodes += 1
        self._obs[w] = self.envs[w].reset(int(self.act_rng.integers(2**31 - 1)))

    def collect_round(self, random_actions: bool = False) -> None:
        """One environment step in each worker."""
        x = np.stack([policy_input(e, o) for e, o in zip(self.envs, self._obs)])
        if random_actions:
            actions = np.clip(self.act_rng.uniform(-1.0, 1.0, (len(self.envs), self.spec.action_dim)),
                              -1.0 + 1e-6, 1.0 - 1e-6)
        else:
            actions = self.agent.act(x, self.act_rng)
        for w, env in enumerate(self.envs):
            goal = env.goal.copy() if self.spec.goal_dim else None
            next_obs, r, done, info = env.step(actions[w])
            if "position" in info:
                visit_grid_update(self.visit_grid, info["position"], *arena_bounds(env))
            self._episode[w].append(Transition(self._obs[w], actions[w], r, next_obs,
                                               bool(info["terminal"]), goal))
            self._returns[w] += r
            self._obs[w] = next_obs
            self.env_steps += 1
            if done:
                self._finish_episode(w)

    def warmup(self) -> None:
        target = self.episodes + self.config.initial_random_trajectories
        while self.episodes < target:
            self.collect_round(random_actions=True)

    def run_round(self) -> list[StepDiagnostics]:
        """One collection round followed by the matching number of learner steps."""
        self.collect_round()
        out = []
        if len(self.buffer) >= self.config.batch_size:
            for _ in range(len(self.envs) // self.config.env_opt_ratio):
                out.append(train_step(self.agent, self.buffer, self.config, self.train_rng))
        if out:
            self.last_diag = out[-1]
        return out

    def evaluate(self, n_episodes: int, index: int, visit_grid=None) -> EvalMetrics:
        rng = np.random.default_rng([self.config.seed, EVAL_STREAM, index])
        return evaluate(self.agent, make_env(self.env_name, 0), n_episodes, rng, visit_grid)
