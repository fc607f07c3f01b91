from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from d2ac.critic import DistributionalCritic, ScalarCritic, make_support, two_hot
from d2ac.engine import (
    Agent,
    Batch,
    ReplayBuffer,
    TrainConfig,
    Trainer,
    Transition,
    buffer_append,
    buffer_sample,
    coverage_metrics,
    evaluate,
    her_relabel,
    input_dim,
    polyak_update,
    train_step,
)
from d2ac.actor import GaussianActor
from d2ac.envs import EnvSpec, PointMass, make_env, sparse_reward_fn
from d2ac.errors import ConfigError, UsageError
from d2ac.nn import MlpNetwork

# Upper 0.001 quantile of the chi-square distribution with 9 degrees of freedom.
CHI2_9DF_P001 = 27.877


def tr(i, goal=None, dim=2):
    return Transition(np.full(dim, float(i)), np.zeros(1), float(i), np.full(dim, i + 0.5), False, goal)


def small_config(**kw):
    base = dict(hidden_units=16, batch_size=16, n_atoms=21, v_min=-20.0, v_max=0.0, embed_dim=8,
                initial_random_trajectories=2, workers=2, buffer_size=10_000)
    base.update(kw)
    return TrainConfig(**base)


def test_transition_validation():
    with pytest.raises(ValueError):
        Transition(np.zeros(2), np.array([1.0]), 0.0, np.zeros(2), False)
    with pytest.raises(ValueError):
        Transition(np.zeros(2), np.array([0.0]), np.nan, np.zeros(2), False)
    with pytest.raises(ValueError):
        Transition(np.zeros(2), np.array([0.0]), 0.0, np.zeros(2), False, np.array([np.inf]))


def test_buffer_single_item():
    buf = ReplayBuffer(5)
    buffer_append(buf, tr(3))
    batch = buffer_sample(buf, 1, np.random.default_rng(0))
    np.testing.assert_array_equal(batch.state[0], [3.0, 3.0])
    assert batch.reward[0] == 3.0 and batch.goal is None


def test_buffer_ring_eviction():
    buf = ReplayBuffer(2)
    for i in range(3):
        buf.append(tr(i))
    assert len(buf) == 2
    assert sorted(buf.get(j).reward for j in range(2)) == [1.0, 2.0]


def test_buffer_empty_sample_and_bad_capacity():
    with pytest.raises(UsageError):
        ReplayBuffer(3).sample(1, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        ReplayBuffer(0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 3000), st.integers(1, 700))
def test_buffer_size_and_content(n, capacity):
    buf = ReplayBuffer(capacity)
    for i in range(n):
        buf.append(tr(i))
    assert len(buf) == min(n, capacity)
    stored = sorted(buf.get(j).reward for j in range(len(buf)))
    assert stored == [float(i) for i in range(max(0, n - capacity), n)]


def test_buffer_uniform_chi_square():
    buf = ReplayBuffer(10)
    for i in range(10):
        buf.append(tr(i))
    idx = buf.sample_indices(100_000, np.random.default_rng(0))
    counts = np.bincount(idx, minlength=10)
    stat = ((counts - 10_000) ** 2 / 10_000).sum()
    assert stat < CHI2_9DF_P001


def test_batch_inputs_append_goal():
    b = Batch(np.ones((2, 3)), np.zeros((2, 1)), np.zeros(2), np.full((2, 3), 2.0), np.zeros(2, bool),
              np.full((2, 2), 5.0))
    s, s2 = b.inputs()
    np.testing.assert_array_equal(s[0], [1, 1, 1, 5, 5])
    np.testing.assert_array_equal(s2[0], [2, 2, 2, 5, 5])


def goal_episode(length, rng):
    goal = np.array([0.9, 0.9])
    states = rng.uniform(-1, 1, (length + 1, 2))
    return [Transition(states[t], rng.uniform(-0.9, 0.9, 2), float(sparse_reward_fn(states[t + 1], goal)),
                       states[t + 1], False, goal) for t in range(length)]


def test_her_zero_k_is_identity():
    ep = goal_episode(5, np.random.default_rng(0))
    assert her_relabel(ep, 0, sparse_reward_fn, np.random.default_rng(1)) == ep


def test_her_enumeration_length_three():
    ep = goal_episode(3, np.random.default_rng(2))
    out = her_relabel(ep, 4, sparse_reward_fn, np.random.default_rng(3))
    assert len(out) == 3 * (1 + 4)
    valid = {t: {tuple(ep[u].next_state) for u in range(t, 3)} for t in range(3)}
    for t in range(3):
        block = out[t * 5:(t + 1) * 5]
        assert block[0] is ep[t]
        for copy in block[1:]:
            assert tuple(copy.goal) in valid[t]
            np.testing.assert_array_equal(copy.state, ep[t].state)
            np.testing.assert_array_equal(copy.action, ep[t].action)


def test_her_covers_all_future_indices():
    ep = goal_episode(3, np.random.default_rng(4))
    seen = {t: set() for t in range(3)}
    rng = np.random.default_rng(5)
    for _ in range(50):
        out = her_relabel(ep, 4, sparse_reward_fn, rng)
        for t in range(3):
            for copy in out[t * 5 + 1:(t + 1) * 5]:
                seen[t].add(next(u for u in range(3) if np.array_equal(ep[u].next_state, copy.goal)))
    assert seen == {0: {0, 1, 2}, 1: {1, 2}, 2: {2}}


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(0, 6), st.integers(0, 2**31))
def test_her_reward_consistency(length, k, seed):
    ep = goal_episode(length, np.random.default_rng(seed))
    out = her_relabel(ep, k, sparse_reward_fn, np.random.default_rng(seed + 1))
    assert len(out) == length * (1 + k)
    for t in out:
        assert t.reward == sparse_reward_fn(t.next_state, t.goal)
        assert t.done == (t.reward == 0.0) or t in ep


def test_her_same_step_goal_is_success():
    ep = goal_episode(1, np.random.default_rng(6))
    out = her_relabel(ep, 3, sparse_reward_fn, np.random.default_rng(7))
    for copy in out[1:]:
        np.testing.assert_array_equal(copy.goal, ep[0].next_state)
        assert copy.reward == 0.0 and copy.done


def test_coverage_examples():
    assert coverage_metrics(np.ones((20, 20)), (1, 10)) == {1: 1.0, 10: 0.0}
    assert coverage_metrics(np.zeros((20, 20)), (1, 10)) == {1: 0.0, 10: 0.0}
    grid = np.zeros(100, dtype=int)
    grid[:12] = 10
    grid[12:37] = 3
    assert coverage_metrics(grid.reshape(10, 10), (1, 10)) == {1: 0.37, 10: 0.12}
    with pytest.raises(ValueError):
        coverage_metrics(np.zeros(0))


def nets_pair(seed=0):
    a = MlpNetwork(3, [2], hidden_units=4, rng=np.random.default_rng(seed))
    b = MlpNetwork(3, [2], hidden_units=4, rng=np.random.default_rng(seed + 1))
    return a, b


def test_polyak_examples():
    target, online = nets_pair()
    old = [p.value.copy() for p in target.params()]
    polyak_update(target, online, 1.0)
    assert all(np.array_equal(p.value, o) for p, o in zip(target.params(), old))
    polyak_update(target, online, 0.0)
    assert all(np.array_equal(p.value, q.value) for p, q in zip(target.params(), online.params()))
    target, online = nets_pair()
    for p in target.params():
        p.value[...] = 0.0
    for p in online.params():
        p.value[...] = 2.0
    polyak_update(target, online, 0.5)
    assert all(np.all(p.value == 1.0) for p in target.params())


def test_polyak_default_tau():
    target, online = nets_pair(3)
    old = [p.value.copy() for p in target.params()]
    polyak_update(target, online, 0.995)
    for p, o, q in zip(target.params(), old, online.params()):
        np.testing.assert_allclose(p.value, 0.995 * o + 0.005 * q.value, rtol=0, atol=1e-15)


def test_polyak_equal_networks_stay_identical():
    net = MlpNetwork(3, [2], hidden_units=4, rng=np.random.default_rng(9))
    twin = net.clone()
    for _ in range(100):
        polyak_update(twin, net, 0.995)
    assert all(p.value.tobytes() == q.value.tobytes() for p, q in zip(net.params(), twin.params()))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(gamma=1.5).validate()
    with pytest.raises(ConfigError):
        TrainConfig(ablation="nope").validate()
    with pytest.raises(ConfigError):
        TrainConfig(workers=3, env_opt_ratio=2).validate()
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0).validate()
    TrainConfig().validate()


@pytest.mark.parametrize("ablation,critic_cls,n_critics,actor_cls", [
    ("full", DistributionalCritic, 2, None),
    ("no_cdq", DistributionalCritic, 1, None),
    ("scalar_cdq", ScalarCritic, 2, None),
    ("scalar_single", ScalarCritic, 1, None),
    ("gaussian_actor", DistributionalCritic, 2, GaussianActor),
])
def test_ablation_wiring(ablation, critic_cls, n_critics, actor_cls):
    agent = Agent(4, 2, small_config(ablation=ablation))
    assert type(agent.critic) is critic_cls
    assert len(agent.critic.online) == n_critics == len(agent.critic.target)
    if actor_cls:
        assert isinstance(agent.actor, actor_cls)
    else:
        assert agent.actor.loss == "d2ac"
    assert Agent(4, 2, small_config(ablation="pg_actor")).actor.loss == "pg"


def filled_buffer(n=64, obs_dim=3, seed=0):
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(1000)
    for _ in range(n):
        buf.append(Transition(rng.normal(size=obs_dim), rng.uniform(-0.9, 0.9, 2), float(-rng.uniform(0, 2)),
                              rng.normal(size=obs_dim), bool(rng.random() < 0.1)))
    return buf


@pytest.mark.parametrize("ablation", ["full", "no_cdq", "scalar_cdq", "scalar_single", "gaussian_actor", "pg_actor"])
def test_train_step_runs_for_every_ablation(ablation):
    cfg = small_config(ablation=ablation)
    agent = Agent(3, 2, cfg)
    rng = np.random.default_rng(1)
    buf = filled_buffer()
    for _ in range(3):
        diag = train_step(agent, buf, cfg, rng)
    assert np.isfinite(diag.critic_loss) and np.isfinite(diag.actor_loss)
    assert agent.updates == 3


def test_train_step_requires_full_batch():
    cfg = small_config(batch_size=128)
    with pytest.raises(UsageError):
        train_step(Agent(3, 2, cfg), filled_buffer(10), cfg, np.random.default_rng(0))


def test_zero_learning_rates_leave_agent_unchanged():
    cfg = small_config(lr_actor=0.0, lr_critic=0.0, lr_alpha=0.0, weight_decay=0.0, polyak=1.0)
    agent = Agent(3, 2, cfg)
    before = {k: v.copy() for k, v in agent.snapshot().items() if not k.endswith((".m", ".v"))}
    rng = np.random.default_rng(2)
    buf = filled_buffer()
    for _ in range(20):
        diag = train_step(agent, buf, cfg, rng)
    after = agent.snapshot()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)
    assert np.isfinite(diag.critic_loss) and diag.alpha == pytest.approx(0.2)


def test_target_equals_online_when_tau_zero():
    cfg = small_config(polyak=0.0)
    agent = Agent(3, 2, cfg)
    rng = np.random.default_rng(3)
    buf = filled_buffer()
    for _ in range(5):
        train_step(agent, buf, cfg, rng)
    for online, target in zip(agent.critic.online, agent.critic.target):
        assert all(p.value.tobytes() == q.value.tobytes() for p, q in zip(online.params(), target.params()))


def test_target_lags_as_geometric_average():
    cfg = small_config(polyak=0.9, lr_actor=0.0)
    agent = Agent(3, 2, cfg)
    history = [[p.value.copy() for p in agent.critic.online[0].params()]]
    expected = [v.copy() for v in history[0]]
    rng = np.random.default_rng(4)
    buf = filled_buffer()
    for _ in range(6):
        train_step(agent, buf, cfg, rng)
        current = [p.value.copy() for p in agent.critic.online[0].params()]
        expected = [0.9 * e + 0.1 * c for e, c in zip(expected, current)]
    for p, e in zip(agent.critic.target[0].params(), expected):
        np.testing.assert_allclose(p.value, e, rtol=0, atol=1e-12)


def test_target_update_interval():
    cfg = small_config(target_update_interval=3, polyak=0.0)
    agent = Agent(3, 2, cfg)
    rng = np.random.default_rng(5)
    buf = filled_buffer()
    frozen = [p.value.copy() for p in agent.critic.target[0].params()]
    for _ in range(2):
        train_step(agent, buf, cfg, rng)
    assert all(np.array_equal(p.value, f) for p, f in zip(agent.critic.target[0].params(), frozen))
    train_step(agent, buf, cfg, rng)
    assert all(np.array_equal(p.value, q.value)
               for p, q in zip(agent.critic.target[0].params(), agent.critic.online[0].params()))


def test_contrived_mdp_critic_value():
    # two states that alternate forever; reward 1 - a^2, so a* = 0 and Q*(s, 0) = 1 / (1 - gamma)
    gamma = 0.8
    cfg = small_config(gamma=gamma, v_min=-2.0, v_max=8.0, n_atoms=51, hidden_units=32, batch_size=64,
                       polyak=0.99, alpha_init=0.01, lr_alpha=0.0, k=2)
    agent = Agent(2, 1, cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    buf = ReplayBuffer(10_000)
    eye = np.eye(2)
    for i in range(4000):
        s = i % 2
        a = rng.uniform(-0.99, 0.99, 1)
        buf.append(Transition(eye[s], a, float(1.0 - a[0] ** 2), eye[1 - s], False))
    for _ in range(5000):
        train_step(agent, buf, cfg, rng)
    q_star = 1.0 / (1.0 - gamma)
    q = agent.critic.q_value(eye, np.zeros((2, 1)))
    np.testing.assert_allclose(q, q_star, rtol=0.10)


class ConstantRewardEnv:
    spec = EnvSpec("constant", 1, 1, 7, "dense")

    def reset(self, seed=None):
        self.t = 0
        return np.zeros(1)

    def step(self, action):
        self.t += 1
        return np.zeros(1), 1.0, self.t >= 7, {"terminal": False, "truncated": self.t >= 7}


def test_evaluate_constant_reward():
    agent = Agent(1, 1, small_config())
    m = evaluate(agent, ConstantRewardEnv(), 3, np.random.default_rng(0))
    assert m.mean_return == 7.0 and m.returns == [7.0, 7.0, 7.0]


def test_evaluate_goal_at_spawn_is_success():
    class AtGoal(PointMass):
        def _reset(self):
            super()._reset()
            return self.place(self.goal.copy(), (0.0, 0.0), self.goal.copy())

    env = AtGoal(goal_conditioned=True, seed=0)
    agent = Agent(input_dim(env.spec), 2, small_config())
    m = evaluate(agent, env, 4, np.random.default_rng(0))
    assert m.success_rate == 1.0 and m.mean_return == 0.0


def test_evaluate_deterministic_and_pure():
    env = make_env("predator_prey", 3)
    agent = Agent(input_dim(env.spec), 2, small_config())
    buf = filled_buffer()
    before = agent.snapshot()
    env_state = (env.rng.bit_generator.state, env.predator_rng.bit_generator.state)
    a = evaluate(agent, env, 3, np.random.default_rng(11))
    b = evaluate(agent, env, 3, np.random.default_rng(11))
    assert a == b
    after = agent.snapshot()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)
    assert env_state == (env.rng.bit_generator.state, env.predator_rng.bit_generator.state)
    assert len(buf) == 64


def test_trainer_round_accounting():
    cfg = small_config(workers=4, env_opt_ratio=2, batch_size=8)
    trainer = Trainer(cfg, "point_mass_dense")
    trainer.warmup()
    assert trainer.episodes >= 2
    steps = trainer.env_steps
    assert steps == len(trainer.buffer) and steps % 4 == 0
    diags = trainer.run_round()
    assert trainer.env_steps == steps + 4 and len(diags) == 2
    assert trainer.agent.updates == 2


def test_trainer_her_relabels_goal_episodes():
    cfg = small_config(her=True, k_future=4, workers=2, initial_random_trajectories=4)
    trainer = Trainer(cfg, "point_mass_goal")
    trainer.warmup()
    assert len(trainer.buffer) == 5 * trainer.env_steps - 5 * sum(len(e) for e in trainer._episode)
    batch = trainer.buffer.sample(256, np.random.default_rng(0))
    assert batch.goal.shape == (256, 2)
    np.testing.assert_array_equal(batch.reward, sparse_reward_fn(batch.next_state[:, :2], batch.goal))


def test_trainer_is_deterministic():
    cfg = small_config(batch_size=8)
    runs = []
    for _ in range(2):
        trainer = Trainer(replace(cfg), "pendulum")
        trainer.warmup()
        for _ in range(5):
            trainer.run_round()
        runs.append(trainer.agent.snapshot())
    assert all(runs[0][k].tobytes() == runs[1][k].tobytes() for k in runs[0])


def test_distributional_label_is_valid_distribution():
    agent = Agent(3, 2, small_config())
    batch = filled_buffer().sample(16, np.random.default_rng(0))
    a2 = agent.actor.act(batch.next_state, np.random.default_rng(1))
    label = agent.critic.target_label(batch.next_state, a2, batch.reward, batch.done, 0.99)
    np.testing.assert_allclose(label.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(label >= 0)
    done = batch.done
    np.testing.assert_allclose(label[done], two_hot(make_support(-20, 0, 21), batch.reward[done]), atol=1e-12)
