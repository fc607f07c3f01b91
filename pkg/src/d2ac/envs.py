"""Small continuous-control tasks with ``[-1, 1]^d`` action spaces.

All environments follow ``reset(seed) -> obs`` and
``step(action) -> (obs, reward, done, info)``. ``info["terminal"]`` separates
true terminations from time-limit truncation, which the learner bootstraps
through.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

SPARSE_TOLERANCE = 0.05
GRID_CELLS = 20


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int
    action_dim: int
    max_steps: int
    reward_kind: str  # "dense" | "sparse"
    goal_dim: int | None = None


def sparse_reward_fn(achieved, goal, tolerance: float = SPARSE_TOLERANCE):
    """0 when ``achieved`` is within ``tolerance`` of ``goal``, else -1. Works on batches."""
    dist = np.linalg.norm(np.asarray(achieved, dtype=np.float64) - np.asarray(goal, dtype=np.float64),
                          axis=-1)
    return np.where(dist < tolerance, 0.0, -1.0) if np.ndim(dist) else (0.0 if dist < tolerance else -1.0)


class _Env:
    spec: EnvSpec

    def __init__(self, seed: int | None = None):
        self.rng = np.random.default_rng(seed)
        self.t = 0
        self.finished = False

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.t = 0
        self.finished = False
        return self._reset()

    def step(self, action):
        if self.finished:
            raise RuntimeError("step() called on a finished episode; call reset()")
        action = np.asarray(action, dtype=np.float64).reshape(self.spec.action_dim)
        clamped = bool(np.any(np.abs(action) > 1.0))
        action = np.clip(action, -1.0, 1.0)
        self.t += 1
        obs, reward, terminal, info = self._step(action)
        truncated = self.t >= self.spec.max_steps and not terminal
        self.finished = terminal or truncated
        info.update(terminal=terminal, truncated=truncated, clamped=clamped)
        return obs, reward, self.finished, info

    def _reset(self) -> np.ndarray:
        raise NotImplementedError

    def _step(self, action):
        raise NotImplementedError


class PointMass(_Env):
    """2-D double integrator in ``[-1, 1]^2``; actions are accelerations.

    ``goal_conditioned=False`` gives the dense task (reward = -distance, goal
    offset in the observation). ``goal_conditioned=True`` gives the sparse
    task: observation ``[pos, vel]``, goal held separately, episode ends on
    success.
    """

    dt = 0.05
    accel = 10.0
    max_speed = 2.0
    spawn = 0.5
    # sparse goals are drawn far from the start so random play rarely succeeds
    goal_range = 0.9
    goal_min_distance = 0.5

    def __init__(self, goal_conditioned: bool = False, seed: int | None = None):
        super().__init__(seed)
        self.goal_conditioned = goal_conditioned
        if goal_conditioned:
            self.spec = EnvSpec("point_mass_goal", 4, 2, 50, "sparse", goal_dim=2)
        else:
            self.spec = EnvSpec("point_mass_dense", 6, 2, 50, "dense")
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)
        self.goal = np.zeros(2)

    def _reset(self):
        self.vel = np.zeros(2)
        self.pos = self.rng.uniform(-self.spawn, self.spawn, 2)
        goal_range, min_dist = self.spawn, 2 * SPARSE_TOLERANCE
        if self.goal_conditioned:
            goal_range, min_dist = self.goal_range, self.goal_min_distance
        while True:
            self.goal = self.rng.uniform(-goal_range, goal_range, 2)
            if np.linalg.norm(self.goal - self.pos) > min_dist:
                break
        return self.observe()

    def place(self, pos, vel=(0.0, 0.0), goal=None) -> np.ndarray:
        """Set the state directly (tests and scripted evaluations)."""
        self.pos = np.array(pos, dtype=np.float64)
        self.vel = np.array(vel, dtype=np.float64)
        if goal is not None:
            self.goal = np.array(goal, dtype=np.float64)
        self.t = 0
        self.finished = False
        return self.observe()

    def observe(self) -> np.ndarray:
        if self.goal_conditioned:
            return np.concatenate([self.pos, self.vel])
        return np.concatenate([self.pos, self.vel, self.goal - self.pos])

    @staticmethod
    def achieved_goal(obs) -> np.ndarray:
        return np.asarray(obs)[..., :2]

    def _step(self, action):
        self.vel = np.clip(self.vel + self.accel * action * self.dt, -self.max_speed, self.max_speed)
        pos = self.pos + self.vel * self.dt
        hit = np.abs(pos) > 1.0
        self.vel[hit] = 0.0
        self.pos = np.clip(pos, -1.0, 1.0)
        dist = float(np.linalg.norm(self.pos - self.goal))
        if self.goal_conditioned:
            reward = float(sparse_reward_fn(self.pos, self.goal))
            success = reward == 0.0
            return self.observe(), reward, success, {"success": success, "position": self.pos.copy()}
        return self.observe(), -dist, False, {"success": dist < SPARSE_TOLERANCE,
                                              "position": self.pos.copy()}


class Pendulum(_Env):
    """Torque-limited swing-up, ``m = l = 1``, ``g = 10``."""

    dt = 0.05
    g = 10.0
    max_speed = 8.0
    max_torque = 2.0

    def __init__(self, seed: int | None = None):
        super().__init__(seed)
        self.spec = EnvSpec("pendulum", 3, 1, 200, "dense")
        self.theta = 0.0
        self.theta_dot = 0.0

    def _reset(self):
        self.theta = self.rng.uniform(-math.pi, math.pi)
        self.theta_dot = self.rng.uniform(-1.0, 1.0)
        return self.observe()

    def observe(self):
        return np.array([math.cos(self.theta), math.sin(self.theta), self.theta_dot])

    def _step(self, action):
        a = float(action[0])
        angle = ((self.theta + math.pi) % (2 * math.pi)) - math.pi
        reward = -(angle ** 2 + 0.1 * self.theta_dot ** 2 + 0.001 * a ** 2)
        torque = self.max_torque * a
        self.theta_dot += (3.0 * self.g / 2.0 * math.sin(self.theta) + 3.0 * torque) * self.dt
        self.theta_dot = float(np.clip(self.theta_dot, -self.max_speed, self.max_speed))
        self.theta += self.theta_dot * self.dt
        return self.observe(), reward, False, {"success": False}


@dataclass
class ArenaState:
    prey: np.ndarray
    heading: float
    predator: np.ndarray
    goal: np.ndarray
    puff: bool = False


class PredatorPrey(_Env):
    """Prey (the agent) crosses a unit square to a goal while a pursuer chases it.

    Actions are target coordinates mapped from ``[-1, 1]^2`` onto the arena;
    the prey moves toward the target at up to ``prey_speed`` per step. The
    predator runs pure pursuit. The predator spawn draws from its own stream,
    seeded once at construction, so repeated ``reset(seed)`` calls give the same
    prey start but fresh predator positions.

    Observation (10): prey xy, heading cos/sin, predator xy (zeros when
    unseen), predator-visible flag, goal offset xy, puff flag.
    """

    prey_speed = 0.04
    predator_speed = 0.03
    catch_radius = 0.1
    goal_radius = 0.05
    fov_half_angle = math.radians(60.0)
    sight_radius = 0.25
    min_spawn_distance = 0.3
    start = np.array([0.15, 0.15])
    goal_pos = np.array([0.85, 0.85])

    def __init__(self, seed: int | None = None):
        super().__init__(seed)
        self.spec = EnvSpec("predator_prey", 10, 2, 200, "dense")
        self.predator_rng = np.random.default_rng(None if seed is None else [seed, 7919])
        self.state = ArenaState(self.start.copy(), 0.0, np.zeros(2), self.goal_pos.copy())

    def in_fov(self, point, state: ArenaState | None = None) -> bool:
        state = self.state if state is None else state
        rel = np.asarray(point) - state.prey
        if np.linalg.norm(rel) < 1e-12:
            return True
        diff = math.atan2(rel[1], rel[0]) - state.heading
        diff = (diff + math.pi) % (2 * math.pi) - math.pi
        return abs(diff) <= self.fov_half_angle

    def _reset(self):
        prey = np.clip(self.start + self.rng.uniform(-0.05, 0.05, 2), 0.0, 1.0)
        to_goal = self.goal_pos - prey
        heading = math.atan2(to_goal[1], to_goal[0]) + self.rng.uniform(-0.2, 0.2)
        self.state = ArenaState(prey, heading, np.zeros(2), self.goal_pos.copy())
        while True:
            cand = self.predator_rng.uniform(0.0, 1.0, 2)
            if np.linalg.norm(cand - prey) >= self.min_spawn_distance and not self.in_fov(cand):
                break
        self.state.predator = cand
        return self.observe()

    def visible(self) -> bool:
        s = self.state
        return self.in_fov(s.predator) or np.linalg.norm(s.predator - s.prey) <= self.sight_radius

    def observe(self):
        s = self.state
        seen = self.visible()
        pred = s.predator if seen else np.zeros(2)
        return np.concatenate([
            s.prey, [math.cos(s.heading), math.sin(s.heading)], pred, [float(seen)],
            s.goal - s.prey, [float(s.puff)],
        ])

    @property
    def position(self) -> np.ndarray:
        return self.state.prey

    def _step(self, action):
        s = self.state
        target = (action + 1.0) / 2.0
        move = target - s.prey
        dist = np.linalg.norm(move)
        if dist > 1e-12:
            s.prey = np.clip(s.prey + move * min(1.0, self.prey_speed / dist), 0.0, 1.0)
            s.heading = math.atan2(move[1], move[0])
        chase = s.prey - s.predator
        gap = np.linalg.norm(chase)
        if gap > 1e-12:
            s.predator = s.predator + chase * min(1.0, self.predator_speed / gap)
        caught = np.linalg.norm(s.prey - s.predator) < self.catch_radius
        s.puff = bool(caught)
        reached = np.linalg.norm(s.prey - s.goal) < self.goal_radius
        reward = (1.0 if reached else 0.0) - (1.0 if caught else 0.0)
        info = {"success": bool(reached), "caught": bool(caught), "position": s.prey.copy()}
        return self.observe(), reward, bool(reached), info


def make_env(name: str, seed: int | None = None) -> _Env:
    if name == "point_mass_dense":
        return PointMass(False, seed)
    if name == "point_mass_goal":
        return PointMass(True, seed)
    if name == "pendulum":
        return Pendulum(seed)
    if name == "predator_prey":
        return PredatorPrey(seed)
    raise ConfigError(f"unknown environment {name!r}")


ENV_NAMES = ("point_mass_dense", "point_mass_goal", "pendulum", "predator_prey")


def new_visit_grid(cells: int = GRID_CELLS) -> np.ndarray:
    return np.zeros((cells, cells), dtype=np.int64)


def visit_grid_update(grid: np.ndarray, position, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    """Increment the cell containing ``position`` (arena ``[low, high]^2``)."""
    cells = grid.shape[0]
    frac = (np.asarray(position, dtype=np.float64) - low) / (high - low)
    ij = np.clip((frac * cells).astype(int), 0, cells - 1)
    grid[ij[0], ij[1]] += 1
    return grid
