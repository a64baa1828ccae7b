"""Synthetic functional-action MDPs and brute-force oracles.

``SyntheticEnv`` plants a known functional linear policy: the reward
penalizes the squared L2 distance between the taken action and the planted
policy's action, so near-optimal behavior is known by construction and
learned policies can be scored against it. ``TabularEmbedEnv`` embeds a
2-state, 2-action MDP as functional actions so fitted-Q estimates can be
checked against an exact linear-system solve.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import pandas as pd

from .bspline import BSplineBasis, basis_matrix
from .core import Dataset, Grid, GridFunction, State, Transition
from .fqe import PolicyHandle, derive_rng
from .fqi import FunctionalLinearPolicy

__all__ = [
    "SyntheticEnv",
    "TabularEmbedEnv",
    "rollout_value",
    "exact_tabular_q",
    "exact_tabular_value",
    "generate_dataset",
    "mean_action_dataset",
]


@dataclass(frozen=True, eq=False)
class SyntheticEnv:
    """A functional-action MDP with a planted near-optimal linear policy.

    Dynamics: S' = clip(Phi S + push * tanh(<A, beta>) + noise), with <.,.>
    the quadrature inner product on the grid. Reward: clip to [0, 1] of
    base_offset - base_scale * mean(S^2) - action_cost * |A - pi*(S)|_L2^2.
    The action's influence on the next state is kept weak so the planted
    policy stays effectively optimal.
    """

    state_dim: int
    grid: Grid
    basis: BSplineBasis
    transition_matrix: np.ndarray
    action_sensor: np.ndarray
    action_push: np.ndarray
    noise_scale: float
    reward_noise: float
    state_clip: float
    init_scale: float
    optimal_coef: np.ndarray
    action_cost: float
    base_offset: float
    base_scale: float
    behavior_noise: float
    seed: int

    @classmethod
    def default(
        cls,
        state_dim: int = 6,
        grid_size: int = 101,
        seed: int = 0,
        behavior_noise: float = 0.9,
    ) -> "SyntheticEnv":
        """Desk-scale instance mirroring the application (p=6, 101 points)."""
        grid = Grid.uniform(grid_size)
        basis = BSplineBasis.cubic(2)
        rng = derive_rng(seed, 99)
        coef = 0.35 * rng.standard_normal((state_dim + 1, basis.dimension))
        push = 0.25 * rng.standard_normal(state_dim) / np.sqrt(state_dim)
        return cls(
            state_dim=state_dim,
            grid=grid,
            basis=basis,
            transition_matrix=0.6 * np.eye(state_dim),
            action_sensor=np.sin(2.0 * np.pi * grid.points),
            action_push=push,
            noise_scale=0.5,
            reward_noise=0.0,
            state_clip=3.0,
            init_scale=0.6,
            optimal_coef=coef,
            action_cost=0.35,
            base_offset=0.85,
            base_scale=0.35,
            behavior_noise=behavior_noise,
            seed=seed,
        )

    @cached_property
    def _basis_on_grid(self) -> np.ndarray:
        return basis_matrix(self.basis, self.grid.points)

    def optimal_policy(self) -> FunctionalLinearPolicy:
        return FunctionalLinearPolicy(
            coef=self.optimal_coef,
            basis=self.basis,
            grid=self.grid,
            scaling=None,
            intercept=True,
        )

    def optimal_action_values(self, state_components: np.ndarray) -> np.ndarray:
        s = np.append(state_components, 1.0)
        return (s @ self.optimal_coef) @ self._basis_on_grid.T

    def behavior_policy(self) -> PolicyHandle:
        """The planted policy plus smooth Gaussian functional noise."""

        def sampler(state: State, rng: np.random.Generator) -> GridFunction:
            z = self.behavior_noise * rng.standard_normal(self.basis.dimension)
            values = self.optimal_action_values(state.components)
            return GridFunction(self.grid, values + self._basis_on_grid @ z)

        return PolicyHandle.stochastic(sampler)

    def initial_state(self, rng: np.random.Generator) -> State:
        raw = self.init_scale * rng.standard_normal(self.state_dim)
        return State(np.clip(raw, -self.state_clip, self.state_clip))

    def reward(self, state: State, action: GridFunction) -> float:
        """Mean reward before observation noise."""
        target = self.optimal_action_values(state.components)
        diff = action.values - target
        dist_sq = float(self.grid.weights @ (diff * diff))
        base = self.base_offset - self.base_scale * float(
            np.mean(state.components**2)
        )
        return float(np.clip(base - self.action_cost * dist_sq, 0.0, 1.0))

    def step(
        self, state: State, action: GridFunction, rng: np.random.Generator
    ) -> tuple[State, float]:
        reward = self.reward(state, action)
        if self.reward_noise > 0:
            reward = float(
                np.clip(reward + self.reward_noise * rng.standard_normal(), 0.0, 1.0)
            )
        drive = float(np.tanh(self.grid.weights @ (action.values * self.action_sensor)))
        nxt = (
            self.transition_matrix @ state.components
            + self.action_push * drive
            + self.noise_scale * rng.standard_normal(self.state_dim)
        )
        nxt = np.clip(nxt, -self.state_clip, self.state_clip)
        return State(nxt), reward

    def to_json(self, path: str | Path) -> None:
        data = {
            "state_dim": self.state_dim,
            "grid_points": self.grid.points.tolist(),
            "basis": self.basis.to_dict(),
            "transition_matrix": self.transition_matrix.tolist(),
            "action_sensor": self.action_sensor.tolist(),
            "action_push": self.action_push.tolist(),
            "noise_scale": self.noise_scale,
            "reward_noise": self.reward_noise,
            "state_clip": self.state_clip,
            "init_scale": self.init_scale,
            "optimal_coef": self.optimal_coef.tolist(),
            "action_cost": self.action_cost,
            "base_offset": self.base_offset,
            "base_scale": self.base_scale,
            "behavior_noise": self.behavior_noise,
            "seed": self.seed,
        }
        Path(path).write_text(json.dumps(data, indent=2, sort_keys=True))

    @classmethod
    def from_json(cls, path: str | Path) -> "SyntheticEnv":
        data = json.loads(Path(path).read_text())
        return cls(
            state_dim=int(data["state_dim"]),
            grid=Grid.from_points(data["grid_points"]),
            basis=BSplineBasis.from_dict(data["basis"]),
            transition_matrix=np.asarray(data["transition_matrix"], dtype=float),
            action_sensor=np.asarray(data["action_sensor"], dtype=float),
            action_push=np.asarray(data["action_push"], dtype=float),
            noise_scale=float(data["noise_scale"]),
            reward_noise=float(data.get("reward_noise", 0.0)),
            state_clip=float(data["state_clip"]),
            init_scale=float(data["init_scale"]),
            optimal_coef=np.asarray(data["optimal_coef"], dtype=float),
            action_cost=float(data["action_cost"]),
            base_offset=float(data["base_offset"]),
            base_scale=float(data["base_scale"]),
            behavior_noise=float(data["behavior_noise"]),
            seed=int(data["seed"]),
        )


@dataclass(frozen=True, eq=False)
class TabularEmbedEnv:
    """A 2-state, 2-action MDP whose actions are two fixed grid functions."""

    transition: np.ndarray  # (2, 2, 2): P[s, a, s']
    rewards: np.ndarray  # (2, 2) in [0, 1]
    grid: Grid
    state_vectors: np.ndarray  # (2, p) embeddings
    action_values: np.ndarray  # (2, G) the two fixed action functions
    initial_dist: np.ndarray  # (2,)

    def __post_init__(self):
        p = np.asarray(self.transition, dtype=float)
        if p.shape != (2, 2, 2) or np.any(p < 0):
            raise ValueError("transition must be a non-negative (2,2,2) tensor")
        if not np.allclose(p.sum(axis=2), 1.0):
            raise ValueError("transition rows must sum to 1")
        if np.any(self.rewards < 0) or np.any(self.rewards > 1):
            raise ValueError("tabular rewards must lie in [0, 1]")

    @classmethod
    def default(cls, grid_size: int = 101) -> "TabularEmbedEnv":
        grid = Grid.uniform(grid_size)
        transition = np.array(
            [
                [[0.9, 0.1], [0.3, 0.7]],
                [[0.6, 0.4], [0.2, 0.8]],
            ]
        )
        rewards = np.array([[0.9, 0.3], [0.2, 0.7]])
        actions = np.vstack([np.zeros(grid_size), np.ones(grid_size)])
        return cls(
            transition=transition,
            rewards=rewards,
            grid=grid,
            state_vectors=np.eye(2),
            action_values=actions,
            initial_dist=np.array([0.5, 0.5]),
        )

    def state(self, idx: int) -> State:
        return State(self.state_vectors[idx])

    def action(self, idx: int) -> GridFunction:
        return GridFunction(self.grid, self.action_values[idx])

    def state_index(self, state: State) -> int:
        d = np.linalg.norm(self.state_vectors - state.components[None, :], axis=1)
        return int(np.argmin(d))

    def policy_handle(self, policy: np.ndarray) -> PolicyHandle:
        """Wrap a (2, 2) action-probability table as a functional policy."""
        policy = np.asarray(policy, dtype=float)
        deterministic = np.all((policy == 0.0) | (policy == 1.0))
        if deterministic:
            choice = policy.argmax(axis=1)
            return PolicyHandle.deterministic(
                lambda s: self.action(int(choice[self.state_index(s)]))
            )

        def sampler(s: State, rng: np.random.Generator) -> GridFunction:
            idx = self.state_index(s)
            return self.action(int(rng.choice(2, p=policy[idx])))

        return PolicyHandle.stochastic(sampler)


def exact_tabular_q(
    env: TabularEmbedEnv, policy: np.ndarray, gamma: float
) -> np.ndarray:
    """Solve the policy's Bellman system (I - gamma P^pi) q = r exactly."""
    policy = np.asarray(policy, dtype=float)
    if policy.shape != (2, 2) or not np.allclose(policy.sum(axis=1), 1.0):
        raise ValueError("policy must be a (2,2) row-stochastic table")
    # Transition on state-action pairs: P^pi[(s,a), (s',a')] = P[s,a,s'] pi[s',a']
    p_pi = np.einsum("saz,zb->sazb", env.transition, policy).reshape(4, 4)
    r = env.rewards.reshape(4)
    q = np.linalg.solve(np.eye(4) - gamma * p_pi, r)
    return q.reshape(2, 2)


def exact_tabular_value(
    env: TabularEmbedEnv, policy: np.ndarray, gamma: float
) -> float:
    """Initial-distribution value of a tabular policy."""
    q = exact_tabular_q(env, policy, gamma)
    v = (np.asarray(policy) * q).sum(axis=1)
    return float(env.initial_dist @ v)


def _as_policy_handle(policy) -> PolicyHandle:
    if isinstance(policy, PolicyHandle):
        return policy
    if isinstance(policy, FunctionalLinearPolicy):
        return policy.as_policy_handle()
    raise TypeError(f"unsupported policy type: {type(policy)!r}")


def default_horizon(gamma: float, tail: float = 1e-4) -> int:
    """Smallest horizon with gamma^horizon below the tail tolerance."""
    if gamma == 0.0:
        return 1
    return int(np.ceil(np.log(tail) / np.log(gamma)))


def rollout_value(
    env,
    policy,
    episodes: int,
    gamma: float,
    seed: int,
    horizon: int | None = None,
) -> tuple[float, float]:
    """Monte Carlo estimate (mean, stderr) of the discounted return.

    Episodes start from the environment's initial distribution and use
    per-episode random streams derived from (seed, episode).
    """
    if horizon is None:
        horizon = default_horizon(gamma)
    discounts = gamma ** np.arange(horizon)
    returns = np.empty(episodes)

    if isinstance(env, TabularEmbedEnv):
        policy = np.asarray(policy, dtype=float)
        for ep in range(episodes):
            rng = derive_rng(seed, ep)
            s = int(rng.choice(2, p=env.initial_dist))
            total = 0.0
            for t in range(horizon):
                a = int(rng.choice(2, p=policy[s]))
                total += discounts[t] * env.rewards[s, a]
                s = int(rng.choice(2, p=env.transition[s, a]))
            returns[ep] = total
        return float(returns.mean()), float(returns.std(ddof=1) / np.sqrt(episodes))

    handle = _as_policy_handle(policy)
    for ep in range(episodes):
        rng = derive_rng(seed, ep)
        state = env.initial_state(rng)
        total = 0.0
        for t in range(horizon):
            action = handle.action(state, rng) if not handle.is_deterministic else handle.action(state)
            state, reward = env.step(state, action, rng)
            total += discounts[t] * reward
        returns[ep] = total
    return float(returns.mean()), float(returns.std(ddof=1) / np.sqrt(episodes))


def generate_dataset(env, behavior_policy, n_subjects: int, n_steps: int, seed: int) -> Dataset:
    """Roll the behavior policy for N subjects and T steps each.

    For ``SyntheticEnv`` the behavior is a PolicyHandle (default: the
    planted policy plus functional noise); for ``TabularEmbedEnv`` it is a
    (2, 2) action-probability table.
    """
    if n_subjects < 1 or n_steps < 1:
        raise ValueError("need at least one subject and one step")
    transitions = []
    initial_states = []

    if isinstance(env, TabularEmbedEnv):
        behavior = np.asarray(behavior_policy, dtype=float)
        for i in range(n_subjects):
            rng = derive_rng(seed, 2, i)
            s = int(rng.choice(2, p=env.initial_dist))
            initial_states.append(env.state(s))
            for t in range(n_steps):
                a = int(rng.choice(2, p=behavior[s]))
                s_next = int(rng.choice(2, p=env.transition[s, a]))
                transitions.append(
                    Transition(
                        state=env.state(s),
                        action=env.action(a),
                        reward=float(env.rewards[s, a]),
                        next_state=env.state(s_next),
                        subject_id=f"s{i:04d}",
                        time_index=t,
                    )
                )
                s = s_next
        return Dataset(
            transitions=tuple(transitions),
            initial_states=tuple(initial_states),
            grid=env.grid,
        )

    handle = _as_policy_handle(behavior_policy)
    for i in range(n_subjects):
        rng = derive_rng(seed, 2, i)
        state = env.initial_state(rng)
        initial_states.append(state)
        for t in range(n_steps):
            action = handle.action(state, rng) if not handle.is_deterministic else handle.action(state)
            next_state, reward = env.step(state, action, rng)
            transitions.append(
                Transition(
                    state=state,
                    action=action,
                    reward=reward,
                    next_state=next_state,
                    subject_id=f"s{i:04d}",
                    time_index=t,
                )
            )
            state = next_state
    return Dataset(
        transitions=tuple(transitions),
        initial_states=tuple(initial_states),
        grid=env.grid,
    )


def mean_action_dataset(dataset: Dataset, aggregator=None) -> pd.DataFrame:
    """Aggregation hook for external continuous-action baselines.

    Collapses each functional action to one scalar (default: its quadrature
    mean over [0, 1]) and returns a flat table; no baseline is shipped.
    """
    if aggregator is None:
        aggregator = lambda a: a.integrate()  # noqa: E731
    rows = []
    for tr in dataset.transitions:
        row = {"subject_id": tr.subject_id, "time_index": tr.time_index}
        for j, x in enumerate(tr.state.components):
            row[f"state_{j + 1}"] = x
        row["action_mean"] = float(aggregator(tr.action))
        row["reward"] = tr.reward
        for j, x in enumerate(tr.next_state.components):
            row[f"next_state_{j + 1}"] = x
        rows.append(row)
    return pd.DataFrame(rows)
