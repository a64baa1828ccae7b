import numpy as np
import pytest

from funcq.core import Dataset, Grid, GridFunction, State, Transition


@pytest.fixture
def grid():
    return Grid.uniform(101)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_dataset(
    rng,
    grid,
    n_subjects=5,
    n_steps=4,
    state_dim=3,
    reward_fn=None,
    action_fn=None,
):
    """Small random dataset for library-level tests."""
    transitions = []
    for i in range(n_subjects):
        state = State(rng.normal(size=state_dim))
        for t in range(n_steps):
            if action_fn is None:
                values = rng.normal(size=len(grid))
            else:
                values = action_fn(state, rng)
            action = GridFunction(grid, values)
            next_state = State(0.5 * state.components + rng.normal(size=state_dim))
            if reward_fn is None:
                reward = float(rng.uniform())
            else:
                reward = reward_fn(state, action)
            transitions.append(
                Transition(
                    state=state,
                    action=action,
                    reward=reward,
                    next_state=next_state,
                    subject_id=f"s{i:03d}",
                    time_index=t,
                )
            )
            state = next_state
    return Dataset.from_transitions(transitions, grid)
