"""Gaussian state/action kernels, Gram assembly, and the kernel ridge solver.

The Q-function is fitted in the tensor-product RKHS of a Gaussian kernel on
(standardized) states and a Gaussian kernel on the quadrature L2 distance
between grid functions. The ridge system is scaled as (G + n*lambda*I), which
matches the mean-squared-error-plus-penalty objective exactly; fitted values
are plain kernel expansions without an extra 1/n factor.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .core import Dataset, Grid, GridFunction, State

__all__ = [
    "KernelSpec",
    "KernelQ",
    "k_state",
    "k_action",
    "k_tensor",
    "gram_matrix",
    "cross_gram",
    "krr_fit",
    "krr_fit_arrays",
    "q_eval",
    "q_eval_batch",
    "q_grad_action",
    "q_grad_action_batch",
    "median_heuristic",
]

logger = logging.getLogger(__name__)

# Dense Cholesky only; above this size the desk-scale contract is violated.
MAX_TRAIN_SIZE = 5000


@dataclass(frozen=True)
class KernelSpec:
    """Bandwidths of the Gaussian state and action kernels."""

    state_bandwidth: float
    action_bandwidth: float

    def __post_init__(self):
        if self.state_bandwidth <= 0 or self.action_bandwidth <= 0:
            raise ValueError("kernel bandwidths must be positive")

    def to_dict(self) -> dict:
        return {
            "state_bandwidth": self.state_bandwidth,
            "action_bandwidth": self.action_bandwidth,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "KernelSpec":
        return cls(
            state_bandwidth=float(data["state_bandwidth"]),
            action_bandwidth=float(data["action_bandwidth"]),
        )


@dataclass(frozen=True, eq=False)
class KernelQ:
    """A fitted Q-function in representer form.

    ``train_states`` (n, p) and ``train_actions`` (n, G) hold the training
    pairs, ``action_weights`` the quadrature weights of the shared grid, and
    ``alpha`` the representer coefficients: Q(s, a) = sum_j alpha_j *
    k_state(s, S_j) * k_action(a, A_j). ``train_indices`` optionally records
    which dataset rows the pairs came from, for serialization.
    """

    train_states: np.ndarray
    train_actions: np.ndarray
    action_weights: np.ndarray
    alpha: np.ndarray
    spec: KernelSpec
    train_indices: np.ndarray | None = None

    def __post_init__(self):
        n = self.train_states.shape[0]
        if self.train_actions.shape[0] != n or self.alpha.shape != (n,):
            raise ValueError("inconsistent training pair / coefficient lengths")
        if not np.all(np.isfinite(self.alpha)):
            raise ValueError("alpha must be finite")

    @property
    def n_train(self) -> int:
        return self.train_states.shape[0]

    def to_json(self, path: str | Path) -> None:
        """Serialize coefficients and hyper-parameters.

        Training pairs are stored as dataset row indices when available,
        otherwise inline; loading from indices requires the source dataset.
        """
        data = {
            "alpha": self.alpha.tolist(),
            "spec": self.spec.to_dict(),
        }
        if self.train_indices is not None:
            data["train_indices"] = self.train_indices.tolist()
        else:
            data["train_states"] = self.train_states.tolist()
            data["train_actions"] = self.train_actions.tolist()
            data["action_weights"] = self.action_weights.tolist()
        Path(path).write_text(json.dumps(data, indent=2, sort_keys=True))

    @classmethod
    def from_json(cls, path: str | Path, dataset: Dataset | None = None) -> "KernelQ":
        data = json.loads(Path(path).read_text())
        spec = KernelSpec.from_dict(data["spec"])
        alpha = np.asarray(data["alpha"], dtype=float)
        if "train_indices" in data:
            if dataset is None:
                raise ValueError("loading an index-based KernelQ needs the dataset")
            idx = np.asarray(data["train_indices"], dtype=int)
            return cls(
                train_states=dataset.states[idx],
                train_actions=dataset.actions[idx],
                action_weights=dataset.grid.weights,
                alpha=alpha,
                spec=spec,
                train_indices=idx,
            )
        return cls(
            train_states=np.asarray(data["train_states"], dtype=float),
            train_actions=np.asarray(data["train_actions"], dtype=float),
            action_weights=np.asarray(data["action_weights"], dtype=float),
            alpha=alpha,
            spec=spec,
        )


def _state_vector(s) -> np.ndarray:
    return s.components if isinstance(s, State) else np.asarray(s, dtype=float)


def k_state(s1, s2, state_bandwidth: float) -> float:
    """Gaussian kernel on state vectors: exp(-|s1-s2|^2 / (2 sigma^2))."""
    v1, v2 = _state_vector(s1), _state_vector(s2)
    if v1.shape != v2.shape:
        raise ValueError("state dimension mismatch")
    d2 = float(np.sum((v1 - v2) ** 2))
    return float(np.exp(-d2 / (2.0 * state_bandwidth**2)))


def k_action(a1: GridFunction, a2: GridFunction, action_bandwidth: float) -> float:
    """Gaussian kernel on the quadrature L2 distance between grid functions."""
    if not a1.grid.compatible(a2.grid):
        raise ValueError("grid mismatch between actions")
    diff = a1.values - a2.values
    d2 = float(a1.grid.weights @ (diff * diff))
    return float(np.exp(-d2 / (2.0 * action_bandwidth**2)))


def k_tensor(s1, a1: GridFunction, s2, a2: GridFunction, spec: KernelSpec) -> float:
    return k_state(s1, s2, spec.state_bandwidth) * k_action(
        a1, a2, spec.action_bandwidth
    )


def _sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, clipped at zero."""
    xx = np.sum(x * x, axis=1)[:, None]
    yy = np.sum(y * y, axis=1)[None, :]
    d2 = xx + yy - 2.0 * (x @ y.T)
    return np.maximum(d2, 0.0)


def _weighted_actions(actions: np.ndarray, weights: np.ndarray) -> np.ndarray:
    # Scaling by sqrt(w) turns the quadrature L2 distance into Euclidean.
    return actions * np.sqrt(weights)[None, :]


def cross_gram(
    spec: KernelSpec,
    states1: np.ndarray,
    actions1: np.ndarray,
    states2: np.ndarray,
    actions2: np.ndarray,
    weights: np.ndarray,
) -> np.ndarray:
    """Tensor-product kernel matrix between two (state, action) collections."""
    ks = np.exp(-_sq_dists(states1, states2) / (2.0 * spec.state_bandwidth**2))
    a1 = _weighted_actions(actions1, weights)
    a2 = _weighted_actions(actions2, weights)
    ka = np.exp(-_sq_dists(a1, a2) / (2.0 * spec.action_bandwidth**2))
    return ks * ka


def gram_matrix(
    spec: KernelSpec,
    states: np.ndarray,
    actions: np.ndarray,
    weights: np.ndarray,
) -> np.ndarray:
    g = cross_gram(spec, states, actions, states, actions, weights)
    np.fill_diagonal(g, 1.0)
    return (g + g.T) / 2.0


def krr_fit_arrays(
    states: np.ndarray,
    actions: np.ndarray,
    weights: np.ndarray,
    targets: np.ndarray,
    ridge: float,
    spec: KernelSpec,
    train_indices: np.ndarray | None = None,
) -> KernelQ:
    """Solve alpha = (G + n*ridge*I)^{-1} y on pre-stacked arrays."""
    y = np.asarray(targets, dtype=float)
    n = states.shape[0]
    if n < 1 or y.shape != (n,):
        raise ValueError("need one target per training pair")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite")
    if ridge <= 0:
        raise ValueError("ridge must be positive")
    if n > MAX_TRAIN_SIZE:
        raise ValueError(
            f"{n} training pairs exceed the dense-solver limit of "
            f"{MAX_TRAIN_SIZE}; subsample the dataset or split the fit"
        )
    g = gram_matrix(spec, states, actions, weights)
    factor = cho_factor(g + n * ridge * np.eye(n), lower=True)
    alpha = cho_solve(factor, y)
    return KernelQ(
        train_states=np.asarray(states, dtype=float),
        train_actions=np.asarray(actions, dtype=float),
        action_weights=np.asarray(weights, dtype=float),
        alpha=alpha,
        spec=spec,
        train_indices=train_indices,
    )


def krr_fit(
    pairs: Sequence[tuple[State, GridFunction]],
    targets: Sequence[float],
    ridge: float,
    spec: KernelSpec,
) -> KernelQ:
    """Kernel ridge fit over (state, action) pairs.

    Minimizes (1/n) sum (g(x_i) - y_i)^2 + ridge * |g|^2 in the tensor
    RKHS; the solution is the kernel expansion with alpha solving
    (G + n*ridge*I) alpha = y.
    """
    if not pairs:
        raise ValueError("need at least one training pair")
    grid = pairs[0][1].grid
    for _, a in pairs:
        if not a.grid.compatible(grid):
            raise ValueError("all training actions must share one grid")
    states = np.array([_state_vector(s) for s, _ in pairs])
    actions = np.array([a.values for _, a in pairs])
    return krr_fit_arrays(states, actions, grid.weights, targets, ridge, spec)


def q_eval_batch(q: KernelQ, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Evaluate the fitted Q at rows of (states, actions)."""
    k = cross_gram(
        q.spec, states, actions, q.train_states, q.train_actions, q.action_weights
    )
    return k @ q.alpha


def q_eval(
    q: KernelQ,
    s,
    a: GridFunction,
    value_range: tuple[float, float] | None = None,
) -> float:
    """Single Q evaluation; optionally logs when outside the declared range.

    The range check is diagnostic only: the value is returned unclipped.
    """
    v = _state_vector(s)
    if v.shape[0] != q.train_states.shape[1]:
        raise ValueError("state dimension mismatch with training pairs")
    if a.values.shape[0] != q.train_actions.shape[1]:
        raise ValueError("action grid mismatch with training pairs")
    value = float(q_eval_batch(q, v[None, :], a.values[None, :])[0])
    if value_range is not None:
        lo, hi = value_range
        if value < lo - 1e-9 or value > hi + 1e-9:
            logger.warning(
                "Q value %.6g outside declared range [%g, %g]", value, lo, hi
            )
    return value


def q_grad_action_batch(
    q: KernelQ, states: np.ndarray, actions: np.ndarray
) -> np.ndarray:
    """Gradient of Q with respect to each action grid value, row-wise.

    d q(s, a) / d a_g = sum_j alpha_j k((s,a),(S_j,A_j)) *
    (-w_g (a_g - A_{j,g}) / sigma_A^2), from the Gaussian action kernel.
    """
    k = cross_gram(
        q.spec, states, actions, q.train_states, q.train_actions, q.action_weights
    )
    ka = k * q.alpha[None, :]
    row_sum = ka.sum(axis=1)
    scale = q.action_weights[None, :] / q.spec.action_bandwidth**2
    return -scale * (actions * row_sum[:, None] - ka @ q.train_actions)


def q_grad_action(q: KernelQ, s, a: GridFunction) -> GridFunction:
    """Gradient of q_eval with respect to the action's grid values."""
    if a.values.shape[0] != q.train_actions.shape[1]:
        raise ValueError("action grid mismatch with training pairs")
    v = _state_vector(s)
    grad = q_grad_action_batch(q, v[None, :], a.values[None, :])[0]
    return GridFunction(a.grid, grad)


def _median_positive(distances: np.ndarray, what: str) -> float:
    positive = distances[distances > 0]
    if positive.size == 0:
        raise ValueError(f"degenerate {what} distances: all pairs coincide")
    return float(np.median(positive))


def median_heuristic(
    dataset: Dataset, max_pairs: int = 2000, seed: int = 0
) -> KernelSpec:
    """Bandwidths from median pairwise distances over sampled index pairs.

    States should already be standardized by the caller. Zero distances
    (duplicate points) are ignored; if every sampled pair coincides the
    distances are degenerate and an error is raised.
    """
    states = dataset.states
    actions = _weighted_actions(dataset.actions, dataset.grid.weights)
    n = states.shape[0]
    if n < 2:
        raise ValueError("median heuristic needs at least 2 transitions")
    total = n * (n - 1) // 2
    if total <= max_pairs:
        iu = np.triu_indices(n, k=1)
        idx_a, idx_b = iu
    else:
        rng = np.random.default_rng(seed)
        idx_a = rng.integers(0, n, size=max_pairs)
        offset = rng.integers(1, n, size=max_pairs)
        idx_b = (idx_a + offset) % n
    ds = np.linalg.norm(states[idx_a] - states[idx_b], axis=1)
    da = np.linalg.norm(actions[idx_a] - actions[idx_b], axis=1)
    return KernelSpec(
        state_bandwidth=_median_positive(ds, "state"),
        action_bandwidth=_median_positive(da, "action"),
    )
