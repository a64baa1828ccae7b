"""Functional policy optimization: penalized fitted-Q iteration.

Each outer iteration (i) computes Bellman targets with the previous policy
plugged in, so no per-sample maximization ever happens, (ii) refits the
Q-function by kernel ridge regression, and (iii) improves a functional
linear policy pi(s)(u) = B(u)^T C^T s by gradient ascent on the dataset-
averaged Q minus a roughness penalty eta * tr(C R C^T Sigma_s).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .bspline import BSplineBasis, basis_matrix, penalty_matrix
from .core import (
    Dataset,
    Grid,
    GridFunction,
    RunConfig,
    ScalingRecord,
    State,
    standardize_states,
)
from .fqe import PolicyHandle, derive_rng, fqe_run
from .kernel import KernelQ, KernelSpec, gram_matrix, median_heuristic

__all__ = [
    "FunctionalLinearPolicy",
    "FqiResult",
    "HyperparamSelection",
    "policy_eval",
    "roughness",
    "policy_objective",
    "policy_gradient",
    "policy_update",
    "fqi_run",
    "select_hyperparams",
]


@dataclass(frozen=True, eq=False)
class FunctionalLinearPolicy:
    """pi(s)(u) = B(u)^T coef^T s over a cubic B-spline basis.

    ``coef`` has one row per policy-state component. When ``scaling`` and
    ``intercept`` are set, raw states are standardized and extended with a
    constant-1 component before the coefficient matrix applies; without
    them the policy operates on the given components directly.
    """

    coef: np.ndarray
    basis: BSplineBasis
    grid: Grid
    scaling: ScalingRecord | None = None
    intercept: bool = False

    def __post_init__(self):
        coef = np.asarray(self.coef, dtype=float)
        if coef.ndim != 2 or coef.shape[1] != self.basis.dimension:
            raise ValueError("coef must be (p, K) for the basis dimension K")
        if not np.all(np.isfinite(coef)):
            raise ValueError("coef must be finite")
        object.__setattr__(self, "coef", coef)

    @cached_property
    def _basis_on_grid(self) -> np.ndarray:
        return basis_matrix(self.basis, self.grid.points)

    def prepare(self, state: State) -> np.ndarray:
        """Map a raw state into the coordinates the coefficients act on."""
        comps = state.components
        if self.scaling is not None:
            comps = self.scaling.apply(comps)
        if self.intercept and not state.includes_intercept:
            comps = np.append(comps, 1.0)
        if comps.size != self.coef.shape[0]:
            raise ValueError("state dimension does not match policy coefficients")
        return comps

    def action_values(self, prepared: np.ndarray) -> np.ndarray:
        return (prepared @ self.coef) @ self._basis_on_grid.T

    def action_for_raw(self, state: State) -> GridFunction:
        return GridFunction(self.grid, self.action_values(self.prepare(state)))

    def as_policy_handle(self) -> PolicyHandle:
        return PolicyHandle.deterministic(self.action_for_raw)

    def to_json(self, path: str | Path) -> None:
        data = {
            "coef": self.coef.tolist(),
            "basis": self.basis.to_dict(),
            "grid_points": self.grid.points.tolist(),
            "scaling": None if self.scaling is None else self.scaling.to_dict(),
            "intercept": self.intercept,
        }
        Path(path).write_text(json.dumps(data, indent=2, sort_keys=True))

    @classmethod
    def from_json(cls, path: str | Path) -> "FunctionalLinearPolicy":
        data = json.loads(Path(path).read_text())
        scaling = data.get("scaling")
        return cls(
            coef=np.asarray(data["coef"], dtype=float),
            basis=BSplineBasis.from_dict(data["basis"]),
            grid=Grid.from_points(data["grid_points"]),
            scaling=None if scaling is None else ScalingRecord.from_dict(scaling),
            intercept=bool(data["intercept"]),
        )


def policy_eval(policy: FunctionalLinearPolicy, state: State) -> GridFunction:
    """Evaluate the B-spline expansion at a state already in policy coordinates."""
    comps = state.components
    if comps.size != policy.coef.shape[0]:
        raise ValueError("state dimension does not match policy coefficients")
    return GridFunction(policy.grid, policy.action_values(comps))


def roughness(policy: FunctionalLinearPolicy, sigma_s: np.ndarray) -> float:
    """tr(C R C^T Sigma_s): the state-averaged integrated squared second
    derivative of the policy's output functions."""
    r = penalty_matrix(policy.basis)
    return _roughness(policy.coef, r, np.asarray(sigma_s, dtype=float))


def _roughness(coef: np.ndarray, r: np.ndarray, sigma_s: np.ndarray) -> float:
    return float(np.trace(coef @ r @ coef.T @ sigma_s))


class _PolicyOptimizer:
    """Objective, gradient and Armijo ascent for the policy-update step.

    The state factor of the tensor kernel between evaluation states and
    training pairs does not depend on the coefficient matrix, so it is
    computed once; only the action factor is rebuilt per candidate.
    """

    def __init__(
        self,
        q: KernelQ,
        next_states: np.ndarray,
        basis: BSplineBasis,
        grid: Grid,
        sigma_s: np.ndarray,
        eta: float,
        policy_states: np.ndarray | None = None,
    ):
        """``next_states`` are in the Q-function's (kernel) coordinates;
        ``policy_states`` are the same states in the coordinates the
        coefficient matrix acts on (defaults to ``next_states``)."""
        if eta < 0:
            raise ValueError("roughness weight must be non-negative")
        self.alpha = q.alpha
        self.spec = q.spec
        self.train_actions = q.train_actions
        kernel_states = np.asarray(next_states, dtype=float)
        self.states = (
            kernel_states
            if policy_states is None
            else np.asarray(policy_states, dtype=float)
        )
        self.basis_on_grid = basis_matrix(basis, grid.points)
        self.penalty = penalty_matrix(basis)
        self.sigma_s = np.asarray(sigma_s, dtype=float)
        self.eta = eta
        sw = np.sqrt(q.action_weights)
        self._sw = sw[None, :]
        self._train_w = q.train_actions * self._sw
        self._train_w_sq = np.sum(self._train_w**2, axis=1)[None, :]
        d2 = (
            np.sum(kernel_states**2, axis=1)[:, None]
            + np.sum(q.train_states**2, axis=1)[None, :]
            - 2.0 * kernel_states @ q.train_states.T
        )
        self.state_part = np.exp(
            -np.maximum(d2, 0.0) / (2.0 * q.spec.state_bandwidth**2)
        )
        self.grad_scale = q.action_weights[None, :] / q.spec.action_bandwidth**2

    def update_alpha(self, alpha: np.ndarray) -> None:
        self.alpha = alpha

    def _actions(self, coef: np.ndarray) -> np.ndarray:
        return (self.states @ coef) @ self.basis_on_grid.T

    def _kernel_rows(self, actions: np.ndarray) -> np.ndarray:
        aw = actions * self._sw
        d2 = (
            np.sum(aw**2, axis=1)[:, None]
            + self._train_w_sq
            - 2.0 * aw @ self._train_w.T
        )
        return self.state_part * np.exp(
            -np.maximum(d2, 0.0) / (2.0 * self.spec.action_bandwidth**2)
        )

    def objective(self, coef: np.ndarray) -> float:
        values = self._kernel_rows(self._actions(coef)) @ self.alpha
        return float(values.mean()) - self.eta * _roughness(
            coef, self.penalty, self.sigma_s
        )

    def objective_and_gradient(self, coef: np.ndarray) -> tuple[float, np.ndarray]:
        actions = self._actions(coef)
        k = self._kernel_rows(actions)
        ka = k * self.alpha[None, :]
        row_sum = ka.sum(axis=1)
        action_grads = -self.grad_scale * (
            actions * row_sum[:, None] - ka @ self.train_actions
        )
        n = self.states.shape[0]
        grad = (self.states.T @ action_grads @ self.basis_on_grid) / n
        grad -= 2.0 * self.eta * self.sigma_s @ coef @ self.penalty
        value = float(row_sum.mean()) - self.eta * _roughness(
            coef, self.penalty, self.sigma_s
        )
        return value, grad

    def gradient(self, coef: np.ndarray) -> np.ndarray:
        return self.objective_and_gradient(coef)[1]

    def maximize(
        self,
        coef_init: np.ndarray,
        grad_tol: float = 1e-5,
        max_steps: int = 500,
    ) -> tuple[np.ndarray, float, int]:
        """Backtracking-Armijo gradient ascent; monotone in the objective.

        The trial step each iteration comes from the Barzilai-Borwein
        secant estimate (safeguarded by the Armijo backtracking), which
        handles the badly conditioned directions of the kernel objective.
        """
        coef = np.asarray(coef_init, dtype=float).copy()
        value, grad = self.objective_and_gradient(coef)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            raise ValueError("non-finite policy objective or gradient")
        step = 1.0
        steps_taken = 0
        prev_coef = None
        prev_grad = None
        for _ in range(max_steps):
            gnorm_sq = float(np.sum(grad * grad))
            if np.sqrt(gnorm_sq) < grad_tol:
                break
            if prev_grad is not None:
                dc = coef - prev_coef
                dg = grad - prev_grad
                denom = float(np.sum(dg * dg))
                if denom > 0:
                    step = abs(float(np.sum(dc * dg))) / denom
            step = float(np.clip(step, 1e-12, 1e8))
            accepted = False
            while step > 1e-16:
                candidate = coef + step * grad
                cand_value = self.objective(candidate)
                if cand_value >= value + 1e-4 * step * gnorm_sq:
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                break
            prev_coef, prev_grad = coef, grad
            coef = candidate
            steps_taken += 1
            value, grad = self.objective_and_gradient(coef)
        return coef, value, steps_taken


def policy_objective(
    coef: np.ndarray,
    q: KernelQ,
    next_states: np.ndarray,
    basis: BSplineBasis,
    grid: Grid,
    sigma_s: np.ndarray,
    eta: float,
) -> float:
    """Mean Q over next states under the coefficient matrix, minus the
    roughness penalty."""
    return _PolicyOptimizer(q, next_states, basis, grid, sigma_s, eta).objective(coef)


def policy_gradient(
    coef: np.ndarray,
    q: KernelQ,
    next_states: np.ndarray,
    basis: BSplineBasis,
    grid: Grid,
    sigma_s: np.ndarray,
    eta: float,
) -> np.ndarray:
    return _PolicyOptimizer(q, next_states, basis, grid, sigma_s, eta).gradient(coef)


def policy_update(
    q: KernelQ,
    next_states: np.ndarray,
    basis: BSplineBasis,
    grid: Grid,
    sigma_s: np.ndarray,
    eta: float,
    coef_init: np.ndarray,
    grad_tol: float = 1e-5,
    max_steps: int = 500,
) -> np.ndarray:
    """One policy-update solve: gradient ascent from ``coef_init``."""
    if eta <= 0:
        raise ValueError("roughness weight must be positive for policy updates")
    opt = _PolicyOptimizer(q, next_states, basis, grid, sigma_s, eta)
    coef, _, _ = opt.maximize(coef_init, grad_tol=grad_tol, max_steps=max_steps)
    return coef


@dataclass(frozen=True, eq=False)
class FqiResult:
    """Learned policy plus per-iteration diagnostics."""

    policy: FunctionalLinearPolicy
    q_hat: KernelQ
    objectives: np.ndarray
    policy_changes: np.ndarray
    residuals: np.ndarray
    spec: KernelSpec
    scaling: ScalingRecord
    diverged: bool
    optimizer_calls: int


def fqi_run(
    dataset: Dataset,
    config: RunConfig,
    spec: KernelSpec | None = None,
    basis: BSplineBasis | None = None,
) -> FqiResult:
    """Run penalized fitted-Q iteration and return the final policy.

    States are standardized internally; the kernel sees standardized states
    while the policy acts on standardized states with an appended intercept.
    The first iteration's policy solve is repeated from three seeded random
    restarts (plus the zero warm start) and the best objective kept; later
    iterations warm-start at the previous coefficients.
    """
    if basis is None:
        basis = BSplineBasis.cubic(2)
    scaled, scaling = standardize_states(dataset)
    if spec is None:
        base = median_heuristic(scaled, seed=config.seed)
        spec = KernelSpec(
            state_bandwidth=base.state_bandwidth * config.bandwidth_scale,
            action_bandwidth=base.action_bandwidth * config.bandwidth_scale,
        )

    states = scaled.states
    actions = scaled.actions
    weights = scaled.grid.weights
    rewards = scaled.rewards
    n = states.shape[0]
    ones = np.ones((n, 1))
    pol_states = np.hstack([states, ones])
    pol_next = np.hstack([scaled.next_states, ones])
    sigma_s = pol_states.T @ pol_states / n

    gram = gram_matrix(spec, states, actions, weights)
    factor = cho_factor(gram + n * config.ridge * np.eye(n), lower=True)

    p_pol = pol_states.shape[1]
    k_dim = basis.dimension
    coef = np.zeros((p_pol, k_dim))
    alpha = np.zeros(n)
    q_hat = KernelQ(
        train_states=states,
        train_actions=actions,
        action_weights=weights,
        alpha=alpha,
        spec=spec,
        train_indices=np.arange(n),
    )
    optimizer = _PolicyOptimizer(
        q_hat,
        scaled.next_states,
        basis,
        scaled.grid,
        sigma_s,
        config.roughness_weight,
        policy_states=pol_next,
    )

    # Data-informed restart anchor for the first iteration: the kernel (and
    # its gradient) vanish far from the behavior action cloud, so starting
    # only at C = 0 strands the search when actions are not centered near
    # zero (as with log-quantile-density curves). The anchor puts the
    # quadrature least-squares projection of the mean behavior action in the
    # intercept row; perturbations are scaled by the action spread.
    mean_action = actions.mean(axis=0)
    b_grid = basis_matrix(basis, scaled.grid.points)
    b_weighted = b_grid * weights[:, None]
    mean_coef = np.linalg.solve(b_grid.T @ b_weighted, b_weighted.T @ mean_action)
    anchor = np.zeros((p_pol, k_dim))
    anchor[-1] = mean_coef
    spread = float(np.sqrt(np.mean((actions - mean_action[None, :]) ** 2)))
    restart_scale = max(spread, 1e-3) / np.sqrt(p_pol)

    objectives = np.empty(config.iterations)
    policy_changes = np.empty(config.iterations)
    residuals = np.empty(config.iterations)
    optimizer_calls = 0
    consecutive_drops = 0
    diverged = False

    for m in range(config.iterations):
        # Target update: plug the previous policy into the previous Q; no
        # per-sample maximization happens anywhere in the loop.
        if m == 0:
            expected_next = np.zeros(n)
        else:
            next_actions = (pol_next @ coef) @ optimizer.basis_on_grid.T
            expected_next = optimizer._kernel_rows(next_actions) @ alpha
        targets = rewards + config.gamma * expected_next

        alpha = cho_solve(factor, targets)
        residuals[m] = float(np.sqrt(np.mean((gram @ alpha - targets) ** 2)))
        optimizer.update_alpha(alpha)

        if m == 0:
            best = None
            starts = [coef, anchor]
            for r in range(2):
                rng = derive_rng(config.seed, 3, r)
                starts.append(
                    anchor + restart_scale * rng.standard_normal((p_pol, k_dim))
                )
            for start in starts:
                cand, cand_obj, _ = optimizer.maximize(start)
                optimizer_calls += 1
                if best is None or cand_obj > best[1]:
                    best = (cand, cand_obj)
            new_coef, obj = best
        else:
            new_coef, obj, _ = optimizer.maximize(coef)
            optimizer_calls += 1

        objectives[m] = obj
        policy_changes[m] = float(np.linalg.norm(new_coef - coef))
        coef = new_coef

        if m > 0 and objectives[m] < objectives[m - 1] - 1e-12:
            consecutive_drops += 1
            if consecutive_drops >= 5:
                diverged = True
        else:
            consecutive_drops = 0

    q_hat = KernelQ(
        train_states=states,
        train_actions=actions,
        action_weights=weights,
        alpha=alpha,
        spec=spec,
        train_indices=np.arange(n),
    )
    policy = FunctionalLinearPolicy(
        coef=coef,
        basis=basis,
        grid=scaled.grid,
        scaling=scaling,
        intercept=True,
    )
    return FqiResult(
        policy=policy,
        q_hat=q_hat,
        objectives=objectives,
        policy_changes=policy_changes,
        residuals=residuals,
        spec=spec,
        scaling=scaling,
        diverged=diverged,
        optimizer_calls=optimizer_calls,
    )


@dataclass(frozen=True)
class HyperparamSelection:
    """Chosen hyper-parameters plus the scored candidate table."""

    ridge: float
    roughness_weight: float
    bandwidth_scale: float
    table: tuple[dict, ...]

    def to_dict(self) -> dict:
        return {
            "ridge": self.ridge,
            "roughness_weight": self.roughness_weight,
            "bandwidth_scale": self.bandwidth_scale,
            "table": list(self.table),
        }


def select_hyperparams(
    dataset: Dataset,
    ridge_grid,
    roughness_grid,
    bandwidth_grid,
    config: RunConfig,
) -> HyperparamSelection:
    """Validation-split hyper-parameter selection.

    Subjects are split 1:1 into training and validation halves (seeded).
    Each candidate is scored by fitting the policy on the training half and
    estimating its value on the validation half with fitted-Q evaluation.
    Exact ties break toward larger roughness weight, then larger ridge,
    then larger bandwidth scale (the smoother fit).
    """
    subjects = list(dataset.subject_ids)
    if len(subjects) < 2:
        raise ValueError("hyper-parameter selection needs at least 2 subjects")
    rng = derive_rng(config.seed, 7)
    order = rng.permutation(len(subjects))
    half = (len(subjects) + 1) // 2
    train_ids = [subjects[i] for i in order[:half]]
    val_ids = [subjects[i] for i in order[half:]]
    train = dataset.subset_by_subjects(train_ids)
    val = dataset.subset_by_subjects(val_ids)

    candidates = [
        (ridge, rough, bw)
        for bw in bandwidth_grid
        for ridge in ridge_grid
        for rough in roughness_grid
    ]
    if not candidates:
        raise ValueError("empty hyper-parameter grid")

    best_key = None
    best_choice = None
    table = []
    for ridge, rough, bw in candidates:
        cfg = replace(
            config, ridge=ridge, roughness_weight=rough, bandwidth_scale=bw
        )
        fit = fqi_run(train, cfg)
        score = fqe_run(val, fit.policy.as_policy_handle(), cfg).value_estimate
        table.append(
            {
                "ridge": ridge,
                "roughness_weight": rough,
                "bandwidth_scale": bw,
                "validation_value": score,
            }
        )
        key = (score, rough, ridge, bw)
        if best_key is None or key > best_key:
            best_key = key
            best_choice = (ridge, rough, bw)

    ridge, rough, bw = best_choice
    return HyperparamSelection(
        ridge=ridge,
        roughness_weight=rough,
        bandwidth_scale=bw,
        table=tuple(table),
    )
