"""Shared data model: grids, grid functions, states, transitions, datasets.

All function-valued quantities live on a common grid over [0, 1] with
trapezoid quadrature weights, so L2 inner products, kernel distances and
integrals reduce to weighted vector operations.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Grid",
    "GridFunction",
    "State",
    "Transition",
    "Dataset",
    "RunConfig",
    "ScalingRecord",
    "trapezoid_weights",
    "standardize_states",
    "append_intercept",
    "save_dataset",
    "load_dataset",
]

# Full-precision float formatting used for every CSV the package writes, so
# that exported datasets re-ingest bit-identically.
FLOAT_FORMAT = "{:.17g}"


def format_float(x: float) -> str:
    return FLOAT_FORMAT.format(float(x))


def trapezoid_weights(points: Sequence[float]) -> np.ndarray:
    """Trapezoid quadrature weights for strictly increasing points on [0, 1].

    The weights are positive and sum to the interval length (1 for a grid
    spanning [0, 1]), and integrate affine functions exactly.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 1 or pts.size < 2:
        raise ValueError("grid needs at least 2 points")
    gaps = np.diff(pts)
    if np.any(gaps <= 0):
        raise ValueError("grid points must be strictly increasing")
    w = np.empty_like(pts)
    w[0] = gaps[0] / 2.0
    w[-1] = gaps[-1] / 2.0
    w[1:-1] = (gaps[:-1] + gaps[1:]) / 2.0
    return w


@dataclass(frozen=True, eq=False)
class Grid:
    """A fixed sampling grid on [0, 1] with trapezoid quadrature weights."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if pts.shape != w.shape:
            raise ValueError("points and weights must have the same length")
        if pts[0] != 0.0 or pts[-1] != 1.0:
            raise ValueError("grid must span [0, 1] exactly")
        if np.any(np.diff(pts) <= 0):
            raise ValueError("grid points must be strictly increasing")
        if np.any(w <= 0):
            raise ValueError("quadrature weights must be positive")
        if np.max(np.abs(w - trapezoid_weights(pts))) > 1e-12:
            raise ValueError("weights inconsistent with the trapezoid rule")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_points(cls, points: Sequence[float]) -> "Grid":
        pts = np.asarray(points, dtype=float)
        return cls(points=pts, weights=trapezoid_weights(pts))

    @classmethod
    def uniform(cls, n: int = 101) -> "Grid":
        return cls.from_points(np.linspace(0.0, 1.0, n))

    def __len__(self) -> int:
        return self.points.size

    def integrate(self, values: np.ndarray) -> float:
        return float(self.weights @ np.asarray(values, dtype=float))

    def compatible(self, other: "Grid") -> bool:
        return self is other or np.array_equal(self.points, other.points)


@dataclass(frozen=True, eq=False)
class GridFunction:
    """A function on [0, 1] stored as samples on a shared grid."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (len(self.grid),):
            raise ValueError("values must match the grid length")
        if not np.all(np.isfinite(vals)):
            raise ValueError("grid function values must be finite")
        object.__setattr__(self, "values", vals)

    def integrate(self) -> float:
        return self.grid.integrate(self.values)

    def l2_distance(self, other: "GridFunction") -> float:
        """Quadrature L2 distance; both functions must share the grid."""
        if not self.grid.compatible(other.grid):
            raise ValueError("grid mismatch between grid functions")
        diff = self.values - other.values
        return float(np.sqrt(self.grid.weights @ (diff * diff)))


@dataclass(frozen=True, eq=False)
class State:
    """A state vector; the application uses (glucose, BMI, SBP, DBP, sex, age)."""

    components: np.ndarray
    includes_intercept: bool = False

    def __post_init__(self):
        comps = np.atleast_1d(np.asarray(self.components, dtype=float))
        if comps.ndim != 1 or comps.size < 1:
            raise ValueError("state needs at least one component")
        if not np.all(np.isfinite(comps)):
            raise ValueError("state components must be finite")
        object.__setattr__(self, "components", comps)

    @property
    def dim(self) -> int:
        return self.components.size

    def with_intercept(self) -> "State":
        if self.includes_intercept:
            return self
        return State(np.append(self.components, 1.0), includes_intercept=True)


@dataclass(frozen=True, eq=False)
class Transition:
    """One observed tuple (S, A, R, S')."""

    state: State
    action: GridFunction
    reward: float
    next_state: State
    subject_id: str
    time_index: int

    def __post_init__(self):
        if not np.isfinite(self.reward):
            raise ValueError("reward must be finite")
        if self.state.dim != self.next_state.dim:
            raise ValueError("state and next_state dimensions differ")


@dataclass(frozen=True, eq=False)
class Dataset:
    """A flat list of transitions plus one initial state per subject.

    ``action_anchors`` optionally stores the quantile-function anchor q(0)
    for each transition's action; it is populated by the ingest pipeline for
    log-quantile-density actions and needed to map actions back to step
    counts.
    """

    transitions: tuple[Transition, ...]
    initial_states: tuple[State, ...]
    grid: Grid
    action_anchors: np.ndarray | None = None

    def __post_init__(self):
        if not self.transitions:
            raise ValueError("dataset must contain at least one transition")
        if not self.initial_states:
            raise ValueError("dataset must declare at least one initial state")
        object.__setattr__(self, "transitions", tuple(self.transitions))
        object.__setattr__(self, "initial_states", tuple(self.initial_states))
        p = self.transitions[0].state.dim
        for tr in self.transitions:
            if not tr.action.grid.compatible(self.grid):
                raise ValueError("all actions must share the dataset grid")
            if tr.state.dim != p:
                raise ValueError("all states must share one dimension")
        if self.action_anchors is not None:
            anchors = np.asarray(self.action_anchors, dtype=float)
            if anchors.shape != (len(self.transitions),):
                raise ValueError("need one action anchor per transition")
            object.__setattr__(self, "action_anchors", anchors)

    @classmethod
    def from_transitions(
        cls,
        transitions: Iterable[Transition],
        grid: Grid,
        initial_states: Sequence[State] | None = None,
        action_anchors: np.ndarray | None = None,
    ) -> "Dataset":
        """Build a dataset, deriving initial states from each subject's
        earliest transition when they are not given explicitly."""
        transitions = tuple(transitions)
        if initial_states is None:
            first: dict[str, Transition] = {}
            for tr in transitions:
                prev = first.get(tr.subject_id)
                if prev is None or tr.time_index < prev.time_index:
                    first[tr.subject_id] = tr
            initial_states = [first[sid].state for sid in sorted(first)]
        return cls(
            transitions=transitions,
            initial_states=tuple(initial_states),
            grid=grid,
            action_anchors=action_anchors,
        )

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def state_dim(self) -> int:
        return self.transitions[0].state.dim

    @cached_property
    def states(self) -> np.ndarray:
        return np.array([tr.state.components for tr in self.transitions])

    @cached_property
    def next_states(self) -> np.ndarray:
        return np.array([tr.next_state.components for tr in self.transitions])

    @cached_property
    def actions(self) -> np.ndarray:
        return np.array([tr.action.values for tr in self.transitions])

    @cached_property
    def rewards(self) -> np.ndarray:
        return np.array([tr.reward for tr in self.transitions])

    @cached_property
    def initial_state_matrix(self) -> np.ndarray:
        return np.array([s.components for s in self.initial_states])

    @cached_property
    def subject_ids(self) -> tuple[str, ...]:
        return tuple(sorted({tr.subject_id for tr in self.transitions}))

    @cached_property
    def subject_indices(self) -> np.ndarray:
        """Per-transition index of the subject in sorted subject order."""
        lookup = {sid: i for i, sid in enumerate(self.subject_ids)}
        return np.array([lookup[tr.subject_id] for tr in self.transitions])

    def subset_by_subjects(self, subjects: Iterable[str]) -> "Dataset":
        keep = set(subjects)
        idx = [i for i, tr in enumerate(self.transitions) if tr.subject_id in keep]
        if not idx:
            raise ValueError("subject subset selects no transitions")
        anchors = None
        if self.action_anchors is not None:
            anchors = self.action_anchors[idx]
        return Dataset.from_transitions(
            (self.transitions[i] for i in idx), self.grid, action_anchors=anchors
        )


@dataclass(frozen=True)
class ScalingRecord:
    """Per-component affine scaling (x - mean) / scale, with constants flagged.

    Constant components keep scale 1 and mean 0 so they pass through
    untouched; ``constant`` records which components were flagged.
    """

    means: np.ndarray
    scales: np.ndarray
    constant: np.ndarray

    def apply(self, components: np.ndarray) -> np.ndarray:
        return (np.asarray(components, dtype=float) - self.means) / self.scales

    def invert(self, components: np.ndarray) -> np.ndarray:
        return np.asarray(components, dtype=float) * self.scales + self.means

    def apply_state(self, state: State) -> State:
        return State(self.apply(state.components), state.includes_intercept)

    def invert_state(self, state: State) -> State:
        return State(self.invert(state.components), state.includes_intercept)

    @classmethod
    def identity(cls, dim: int) -> "ScalingRecord":
        return cls(
            means=np.zeros(dim),
            scales=np.ones(dim),
            constant=np.zeros(dim, dtype=bool),
        )

    def to_dict(self) -> dict:
        return {
            "means": self.means.tolist(),
            "scales": self.scales.tolist(),
            "constant": self.constant.astype(bool).tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScalingRecord":
        return cls(
            means=np.asarray(data["means"], dtype=float),
            scales=np.asarray(data["scales"], dtype=float),
            constant=np.asarray(data["constant"], dtype=bool),
        )


def standardize_states(dataset: Dataset) -> tuple[Dataset, ScalingRecord]:
    """Rescale every state component to mean 0, variance 1 over all transitions.

    Moments are computed from the transition states S_{i,t}; the same affine
    map is applied to next states and initial states. Zero-variance
    components are flagged and left untouched.
    """
    stacked = dataset.states
    means = stacked.mean(axis=0)
    scales = stacked.std(axis=0)
    constant = scales < 1e-12
    means = np.where(constant, 0.0, means)
    scales = np.where(constant, 1.0, scales)
    record = ScalingRecord(means=means, scales=scales, constant=constant)

    transitions = tuple(
        Transition(
            state=record.apply_state(tr.state),
            action=tr.action,
            reward=tr.reward,
            next_state=record.apply_state(tr.next_state),
            subject_id=tr.subject_id,
            time_index=tr.time_index,
        )
        for tr in dataset.transitions
    )
    initial = tuple(record.apply_state(s) for s in dataset.initial_states)
    scaled = Dataset(
        transitions=transitions,
        initial_states=initial,
        grid=dataset.grid,
        action_anchors=dataset.action_anchors,
    )
    return scaled, record


def append_intercept(dataset: Dataset) -> Dataset:
    """Append a constant-1 component to every state in the dataset."""
    transitions = tuple(
        Transition(
            state=tr.state.with_intercept(),
            action=tr.action,
            reward=tr.reward,
            next_state=tr.next_state.with_intercept(),
            subject_id=tr.subject_id,
            time_index=tr.time_index,
        )
        for tr in dataset.transitions
    )
    initial = tuple(s.with_intercept() for s in dataset.initial_states)
    return Dataset(
        transitions=transitions,
        initial_states=initial,
        grid=dataset.grid,
        action_anchors=dataset.action_anchors,
    )


@dataclass(frozen=True)
class RunConfig:
    """Run-level configuration shared by the evaluation and optimization loops.

    ``ridge`` is the kernel ridge penalty (held constant across iterations)
    and ``roughness_weight`` the policy smoothness penalty. Bandwidths of
    None are filled by the median heuristic, scaled by ``bandwidth_scale``.
    ``reward_max`` declares the reward upper bound used for Q-range
    diagnostics (1 for the library contract, 2 for the tanh-shaped
    application reward).
    """

    gamma: float = 0.8
    iterations: int = 50
    mc_samples: int = 100
    seed: int = 0
    ridge: float = 1e-3
    roughness_weight: float = 1e-3
    state_bandwidth: float | None = None
    action_bandwidth: float | None = None
    bandwidth_scale: float = 1.0
    reward_max: float = 1.0
    threads: int = 1

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.ridge <= 0:
            raise ValueError("ridge must be positive")
        if self.roughness_weight < 0:
            raise ValueError("roughness_weight must be non-negative")
        if self.reward_max <= 0:
            raise ValueError("reward_max must be positive")

    @property
    def q_upper_bound(self) -> float:
        return self.reward_max / (1.0 - self.gamma)

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "iterations": self.iterations,
            "mc_samples": self.mc_samples,
            "seed": self.seed,
            "ridge": self.ridge,
            "roughness_weight": self.roughness_weight,
            "state_bandwidth": self.state_bandwidth,
            "action_bandwidth": self.action_bandwidth,
            "bandwidth_scale": self.bandwidth_scale,
            "reward_max": self.reward_max,
            "threads": self.threads,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f: data[f] for f in cls.__dataclass_fields__ if f in data}
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**known)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def from_json(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Dataset CSV round trip
#
# <stem>_transitions.csv : subject_id, time_index, state_1..p, reward,
#                          next_state_1..p
# <stem>_actions.csv     : one row per transition, one column per grid point
# <stem>_grid.csv        : single line of grid points
# <stem>_anchors.csv     : optional, one q(0) anchor per transition
# ---------------------------------------------------------------------------


def _dataset_paths(directory: str | Path, stem: str) -> dict[str, Path]:
    d = Path(directory)
    return {
        "transitions": d / f"{stem}_transitions.csv",
        "actions": d / f"{stem}_actions.csv",
        "grid": d / f"{stem}_grid.csv",
        "anchors": d / f"{stem}_anchors.csv",
    }


def save_dataset(dataset: Dataset, directory: str | Path, stem: str = "dataset") -> list[Path]:
    """Write the dataset CSV bundle; returns the written paths."""
    paths = _dataset_paths(directory, stem)
    Path(directory).mkdir(parents=True, exist_ok=True)
    p = dataset.state_dim

    with paths["transitions"].open("w", newline="") as fh:
        writer = csv.writer(fh)
        header = (
            ["subject_id", "time_index"]
            + [f"state_{j + 1}" for j in range(p)]
            + ["reward"]
            + [f"next_state_{j + 1}" for j in range(p)]
        )
        writer.writerow(header)
        for tr in dataset.transitions:
            row = [tr.subject_id, str(tr.time_index)]
            row += [format_float(x) for x in tr.state.components]
            row.append(format_float(tr.reward))
            row += [format_float(x) for x in tr.next_state.components]
            writer.writerow(row)

    with paths["actions"].open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"g{j + 1}" for j in range(len(dataset.grid))])
        for tr in dataset.transitions:
            writer.writerow([format_float(x) for x in tr.action.values])

    with paths["grid"].open("w", newline="") as fh:
        fh.write(",".join(format_float(x) for x in dataset.grid.points) + "\n")

    written = [paths["transitions"], paths["actions"], paths["grid"]]
    if dataset.action_anchors is not None:
        with paths["anchors"].open("w", newline="") as fh:
            fh.write("q0\n")
            for a in dataset.action_anchors:
                fh.write(format_float(a) + "\n")
        written.append(paths["anchors"])
    return written


def load_dataset(directory: str | Path, stem: str = "dataset") -> Dataset:
    """Read a dataset CSV bundle written by :func:`save_dataset`."""
    paths = _dataset_paths(directory, stem)
    for key in ("transitions", "actions", "grid"):
        if not paths[key].exists():
            raise FileNotFoundError(f"missing dataset file: {paths[key]}")

    grid = Grid.from_points(
        [float(x) for x in paths["grid"].read_text().strip().split(",")]
    )

    with paths["actions"].open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        action_rows = [np.array([float(x) for x in row]) for row in reader]

    anchors = None
    if paths["anchors"].exists():
        lines = paths["anchors"].read_text().strip().splitlines()[1:]
        anchors = np.array([float(x) for x in lines])

    transitions = []
    with paths["transitions"].open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_state = sum(1 for h in header if h.startswith("state_"))
        for i, row in enumerate(reader):
            sid = row[0]
            t = int(row[1])
            state = np.array([float(x) for x in row[2 : 2 + n_state]])
            reward = float(row[2 + n_state])
            nxt = np.array([float(x) for x in row[3 + n_state : 3 + 2 * n_state]])
            transitions.append(
                Transition(
                    state=State(state),
                    action=GridFunction(grid, action_rows[i]),
                    reward=reward,
                    next_state=State(nxt),
                    subject_id=sid,
                    time_index=t,
                )
            )
    if len(transitions) != len(action_rows):
        raise ValueError("transition and action row counts differ")
    return Dataset.from_transitions(transitions, grid, action_anchors=anchors)
