"""Learned-vs-behavior comparison reports.

Evaluates a learned policy at every decision point of an ingested dataset,
converts the LQD actions back to quantile functions of daily steps (the
behavior actions with their stored anchors, the learned actions with
nearest-neighbor anchors), and writes CSVs plus SVG figures: the quantile
curves of per-window mean daily steps, and per-subgroup mean quantile
functions with activity-period markers.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Callable

import numpy as np

from .core import Dataset, GridFunction, format_float
from .density import LqdFunction, anchor_from_neighbors, lqd_inverse
from .fqi import FunctionalLinearPolicy
from .ingest import discretize
from .svgplot import Series, line_plot

__all__ = ["report_bundle", "behavior_replay_provider", "policy_provider"]

GLOBAL_MARKERS = (0.33, 0.50, 0.66)
SUBGROUP_MARKERS = (0.33, 0.67)

ActionProvider = Callable[[Dataset, int], tuple[np.ndarray, float]]


def behavior_replay_provider(dataset: Dataset) -> ActionProvider:
    """Replays the stored behavior actions; curves then coincide exactly."""

    def provide(ds: Dataset, i: int) -> tuple[np.ndarray, float]:
        return ds.transitions[i].action.values, float(ds.action_anchors[i])

    return provide


def policy_provider(
    policy: FunctionalLinearPolicy, dataset: Dataset, neighbors: int = 10
) -> ActionProvider:
    """Evaluates the policy and anchors its LQD output by the mean q(0) of
    the nearest dataset states (distances in standardized coordinates)."""
    if policy.scaling is not None:
        ref_states = np.array(
            [policy.scaling.apply(tr.state.components) for tr in dataset.transitions]
        )
    else:
        ref_states = dataset.states
    anchors = dataset.action_anchors

    def provide(ds: Dataset, i: int) -> tuple[np.ndarray, float]:
        state = ds.transitions[i].state
        values = policy.action_for_raw(state).values
        query = (
            policy.scaling.apply(state.components)
            if policy.scaling is not None
            else state.components
        )
        q0 = anchor_from_neighbors(query, ref_states, anchors, k=neighbors)
        return values, q0

    return provide


def _quantile_curve(dataset: Dataset, values: np.ndarray, q0: float) -> np.ndarray:
    lqd = LqdFunction(GridFunction(dataset.grid, values), q0=q0)
    quantile, _ = lqd_inverse(lqd)
    return quantile.values


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [x if isinstance(x, str) else format_float(x) for x in row]
            )


def report_bundle(
    dataset: Dataset,
    provider: ActionProvider,
    outdir: str | Path,
) -> list[Path]:
    """Write the comparison bundle; returns the list of written files.

    The dataset must carry action anchors (produced by the ingest
    pipeline); ``provider`` yields the learned action and anchor for each
    transition (see :func:`policy_provider` / :func:`behavior_replay_provider`).
    """
    if dataset.action_anchors is None:
        raise ValueError(
            "report needs a dataset with action anchors (ingest output)"
        )
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    n = len(dataset)
    grid = dataset.grid
    learned_q = np.empty((n, len(grid)))
    behavior_q = np.empty((n, len(grid)))
    for i in range(n):
        values, q0 = provider(dataset, i)
        learned_q[i] = _quantile_curve(dataset, values, q0)
        behavior_q[i] = _quantile_curve(
            dataset, dataset.transitions[i].action.values, float(dataset.action_anchors[i])
        )

    # (a) quantile functions of per-window mean daily steps
    learned_mu = learned_q @ grid.weights
    behavior_mu = behavior_q @ grid.weights
    levels = grid.points
    learned_mu_q = np.quantile(learned_mu, levels)
    behavior_mu_q = np.quantile(behavior_mu, levels)
    path = outdir / "global_mu_quantiles.csv"
    _write_csv(
        path,
        ["p", "learned_mu_quantile", "behavior_mu_quantile"],
        [[p, a, b] for p, a, b in zip(levels, learned_mu_q, behavior_mu_q)],
    )
    written.append(path)
    written.append(
        line_plot(
            outdir / "global_mu_quantiles.svg",
            [
                Series(levels, learned_mu_q, "#cc2222", "learned"),
                Series(levels, behavior_mu_q, "#222222", "behavior"),
            ],
            title="Quantile functions of 90-day mean daily steps",
            xlabel="quantile level p",
            ylabel="steps/day",
            vlines=GLOBAL_MARKERS,
        )
    )

    # (b) per-subgroup mean quantile curves
    labels = [discretize(tr.state) for tr in dataset.transitions]
    covariates: dict[str, dict[str, list[int]]] = {}
    for i, state_labels in enumerate(labels):
        for cov, level in state_labels:
            covariates.setdefault(cov, {}).setdefault(level, []).append(i)

    curve_rows: list[list] = []
    marker_rows: list[list] = []
    count_rows: list[list] = []
    for cov in sorted(covariates):
        series = []
        palette = ("#cc2222", "#2255cc", "#22aa55", "#aa7722")
        for j, level in enumerate(sorted(covariates[cov])):
            idx = covariates[cov][level]
            subjects = {dataset.transitions[i].subject_id for i in idx}
            mean_learned = learned_q[idx].mean(axis=0)
            mean_behavior = behavior_q[idx].mean(axis=0)
            count_rows.append([cov, level, len(idx), len(subjects)])
            for p, a, b in zip(levels, mean_learned, mean_behavior):
                curve_rows.append([cov, level, p, a, b])
            for p in SUBGROUP_MARKERS:
                marker_rows.append(
                    [
                        cov,
                        level,
                        p,
                        float(np.interp(p, levels, mean_learned)),
                        float(np.interp(p, levels, mean_behavior)),
                    ]
                )
            color = palette[j % len(palette)]
            series.append(Series(levels, mean_learned, color, f"{level} learned"))
            series.append(
                Series(levels, mean_behavior, color, f"{level} behavior", width=0.8)
            )
        written.append(
            line_plot(
                outdir / f"subgroup_{cov}.svg",
                series,
                title=f"Mean quantile functions by {cov}",
                xlabel="quantile level p",
                ylabel="steps/day",
                vlines=SUBGROUP_MARKERS,
            )
        )

    path = outdir / "subgroup_quantiles.csv"
    _write_csv(
        path,
        ["covariate", "level", "p", "learned_mean", "behavior_mean"],
        curve_rows,
    )
    written.append(path)

    path = outdir / "subgroup_markers.csv"
    _write_csv(
        path,
        ["covariate", "level", "p", "learned_steps", "behavior_steps"],
        marker_rows,
    )
    written.append(path)

    path = outdir / "subgroup_counts.csv"
    _write_csv(
        path,
        ["covariate", "level", "n_transitions", "n_subjects"],
        count_rows,
    )
    written.append(path)
    return written
