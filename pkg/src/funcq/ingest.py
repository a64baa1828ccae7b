"""Raw CSVs to transition datasets: cleaning, windows, LOCF, actions.

The pipeline mirrors the cohort construction: daily steps are cleaned with
fixed plausibility and outlier thresholds, each subject's record is cut into
consecutive 90-day windows inside a 990-day observation period anchored at
the first glucose measurement, biomarkers are aligned to window boundaries
by last observation carried forward, and each window's step distribution
becomes an LQD-encoded functional action.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd

from .core import Dataset, Grid, GridFunction, State, Transition
from .density import LqdFunction, StepSample, kde, lqd_forward, mean_steps
from .reward import (
    STATE_AGE,
    STATE_BMI,
    STATE_DBP,
    STATE_GLUCOSE,
    STATE_SBP,
    STATE_SEX,
    RiskTables,
    shaped_reward_from_mean,
)

__all__ = [
    "STEP_IMPLAUSIBLE_LOW",
    "STEP_IMPLAUSIBLE_HIGH",
    "STEP_OUTLIER",
    "WINDOW_DAYS",
    "OBSERVATION_DAYS",
    "SubgroupLabel",
    "IngestReport",
    "clean_steps",
    "build_windows",
    "locf_align",
    "assemble_transitions",
    "ingest_pipeline",
    "discretize",
]

# Step cleaning thresholds: implausible below 100 or above 50,000 steps/day,
# then IQR-derived outliers above 22,300 steps/day.
STEP_IMPLAUSIBLE_LOW = 100.0
STEP_IMPLAUSIBLE_HIGH = 50_000.0
STEP_OUTLIER = 22_300.0

WINDOW_DAYS = 90
OBSERVATION_DAYS = 990
MAX_WINDOWS = OBSERVATION_DAYS // WINDOW_DAYS  # 11

BIOMARKERS = ("glucose", "bmi", "sbp", "dbp")
MIN_BIOMARKER_MEASUREMENTS = 3
DAYS_PER_YEAR = 365.25


class SubgroupLabel(NamedTuple):
    covariate: str
    level: str


@dataclass
class IngestReport:
    """Counts and per-subject exclusions accumulated by the pipeline."""

    steps_removed_implausible: int = 0
    steps_removed_outlier: int = 0
    windows_dropped_sparse: int = 0
    exclusions: dict[str, str] = field(default_factory=dict)
    subjects_retained: list[str] = field(default_factory=list)
    n_transitions: int = 0

    def to_dict(self) -> dict:
        return {
            "steps_removed_implausible": self.steps_removed_implausible,
            "steps_removed_outlier": self.steps_removed_outlier,
            "windows_dropped_sparse": self.windows_dropped_sparse,
            "exclusions": dict(sorted(self.exclusions.items())),
            "subjects_retained": sorted(self.subjects_retained),
            "n_transitions": self.n_transitions,
        }

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def clean_steps(steps: pd.DataFrame) -> tuple[pd.DataFrame, dict[str, int]]:
    """Set implausible (<100 or >50,000) then outlier (>22,300) step values
    to missing; returns the cleaned frame and removal counts."""
    out = steps.copy()
    values = out["steps"].astype(float)
    implausible = (values < STEP_IMPLAUSIBLE_LOW) | (values > STEP_IMPLAUSIBLE_HIGH)
    values = values.mask(implausible)
    outlier = values > STEP_OUTLIER
    values = values.mask(outlier)
    out["steps"] = values
    counts = {
        "implausible": int(implausible.sum()),
        "outlier": int(outlier.sum()),
    }
    return out, counts


def build_windows(
    cleaned: pd.DataFrame,
    baselines: dict[str, date],
    min_days: int = 30,
) -> tuple[dict[str, dict[int, np.ndarray]], int]:
    """Cut each subject's valid step days into consecutive 90-day windows.

    Window w spans days [90w, 90(w+1)) after the subject's baseline, up to
    11 windows; windows with fewer than ``min_days`` valid values are
    dropped. Returns {subject: {window_index: step values}} and the number
    of dropped windows.
    """
    windows: dict[str, dict[int, np.ndarray]] = {}
    dropped = 0
    for sid, group in cleaned.groupby("subject_id", sort=True):
        baseline = baselines.get(str(sid))
        if baseline is None:
            continue
        valid = group.dropna(subset=["steps"])
        offsets = np.array([(d - baseline).days for d in valid["date"]])
        keep = (offsets >= 0) & (offsets < OBSERVATION_DAYS)
        offsets = offsets[keep]
        values = valid["steps"].to_numpy(dtype=float)[keep]
        per_window: dict[int, np.ndarray] = {}
        for w in range(MAX_WINDOWS):
            mask = (offsets >= w * WINDOW_DAYS) & (offsets < (w + 1) * WINDOW_DAYS)
            if not np.any(mask):
                continue
            vals = values[mask]
            if vals.size < min_days:
                dropped += 1
                continue
            per_window[w] = vals
        if per_window:
            windows[str(sid)] = per_window
    return windows, dropped


def locf_align(
    measurements: pd.DataFrame, boundary: date
) -> float | None:
    """Most recent value on or before the boundary; same-day duplicates are
    averaged first. Returns None when no prior observation exists."""
    prior = measurements[measurements["date"] <= boundary]
    if prior.empty:
        return None
    daily = prior.groupby("date", sort=True)["value"].mean()
    return float(daily.iloc[-1])


def _biomarker_frames(
    biomarkers: pd.DataFrame,
) -> dict[str, dict[str, pd.DataFrame]]:
    frames: dict[str, dict[str, pd.DataFrame]] = {}
    for (sid, name), group in biomarkers.groupby(["subject_id", "name"], sort=True):
        frames.setdefault(str(sid), {})[str(name)] = group
    return frames


def assemble_transitions(
    windows: dict[str, dict[int, np.ndarray]],
    biomarkers: pd.DataFrame,
    demographics: pd.DataFrame,
    baselines: dict[str, date],
    grid: Grid,
    report: IngestReport,
    tables: RiskTables | None = None,
    min_days: int = 30,
) -> Dataset:
    """Build (S, A, R, S') tuples from consecutive valid windows.

    S_t holds the LOCF biomarkers at the window-t boundary plus sex and age;
    A_t is the LQD transform of window t's steps; R_t the shaped reward; age
    advances by 90/365.25 years per step. Subjects need >= 3 measurements of
    every biomarker inside the observation window and >= 2 transitions.
    """
    by_subject = _biomarker_frames(biomarkers)
    demo = demographics.set_index("subject_id")

    transitions: list[Transition] = []
    anchors: list[float] = []
    for sid in sorted(windows):
        baseline = baselines[sid]
        subject_bio = by_subject.get(sid, {})
        window_end = baseline + timedelta(days=OBSERVATION_DAYS)

        counts_ok = True
        for name in BIOMARKERS:
            frame = subject_bio.get(name)
            n_meas = 0
            if frame is not None:
                in_window = frame[
                    (frame["date"] >= baseline) & (frame["date"] < window_end)
                ]
                n_meas = len(in_window)
            if n_meas < MIN_BIOMARKER_MEASUREMENTS:
                report.exclusions[sid] = f"fewer than 3 {name} measurements"
                counts_ok = False
                break
        if not counts_ok:
            continue
        if sid not in demo.index:
            report.exclusions[sid] = "missing demographics"
            continue
        sex = float(demo.loc[sid, "sex"])
        birth = demo.loc[sid, "birth_date"]

        def state_at(window_idx: int) -> State | None:
            boundary = baseline + timedelta(days=window_idx * WINDOW_DAYS)
            comps = np.empty(6)
            for slot, name in zip(
                (STATE_GLUCOSE, STATE_BMI, STATE_SBP, STATE_DBP), BIOMARKERS
            ):
                value = locf_align(subject_bio[name], boundary)
                if value is None:
                    return None
                comps[slot] = value
            comps[STATE_SEX] = sex
            comps[STATE_AGE] = (boundary - birth).days / DAYS_PER_YEAR
            return State(comps)

        subject_transitions: list[Transition] = []
        subject_anchors: list[float] = []
        per_window = windows[sid]
        for w in sorted(per_window):
            # A transition needs the consecutive window pair (w, w+1) plus
            # LOCF states at both boundaries.
            if w + 1 not in per_window:
                continue
            state = state_at(w)
            next_state = state_at(w + 1)
            if state is None or next_state is None:
                continue
            sample = StepSample(per_window[w], window_id=f"{sid}:{w}", min_days=min_days)
            lqd = lqd_forward(kde(sample), grid)
            mu = mean_steps(lqd)
            reward = shaped_reward_from_mean(state, mu, tables)
            subject_transitions.append(
                Transition(
                    state=state,
                    action=GridFunction(grid, lqd.values),
                    reward=reward,
                    next_state=next_state,
                    subject_id=sid,
                    time_index=w,
                )
            )
            subject_anchors.append(lqd.q0)

        if len(subject_transitions) < 2:
            report.exclusions[sid] = "fewer than 2 transitions"
            continue
        report.subjects_retained.append(sid)
        transitions.extend(subject_transitions)
        anchors.extend(subject_anchors)

    if not transitions:
        raise ValueError("no transitions survived the ingest rules")
    report.n_transitions = len(transitions)
    return Dataset.from_transitions(
        transitions, grid, action_anchors=np.array(anchors)
    )


def _read_dates(frame: pd.DataFrame, column: str = "date") -> pd.DataFrame:
    out = frame.copy()
    out[column] = pd.to_datetime(out[column]).dt.date
    return out


def ingest_pipeline(
    steps_csv: str | Path,
    biomarkers_csv: str | Path,
    demographics_csv: str | Path,
    grid: Grid | None = None,
    min_days: int = 30,
    tables: RiskTables | None = None,
) -> tuple[Dataset, IngestReport]:
    """Full raw-CSV-to-dataset pipeline.

    Expected columns: steps (subject_id, date, steps); biomarkers
    (subject_id, date, name, value) with names glucose/bmi/sbp/dbp;
    demographics (subject_id, sex, birth_date) with sex coded 0=male,
    1=female.
    """
    if grid is None:
        grid = Grid.uniform(101)
    steps = _read_dates(pd.read_csv(steps_csv, dtype={"subject_id": str}))
    biomarkers = _read_dates(pd.read_csv(biomarkers_csv, dtype={"subject_id": str}))
    demographics = pd.read_csv(demographics_csv, dtype={"subject_id": str})
    demographics = _read_dates(demographics, "birth_date")

    unknown = set(biomarkers["name"]) - set(BIOMARKERS)
    if unknown:
        raise ValueError(f"unknown biomarker names: {sorted(unknown)}")

    report = IngestReport()
    cleaned, counts = clean_steps(steps)
    report.steps_removed_implausible = counts["implausible"]
    report.steps_removed_outlier = counts["outlier"]

    # Baseline: the date of the first glucose measurement.
    glucose = biomarkers[biomarkers["name"] == "glucose"]
    baselines = {
        str(sid): group["date"].min()
        for sid, group in glucose.groupby("subject_id", sort=True)
    }
    no_glucose = set(cleaned["subject_id"].astype(str)) - set(baselines)
    for sid in sorted(no_glucose):
        report.exclusions[sid] = "no glucose measurement (no baseline)"

    windows, dropped = build_windows(cleaned, baselines, min_days=min_days)
    report.windows_dropped_sparse = dropped

    dataset = assemble_transitions(
        windows, biomarkers, demographics, baselines, grid, report,
        tables=tables, min_days=min_days,
    )
    return dataset, report


# ---------------------------------------------------------------------------
# Subgroup discretization for reporting
# ---------------------------------------------------------------------------


def _glucose_level(g: float) -> str:
    if g < 70:
        return "Low"
    if 80 <= g < 120:
        return "Normal"
    if g >= 150:
        return "High"
    return "Borderline"  # 70 <= g < 80 or 120 <= g < 150


def _bmi_level(bmi: float) -> str:
    # The published groups start at 18.5; anything below is reported with
    # the Normal band, which covers BMI < 25.
    if bmi < 25.0:
        return "Normal"
    if bmi < 30.0:
        return "Overweight"
    return "Obese"


def _bp_level(sbp: float, dbp: float) -> str:
    # Hypertension takes precedence: the printed conditions overlap at the
    # boundary.
    if sbp >= 130 or dbp >= 80:
        return "Hypertension"
    if 120 <= sbp < 130:
        return "Elevated"
    return "Normal"


def _age_level(age: float) -> str:
    if age < 40:
        return "Younger"
    if age < 60:
        return "Middle"
    return "Older"


def discretize(state: State) -> list[SubgroupLabel]:
    """Map one state to its subgroup levels for every covariate."""
    c = state.components
    if c.size < 6:
        raise ValueError("discretize expects the 6-component application state")
    return [
        SubgroupLabel("glucose", _glucose_level(c[STATE_GLUCOSE])),
        SubgroupLabel("bmi", _bmi_level(c[STATE_BMI])),
        SubgroupLabel("blood_pressure", _bp_level(c[STATE_SBP], c[STATE_DBP])),
        SubgroupLabel("age", _age_level(c[STATE_AGE])),
        SubgroupLabel("sex", "F" if c[STATE_SEX] >= 0.5 else "M"),
    ]
