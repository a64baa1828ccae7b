"""Cardiometabolic risk score and the shaped reward.

The risk score sums four piecewise-constant lookups on BMI, glucose, SBP and
DBP (closed-left/open-right intervals); the reward is
1 + tanh(-risk - 0.002 * (mu/1000)^2) with mu the mean daily steps implied
by the LQD action, so it lies in (0, 2) and discourages extreme step
recommendations.
"""

from __future__ import annotations

import json
import warnings
from bisect import bisect_right
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import State
from .density import LqdFunction, mean_steps

__all__ = [
    "STATE_GLUCOSE",
    "STATE_BMI",
    "STATE_SBP",
    "STATE_DBP",
    "STATE_SEX",
    "STATE_AGE",
    "RiskTable",
    "RiskTables",
    "risk",
    "shaped_reward",
    "shaped_reward_from_mean",
]

# Application state layout: (glucose, BMI, SBP, DBP, sex, age), original units.
STATE_GLUCOSE, STATE_BMI, STATE_SBP, STATE_DBP, STATE_SEX, STATE_AGE = range(6)


@dataclass(frozen=True)
class RiskTable:
    """Piecewise-constant lookup: value[i] applies on [break[i-1], break[i])."""

    breakpoints: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.values) != len(self.breakpoints) + 1:
            raise ValueError("need one more value than breakpoints")
        if any(b >= c for b, c in zip(self.breakpoints, self.breakpoints[1:])):
            raise ValueError("breakpoints must be strictly increasing")
        if any(v < 0 for v in self.values):
            raise ValueError("risk contributions must be non-negative")

    def lookup(self, x: float) -> float:
        if not np.isfinite(x):
            raise ValueError("risk lookup requires a finite input")
        return self.values[bisect_right(self.breakpoints, x)]


@dataclass(frozen=True)
class RiskTables:
    """The four component tables of the additive risk score.

    The BMI table has no published value below 18.5; underweight inputs get
    the adjacent lowest-BMI penalty (0.42) with a warning, since underweight
    is not lower-risk than BMI 18.5-22.
    """

    bmi: RiskTable
    glucose: RiskTable
    sbp: RiskTable
    dbp: RiskTable
    underweight_bmi: float = 18.5

    @classmethod
    def default(cls) -> "RiskTables":
        return cls(
            bmi=RiskTable(
                breakpoints=(18.5, 22.0, 24.0, 30.0),
                values=(0.42, 0.42, 0.20, 0.0, 0.03),
            ),
            glucose=RiskTable(
                breakpoints=(70.0, 140.0, 160.0, 200.0),
                values=(0.29, 0.0, 0.12, 0.21, 0.37),
            ),
            sbp=RiskTable(
                breakpoints=(110.0, 120.0, 170.0),
                values=(0.15, 0.03, 0.0, 0.04),
            ),
            dbp=RiskTable(
                breakpoints=(80.0, 90.0),
                values=(0.0, 0.08, 0.16),
            ),
        )

    def to_dict(self) -> dict:
        return {
            name: {
                "breakpoints": list(getattr(self, name).breakpoints),
                "values": list(getattr(self, name).values),
            }
            for name in ("bmi", "glucose", "sbp", "dbp")
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RiskTables":
        tables = {
            name: RiskTable(
                breakpoints=tuple(data[name]["breakpoints"]),
                values=tuple(data[name]["values"]),
            )
            for name in ("bmi", "glucose", "sbp", "dbp")
        }
        return cls(**tables)

    @classmethod
    def from_json(cls, path: str | Path) -> "RiskTables":
        return cls.from_dict(json.loads(Path(path).read_text()))


def risk(state: State, tables: RiskTables | None = None) -> float:
    """Additive risk score of a state in original (unstandardized) units."""
    tables = tables or RiskTables.default()
    comps = state.components
    if comps.size < 4:
        raise ValueError("risk needs glucose, BMI, SBP and DBP components")
    bmi = comps[STATE_BMI]
    if bmi < tables.underweight_bmi:
        warnings.warn(
            f"BMI {bmi:.1f} below {tables.underweight_bmi}: assigning the "
            "lowest-BMI penalty",
            RuntimeWarning,
            stacklevel=2,
        )
    return (
        tables.bmi.lookup(bmi)
        + tables.glucose.lookup(comps[STATE_GLUCOSE])
        + tables.sbp.lookup(comps[STATE_SBP])
        + tables.dbp.lookup(comps[STATE_DBP])
    )


def shaped_reward_from_mean(
    state: State, mu_steps: float, tables: RiskTables | None = None
) -> float:
    """Reward given the mean daily steps implied by the action."""
    return float(
        1.0 + np.tanh(-risk(state, tables) - 0.002 * (mu_steps / 1000.0) ** 2)
    )


def shaped_reward(
    state: State, action: LqdFunction, tables: RiskTables | None = None
) -> float:
    """Reward in (0, 2) for a state and an LQD-encoded step distribution."""
    return shaped_reward_from_mean(state, mean_steps(action), tables)
