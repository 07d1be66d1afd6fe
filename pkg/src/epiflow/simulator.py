"""Fixed-step explicit integration and weekly output aggregation.

The stepper is plain forward Euler on population fractions.  It never
clamps, projects, or otherwise repairs states: negative values are recorded
and left for verification to judge.  Integration halts only on NaN/Inf or
on divergence beyond ten times the total population, and the halting step
is reported in the stability flag.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np

from .compiler import BoundModel, CompiledModel, DAYS_PER_WEEK, N_OUTPUTS, OUT_DEATHS, OUT_INFECTIONS
from .errors import SimulationError

BLOWUP_LIMIT = 10.0
X0_SUM_TOL = 1e-12


@dataclass(frozen=True)
class InitialCondition:
    """Starting fractions per (patch, compartment); each patch sums to one."""

    fractions: np.ndarray  # (P, K)

    def __post_init__(self):
        arr = np.asarray(self.fractions, dtype=float)
        if arr.ndim != 2:
            raise SimulationError("initial fractions must be a (patches, compartments) array")
        if np.any(arr < 0):
            raise SimulationError("initial fractions must be >= 0")
        sums = arr.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > X0_SUM_TOL):
            raise SimulationError(
                f"initial fractions must sum to 1 per patch (got sums {sums})"
            )
        object.__setattr__(self, "fractions", arr)

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, float],
                     model: CompiledModel) -> "InitialCondition":
        """Same starting fractions in every patch; ids must match the model."""
        unknown = sorted(set(mapping) - set(model.compartment_ids))
        if unknown:
            raise SimulationError(f"initial condition names unknown compartments: {unknown}")
        row = np.array([float(mapping.get(cid, 0.0)) for cid in model.compartment_ids])
        return cls(np.tile(row, (model.num_patches, 1)))

    def flat(self) -> np.ndarray:
        return self.fractions.reshape(-1).copy()


@dataclass(frozen=True)
class StabilityFlag:
    stable: bool
    first_bad_step: Optional[int] = None
    reason: Optional[str] = None  # "nan" | "inf" | "blow-up"

    def render(self) -> str:
        if self.stable:
            return "stable"
        return f"unstable ({self.reason} at step {self.first_bad_step})"


@dataclass(frozen=True)
class Trajectory:
    """States at every step plus weekly cumulative outputs.

    Weekly arrays run from week 0 (all zeros) through the last completed
    week, in both fractions and absolute counts.
    """

    states: np.ndarray                 # (steps+1, n_state)
    weekly_infections: np.ndarray      # (weeks+1, P) fractions
    weekly_deaths: np.ndarray          # (weeks+1, P) fractions
    weekly_infections_count: np.ndarray
    weekly_deaths_count: np.ndarray
    dt_days: float
    t0_week: float
    patch_ids: tuple[str, ...]
    slot_names: tuple[str, ...]

    @property
    def n_weeks(self) -> int:
        return self.weekly_infections.shape[0] - 1

    def weekly_outputs(self) -> np.ndarray:
        """Stacked (weeks+1, P, 2) fractions: infections then deaths."""
        return np.stack([self.weekly_infections, self.weekly_deaths], axis=-1)


@dataclass(frozen=True)
class WeeklyDeltas:
    infections: np.ndarray  # (weeks, P)
    deaths: np.ndarray


def _bad_state(x: np.ndarray) -> Optional[str]:
    if np.any(np.isnan(x)):
        return "nan"
    if np.any(np.isinf(x)):
        return "inf"
    if np.any(np.abs(x) > BLOWUP_LIMIT):
        return "blow-up"
    return None


def simulate(bound: BoundModel, x0: InitialCondition, horizon_weeks: int,
             dt_days: float = 1.0) -> tuple[Trajectory, StabilityFlag]:
    """Integrate forward with Euler steps and sample at week boundaries.

    ``dt_days`` must divide a week exactly.  Cumulative infection and death
    accumulators are integrated alongside the state with the same scheme.
    """
    model = bound.model
    if horizon_weeks < 1:
        raise SimulationError("horizon must be at least one week")
    if dt_days <= 0:
        raise SimulationError("dt must be positive")
    steps_per_week = DAYS_PER_WEEK / dt_days
    if abs(steps_per_week - round(steps_per_week)) > 1e-9:
        raise SimulationError(f"dt of {dt_days} day(s) does not divide a week exactly")
    spw = int(round(steps_per_week))
    P = model.num_patches
    if x0.fractions.shape != (P, model.num_compartments):
        raise SimulationError(
            f"initial condition shape {x0.fractions.shape} does not match model "
            f"({P}, {model.num_compartments})"
        )

    total_steps = horizon_weeks * spw
    n = model.n_state
    states = np.empty((total_steps + 1, n))
    states[0] = x0.flat()
    acc = np.zeros((N_OUTPUTS, P))
    weekly = np.zeros((horizon_weeks + 1, N_OUTPUTS, P))

    x = states[0].copy()
    flag = StabilityFlag(True)
    recorded_steps = 0
    last_week = 0
    for step in range(total_steps):
        t = step * dt_days
        ev = bound.eval_full(x, t, with_jac=False)
        x = x + dt_days * ev.dxdt
        acc = acc + dt_days * ev.out_rates
        states[step + 1] = x
        recorded_steps = step + 1
        reason = _bad_state(x)
        if reason is not None:
            flag = StabilityFlag(False, first_bad_step=step + 1, reason=reason)
            break
        if (step + 1) % spw == 0:
            last_week = (step + 1) // spw
            weekly[last_week] = acc

    states = states[: recorded_steps + 1]
    weekly = weekly[: last_week + 1]
    pops = model.patches.populations
    traj = Trajectory(
        states=states,
        weekly_infections=weekly[:, OUT_INFECTIONS, :].copy(),
        weekly_deaths=weekly[:, OUT_DEATHS, :].copy(),
        weekly_infections_count=weekly[:, OUT_INFECTIONS, :] * pops,
        weekly_deaths_count=weekly[:, OUT_DEATHS, :] * pops,
        dt_days=dt_days,
        t0_week=0.0,
        patch_ids=model.patches.patch_ids,
        slot_names=model.slot_names(),
    )
    return traj, flag


def weekly_deltas(traj: Trajectory) -> WeeklyDeltas:
    """First differences of the weekly cumulative series (fractions)."""
    if traj.n_weeks < 1:
        raise SimulationError("trajectory must span at least two weekly samples")
    return WeeklyDeltas(
        infections=np.diff(traj.weekly_infections, axis=0),
        deaths=np.diff(traj.weekly_deaths, axis=0),
    )


def export_trajectory_csv(traj: Trajectory, path: Union[str, Path]) -> None:
    """Weekly cumulative outputs per patch, fractions and counts."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([
            "week", "patch_id",
            "cumulative_infections_frac", "cumulative_deaths_frac",
            "cumulative_infections_count", "cumulative_deaths_count",
        ])
        for week in range(traj.n_weeks + 1):
            for p, patch_id in enumerate(traj.patch_ids):
                writer.writerow([
                    week, patch_id,
                    repr(float(traj.weekly_infections[week, p])),
                    repr(float(traj.weekly_deaths[week, p])),
                    repr(float(traj.weekly_infections_count[week, p])),
                    repr(float(traj.weekly_deaths_count[week, p])),
                ])


def export_states_csv(traj: Trajectory, path: Union[str, Path]) -> None:
    """Full per-step state dump (optional, behind a CLI flag)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "t_days"] + list(traj.slot_names))
        for step in range(traj.states.shape[0]):
            row = [step, repr(step * traj.dt_days)]
            row.extend(repr(float(v)) for v in traj.states[step])
            writer.writerow(row)
