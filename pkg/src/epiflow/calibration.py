"""Parameter fitting against observed weekly series, plus projection ensembles.

Loss follows the level-plus-first-difference mean squared error, averaged
over patches:

    L = (1/P) * sum_p [ MSE(pred_p, obs_p) + MSE(diff pred_p, diff obs_p) ]

with infections and deaths pooled into one MSE per patch and masked entries
excluded before averaging.  Gradients come from forward sensitivities of the
exact Euler recurrence (the discrete derivative, not an ODE approximation),
with central finite differences available as the independent cross-check.

Optimization is Adam (beta1 0.9, beta2 0.999, eps 1e-8) under a
reduce-on-plateau learning-rate schedule.  Parameters are never clipped or
projected; negative values at convergence are reported, not repaired.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .compiler import (
    CompiledModel,
    DAYS_PER_WEEK,
    N_OUTPUTS,
    PatchStructure,
    bind_parameters,
    flat_layout,
)
from .errors import CalibrationError, DataError, SimulationError
from .simulator import InitialCondition, StabilityFlag, Trajectory, simulate

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

FORWARD_SENSITIVITY = "forward-sensitivity"
CENTRAL_FD = "central-finite-difference"


# ---------------------------------------------------------------------------
# Observed data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObservedSeries:
    """Weekly cumulative fractions (weeks+1, P, 2) with an observation mask."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if values.ndim != 3 or values.shape[2] != N_OUTPUTS:
            raise DataError("observed values must have shape (weeks+1, patches, 2)")
        if mask.shape != values.shape:
            raise DataError("observation mask must match the values' shape")
        if np.any(values[mask] < 0):
            raise DataError("observed cumulative values must be nonnegative")
        # nondecreasing wherever two consecutive weeks are both observed
        both = mask[1:] & mask[:-1]
        diffs = values[1:] - values[:-1]
        if np.any(diffs[both] < 0):
            raise DataError("observed cumulative series must be nondecreasing")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @property
    def n_weeks(self) -> int:
        return self.values.shape[0] - 1


@dataclass(frozen=True)
class Dataset:
    scenarios: Mapping[str, ObservedSeries]

    def __post_init__(self):
        object.__setattr__(self, "scenarios", dict(self.scenarios))


def load_observations_csv(path: Union[str, Path], patches: PatchStructure,
                          horizon_weeks: Optional[int] = None) -> Dataset:
    """Read counts (scenario_id, patch_id, week, cumulative_infections,
    cumulative_deaths), convert to fractions via patch populations.

    Blank cells are masked; weeks never mentioned stay masked.
    """
    patch_index = {p: i for i, p in enumerate(patches.patch_ids)}
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(row)
    if not rows:
        raise DataError(f"no data rows in {path}")
    max_week = max(int(r["week"]) for r in rows)
    weeks = horizon_weeks if horizon_weeks is not None else max_week
    per_scenario: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for row in rows:
        sid = row["scenario_id"]
        pid = row["patch_id"]
        if pid not in patch_index:
            raise DataError(f"unknown patch_id {pid!r} in {path}")
        week = int(row["week"])
        if week > weeks:
            continue
        if sid not in per_scenario:
            values = np.zeros((weeks + 1, patches.num_patches, N_OUTPUTS))
            mask = np.zeros_like(values, dtype=bool)
            per_scenario[sid] = (values, mask)
        values, mask = per_scenario[sid]
        p = patch_index[pid]
        pop = patches.populations[p]
        for out, col in ((0, "cumulative_infections"), (1, "cumulative_deaths")):
            cell = (row.get(col) or "").strip()
            if cell:
                values[week, p, out] = float(cell) / pop
                mask[week, p, out] = True
    return Dataset({sid: ObservedSeries(v, m) for sid, (v, m) in per_scenario.items()})


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def loss(predicted: np.ndarray, observed: ObservedSeries) -> float:
    """Level-plus-delta MSE averaged over patches; masked entries excluded."""
    value, _ = _loss_and_dpred(predicted, observed, need_grad=False)
    return value


def _loss_and_dpred(predicted: np.ndarray, observed: ObservedSeries,
                    need_grad: bool = True) -> tuple[float, Optional[np.ndarray]]:
    predicted = np.asarray(predicted, dtype=float)
    if predicted.shape != observed.values.shape:
        raise CalibrationError(
            f"prediction shape {predicted.shape} != observation shape {observed.values.shape}"
        )
    mask = observed.mask
    if not mask.any():
        raise CalibrationError("all observations are masked; nothing to fit")
    n_patches = predicted.shape[1]
    dmask = mask[1:] & mask[:-1]
    err = np.where(mask, predicted - observed.values, 0.0)
    derr = np.where(dmask, np.diff(predicted, axis=0) - np.diff(observed.values, axis=0), 0.0)
    total = 0.0
    dpred = np.zeros_like(predicted) if need_grad else None
    for p in range(n_patches):
        n_level = int(mask[:, p, :].sum())
        if n_level:
            total += float((err[:, p, :] ** 2).sum()) / n_level
        n_delta = int(dmask[:, p, :].sum())
        if n_delta:
            total += float((derr[:, p, :] ** 2).sum()) / n_delta
        if need_grad:
            if n_level:
                dpred[:, p, :] += 2.0 * err[:, p, :] / n_level
            if n_delta:
                g = 2.0 * derr[:, p, :] / n_delta
                dpred[1:, p, :] += g
                dpred[:-1, p, :] -= g
    total /= n_patches
    if need_grad:
        dpred /= n_patches
    return total, dpred


# ---------------------------------------------------------------------------
# Fit tasks and forward evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitTask:
    """One scenario's compiled model plus its simulation setup."""

    scenario_id: str
    model: CompiledModel
    x0: InitialCondition
    horizon_weeks: int
    dt_days: float = 1.0


def predicted_weekly(task: FitTask, theta: np.ndarray
                     ) -> tuple[np.ndarray, StabilityFlag, Trajectory]:
    bound = bind_parameters(task.model, theta)
    traj, flag = simulate(bound, task.x0, task.horizon_weeks, task.dt_days)
    return traj.weekly_outputs(), flag, traj


def _forward_with_sensitivity(task: FitTask, theta: np.ndarray
                              ) -> tuple[np.ndarray, np.ndarray, StabilityFlag]:
    """Weekly outputs plus their exact sensitivities under the Euler recurrence.

    Returns (weekly (W+1,P,2), sens (W+1,P,2,m), flag).  Sensitivities follow

        S_{n+1} = S_n + dt * (J_x S_n + J_theta)

    which differentiates the discrete update itself, so agreement with
    finite differences of the simulated loss is limited only by FD error.
    """
    bound = bind_parameters(task.model, theta)
    model = task.model
    P, m = model.num_patches, model.n_theta
    spw = int(round(DAYS_PER_WEEK / task.dt_days))
    total_steps = task.horizon_weeks * spw
    x = task.x0.flat()
    S_x = np.zeros((model.n_state, m))
    acc = np.zeros((N_OUTPUTS, P))
    S_acc = np.zeros((N_OUTPUTS, P, m))
    weekly = np.zeros((task.horizon_weeks + 1, P, N_OUTPUTS))
    sens = np.zeros((task.horizon_weeks + 1, P, N_OUTPUTS, m))
    dt = task.dt_days
    flag = StabilityFlag(True)
    for step in range(total_steps):
        ev = bound.eval_full(x, step * dt, with_jac=True)
        S_acc = S_acc + dt * (ev.out_jac_x @ S_x + ev.out_jac_theta)
        S_x = S_x + dt * (ev.jac_x @ S_x + ev.jac_theta)
        acc = acc + dt * ev.out_rates
        x = x + dt * ev.dxdt
        if np.any(~np.isfinite(x)) or np.any(np.abs(x) > 10.0):
            reason = "nan" if np.any(np.isnan(x)) else (
                "inf" if np.any(np.isinf(x)) else "blow-up")
            flag = StabilityFlag(False, first_bad_step=step + 1, reason=reason)
            break
        if (step + 1) % spw == 0:
            week = (step + 1) // spw
            weekly[week] = acc.T
            sens[week] = np.transpose(S_acc, (1, 0, 2))
    return weekly, sens, flag


def scenario_loss_and_grad(task: FitTask, observed: ObservedSeries,
                           theta: np.ndarray) -> tuple[float, np.ndarray]:
    weekly, sens, flag = _forward_with_sensitivity(task, theta)
    if not flag.stable:
        return float("nan"), np.full(len(theta), np.nan)
    value, dpred = _loss_and_dpred(weekly, observed)
    grad = np.einsum("wpo,wpom->m", dpred, sens)
    return value, grad


def total_loss(tasks: Sequence[FitTask], dataset: Dataset,
               theta: np.ndarray) -> tuple[float, dict[str, float]]:
    """Sum of per-scenario losses over the tasks that have observations."""
    per_scenario: dict[str, float] = {}
    total = 0.0
    for task in tasks:
        observed = dataset.scenarios.get(task.scenario_id)
        if observed is None:
            continue
        weekly, flag, _ = predicted_weekly(task, theta)
        value = loss(weekly, observed) if flag.stable else float("nan")
        per_scenario[task.scenario_id] = value
        total += value
    if not per_scenario:
        raise CalibrationError("no task has observations in the dataset")
    return total, per_scenario


def central_fd_gradient(f: Callable[[np.ndarray], float], theta: np.ndarray,
                        rel_step: float = 1e-5) -> np.ndarray:
    """Central finite differences with a per-component relative step."""
    theta = np.asarray(theta, dtype=float)
    grad = np.zeros_like(theta)
    for i in range(len(theta)):
        h = rel_step * abs(theta[i]) if theta[i] != 0 else rel_step
        up = theta.copy()
        up[i] += h
        down = theta.copy()
        down[i] -= h
        grad[i] = (f(up) - f(down)) / (2.0 * h)
    return grad


def gradient(tasks: Union[FitTask, Sequence[FitTask]], dataset: Dataset,
             theta: np.ndarray, config: "CalibrationConfig") -> np.ndarray:
    """Gradient of the summed calibration loss in the configured mode."""
    if isinstance(tasks, FitTask):
        tasks = [tasks]
    theta = np.asarray(theta, dtype=float)
    if config.gradient_mode == CENTRAL_FD:
        return central_fd_gradient(
            lambda th: total_loss(tasks, dataset, th)[0], theta, config.fd_rel_step
        )
    if config.gradient_mode != FORWARD_SENSITIVITY:
        raise CalibrationError(f"unknown gradient mode {config.gradient_mode!r}")
    grad = np.zeros(len(theta))
    any_data = False
    for task in tasks:
        observed = dataset.scenarios.get(task.scenario_id)
        if observed is None:
            continue
        any_data = True
        _, g = scenario_loss_and_grad(task, observed, theta)
        grad += g
    if not any_data:
        raise CalibrationError("no task has observations in the dataset")
    return grad


# ---------------------------------------------------------------------------
# Adam with reduce-on-plateau
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CalibrationConfig:
    learning_rate: float = 1e-2
    max_steps: int = 5000
    plateau_factor: float = 0.5
    plateau_patience: int = 20
    min_lr: float = 1e-5
    improvement_rtol: float = 1e-6
    gradient_mode: str = FORWARD_SENSITIVITY
    fd_rel_step: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.min_lr <= 0 or self.fd_rel_step <= 0:
            raise CalibrationError("rates and steps must be positive")
        if self.max_steps < 0:
            raise CalibrationError("max_steps must be >= 0")
        if not 0 < self.plateau_factor < 1:
            raise CalibrationError("plateau factor must lie in (0, 1)")
        if self.plateau_patience <= 0:
            raise CalibrationError("plateau patience must be positive")


@dataclass(frozen=True)
class CalibrationResult:
    theta_star: np.ndarray
    loss_history: tuple[float, ...]
    constraint_report: tuple[str, ...]   # names of negative parameters at the end
    per_scenario_fit: Mapping[str, float]

    def __post_init__(self):
        object.__setattr__(self, "theta_star", np.asarray(self.theta_star, dtype=float))
        object.__setattr__(self, "loss_history", tuple(float(v) for v in self.loss_history))
        object.__setattr__(self, "per_scenario_fit", dict(self.per_scenario_fit))


def adam_minimize(value_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
                  theta0: np.ndarray, config: CalibrationConfig
                  ) -> tuple[np.ndarray, list[float]]:
    """Run Adam under the plateau schedule; returns the best-loss iterate.

    The history records the loss at every evaluated iterate, starting with
    theta0, so max_steps=0 yields a single-entry history.  Optimization
    stops early only if the loss turns non-finite (the iterate before the
    breakdown is still eligible as the best point).
    """
    theta = np.asarray(theta0, dtype=float).copy()
    value, grad = value_and_grad(theta)
    if not np.isfinite(value):
        raise CalibrationError(f"loss is non-finite at the initial point ({value})")
    history = [value]
    best_value, best_theta = value, theta.copy()
    lr = config.learning_rate
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    bad_steps = 0
    for step in range(1, config.max_steps + 1):
        m1 = ADAM_BETA1 * m1 + (1 - ADAM_BETA1) * grad
        m2 = ADAM_BETA2 * m2 + (1 - ADAM_BETA2) * grad * grad
        m1_hat = m1 / (1 - ADAM_BETA1 ** step)
        m2_hat = m2 / (1 - ADAM_BETA2 ** step)
        theta = theta - lr * m1_hat / (np.sqrt(m2_hat) + ADAM_EPS)
        value, grad = value_and_grad(theta)
        history.append(value)
        if not np.isfinite(value):
            break
        if value < best_value * (1 - config.improvement_rtol):
            bad_steps = 0
        else:
            bad_steps += 1
            if bad_steps >= config.plateau_patience:
                lr = max(lr * config.plateau_factor, config.min_lr)
                bad_steps = 0
        if value < best_value:
            best_value, best_theta = value, theta.copy()
    return best_theta, history


def calibrate(tasks: Union[FitTask, Sequence[FitTask]], dataset: Dataset,
              config: CalibrationConfig, theta0: np.ndarray) -> CalibrationResult:
    """Fit the shared parameter vector across all tasks' scenarios.

    Shared parameters accumulate gradient contributions from every scenario
    that does not override them; overridden parameters are fixed scenario
    inputs and contribute nothing.  No value is ever clipped: parameters
    that end up negative are listed in the constraint report as a signal
    that the model structure, not the optimizer, needs revision.
    """
    if isinstance(tasks, FitTask):
        tasks = [tasks]
    if not tasks:
        raise CalibrationError("no fit tasks given")
    layouts = {tuple(flat_layout(t.model.params)) for t in tasks}
    if len(layouts) != 1:
        raise CalibrationError("all tasks must share one parameter layout")
    theta0 = np.asarray(theta0, dtype=float)
    with_data = [t for t in tasks if t.scenario_id in dataset.scenarios]
    if not with_data:
        raise CalibrationError("no task has observations in the dataset")

    if config.gradient_mode == FORWARD_SENSITIVITY:
        def value_and_grad(theta):
            value = 0.0
            grad = np.zeros(len(theta))
            for task in with_data:
                v, g = scenario_loss_and_grad(
                    task, dataset.scenarios[task.scenario_id], theta)
                value += v
                grad += g
            return value, grad
    else:
        def value_and_grad(theta):
            value, _ = total_loss(tasks, dataset, theta)
            return value, gradient(tasks, dataset, theta, config)

    theta_star, history = adam_minimize(value_and_grad, theta0, config)
    _, per_scenario = total_loss(tasks, dataset, theta_star)
    layout = flat_layout(tasks[0].model.params)
    negative = tuple(
        name if knot is None else f"{name}[{knot}]"
        for (name, knot), v in zip(layout, theta_star)
        if v < 0
    )
    return CalibrationResult(theta_star, history, negative, per_scenario)


def export_loss_history_csv(result: CalibrationResult, path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, value in enumerate(result.loss_history):
            writer.writerow([step, repr(float(value))])


def export_theta_json(result: CalibrationResult, model: CompiledModel,
                      path: Union[str, Path]) -> None:
    import json

    from .compiler import named_view

    payload = {
        "theta": [float(v) for v in result.theta_star],
        "named": named_view(model.params, result.theta_star),
        "constraint_report": list(result.constraint_report),
        "per_scenario_fit": {k: float(v) for k, v in result.per_scenario_fit.items()},
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Projection ensembles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnsembleBands:
    """Pointwise median plus central 50% and 80% intervals (fractions)."""

    median: np.ndarray    # (weeks+1, P, 2)
    lower50: np.ndarray
    upper50: np.ndarray
    lower80: np.ndarray
    upper80: np.ndarray
    ensemble_size: int
    perturbation_scale: float
    dropped: int = 0


def project_ensemble(task: FitTask, theta_star: np.ndarray,
                     perturbation_scale: float, ensemble_size: int,
                     seed: int) -> EnsembleBands:
    """Parametric ensemble around the calibrated parameters.

    Members are theta* ⋅ (1 + scale·z) with componentwise standard normal z
    drawn from a fixed seed.  Non-finite or unstable members are dropped and
    counted; all members identical when scale is zero.
    """
    if perturbation_scale < 0:
        raise CalibrationError("perturbation scale must be >= 0")
    if ensemble_size < 1:
        raise CalibrationError("ensemble size must be >= 1")
    theta_star = np.asarray(theta_star, dtype=float)
    rng = np.random.default_rng(seed)
    members = []
    dropped = 0
    for _ in range(ensemble_size):
        z = rng.standard_normal(len(theta_star))
        theta = theta_star * (1.0 + perturbation_scale * z)
        weekly, flag, _ = predicted_weekly(task, theta)
        if not flag.stable or not np.all(np.isfinite(weekly)):
            dropped += 1
            continue
        members.append(weekly)
    if not members:
        raise CalibrationError("every ensemble member was dropped as non-finite")
    stack = np.stack(members)  # (kept, weeks+1, P, 2)
    q = np.quantile(stack, [0.10, 0.25, 0.50, 0.75, 0.90], axis=0)
    return EnsembleBands(
        median=q[2], lower50=q[1], upper50=q[3], lower80=q[0], upper80=q[4],
        ensemble_size=ensemble_size,
        perturbation_scale=perturbation_scale,
        dropped=dropped,
    )
