"""Deterministic verification, cross-scenario validation, and feedback.

Verification audits mathematical correctness of a simulated run: state
non-negativity, conservation of total population (the deceased slot counts
toward the total, so living mass only leaves through it), monotone weekly
cumulative outputs, numerical stability, parameter non-negativity, and
consistency between the bound right-hand side and the verified graph.

Validation audits scenario fidelity: whether cross-scenario metrics respect
the orderings the scenario mechanisms imply, and whether the scenarios have
collapsed onto each other (a sign of missing mechanisms).

Feedback turns failed checks into deterministic, templated revision
directives so identical reports always render byte-identical messages.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .compiler import BoundModel
from .flowgraph import FlowGraph, Infection
from .scenario_kb import DEFAULT_ORDERING_TOLERANCE, OrderingExpectation
from .simulator import StabilityFlag, Trajectory

PASS = "PASS"
WARN = "WARN"
FAIL = "FAIL"

NONNEG_STATE = "NONNEG_STATE"
MASS_CONSERVATION = "MASS_CONSERVATION"
CUM_MONOTONE = "CUM_MONOTONE"
PARAM_NONNEG = "PARAM_NONNEG"
NUM_STABLE = "NUM_STABLE"
GRAPH_CODE_CONSISTENT = "GRAPH_CODE_CONSISTENT"


@dataclass(frozen=True)
class VnvTolerances:
    state_nonneg: float = 1e-9
    mass: float = 1e-8
    cum_monotone: float = 1e-9
    ordering_rel: float = DEFAULT_ORDERING_TOLERANCE


@dataclass(frozen=True)
class CheckResult:
    check_id: str
    status: str                      # PASS | FAIL
    message: str = ""
    step: Optional[int] = None       # first offending step/week
    where: Optional[str] = None      # slot or parameter name
    value: Optional[float] = None

    @property
    def passed(self) -> bool:
        return self.status == PASS

    def render(self) -> str:
        if self.passed:
            return f"{self.check_id}: PASS"
        return f"{self.check_id}: FAIL ({self.message})"


@dataclass(frozen=True)
class VerificationReport:
    checks: tuple[CheckResult, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def status(self) -> str:
        return PASS if self.passed else FAIL

    def failed_checks(self) -> tuple[CheckResult, ...]:
        return tuple(c for c in self.checks if not c.passed)

    def render(self) -> str:
        return "\n".join(c.render() for c in self.checks)


def combine_reports(*reports: VerificationReport) -> VerificationReport:
    checks: list[CheckResult] = []
    for report in reports:
        checks.extend(report.checks)
    return VerificationReport(tuple(checks))


# ---------------------------------------------------------------------------
# Trajectory and parameter verification
# ---------------------------------------------------------------------------

def verify_trajectory(traj: Trajectory, flag: StabilityFlag,
                      tolerances: VnvTolerances = VnvTolerances()
                      ) -> VerificationReport:
    """Run the four trajectory-level checks, pinpointing first violations."""
    checks = [
        _check_nonneg(traj, tolerances.state_nonneg),
        _check_mass(traj, tolerances.mass),
        _check_monotone(traj, tolerances.cum_monotone),
        _check_stability(flag),
    ]
    return VerificationReport(tuple(checks))


def _check_nonneg(traj: Trajectory, tol: float) -> CheckResult:
    bad = traj.states < -tol
    if not bad.any():
        return CheckResult(NONNEG_STATE, PASS)
    step, slot = np.argwhere(bad)[0]
    value = float(traj.states[step, slot])
    name = traj.slot_names[slot]
    return CheckResult(
        NONNEG_STATE, FAIL,
        message=f"state {name} is negative ({value:.6g}) at step {step}",
        step=int(step), where=name, value=value,
    )


def _check_mass(traj: Trajectory, tol: float) -> CheckResult:
    # per-patch compartments sum to 1; total over patches equals their count
    n_patches = len(traj.patch_ids)
    per_patch = traj.states.reshape(traj.states.shape[0], n_patches, -1).sum(axis=2)
    dev = np.abs(per_patch - 1.0)
    bad = dev > tol
    if not bad.any():
        return CheckResult(MASS_CONSERVATION, PASS)
    step, patch = np.argwhere(bad)[0]
    value = float(per_patch[step, patch])
    return CheckResult(
        MASS_CONSERVATION, FAIL,
        message=(f"population total in patch {traj.patch_ids[patch]} deviates from 1 "
                 f"by {abs(value - 1.0):.6g} at step {step}"),
        step=int(step), where=traj.patch_ids[patch], value=value,
    )


def _check_monotone(traj: Trajectory, tol: float) -> CheckResult:
    for label, series in (("infections", traj.weekly_infections),
                          ("deaths", traj.weekly_deaths)):
        drops = np.diff(series, axis=0) < -tol
        if drops.any():
            w, p = np.argwhere(drops)[0]
            week = int(w) + 1
            return CheckResult(
                CUM_MONOTONE, FAIL,
                message=(f"cumulative {label} decreases at week {week} in patch "
                         f"{traj.patch_ids[p]}; check the sign of the flows feeding it"),
                step=week, where=f"{traj.patch_ids[p]}/{label}",
                value=float(series[week, p] - series[week - 1, p]),
            )
    return CheckResult(CUM_MONOTONE, PASS)


def _check_stability(flag: StabilityFlag) -> CheckResult:
    if flag.stable:
        return CheckResult(NUM_STABLE, PASS)
    return CheckResult(
        NUM_STABLE, FAIL,
        message=f"integration diverged ({flag.reason}) at step {flag.first_bad_step}",
        step=flag.first_bad_step,
    )


def verify_parameters(named: Mapping[str, object]) -> VerificationReport:
    """PARAM_NONNEG over a named parameter view; zero is admissible.

    Negative rates are flagged as a structural-revision signal, never
    clipped away.
    """
    for name in sorted(named):
        value = named[name]
        values = value if isinstance(value, (list, tuple)) else [value]
        for k, v in enumerate(values):
            if v < 0:
                where = name if not isinstance(value, (list, tuple)) else f"{name}[{k}]"
                return VerificationReport((CheckResult(
                    PARAM_NONNEG, FAIL,
                    message=(f"parameter {where} is negative ({v:.6g}); negative rates "
                             "signal that the model structure needs revision, not clipping"),
                    where=where, value=float(v),
                ),))
    return VerificationReport((CheckResult(PARAM_NONNEG, PASS),))


def verify_graph_consistency(bound: BoundModel, graph: FlowGraph,
                             seed: int = 0, n_probes: int = 3,
                             fd_step: float = 1e-6, threshold: float = 1e-7
                             ) -> VerificationReport:
    """Check that the bound right-hand side only moves mass along graph edges.

    Probes the state Jacobian by central finite differences at random
    interior states and times, and compares the observed sparsity pattern
    with the dependencies the graph licenses (transition endpoints plus
    contact-coupled infectious sources).  Dependencies outside that pattern
    mean the compiled dynamics disagree with the verified structure.  The
    check is one-sided: a transition whose rate is legitimately zero (an
    all-zero schedule, say) leaves no runtime signature, and genuinely
    missing mechanisms surface through validation instead.
    """
    model = bound.model
    P, K = model.num_patches, model.num_compartments
    n = model.n_state
    comp_index = {cid: i for i, cid in enumerate(model.compartment_ids)}
    contact = model.patches.contact_matrix
    licensed = np.zeros((n, n), dtype=bool)
    for t in graph.transitions:
        src_k, tgt_k = comp_index[t.source], comp_index[t.target]
        for p in range(P):
            rows = (p * K + src_k, p * K + tgt_k)
            for row in rows:
                licensed[row, p * K + src_k] = True
            if isinstance(t.kind, Infection):
                for j in t.kind.infectious_sources:
                    j_k = comp_index[j]
                    for p2 in range(P):
                        if contact[p, p2] != 0.0:
                            for row in rows:
                                licensed[row, p2 * K + j_k] = True

    rng = np.random.default_rng(seed)
    for probe in range(n_probes):
        raw = rng.uniform(0.05, 1.0, size=(P, K))
        x = (raw / raw.sum(axis=1, keepdims=True)).reshape(n)
        t = float(rng.uniform(0.0, 21.0))
        for col in range(n):
            up = x.copy()
            up[col] += fd_step
            down = x.copy()
            down[col] -= fd_step
            column = (bound.rhs(up, t) - bound.rhs(down, t)) / (2 * fd_step)
            extra = np.argwhere((np.abs(column) > threshold) & ~licensed[:, col])
            if extra.size:
                row = int(extra[0][0])
                slots = model.slot_names()
                return VerificationReport((CheckResult(
                    GRAPH_CODE_CONSISTENT, FAIL,
                    message=(f"rhs moves mass from {slots[col]} into {slots[row]}, "
                             "which no graph transition licenses"),
                    where=f"{slots[col]}->{slots[row]}",
                ),))
    return VerificationReport((CheckResult(GRAPH_CODE_CONSISTENT, PASS),))


# ---------------------------------------------------------------------------
# Cross-scenario validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OrderingResult:
    metric: str
    pair: tuple[str, str]
    value_a: float
    value_b: float
    tolerance: float
    satisfied: bool

    def render(self) -> str:
        a, b = self.pair
        verdict = "ok" if self.satisfied else "VIOLATED"
        return (f"{self.metric}: {a} < {b} expected "
                f"({self.value_a:.6g} vs {self.value_b:.6g}): {verdict}")


@dataclass(frozen=True)
class ValidationReport:
    orderings: tuple[OrderingResult, ...]
    scenario_collapse: bool
    metric_values: Mapping[str, Mapping[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "metric_values",
                           {k: dict(v) for k, v in self.metric_values.items()})

    @property
    def status(self) -> str:
        if any(not o.satisfied for o in self.orderings):
            return FAIL
        if self.scenario_collapse:
            return WARN
        return PASS

    @property
    def passed(self) -> bool:
        return self.status == PASS

    def render(self) -> str:
        lines = [f"validation: {self.status}"]
        lines.extend("  " + o.render() for o in self.orderings)
        if self.scenario_collapse:
            lines.append("  scenario collapse: outputs are indistinguishable across scenarios")
        return "\n".join(lines)


def metric_value(traj: Trajectory, metric: str) -> float:
    """Scenario metric over all patches, on fractions.

    peak_infections is the largest weekly incidence (first difference of
    the cumulative series).
    """
    if metric == "cumulative_infections":
        return float(traj.weekly_infections[-1].sum())
    if metric == "cumulative_deaths":
        return float(traj.weekly_deaths[-1].sum())
    if metric == "peak_infections":
        if traj.n_weeks < 1:
            return 0.0
        return float(np.diff(traj.weekly_infections.sum(axis=1)).max())
    raise ValueError(f"unknown metric {metric!r}")


def validate_scenarios(results: Mapping[str, Trajectory],
                       expectations: Sequence[OrderingExpectation],
                       default_tolerance: float = DEFAULT_ORDERING_TOLERANCE
                       ) -> ValidationReport:
    """Judge every ordering pair and detect scenario collapse.

    A pair (a, b) is satisfied iff metric(a) < metric(b) * (1 - tolerance);
    collapse holds iff, for every metric in play, all scenarios sit within
    the tolerance of one another in relative terms.
    """
    ordering_results = []
    metrics = sorted({exp.metric for exp in expectations}) or ["cumulative_infections"]
    values: dict[str, dict[str, float]] = {}
    for metric in metrics:
        values[metric] = {
            sid: metric_value(traj, metric) for sid, traj in sorted(results.items())
        }
    for exp in expectations:
        for a, b in exp.pairs:
            for sid in (a, b):
                if sid not in results:
                    raise KeyError(f"ordering references unknown scenario {sid!r}")
            va = values[exp.metric][a]
            vb = values[exp.metric][b]
            ordering_results.append(OrderingResult(
                exp.metric, (a, b), va, vb, exp.tolerance,
                satisfied=va < vb * (1.0 - exp.tolerance),
            ))
    tolerances = {m: default_tolerance for m in metrics}
    for exp in expectations:
        tolerances[exp.metric] = exp.tolerance
    collapse = True
    for metric in metrics:
        vals = list(values[metric].values())
        tol = tolerances[metric]
        for i in range(len(vals)):
            for j in range(i + 1, len(vals)):
                scale = max(abs(vals[i]), abs(vals[j]), 1e-300)
                if abs(vals[i] - vals[j]) / scale >= tol:
                    collapse = False
    if len(results) < 2:
        collapse = False
    return ValidationReport(tuple(ordering_results), collapse, values)


# ---------------------------------------------------------------------------
# Feedback generation
# ---------------------------------------------------------------------------

STALL_WINDOW_FRACTION = 0.2
STALL_RTOL = 1e-4

_SUGGESTIONS = {
    NONNEG_STATE: "reduce competing outflow rates or add the missing inflow pathway",
    MASS_CONSERVATION: "ensure every flow is subtracted from its source and added to its target",
    CUM_MONOTONE: "check the sign of the flows feeding the cumulative outputs",
    PARAM_NONNEG: "revise the transition structure so the data no longer demands a negative rate",
    NUM_STABLE: "lower rate magnitudes or shorten the step size driving the divergence",
    GRAPH_CODE_CONSISTENT: "regenerate the model specification from the verified graph",
}


@dataclass(frozen=True)
class FeedbackItem:
    finding: str
    suggestion: str

    def render(self) -> str:
        return f"- {self.finding}\n  suggestion: {self.suggestion}"


@dataclass(frozen=True)
class FeedbackMessage:
    source: str                       # verification | validation | performance
    items: tuple[FeedbackItem, ...]
    final_loss: Optional[float] = None
    stalled: bool = False

    @property
    def empty(self) -> bool:
        return not self.items

    def render(self) -> str:
        if self.empty:
            return ""
        lines = [f"[{self.source}] revision required:"]
        lines.extend(item.render() for item in self.items)
        if self.final_loss is not None:
            lines.append(f"final loss: {self.final_loss:.6g}; "
                         f"trend {'stalled' if self.stalled else 'improving'}")
        return "\n".join(lines)


def loss_stalled(loss_history: Sequence[float],
                 window_fraction: float = STALL_WINDOW_FRACTION,
                 rtol: float = STALL_RTOL) -> bool:
    """True when the trailing window shows less than rtol relative improvement."""
    if len(loss_history) < 2:
        return False
    window = max(2, int(np.ceil(window_fraction * len(loss_history))))
    start = loss_history[len(loss_history) - window]
    end = loss_history[-1]
    scale = max(abs(start), 1e-300)
    return (start - end) / scale < rtol


def feedback_from_verdict(verdict) -> FeedbackMessage:
    """Wrap a structural graph verdict as planner feedback."""
    items = tuple(
        FeedbackItem(v.render(), "remove or replace this transition")
        for v in verdict.violations
    )
    return FeedbackMessage("verification", items)


def generate_feedback(verification: Optional[VerificationReport],
                      validation: Optional[ValidationReport],
                      loss_history: Sequence[float] = ()) -> FeedbackMessage:
    """One deterministic item per failed check, violated ordering, or stall.

    Empty message iff every check passed, no ordering failed or collapsed,
    and the loss is still improving.
    """
    items: list[FeedbackItem] = []
    source = "performance"
    if verification is not None:
        for check in verification.failed_checks():
            items.append(FeedbackItem(f"{check.check_id}: {check.message}",
                                      _SUGGESTIONS.get(check.check_id, "revise the model")))
        if items:
            source = "verification"
    if validation is not None:
        validation_items: list[FeedbackItem] = []
        for o in validation.orderings:
            if not o.satisfied:
                a, b = o.pair
                validation_items.append(FeedbackItem(
                    (f"ordering violated: expected {o.metric}({a}) < {o.metric}({b}) "
                     f"but observed {o.value_a:.6g} vs {o.value_b:.6g}"),
                    "add or strengthen the mechanism that should separate these scenarios",
                ))
        if validation.scenario_collapse:
            validation_items.append(FeedbackItem(
                "scenario collapse: all scenarios produce outputs within tolerance of one another",
                "introduce the scenario-dependent mechanism the overrides are meant to drive",
            ))
        if validation_items and not items:
            source = "validation"
        items.extend(validation_items)
    stalled = loss_stalled(loss_history)
    final_loss = float(loss_history[-1]) if len(loss_history) else None
    if stalled:
        window = max(2, int(np.ceil(STALL_WINDOW_FRACTION * len(loss_history))))
        items.append(FeedbackItem(
            f"loss stalled: relative improvement over the last {window} steps "
            f"is below {STALL_RTOL:g}",
            "increase model expressiveness (time-varying rates or extra pathways)",
        ))
    return FeedbackMessage(source, tuple(items), final_loss=final_loss, stalled=stalled)
