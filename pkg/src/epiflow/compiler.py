"""Compilation of a verified flow graph into a patch-stratified ODE system.

States are population fractions, laid out patch-major: slot(p, k) = p*K + k.
Time inside the right-hand side is measured in days; schedules and
time-varying parameter knots are indexed in weeks, so evaluation converts
with week = t_days / 7.

Every flow is subtracted from its source slot and added to its target slot,
which makes the system mass-closed by construction (the deceased compartment
is an ordinary slot, so the total including it is conserved).  The bound
model also exposes analytic Jacobians with respect to state and to the flat
trainable parameter vector; calibration integrates these forward to obtain
exact sensitivities of the discrete Euler recurrence.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .errors import BindError, CompileError, GraphParseError
from .flowgraph import (
    DECEASED,
    EXPOSED,
    FlowGraph,
    INFECTIOUS,
    Infection,
    Linear,
    Scheduled,
    validate_structure,
)
from .scenario_kb import Scenario, Schedule

DAYS_PER_WEEK = 7.0

# Output channel order used everywhere downstream.
OUT_INFECTIONS = 0
OUT_DEATHS = 1
N_OUTPUTS = 2


# ---------------------------------------------------------------------------
# Patch structure
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PatchStructure:
    """Sub-populations (spatial regions or age groups) coupled by contacts."""

    patch_ids: tuple[str, ...]
    populations: np.ndarray
    contact_matrix: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "patch_ids", tuple(str(p) for p in self.patch_ids))
        pops = np.asarray(self.populations, dtype=float)
        if pops.ndim != 1 or len(pops) != len(self.patch_ids):
            raise CompileError("populations must be one value per patch")
        if np.any(pops <= 0):
            raise CompileError("patch populations must be positive")
        object.__setattr__(self, "populations", pops)
        if self.contact_matrix is None:
            c = np.eye(len(self.patch_ids))
        else:
            c = np.asarray(self.contact_matrix, dtype=float)
        if c.shape != (len(self.patch_ids), len(self.patch_ids)):
            raise CompileError(
                f"contact matrix must be {len(self.patch_ids)}x{len(self.patch_ids)}"
            )
        if np.any(c < 0):
            raise CompileError("contact matrix entries must be >= 0")
        object.__setattr__(self, "contact_matrix", c)

    @property
    def num_patches(self) -> int:
        return len(self.patch_ids)


def single_patch(population: float = 1.0) -> PatchStructure:
    return PatchStructure(("patch0",), np.array([population]))


def load_patches(patch_csv: Union[str, Path],
                 contact_csv: Optional[Union[str, Path]] = None,
                 row_normalize: bool = False) -> PatchStructure:
    """Read patches from CSV (columns patch_id, population) plus optional
    contact matrix CSV (P rows x P columns, no header)."""
    ids, pops = [], []
    with open(patch_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            ids.append(row["patch_id"].strip())
            pops.append(float(row["population"]))
    contact = None
    if contact_csv is not None:
        rows = []
        with open(contact_csv, newline="") as fh:
            for row in csv.reader(fh):
                if row:
                    rows.append([float(v) for v in row])
        contact = np.array(rows, dtype=float)
        if row_normalize:
            sums = contact.sum(axis=1, keepdims=True)
            sums[sums == 0] = 1.0
            contact = contact / sums
    return PatchStructure(tuple(ids), np.array(pops), contact)


# ---------------------------------------------------------------------------
# Parameter set and flat layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Constant:
    value: float


@dataclass(frozen=True)
class TimeVarying:
    """Piecewise-linear trainable knots at fixed weekly times."""

    times: tuple[float, ...]
    values: tuple[float, ...]
    trainable: tuple[bool, ...] = None

    def __post_init__(self):
        object.__setattr__(self, "times", tuple(float(t) for t in self.times))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if self.trainable is None:
            object.__setattr__(self, "trainable", tuple(True for _ in self.times))
        else:
            object.__setattr__(self, "trainable", tuple(bool(b) for b in self.trainable))
        if len(self.times) < 2:
            raise CompileError("time-varying parameter needs at least two knots")
        if len(self.values) != len(self.times) or len(self.trainable) != len(self.times):
            raise CompileError("knot times/values/trainable lengths differ")
        for a, b in zip(self.times, self.times[1:]):
            if not b > a:
                raise CompileError("knot times must be strictly increasing")


ParamValue = Union[Constant, TimeVarying]


@dataclass(frozen=True)
class ParameterSet:
    """Named disease-parameter entries shared across scenarios.

    The flat trainable vector orders entries by sorted parameter name, then
    knot index; constants occupy one slot, time-varying entries one slot per
    trainable knot.
    """

    entries: Mapping[str, ParamValue]

    def __post_init__(self):
        object.__setattr__(self, "entries", dict(self.entries))

    @property
    def shared_names(self) -> frozenset[str]:
        return frozenset(self.entries)

    def validate_against(self, graph: FlowGraph) -> None:
        missing = sorted(graph.param_names - self.shared_names)
        extra = sorted(self.shared_names - graph.param_names)
        if missing:
            raise CompileError(f"parameters missing an entry: {missing}")
        if extra:
            raise CompileError(f"entries without a graph reference: {extra}")


def flat_layout(params: ParameterSet) -> list[tuple[str, Optional[int]]]:
    """Ordered (name, knot-index-or-None) labels for each trainable slot."""
    layout: list[tuple[str, Optional[int]]] = []
    for name in sorted(params.entries):
        entry = params.entries[name]
        if isinstance(entry, Constant):
            layout.append((name, None))
        else:
            for k, trainable in enumerate(entry.trainable):
                if trainable:
                    layout.append((name, k))
    return layout


def n_trainable(params: ParameterSet) -> int:
    return len(flat_layout(params))


def flat_index(params: ParameterSet, name: str, knot: Optional[int] = None) -> int:
    """Position of a named parameter (and knot, when time-varying) in the flat vector."""
    if name not in params.entries:
        raise BindError(f"unknown parameter {name!r}")
    entry = params.entries[name]
    if isinstance(entry, Constant):
        if knot is not None:
            raise BindError(f"parameter {name!r} is constant; no knot index")
    else:
        if knot is None:
            raise BindError(f"parameter {name!r} is time-varying; knot index required")
        if not 0 <= knot < len(entry.times):
            raise BindError(f"knot {knot} out of range for parameter {name!r}")
        if not entry.trainable[knot]:
            raise BindError(f"knot {knot} of parameter {name!r} is not trainable")
    for i, (n, k) in enumerate(flat_layout(params)):
        if n == name and k == knot:
            return i
    raise BindError(f"parameter {name!r} knot {knot!r} not in layout")


def initial_vector(params: ParameterSet) -> np.ndarray:
    """Flat vector holding the entries' own values (the calibration start)."""
    values = []
    for name, knot in flat_layout(params):
        entry = params.entries[name]
        values.append(entry.value if isinstance(entry, Constant) else entry.values[knot])
    return np.array(values, dtype=float)


def named_view(params: ParameterSet, theta: np.ndarray) -> dict[str, object]:
    """Map names to bound values: floats for constants, knot lists otherwise.

    Non-trainable knots keep the values recorded in the parameter set.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (n_trainable(params),):
        raise BindError(
            f"theta length {theta.shape} != trainable degrees of freedom {n_trainable(params)}"
        )
    positions = {label: i for i, label in enumerate(flat_layout(params))}
    view: dict[str, object] = {}
    for name in sorted(params.entries):
        entry = params.entries[name]
        if isinstance(entry, Constant):
            view[name] = float(theta[positions[(name, None)]])
        else:
            knots = []
            for k, trainable in enumerate(entry.trainable):
                knots.append(float(theta[positions[(name, k)]]) if trainable
                             else entry.values[k])
            view[name] = knots
    return view


def parse_parameter_spec(document: Union[str, Mapping],
                         graph: Optional[FlowGraph] = None) -> ParameterSet:
    """Parse a parameter/model-spec document.

    Accepts ``{"parameters": {...}}`` or a bare name->spec mapping, where a
    spec is a number (constant shorthand), ``{"type": "constant", "init": v}``,
    or ``{"type": "time_varying", "times": [...], "init": v | [...]}``.
    With ``graph`` given, entries must cover the graph's parameters exactly.
    """
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise CompileError(f"malformed parameter spec: {exc}") from exc
    if not isinstance(document, Mapping):
        raise CompileError("parameter spec must be an object")
    raw = document.get("parameters", document)
    if not isinstance(raw, Mapping):
        raise CompileError("'parameters' must be an object")
    entries: dict[str, ParamValue] = {}
    for name, spec in raw.items():
        name = str(name)
        where = f"parameters[{name!r}]"
        if isinstance(spec, (int, float)) and not isinstance(spec, bool):
            entries[name] = Constant(float(spec))
            continue
        if not isinstance(spec, Mapping):
            raise CompileError(f"{where}: expected a number or an object")
        kind = spec.get("type", "constant")
        if kind == "constant":
            if "init" not in spec:
                raise CompileError(f"{where}: constant spec requires 'init'")
            entries[name] = Constant(float(spec["init"]))
        elif kind in ("time_varying", "knots"):
            times = spec.get("times")
            if not times:
                raise CompileError(f"{where}: time_varying spec requires 'times'")
            init = spec.get("init", 0.0)
            if isinstance(init, (int, float)):
                values = [float(init)] * len(times)
            else:
                values = [float(v) for v in init]
            trainable = spec.get("trainable")
            entries[name] = TimeVarying(tuple(times), tuple(values),
                                        None if trainable is None else tuple(trainable))
        else:
            raise CompileError(f"{where}: unknown parameter type {kind!r}")
    params = ParameterSet(entries)
    if graph is not None:
        try:
            params.validate_against(graph)
        except CompileError as exc:
            raise CompileError(f"parameter spec does not match graph: {exc}") from exc
    return params


# ---------------------------------------------------------------------------
# Scenario-resolved rate evaluators
# ---------------------------------------------------------------------------
# A resolver yields value(week, theta) plus the (slot, weight) pairs of its
# derivative wrt the flat vector.  All parameterizations are linear in theta,
# so the weights depend on time only.

class _FixedConst:
    __slots__ = ("v",)

    def __init__(self, v: float):
        self.v = float(v)

    def value(self, week, theta):
        return self.v

    def grads(self, week):
        return ()


class _FixedSchedule:
    __slots__ = ("schedule",)

    def __init__(self, schedule: Schedule):
        self.schedule = schedule

    def value(self, week, theta):
        return self.schedule.value_at(week)

    def grads(self, week):
        return ()


class _ThetaConst:
    __slots__ = ("slot",)

    def __init__(self, slot: int):
        self.slot = slot

    def value(self, week, theta):
        return theta[self.slot]

    def grads(self, week):
        return ((self.slot, 1.0),)


class _ThetaKnots:
    """Piecewise-linear interpolation over knots, clamped outside the range.

    Each knot is either a theta slot (trainable) or a fixed value.
    """

    __slots__ = ("times", "slots", "fixed")

    def __init__(self, times, slots, fixed):
        self.times = times       # tuple of weeks
        self.slots = slots       # per knot: theta slot or None
        self.fixed = fixed       # per knot: fixed value or None

    def _weights(self, week):
        ts = self.times
        if week <= ts[0]:
            return ((0, 1.0),)
        if week >= ts[-1]:
            return ((len(ts) - 1, 1.0),)
        for i in range(len(ts) - 1):
            if ts[i] <= week < ts[i + 1]:
                w = (week - ts[i]) / (ts[i + 1] - ts[i])
                return ((i, 1.0 - w), (i + 1, w))
        return ((len(ts) - 1, 1.0),)

    def value(self, week, theta):
        total = 0.0
        for k, w in self._weights(week):
            v = theta[self.slots[k]] if self.slots[k] is not None else self.fixed[k]
            total += w * v
        return total

    def grads(self, week):
        return tuple((self.slots[k], w) for k, w in self._weights(week)
                     if self.slots[k] is not None and w != 0.0)


class _Product:
    """Product of two resolvers (transmission rate times escape factor)."""

    __slots__ = ("a", "b")

    def __init__(self, a, b):
        self.a = a
        self.b = b

    def value(self, week, theta):
        return self.a.value(week, theta) * self.b.value(week, theta)

    def grads_at(self, week, theta):
        va = self.a.value(week, theta)
        vb = self.b.value(week, theta)
        out = [(slot, w * vb) for slot, w in self.a.grads(week)]
        out.extend((slot, w * va) for slot, w in self.b.grads(week))
        return out


_UNIT = _FixedConst(1.0)


def _resolver_for(name: str, scenario: Scenario, params: ParameterSet,
                  positions: Mapping[tuple[str, Optional[int]], int]):
    if name in scenario.overrides:
        value = scenario.overrides[name]
        if isinstance(value, Schedule):
            return _FixedSchedule(value)
        return _FixedConst(value)
    entry = params.entries[name]
    if isinstance(entry, Constant):
        return _ThetaConst(positions[(name, None)])
    slots, fixed = [], []
    for k, trainable in enumerate(entry.trainable):
        slots.append(positions[(name, k)] if trainable else None)
        fixed.append(None if trainable else entry.values[k])
    return _ThetaKnots(entry.times, tuple(slots), tuple(fixed))


# ---------------------------------------------------------------------------
# Compiled transitions and the model
# ---------------------------------------------------------------------------

@dataclass
class _CompiledTransition:
    source: str
    target: str
    src_k: int
    tgt_k: int
    rate: object                       # resolver (or _Product for infection)
    is_infection: bool = False
    source_cols: tuple[int, ...] = ()  # compartment indices of infectious sources
    label: str = ""


@dataclass(frozen=True)
class CompiledModel:
    """Patch-stratified ODE system derived from a verified graph.

    Immutable; binding a flat parameter vector produces an evaluator and
    never mutates the model.
    """

    graph: FlowGraph
    scenario: Scenario
    patches: PatchStructure
    params: ParameterSet
    layout: tuple[tuple[str, str], ...]       # (patch_id, compartment_id) per slot
    compartment_ids: tuple[str, ...]
    transitions: tuple[_CompiledTransition, ...] = field(repr=False)
    infection_target_kind: str = EXPOSED

    @property
    def bound_scenario(self) -> str:
        return self.scenario.id

    @property
    def num_patches(self) -> int:
        return self.patches.num_patches

    @property
    def num_compartments(self) -> int:
        return len(self.compartment_ids)

    @property
    def n_state(self) -> int:
        return self.num_patches * self.num_compartments

    @property
    def n_theta(self) -> int:
        return n_trainable(self.params)

    def slot_names(self) -> tuple[str, ...]:
        return tuple(f"{p}/{c}" for p, c in self.layout)


def compile(graph: FlowGraph, scenario: Scenario, patches: PatchStructure,
            params: ParameterSet, allow_unverified: bool = False) -> CompiledModel:
    """Instantiate the ODE system for one scenario.

    Refuses graphs that fail structural verification unless
    ``allow_unverified`` is set (the error-propagation ablation switch).
    """
    verdict = validate_structure(graph)
    if not verdict.passed and not allow_unverified:
        raise CompileError(
            "graph failed structural verification:\n" + verdict.render()
        )
    params.validate_against(graph)
    for name in scenario.overrides:
        if name not in params.entries:
            raise CompileError(
                f"scenario {scenario.id!r} overrides unknown parameter {name!r}"
            )
    for t in graph.transitions:
        if isinstance(t.kind, Scheduled) and t.kind.schedule not in scenario.schedules:
            raise CompileError(
                f"transition {t.source} -> {t.target} references schedule "
                f"{t.kind.schedule!r}, not declared by scenario {scenario.id!r}"
            )

    comp_ids = tuple(c.id for c in graph.compartments)
    comp_index = {cid: i for i, cid in enumerate(comp_ids)}
    positions = {label: i for i, label in enumerate(flat_layout(params))}

    compiled = []
    for t in graph.transitions:
        k = t.kind
        if isinstance(k, Linear):
            rate = _resolver_for(k.rate_param, scenario, params, positions)
            compiled.append(_CompiledTransition(
                t.source, t.target, comp_index[t.source], comp_index[t.target],
                rate, label=f"{t.source}->{t.target}"))
        elif isinstance(k, Scheduled):
            rate = _FixedSchedule(scenario.schedules[k.schedule])
            compiled.append(_CompiledTransition(
                t.source, t.target, comp_index[t.source], comp_index[t.target],
                rate, label=f"{t.source}->{t.target}"))
        else:
            beta = _resolver_for(k.beta_param, scenario, params, positions)
            esc = (_resolver_for(k.escape_param, scenario, params, positions)
                   if k.escape_param is not None else _UNIT)
            compiled.append(_CompiledTransition(
                t.source, t.target, comp_index[t.source], comp_index[t.target],
                _Product(beta, esc), is_infection=True,
                source_cols=tuple(sorted(comp_index[s] for s in k.infectious_sources)),
                label=f"{t.source}->{t.target}"))

    layout = tuple((p, c) for p in patches.patch_ids for c in comp_ids)
    # incidence accumulators: inflow into exposed-kind targets, falling back
    # to infectious-kind when the graph has no exposed compartment
    infection_target = EXPOSED if graph.has_kind(EXPOSED) else INFECTIOUS
    return CompiledModel(
        graph=graph, scenario=scenario, patches=patches, params=params,
        layout=layout, compartment_ids=comp_ids,
        transitions=tuple(compiled), infection_target_kind=infection_target,
    )


# ---------------------------------------------------------------------------
# Bound evaluator
# ---------------------------------------------------------------------------

@dataclass
class RhsEval:
    dxdt: np.ndarray                       # (n_state,)
    out_rates: np.ndarray                  # (2, P): incidence, death inflow
    jac_x: Optional[np.ndarray] = None     # (n, n)
    jac_theta: Optional[np.ndarray] = None  # (n, m)
    out_jac_x: Optional[np.ndarray] = None     # (2, P, n)
    out_jac_theta: Optional[np.ndarray] = None  # (2, P, m)


class BoundModel:
    """CompiledModel plus a flat parameter vector; evaluation is pure."""

    def __init__(self, model: CompiledModel, theta: np.ndarray):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (model.n_theta,):
            raise BindError(
                f"theta has length {theta.size}, model has {model.n_theta} "
                "trainable degrees of freedom"
            )
        self.model = model
        self.theta = theta.copy()
        self._kinds = {c.id: c.kind.code for c in model.graph.compartments}
        self._inf_rows = [model.compartment_ids.index(c.id)
                          for c in model.graph.compartments
                          if c.kind.code == model.infection_target_kind]
        self._death_rows = [model.compartment_ids.index(c.id)
                            for c in model.graph.compartments
                            if c.kind.code == DECEASED]

    def named_theta(self) -> dict[str, object]:
        return named_view(self.model.params, self.theta)

    def rhs(self, x: np.ndarray, t: float) -> np.ndarray:
        return self.eval_full(x, t, with_jac=False).dxdt

    def output_rates(self, x: np.ndarray, t: float) -> np.ndarray:
        return self.eval_full(x, t, with_jac=False).out_rates

    def eval_full(self, x: np.ndarray, t: float, with_jac: bool = True) -> RhsEval:
        m = self.model
        P, K = m.num_patches, m.num_compartments
        n, n_th = m.n_state, m.n_theta
        theta = self.theta
        week = t / DAYS_PER_WEEK
        X = np.asarray(x, dtype=float).reshape(P, K)
        C = m.patches.contact_matrix
        dX = np.zeros((P, K))
        out = np.zeros((N_OUTPUTS, P))
        jac_x = np.zeros((n, n)) if with_jac else None
        jac_th = np.zeros((n, n_th)) if with_jac else None
        out_jx = np.zeros((N_OUTPUTS, P, n)) if with_jac else None
        out_jth = np.zeros((N_OUTPUTS, P, n_th)) if with_jac else None
        p_arange = np.arange(P)

        for tr in m.transitions:
            src_idx = p_arange * K + tr.src_k
            tgt_idx = p_arange * K + tr.tgt_k
            xsrc = X[:, tr.src_k]
            out_rows = []
            if self._kinds[tr.target] == m.infection_target_kind:
                out_rows.append(OUT_INFECTIONS)
            if self._kinds[tr.target] == DECEASED:
                out_rows.append(OUT_DEATHS)

            if not tr.is_infection:
                r = tr.rate.value(week, theta)
                flow = r * xsrc
                dX[:, tr.src_k] -= flow
                dX[:, tr.tgt_k] += flow
                for o in out_rows:
                    out[o] += flow
                if with_jac:
                    jac_x[src_idx, src_idx] -= r
                    jac_x[tgt_idx, src_idx] += r
                    for o in out_rows:
                        out_jx[o, p_arange, src_idx] += r
                    for slot, w in tr.rate.grads(week):
                        jac_th[src_idx, slot] -= w * xsrc
                        jac_th[tgt_idx, slot] += w * xsrc
                        for o in out_rows:
                            out_jth[o, :, slot] += w * xsrc
            else:
                b = tr.rate.value(week, theta)
                Y = X[:, tr.source_cols].sum(axis=1)       # infectious mass per patch
                M = C @ Y                                  # contact-weighted exposure
                flow = b * xsrc * M
                dX[:, tr.src_k] -= flow
                dX[:, tr.tgt_k] += flow
                for o in out_rows:
                    out[o] += flow
                if with_jac:
                    jac_x[src_idx, src_idx] -= b * M
                    jac_x[tgt_idx, src_idx] += b * M
                    cross = b * xsrc[:, None] * C          # (P, P')
                    for j in tr.source_cols:
                        j_idx = p_arange * K + j
                        jac_x[np.ix_(src_idx, j_idx)] -= cross
                        jac_x[np.ix_(tgt_idx, j_idx)] += cross
                    for o in out_rows:
                        out_jx[o, p_arange, src_idx] += b * M
                        for j in tr.source_cols:
                            j_idx = p_arange * K + j
                            out_jx[o][np.ix_(p_arange, j_idx)] += cross
                    dflow_db = xsrc * M
                    for slot, w in tr.rate.grads_at(week, theta):
                        jac_th[src_idx, slot] -= w * dflow_db
                        jac_th[tgt_idx, slot] += w * dflow_db
                        for o in out_rows:
                            out_jth[o, :, slot] += w * dflow_db

        return RhsEval(dX.reshape(n), out, jac_x, jac_th, out_jx, out_jth)


def bind_parameters(model: CompiledModel, theta: Sequence[float]) -> BoundModel:
    """Bind a flat vector; position i corresponds to flat_layout(params)[i]."""
    return BoundModel(model, np.asarray(theta, dtype=float))
