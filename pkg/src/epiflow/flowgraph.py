"""Compartmental flow-graph IR and the structural verifier.

A flow graph is a directed graph over disease compartments whose edges are
admissible transitions (linear rate, force-of-infection, or externally
scheduled).  Graphs are immutable once built.  Construction enforces the
referential type invariants (unique ids, resolvable endpoints, parameter
consistency); epidemiological admissibility is judged separately by
``validate_structure``, which accumulates every violation instead of
failing fast so callers can feed complete error reports back to whatever
produced the graph.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Union

from .errors import GraphParseError

# Reserved single-letter compartment kinds.
SUSCEPTIBLE = "S"
EXPOSED = "E"
INFECTIOUS = "I"
RECOVERED = "R"
DECEASED = "D"
VACCINATED = "V"
WANED = "W"
HOSPITALIZED = "H"
ISOLATED = "J"

RESERVED_KINDS = (
    SUSCEPTIBLE,
    EXPOSED,
    INFECTIOUS,
    RECOVERED,
    DECEASED,
    VACCINATED,
    WANED,
    HOSPITALIZED,
    ISOLATED,
)

# Kinds that may originate an infection flow, and kinds that may transmit.
INFECTION_ORIGIN_KINDS = frozenset({SUSCEPTIBLE, VACCINATED, WANED})
INFECTIOUS_SOURCE_KINDS = frozenset({INFECTIOUS, HOSPITALIZED, ISOLATED})

CUSTOM = "custom"


@dataclass(frozen=True)
class CompartmentKind:
    """One of the nine reserved kinds, or a custom-labelled stratum."""

    code: str
    label: str = ""

    def __post_init__(self):
        if self.code in RESERVED_KINDS:
            if self.label:
                raise GraphParseError(
                    f"reserved kind {self.code!r} must not carry a label"
                )
        elif self.code == CUSTOM:
            if not self.label:
                raise GraphParseError("custom kind requires a nonempty label")
            if self.label in RESERVED_KINDS:
                raise GraphParseError(
                    f"custom label {self.label!r} collides with a reserved kind"
                )
        else:
            raise GraphParseError(f"unknown compartment kind {self.code!r}")

    @classmethod
    def parse(cls, text: str) -> "CompartmentKind":
        if not isinstance(text, str):
            raise GraphParseError(f"compartment kind must be a string, got {text!r}")
        if text.startswith("custom:"):
            return cls(CUSTOM, text[len("custom:"):])
        return cls(text)

    @property
    def is_custom(self) -> bool:
        return self.code == CUSTOM

    def __str__(self) -> str:
        return f"custom:{self.label}" if self.is_custom else self.code


@dataclass(frozen=True)
class Compartment:
    id: str
    kind: CompartmentKind
    description: str = ""


@dataclass(frozen=True)
class Linear:
    """Flow at a constant-in-state rate: ``rate(t) * x_source``."""

    rate_param: str


@dataclass(frozen=True)
class Infection:
    """Force-of-infection flow, bilinear in the origin and infectious mass.

    ``escape_param`` optionally multiplies transmission (immune-escape knob);
    absent means a factor of one.
    """

    beta_param: str
    infectious_sources: frozenset[str]
    escape_param: Optional[str] = None

    def __init__(self, beta_param, infectious_sources, escape_param=None):
        object.__setattr__(self, "beta_param", beta_param)
        object.__setattr__(self, "infectious_sources", frozenset(infectious_sources))
        object.__setattr__(self, "escape_param", escape_param)


@dataclass(frozen=True)
class Scheduled:
    """Flow driven by an exogenous scenario schedule: ``h(t) * x_source``."""

    schedule: str


TransitionKind = Union[Linear, Infection, Scheduled]


@dataclass(frozen=True)
class Transition:
    source: str
    target: str
    kind: TransitionKind

    def params(self) -> tuple[str, ...]:
        """Parameter names this transition references (schedules excluded)."""
        k = self.kind
        if isinstance(k, Linear):
            return (k.rate_param,)
        if isinstance(k, Infection):
            if k.escape_param is not None:
                return (k.beta_param, k.escape_param)
            return (k.beta_param,)
        return ()


@dataclass(frozen=True)
class FlowGraph:
    """Verified-or-not compartmental graph; referentially valid by construction.

    Semantic admissibility (which flows are epidemiologically legal) is not
    enforced here: ``validate_structure`` judges it so that invalid graphs
    can still be represented, diffed, and reported on.
    """

    compartments: tuple[Compartment, ...]
    transitions: tuple[Transition, ...]
    param_names: frozenset[str]

    def __post_init__(self):
        object.__setattr__(self, "compartments", tuple(self.compartments))
        object.__setattr__(self, "transitions", tuple(self.transitions))
        object.__setattr__(self, "param_names", frozenset(self.param_names))
        if not self.compartments:
            raise GraphParseError("graph must declare at least one compartment")
        ids = [c.id for c in self.compartments]
        dupes = {i for i in ids if ids.count(i) > 1}
        if dupes:
            raise GraphParseError(f"duplicate compartment id(s): {sorted(dupes)}")
        known = set(ids)
        referenced: set[str] = set()
        seen_pairs: set[tuple[str, str]] = set()
        for t in self.transitions:
            if t.source == t.target:
                raise GraphParseError(f"self-loop on compartment {t.source!r}")
            pair = (t.source, t.target)
            if pair in seen_pairs:
                raise GraphParseError(
                    f"parallel transition {t.source!r} -> {t.target!r}"
                )
            seen_pairs.add(pair)
            for end in pair:
                if end not in known:
                    raise GraphParseError(
                        f"transition endpoint {end!r} is not a declared compartment"
                    )
            if isinstance(t.kind, Infection):
                for src in t.kind.infectious_sources:
                    if src not in known:
                        raise GraphParseError(
                            f"infectious source {src!r} is not a declared compartment"
                        )
            referenced.update(t.params())
        if referenced != self.param_names:
            missing = sorted(referenced - self.param_names)
            unused = sorted(self.param_names - referenced)
            parts = []
            if missing:
                parts.append(f"referenced but undeclared: {missing}")
            if unused:
                parts.append(f"declared but unreferenced: {unused}")
            raise GraphParseError("parameter name mismatch; " + "; ".join(parts))

    @classmethod
    def build(cls, compartments: Iterable[Compartment],
              transitions: Iterable[Transition]) -> "FlowGraph":
        """Construct with param_names derived from the transitions."""
        transitions = tuple(transitions)
        names: set[str] = set()
        for t in transitions:
            names.update(t.params())
        return cls(tuple(compartments), transitions, frozenset(names))

    def compartment(self, comp_id: str) -> Compartment:
        for c in self.compartments:
            if c.id == comp_id:
                return c
        raise KeyError(comp_id)

    def kind_of(self, comp_id: str) -> CompartmentKind:
        return self.compartment(comp_id).kind

    def has_kind(self, code: str) -> bool:
        return any(c.kind.code == code for c in self.compartments)

    def schedule_names(self) -> frozenset[str]:
        return frozenset(
            t.kind.schedule for t in self.transitions if isinstance(t.kind, Scheduled)
        )


# ---------------------------------------------------------------------------
# Structural verification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FlowRule:
    """A forbidden-flow predicate over (source kind, target kind, transition kind)."""

    rule_id: str
    forbidden: Callable[[CompartmentKind, CompartmentKind, TransitionKind], bool]
    message: str


def _pair_rule(sources: frozenset[str], targets: Optional[frozenset[str]]):
    """Predicate matching reserved source kinds against reserved targets.

    ``targets=None`` means any target (the terminal-state rule).  Custom
    kinds never match a named position, so edges touching custom strata are
    exempt from the reserved-kind rules.
    """

    def forbidden(src: CompartmentKind, tgt: CompartmentKind, _kind) -> bool:
        if src.code not in sources:
            return False
        if targets is None:
            return True
        return tgt.code in targets

    return forbidden


BUILT_IN_RULES: tuple[FlowRule, ...] = (
    FlowRule("R1", _pair_rule(frozenset("S"), frozenset("R")),
             "no direct recovery: susceptible individuals cannot move straight to recovered"),
    FlowRule("R2", _pair_rule(frozenset("S"), frozenset("I")),
             "latent period required: susceptible individuals must pass through exposure"),
    FlowRule("R3", _pair_rule(frozenset("SERVW"), frozenset("D")),
             "death only from severe states: flows into deceased must come from infectious, hospitalized, or isolated compartments"),
    FlowRule("R4", _pair_rule(frozenset("D"), None),
             "terminal state: deceased individuals cannot flow anywhere"),
    FlowRule("R5", _pair_rule(frozenset("EIJH"), frozenset("V")),
             "vaccination eligibility: actively exposed, infectious, isolated, or hospitalized individuals cannot be vaccinated"),
    FlowRule("R6", _pair_rule(frozenset("SEIJH"), frozenset("W")),
             "waning semantics: only recovered or vaccinated immunity can wane"),
    FlowRule("R7", _pair_rule(frozenset("EIRJH"), frozenset("E")),
             "exposure semantics: only susceptible-like compartments can become exposed"),
)

RULE_MESSAGES = {r.rule_id: r.message for r in BUILT_IN_RULES}


@dataclass(frozen=True)
class Violation:
    rule_id: str
    source: Optional[str]
    target: Optional[str]
    message: str

    def render(self) -> str:
        if self.source is not None and self.target is not None:
            return f"[{self.rule_id}] {self.source} -> {self.target}: {self.message}"
        return f"[{self.rule_id}] {self.message}"


@dataclass(frozen=True)
class GraphVerdict:
    violations: tuple[Violation, ...]

    @property
    def status(self) -> str:
        return "Pass" if not self.violations else "Fail"

    @property
    def passed(self) -> bool:
        return not self.violations

    def rule_ids(self) -> frozenset[str]:
        return frozenset(v.rule_id for v in self.violations)

    def render(self) -> str:
        if self.passed:
            return "Pass"
        lines = [f"Fail ({len(self.violations)} violation(s))"]
        lines.extend("  " + v.render() for v in self.violations)
        return "\n".join(lines)


def validate_structure(graph: FlowGraph) -> GraphVerdict:
    """Apply the forbidden-flow rules plus the infection/connectivity audits.

    Accumulates every violation.  Rules R1-R7 are pairwise predicates over
    the reserved kinds; RA re-checks infection-transition semantics, RB
    requires an infection path whenever an infectious compartment exists,
    and RC rejects weakly disconnected graphs (inert mass is a spec error).
    """
    violations: list[Violation] = []
    for t in graph.transitions:
        src_kind = graph.kind_of(t.source)
        tgt_kind = graph.kind_of(t.target)
        for rule in BUILT_IN_RULES:
            if rule.forbidden(src_kind, tgt_kind, t.kind):
                violations.append(
                    Violation(rule.rule_id, t.source, t.target, rule.message)
                )
        if isinstance(t.kind, Infection):
            if src_kind.code not in INFECTION_ORIGIN_KINDS:
                violations.append(Violation(
                    "RA", t.source, t.target,
                    f"infection must originate at a susceptible, vaccinated, or waned compartment (got kind {src_kind})",
                ))
            if not t.kind.infectious_sources:
                violations.append(Violation(
                    "RA", t.source, t.target,
                    "infection transition lists no infectious sources",
                ))
            for src in sorted(t.kind.infectious_sources):
                if graph.kind_of(src).code not in INFECTIOUS_SOURCE_KINDS:
                    violations.append(Violation(
                        "RA", t.source, t.target,
                        f"infectious source {src!r} must be infectious, hospitalized, or isolated (got kind {graph.kind_of(src)})",
                    ))
    has_infection = any(isinstance(t.kind, Infection) for t in graph.transitions)
    if graph.has_kind(INFECTIOUS) and not has_infection:
        violations.append(Violation(
            "RB", None, None,
            "graph declares an infectious compartment but no infection transition",
        ))
    unreachable = _disconnected_ids(graph)
    if unreachable:
        violations.append(Violation(
            "RC", None, None,
            f"graph is not weakly connected; isolated compartment(s): {sorted(unreachable)}",
        ))
    return GraphVerdict(tuple(violations))


def _disconnected_ids(graph: FlowGraph) -> set[str]:
    """Ids outside the weakly connected component of the first compartment."""
    if len(graph.compartments) <= 1:
        return set()
    adj: dict[str, set[str]] = {c.id: set() for c in graph.compartments}
    for t in graph.transitions:
        adj[t.source].add(t.target)
        adj[t.target].add(t.source)
    start = graph.compartments[0].id
    seen = {start}
    stack = [start]
    while stack:
        for nxt in adj[stack.pop()]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return {c.id for c in graph.compartments} - seen


# ---------------------------------------------------------------------------
# Serialization (the flow-graph document schema)
# ---------------------------------------------------------------------------

_KIND_TAGS = {"linear": Linear, "infection": Infection, "scheduled": Scheduled}


def _parse_transition(obj: Mapping, index: int) -> Transition:
    where = f"transitions[{index}]"
    if not isinstance(obj, Mapping):
        raise GraphParseError(f"{where}: expected an object")
    for key in ("source", "target", "kind"):
        if key not in obj:
            raise GraphParseError(f"{where}: missing key {key!r}")
    kind_tag = obj["kind"]
    params = obj.get("params", {})
    if not isinstance(params, Mapping):
        raise GraphParseError(f"{where}: 'params' must be an object")
    if kind_tag == "linear":
        if "rate" not in params:
            raise GraphParseError(f"{where}: linear transition requires params.rate")
        kind: TransitionKind = Linear(str(params["rate"]))
    elif kind_tag == "infection":
        if "beta" not in params:
            raise GraphParseError(f"{where}: infection transition requires params.beta")
        sources = params.get("sources", [])
        if not isinstance(sources, (list, tuple)):
            raise GraphParseError(f"{where}: params.sources must be a list")
        escape = params.get("escape")
        kind = Infection(str(params["beta"]), [str(s) for s in sources],
                         None if escape is None else str(escape))
    elif kind_tag == "scheduled":
        if "schedule" not in params:
            raise GraphParseError(f"{where}: scheduled transition requires params.schedule")
        kind = Scheduled(str(params["schedule"]))
    else:
        raise GraphParseError(f"{where}: unknown transition kind {kind_tag!r}")
    return Transition(str(obj["source"]), str(obj["target"]), kind)


def parse_graph(document: Union[str, Mapping]) -> FlowGraph:
    """Parse a flow-graph document (JSON text or an already-decoded mapping).

    Raises GraphParseError naming the first violated constraint and where
    it occurred.
    """
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise GraphParseError(f"malformed document: {exc}") from exc
    if not isinstance(document, Mapping):
        raise GraphParseError("graph document must be an object")
    comps_raw = document.get("compartments", [])
    if not isinstance(comps_raw, list):
        raise GraphParseError("'compartments' must be a list")
    if not comps_raw:
        raise GraphParseError("graph must declare at least one compartment")
    compartments = []
    for i, obj in enumerate(comps_raw):
        if not isinstance(obj, Mapping) or "id" not in obj or "kind" not in obj:
            raise GraphParseError(f"compartments[{i}]: expected object with 'id' and 'kind'")
        compartments.append(Compartment(
            str(obj["id"]),
            CompartmentKind.parse(obj["kind"]),
            str(obj.get("description", "")),
        ))
    trans_raw = document.get("transitions", [])
    if not isinstance(trans_raw, list):
        raise GraphParseError("'transitions' must be a list")
    transitions = [_parse_transition(obj, i) for i, obj in enumerate(trans_raw)]
    declared = document.get("params")
    if declared is None:
        names: set[str] = set()
        for t in transitions:
            names.update(t.params())
        declared = sorted(names)
    if not isinstance(declared, list):
        raise GraphParseError("'params' must be a list of names")
    return FlowGraph(tuple(compartments), tuple(transitions),
                     frozenset(str(p) for p in declared))


def serialize_graph(graph: FlowGraph) -> dict:
    """Inverse of parse_graph: parse(serialize(g)) == g."""
    transitions = []
    for t in graph.transitions:
        k = t.kind
        if isinstance(k, Linear):
            entry = {"kind": "linear", "params": {"rate": k.rate_param}}
        elif isinstance(k, Infection):
            params: dict = {"beta": k.beta_param,
                            "sources": sorted(k.infectious_sources)}
            if k.escape_param is not None:
                params["escape"] = k.escape_param
            entry = {"kind": "infection", "params": params}
        else:
            entry = {"kind": "scheduled", "params": {"schedule": k.schedule}}
        entry["source"] = t.source
        entry["target"] = t.target
        transitions.append(entry)
    return {
        "compartments": [
            {"id": c.id, "kind": str(c.kind), "description": c.description}
            for c in graph.compartments
        ],
        "transitions": transitions,
        "params": sorted(graph.param_names),
    }


def graph_to_json(graph: FlowGraph) -> str:
    return json.dumps(serialize_graph(graph), sort_keys=True, indent=2)


# ---------------------------------------------------------------------------
# Diffing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GraphDelta:
    added_compartments: tuple[Compartment, ...]
    removed_compartments: tuple[Compartment, ...]
    added_transitions: tuple[Transition, ...]
    removed_transitions: tuple[Transition, ...]

    @property
    def empty(self) -> bool:
        return not (self.added_compartments or self.removed_compartments
                    or self.added_transitions or self.removed_transitions)

    def render(self) -> str:
        if self.empty:
            return "no structural changes"
        lines = []
        for c in self.added_compartments:
            lines.append(f"+ compartment {c.id} ({c.kind})")
        for c in self.removed_compartments:
            lines.append(f"- compartment {c.id} ({c.kind})")
        for t in self.added_transitions:
            lines.append(f"+ transition {t.source} -> {t.target}")
        for t in self.removed_transitions:
            lines.append(f"- transition {t.source} -> {t.target}")
        return "\n".join(lines)


def graph_diff(old: FlowGraph, new: FlowGraph) -> GraphDelta:
    """Structural delta; applying it to ``old`` yields ``new``.

    Compartments and transitions are compared by full value, so a changed
    kind or rate parameter shows up as removed + added under the same id.
    """
    old_comps, new_comps = set(old.compartments), set(new.compartments)
    old_trans, new_trans = set(old.transitions), set(new.transitions)

    def _ckey(c: Compartment):
        return c.id

    def _tkey(t: Transition):
        return (t.source, t.target)

    return GraphDelta(
        tuple(sorted(new_comps - old_comps, key=_ckey)),
        tuple(sorted(old_comps - new_comps, key=_ckey)),
        tuple(sorted(new_trans - old_trans, key=_tkey)),
        tuple(sorted(old_trans - new_trans, key=_tkey)),
    )
