"""Scenario parsing, lexical knowledge retrieval, and prompt assembly.

Scenarios bundle parameter overrides, exogenous schedules, and the
cross-scenario ordering expectations used by validation.  The knowledge
side indexes a directory of plain-text passages and scores them with BM25
(k1 = 1.2, b = 0.75, nonnegative idf variant) so retrieval is fully
deterministic and works offline.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

from .errors import ScenarioParseError

INTERPOLATIONS = ("piecewise-constant", "piecewise-linear")

ORDERING_METRICS = ("cumulative_infections", "cumulative_deaths", "peak_infections")

DEFAULT_ORDERING_TOLERANCE = 1e-3


@dataclass(frozen=True)
class Schedule:
    """Exogenous weekly signal (vaccination uptake, mobility modulation, ...).

    ``times`` are weekly indices; evaluation clamps outside the knot range.
    """

    times: tuple[float, ...]
    values: tuple[float, ...]
    interpolation: str = "piecewise-constant"

    def __post_init__(self):
        object.__setattr__(self, "times", tuple(float(t) for t in self.times))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if not self.times:
            raise ScenarioParseError("schedule requires at least one knot")
        if len(self.times) != len(self.values):
            raise ScenarioParseError("schedule times and values must have equal length")
        for a, b in zip(self.times, self.times[1:]):
            if not b > a:
                raise ScenarioParseError(
                    f"schedule times must be strictly increasing (got {a} then {b})"
                )
        for v in self.values:
            if not math.isfinite(v) or v < 0:
                raise ScenarioParseError(f"schedule values must be finite and >= 0 (got {v})")
        if self.interpolation not in INTERPOLATIONS:
            raise ScenarioParseError(
                f"interpolation must be one of {INTERPOLATIONS}, got {self.interpolation!r}"
            )

    def value_at(self, week: float) -> float:
        ts, vs = self.times, self.values
        if week <= ts[0]:
            return vs[0]
        if week >= ts[-1]:
            return vs[-1]
        # locate the knot interval containing `week`
        lo = 0
        for i in range(len(ts) - 1):
            if ts[i] <= week < ts[i + 1]:
                lo = i
                break
        if self.interpolation == "piecewise-constant":
            return vs[lo]
        w = (week - ts[lo]) / (ts[lo + 1] - ts[lo])
        return (1.0 - w) * vs[lo] + w * vs[lo + 1]


@dataclass(frozen=True)
class OrderingExpectation:
    """Asserts metric(a) < metric(b) for each listed scenario pair."""

    metric: str
    pairs: tuple[tuple[str, str], ...]
    tolerance: float = DEFAULT_ORDERING_TOLERANCE

    def __post_init__(self):
        if self.metric not in ORDERING_METRICS:
            raise ScenarioParseError(
                f"unknown ordering metric {self.metric!r}; expected one of {ORDERING_METRICS}"
            )
        object.__setattr__(
            self, "pairs", tuple((str(a), str(b)) for a, b in self.pairs)
        )
        if self.tolerance < 0:
            raise ScenarioParseError("ordering tolerance must be >= 0")


def _check_acyclic(expectations: Sequence[OrderingExpectation]) -> None:
    """Ordering pairs across all expectations must form a strict partial order."""
    edges: dict[str, set[str]] = {}
    for exp in expectations:
        for a, b in exp.pairs:
            if a == b:
                raise ScenarioParseError(f"ordering pair ({a!r}, {b!r}) is reflexive")
            edges.setdefault(a, set()).add(b)
            edges.setdefault(b, set())
    # iterative DFS cycle detection
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {n: WHITE for n in edges}
    for root in sorted(edges):
        if color[root] != WHITE:
            continue
        stack: list[tuple[str, iter]] = [(root, iter(sorted(edges[root])))]
        color[root] = GRAY
        while stack:
            node, it = stack[-1]
            advanced = False
            for nxt in it:
                if color[nxt] == GRAY:
                    raise ScenarioParseError(
                        f"ordering expectations contain a cycle through {nxt!r}"
                    )
                if color[nxt] == WHITE:
                    color[nxt] = GRAY
                    stack.append((nxt, iter(sorted(edges[nxt]))))
                    advanced = True
                    break
            if not advanced:
                color[node] = BLACK
                stack.pop()


OverrideValue = Union[float, Schedule]


@dataclass(frozen=True)
class Scenario:
    """A named counterfactual: overrides, exogenous schedules, expectations.

    ``initial`` optionally carries per-compartment starting fractions
    (applied uniformly across patches) so a scenario file is a complete,
    reproducible simulation input.
    """

    id: str
    description: str = ""
    overrides: Mapping[str, OverrideValue] = field(default_factory=dict)
    schedules: Mapping[str, Schedule] = field(default_factory=dict)
    expected_orderings: tuple[OrderingExpectation, ...] = ()
    initial: Optional[Mapping[str, float]] = None

    def __post_init__(self):
        object.__setattr__(self, "overrides", dict(self.overrides))
        object.__setattr__(self, "schedules", dict(self.schedules))
        object.__setattr__(self, "expected_orderings", tuple(self.expected_orderings))
        if not self.id:
            raise ScenarioParseError("scenario id must be nonempty")
        for name in self.overrides:
            if not name:
                raise ScenarioParseError("override keys must be nonempty")
        for name in self.schedules:
            if not name:
                raise ScenarioParseError("schedule names must be nonempty")
        _check_acyclic(self.expected_orderings)


def _parse_schedule(obj, where: str) -> Schedule:
    if not isinstance(obj, Mapping):
        raise ScenarioParseError(f"{where}: expected an object with times/values")
    for key in ("times", "values"):
        if key not in obj:
            raise ScenarioParseError(f"{where}: missing key {key!r}")
    return Schedule(
        tuple(obj["times"]),
        tuple(obj["values"]),
        obj.get("interpolation", "piecewise-constant"),
    )


def _parse_override(value, where: str) -> OverrideValue:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, Mapping):
        return _parse_schedule(value, where)
    raise ScenarioParseError(f"{where}: override must be a number or a knot spec")


def parse_scenario(document: Union[str, Mapping]) -> Scenario:
    """Parse a single scenario object (JSON text or decoded mapping)."""
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ScenarioParseError(f"malformed document: {exc}") from exc
    if not isinstance(document, Mapping):
        raise ScenarioParseError("scenario document must be an object")
    if "id" not in document:
        raise ScenarioParseError("scenario requires an 'id'")
    overrides = {}
    for name, value in (document.get("overrides") or {}).items():
        overrides[str(name)] = _parse_override(value, f"overrides[{name!r}]")
    schedules = {}
    for name, value in (document.get("schedules") or {}).items():
        schedules[str(name)] = _parse_schedule(value, f"schedules[{name!r}]")
    expectations = []
    for i, obj in enumerate(document.get("expected_orderings") or []):
        if not isinstance(obj, Mapping) or "metric" not in obj or "pairs" not in obj:
            raise ScenarioParseError(
                f"expected_orderings[{i}]: expected object with 'metric' and 'pairs'"
            )
        expectations.append(OrderingExpectation(
            str(obj["metric"]),
            tuple((str(a), str(b)) for a, b in obj["pairs"]),
            float(obj.get("tolerance", DEFAULT_ORDERING_TOLERANCE)),
        ))
    initial = document.get("initial")
    if initial is not None:
        if not isinstance(initial, Mapping):
            raise ScenarioParseError("'initial' must map compartment ids to fractions")
        initial = {str(k): float(v) for k, v in initial.items()}
    return Scenario(
        id=str(document["id"]),
        description=str(document.get("description", "")),
        overrides=overrides,
        schedules=schedules,
        expected_orderings=tuple(expectations),
        initial=initial,
    )


def parse_scenarios(document: Union[str, Mapping, list]) -> list[Scenario]:
    """Parse a document holding one scenario, a list, or {"scenarios": [...]}.

    Scenario ids must be distinct within one document.
    """
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ScenarioParseError(f"malformed document: {exc}") from exc
    if isinstance(document, Mapping) and "scenarios" in document:
        items = document["scenarios"]
    elif isinstance(document, list):
        items = document
    else:
        items = [document]
    if not isinstance(items, list):
        raise ScenarioParseError("'scenarios' must be a list")
    scenarios = [parse_scenario(obj) for obj in items]
    ids = [s.id for s in scenarios]
    dupes = {i for i in ids if ids.count(i) > 1}
    if dupes:
        raise ScenarioParseError(f"duplicate scenario id(s): {sorted(dupes)}")
    return scenarios


def load_scenarios(path: Union[str, Path]) -> list[Scenario]:
    return parse_scenarios(Path(path).read_text())


# ---------------------------------------------------------------------------
# Corpus and retrieval
# ---------------------------------------------------------------------------

_TOKEN = re.compile(r"[a-z0-9]+")

BM25_K1 = 1.2
BM25_B = 0.75


def tokenize(text: str) -> list[str]:
    """Lowercased alphanumeric word tokens."""
    return _TOKEN.findall(text.lower())


@dataclass(frozen=True)
class CorpusDocument:
    doc_id: str
    text: str
    term_counts: Mapping[str, int] = field(compare=False, default=None)

    def __post_init__(self):
        counts = Counter(tokenize(self.text))
        if self.term_counts is not None and dict(self.term_counts) != dict(counts):
            raise ValueError(
                f"term_counts for {self.doc_id!r} inconsistent with tokenization"
            )
        object.__setattr__(self, "term_counts", dict(counts))

    @property
    def length(self) -> int:
        return sum(self.term_counts.values())


def load_corpus(directory: Union[str, Path]) -> list[CorpusDocument]:
    """Index every *.txt (or extensionless) file; doc_id is the filename."""
    directory = Path(directory)
    docs = []
    for path in sorted(directory.iterdir()):
        if path.is_file():
            docs.append(CorpusDocument(path.name, path.read_text()))
    return docs


def retrieve(query: str, corpus: Sequence[CorpusDocument], k: int
             ) -> list[tuple[str, float]]:
    """Top-min(k, |corpus|) documents by BM25 score, ties by ascending doc_id.

    Uses the nonnegative idf variant ln(1 + (N - df + 0.5)/(df + 0.5)) so
    scores are >= 0 for any corpus composition.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not corpus:
        return []
    n_docs = len(corpus)
    avgdl = sum(d.length for d in corpus) / n_docs
    df: Counter = Counter()
    for d in corpus:
        df.update(d.term_counts.keys())
    q_tokens = tokenize(query)
    scored = []
    for d in corpus:
        s = 0.0
        if d.length and avgdl:
            norm = BM25_K1 * (1.0 - BM25_B + BM25_B * d.length / avgdl)
            for term in q_tokens:
                tf = d.term_counts.get(term, 0)
                if tf == 0:
                    continue
                idf = math.log(1.0 + (n_docs - df[term] + 0.5) / (df[term] + 0.5))
                s += idf * tf * (BM25_K1 + 1.0) / (tf + norm)
        scored.append((d.doc_id, s))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[: min(k, n_docs)]


# ---------------------------------------------------------------------------
# Prompt assembly
# ---------------------------------------------------------------------------

EXCERPT_CHARS = 400

CONSTRAINT_DIGEST = "\n".join(
    [
        "Hard flow-validity rules (any violation rejects the graph):",
        "  R1: S -> R forbidden (no direct recovery)",
        "  R2: S -> I forbidden (latent period required)",
        "  R3: {S, E, R, V, W} -> D forbidden (death only from severe states)",
        "  R4: D -> anything forbidden (terminal state)",
        "  R5: {E, I, J, H} -> V forbidden (vaccination eligibility)",
        "  R6: {S, E, I, J, H} -> W forbidden (waning semantics)",
        "  R7: {E, I, R, J, H} -> E forbidden (exposure semantics)",
        "  RA: infection flows start at S/V/W and cite infectious sources of kind I/H/J",
        "  RB: a graph with an infectious compartment needs an infection flow",
        "  RC: every compartment must connect to the rest of the graph",
        "Execution constraints:",
        "  - explicit time stepping; no NaNs or Infs",
        "  - states are population fractions in [0, 1]",
        "  - outputs: cumulative infections and deaths per patch and week",
        "  - disease parameters are shared across scenarios unless overridden",
        "  - scenario-specific overrides are fixed, never fitted",
        "  - no forced non-negativity; violations signal structural revision",
    ]
)

SKELETON_DIGEST = "\n".join(
    [
        "Respond with a JSON document matching the requested phase.",
        "Flow-graph documents: {compartments: [{id, kind, description}],",
        "  transitions: [{source, target, kind, params}], params: [names]}.",
        "  kind strings: S E I R D V W H J or custom:<label>;",
        "  transition kinds: linear {rate}, infection {beta, sources, escape?},",
        "  scheduled {schedule}.",
        "Model-spec documents: {parameters: {name: {type: constant, init: v} |",
        "  {type: time_varying, times: [weeks], init: v | [v...]}}}.",
        "  Every graph parameter must receive exactly one entry.",
    ]
)


@dataclass(frozen=True)
class PromptBundle:
    """Ordered prompt sections; feedback only ever appends."""

    scenario_text: str
    retrieved_passages: tuple[tuple[str, float, str], ...]
    constraint_digest: str = CONSTRAINT_DIGEST
    skeleton_digest: str = SKELETON_DIGEST
    feedback_sections: tuple[str, ...] = ()

    def __post_init__(self):
        scores = [s for _, s, _ in self.retrieved_passages]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError("retrieved passages must be sorted by nonincreasing score")

    def render(self) -> str:
        parts = ["## Scenario", self.scenario_text]
        if self.retrieved_passages:
            parts.append("## Retrieved knowledge")
            for doc_id, score, excerpt in self.retrieved_passages:
                parts.append(f"[{doc_id} | score={score:.4f}]\n{excerpt}")
        parts.append("## Constraints")
        parts.append(self.constraint_digest)
        parts.append("## Response format")
        parts.append(self.skeleton_digest)
        for section in self.feedback_sections:
            parts.append("## Feedback")
            parts.append(section)
        return "\n\n".join(parts)


def _render_feedback(feedback) -> str:
    if isinstance(feedback, str):
        return feedback
    render = getattr(feedback, "render", None)
    if render is None:
        raise TypeError(f"cannot render feedback of type {type(feedback).__name__}")
    return render()


def build_prompt(scenario: Scenario,
                 passages: Sequence[tuple[str, float]] | Sequence[tuple[str, float, str]],
                 feedback=None,
                 corpus: Optional[Sequence[CorpusDocument]] = None) -> PromptBundle:
    """Assemble the knowledge-augmented prompt for the planner.

    ``passages`` is retrieve() output; excerpts are looked up from ``corpus``
    when given, else passages may already carry excerpt strings.  ``feedback``
    is a single message, a sequence of them, or None; rendered sections are
    appended last, in order.
    """
    by_id = {d.doc_id: d for d in corpus} if corpus else {}
    triples = []
    for entry in passages:
        if len(entry) == 3:
            doc_id, score, excerpt = entry
        else:
            doc_id, score = entry
            doc = by_id.get(doc_id)
            excerpt = doc.text[:EXCERPT_CHARS] if doc else ""
        triples.append((doc_id, float(score), excerpt))
    sections: tuple[str, ...] = ()
    if feedback is not None:
        if isinstance(feedback, (list, tuple)):
            sections = tuple(_render_feedback(f) for f in feedback)
        else:
            sections = (_render_feedback(feedback),)
    return PromptBundle(
        scenario_text=f"{scenario.id}: {scenario.description}",
        retrieved_passages=tuple(triples),
        feedback_sections=sections,
    )


def append_feedback(bundle: PromptBundle, feedback) -> PromptBundle:
    """The prompt-composition operator: returns a bundle with one more section."""
    return PromptBundle(
        scenario_text=bundle.scenario_text,
        retrieved_passages=bundle.retrieved_passages,
        constraint_digest=bundle.constraint_digest,
        skeleton_digest=bundle.skeleton_digest,
        feedback_sections=bundle.feedback_sections + (_render_feedback(feedback),),
    )
