"""Bounded generate-verify-calibrate-validate orchestration over a planner.

A planner (scripted for tests, HTTP-backed for live runs) proposes flow-graph
documents and model specifications.  The graph loop regenerates against
structural verdicts until the verifier passes; the generation loop compiles,
calibrates, and V&V-checks model specs, feeding error traces and targeted
feedback back into the prompt.  Temperature starts at zero each loop and
rises only when repeated or cyclic responses are detected, so progress comes
from feedback first and sampling noise last.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Protocol, Sequence, Union

import numpy as np

from . import compiler as compiler_mod
from .calibration import (
    CalibrationConfig,
    CalibrationResult,
    Dataset,
    FitTask,
    calibrate,
)
from .compiler import (
    CompiledModel,
    ParameterSet,
    PatchStructure,
    bind_parameters,
    initial_vector,
    named_view,
    parse_parameter_spec,
)
from .errors import (
    CompileError,
    EpiflowError,
    GraphBudgetExhausted,
    GraphParseError,
    PlannerError,
    PlannerTransportError,
    SimulationError,
)
from .flowgraph import (
    FlowGraph,
    GraphVerdict,
    parse_graph,
    serialize_graph,
    validate_structure,
)
from .scenario_kb import (
    CorpusDocument,
    PromptBundle,
    Scenario,
    append_feedback,
    build_prompt,
    retrieve,
)
from .simulator import InitialCondition, simulate
from .vnv import (
    FAIL,
    PASS,
    ValidationReport,
    VerificationReport,
    VnvTolerances,
    combine_reports,
    feedback_from_verdict,
    generate_feedback,
    validate_scenarios,
    verify_graph_consistency,
    verify_parameters,
    verify_trajectory,
)

GRAPH_SYNTHESIS = "GraphSynthesis"
MODEL_SPEC = "ModelSpec"


@dataclass(frozen=True)
class PlannerRequest:
    phase: str
    prompt: PromptBundle
    temperature: float
    attempt: int

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class PlannerResponse:
    payload: object          # decoded document, or raw text when undecodable
    raw_text: str
    fingerprint: str

    @classmethod
    def from_text(cls, text: str) -> "PlannerResponse":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError:
            payload = text
        return cls(payload, text, fingerprint_of(text))


def fingerprint_of(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class Planner(Protocol):
    def propose(self, request: PlannerRequest) -> PlannerResponse: ...


def detect_repetition(fingerprints: Sequence[str]) -> bool:
    """Latest fingerprint seen before, or the last four form a period-2 cycle."""
    if not fingerprints:
        return False
    latest = fingerprints[-1]
    if latest in fingerprints[:-1]:
        return True
    if len(fingerprints) >= 4:
        a, b, c, d = fingerprints[-4:]
        if a == c and b == d and a != b:
            return True
    return False


@dataclass(frozen=True)
class LoopConfig:
    max_graph_iters: int = 5
    max_code_retries: int = 3
    max_generations: int = 4
    temperature_step: float = 0.3
    accept_loss_epsilon: float = float("inf")
    retrieval_k: int = 5
    verify_graphs: bool = True      # ablation switch for the graph verifier

    def __post_init__(self):
        if min(self.max_graph_iters, self.max_code_retries, self.max_generations) < 1:
            raise ValueError("loop budgets must be positive")
        if self.temperature_step <= 0:
            raise ValueError("temperature step must be positive")
        if not self.accept_loss_epsilon > 0:
            raise ValueError("acceptance epsilon must be positive")
        if self.retrieval_k < 1:
            raise ValueError("retrieval k must be >= 1")


# ---------------------------------------------------------------------------
# Planners
# ---------------------------------------------------------------------------

class ScriptedPlanner:
    """Replays fixed documents per phase; repeats the last one when exhausted.

    The workhorse for tests and reproducible pipelines: the whole loop runs
    deterministically against it, no network involved.
    """

    def __init__(self, graph_documents: Sequence[object] = (),
                 spec_documents: Sequence[object] = (),
                 repeat_last: bool = True):
        self._queues = {
            GRAPH_SYNTHESIS: list(graph_documents),
            MODEL_SPEC: list(spec_documents),
        }
        self._cursor = {GRAPH_SYNTHESIS: 0, MODEL_SPEC: 0}
        self.repeat_last = repeat_last
        self.calls = 0

    @classmethod
    def from_file(cls, path) -> "ScriptedPlanner":
        doc = json.loads(open(path).read())
        return cls(doc.get("graphs", ()), doc.get("specs", ()))

    def propose(self, request: PlannerRequest) -> PlannerResponse:
        queue = self._queues.get(request.phase)
        if queue is None:
            raise PlannerError(f"unknown phase {request.phase!r}")
        if not queue:
            raise PlannerError(f"scripted planner has no {request.phase} documents")
        index = self._cursor[request.phase]
        if index >= len(queue):
            if not self.repeat_last:
                raise PlannerError(f"scripted planner exhausted {request.phase} documents")
            index = len(queue) - 1
        self._cursor[request.phase] = index + 1
        self.calls += 1
        document = queue[index]
        text = document if isinstance(document, str) else json.dumps(document, sort_keys=True)
        return PlannerResponse.from_text(text)


class LlmPlanner:
    """Planner over an HTTP chat-completion-style endpoint.

    Reads EPIFLOW_LLM_ENDPOINT / EPIFLOW_LLM_API_KEY / EPIFLOW_LLM_MODEL when
    arguments are omitted; refuses to construct without an endpoint so
    offline runs fail fast toward the scripted planner.  Transport retries
    use exponential backoff; an unparseable payload is returned as raw text
    for the loop to convert into error-trace feedback, never raised.
    """

    def __init__(self, endpoint: Optional[str] = None, api_key: Optional[str] = None,
                 model: Optional[str] = None, timeout: float = 60.0,
                 max_attempts: int = 3, backoff_seconds: float = 1.0):
        self.endpoint = endpoint or os.environ.get("EPIFLOW_LLM_ENDPOINT")
        if not self.endpoint:
            raise PlannerError(
                "no LLM endpoint configured; set EPIFLOW_LLM_ENDPOINT or use "
                "a scripted planner"
            )
        self.api_key = api_key or os.environ.get("EPIFLOW_LLM_API_KEY", "")
        self.model = model or os.environ.get("EPIFLOW_LLM_MODEL", "default")
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff_seconds = backoff_seconds
        self.calls = 0

    def propose(self, request: PlannerRequest) -> PlannerResponse:
        import requests

        body = {
            "model": self.model,
            "temperature": request.temperature,
            "messages": [{"role": "user", "content": request.prompt.render()}],
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error: Optional[Exception] = None
        for attempt in range(self.max_attempts):
            try:
                resp = requests.post(self.endpoint, json=body, headers=headers,
                                     timeout=self.timeout)
                resp.raise_for_status()
                data = resp.json()
                text = data["choices"][0]["message"]["content"]
                self.calls += 1
                return PlannerResponse.from_text(text)
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                # reachable endpoint with an off-contract body: not retryable
                raise PlannerTransportError(
                    f"endpoint returned an off-contract response: {exc}") from exc
            except Exception as exc:  # connection/timeout/HTTP errors
                last_error = exc
                if attempt + 1 < self.max_attempts:
                    time.sleep(self.backoff_seconds * (2 ** attempt))
        raise PlannerTransportError(
            f"planner endpoint unreachable after {self.max_attempts} attempts: {last_error}"
        )


# ---------------------------------------------------------------------------
# Graph synthesis loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GraphAttempt:
    attempt: int
    temperature: float
    fingerprint: str
    verdict: Optional[GraphVerdict]
    parse_error: Optional[str] = None
    feedback: str = ""


TranscriptSink = Callable[[dict], None]


def _log(transcript: Optional[TranscriptSink], entry: dict) -> None:
    if transcript is not None:
        transcript(entry)


def graph_loop(scenario: Scenario, corpus: Sequence[CorpusDocument],
               planner: Planner, config: LoopConfig,
               transcript: Optional[TranscriptSink] = None
               ) -> tuple[FlowGraph, list[GraphAttempt]]:
    """Regenerate flow graphs until the structural verifier passes.

    Feedback (verdict violations or parse errors) is appended to the prompt
    after each failure; repeated fingerprints raise the temperature by one
    step for the next attempt.  Raises GraphBudgetExhausted with the attempt
    history when max_graph_iters runs out.  With config.verify_graphs off
    (the ablation), the first parseable graph is accepted unjudged.
    """
    passages = retrieve(scenario.description or scenario.id, corpus, config.retrieval_k)
    bundle = build_prompt(scenario, passages, corpus=corpus)
    temperature = 0.0
    history: list[GraphAttempt] = []
    fingerprints: list[str] = []
    for attempt in range(1, config.max_graph_iters + 1):
        request = PlannerRequest(GRAPH_SYNTHESIS, bundle, temperature, attempt)
        _log(transcript, {"event": "planner_request", "phase": GRAPH_SYNTHESIS,
                          "attempt": attempt, "temperature": temperature})
        response = planner.propose(request)
        fingerprints.append(response.fingerprint)
        _log(transcript, {"event": "planner_response", "phase": GRAPH_SYNTHESIS,
                          "attempt": attempt, "fingerprint": response.fingerprint})
        feedback_text = ""
        verdict = None
        parse_error = None
        try:
            graph = parse_graph(response.payload)
        except GraphParseError as exc:
            parse_error = str(exc)
            feedback_text = f"graph document rejected: {exc}"
        else:
            if not config.verify_graphs:
                history.append(GraphAttempt(attempt, temperature,
                                            response.fingerprint, None))
                _log(transcript, {"event": "graph_accepted_unverified",
                                  "attempt": attempt})
                return graph, history
            verdict = validate_structure(graph)
            _log(transcript, {"event": "graph_verdict", "attempt": attempt,
                              "status": verdict.status,
                              "rules": sorted(verdict.rule_ids())})
            if verdict.passed:
                history.append(GraphAttempt(attempt, temperature,
                                            response.fingerprint, verdict))
                return graph, history
            feedback_text = feedback_from_verdict(verdict).render()
        history.append(GraphAttempt(attempt, temperature, response.fingerprint,
                                    verdict, parse_error, feedback_text))
        _log(transcript, {"event": "feedback", "phase": GRAPH_SYNTHESIS,
                          "attempt": attempt, "text": feedback_text})
        bundle = append_feedback(bundle, feedback_text)
        if detect_repetition(fingerprints):
            temperature += config.temperature_step
    raise GraphBudgetExhausted(
        f"graph loop exhausted {config.max_graph_iters} attempts without a Pass verdict",
        history,
    )


# ---------------------------------------------------------------------------
# Generation loop (model-spec synthesis, calibration, V&V)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineContext:
    """Everything a generation needs besides the planner's proposals."""

    patches: PatchStructure
    horizon_weeks: int
    dt_days: float = 1.0
    calibration: CalibrationConfig = CalibrationConfig()
    tolerances: VnvTolerances = VnvTolerances()
    allow_unverified: bool = False
    seed: int = 0


@dataclass(frozen=True)
class GenerationRecord:
    generation: int
    fingerprint: str
    spec_errors: tuple[str, ...]
    calibration: Optional[CalibrationResult]
    total_loss: Optional[float]
    verification: Optional[VerificationReport]
    validation: Optional[ValidationReport]
    feedback: str
    vnv_passed: bool


@dataclass(frozen=True)
class RunArtifacts:
    graph: FlowGraph
    graph_history: tuple[GraphAttempt, ...]
    generations: tuple[GenerationRecord, ...]
    accepted: bool
    accepted_generation: Optional[int]
    best_generation: Optional[int]     # best-by-loss among VnV-passing
    theta_star: Optional[np.ndarray]
    named_theta: Optional[Mapping[str, object]]
    planner_calls: int

    @property
    def converged(self) -> bool:
        return self.accepted


def _build_tasks(graph: FlowGraph, scenarios: Sequence[Scenario],
                 params: ParameterSet, ctx: PipelineContext) -> list[FitTask]:
    tasks = []
    for scenario in scenarios:
        model = compiler_mod.compile(graph, scenario, ctx.patches, params,
                                     allow_unverified=ctx.allow_unverified)
        if scenario.initial is None:
            raise CompileError(f"scenario {scenario.id!r} declares no initial conditions")
        x0 = InitialCondition.from_mapping(scenario.initial, model)
        tasks.append(FitTask(scenario.id, model, x0, ctx.horizon_weeks, ctx.dt_days))
    return tasks


def _vnv_generation(tasks: Sequence[FitTask], graph: FlowGraph,
                    theta: np.ndarray, expectations, ctx: PipelineContext
                    ) -> tuple[VerificationReport, ValidationReport]:
    reports = []
    trajectories = {}
    for task in tasks:
        bound = bind_parameters(task.model, theta)
        traj, flag = simulate(bound, task.x0, task.horizon_weeks, task.dt_days)
        trajectories[task.scenario_id] = traj
        reports.append(verify_trajectory(traj, flag, ctx.tolerances))
        reports.append(verify_parameters(bound.named_theta()))
        reports.append(verify_graph_consistency(bound, graph, seed=ctx.seed))
    verification = combine_reports(*reports)
    validation = validate_scenarios(trajectories, expectations,
                                    ctx.tolerances.ordering_rel)
    return verification, validation


def generation_loop(graph: FlowGraph, scenarios: Sequence[Scenario],
                    dataset: Dataset, planner: Planner, config: LoopConfig,
                    ctx: PipelineContext,
                    transcript: Optional[TranscriptSink] = None,
                    graph_history: Sequence[GraphAttempt] = ()
                    ) -> RunArtifacts:
    """Propose, compile, calibrate, and V&V model specs for up to G generations.

    Spec-level failures (unparseable documents, unknown parameters,
    unresolved schedules) are captured as error traces and returned to the
    planner up to max_code_retries times per generation.  A generation is
    accepted when V&V passes and the summed loss clears the epsilon
    threshold; otherwise targeted feedback is appended and the next
    generation begins.  After the budget, the best-by-loss VnV-passing
    candidate is returned with accepted=False (an explicit not-converged
    marker); having no passing candidate is reported the same way, with
    best_generation=None.
    """
    expectations = [exp for s in scenarios for exp in s.expected_orderings]
    graph_doc = json.dumps(
        __import__("epiflow.flowgraph", fromlist=["serialize_graph"]).serialize_graph(graph),
        sort_keys=True)
    base_scenario = scenarios[0]
    bundle = build_prompt(base_scenario, [])
    bundle = append_feedback(
        bundle, "verified flow graph for this run:\n" + graph_doc)
    temperature = 0.0
    fingerprints: list[str] = []
    records: list[GenerationRecord] = []
    planner_calls = 0
    best_loss = float("inf")
    best: Optional[tuple[int, np.ndarray, ParameterSet]] = None

    for generation in range(1, config.max_generations + 1):
        spec_errors: list[str] = []
        params: Optional[ParameterSet] = None
        tasks: list[FitTask] = []
        fingerprint = ""
        for attempt in range(config.max_code_retries + 1):
            request = PlannerRequest(MODEL_SPEC, bundle, temperature,
                                     attempt=generation)
            _log(transcript, {"event": "planner_request", "phase": MODEL_SPEC,
                              "generation": generation, "attempt": attempt,
                              "temperature": temperature})
            response = planner.propose(request)
            planner_calls += 1
            fingerprint = response.fingerprint
            fingerprints.append(fingerprint)
            _log(transcript, {"event": "planner_response", "phase": MODEL_SPEC,
                              "generation": generation,
                              "fingerprint": fingerprint})
            if detect_repetition(fingerprints):
                temperature += config.temperature_step
            try:
                params = parse_parameter_spec(response.payload, graph)
                tasks = _build_tasks(graph, scenarios, params, ctx)
                break
            except (CompileError, SimulationError, GraphParseError) as exc:
                trace = f"{type(exc).__name__}: {exc}"
                spec_errors.append(trace)
                _log(transcript, {"event": "error_trace", "generation": generation,
                                  "attempt": attempt, "text": trace})
                bundle = append_feedback(bundle, "execution error trace:\n" + trace)
                params = None
        if params is None:
            records.append(GenerationRecord(
                generation, fingerprint, tuple(spec_errors), None, None,
                None, None, feedback="", vnv_passed=False))
            continue

        theta0 = initial_vector(params)
        result = calibrate(tasks, dataset, ctx.calibration, theta0)
        gen_loss = sum(result.per_scenario_fit.values())
        verification, validation = _vnv_generation(
            tasks, graph, result.theta_star, expectations, ctx)
        vnv_passed = verification.passed and validation.status == PASS
        _log(transcript, {"event": "vnv", "generation": generation,
                          "verification": verification.status,
                          "validation": validation.status,
                          "loss": gen_loss})
        if vnv_passed and gen_loss < best_loss:
            best_loss = gen_loss
            best = (generation, result.theta_star.copy(), params)
        accepted = vnv_passed and gen_loss < config.accept_loss_epsilon
        feedback = ""
        if not accepted:
            message = generate_feedback(verification, validation, result.loss_history)
            feedback = message.render()
            if feedback:
                bundle = append_feedback(bundle, message)
                _log(transcript, {"event": "feedback", "phase": MODEL_SPEC,
                                  "generation": generation, "text": feedback})
        records.append(GenerationRecord(
            generation, fingerprint, tuple(spec_errors), result, gen_loss,
            verification, validation, feedback, vnv_passed))
        if accepted:
            return RunArtifacts(
                graph=graph, graph_history=tuple(graph_history),
                generations=tuple(records), accepted=True,
                accepted_generation=generation, best_generation=generation,
                theta_star=result.theta_star,
                named_theta=named_view(params, result.theta_star),
                planner_calls=planner_calls)

    if best is not None:
        gen, theta, params = best
        return RunArtifacts(
            graph=graph, graph_history=tuple(graph_history),
            generations=tuple(records), accepted=False,
            accepted_generation=None, best_generation=gen,
            theta_star=theta, named_theta=named_view(params, theta),
            planner_calls=planner_calls)
    return RunArtifacts(
        graph=graph, graph_history=tuple(graph_history),
        generations=tuple(records), accepted=False,
        accepted_generation=None, best_generation=None,
        theta_star=None, named_theta=None, planner_calls=planner_calls)


def run_pipeline(scenarios: Sequence[Scenario], corpus: Sequence[CorpusDocument],
                 dataset: Dataset, planner: Planner, config: LoopConfig,
                 ctx: PipelineContext,
                 transcript: Optional[TranscriptSink] = None) -> RunArtifacts:
    """Graph loop followed by the generation loop (the full agentic pipeline)."""
    graph, history = graph_loop(scenarios[0], corpus, planner, config, transcript)
    return generation_loop(graph, scenarios, dataset, planner, config, ctx,
                           transcript, graph_history=history)
