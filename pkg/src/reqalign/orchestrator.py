"""The per-problem session loop: align the requirement, generate code, gate on
public tests, verify alignment through masked-span recovery, fold deviations
back into the checklist, and iterate until the gate opens or the iteration
budget runs out. Also hosts the ablation run modes."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .alignment import (
    AlignedRequirement,
    AlignmentEngine,
    Checklist,
    GradeEntry,
    QuestionItem,
    QuestionOrigin,
    QuestionStatus,
    feedback_to_questions,
    load_few_shots,
)
from .config import Config
from .errors import (
    BackendUnavailable,
    BudgetExceeded,
    MalformedResponse,
    NoCodeBlockFound,
    SchemaMismatch,
    SessionError,
    UnparsableModelOutput,
)
from .gateway import ChatRequest, ChatResponse, Gateway, Stage, Usage
from .generation import CodeCandidate, GenerationEngine
from .judge import ExecutionResult, SandboxJudge, TestVerdict, VerdictStatus
from .masking import (
    DroppedProposal,
    MaskPlan,
    MaskVerifier,
    SpanFeedback,
    apply_mask,
    normalized_reference,
    validate_plan,
)
from .model import Requirement
from .prompts import PromptLibrary

TRACE_SCHEMA_VERSION = 1


class RunMode(str, Enum):
    FULL = "FULL"
    WO_QA = "WO_QA"            # generation + masked verification, no QA alignment
    WO_MASK = "WO_MASK"        # QA alignment + generation, no masked verification
    FIRST_ONLY = "FIRST_ONLY"  # one alignment pass, one generation, stop
    ZERO_SHOT = "ZERO_SHOT"    # one bare generation from the original text


class SessionStatus(str, Enum):
    PASSED_PUBLIC = "PASSED_PUBLIC"
    BUDGET_EXHAUSTED = "BUDGET_EXHAUSTED"
    ERROR = "ERROR"


@dataclass(frozen=True)
class StageCall:
    stage: Stage
    temperature: float
    prompt: str
    response: str
    prompt_tokens: int
    completion_tokens: int
    latency_ms: int
    estimated_usage: bool


@dataclass
class IterationRecord:
    iteration: int
    requirement_revision: int
    checklist_revision: int | None
    stage_calls: list[StageCall] = field(default_factory=list)
    candidate: CodeCandidate | None = None
    public_result: ExecutionResult | None = None
    mask_plan: MaskPlan | None = None
    dropped_proposals: list[DroppedProposal] = field(default_factory=list)
    span_feedback: list[SpanFeedback] | None = None
    checklist_events: list[dict[str, str]] = field(default_factory=list)
    checklist_state: dict[str, list[str]] = field(default_factory=dict)
    usage_delta: Usage = field(default_factory=Usage)
    wall_ms: int = 0
    notes: list[str] = field(default_factory=list)

    @property
    def stages(self) -> list[str]:
        return [c.stage.value for c in self.stage_calls]


@dataclass
class SessionTrace:
    problem_id: str
    mode: RunMode
    iterations: list[IterationRecord]
    final_candidate: CodeCandidate | None
    final_status: SessionStatus
    totals: Usage
    schema_version: int = TRACE_SCHEMA_VERSION

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "problem_id": self.problem_id,
            "mode": self.mode.value,
            "final_status": self.final_status.value,
            "final_candidate": _candidate_to_dict(self.final_candidate),
            "totals": self.totals.to_dict(),
            "iterations": [_iteration_to_dict(rec) for rec in self.iterations],
        }

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(self.to_dict(), ensure_ascii=False, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SessionTrace":
        try:
            if data["schema_version"] != TRACE_SCHEMA_VERSION:
                raise SchemaMismatch(
                    f"trace schema {data['schema_version']!r} != {TRACE_SCHEMA_VERSION}"
                )
            return cls(
                problem_id=data["problem_id"],
                mode=RunMode(data["mode"]),
                iterations=[_iteration_from_dict(d) for d in data["iterations"]],
                final_candidate=_candidate_from_dict(data["final_candidate"]),
                final_status=SessionStatus(data["final_status"]),
                totals=Usage.from_dict(data["totals"]),
            )
        except SchemaMismatch:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaMismatch(f"trace does not match schema: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "SessionTrace":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise SchemaMismatch(f"cannot read trace {path}: {exc}") from exc
        return cls.from_dict(data)


def _candidate_to_dict(candidate: CodeCandidate | None) -> dict[str, Any] | None:
    if candidate is None:
        return None
    return {
        "source": candidate.source,
        "language_tag": candidate.language_tag,
        "iteration": candidate.iteration,
        "revision_of_requirement": candidate.revision_of_requirement,
    }


def _candidate_from_dict(data: Mapping[str, Any] | None) -> CodeCandidate | None:
    if data is None:
        return None
    return CodeCandidate(
        source=data["source"],
        language_tag=data["language_tag"],
        iteration=data["iteration"],
        revision_of_requirement=data["revision_of_requirement"],
    )


def _result_to_dict(result: ExecutionResult | None) -> dict[str, Any] | None:
    if result is None:
        return None
    return {
        "all_passed": result.all_passed,
        "passed_count": result.passed_count,
        "verdicts": [
            {
                "case_index": v.case_index,
                "status": v.status.value,
                "stdout_excerpt": v.stdout_excerpt,
                "stderr_excerpt": v.stderr_excerpt,
                "wall_ms": v.wall_ms,
            }
            for v in result.verdicts
        ],
    }


def _result_from_dict(data: Mapping[str, Any] | None) -> ExecutionResult | None:
    if data is None:
        return None
    verdicts = [
        TestVerdict(
            v["case_index"],
            VerdictStatus(v["status"]),
            v.get("stdout_excerpt", ""),
            v.get("stderr_excerpt", ""),
            v.get("wall_ms", 0),
        )
        for v in data["verdicts"]
    ]
    return ExecutionResult.from_verdicts(verdicts)


def _iteration_to_dict(rec: IterationRecord) -> dict[str, Any]:
    return {
        "iteration": rec.iteration,
        "requirement_revision": rec.requirement_revision,
        "checklist_revision": rec.checklist_revision,
        "stage_calls": [
            {
                "stage": c.stage.value,
                "temperature": c.temperature,
                "prompt": c.prompt,
                "response": c.response,
                "prompt_tokens": c.prompt_tokens,
                "completion_tokens": c.completion_tokens,
                "latency_ms": c.latency_ms,
                "estimated_usage": c.estimated_usage,
            }
            for c in rec.stage_calls
        ],
        "candidate": _candidate_to_dict(rec.candidate),
        "public_result": _result_to_dict(rec.public_result),
        "mask_plan": _plan_to_dict(rec.mask_plan, rec.dropped_proposals),
        "span_feedback": None
        if rec.span_feedback is None
        else [
            {
                "span_id": fb.span_id,
                "recovered_text": fb.recovered_text,
                "accurate": fb.accurate,
                "discrepancy": fb.discrepancy,
                "missing_elements": fb.missing_elements,
                "dimension": fb.dimension.value,
            }
            for fb in rec.span_feedback
        ],
        "checklist_events": rec.checklist_events,
        "checklist_state": rec.checklist_state,
        "usage_delta": rec.usage_delta.to_dict(),
        "wall_ms": rec.wall_ms,
        "notes": rec.notes,
    }


def _plan_to_dict(
    plan: MaskPlan | None, dropped: Sequence[DroppedProposal]
) -> dict[str, Any] | None:
    if plan is None:
        return None
    return {
        "spans": [
            {
                "sentence_index": s.sentence_index,
                "char_start": s.char_start,
                "char_end": s.char_end,
                "dimension": s.dimension.value,
                "content": s.original_content,
            }
            for s in plan.spans
        ],
        "rejected": [
            {"content": p.original_content, "rule": rule.value} for p, rule in plan.rejected
        ],
        "dropped": [
            {"content": d.content, "dimension": d.dimension, "rule": d.rule.value}
            for d in dropped
        ],
    }


def _iteration_from_dict(data: Mapping[str, Any]) -> IterationRecord:
    rec = IterationRecord(
        iteration=data["iteration"],
        requirement_revision=data["requirement_revision"],
        checklist_revision=data.get("checklist_revision"),
        candidate=_candidate_from_dict(data.get("candidate")),
        public_result=_result_from_dict(data.get("public_result")),
        checklist_events=list(data.get("checklist_events", [])),
        checklist_state=dict(data.get("checklist_state", {})),
        usage_delta=Usage.from_dict(data.get("usage_delta", {})),
        wall_ms=data.get("wall_ms", 0),
        notes=list(data.get("notes", [])),
    )
    rec.stage_calls = [
        StageCall(
            Stage(c["stage"]),
            c["temperature"],
            c.get("prompt", ""),
            c.get("response", ""),
            c.get("prompt_tokens", 0),
            c.get("completion_tokens", 0),
            c.get("latency_ms", 0),
            c.get("estimated_usage", False),
        )
        for c in data.get("stage_calls", [])
    ]
    return rec


class TracingGateway:
    """Per-session view over a shared gateway: records every call it forwards.

    Sessions are sequential internally, so the per-session buffers need no
    locking of their own; the shared gateway keeps its own thread-safe ledger.
    """

    def __init__(self, inner: Gateway):
        self._inner = inner
        self.calls: list[StageCall] = []
        self.session_usage = Usage()

    @property
    def config(self):
        return self._inner.config

    @property
    def backend_id(self) -> str:
        return self._inner.backend_id

    @property
    def usage(self) -> Usage:
        return self._inner.usage

    def complete(self, request: ChatRequest) -> ChatResponse:
        response = self._inner.complete(request)
        prompt = "\n\n".join(f"[{m.role}]\n{m.content}" for m in request.messages)
        self.calls.append(
            StageCall(
                stage=request.stage,
                temperature=request.temperature,
                prompt=prompt,
                response=response.content,
                prompt_tokens=response.prompt_tokens,
                completion_tokens=response.completion_tokens,
                latency_ms=response.latency_ms,
                estimated_usage=response.estimated_usage,
            )
        )
        self.session_usage.record(request.stage, response)
        return response

    def drain(self) -> list[StageCall]:
        calls, self.calls = self.calls, []
        return calls


def update_checklist(
    checklist: Checklist,
    new_items: Sequence[QuestionItem],
    max_questions: int = 20,
) -> tuple[Checklist, list[QuestionItem]]:
    """Append verification-derived questions, deduplicated and capped.

    PASSED items stay untouched, FAILED items stay retained. New items are
    deduplicated by (dimension, normalized reference) against everything
    already present, then appended oldest-first while the active (non-PASSED)
    size stays within ``max_questions``; the excess newest items are dropped
    and returned. The checklist revision advances by one.
    """
    for item in new_items:
        if item.origin is not QuestionOrigin.FROM_VERIFICATION:
            raise ValueError("update_checklist only accepts FROM_VERIFICATION items")
    existing = {
        (item.dimension, normalized_reference(item.reference_answer))
        for item in checklist.items
    }
    dropped: list[QuestionItem] = []
    active = len(checklist.active_items)
    for item in new_items:
        key = (item.dimension, normalized_reference(item.reference_answer))
        if key in existing:
            continue
        if active >= max_questions:
            dropped.append(item)
            continue
        item.qid = checklist.next_qid()
        checklist.items.append(item)
        existing.add(key)
        active += 1
    checklist.revision += 1
    return checklist, dropped


def _checklist_state(checklist: Checklist | None) -> dict[str, list[str]]:
    if checklist is None:
        return {"open": [], "failed": [], "passed": []}
    return {
        "open": [i.qid for i in checklist.open_items],
        "failed": [i.qid for i in checklist.failed_items],
        "passed": [i.qid for i in checklist.passed_items],
    }


def _feedback_guidance(feedback: Sequence[SpanFeedback]) -> str:
    lines = ["Verification of the previous attempt exposed these misreadings:"]
    for fb in feedback:
        if fb.accurate:
            continue
        lines.append(
            f"- The requirement wording was: {fb.missing_elements or '(see discrepancy)'}; "
            f"the code implied: {fb.recovered_text or '(nothing)'}. {fb.discrepancy}"
        )
    lines.append("Fix the program so the requirement wording is satisfied literally.")
    return "\n".join(lines)


def _usage_from_calls(calls: Sequence[StageCall]) -> Usage:
    usage = Usage()
    for call in calls:
        usage.total_prompt_tokens += call.prompt_tokens
        usage.total_completion_tokens += call.completion_tokens
        usage.total_wall_ms += call.latency_ms
        usage.calls_by_stage[call.stage.value] = usage.calls_by_stage.get(call.stage.value, 0) + 1
    return usage


def run_session(
    problem: Requirement,
    mode: RunMode | str,
    config: Config,
    gateway: Gateway,
) -> SessionTrace:
    """Execute one problem's full alignment/generation/verification journey."""
    mode = RunMode(mode)
    qa_enabled = mode in (RunMode.FULL, RunMode.WO_MASK, RunMode.FIRST_ONLY)
    mask_enabled = mode in (RunMode.FULL, RunMode.WO_QA)
    single_shot = mode in (RunMode.ZERO_SHOT, RunMode.FIRST_ONLY)
    max_iterations = 1 if single_shot else config.max_iterations
    if not single_shot and not problem.public_tests:
        raise SessionError(
            f"problem {problem.id!r} has no public tests; iterative modes need the gate"
        )
    deterministic = config.deterministic_timing
    if deterministic is None:
        deterministic = gateway.backend_id in ("mock", "replay")

    tracer = TracingGateway(gateway)
    prompts = PromptLibrary(config.template_dir)
    alignment = AlignmentEngine(
        tracer,
        config.taxonomy,
        load_few_shots(config.few_shot_path) if qa_enabled else None,
        prompts,
        config.max_questions,
        problem.id,
    )
    generator = GenerationEngine(tracer, prompts, problem.id, config.language)
    verifier = MaskVerifier(tracer, prompts, problem.id, config.mask_params.max_total_spans)
    judge = SandboxJudge(config.run_commands, process_cap=config.judge_process_cap)

    aligned = AlignedRequirement(problem.original_text)
    checklist: Checklist | None = None
    pending_feedback: list[SpanFeedback] = []
    iterations: list[IterationRecord] = []
    final_status = SessionStatus.BUDGET_EXHAUSTED
    final_candidate: CodeCandidate | None = None

    def skip_on_unparsable(notes: list[str], label: str, fn: Callable, fallback):
        try:
            return fn()
        except UnparsableModelOutput as exc:
            notes.append(f"{label} skipped: {exc}")
            return fallback

    for iteration in range(1, max_iterations + 1):
        started = time.monotonic()
        rec = IterationRecord(iteration=iteration, requirement_revision=aligned.revision,
                              checklist_revision=None)
        try:
            if qa_enabled:
                if checklist is None:
                    built = skip_on_unparsable(
                        rec.notes, "checklist build", lambda: alignment.build_checklist(problem), Checklist()
                    )
                    checklist = built
                    for item in checklist.items:
                        rec.checklist_events.append({"event": "added", "qid": item.qid})
                for qid in checklist.reopen_failed():
                    rec.checklist_events.append({"event": "reopened", "qid": qid})
                failures: Sequence[GradeEntry] = ()
                if checklist.open_items:
                    answers = skip_on_unparsable(
                        rec.notes,
                        "checklist answering",
                        lambda: alignment.answer_checklist(checklist, aligned),
                        None,
                    )
                    if answers is not None:
                        report = skip_on_unparsable(
                            rec.notes,
                            "answer grading",
                            lambda: alignment.grade_answers(answers, checklist),
                            None,
                        )
                        if report is not None:
                            failures = report.failures
                            for entry in report.entries:
                                rec.checklist_events.append(
                                    {"event": entry.verdict.value.lower(), "qid": entry.qid}
                                )
                if failures or pending_feedback:
                    synthesized = skip_on_unparsable(
                        rec.notes,
                        "requirement synthesis",
                        lambda: alignment.synthesize_aligned_requirement(
                            problem, aligned, failures, checklist, tuple(pending_feedback)
                        ),
                        None,
                    )
                    if synthesized is not None:
                        aligned = synthesized
                        pending_feedback = []
            guidance = ""
            if mode is RunMode.WO_QA and pending_feedback:
                guidance = _feedback_guidance(pending_feedback)
                pending_feedback = []
            rec.requirement_revision = aligned.revision
            candidate = generator.generate_code(
                aligned, iteration, alignment_ran=qa_enabled, extra_guidance=guidance
            )
            rec.candidate = candidate
            public = judge.run_tests(candidate, problem.public_tests, config.run_limits)
            rec.public_result = public

            if not public.all_passed and mask_enabled and iteration < max_iterations:
                rendered = aligned.rendered(config.taxonomy)
                proposal_result = skip_on_unparsable(
                    rec.notes, "mask proposal", lambda: verifier.propose_spans(rendered), None
                )
                if proposal_result is not None:
                    proposals, dropped = proposal_result
                    rec.dropped_proposals = dropped
                    plan = validate_plan(proposals, rendered, config.mask_params)
                    rec.mask_plan = plan
                    if plan.spans:
                        masked = apply_mask(rendered, plan)
                        recoveries = skip_on_unparsable(
                            rec.notes,
                            "mask recovery",
                            lambda: verifier.recover_masks(masked, candidate),
                            None,
                        )
                        if recoveries is not None:
                            feedback = skip_on_unparsable(
                                rec.notes,
                                "recovery grading",
                                lambda: verifier.grade_recovery(plan, recoveries, rendered),
                                None,
                            )
                            if feedback is not None:
                                rec.span_feedback = feedback
                                inaccurate = [fb for fb in feedback if not fb.accurate]
                                if inaccurate:
                                    if qa_enabled and checklist is not None:
                                        new_questions = feedback_to_questions(
                                            inaccurate, plan.spans, rendered
                                        )
                                        _, dropped_items = update_checklist(
                                            checklist, new_questions, config.max_questions
                                        )
                                        for item in new_questions:
                                            if item not in dropped_items:
                                                rec.checklist_events.append(
                                                    {"event": "added", "qid": item.qid}
                                                )
                                        for item in dropped_items:
                                            rec.notes.append(
                                                "question dropped at cap: "
                                                f"{item.reference_answer[:60]!r}"
                                            )
                                    pending_feedback = inaccurate
                    else:
                        rec.notes.append("no mask spans survived validation")
        except (
            BackendUnavailable,
            BudgetExceeded,
            MalformedResponse,
            NoCodeBlockFound,
            UnparsableModelOutput,
        ) as exc:
            rec.notes.append(f"session error: {type(exc).__name__}: {exc}")
            final_status = SessionStatus.ERROR
            rec.stage_calls = tracer.drain()
            rec.usage_delta = _usage_from_calls(rec.stage_calls)
            rec.checklist_revision = checklist.revision if checklist is not None else None
            rec.checklist_state = _checklist_state(checklist)
            rec.wall_ms = (
                rec.usage_delta.total_wall_ms
                if deterministic
                else int((time.monotonic() - started) * 1000)
            )
            iterations.append(rec)
            break

        rec.stage_calls = tracer.drain()
        rec.usage_delta = _usage_from_calls(rec.stage_calls)
        rec.checklist_revision = checklist.revision if checklist is not None else None
        rec.checklist_state = _checklist_state(checklist)
        if deterministic:
            rec.wall_ms = rec.usage_delta.total_wall_ms
            if rec.public_result is not None:
                rec.public_result = _zero_wall(rec.public_result)
        else:
            rec.wall_ms = int((time.monotonic() - started) * 1000)
        iterations.append(rec)

        if rec.public_result is not None and rec.public_result.all_passed:
            final_status = SessionStatus.PASSED_PUBLIC
            final_candidate = rec.candidate
            break

    if final_candidate is None and final_status is not SessionStatus.ERROR:
        final_candidate = _best_candidate(iterations)
    if final_status is SessionStatus.ERROR and final_candidate is None:
        final_candidate = _best_candidate(iterations)

    totals = _usage_from_calls([c for rec in iterations for c in rec.stage_calls])
    return SessionTrace(
        problem_id=problem.id,
        mode=mode,
        iterations=iterations,
        final_candidate=final_candidate,
        final_status=final_status,
        totals=totals,
    )


def _zero_wall(result: ExecutionResult) -> ExecutionResult:
    """Deterministic-timing traces carry virtual (zero) judge wall clocks."""
    return ExecutionResult.from_verdicts(
        [
            TestVerdict(v.case_index, v.status, v.stdout_excerpt, v.stderr_excerpt, 0)
            for v in result.verdicts
        ]
    )


def _best_candidate(iterations: Sequence[IterationRecord]) -> CodeCandidate | None:
    """Fallback on budget exhaustion: max public passed_count, tie -> latest."""
    best: IterationRecord | None = None
    for rec in iterations:
        if rec.candidate is None or rec.public_result is None:
            continue
        if best is None or rec.public_result.passed_count >= best.public_result.passed_count:
            best = rec
    return best.candidate if best else None


def render_timeline(trace: SessionTrace) -> str:
    """Human-readable iteration timeline for trace inspection."""
    lines = [
        f"problem: {trace.problem_id}",
        f"mode: {trace.mode.value}",
        f"final status: {trace.final_status.value}",
        f"iterations: {len(trace.iterations)}",
        f"tokens: {trace.totals.total_prompt_tokens} prompt "
        f"+ {trace.totals.total_completion_tokens} completion",
        "",
    ]
    for rec in trace.iterations:
        lines.append(f"== iteration {rec.iteration} ==")
        lines.append(f"  requirement revision: {rec.requirement_revision}")
        if rec.checklist_revision is not None:
            lines.append(f"  checklist revision: {rec.checklist_revision}")
        lines.append("  stages: " + (" -> ".join(rec.stages) or "(none)"))
        for event in rec.checklist_events:
            lines.append(f"  checklist {event['event']}: {event['qid']}")
        state = rec.checklist_state
        if any(state.get(k) for k in ("open", "failed", "passed")):
            lines.append(
                "  checklist state: "
                f"open={state.get('open', [])} failed={state.get('failed', [])} "
                f"passed={state.get('passed', [])}"
            )
        if rec.public_result is not None:
            verdicts = ", ".join(v.status.value for v in rec.public_result.verdicts)
            lines.append(
                f"  public tests: {rec.public_result.passed_count}/"
                f"{len(rec.public_result.verdicts)} [{verdicts}]"
            )
        if rec.mask_plan is not None:
            lines.append(
                f"  mask spans: {len(rec.mask_plan.spans)} accepted, "
                f"{len(rec.mask_plan.rejected)} rejected"
            )
        if rec.span_feedback is not None:
            bad = sum(1 for fb in rec.span_feedback if not fb.accurate)
            lines.append(f"  recovery: {len(rec.span_feedback) - bad} accurate, {bad} inaccurate")
        for note in rec.notes:
            lines.append(f"  note: {note}")
    absent = []
    if trace.mode in (RunMode.WO_QA, RunMode.ZERO_SHOT):
        absent.append("checklist alignment")
    if trace.mode in (RunMode.WO_MASK, RunMode.FIRST_ONLY, RunMode.ZERO_SHOT):
        absent.append("masked verification")
    if absent:
        lines.append("")
        lines.append(f"(mode omits: {', '.join(absent)})")
    return "\n".join(lines) + "\n"
