"""FastAPI application wrapping the core engine.

The service is stateless per request: each run request names its own backend
and paths, so several clients can drive benchmark sweeps, single sessions, or
one-off judging against the same instance.
"""
from __future__ import annotations

from dataclasses import replace

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..bench import (
    Benchmark,
    MetricsReport,
    ReportFormat,
    emit_report,
    load_benchmark,
    load_manifest,
    pass_at_k,
    run_benchmark,
)
from ..config import Config
from ..errors import ConfigInvalid, DomainError, FormatError, MissingTests, ReqAlignError, SchemaMismatch
from ..gateway import BackendKind, GatewayConfig, with_backend
from ..judge import RunLimits, SandboxJudge, VerdictStatus
from ..masking import MaskParams, resolve_proposals, validate_plan, apply_mask
from ..model import Requirement, TestCase
from ..orchestrator import RunMode, SessionTrace, render_timeline, run_session
from . import schemas

_BACKEND_KINDS = {
    "http": BackendKind.HTTP_CHAT,
    "mock": BackendKind.SCRIPTED_MOCK,
    "replay": BackendKind.REPLAY,
}


def _gateway_config(spec: schemas.GatewaySpec, base: GatewayConfig) -> GatewayConfig:
    updates = {
        key: value
        for key, value in spec.model_dump().items()
        if key != "kind" and value is not None
    }
    return replace(base, kind=_BACKEND_KINDS[spec.kind], **updates)


def _limits(model: schemas.RunLimitsModel | None, default: RunLimits) -> RunLimits:
    if model is None:
        return default
    return RunLimits(model.wall_time_s, model.memory_mb, model.max_output_bytes)


def _mask_params(model: schemas.MaskParamsModel | None, default: MaskParams) -> MaskParams:
    if model is None:
        return default
    kwargs = dict(
        min_gap_words=model.min_gap_words,
        max_spans_per_sentence=model.max_spans_per_sentence,
        max_total_spans=model.max_total_spans,
        max_masked_word_fraction=model.max_masked_word_fraction,
    )
    if model.protected_keywords is not None:
        kwargs["protected_keywords"] = frozenset(w.lower() for w in model.protected_keywords)
    return MaskParams(**kwargs)


def _requirement(problem: schemas.ProblemModel) -> Requirement:
    return Requirement(
        id=problem.id,
        original_text=problem.description,
        public_tests=tuple(TestCase(t.input, t.output) for t in problem.public_tests),
        hidden_tests=tuple(TestCase(t.input, t.output) for t in problem.hidden_tests),
        title=problem.title,
    )


def create_app(config: Config | None = None) -> FastAPI:
    config = config or Config()
    app = FastAPI(
        title="reqalign",
        version=__version__,
        description="Requirement-alignment code generation service",
    )

    @app.exception_handler(ReqAlignError)
    async def _domain_error_handler(request, exc: ReqAlignError):  # pragma: no cover - wiring
        raise HTTPException(status_code=_status_for(exc), detail=str(exc))

    @app.get("/health", response_model=schemas.HealthResponse)
    def health() -> schemas.HealthResponse:
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/metrics/pass-at-k", response_model=schemas.PassAtKResponse)
    def metrics_pass_at_k(request: schemas.PassAtKRequest) -> schemas.PassAtKResponse:
        try:
            return schemas.PassAtKResponse(value=pass_at_k(request.n, request.c, request.k))
        except DomainError as exc:
            raise HTTPException(status_code=400, detail=str(exc))

    @app.post("/judge/run", response_model=schemas.JudgeRunResponse)
    def judge_run(request: schemas.JudgeRunRequest) -> schemas.JudgeRunResponse:
        judge = SandboxJudge(config.run_commands, process_cap=config.judge_process_cap)
        candidate = _JudgeTarget(request.source, request.language_tag)
        result = judge.run_tests(
            candidate,
            [TestCase(t.input, t.output) for t in request.tests],
            _limits(request.limits, config.run_limits),
        )
        return schemas.JudgeRunResponse(
            all_passed=result.all_passed,
            passed_count=result.passed_count,
            verdicts=[
                schemas.VerdictModel(
                    case_index=v.case_index,
                    status=v.status.value,
                    stdout_excerpt=v.stdout_excerpt,
                    stderr_excerpt=v.stderr_excerpt,
                    wall_ms=v.wall_ms,
                )
                for v in result.verdicts
            ],
        )

    @app.post("/mask/plan", response_model=schemas.MaskPlanResponse)
    def mask_plan(request: schemas.MaskPlanRequest) -> schemas.MaskPlanResponse:
        params = _mask_params(request.params, config.mask_params)
        proposals, dropped = resolve_proposals(
            [p.model_dump() for p in request.proposals], request.text
        )
        plan = validate_plan(proposals, request.text, params)
        masked = apply_mask(request.text, plan)
        return schemas.MaskPlanResponse(
            spans=[
                schemas.AcceptedSpanModel(
                    sentence_index=s.sentence_index,
                    char_start=s.char_start,
                    char_end=s.char_end,
                    dimension=s.dimension.value,
                    content=s.original_content,
                )
                for s in plan.spans
            ],
            rejected=[
                schemas.RejectedSpanModel(content=p.original_content, rule=rule.value)
                for p, rule in plan.rejected
            ],
            dropped=[
                schemas.RejectedSpanModel(content=d.content, rule=d.rule.value) for d in dropped
            ],
            masked_text=masked.masked_text,
        )

    @app.post("/sessions/run", response_model=schemas.SessionRunResponse)
    def sessions_run(request: schemas.SessionRunRequest) -> schemas.SessionRunResponse:
        try:
            run_config = replace(
                config,
                gateway=_gateway_config(request.gateway, config.gateway),
                max_iterations=request.max_iterations or config.max_iterations,
                max_questions=request.max_questions or config.max_questions,
                run_limits=_limits(request.limits, config.run_limits),
                mask_params=_mask_params(request.mask_params, config.mask_params),
            )
            gateway = with_backend(run_config.gateway.kind, run_config.gateway)
            try:
                trace = run_session(
                    _requirement(request.problem),
                    RunMode(request.mode.upper().replace("-", "_")),
                    run_config,
                    gateway,
                )
            finally:
                gateway.close()
        except (ConfigInvalid, ValueError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        except ReqAlignError as exc:
            raise HTTPException(status_code=500, detail=str(exc))
        return schemas.SessionRunResponse(trace=trace.to_dict())

    @app.post("/benchmark/run", response_model=schemas.BenchmarkRunResponse)
    def benchmark_run(request: schemas.BenchmarkRunRequest) -> schemas.BenchmarkRunResponse:
        try:
            kind = Benchmark(request.kind.upper().replace("-", "_"))
            manifest = load_manifest(request.manifest_path) if request.manifest_path else None
            problems = load_benchmark(request.dataset_path, kind, manifest)
            run_config = replace(
                config,
                gateway=_gateway_config(request.gateway, config.gateway),
                max_iterations=request.max_iterations or config.max_iterations,
                parallel_sessions=request.parallel_sessions or config.parallel_sessions,
            )
            gateway = with_backend(run_config.gateway.kind, run_config.gateway)
            try:
                outcome = run_benchmark(
                    problems,
                    RunMode(request.mode.upper().replace("-", "_")),
                    run_config,
                    gateway,
                    request.out_dir,
                    run_id=request.run_id,
                    benchmark=kind,
                    force=request.force,
                )
            finally:
                gateway.close()
        except (ConfigInvalid, FormatError, MissingTests, DomainError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        except ReqAlignError as exc:
            raise HTTPException(status_code=500, detail=str(exc))
        return schemas.BenchmarkRunResponse(
            run_id=outcome.run.run_id,
            problems=outcome.run.problems,
            session_errors=outcome.session_errors,
            resumed=outcome.resumed,
            report=outcome.report.to_dict(),
            report_markdown=emit_report(outcome.report, ReportFormat.MARKDOWN_TABLE),
            out_dir=request.out_dir,
        )

    @app.post("/traces/inspect", response_model=schemas.InspectResponse)
    def traces_inspect(request: schemas.InspectRequest) -> schemas.InspectResponse:
        try:
            trace = SessionTrace.load(request.trace_path)
        except SchemaMismatch as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return schemas.InspectResponse(timeline=render_timeline(trace))

    @app.post("/report/render", response_model=schemas.ReportRenderResponse)
    def report_render(request: schemas.ReportRenderRequest) -> schemas.ReportRenderResponse:
        try:
            report = MetricsReport.from_dict(request.report)
            document = emit_report(report, ReportFormat(request.format))
        except (KeyError, TypeError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=f"malformed report: {exc}")
        return schemas.ReportRenderResponse(document=document)

    return app


def _status_for(exc: ReqAlignError) -> int:
    if isinstance(exc, (ConfigInvalid, DomainError, FormatError, MissingTests)):
        return 400
    if isinstance(exc, SchemaMismatch):
        return 422
    return 500


class _JudgeTarget:
    """Minimal candidate shim for direct judging requests."""

    def __init__(self, source: str, language_tag: str):
        self.source = source
        self.language_tag = language_tag


_ = VerdictStatus  # re-exported verdict vocabulary for clients
