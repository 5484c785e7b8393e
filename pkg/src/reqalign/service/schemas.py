"""Pydantic request/response models for the HTTP service."""
from __future__ import annotations

from typing import Any, Literal

from pydantic import BaseModel, Field


class TestCaseModel(BaseModel):
    input: str
    output: str


class ProblemModel(BaseModel):
    id: str
    description: str
    title: str | None = None
    public_tests: list[TestCaseModel] = Field(default_factory=list)
    hidden_tests: list[TestCaseModel] = Field(default_factory=list)


class GatewaySpec(BaseModel):
    """Which chat backend a run should use; validated against the kind."""

    kind: Literal["http", "mock", "replay"] = "mock"
    endpoint: str | None = None
    model: str | None = None
    api_key_env: str | None = None
    timeout_s: float | None = None
    max_retries: int | None = None
    session_token_budget: int | None = None
    script_path: str | None = None
    script: dict[str, Any] | None = None
    cassette_path: str | None = None
    record_path: str | None = None


class RunLimitsModel(BaseModel):
    wall_time_s: float = 10.0
    memory_mb: int = 512
    max_output_bytes: int = 1024 * 1024


class MaskParamsModel(BaseModel):
    min_gap_words: int = 5
    max_spans_per_sentence: int = 2
    max_total_spans: int = 8
    max_masked_word_fraction: float = 0.30
    protected_keywords: list[str] | None = None


class SessionRunRequest(BaseModel):
    problem: ProblemModel
    mode: str = "FULL"
    gateway: GatewaySpec = Field(default_factory=GatewaySpec)
    max_iterations: int | None = None
    max_questions: int | None = None
    limits: RunLimitsModel | None = None
    mask_params: MaskParamsModel | None = None


class SessionRunResponse(BaseModel):
    trace: dict[str, Any]


class BenchmarkRunRequest(BaseModel):
    dataset_path: str
    kind: str = "CUSTOM"
    manifest_path: str | None = None
    mode: str = "FULL"
    out_dir: str
    force: bool = False
    run_id: str = "run"
    gateway: GatewaySpec = Field(default_factory=GatewaySpec)
    max_iterations: int | None = None
    parallel_sessions: int | None = None


class BenchmarkRunResponse(BaseModel):
    run_id: str
    problems: list[str]
    session_errors: list[str]
    resumed: list[str]
    report: dict[str, Any]
    report_markdown: str
    out_dir: str


class PassAtKRequest(BaseModel):
    n: int
    c: int
    k: int


class PassAtKResponse(BaseModel):
    value: float


class JudgeRunRequest(BaseModel):
    source: str
    language_tag: str = "python"
    tests: list[TestCaseModel]
    limits: RunLimitsModel | None = None


class VerdictModel(BaseModel):
    case_index: int
    status: str
    stdout_excerpt: str
    stderr_excerpt: str
    wall_ms: int


class JudgeRunResponse(BaseModel):
    all_passed: bool
    passed_count: int
    verdicts: list[VerdictModel]


class SpanProposalModel(BaseModel):
    dimension: str
    content: str
    occurrence: int = 1


class MaskPlanRequest(BaseModel):
    text: str
    proposals: list[SpanProposalModel]
    params: MaskParamsModel | None = None


class AcceptedSpanModel(BaseModel):
    sentence_index: int
    char_start: int
    char_end: int
    dimension: str
    content: str


class RejectedSpanModel(BaseModel):
    content: str
    rule: str


class MaskPlanResponse(BaseModel):
    spans: list[AcceptedSpanModel]
    rejected: list[RejectedSpanModel]
    dropped: list[RejectedSpanModel]
    masked_text: str


class InspectRequest(BaseModel):
    trace_path: str


class InspectResponse(BaseModel):
    timeline: str


class ReportRenderRequest(BaseModel):
    report: dict[str, Any]
    format: Literal["JSON", "MARKDOWN_TABLE"] = "MARKDOWN_TABLE"


class ReportRenderResponse(BaseModel):
    document: str


class HealthResponse(BaseModel):
    status: str
    version: str
