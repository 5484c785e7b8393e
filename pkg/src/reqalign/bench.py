"""Benchmark harness: dataset ingestion for the five supported families,
hidden-test scoring, the pass@k estimator, and report emission."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .config import Config
from .errors import DomainError, FormatError, MissingTests, SandboxError, SessionError
from .gateway import Gateway, Usage
from .judge import ExecutionResult, SandboxJudge
from .model import Benchmark, Requirement, TestCase
from .orchestrator import RunMode, SessionStatus, SessionTrace, run_session

# ---------------------------------------------------------------------------
# pass@k
# ---------------------------------------------------------------------------


def pass_at_k_fraction(n: int, c: int, k: int) -> Fraction:
    """Exact pass@k = 1 - C(n-c, k) / C(n, k), in product form over rationals.

    C(m, k) is taken as 0 when m < k, so the estimate is 1 whenever fewer
    than k incorrect samples exist.
    """
    if not (0 <= c <= n):
        raise DomainError(f"need 0 <= c <= n, got n={n} c={c}")
    if not (1 <= k <= n):
        raise DomainError(f"need 1 <= k <= n, got n={n} k={k}")
    if n - c < k:
        return Fraction(1)
    miss = Fraction(1)
    for i in range(k):
        miss *= Fraction(n - c - i, n - i)
    return 1 - miss


def pass_at_k(n: int, c: int, k: int) -> float:
    """Expected probability that at least one of k samples (of n, c correct)
    passes all tests."""
    return float(pass_at_k_fraction(n, c, k))


# ---------------------------------------------------------------------------
# dataset ingestion
# ---------------------------------------------------------------------------


def _pair_tests(inputs: Sequence[Any], outputs: Sequence[Any]) -> list[TestCase]:
    if len(inputs) != len(outputs):
        raise ValueError(f"{len(inputs)} inputs vs {len(outputs)} outputs")
    return [TestCase(str(i), str(o)) for i, o in zip(inputs, outputs)]


def _tests_from_records(records: Any) -> list[TestCase]:
    """Accepts [{"input","output"}] or {"input": [...], "output": [...]}."""
    if records is None:
        return []
    if isinstance(records, Mapping):
        return _pair_tests(records.get("input", []), records.get("output", []))
    cases = []
    for rec in records:
        cases.append(
            TestCase(
                str(rec["input"]),
                str(rec.get("output", rec.get("expected_output", ""))),
            )
        )
    return cases


def _parse_custom(record: Mapping[str, Any]) -> tuple[str, str, list[TestCase], list[TestCase], str | None]:
    problem_id = str(record["id"])
    text = str(record["description"])
    public = _tests_from_records(record.get("public_tests"))
    hidden = _tests_from_records(record.get("hidden_tests"))
    return problem_id, text, public, hidden, record.get("title")


def _parse_apps(record: Mapping[str, Any]) -> tuple[str, str, list[TestCase], list[TestCase], str | None]:
    problem_id = str(record.get("id", record.get("problem_id")))
    text = str(record["question"])
    io_block = record.get("input_output", {})
    if isinstance(io_block, str):
        io_block = json.loads(io_block) if io_block else {}
    hidden = _pair_tests(io_block.get("inputs", []), io_block.get("outputs", []))
    sample = record.get("sample_input_output", {})
    if isinstance(sample, str):
        sample = json.loads(sample) if sample else {}
    public = _pair_tests(sample.get("inputs", []), sample.get("outputs", []))
    return problem_id, text, public, hidden, record.get("title")


def _parse_codecontests(record: Mapping[str, Any], include_generated: bool) -> tuple[str, str, list[TestCase], list[TestCase], str | None]:
    problem_id = str(record.get("name", record.get("id")))
    text = str(record["description"])
    public = _tests_from_records(record.get("public_tests"))
    hidden = _tests_from_records(record.get("private_tests"))
    if include_generated:
        hidden += _tests_from_records(record.get("generated_tests"))
    return problem_id, text, public, hidden, record.get("name")


def _parse_xcodeeval(record: Mapping[str, Any]) -> tuple[str, str, list[TestCase], list[TestCase], str | None]:
    problem_id = str(record.get("src_uid", record.get("id")))
    text = str(record["description"])
    public = _pair_tests(record.get("sample_inputs", []), record.get("sample_outputs", []))
    hidden_raw = record.get("hidden_unit_tests", [])
    if isinstance(hidden_raw, str):
        hidden_raw = json.loads(hidden_raw) if hidden_raw else []
    hidden = _tests_from_records(hidden_raw)
    return problem_id, text, public, hidden, record.get("title")


_PARSERS: dict[Benchmark, Callable[[Mapping[str, Any]], tuple]] = {
    Benchmark.CUSTOM: _parse_custom,
    Benchmark.LIVECODEBENCH_LITE: _parse_custom,  # ingested via the adapter schema
    Benchmark.APPS: _parse_apps,
    Benchmark.CODECONTESTS_RAW: lambda r: _parse_codecontests(r, include_generated=False),
    Benchmark.CODECONTESTS: lambda r: _parse_codecontests(r, include_generated=True),
    Benchmark.XCODEEVAL: _parse_xcodeeval,
}


def load_manifest(path: str | Path) -> list[str]:
    """Problem-id subset file: one id per line, '#' comments allowed."""
    ids = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            ids.append(line)
    return ids


def load_benchmark(
    path: str | Path,
    kind: Benchmark | str,
    manifest: Sequence[str] | None = None,
) -> list[Requirement]:
    """Parse a JSON-lines dataset into Requirements.

    Public vs hidden tests follow the dataset's own fields. A record with no
    hidden tests falls back to a copy of its public tests (flagged via the
    title suffix so reports can surface it). A manifest restricts and orders
    the result by problem id.
    """
    kind = Benchmark(kind)
    path = Path(path)
    if not path.exists():
        raise FormatError(f"dataset not found: {path}")
    parser = _PARSERS[kind]
    requirements: dict[str, Requirement] = {}
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            problem_id, text, public, hidden, title = parser(record)
        except FormatError:
            raise
        except Exception as exc:
            raise FormatError(f"{exc}", line=line_no) from exc
        if not public and not hidden:
            raise MissingTests(f"line {line_no}: problem {problem_id!r} has no tests")
        if not hidden:
            hidden = list(public)
            public = []
            title = f"{title or problem_id} [no-hidden-split]"
        requirements[problem_id] = Requirement(
            id=problem_id,
            original_text=text,
            public_tests=tuple(public),
            hidden_tests=tuple(hidden),
            title=title,
            source_benchmark=kind,
        )
    if manifest is not None:
        missing = [pid for pid in manifest if pid not in requirements]
        if missing:
            raise FormatError(f"manifest ids not in dataset: {missing}")
        return [requirements[pid] for pid in manifest]
    return list(requirements.values())


# ---------------------------------------------------------------------------
# scoring and reports
# ---------------------------------------------------------------------------


@dataclass
class BenchmarkRun:
    run_id: str
    benchmark: Benchmark
    mode: RunMode
    model_id: str
    problems: list[str]
    requirements: dict[str, Requirement]
    traces: dict[str, SessionTrace]
    hidden_results: dict[str, ExecutionResult] = field(default_factory=dict)


@dataclass
class ReportRow:
    model_id: str
    mode: str
    benchmark: str
    pass_at_1: float
    avg_time_h: float
    avg_tokens_m: float
    problems: dict[str, dict[str, Any]]

    def to_dict(self) -> dict[str, Any]:
        return {
            "model_id": self.model_id,
            "mode": self.mode,
            "benchmark": self.benchmark,
            "pass_at_1": self.pass_at_1,
            "avg_time_h": self.avg_time_h,
            "avg_tokens_m": self.avg_tokens_m,
            "problems": self.problems,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ReportRow":
        return cls(
            model_id=data["model_id"],
            mode=data["mode"],
            benchmark=data["benchmark"],
            pass_at_1=data["pass_at_1"],
            avg_time_h=data["avg_time_h"],
            avg_tokens_m=data["avg_tokens_m"],
            problems=dict(data["problems"]),
        )


@dataclass
class MetricsReport:
    rows: list[ReportRow]

    def to_dict(self) -> dict[str, Any]:
        return {"rows": [row.to_dict() for row in self.rows]}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MetricsReport":
        return cls(rows=[ReportRow.from_dict(d) for d in data["rows"]])


def score_hidden(
    run: BenchmarkRun,
    judge: SandboxJudge,
    limits=None,
) -> MetricsReport:
    """Judge every final candidate on hidden tests only; Table-1-style units.

    A judge failure on one problem counts that problem as a fail and never
    aborts the run. Pass@1 is the fraction of problems whose final candidate
    passes every hidden test.
    """
    if not run.problems:
        raise DomainError("cannot score an empty run")
    per_problem: dict[str, dict[str, Any]] = {}
    passed = 0
    total_wall_ms = 0
    total_tokens = 0
    for problem_id in run.problems:
        trace = run.traces[problem_id]
        requirement = run.requirements[problem_id]
        entry: dict[str, Any] = {
            "final_status": trace.final_status.value,
            "iterations": len(trace.iterations),
        }
        candidate = trace.final_candidate
        if candidate is None:
            entry["hidden_all_passed"] = False
            entry["hidden_passed_count"] = 0
            entry["hidden_total"] = len(requirement.hidden_tests)
            entry["error"] = "no final candidate"
        else:
            try:
                result = judge.run_tests(candidate, requirement.hidden_tests, limits)
            except SandboxError as exc:
                entry["hidden_all_passed"] = False
                entry["hidden_passed_count"] = 0
                entry["hidden_total"] = len(requirement.hidden_tests)
                entry["error"] = str(exc)
            else:
                run.hidden_results[problem_id] = result
                entry["hidden_all_passed"] = result.all_passed
                entry["hidden_passed_count"] = result.passed_count
                entry["hidden_total"] = len(result.verdicts)
                if result.all_passed:
                    passed += 1
        total_wall_ms += trace.totals.total_wall_ms
        total_tokens += trace.totals.total_tokens
        per_problem[problem_id] = entry
    count = len(run.problems)
    row = ReportRow(
        model_id=run.model_id,
        mode=run.mode.value,
        benchmark=run.benchmark.value,
        pass_at_1=passed / count,
        avg_time_h=(total_wall_ms / count) / 3_600_000.0,
        avg_tokens_m=(total_tokens / count) / 1_000_000.0,
        problems=per_problem,
    )
    return MetricsReport(rows=[row])


def merge_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    rows: list[ReportRow] = []
    for report in reports:
        rows.extend(report.rows)
    return MetricsReport(rows=rows)


class ReportFormat(str, Enum):
    JSON = "JSON"
    MARKDOWN_TABLE = "MARKDOWN_TABLE"


def emit_report(report: MetricsReport, format: ReportFormat | str = ReportFormat.JSON) -> str:
    """Deterministic serialization; the markdown table mirrors the benchmark
    summary layout (one row per model/mode, Pass@1 per benchmark, Time (h),
    Token (M))."""
    format = ReportFormat(format)
    if format is ReportFormat.JSON:
        return json.dumps(report.to_dict(), ensure_ascii=False, indent=2, sort_keys=True) + "\n"
    benchmarks = sorted({row.benchmark for row in report.rows})
    header = ["Model", "Method"] + [f"{b} Pass@1" for b in benchmarks] + ["Time (h)", "Token (M)"]
    lines = [
        "| " + " | ".join(header) + " |",
        "|" + "|".join("---" for _ in header) + "|",
    ]
    keyed: dict[tuple[str, str], dict[str, ReportRow]] = {}
    for row in report.rows:
        keyed.setdefault((row.model_id, row.mode), {})[row.benchmark] = row
    for (model_id, mode), by_bench in sorted(keyed.items()):
        cells = [model_id, mode]
        times = []
        tokens = []
        for bench in benchmarks:
            row = by_bench.get(bench)
            if row is None:
                cells.append("--")
            else:
                cells.append(f"{row.pass_at_1 * 100:.2f}%")
                times.append(row.avg_time_h)
                tokens.append(row.avg_tokens_m)
        cells.append(f"{sum(times) / len(times):.2f}" if times else "--")
        cells.append(f"{sum(tokens) / len(tokens):.2f}" if tokens else "--")
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# sweep execution (used by the service and CLI)
# ---------------------------------------------------------------------------


def find_hidden_leaks(trace: SessionTrace, requirement: Requirement) -> list[dict[str, Any]]:
    """Scan every recorded prompt for hidden-test inputs; hits mean leakage."""
    hits = []
    needles = [t.input.strip() for t in requirement.hidden_tests if t.input.strip()]
    for rec in trace.iterations:
        for call in rec.stage_calls:
            for needle in needles:
                if needle in call.prompt:
                    hits.append(
                        {
                            "iteration": rec.iteration,
                            "stage": call.stage.value,
                            "input": needle,
                        }
                    )
    return hits


@dataclass
class SweepOutcome:
    run: BenchmarkRun
    report: MetricsReport
    session_errors: list[str]
    resumed: list[str]


def run_benchmark(
    problems: Sequence[Requirement],
    mode: RunMode | str,
    config: Config,
    gateway: Gateway,
    out_dir: str | Path,
    *,
    run_id: str = "run",
    benchmark: Benchmark = Benchmark.CUSTOM,
    model_id: str | None = None,
    force: bool = False,
) -> SweepOutcome:
    """Run (or resume) a sweep: one trace file per problem, then hidden scoring.

    A completed trace short-circuits the session unless ``force``; sessions run
    in parallel up to ``config.parallel_sessions``; traces land in
    ``out_dir/traces/<problem_id>.json`` and reports in ``out_dir``.
    """
    mode = RunMode(mode)
    out_dir = Path(out_dir)
    traces_dir = out_dir / "traces"
    traces_dir.mkdir(parents=True, exist_ok=True)
    resumed: list[str] = []
    session_errors: list[str] = []

    def run_one(problem: Requirement) -> tuple[str, SessionTrace]:
        trace_path = traces_dir / f"{problem.id}.json"
        if trace_path.exists() and not force:
            try:
                trace = SessionTrace.load(trace_path)
                if trace.mode is mode:
                    resumed.append(problem.id)
                    return problem.id, trace
            except Exception:
                pass  # unreadable or stale trace: re-run
        try:
            trace = run_session(problem, mode, config, gateway)
        except SessionError as exc:
            session_errors.append(f"{problem.id}: {exc}")
            trace = SessionTrace(
                problem_id=problem.id,
                mode=mode,
                iterations=[],
                final_candidate=None,
                final_status=SessionStatus.ERROR,
                totals=Usage(),
            )
        trace.save(trace_path)
        if trace.final_status is SessionStatus.ERROR:
            session_errors.append(problem.id)
        return problem.id, trace

    traces: dict[str, SessionTrace] = {}
    if config.parallel_sessions <= 1 or len(problems) <= 1:
        for problem in problems:
            pid, trace = run_one(problem)
            traces[pid] = trace
    else:
        with ThreadPoolExecutor(max_workers=config.parallel_sessions) as pool:
            for pid, trace in pool.map(run_one, problems):
                traces[pid] = trace

    run = BenchmarkRun(
        run_id=run_id,
        benchmark=benchmark,
        mode=mode,
        model_id=model_id or config.gateway.model or gateway.backend_id,
        problems=[p.id for p in problems],
        requirements={p.id: p for p in problems},
        traces=traces,
    )
    judge = SandboxJudge(config.run_commands, process_cap=config.judge_process_cap)
    report = score_hidden(run, judge, config.run_limits)
    (out_dir / "report.json").write_text(emit_report(report, ReportFormat.JSON), encoding="utf-8")
    (out_dir / "report.md").write_text(
        emit_report(report, ReportFormat.MARKDOWN_TABLE), encoding="utf-8"
    )
    return SweepOutcome(run=run, report=report, session_errors=session_errors, resumed=resumed)
