"""Runs candidate programs against test cases in isolated child processes.

Each test gets a fresh process with stdin fed from the test input, stdout and
stderr captured to files, and resource limits applied in the child (address
space, output file size). Wall time is enforced from the parent. Output
comparison follows the standard competitive-judging policy: trailing
whitespace per line and trailing blank lines are ignored, everything else is
exact.

Security boundary: this is process-level isolation for trusted benchmark
programs (a scratch working directory plus rlimits). It is NOT a defense
against hostile code; do not feed it untrusted submissions.
"""
from __future__ import annotations

import signal
import subprocess
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

from .model import TestCase

try:
    import resource
except ImportError:  # pragma: no cover - non-POSIX
    resource = None  # type: ignore[assignment]

_EXCERPT_BYTES = 2048


@dataclass(frozen=True)
class RunLimits:
    wall_time_s: float = 10.0
    memory_mb: int = 512
    max_output_bytes: int = 1024 * 1024

    def __post_init__(self) -> None:
        if self.wall_time_s <= 0 or self.memory_mb <= 0 or self.max_output_bytes <= 0:
            raise ValueError("all run limits must be positive")


class VerdictStatus(str, Enum):
    PASS = "PASS"
    WRONG_OUTPUT = "WRONG_OUTPUT"
    TIMEOUT = "TIMEOUT"
    RUNTIME_ERROR = "RUNTIME_ERROR"
    OUTPUT_LIMIT = "OUTPUT_LIMIT"
    SANDBOX_ERROR = "SANDBOX_ERROR"


@dataclass(frozen=True)
class TestVerdict:
    case_index: int
    status: VerdictStatus
    stdout_excerpt: str
    stderr_excerpt: str
    wall_ms: int


@dataclass(frozen=True)
class ExecutionResult:
    verdicts: tuple[TestVerdict, ...]
    all_passed: bool
    passed_count: int

    @classmethod
    def from_verdicts(cls, verdicts: Sequence[TestVerdict]) -> "ExecutionResult":
        ordered = tuple(sorted(verdicts, key=lambda v: v.case_index))
        passed = sum(1 for v in ordered if v.status is VerdictStatus.PASS)
        return cls(ordered, all_passed=passed == len(ordered), passed_count=passed)


def normalize_output(s: str) -> str:
    """Strip trailing whitespace per line, drop trailing blank lines, CRLF -> LF."""
    return "\n".join(line.rstrip() for line in s.split("\n")).rstrip("\n")


DEFAULT_RUN_COMMANDS: dict[str, list[str]] = {
    "python": [sys.executable, "{source}"],
    "python3": [sys.executable, "{source}"],
    "py": [sys.executable, "{source}"],
}

_SOURCE_SUFFIX = {"python": ".py", "python3": ".py", "py": ".py"}


def _limit_setter(limits: RunLimits):
    def apply() -> None:  # runs in the child between fork and exec
        if resource is None:  # pragma: no cover
            return
        mem = limits.memory_mb * 1024 * 1024
        resource.setrlimit(resource.RLIMIT_AS, (mem, mem))
        cap = limits.max_output_bytes
        resource.setrlimit(resource.RLIMIT_FSIZE, (cap, cap))

    return apply


class SandboxJudge:
    """Executes candidates; one fresh process per test, verdicts by case index."""

    def __init__(
        self,
        run_commands: Mapping[str, Sequence[str]] | None = None,
        scratch_dir: str | Path | None = None,
        process_cap: int = 4,
    ):
        self._run_commands = {k: list(v) for k, v in (run_commands or DEFAULT_RUN_COMMANDS).items()}
        self._scratch_dir = Path(scratch_dir) if scratch_dir else None
        self._process_cap = max(1, process_cap)

    def run_tests(
        self,
        candidate,
        tests: Sequence[TestCase],
        limits: RunLimits | None = None,
    ) -> ExecutionResult:
        """Judge ``candidate`` (anything with .source and .language_tag).

        A failing, crashing, or timing-out test never stops the batch; the
        full verdict vector is needed for best-candidate selection.
        """
        limits = limits or RunLimits()
        tag = (candidate.language_tag or "python").lower()
        argv_template = self._run_commands.get(tag)
        if argv_template is None:
            verdicts = [
                TestVerdict(i, VerdictStatus.SANDBOX_ERROR, "", f"no run command for language {tag!r}", 0)
                for i in range(len(tests))
            ]
            return ExecutionResult.from_verdicts(verdicts)
        with tempfile.TemporaryDirectory(dir=self._scratch_dir, prefix="reqalign-judge-") as tdir:
            source_path = Path(tdir) / f"candidate{_SOURCE_SUFFIX.get(tag, '.txt')}"
            source_path.write_text(candidate.source, encoding="utf-8")
            argv = [part.replace("{source}", str(source_path)) for part in argv_template]
            if len(tests) <= 1 or self._process_cap == 1:
                verdicts = [
                    self._run_single(argv, test, i, limits, Path(tdir))
                    for i, test in enumerate(tests)
                ]
            else:
                with ThreadPoolExecutor(max_workers=self._process_cap) as pool:
                    verdicts = list(
                        pool.map(
                            lambda pair: self._run_single(argv, pair[1], pair[0], limits, Path(tdir)),
                            enumerate(tests),
                        )
                    )
        return ExecutionResult.from_verdicts(verdicts)

    def _run_single(
        self,
        argv: list[str],
        test: TestCase,
        index: int,
        limits: RunLimits,
        scratch: Path,
    ) -> TestVerdict:
        out_path = scratch / f"out-{index}.txt"
        err_path = scratch / f"err-{index}.txt"
        started = time.monotonic()
        try:
            with out_path.open("wb") as out_fh, err_path.open("wb") as err_fh:
                proc = subprocess.Popen(
                    argv,
                    stdin=subprocess.PIPE,
                    stdout=out_fh,
                    stderr=err_fh,
                    cwd=scratch,
                    preexec_fn=_limit_setter(limits) if resource is not None else None,
                )
                try:
                    proc.communicate(test.input.encode("utf-8"), timeout=limits.wall_time_s)
                    timed_out = False
                except subprocess.TimeoutExpired:
                    proc.kill()
                    proc.wait()
                    timed_out = True
        except OSError as exc:
            wall_ms = int((time.monotonic() - started) * 1000)
            return TestVerdict(index, VerdictStatus.SANDBOX_ERROR, "", str(exc), wall_ms)
        wall_ms = int((time.monotonic() - started) * 1000)
        stdout = self._read_capped(out_path, limits.max_output_bytes)
        stderr = self._read_capped(err_path, limits.max_output_bytes)
        status = self._classify(proc.returncode, timed_out, out_path, limits, stdout, test)
        return TestVerdict(
            index,
            status,
            stdout[:_EXCERPT_BYTES],
            stderr[:_EXCERPT_BYTES],
            wall_ms,
        )

    @staticmethod
    def _read_capped(path: Path, cap: int) -> str:
        try:
            with path.open("rb") as fh:
                return fh.read(cap + 1).decode("utf-8", errors="replace")
        except OSError:
            return ""

    @staticmethod
    def _classify(
        returncode: int | None,
        timed_out: bool,
        out_path: Path,
        limits: RunLimits,
        stdout: str,
        test: TestCase,
    ) -> VerdictStatus:
        if timed_out:
            return VerdictStatus.TIMEOUT
        try:
            size = out_path.stat().st_size
        except OSError:
            size = 0
        killed_by_fsize = returncode == -signal.SIGXFSZ if returncode is not None else False
        if killed_by_fsize or size >= limits.max_output_bytes:
            return VerdictStatus.OUTPUT_LIMIT
        if returncode != 0:
            return VerdictStatus.RUNTIME_ERROR
        if normalize_output(stdout) == normalize_output(test.expected_output):
            return VerdictStatus.PASS
        return VerdictStatus.WRONG_OUTPUT
