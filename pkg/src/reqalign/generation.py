"""Code generation from the aligned requirement, plus robust extraction of a
runnable program from the model reply."""
from __future__ import annotations

import re
from dataclasses import dataclass

from .alignment import AlignedRequirement
from .errors import NoCodeBlockFound
from .gateway import ChatRequest, Gateway, Message, Stage
from .prompts import PromptLibrary

_FENCE = re.compile(r"```([A-Za-z0-9_+-]*)[ \t]*\r?\n(.*?)(?:\r?\n)?```", re.DOTALL)

# lines that signal "this is code" for the fenceless fallback
_CODE_LINE = re.compile(
    r"^(?:\s{4,}|\t|def |class |import |from |print\(|return |for |while |if |elif |else:|try:|except|with |@|[A-Za-z_][\w.\[\]]*\s*(?:[+\-*/]?=)\s*\S)"
)
_STRONG_SIGNAL = re.compile(r"^(?:def |class |import |from |print\()|=")


@dataclass(frozen=True)
class CodeCandidate:
    source: str
    language_tag: str
    iteration: int
    revision_of_requirement: int

    def __post_init__(self) -> None:
        if not self.source:
            raise ValueError("candidate source must be non-empty")
        if self.iteration < 1:
            raise ValueError("iteration counts from 1")


def extract_code(reply: str) -> tuple[str, str]:
    """Pull (source, language_tag) out of a model reply.

    The first non-empty fenced block wins; the tag comes from the fence info
    string, defaulting to "python". Without a fence, the longest contiguous
    run of code-looking lines is taken, provided it carries at least one
    strong signal (def/import/print/assignment).
    """
    if not reply or not reply.strip():
        raise NoCodeBlockFound("empty reply")
    for match in _FENCE.finditer(reply):
        body = match.group(2)
        if body.strip():
            tag = match.group(1).strip().lower() or "python"
            return body, tag
    lines = reply.splitlines()
    best: tuple[int, int] | None = None
    run_start: int | None = None
    for i, line in enumerate(lines + [""]):
        is_code = bool(line.strip()) and bool(_CODE_LINE.match(line))
        if is_code and run_start is None:
            run_start = i
        elif not is_code and run_start is not None:
            if best is None or (i - run_start) > (best[1] - best[0]):
                best = (run_start, i)
            run_start = None
    if best is not None:
        block = "\n".join(lines[best[0] : best[1]])
        if any(_STRONG_SIGNAL.search(line) for line in lines[best[0] : best[1]]):
            return block, "python"
    raise NoCodeBlockFound("reply contains neither a fenced block nor code-looking lines")


_RETRY_REMINDER = (
    "Your previous reply contained no code. Reply again with ONLY the complete "
    "program inside one fenced code block."
)


class GenerationEngine:
    """Stateless apart from its gateway handle; safe for concurrent use."""

    def __init__(
        self,
        gateway: Gateway,
        prompts: PromptLibrary | None = None,
        problem_id: str | None = None,
        language: str = "python",
    ):
        self._gateway = gateway
        self._prompts = prompts or PromptLibrary()
        self._problem_id = problem_id
        self._language = language

    def generate_code(
        self,
        req: AlignedRequirement,
        iteration: int,
        *,
        alignment_ran: bool = True,
        extra_guidance: str = "",
    ) -> CodeCandidate:
        """Greedy (temperature 0) generation from the rendered requirement.

        ``alignment_ran`` asserts the align-first contract; callers running
        the no-alignment ablations pass False explicitly. One retry with an
        output-only-code reminder covers replies that forgot the fence.
        """
        if not alignment_ran and req.revision > 0:
            raise ValueError("alignment_ran=False but the requirement carries supplements")
        guidance = f"\n{extra_guidance}\n" if extra_guidance else ""
        prompt = self._prompts.build(
            Stage.CODE_GEN,
            requirement=req.rendered(),
            language=self._language,
            extra_guidance=guidance,
        )
        messages = [Message("user", prompt)]
        reply = self._gateway.complete(
            ChatRequest.for_stage(
                Stage.CODE_GEN,
                messages,
                problem_id=self._problem_id,
                temperature_overrides=self._gateway.config.temperature_overrides,
            )
        )
        try:
            source, tag = extract_code(reply.content)
        except NoCodeBlockFound:
            retry = messages + [
                Message("assistant", reply.content),
                Message("user", _RETRY_REMINDER),
            ]
            reply = self._gateway.complete(
                ChatRequest.for_stage(
                    Stage.CODE_GEN,
                    retry,
                    problem_id=self._problem_id,
                    temperature_overrides=self._gateway.config.temperature_overrides,
                )
            )
            source, tag = extract_code(reply.content)
        return CodeCandidate(
            source=source,
            language_tag=tag or self._language,
            iteration=iteration,
            revision_of_requirement=req.revision,
        )
