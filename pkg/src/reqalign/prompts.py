"""Prompt templates and structured-output parsing.

Templates are plain text files with ``{name}`` placeholders. Only known field
names are substituted, so literal JSON braces in the template survive. Every
model-facing stage expects a single JSON object back; ``call_for_json`` grants
one reformat retry before giving up.
"""
from __future__ import annotations

import json
import re
from importlib import resources
from pathlib import Path
from typing import Any, Callable

from .errors import UnparsableModelOutput
from .gateway import ChatRequest, Gateway, Message, Stage

_PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")

_STAGE_TEMPLATES = {
    Stage.CHECKLIST_BUILD: "checklist_build.txt",
    Stage.CHECKLIST_ANSWER: "checklist_answer.txt",
    Stage.ANSWER_GRADE: "answer_grade.txt",
    Stage.REQ_SYNTHESIS: "req_synthesis.txt",
    Stage.CODE_GEN: "code_gen.txt",
    Stage.MASK_PROPOSE: "mask_propose.txt",
    Stage.MASK_RECOVER: "mask_recover.txt",
    Stage.RECOVERY_GRADE: "recovery_grade.txt",
}

_SYSTEM_LINE = "You are a meticulous software engineer working from a written requirement."


def render(template: str, **fields: str) -> str:
    """Substitute known {name} placeholders; leave unknown braces untouched."""
    return _PLACEHOLDER.sub(
        lambda m: str(fields[m.group(1)]) if m.group(1) in fields else m.group(0),
        template,
    )


class PromptLibrary:
    """Loads stage templates from a directory, defaulting to the packaged set."""

    def __init__(self, template_dir: str | Path | None = None):
        self._dir = Path(template_dir) if template_dir else None
        self._cache: dict[Stage, str] = {}

    def template(self, stage: Stage) -> str:
        if stage not in self._cache:
            name = _STAGE_TEMPLATES[stage]
            if self._dir is not None:
                text = (self._dir / name).read_text(encoding="utf-8")
            else:
                text = resources.files("reqalign.templates").joinpath(name).read_text(encoding="utf-8")
            self._cache[stage] = text
        return self._cache[stage]

    def build(self, stage: Stage, **fields: str) -> str:
        return render(self.template(stage), **fields)


def extract_json(text: str) -> Any:
    """Pull the first JSON object or array out of a model reply.

    Tolerates code fences and surrounding prose; raises ValueError otherwise.
    """
    stripped = text.strip()
    fence = re.search(r"```(?:json)?\s*\n(.*?)```", stripped, re.DOTALL)
    if fence:
        stripped = fence.group(1).strip()
    try:
        return json.loads(stripped)
    except json.JSONDecodeError:
        pass
    opener = min(
        (i for i in (stripped.find("{"), stripped.find("[")) if i >= 0),
        default=-1,
    )
    if opener < 0:
        raise ValueError("reply contains no JSON object")
    decoder = json.JSONDecoder()
    for start in range(opener, len(stripped)):
        if stripped[start] not in "{[":
            continue
        try:
            value, _ = decoder.raw_decode(stripped[start:])
            return value
        except json.JSONDecodeError:
            continue
    raise ValueError("reply contains no parseable JSON")

_REFORMAT_HINT = (
    "Your previous reply could not be parsed. Respond again with ONLY the "
    "single JSON object described above: no prose, no code fences."
)


def call_for_json(
    gateway: Gateway,
    stage: Stage,
    prompt: str,
    validate: Callable[[Any], Any],
    *,
    problem_id: str | None = None,
    temperature_overrides: dict[Stage, float] | None = None,
    max_output_tokens: int = 4096,
) -> Any:
    """One stage call expecting JSON, with a single reformat retry on failure."""
    messages = [Message("system", _SYSTEM_LINE), Message("user", prompt)]
    last_error: Exception | None = None
    for attempt in range(2):
        request = ChatRequest.for_stage(
            stage,
            messages,
            problem_id=problem_id,
            max_output_tokens=max_output_tokens,
            temperature_overrides=temperature_overrides,
        )
        reply = gateway.complete(request)
        try:
            return validate(extract_json(reply.content))
        except (ValueError, KeyError, TypeError) as exc:
            last_error = exc
            if attempt == 0:
                messages = messages + [
                    Message("assistant", reply.content),
                    Message("user", _REFORMAT_HINT),
                ]
    raise UnparsableModelOutput(
        f"stage {stage.value} reply failed schema after reformat retry: {last_error}"
    )
