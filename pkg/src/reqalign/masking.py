"""Masked-span verification: propose spans over the requirement, filter them
through deterministic coherence rules, mask, recover from generated code, and
grade the recoveries into alignment feedback.

The validator is a pure function. Rules, checked in this order per proposal:

  R1  span endpoints must not fall inside a word, and the span must cover at
      least one whole word
  R2  at least ``min_gap_words`` unmasked words must separate the span from
      the previously accepted span in the same sentence
  R3  a sentence holds at most ``max_spans_per_sentence`` accepted spans
  R4  a span must not contain a protected framing keyword (input, output,
      constraint(s), example(s)) as a whole word

then the plan-wide budgets: total span count, then masked word fraction.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Sequence

from .errors import EmptyPlan, PlanTextMismatch
from .gateway import Gateway, Stage
from .model import DimensionId, Sentence, segment_sentences, sentence_at, word_boundaries
from .prompts import PromptLibrary, call_for_json


class RejectionRule(str, Enum):
    WORD_SPLIT = "WORD_SPLIT"                    # R1
    CONTEXT_GAP = "CONTEXT_GAP"                  # R2
    SENTENCE_SPAN_LIMIT = "SENTENCE_SPAN_LIMIT"  # R3
    PROTECTED_KEYWORD = "PROTECTED_KEYWORD"      # R4
    TOTAL_SPAN_BUDGET = "TOTAL_SPAN_BUDGET"
    MASK_FRACTION_BUDGET = "MASK_FRACTION_BUDGET"
    SINGLE_SENTENCE = "SINGLE_SENTENCE"          # resolution-time drop
    NOT_FOUND = "NOT_FOUND"                      # resolution-time drop


DEFAULT_PROTECTED_KEYWORDS = frozenset(
    {"input", "output", "constraint", "constraints", "example", "examples"}
)


@dataclass(frozen=True)
class MaskParams:
    min_gap_words: int = 5
    max_spans_per_sentence: int = 2
    max_total_spans: int = 8
    max_masked_word_fraction: float = 0.30
    protected_keywords: frozenset[str] = DEFAULT_PROTECTED_KEYWORDS

    def __post_init__(self) -> None:
        if self.min_gap_words <= 0 or self.max_spans_per_sentence <= 0 or self.max_total_spans <= 0:
            raise ValueError("mask caps and gaps must be positive")
        if not 0 < self.max_masked_word_fraction < 1:
            raise ValueError("max_masked_word_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class SpanProposal:
    sentence_index: int
    char_start: int
    char_end: int
    dimension: DimensionId
    original_content: str


@dataclass(frozen=True)
class DroppedProposal:
    """A raw proposal that never resolved to a valid span."""

    content: str
    dimension: str
    rule: RejectionRule


@dataclass(frozen=True)
class MaskPlan:
    spans: tuple[SpanProposal, ...]
    rejected: tuple[tuple[SpanProposal, RejectionRule], ...]
    params: MaskParams


@dataclass(frozen=True)
class MaskedRequirement:
    masked_text: str
    plan: MaskPlan

    def reconstruct(self) -> str:
        """Substitute every placeholder back; inverse of apply_mask."""
        text = self.masked_text
        for i, span in enumerate(self.plan.spans, start=1):
            text = text.replace(f"[MASK_{i}]", span.original_content, 1)
        return text


@dataclass(frozen=True)
class RecoveredSpan:
    span_id: int  # 1-based, in placeholder order
    text: str
    missing: bool = False


@dataclass(frozen=True)
class SpanFeedback:
    span_id: int
    recovered_text: str
    accurate: bool
    discrepancy: str
    missing_elements: str
    dimension: DimensionId


def _find_occurrence(text: str, needle: str, occurrence: int) -> int:
    start = -1
    for _ in range(occurrence):
        start = text.find(needle, start + 1)
        if start < 0:
            return -1
    return start


def resolve_proposals(
    raw_spans: Sequence[Mapping[str, Any]],
    text: str,
) -> tuple[list[SpanProposal], list[DroppedProposal]]:
    """Resolve (substring, occurrence) proposals to unique char ranges.

    Proposals whose substring is absent, or that cross a sentence boundary,
    are dropped and recorded.
    """
    sentences = segment_sentences(text)
    resolved: list[SpanProposal] = []
    dropped: list[DroppedProposal] = []
    for raw in raw_spans:
        content = str(raw.get("content", ""))
        dim_name = str(raw.get("dimension", ""))
        try:
            dimension = DimensionId(dim_name)
        except ValueError:
            dropped.append(DroppedProposal(content, dim_name, RejectionRule.NOT_FOUND))
            continue
        occurrence = int(raw.get("occurrence", 1) or 1)
        start = _find_occurrence(text, content, occurrence) if content else -1
        if start < 0:
            dropped.append(DroppedProposal(content, dim_name, RejectionRule.NOT_FOUND))
            continue
        end = start + len(content)
        sentence = sentence_at(sentences, start, end)
        if sentence is None:
            dropped.append(DroppedProposal(content, dim_name, RejectionRule.SINGLE_SENTENCE))
            continue
        resolved.append(SpanProposal(sentence.index, start, end, dimension, content))
    return resolved, dropped


def _words_fully_inside(words: list[tuple[int, int]], start: int, end: int) -> list[tuple[int, int]]:
    return [(ws, we) for ws, we in words if start <= ws and we <= end]


def validate_plan(
    proposals: Sequence[SpanProposal],
    text: str,
    params: MaskParams | None = None,
) -> MaskPlan:
    """Deterministic filter over resolved proposals, in document order.

    Pure function of (proposals, text, params); an empty accepted list is a
    legal outcome. Each rejection records exactly one rule: the first failing
    among R1..R4, then the total-span budget, then the masked-fraction budget.
    """
    params = params or MaskParams()
    words = word_boundaries(text)
    total_words = max(1, len(words))
    keyword_set = {k.lower() for k in params.protected_keywords}

    accepted: list[SpanProposal] = []
    rejected: list[tuple[SpanProposal, RejectionRule]] = []
    per_sentence: dict[int, list[SpanProposal]] = {}
    masked_words = 0

    for proposal in sorted(proposals, key=lambda p: (p.char_start, p.char_end)):
        s, e = proposal.char_start, proposal.char_end
        if text[s:e] != proposal.original_content:
            rejected.append((proposal, RejectionRule.NOT_FOUND))
            continue
        inside = _words_fully_inside(words, s, e)
        splits_word = any(ws < s < we or ws < e < we for ws, we in words)
        if splits_word or not inside:
            rejected.append((proposal, RejectionRule.WORD_SPLIT))
            continue
        siblings = per_sentence.get(proposal.sentence_index, [])
        if siblings:
            prev = siblings[-1]
            gap_words = len(_words_fully_inside(words, prev.char_end, s))
            if s < prev.char_end or gap_words < params.min_gap_words:
                rejected.append((proposal, RejectionRule.CONTEXT_GAP))
                continue
        if len(siblings) >= params.max_spans_per_sentence:
            rejected.append((proposal, RejectionRule.SENTENCE_SPAN_LIMIT))
            continue
        if any(text[ws:we].lower() in keyword_set for ws, we in inside):
            rejected.append((proposal, RejectionRule.PROTECTED_KEYWORD))
            continue
        if len(accepted) + 1 > params.max_total_spans:
            rejected.append((proposal, RejectionRule.TOTAL_SPAN_BUDGET))
            continue
        if (masked_words + len(inside)) / total_words > params.max_masked_word_fraction:
            rejected.append((proposal, RejectionRule.MASK_FRACTION_BUDGET))
            continue
        accepted.append(proposal)
        per_sentence.setdefault(proposal.sentence_index, []).append(proposal)
        masked_words += len(inside)

    return MaskPlan(tuple(accepted), tuple(rejected), params)


def apply_mask(text: str, plan: MaskPlan) -> MaskedRequirement:
    """Replace accepted spans with [MASK_i] placeholders, numbered left to right."""
    pieces: list[str] = []
    cursor = 0
    for i, span in enumerate(plan.spans, start=1):
        if text[span.char_start : span.char_end] != span.original_content:
            raise PlanTextMismatch(
                f"span {i} no longer matches the text it was validated against"
            )
        pieces.append(text[cursor : span.char_start])
        pieces.append(f"[MASK_{i}]")
        cursor = span.char_end
    pieces.append(text[cursor:])
    return MaskedRequirement("".join(pieces), plan)


_PLACEHOLDER_KEY = re.compile(r"(?:MASK_)?(\d+)$")


def _recovery_key(raw_key: str) -> int | None:
    match = _PLACEHOLDER_KEY.match(str(raw_key).strip().strip("[]"))
    return int(match.group(1)) if match else None


class MaskVerifier:
    """The gateway-backed half: propose spans, recover them from code, grade."""

    def __init__(
        self,
        gateway: Gateway,
        prompts: PromptLibrary | None = None,
        problem_id: str | None = None,
        max_total_spans: int = 8,
    ):
        self._gateway = gateway
        self._prompts = prompts or PromptLibrary()
        self._problem_id = problem_id
        self._max_total_spans = max_total_spans

    @property
    def _overrides(self) -> dict[Stage, float]:
        return self._gateway.config.temperature_overrides

    def propose_spans(self, text: str) -> tuple[list[SpanProposal], list[DroppedProposal]]:
        """Ask the model for dimension-tagged spans, resolved to char ranges."""
        if not text.strip():
            raise ValueError("cannot propose spans over empty text")
        prompt = self._prompts.build(
            Stage.MASK_PROPOSE,
            requirement=text,
            dimension_ids=", ".join(d.value for d in DimensionId),
            max_spans=str(self._max_total_spans),
        )

        def check(payload: Any) -> list[Mapping[str, Any]]:
            spans = payload["spans"]
            if not isinstance(spans, list):
                raise ValueError("'spans' must be a list")
            return spans

        raw_spans = call_for_json(
            self._gateway,
            Stage.MASK_PROPOSE,
            prompt,
            check,
            problem_id=self._problem_id,
            temperature_overrides=self._overrides,
        )
        return resolve_proposals(raw_spans, text)

    def recover_masks(self, masked: MaskedRequirement, candidate) -> list[RecoveredSpan]:
        """One recovery per placeholder; missing ones come back empty and flagged."""
        if not masked.plan.spans:
            raise EmptyPlan("mask plan has no spans to recover")
        prompt = self._prompts.build(
            Stage.MASK_RECOVER,
            masked_requirement=masked.masked_text,
            code=candidate.source,
            language=candidate.language_tag,
        )

        def check(payload: Any) -> Mapping[str, Any]:
            recoveries = payload["recoveries"]
            if not isinstance(recoveries, Mapping):
                raise ValueError("'recoveries' must be an object")
            return recoveries

        raw = call_for_json(
            self._gateway,
            Stage.MASK_RECOVER,
            prompt,
            check,
            problem_id=self._problem_id,
            temperature_overrides=self._overrides,
        )
        by_id: dict[int, str] = {}
        for raw_key, value in raw.items():
            span_id = _recovery_key(raw_key)
            if span_id is not None:
                by_id[span_id] = str(value)
        results: list[RecoveredSpan] = []
        for i in range(1, len(masked.plan.spans) + 1):
            if i in by_id:
                results.append(RecoveredSpan(i, by_id[i]))
            else:
                results.append(RecoveredSpan(i, "", missing=True))
        return results

    def grade_recovery(
        self,
        plan: MaskPlan,
        recoveries: Sequence[RecoveredSpan],
        source_text: str,
    ) -> list[SpanFeedback]:
        """Per-span feedback. Byte-equal recoveries short-circuit as accurate;
        empty ones auto-fail; only the rest go to the judging call."""
        if len(recoveries) != len(plan.spans):
            raise ValueError("recoveries do not align with the plan")
        sentences = segment_sentences(source_text)
        feedback: dict[int, SpanFeedback] = {}
        to_judge: list[tuple[int, SpanProposal, str]] = []
        for recovered, span in zip(recoveries, plan.spans):
            if recovered.text == span.original_content:
                feedback[recovered.span_id] = SpanFeedback(
                    recovered.span_id, recovered.text, True, "", "", span.dimension
                )
            elif not recovered.text.strip():
                feedback[recovered.span_id] = SpanFeedback(
                    recovered.span_id,
                    recovered.text,
                    False,
                    "not recoverable from code",
                    span.original_content,
                    span.dimension,
                )
            else:
                to_judge.append((recovered.span_id, span, recovered.text))
        if to_judge:
            feedback.update(self._judge_spans(to_judge, sentences))
        return [feedback[i] for i in sorted(feedback)]

    def _judge_spans(
        self,
        items: list[tuple[int, SpanProposal, str]],
        sentences: list[Sentence],
    ) -> dict[int, SpanFeedback]:
        blocks = []
        for span_id, span, recovered in items:
            sentence = next(
                (s.text for s in sentences if s.index == span.sentence_index), ""
            )
            blocks.append(
                f"span_id {span_id}:\n"
                f"  original: {span.original_content}\n"
                f"  recovered: {recovered}\n"
                f"  sentence: {sentence}"
            )
        prompt = self._prompts.build(Stage.RECOVERY_GRADE, spans="\n".join(blocks))

        def check(payload: Any) -> list[Mapping[str, Any]]:
            entries = payload["feedback"]
            if not isinstance(entries, list):
                raise ValueError("'feedback' must be a list")
            return entries

        entries = call_for_json(
            self._gateway,
            Stage.RECOVERY_GRADE,
            prompt,
            check,
            problem_id=self._problem_id,
            temperature_overrides=self._overrides,
        )
        by_id = {}
        for entry in entries:
            try:
                by_id[int(entry["span_id"])] = entry
            except (KeyError, TypeError, ValueError):
                continue
        graded: dict[int, SpanFeedback] = {}
        for span_id, span, recovered in items:
            entry = by_id.get(span_id)
            if entry is None:
                graded[span_id] = SpanFeedback(
                    span_id, recovered, False, "no judgment returned", span.original_content, span.dimension
                )
                continue
            accurate = bool(entry.get("accurate", False))
            discrepancy = str(entry.get("discrepancy", "") or "")
            if not accurate and not discrepancy:
                discrepancy = "differs from the original span"
            graded[span_id] = SpanFeedback(
                span_id,
                recovered,
                accurate,
                discrepancy if not accurate else str(entry.get("discrepancy", "") or ""),
                str(entry.get("missing_elements", "") or ""),
                span.dimension,
            )
        return graded


def gap_question(span: SpanProposal, source_text: str) -> str:
    """Deterministic question wording: the span's sentence with a blank."""
    sentences = segment_sentences(source_text)
    sentence = next((s for s in sentences if s.index == span.sentence_index), None)
    if sentence is None:
        context = "____"
    else:
        rel_start = span.char_start - sentence.char_start
        rel_end = span.char_end - sentence.char_start
        context = sentence.text[:rel_start] + "____" + sentence.text[rel_end:]
    return f'What does the requirement specify where it says: "{context}"?'


def normalized_reference(reference: str) -> str:
    """Dedup key: lowercase, whitespace collapsed."""
    return " ".join(reference.lower().split())
