"""Checklist-driven requirement alignment: build dimension-tagged questions
with reference answers, answer them from the current requirement, grade the
answers, and synthesize an aligned requirement from what went wrong."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

from .errors import EmptyChecklist
from .gateway import Gateway, Stage
from .masking import SpanFeedback, SpanProposal, gap_question, normalized_reference
from .model import DEFAULT_DIMENSIONS, Dimension, DimensionId, Requirement, dimension_labels
from .prompts import PromptLibrary, call_for_json

DEFAULT_MAX_QUESTIONS = 20


class QuestionStatus(str, Enum):
    OPEN = "OPEN"
    PASSED = "PASSED"
    FAILED = "FAILED"


class QuestionOrigin(str, Enum):
    INITIAL = "INITIAL"
    FROM_VERIFICATION = "FROM_VERIFICATION"


@dataclass
class QuestionItem:
    qid: str
    dimension: DimensionId
    question: str
    reference_answer: str
    status: QuestionStatus = QuestionStatus.OPEN
    last_model_answer: str | None = None
    feedback: str | None = None
    origin: QuestionOrigin = QuestionOrigin.INITIAL

    def mark_passed(self) -> None:
        self.status = QuestionStatus.PASSED

    def mark_failed(self, answer: str, feedback: str) -> None:
        # a PASSED item never reopens; grading only moves OPEN items
        if self.status is QuestionStatus.PASSED:
            raise ValueError(f"question {self.qid} already passed")
        self.status = QuestionStatus.FAILED
        self.last_model_answer = answer
        self.feedback = feedback or "mismatch vs reference"


@dataclass
class Checklist:
    items: list[QuestionItem] = field(default_factory=list)
    revision: int = 0

    @property
    def open_items(self) -> list[QuestionItem]:
        return [i for i in self.items if i.status is QuestionStatus.OPEN]

    @property
    def failed_items(self) -> list[QuestionItem]:
        return [i for i in self.items if i.status is QuestionStatus.FAILED]

    @property
    def passed_items(self) -> list[QuestionItem]:
        return [i for i in self.items if i.status is QuestionStatus.PASSED]

    @property
    def active_items(self) -> list[QuestionItem]:
        """OPEN + FAILED: everything still under consideration."""
        return [i for i in self.items if i.status is not QuestionStatus.PASSED]

    def reopen_failed(self) -> list[str]:
        """FAILED -> OPEN for the next answer round; returns reopened qids."""
        reopened = []
        for item in self.items:
            if item.status is QuestionStatus.FAILED:
                item.status = QuestionStatus.OPEN
                reopened.append(item.qid)
        return reopened

    def item(self, qid: str) -> QuestionItem | None:
        return next((i for i in self.items if i.qid == qid), None)

    def next_qid(self) -> str:
        return f"q{len(self.items) + 1}"


class GradeVerdict(str, Enum):
    CORRECT = "CORRECT"
    INCORRECT = "INCORRECT"


@dataclass(frozen=True)
class GradeEntry:
    qid: str
    verdict: GradeVerdict
    feedback: str


@dataclass(frozen=True)
class GradeReport:
    entries: tuple[GradeEntry, ...]

    @property
    def failures(self) -> tuple[GradeEntry, ...]:
        return tuple(e for e in self.entries if e.verdict is GradeVerdict.INCORRECT)


@dataclass(frozen=True)
class AlignedRequirement:
    """The original text, verbatim, plus dimension-grouped clarifications."""

    original_text: str
    supplements: tuple[tuple[DimensionId, str], ...] = ()
    revision: int = 0

    def rendered(self, taxonomy: tuple[Dimension, ...] = DEFAULT_DIMENSIONS) -> str:
        if not self.supplements:
            return self.original_text
        labels = dimension_labels(taxonomy)
        order = {d.id: i for i, d in enumerate(taxonomy)}
        lines = [self.original_text, "", "CLARIFICATIONS:"]
        grouped = sorted(
            enumerate(self.supplements),
            key=lambda pair: (order.get(pair[1][0], len(order)), pair[0]),
        )
        for _, (dim, text) in grouped:
            lines.append(f"- [{labels.get(dim, dim.value)}] {text}")
        return "\n".join(lines)


def load_few_shots(path: str | Path | None = None) -> list[dict[str, Any]]:
    """Bundled exemplar checklists unless a swap-in file is configured."""
    if path is not None:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    raw = resources.files("reqalign.data").joinpath("few_shots.json").read_text(encoding="utf-8")
    return json.loads(raw)


def _format_few_shots(few_shots: Sequence[Mapping[str, Any]]) -> str:
    blocks = []
    for shot in few_shots:
        questions = json.dumps({"questions": shot["questions"]}, ensure_ascii=False, indent=2)
        blocks.append(f"Requirement:\n{shot['requirement']}\nChecklist:\n{questions}")
    return "\n\n".join(blocks)


class AlignmentEngine:
    """One engine instance serves one session at a time."""

    def __init__(
        self,
        gateway: Gateway,
        taxonomy: tuple[Dimension, ...] = DEFAULT_DIMENSIONS,
        few_shots: Sequence[Mapping[str, Any]] | None = None,
        prompts: PromptLibrary | None = None,
        max_questions: int = DEFAULT_MAX_QUESTIONS,
        problem_id: str | None = None,
    ):
        if few_shots is not None and not few_shots:
            raise ValueError("few_shots must be non-empty when given")
        self._gateway = gateway
        self._taxonomy = taxonomy
        self._few_shots = list(few_shots) if few_shots is not None else load_few_shots()
        self._prompts = prompts or PromptLibrary()
        self._max_questions = max_questions
        self._problem_id = problem_id
        self.notes: list[str] = []  # parse repairs, truncations, dropped entries

    @property
    def _overrides(self) -> dict[Stage, float]:
        return self._gateway.config.temperature_overrides

    def _call(self, stage: Stage, prompt: str, validate) -> Any:
        return call_for_json(
            self._gateway,
            stage,
            prompt,
            validate,
            problem_id=self._problem_id,
            temperature_overrides=self._overrides,
        )

    # -- checklist construction ------------------------------------------------

    def build_checklist(self, requirement: Requirement) -> Checklist:
        dims = "\n".join(f"- {d.id.value}: {d.label} ({d.description})" for d in self._taxonomy)
        prompt = self._prompts.build(
            Stage.CHECKLIST_BUILD,
            requirement=requirement.original_text,
            dimensions=dims,
            max_questions=str(self._max_questions),
            few_shots=_format_few_shots(self._few_shots),
        )
        valid_ids = {d.id for d in self._taxonomy}

        def check(payload: Any) -> list[Mapping[str, Any]]:
            questions = payload["questions"]
            if not isinstance(questions, list):
                raise ValueError("'questions' must be a list")
            return questions

        raw_items = self._call(Stage.CHECKLIST_BUILD, prompt, check)
        checklist = Checklist()
        for raw in raw_items:
            if len(checklist.items) >= self._max_questions:
                self.notes.append(
                    f"checklist truncated to {self._max_questions} questions "
                    f"({len(raw_items)} proposed)"
                )
                break
            try:
                dimension = DimensionId(str(raw["dimension"]))
                question = str(raw["question"]).strip()
                reference = str(raw["reference_answer"]).strip()
            except (KeyError, TypeError, ValueError):
                self.notes.append(f"dropped malformed checklist entry: {raw!r}")
                continue
            if dimension not in valid_ids or not question or not reference:
                self.notes.append(f"dropped out-of-taxonomy or empty entry: {raw!r}")
                continue
            checklist.items.append(
                QuestionItem(checklist.next_qid(), dimension, question, reference)
            )
        return checklist

    # -- answer round ------------------------------------------------------------

    def answer_checklist(
        self, checklist: Checklist, current: AlignedRequirement
    ) -> list[tuple[str, str]]:
        """Answer every OPEN item from the current requirement.

        The answering call never sees the reference answers.
        """
        open_items = checklist.open_items
        if not open_items:
            raise EmptyChecklist("no open questions to answer")
        listing = "\n".join(f"{i.qid}: {i.question}" for i in open_items)
        prompt = self._prompts.build(
            Stage.CHECKLIST_ANSWER,
            requirement=current.rendered(self._taxonomy),
            checklist=listing,
        )

        def check(payload: Any) -> dict[str, str]:
            answers = payload["answers"]
            if not isinstance(answers, list):
                raise ValueError("'answers' must be a list")
            return {str(a["qid"]): str(a["answer"]) for a in answers}

        by_qid = self._call(Stage.CHECKLIST_ANSWER, prompt, check)
        results: list[tuple[str, str]] = []
        for item in open_items:
            if item.qid not in by_qid:
                self.notes.append(f"answer missing for {item.qid}; recorded as empty")
            results.append((item.qid, by_qid.get(item.qid, "")))
        return results

    # -- grading ----------------------------------------------------------------

    def grade_answers(
        self, answers: Sequence[tuple[str, str]], checklist: Checklist
    ) -> GradeReport:
        """Grade answers against references and transition item statuses.

        CORRECT items become PASSED (kept for audit, excluded from prompts);
        INCORRECT items become FAILED with recorded answer and feedback.
        """
        items: list[QuestionItem] = []
        for qid, _ in answers:
            item = checklist.item(qid)
            if item is None or item.status is not QuestionStatus.OPEN:
                raise ValueError(f"answer for {qid!r} does not match an OPEN item")
            items.append(item)
        answer_by_qid = dict(answers)
        blocks = []
        for item in items:
            blocks.append(
                f"qid {item.qid}:\n"
                f"  question: {item.question}\n"
                f"  reference_answer: {item.reference_answer}\n"
                f"  candidate_answer: {answer_by_qid[item.qid]}"
            )
        prompt = self._prompts.build(Stage.ANSWER_GRADE, items="\n".join(blocks))

        def check(payload: Any) -> dict[str, Mapping[str, Any]]:
            grades = payload["grades"]
            if not isinstance(grades, list):
                raise ValueError("'grades' must be a list")
            return {str(g["qid"]): g for g in grades}

        by_qid = self._call(Stage.ANSWER_GRADE, prompt, check)
        entries: list[GradeEntry] = []
        for item in items:
            raw = by_qid.get(item.qid)
            if raw is None:
                # no grade returned: conservatively treat as not yet understood
                verdict = GradeVerdict.INCORRECT
                feedback = "no grade returned"
                self.notes.append(f"grade missing for {item.qid}; marked INCORRECT")
            else:
                verdict_raw = str(raw.get("verdict", "")).upper()
                verdict = (
                    GradeVerdict.CORRECT if verdict_raw == "CORRECT" else GradeVerdict.INCORRECT
                )
                feedback = str(raw.get("feedback", "") or "")
            if verdict is GradeVerdict.CORRECT:
                item.mark_passed()
                entries.append(GradeEntry(item.qid, verdict, feedback))
            else:
                if not feedback:
                    feedback = "mismatch vs reference"
                item.mark_failed(answer_by_qid[item.qid], feedback)
                entries.append(GradeEntry(item.qid, verdict, feedback))
        return GradeReport(tuple(entries))

    # -- synthesis ----------------------------------------------------------------

    def synthesize_aligned_requirement(
        self,
        original: Requirement,
        prior: AlignedRequirement,
        failures: Sequence[GradeEntry],
        checklist: Checklist | None = None,
        verification_feedback: Sequence[SpanFeedback] = (),
    ) -> AlignedRequirement:
        """Fold grading failures and recovery deviations into supplements.

        The original text always survives byte-identical; only the supplement
        section grows. With nothing to fold in, ``prior`` is returned as is.
        """
        if not failures and not verification_feedback:
            return prior
        failure_blocks = []
        for entry in failures:
            item = checklist.item(entry.qid) if checklist else None
            failure_blocks.append(
                f"- question: {item.question if item else entry.qid}\n"
                f"  reference_answer: {item.reference_answer if item else ''}\n"
                f"  wrong_answer: {item.last_model_answer if item else ''}\n"
                f"  feedback: {entry.feedback}"
            )
        fb_blocks = [
            f"- original: {fb.missing_elements or '(see discrepancy)'}\n"
            f"  recovered_as: {fb.recovered_text or '(nothing)'}\n"
            f"  discrepancy: {fb.discrepancy}"
            for fb in verification_feedback
            if not fb.accurate
        ]
        supplements_now = "\n".join(f"- [{d.value}] {t}" for d, t in prior.supplements) or "(none yet)"
        prompt = self._prompts.build(
            Stage.REQ_SYNTHESIS,
            requirement=original.original_text,
            supplements=supplements_now,
            failures="\n".join(failure_blocks) or "(none)",
            verification_feedback="\n".join(fb_blocks) or "(none)",
            dimension_ids=", ".join(d.id.value for d in self._taxonomy),
        )
        valid_ids = {d.id for d in self._taxonomy}

        def check(payload: Any) -> list[Mapping[str, Any]]:
            supplements = payload["supplements"]
            if not isinstance(supplements, list):
                raise ValueError("'supplements' must be a list")
            return supplements

        raw_supplements = self._call(Stage.REQ_SYNTHESIS, prompt, check)
        new: list[tuple[DimensionId, str]] = []
        for raw in raw_supplements:
            try:
                dimension = DimensionId(str(raw["dimension"]))
                text = str(raw["text"]).strip()
            except (KeyError, TypeError, ValueError):
                self.notes.append(f"dropped malformed supplement: {raw!r}")
                continue
            if dimension not in valid_ids or not text:
                self.notes.append(f"dropped out-of-taxonomy or empty supplement: {raw!r}")
                continue
            new.append((dimension, text))
        existing = {(d, normalized_reference(t)) for d, t in prior.supplements}
        merged = list(prior.supplements)
        for dim, text in new:
            if (dim, normalized_reference(text)) not in existing:
                merged.append((dim, text))
                existing.add((dim, normalized_reference(text)))
        return AlignedRequirement(
            original_text=original.original_text,
            supplements=tuple(merged),
            revision=prior.revision + 1,
        )


def feedback_to_questions(
    feedback: Sequence[SpanFeedback],
    plan_spans: Sequence[SpanProposal],
    source_text: str,
) -> list[QuestionItem]:
    """Turn inaccurate recoveries into FROM_VERIFICATION question items.

    The reference answer is the original span wording; the question embeds the
    span's sentence with the span blanked out. Deduplication against the live
    checklist happens in update_checklist.
    """
    span_by_id = {i: span for i, span in enumerate(plan_spans, start=1)}
    questions: list[QuestionItem] = []
    seen: set[tuple[DimensionId, str]] = set()
    for fb in feedback:
        if fb.accurate:
            continue
        span = span_by_id.get(fb.span_id)
        if span is None:
            continue
        key = (span.dimension, normalized_reference(span.original_content))
        if key in seen:
            continue
        seen.add(key)
        questions.append(
            QuestionItem(
                qid="",  # assigned at insertion
                dimension=span.dimension,
                question=gap_question(span, source_text),
                reference_answer=span.original_content,
                origin=QuestionOrigin.FROM_VERIFICATION,
            )
        )
    return questions
