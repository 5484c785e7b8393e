"""Shared domain types: benchmark problems, the requirement-dimension taxonomy,
and the text-segmentation utilities that masking builds on."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum


class Benchmark(str, Enum):
    APPS = "APPS"
    CODECONTESTS_RAW = "CODECONTESTS_RAW"
    CODECONTESTS = "CODECONTESTS"
    XCODEEVAL = "XCODEEVAL"
    LIVECODEBENCH_LITE = "LIVECODEBENCH_LITE"
    CUSTOM = "CUSTOM"


@dataclass(frozen=True)
class TestCase:
    """One stdin/stdout check. Comparison is whitespace-normalized by the judge."""

    input: str
    expected_output: str


@dataclass(frozen=True)
class Requirement:
    """A benchmark problem: natural-language text plus its public/hidden tests."""

    id: str
    original_text: str
    public_tests: tuple[TestCase, ...] = ()
    hidden_tests: tuple[TestCase, ...] = ()
    title: str | None = None
    source_benchmark: Benchmark = Benchmark.CUSTOM

    def __post_init__(self) -> None:
        if not self.original_text:
            raise ValueError(f"requirement {self.id!r} has empty original_text")
        object.__setattr__(self, "public_tests", tuple(self.public_tests))
        object.__setattr__(self, "hidden_tests", tuple(self.hidden_tests))
        public = {(t.input, t.expected_output) for t in self.public_tests}
        hidden = {(t.input, t.expected_output) for t in self.hidden_tests}
        overlap = public & hidden
        if overlap:
            raise ValueError(
                f"requirement {self.id!r}: {len(overlap)} test(s) appear in both the "
                "public and hidden splits"
            )


class DimensionId(str, Enum):
    PURPOSE = "PURPOSE"
    INPUT_SPEC = "INPUT_SPEC"
    OUTPUT_SPEC = "OUTPUT_SPEC"
    CONSTRAINTS = "CONSTRAINTS"
    EXAMPLE_EXPLANATIONS = "EXAMPLE_EXPLANATIONS"
    EDGE_CASES = "EDGE_CASES"


@dataclass(frozen=True)
class Dimension:
    id: DimensionId
    label: str
    description: str


DEFAULT_DIMENSIONS: tuple[Dimension, ...] = (
    Dimension(DimensionId.PURPOSE, "Purpose", "What the program is expected to accomplish overall."),
    Dimension(DimensionId.INPUT_SPEC, "Input Specification", "Shape, types, and layout of the input."),
    Dimension(DimensionId.OUTPUT_SPEC, "Output Specification", "Exact content, format, and ordering of the output."),
    Dimension(DimensionId.CONSTRAINTS, "Constraints", "Value ranges, sizes, and performance bounds that must hold."),
    Dimension(DimensionId.EXAMPLE_EXPLANATIONS, "Example Explanations", "Why each sample input maps to its sample output."),
    Dimension(DimensionId.EDGE_CASES, "Edge Cases", "Boundary and degenerate situations the solution must handle."),
)


def dimension_labels(taxonomy: tuple[Dimension, ...] = DEFAULT_DIMENSIONS) -> dict[DimensionId, str]:
    return {d.id: d.label for d in taxonomy}


@dataclass(frozen=True)
class Sentence:
    """A half-open [char_start, char_end) slice of the source text."""

    index: int
    char_start: int
    char_end: int
    text: str


# Tokens that end with a period without ending a sentence ("e.g.", "Fig. 3", ...).
_ABBREVIATIONS = frozenset({
    "al", "approx", "cf", "dr", "e.g", "eq", "etc", "fig", "i.e", "mr",
    "mrs", "ms", "no", "resp", "sec", "vs",
})

_PARAGRAPH_BREAK = re.compile(r"\n(?:[ \t]*\n)+")
_TERMINAL = frozenset(".!?")

_WORD_RE = re.compile(r"\d+(?:[.,]\d+)+|\w+", re.UNICODE)


def word_boundaries(text: str) -> list[tuple[int, int]]:
    """Half-open ranges of words: alphanumeric/underscore runs plus number
    literals with internal ``.`` or ``,`` (so "2.5" and "1,000" stay whole)."""
    return [m.span() for m in _WORD_RE.finditer(text)]


def _preceding_token(text: str, dot_index: int) -> str:
    """Token (letters and internal dots) immediately before a period."""
    j = dot_index
    while j > 0 and (text[j - 1].isalpha() or text[j - 1] == "."):
        j -= 1
    return text[j:dot_index].rstrip(".").lower()


def _split_paragraph(text: str, start: int, end: int) -> list[tuple[int, int]]:
    spans: list[tuple[int, int]] = []
    sent_start = start
    i = start
    while i < end:
        ch = text[i]
        if ch not in _TERMINAL:
            i += 1
            continue
        j = i
        while j + 1 < end and text[j + 1] in _TERMINAL:
            j += 1
        run = text[i : j + 1]
        after = j + 1
        at_boundary = after >= end or text[after].isspace()
        is_ellipsis = len(run) >= 2 and set(run) == {"."}
        is_abbrev = run == "." and _preceding_token(text, i) in _ABBREVIATIONS
        if at_boundary and not is_ellipsis and not is_abbrev:
            spans.append((sent_start, after))
            sent_start = after
        i = after
    if sent_start < end:
        spans.append((sent_start, end))
    return spans


def _trim(text: str, start: int, end: int) -> tuple[int, int]:
    while start < end and text[start].isspace():
        start += 1
    while end > start and text[end - 1].isspace():
        end -= 1
    return start, end


def segment_sentences(text: str) -> list[Sentence]:
    """Rule-based sentence segmentation.

    Splits at terminal punctuation (. ! ?) followed by whitespace and at blank
    lines. Decimal points never reach the split rule (they are not followed by
    whitespace), dot-runs of length >= 2 are treated as ellipses and never
    split, and a fixed abbreviation stop-list suppresses splits after tokens
    like "e.g." or "Fig.". Returned ranges are non-overlapping, ordered, and
    cover every non-whitespace character, so joining the slices with the
    original inter-range gaps reproduces the input exactly.
    """
    if not text:
        return []
    sentences: list[Sentence] = []
    cursor = 0
    index = 0
    for gap in list(_PARAGRAPH_BREAK.finditer(text)) + [None]:
        para_end = gap.start() if gap is not None else len(text)
        for raw_start, raw_end in _split_paragraph(text, cursor, para_end):
            s, e = _trim(text, raw_start, raw_end)
            if s == e:
                continue
            sentences.append(Sentence(index, s, e, text[s:e]))
            index += 1
        cursor = gap.end() if gap is not None else len(text)
    return sentences


def sentence_at(sentences: list[Sentence], char_start: int, char_end: int) -> Sentence | None:
    """The single sentence fully containing [char_start, char_end), if any."""
    for sentence in sentences:
        if sentence.char_start <= char_start and char_end <= sentence.char_end:
            return sentence
    return None
