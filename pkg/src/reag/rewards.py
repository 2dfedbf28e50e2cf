"""Rule-based verifiable rewards: answer extraction, normalization, matching.

The scoring path is: raw completion -> extracted answer (4-step fallback
chain) -> normalized answer (plus scalar/interval parse) -> task-specific
matcher -> weighted total with the binary format reward. All functions are
pure; a completion batch can be scored in parallel without coordination.

Text answers are compared by exact match after normalization; learned
semantic-similarity matching is deliberately out of scope, so paraphrases
that survive normalization differences score 0.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum

from .core import Dataset, GroundTruth, QuestionKind, QuestionTask

SPECIAL_TOKENS = ("<think>", "</think>", "<answer>", "</answer>")

# Absolute scalar tolerance, even for year-scale magnitudes: 1883 vs 1882
# misses while 3.85 vs 3.82 hits.
SCALAR_TOLERANCE = 0.1
INTERVAL_IOU_THRESHOLD = 0.5
SET_IOU_THRESHOLD = 0.5


class ExtractionPath(str, Enum):
    ANSWER_TAGS = "answer_tags"
    AFTER_ANSWER_OPEN = "after_answer_open"
    AFTER_THINK_CLOSE = "after_think_close"
    WHOLE_OUTPUT = "whole_output"


class Matcher(str, Enum):
    EXACT = "exact"
    NUMERIC_SCALAR = "numeric_scalar"
    SCALAR_IN_INTERVAL = "scalar_in_interval"
    INTERVAL_IOU = "interval_iou"
    SET_IOU = "set_iou"


@dataclass(frozen=True)
class ExtractedAnswer:
    raw_output: str
    extracted: str
    extraction_path: ExtractionPath


@dataclass(frozen=True)
class NormalizedAnswer:
    """Canonical answer text plus at most one of a scalar or interval parse."""

    text: str
    parsed_number: float | None = None
    parsed_interval: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if self.parsed_number is not None and self.parsed_interval is not None:
            raise ValueError("parsed_number and parsed_interval are mutually exclusive")


@dataclass(frozen=True)
class RewardBreakdown:
    task: int
    format: int
    total: float
    matcher: Matcher
    matched_alternative: int | None = None

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "format": self.format,
            "total": self.total,
            "matcher": self.matcher.value,
            "matched_alternative": self.matched_alternative,
        }


_ANSWER_SPAN_RE = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)


def _strip_special_tokens(text: str) -> str:
    for token in SPECIAL_TOKENS:
        text = text.replace(token, "")
    return text.strip()


def extract_answer(output: str) -> ExtractedAnswer:
    """Pull the answer out of a completion via the fallback chain:
    tag span, text after the opening answer tag, text after the closing
    think tag, then the whole output. Special tokens are always removed."""
    span = _ANSWER_SPAN_RE.search(output)
    if span is not None:
        return ExtractedAnswer(output, _strip_special_tokens(span.group(1)), ExtractionPath.ANSWER_TAGS)
    idx = output.find("<answer>")
    if idx != -1:
        tail = output[idx + len("<answer>"):]
        return ExtractedAnswer(output, _strip_special_tokens(tail), ExtractionPath.AFTER_ANSWER_OPEN)
    idx = output.find("</think>")
    if idx != -1:
        tail = output[idx + len("</think>"):]
        return ExtractedAnswer(output, _strip_special_tokens(tail), ExtractionPath.AFTER_THINK_CLOSE)
    return ExtractedAnswer(output, _strip_special_tokens(output), ExtractionPath.WHOLE_OUTPUT)


# Fixed 20-entry contraction table; expansion happens before punctuation
# stripping so the apostrophes are still present.
CONTRACTIONS = {
    "don't": "do not",
    "doesn't": "does not",
    "didn't": "did not",
    "can't": "cannot",
    "couldn't": "could not",
    "won't": "will not",
    "wouldn't": "would not",
    "shouldn't": "should not",
    "isn't": "is not",
    "aren't": "are not",
    "wasn't": "was not",
    "weren't": "were not",
    "hasn't": "has not",
    "haven't": "have not",
    "hadn't": "had not",
    "it's": "it is",
    "that's": "that is",
    "what's": "what is",
    "who's": "who is",
    "let's": "let us",
}

NUMBER_WORDS = {
    "zero": "0", "one": "1", "two": "2", "three": "3", "four": "4",
    "five": "5", "six": "6", "seven": "7", "eight": "8", "nine": "9",
    "ten": "10", "eleven": "11", "twelve": "12", "thirteen": "13",
    "fourteen": "14", "fifteen": "15", "sixteen": "16", "seventeen": "17",
    "eighteen": "18", "nineteen": "19", "twenty": "20",
    "thirty": "30", "forty": "40", "fifty": "50", "sixty": "60",
    "seventy": "70", "eighty": "80", "ninety": "90",
}

ARTICLES = {"a", "an", "the"}

_CONTRACTION_RE = re.compile(
    r"\b(" + "|".join(re.escape(k) for k in CONTRACTIONS) + r")\b"
)
_CONTROL_CHAR_RE = re.compile(r"[\x00-\x1f\x7f]")
# Shields applied before punctuation removal: decimal points, hyphens tight
# between digits ("3-4"), and minus signs opening a numeric token.
_DECIMAL_POINT_RE = re.compile(r"(?<=\d)\.(?=\d)")
_TIGHT_HYPHEN_RE = re.compile(r"(?<=\d)-(?=\d)")
_MINUS_SIGN_RE = re.compile(r"(^|(?<=\s))-(?=\d)")
_PUNCT_RE = re.compile(r"[^a-z0-9\s\x00\x01\x02]")

_NUM = r"(-?\d+(?:\.\d+)?)"
_RANGE_TO_RE = re.compile(rf"^{_NUM} to {_NUM}$")
_RANGE_HYPHEN_RE = re.compile(rf"^{_NUM}-{_NUM}$")
_BETWEEN_RE = re.compile(rf"^between {_NUM} and {_NUM}$")
_LEADING_SCALAR_RE = re.compile(rf"^{_NUM}(?=\s|$)")


def _format_number(value: float) -> str:
    if value == int(value):
        return str(int(value))
    text = repr(value)
    if "e" in text:  # keep plain decimal form so the text re-parses unchanged
        text = f"{value:.12f}".rstrip("0").rstrip(".")
    return text


def normalize(answer: str) -> NormalizedAnswer:
    """Canonicalize an answer string and parse its numeric structure.

    Lowercases, expands contractions, strips punctuation, maps the number
    words zero..twenty and the tens to digits, drops articles, and collapses
    whitespace. Interval forms ("X to Y", "X-Y", "between X and Y") are
    parsed before scalars so "three to four" is not truncated to 3, and
    rewrite the text to the canonical "lo to hi"; a point interval degrades
    to its scalar. The whole procedure is idempotent.
    """
    text = answer.lower()
    text = _CONTROL_CHAR_RE.sub(" ", text)  # free the shield bytes below
    text = text.replace("’", "'").replace("‘", "'")
    text = _CONTRACTION_RE.sub(lambda m: CONTRACTIONS[m.group(1)], text)
    text = _DECIMAL_POINT_RE.sub("\x00", text)
    text = _TIGHT_HYPHEN_RE.sub("\x02", text)
    text = _MINUS_SIGN_RE.sub("\x01", text)
    text = _PUNCT_RE.sub(" ", text)
    text = text.replace("\x00", ".").replace("\x01", "-").replace("\x02", "-")
    tokens = [NUMBER_WORDS.get(tok, tok) for tok in text.split()]
    tokens = [tok for tok in tokens if tok not in ARTICLES]
    text = " ".join(tokens)

    match = _RANGE_TO_RE.match(text) or _RANGE_HYPHEN_RE.match(text) or _BETWEEN_RE.match(text)
    if match is not None:
        lo, hi = float(match.group(1)), float(match.group(2))
        if lo == hi:
            return NormalizedAnswer(text=match.group(1), parsed_number=lo)
        if lo < hi:
            # Canonical surface keeps the matched digit tokens verbatim so a
            # second pass reproduces the exact same value.
            canonical = f"{match.group(1)} to {match.group(2)}"
            return NormalizedAnswer(text=canonical, parsed_interval=(lo, hi))
        # Reversed bounds: keep the surface text, no numeric structure.
        return NormalizedAnswer(text=text)

    scalar = _LEADING_SCALAR_RE.match(text)
    if scalar is not None:
        return NormalizedAnswer(text=text, parsed_number=float(scalar.group(1)))
    return NormalizedAnswer(text=text)


def normalize_alternative(alt: str | float | tuple[float, float]) -> NormalizedAnswer:
    """Normalize one ground-truth alternative, whatever its declared shape."""
    if isinstance(alt, tuple):
        lo, hi = float(alt[0]), float(alt[1])
        if lo == hi:
            return NormalizedAnswer(text=_format_number(lo), parsed_number=lo)
        canonical = f"{_format_number(lo)} to {_format_number(hi)}"
        return NormalizedAnswer(text=canonical, parsed_interval=(lo, hi))
    if isinstance(alt, (int, float)) and not isinstance(alt, bool):
        value = float(alt)
        return NormalizedAnswer(text=_format_number(value), parsed_number=value)
    return normalize(str(alt))


def _interval_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    if union <= 0.0:
        return 1.0 if a == b else 0.0
    return inter / union


def psi_num(pred: NormalizedAnswer, gt: NormalizedAnswer) -> int:
    """Numeric match: scalar within 0.1 absolute, scalar inside a closed
    interval, or interval IoU of at least 0.5. Anything else scores 0."""
    if pred.parsed_number is not None and gt.parsed_number is not None:
        return int(abs(pred.parsed_number - gt.parsed_number) <= SCALAR_TOLERANCE)
    if pred.parsed_number is not None and gt.parsed_interval is not None:
        lo, hi = gt.parsed_interval
        return int(lo <= pred.parsed_number <= hi)
    if pred.parsed_interval is not None and gt.parsed_interval is not None:
        return int(_interval_iou(pred.parsed_interval, gt.parsed_interval) >= INTERVAL_IOU_THRESHOLD)
    return 0


def _numeric_case(pred: NormalizedAnswer, gt: NormalizedAnswer) -> Matcher:
    if pred.parsed_number is not None and gt.parsed_interval is not None:
        return Matcher.SCALAR_IN_INTERVAL
    if pred.parsed_interval is not None and gt.parsed_interval is not None:
        return Matcher.INTERVAL_IOU
    return Matcher.NUMERIC_SCALAR


_ITEM_SPLIT_RE = re.compile(r",|&|\band\b", re.IGNORECASE)


def split_answer_items(text: str) -> frozenset[str]:
    """Split a multi-answer string on commas, "and", and "&", then normalize
    each item; empty items vanish."""
    items = (normalize(part).text for part in _ITEM_SPLIT_RE.split(text))
    return frozenset(item for item in items if item)


def _set_iou(pred: frozenset[str], gt: frozenset[str]) -> float:
    if not pred and not gt:
        return 0.0
    return len(pred & gt) / len(pred | gt)


def task_reward(
    pred: ExtractedAnswer, gt: GroundTruth, task: QuestionTask
) -> tuple[int, Matcher, int | None]:
    """Binary task reward with the matcher that decided it.

    InfoSeek numerical questions use the numeric rule, multi-answer
    questions use item-set IoU, everything else is exact match on the
    normalized strings. The score is the maximum over ground-truth
    alternatives; ``matched_alternative`` is the first one that matched.
    """
    if task.dataset is Dataset.INFOSEEK and task.kind is QuestionKind.NUMERICAL:
        pred_norm = normalize(pred.extracted)
        attempted = Matcher.NUMERIC_SCALAR
        for i, alt in enumerate(gt.alternatives):
            alt_norm = normalize_alternative(alt)
            case = _numeric_case(pred_norm, alt_norm)
            if i == 0:
                attempted = case
            if psi_num(pred_norm, alt_norm):
                return 1, case, i
        return 0, attempted, None

    if task.dataset is Dataset.EVQA and task.kind is QuestionKind.MULTI:
        pred_items = split_answer_items(pred.extracted)
        for i, alt in enumerate(gt.alternatives):
            alt_items = split_answer_items(str(alt))
            if _set_iou(pred_items, alt_items) >= SET_IOU_THRESHOLD:
                return 1, Matcher.SET_IOU, i
        return 0, Matcher.SET_IOU, None

    pred_text = normalize(pred.extracted).text
    for i, alt in enumerate(gt.alternatives):
        alt_text = normalize_alternative(alt).text
        if pred_text and pred_text == alt_text:
            return 1, Matcher.EXACT, i
    return 0, Matcher.EXACT, None


_TEMPLATE_RE = re.compile(r"\s*<think>(.*)</think>\s*<answer>(.*)</answer>\s*", re.DOTALL)


def format_reward(output: str) -> int:
    """1 iff the output is exactly one think block then one answer block,
    with nothing but whitespace outside the tags."""
    if any(output.count(token) != 1 for token in SPECIAL_TOKENS):
        return 0
    return 1 if _TEMPLATE_RE.fullmatch(output) else 0


def total_reward(task: int, fmt: int, gamma: float, delta: float) -> float:
    """Weighted sum of the two binary rewards."""
    return gamma * task + delta * fmt


def score_output(
    output: str,
    gt: GroundTruth,
    task: QuestionTask,
    gamma: float = 1.0,
    delta: float = 0.2,
) -> RewardBreakdown:
    """Full scoring path for one completion."""
    extracted = extract_answer(output)
    task_score, matcher, matched = task_reward(extracted, gt, task)
    fmt_score = format_reward(output)
    return RewardBreakdown(
        task=task_score,
        format=fmt_score,
        total=total_reward(task_score, fmt_score, gamma, delta),
        matcher=matcher,
        matched_alternative=matched,
    )
