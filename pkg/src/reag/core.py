"""Shared domain types, configuration, and identifiers.

Everything here is immutable after construction and safe to share across
threads. Each type serializes to a canonical snake_case JSON dict used by
the ingestion layer and the CLI.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields
from enum import Enum
from typing import Any, Iterator, Mapping


class Dataset(str, Enum):
    INFOSEEK = "infoseek"
    EVQA = "evqa"


class QuestionKind(str, Enum):
    ENTITY = "entity"
    TIME = "time"
    NUMERICAL = "numerical"
    SINGLE = "single"
    MULTI = "multi"


class RetrievalModality(str, Enum):
    """Which document embedding the retriever compares the query image against."""

    IMAGE_TO_TEXT = "image_to_text"
    IMAGE_TO_IMAGE = "image_to_image"


class Stage(str, Enum):
    """Retrieval stage that produced a hit: full-image or question-crop query."""

    COARSE = "coarse"
    FINE = "fine"


class ValidationError(ValueError):
    """A domain invariant was violated; ``violations`` lists one message per field."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


@dataclass(frozen=True)
class RetrievalHit:
    """One ranked retrieval result with its provenance stage."""

    doc_id: str
    score: float
    stage: Stage

    def __post_init__(self) -> None:
        if not _is_finite_number(self.score):
            raise ValidationError([f"hit {self.doc_id!r}: score must be finite, got {self.score}"])

    def to_dict(self) -> dict[str, Any]:
        return {"doc_id": self.doc_id, "score": self.score, "stage": self.stage.value}


@dataclass(frozen=True)
class Passage:
    """One textual passage of a knowledge-base document."""

    passage_id: str
    text: str
    parent_doc: str

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValidationError([f"passage {self.passage_id!r}: text empty after trimming"])

    def to_dict(self) -> dict[str, Any]:
        return {"passage_id": self.passage_id, "text": self.text, "parent_doc": self.parent_doc}

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any], parent_doc: str | None = None) -> "Passage":
        return cls(
            passage_id=str(raw["passage_id"]),
            text=str(raw["text"]),
            parent_doc=str(raw.get("parent_doc", parent_doc or "")),
        )


@dataclass(frozen=True)
class Document:
    """A knowledge-base entry: metadata, optional image, and its passages."""

    doc_id: str
    metadata: str
    passages: tuple[Passage, ...]
    image_ref: str | None = None

    def __post_init__(self) -> None:
        violations = []
        if not self.passages:
            violations.append(f"document {self.doc_id!r}: passages empty")
        seen: set[str] = set()
        for p in self.passages:
            if p.passage_id in seen:
                violations.append(f"document {self.doc_id!r}: duplicate passage id {p.passage_id!r}")
            seen.add(p.passage_id)
            if p.parent_doc != self.doc_id:
                violations.append(
                    f"document {self.doc_id!r}: passage {p.passage_id!r} claims parent {p.parent_doc!r}"
                )
        if violations:
            raise ValidationError(violations)

    def to_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "doc_id": self.doc_id,
            "metadata": self.metadata,
            "passages": [{"passage_id": p.passage_id, "text": p.text} for p in self.passages],
        }
        if self.image_ref is not None:
            doc["image_ref"] = self.image_ref
        return doc

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "Document":
        doc_id = str(raw["doc_id"])
        passages = tuple(Passage.from_dict(p, parent_doc=doc_id) for p in raw["passages"])
        image_ref = raw.get("image_ref")
        return cls(
            doc_id=doc_id,
            metadata=str(raw.get("metadata", "")),
            passages=passages,
            image_ref=None if image_ref is None else str(image_ref),
        )


@dataclass(frozen=True)
class Query:
    """A question about an image, plus the optional question-subject crop."""

    question: str
    image_ref: str
    crop_ref: str | None = None

    def __post_init__(self) -> None:
        if not self.question.strip():
            raise ValidationError(["query: question empty"])

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"question": self.question, "image_ref": self.image_ref}
        if self.crop_ref is not None:
            out["crop_ref"] = self.crop_ref
        return out

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "Query":
        crop = raw.get("crop_ref")
        return cls(
            question=str(raw["question"]),
            image_ref=str(raw["image_ref"]),
            crop_ref=None if crop is None else str(crop),
        )


@dataclass(frozen=True)
class QuestionTask:
    """Source dataset and task type; together they select the answer matcher."""

    dataset: Dataset
    kind: QuestionKind

    def __post_init__(self) -> None:
        if self.kind is QuestionKind.NUMERICAL and self.dataset is not Dataset.INFOSEEK:
            raise ValidationError(["task: kind 'numerical' only valid for dataset 'infoseek'"])
        if self.kind is QuestionKind.MULTI and self.dataset is not Dataset.EVQA:
            raise ValidationError(["task: kind 'multi' only valid for dataset 'evqa'"])

    def to_dict(self) -> dict[str, Any]:
        return {"dataset": self.dataset.value, "kind": self.kind.value}

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "QuestionTask":
        return cls(dataset=Dataset(raw["dataset"]), kind=QuestionKind(raw["kind"]))


@dataclass(frozen=True)
class GroundTruth:
    """Acceptable answers for one question.

    Each alternative is either a text string, a scalar, or a closed interval
    ``(lo, hi)``. Scoring takes the maximum over alternatives.
    """

    alternatives: tuple[str | float | tuple[float, float], ...]

    def __post_init__(self) -> None:
        violations = []
        if not self.alternatives:
            violations.append("ground_truth: alternatives empty")
        for alt in self.alternatives:
            if isinstance(alt, tuple):
                lo, hi = alt
                if lo > hi:
                    violations.append(f"ground_truth: interval [{lo}, {hi}] has lo > hi")
        if violations:
            raise ValidationError(violations)

    def to_dict(self) -> dict[str, Any]:
        alts: list[Any] = []
        for alt in self.alternatives:
            if isinstance(alt, tuple):
                alts.append([alt[0], alt[1]])
            else:
                alts.append(alt)
        return {"alternatives": alts}

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "GroundTruth":
        alts: list[str | float | tuple[float, float]] = []
        for alt in raw["alternatives"]:
            if isinstance(alt, (list, tuple)):
                lo, hi = alt
                alts.append((float(lo), float(hi)))
            elif isinstance(alt, (int, float)) and not isinstance(alt, bool):
                alts.append(float(alt))
            else:
                alts.append(str(alt))
        return cls(alternatives=tuple(alts))


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of the pipeline, with the published defaults."""

    top_k: int = 20
    critic_threshold: float = 0.1
    gamma: float = 1.0
    delta: float = 0.2
    alpha: float = 0.8
    clip_epsilon: float = 0.2
    group_size: int = 8
    temperature: float = 1.0
    repetition_penalty: float = 1.05
    retrieval_modality: RetrievalModality = RetrievalModality.IMAGE_TO_TEXT

    def to_dict(self) -> dict[str, Any]:
        return {
            "top_k": self.top_k,
            "critic_threshold": self.critic_threshold,
            "gamma": self.gamma,
            "delta": self.delta,
            "alpha": self.alpha,
            "clip_epsilon": self.clip_epsilon,
            "group_size": self.group_size,
            "temperature": self.temperature,
            "repetition_penalty": self.repetition_penalty,
            "retrieval_modality": self.retrieval_modality.value,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "PipelineConfig":
        kwargs = dict(raw)
        if "retrieval_modality" in kwargs:
            kwargs["retrieval_modality"] = RetrievalModality(kwargs["retrieval_modality"])
        known = {f.name for f in fields(cls)}
        unknown = set(kwargs) - known
        if unknown:
            raise ValidationError([f"config: unknown field {name!r}" for name in sorted(unknown)])
        return cls(**kwargs)

    def fingerprint(self) -> str:
        """Stable hash of the full configuration, for report provenance."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def config_violations(cfg: PipelineConfig) -> list[str]:
    """Return one message per violated config invariant (empty when valid)."""
    out: list[str] = []
    if cfg.top_k <= 0:
        out.append(f"top_k: must be positive, got {cfg.top_k}")
    if not 0.0 <= cfg.critic_threshold <= 1.0:
        out.append(f"critic_threshold: must be in [0, 1], got {cfg.critic_threshold}")
    if not 0.0 <= cfg.alpha <= 1.0:
        out.append(f"alpha: must be in [0, 1], got {cfg.alpha}")
    if cfg.clip_epsilon <= 0:
        out.append(f"clip_epsilon: must be positive, got {cfg.clip_epsilon}")
    if cfg.group_size <= 0:
        out.append(f"group_size: must be positive, got {cfg.group_size}")
    if cfg.temperature <= 0:
        out.append(f"temperature: must be positive, got {cfg.temperature}")
    if cfg.repetition_penalty <= 0:
        out.append(f"repetition_penalty: must be positive, got {cfg.repetition_penalty}")
    for name in ("gamma", "delta"):
        value = getattr(cfg, name)
        if not _is_finite_number(value):
            out.append(f"{name}: must be finite, got {value}")
    return out


def validate_config(cfg: PipelineConfig) -> PipelineConfig:
    """Return ``cfg`` unchanged if valid, else raise with the violated fields."""
    violations = config_violations(cfg)
    if violations:
        raise ValidationError(violations)
    return cfg


def _is_finite_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and value == value and abs(value) != float("inf")


class KnowledgeBase:
    """Immutable collection of documents keyed by doc_id."""

    def __init__(self, documents: list[Document] | tuple[Document, ...]):
        by_id: dict[str, Document] = {}
        for doc in documents:
            if doc.doc_id in by_id:
                raise ValidationError([f"knowledge base: duplicate doc_id {doc.doc_id!r}"])
            by_id[doc.doc_id] = doc
        self._docs = by_id

    def __len__(self) -> int:
        return len(self._docs)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._docs

    def __iter__(self) -> Iterator[Document]:
        return iter(self._docs.values())

    def get(self, doc_id: str) -> Document:
        try:
            return self._docs[doc_id]
        except KeyError:
            raise KeyError(f"unknown doc_id {doc_id!r}") from None

    @property
    def passage_count(self) -> int:
        return sum(len(d.passages) for d in self._docs.values())
