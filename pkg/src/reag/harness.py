"""Dataset ingestion, pipeline assembly, evaluation, and ablation sweeps.

The executable surface tying retrieval, filtering, generation, and scoring
together. Batch runs are failure-isolated per record: a stage failure is
recorded in that record's provenance and the record scores 0 instead of
aborting the evaluation.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

from .backends import Backends, GenerationRequest
from .core import (
    Dataset,
    Document,
    GroundTruth,
    KnowledgeBase,
    PipelineConfig,
    Query,
    QuestionTask,
    RetrievalHit,
    RetrievalModality,
    Stage,
    ValidationError,
)
from .filtering import CriticVerdict, filter_passages
from .index import IndexEntry, ModalityTag, VectorIndex, build_index
from .prompts import GENERATOR_SYSTEM_PROMPT, render_generator_user
from .retrieval import NoisyPassageSet, coarse_retrieve, fine_retrieve, merge_rank
from .rewards import ExtractedAnswer, RewardBreakdown, extract_answer, score_output

SPLIT_TAGS = frozenset({"unseen_q", "unseen_e", "single_hop", "two_hop"})

_INFOSEEK_TAGS = frozenset({"unseen_q", "unseen_e"})
_EVQA_TAGS = frozenset({"single_hop", "two_hop"})


class DataError(ValueError):
    """Malformed input data (bad JSONL line, unknown id, invariant breach)."""


@dataclass(frozen=True)
class QARecord:
    query: Query
    ground_truth: GroundTruth
    task: QuestionTask
    split_tags: frozenset[str] = frozenset()
    oracle_doc: str | None = None

    def __post_init__(self) -> None:
        unknown = self.split_tags - SPLIT_TAGS
        if unknown:
            raise ValidationError([f"record: unknown split tags {sorted(unknown)}"])
        if self.task.dataset is Dataset.INFOSEEK and self.split_tags & _EVQA_TAGS:
            raise ValidationError(["record: single_hop/two_hop tags invalid for infoseek"])
        if self.task.dataset is Dataset.EVQA and self.split_tags & _INFOSEEK_TAGS:
            raise ValidationError(["record: unseen_q/unseen_e tags invalid for evqa"])

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "query": self.query.to_dict(),
            "ground_truth": self.ground_truth.to_dict(),
            "task": self.task.to_dict(),
            "split_tags": sorted(self.split_tags),
        }
        if self.oracle_doc is not None:
            out["oracle_doc"] = self.oracle_doc
        return out

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "QARecord":
        oracle = raw.get("oracle_doc")
        return cls(
            query=Query.from_dict(raw["query"]),
            ground_truth=GroundTruth.from_dict(raw["ground_truth"]),
            task=QuestionTask.from_dict(raw["task"]),
            split_tags=frozenset(raw.get("split_tags", ())),
            oracle_doc=None if oracle is None else str(oracle),
        )


def _read_jsonl(path: str | Path) -> list[tuple[int, dict[str, Any]]]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append((lineno, json.loads(line)))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
    return rows


def ingest_kb(path: str | Path) -> KnowledgeBase:
    """Load a knowledge base from JSONL, one document per line."""
    docs: list[Document] = []
    seen: dict[str, int] = {}
    for lineno, raw in _read_jsonl(path):
        try:
            doc = Document.from_dict(raw)
        except (ValidationError, KeyError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: invalid document: {exc}") from exc
        if doc.doc_id in seen:
            raise DataError(
                f"{path}:{lineno}: duplicate doc_id {doc.doc_id!r} (first seen on line {seen[doc.doc_id]})"
            )
        seen[doc.doc_id] = lineno
        docs.append(doc)
    return KnowledgeBase(docs)


def ingest_qa(path: str | Path) -> list[QARecord]:
    """Load QA records from JSONL, one record per line."""
    records: list[QARecord] = []
    for lineno, raw in _read_jsonl(path):
        try:
            records.append(QARecord.from_dict(raw))
        except (ValidationError, KeyError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: invalid record: {exc}") from exc
    return records


def build_kb_index(
    kb: KnowledgeBase, backends: Backends, modality: RetrievalModality
) -> VectorIndex:
    """Embed every document on the configured side and build the index.

    image_to_text embeds document metadata; image_to_image embeds document
    images (documents without one are skipped: they cannot be retrieved in
    that mode).
    """
    entries: list[IndexEntry] = []
    for doc in kb:
        if modality is RetrievalModality.IMAGE_TO_TEXT:
            vector = backends.embedder.embed(doc.metadata, kind="text")
            tag = ModalityTag.METADATA
        else:
            if doc.image_ref is None:
                continue
            vector = backends.embedder.embed(doc.image_ref, kind="image")
            tag = ModalityTag.IMAGE
        entries.append(IndexEntry(doc_id=doc.doc_id, vector=vector, modality_tag=tag))
    return build_index(entries)


@dataclass
class PipelineTrace:
    """Provenance for one record: hits, verdicts, prompts, and any errors."""

    coarse_hits: list[RetrievalHit] = field(default_factory=list)
    fine_hits: list[RetrievalHit] = field(default_factory=list)
    merged_doc_ids: list[str] = field(default_factory=list)
    verdicts: list[CriticVerdict] = field(default_factory=list)
    system_prompt: str = ""
    user_prompt: str = ""
    generator_output: str = ""
    passages_pre_filter: int = 0
    passages_post_filter: int = 0
    used_no_passage_prompt: bool = False
    oracle: bool = False
    errors: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "coarse_hits": [h.to_dict() for h in self.coarse_hits],
            "fine_hits": [h.to_dict() for h in self.fine_hits],
            "merged_doc_ids": list(self.merged_doc_ids),
            "verdicts": [v.to_dict() for v in self.verdicts],
            "system_prompt": self.system_prompt,
            "user_prompt": self.user_prompt,
            "generator_output": self.generator_output,
            "passages_pre_filter": self.passages_pre_filter,
            "passages_post_filter": self.passages_post_filter,
            "used_no_passage_prompt": self.used_no_passage_prompt,
            "oracle": self.oracle,
            "errors": list(self.errors),
        }


@dataclass(frozen=True)
class RecordResult:
    answer: ExtractedAnswer
    reward: RewardBreakdown
    trace: PipelineTrace

    def to_dict(self) -> dict[str, Any]:
        return {
            "answer": self.answer.extracted,
            "extraction_path": self.answer.extraction_path.value,
            "reward": self.reward.to_dict(),
            "trace": self.trace.to_dict(),
        }


def _generate_and_score(
    record: QARecord,
    relevant_texts: Sequence[str],
    backends: Backends,
    cfg: PipelineConfig,
    trace: PipelineTrace,
) -> RecordResult:
    trace.system_prompt = GENERATOR_SYSTEM_PROMPT
    trace.user_prompt = render_generator_user(record.query.question, list(relevant_texts))
    trace.used_no_passage_prompt = not relevant_texts
    output = ""
    try:
        result = backends.generator.generate(
            GenerationRequest(
                system_prompt=trace.system_prompt,
                user_prompt=trace.user_prompt,
                image_refs=(record.query.image_ref,),
                temperature=cfg.temperature,
                repetition_penalty=cfg.repetition_penalty,
            )
        )
        output = result.text
    except Exception as exc:
        trace.errors.append(f"generate: {exc}")
    trace.generator_output = output
    reward = score_output(output, record.ground_truth, record.task, cfg.gamma, cfg.delta)
    return RecordResult(answer=extract_answer(output), reward=reward, trace=trace)


def run_pipeline(
    record: QARecord,
    kb: KnowledgeBase,
    index: VectorIndex,
    backends: Backends,
    cfg: PipelineConfig,
    critic_in_flight: int = 1,
) -> RecordResult:
    """Execute coarse -> fine -> merge -> filter -> prompt -> generate ->
    extract for one record. When the critic drops every passage, the bare-
    question prompt variant is used and generation still runs."""
    trace = PipelineTrace()
    coarse: list[RetrievalHit] = []
    fine: list[RetrievalHit] = []
    try:
        coarse = coarse_retrieve(record.query, index, cfg.top_k, backends.embedder)
    except Exception as exc:
        trace.errors.append(f"coarse: {exc}")
    try:
        fine = fine_retrieve(record.query, index, cfg.top_k, backends.embedder, backends.region)
    except Exception as exc:
        trace.errors.append(f"fine: {exc}")
    trace.coarse_hits, trace.fine_hits = coarse, fine
    try:
        noisy = merge_rank(coarse, fine, kb, cfg.top_k)
    except Exception as exc:
        trace.errors.append(f"merge: {exc}")
        noisy = NoisyPassageSet(passages=(), source_hits=())
    trace.merged_doc_ids = noisy.doc_ids()
    trace.passages_pre_filter = len(noisy.passages)
    relevant, verdicts = filter_passages(
        record.query, noisy, backends.critic, cfg.critic_threshold, critic_in_flight
    )
    trace.verdicts = verdicts
    trace.passages_post_filter = len(relevant)
    return _generate_and_score(record, [p.text for p in relevant], backends, cfg, trace)


def run_oracle(
    record: QARecord,
    kb: KnowledgeBase,
    backends: Backends,
    cfg: PipelineConfig,
    critic_in_flight: int = 1,
) -> RecordResult:
    """Oracle setting: skip retrieval entirely and feed every passage of the
    record's oracle document to the critic, then the generator."""
    if record.oracle_doc is None:
        raise DataError("record has no oracle_doc")
    if record.oracle_doc not in kb:
        raise DataError(f"oracle_doc {record.oracle_doc!r} not present in the knowledge base")
    doc = kb.get(record.oracle_doc)
    trace = PipelineTrace(oracle=True)
    # Synthetic unit-score hit so provenance still names the source document.
    noisy = NoisyPassageSet(
        passages=doc.passages,
        source_hits=(RetrievalHit(doc_id=doc.doc_id, score=1.0, stage=Stage.COARSE),),
    )
    trace.merged_doc_ids = noisy.doc_ids()
    trace.passages_pre_filter = len(noisy.passages)
    relevant, verdicts = filter_passages(
        record.query, noisy, backends.critic, cfg.critic_threshold, critic_in_flight
    )
    trace.verdicts = verdicts
    trace.passages_post_filter = len(relevant)
    return _generate_and_score(record, [p.text for p in relevant], backends, cfg, trace)


@dataclass(frozen=True)
class EvalReport:
    accuracy: dict[str, float]
    counts: dict[str, dict[str, int]]
    mean_passages_pre_filter: float
    mean_passages_post_filter: float
    config_fingerprint: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "accuracy": dict(self.accuracy),
            "counts": {k: dict(v) for k, v in self.counts.items()},
            "mean_passages_pre_filter": self.mean_passages_pre_filter,
            "mean_passages_post_filter": self.mean_passages_post_filter,
            "config_fingerprint": self.config_fingerprint,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def evaluate(
    records: Sequence[QARecord],
    results: Sequence[RecordResult],
    cfg: PipelineConfig,
) -> EvalReport:
    """Micro-averaged accuracy per split plus the "All" union, with passage
    count statistics before and after filtering. Splits with no samples are
    omitted rather than reported as NaN."""
    if not records:
        raise DataError("evaluate needs at least one record")
    if len(records) != len(results):
        raise DataError(f"{len(records)} records vs {len(results)} results")
    correct: dict[str, int] = {"all": 0}
    total: dict[str, int] = {"all": 0}
    for record, result in zip(records, results):
        hit = int(result.reward.task == 1)
        total["all"] += 1
        correct["all"] += hit
        for tag in sorted(record.split_tags):
            total[tag] = total.get(tag, 0) + 1
            correct[tag] = correct.get(tag, 0) + hit
    accuracy = {split: correct[split] / total[split] for split in total}
    counts = {split: {"correct": correct[split], "total": total[split]} for split in total}
    n = len(results)
    return EvalReport(
        accuracy=accuracy,
        counts=counts,
        mean_passages_pre_filter=sum(r.trace.passages_pre_filter for r in results) / n,
        mean_passages_post_filter=sum(r.trace.passages_post_filter for r in results) / n,
        config_fingerprint=cfg.fingerprint(),
    )


def run_batch(
    records: Sequence[QARecord],
    kb: KnowledgeBase,
    index: VectorIndex,
    backends: Backends,
    cfg: PipelineConfig,
    max_workers: int = 1,
    oracle: bool = False,
) -> list[RecordResult]:
    """Run every record through the pipeline; aggregation is a deterministic
    fold in record order regardless of completion order."""

    def one(record: QARecord) -> RecordResult:
        if oracle:
            return run_oracle(record, kb, backends, cfg)
        return run_pipeline(record, kb, index, backends, cfg)

    if max_workers > 1 and len(records) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            return list(pool.map(one, records))
    return [one(record) for record in records]


SWEEP_AXES = ("k", "threshold")


def sweep(
    records: Sequence[QARecord],
    kb: KnowledgeBase,
    backends: Backends,
    base_cfg: PipelineConfig,
    axis: str,
    values: Sequence[float],
    index: VectorIndex | None = None,
    max_workers: int = 1,
) -> list[tuple[float, EvalReport]]:
    """One full evaluation per axis value (retrieval depth k or critic
    threshold), for the accuracy / passage-count trade-off curves."""
    if axis not in SWEEP_AXES:
        raise DataError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    if not values:
        raise DataError("sweep needs at least one value")
    if index is None:
        index = build_kb_index(kb, backends, base_cfg.retrieval_modality)
    rows: list[tuple[float, EvalReport]] = []
    for value in values:
        if axis == "k":
            cfg = replace(base_cfg, top_k=int(value))
        else:
            cfg = replace(base_cfg, critic_threshold=float(value))
        results = run_batch(records, kb, index, backends, cfg, max_workers=max_workers)
        rows.append((float(value), evaluate(records, results, cfg)))
    return rows


def sweep_to_csv(axis: str, rows: Sequence[tuple[float, EvalReport]]) -> str:
    lines = [f"{axis},accuracy_all,mean_passages_pre_filter,mean_passages_post_filter"]
    for value, report in rows:
        lines.append(
            f"{value:g},{report.accuracy['all']},{report.mean_passages_pre_filter},"
            f"{report.mean_passages_post_filter}"
        )
    return "\n".join(lines) + "\n"
