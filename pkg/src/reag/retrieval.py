"""Multi-level retrieval: coarse full-image search, fine question-crop search,
and the union-max merge that yields the noisy passage set.

Coarse and fine stages are independent pure lookups over the shared immutable
index; the merge keeps each document's best score across stages, sorts, and
truncates to the top-k documents.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Sequence

from .backends import EmbedderBackend, RegionProposerBackend
from .core import KnowledgeBase, Passage, Query, RetrievalHit, Stage
from .index import VectorIndex


class RetrievalError(RuntimeError):
    """Backend or data failure during a retrieval stage."""

    def __init__(self, stage: Stage, message: str):
        super().__init__(f"[{stage.value}] {message}")
        self.stage = stage


@dataclass(frozen=True)
class NoisyPassageSet:
    """Passages from the merged top-k documents, in (doc rank, passage) order."""

    passages: tuple[Passage, ...]
    source_hits: tuple[RetrievalHit, ...]

    def __post_init__(self) -> None:
        known = {hit.doc_id for hit in self.source_hits}
        orphans = {p.parent_doc for p in self.passages} - known
        if orphans:
            raise ValueError(f"passages reference docs missing from source_hits: {sorted(orphans)}")

    def doc_ids(self) -> list[str]:
        return [hit.doc_id for hit in self.source_hits]


# Heuristic noun test: a token is a noun candidate unless it appears in one
# of the closed stoplists below. Deliberately shallow; swap in a POS-tagged
# extractor via the `subject_extractor` hook where quality matters.
_FUNCTION_WORDS = frozenset("""
    a an the this that these those what which who whom whose when where why how
    is are was were be been being am do does did done doing have has had having
    can could will would shall should may might must need
    of by in from on at for with to into onto about over under between during
    through against along across behind beyond near without within
    and or nor but if as than then so such no not any some all both each every
    either neither none it its itself he she they them him his her hers their
    theirs you your yours we us our ours i me my mine there here
    ever never also just only even still yet again very too more most much many
""".split())

_VERB_STOPLIST = frozenset("""
    designed named called made built created founded discovered invented wrote
    written directed located live lives lived living eat eats eaten eating ate
    used using play played plays playing win won wins winning hold held holds
    begin began begun opened opens closed come comes came go goes went gone get
    gets got take takes took taken give gives gave given know known knows knew
    see sees saw seen say says said become becomes became prefer prefers
    preferred belong belongs belonged refer refers referred depict depicts
    depicted shown carry carries carried serve serves served grow grows grown
    grew lay lays laid die dies died dyed purchased introduced placed put
    end ends ended find finds happen happens happened occur occurs occurred
""".split())

_ADJECTIVE_STOPLIST = frozenset("""
    first last next previous new old big small large little long short high low
    few fewer several main major common commonly famous best worst closest
    nearest farthest upper lower same different original current former early
    late typical typically northern southern eastern western religious
    meteorological able possible likely unlikely
""".split())

PREPOSITIONS = ("of", "by", "in", "from", "on", "at", "for", "with")

_DEMONSTRATIVES = ("this", "these")

_TOKEN_RE = re.compile(r"[a-z']+")


def _noun_candidates(tokens: list[str]) -> list[bool]:
    return [
        tok.isalpha()
        and tok not in _FUNCTION_WORDS
        and tok not in _VERB_STOPLIST
        and tok not in _ADJECTIVE_STOPLIST
        for tok in tokens
    ]


def extract_subject(question: str) -> str | None:
    """Best-effort subject of a question, by priority:

    1. first noun following a demonstrative ("this" / "these");
    2. first noun following a preposition from the closed list;
    3. last noun in the question.

    Returns None when no token survives the stoplist filtering.
    """
    tokens = _TOKEN_RE.findall(question.lower())
    is_noun = _noun_candidates(tokens)

    for i, tok in enumerate(tokens):
        if tok in _DEMONSTRATIVES:
            for j in range(i + 1, len(tokens)):
                if is_noun[j]:
                    return tokens[j]

    for i, tok in enumerate(tokens):
        if tok in PREPOSITIONS:
            for j in range(i + 1, len(tokens)):
                if is_noun[j]:
                    return tokens[j]

    for i in range(len(tokens) - 1, -1, -1):
        if is_noun[i]:
            return tokens[i]
    return None


def coarse_retrieve(
    query: Query, index: VectorIndex, k: int, embedder: EmbedderBackend
) -> list[RetrievalHit]:
    """Top-k hits for the full query image, tagged as the coarse stage."""
    if len(index) == 0:
        return []
    try:
        vector = embedder.embed(query.image_ref)
    except Exception as exc:
        raise RetrievalError(Stage.COARSE, f"embedder failed on {query.image_ref!r}: {exc}") from exc
    return index.search(vector, k)


def fine_retrieve(
    query: Query,
    index: VectorIndex,
    k: int,
    embedder: EmbedderBackend,
    region: RegionProposerBackend,
    subject_extractor: Callable[[str], str | None] = extract_subject,
) -> list[RetrievalHit]:
    """Top-k hits for the question-subject crop, tagged as the fine stage.

    Silently contributes nothing (empty list) when no subject is found or the
    region proposer detects no box; a precomputed ``query.crop_ref`` skips the
    proposer.
    """
    if len(index) == 0:
        return []
    crop_ref = query.crop_ref
    if crop_ref is None:
        subject = subject_extractor(query.question)
        if subject is None:
            return []
        try:
            crop_ref = region.propose_region(query.image_ref, subject)
        except Exception as exc:
            raise RetrievalError(Stage.FINE, f"region proposer failed: {exc}") from exc
        if crop_ref is None:
            return []
    try:
        vector = embedder.embed(crop_ref)
    except Exception as exc:
        raise RetrievalError(Stage.FINE, f"embedder failed on {crop_ref!r}: {exc}") from exc
    hits = index.search(vector, k)
    return [RetrievalHit(doc_id=h.doc_id, score=h.score, stage=Stage.FINE) for h in hits]


def merge_rank(
    coarse: Sequence[RetrievalHit],
    fine: Sequence[RetrievalHit],
    kb: KnowledgeBase,
    k: int,
) -> NoisyPassageSet:
    """Union-max merge of the two hit lists, then keep the top-k documents.

    Per-document score is the max over stages (ties prefer the coarse tag);
    documents sort by descending score with ascending doc_id as tie-break, and
    passages concatenate in document order, preserving ingestion order inside
    each document.
    """
    best: dict[str, RetrievalHit] = {}
    for hit in list(coarse) + list(fine):
        if hit.doc_id not in kb:
            raise RetrievalError(hit.stage, f"hit references unknown doc_id {hit.doc_id!r}")
        cur = best.get(hit.doc_id)
        if cur is None or hit.score > cur.score or (
            hit.score == cur.score and cur.stage is Stage.FINE and hit.stage is Stage.COARSE
        ):
            best[hit.doc_id] = hit
    ranked = sorted(best.values(), key=lambda h: (-h.score, h.doc_id))[:k]
    passages: list[Passage] = []
    for hit in ranked:
        passages.extend(kb.get(hit.doc_id).passages)
    return NoisyPassageSet(passages=tuple(passages), source_hits=tuple(ranked))
