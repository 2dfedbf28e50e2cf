"""Scripted end-to-end fixture: a 20-record synthetic KB where each pipeline
mechanism is load-bearing for a distinct group of records.

Group A (6 records): the gold document is coarse-retrievable and no poison
    exists, so even the unfiltered pipeline answers correctly.
Group B (7 records): coarse retrieval drags in a poison passage alongside the
    gold one; only the critic can remove it.
Group C (7 records): the gold document is reachable only through the
    question-crop embedding, so fine-grained retrieval must be on.

Every query axis is orthogonal to every other record's axis; retrievable
documents share a small common component so that zero-scored crop-only
documents can never ride a tie into the coarse top-k.
"""

from __future__ import annotations

import re

import numpy as np

from reag.backends import Backends, MockCritic, MockEmbedder, MockGenerator, MockRegionProposer
from reag.core import Document, GroundTruth, KnowledgeBase, Passage, Query, QuestionTask
from reag.core import Dataset, QuestionKind
from reag.harness import QARecord

N_RECORDS = 20
GROUP_A = range(0, 6)
GROUP_B = range(6, 13)
GROUP_C = range(13, 20)

_DIM = 41  # 20 image axes + 20 crop axes + 1 shared base
_BASE = 40


def _unit(vec: np.ndarray) -> tuple[float, ...]:
    return tuple(vec / np.linalg.norm(vec))


def _axis(i: int, base_weight: float = 0.0, scale: float = 1.0) -> tuple[float, ...]:
    vec = np.zeros(_DIM)
    vec[i] = scale
    vec[_BASE] += base_weight
    return _unit(vec)


def build_ablation_fixture(seed: int = 0):
    """Returns (kb, records, embedder_overrides, critic_overrides, generator_script,
    region_table)."""
    docs: list[Document] = []
    records: list[QARecord] = []
    embedder_overrides: dict[str, tuple[float, ...]] = {}
    critic_overrides: dict[str, float] = {}
    region_table: dict[tuple[str, str], str] = {}

    for i in range(N_RECORDS):
        rid = f"{i:02d}"
        gold_meta = f"gold document {rid}"
        gold = Document(
            doc_id=f"g{rid}",
            metadata=gold_meta,
            passages=(Passage(f"g{rid}-p0", f"GOLD:{rid} the answer is entity{rid}", f"g{rid}"),),
        )
        docs.append(gold)
        critic_overrides[f"g{rid}-p0"] = 0.9

        if i in GROUP_C:
            # Reachable only via the crop axis; no shared base component, so
            # coarse queries score it at exactly zero.
            embedder_overrides[gold_meta] = _axis(20 + i)
            region_table[(f"img://{rid}", "thing")] = f"crop://{rid}"
            embedder_overrides[f"crop://{rid}"] = _axis(20 + i)
        else:
            embedder_overrides[gold_meta] = _axis(i, base_weight=0.1)

        if i in GROUP_B:
            poison_meta = f"poison document {rid}"
            poison = Document(
                doc_id=f"x{rid}",
                metadata=poison_meta,
                passages=(Passage(f"x{rid}-p0", f"POISON:{rid} a misleading claim", f"x{rid}"),),
            )
            docs.append(poison)
            embedder_overrides[poison_meta] = _axis(i, base_weight=0.1, scale=0.99)
            critic_overrides[f"x{rid}-p0"] = 0.01

        embedder_overrides[f"img://{rid}"] = _axis(i, base_weight=0.1)

        records.append(QARecord(
            query=Query(question=f"What is the name of this thing? [q{rid}]",
                        image_ref=f"img://{rid}"),
            ground_truth=GroundTruth(alternatives=(f"entity{rid}",)),
            task=QuestionTask(Dataset.INFOSEEK, QuestionKind.ENTITY),
            split_tags=frozenset({"unseen_q"} if i % 2 == 0 else {"unseen_e"}),
            oracle_doc=f"g{rid}",
        ))

    # Filler documents carry only the shared base direction: retrievable at a
    # small positive score for every query, keeping the coarse top-k full.
    for j in range(5):
        meta = f"filler document {j}"
        doc = Document(
            doc_id=f"f{j:02d}",
            metadata=meta,
            passages=(Passage(f"f{j:02d}-p0", f"filler text {j}", f"f{j:02d}"),),
        )
        docs.append(doc)
        embedder_overrides[meta] = _axis(_BASE)
        critic_overrides[f"f{j:02d}-p0"] = 0.01

    def generator_script(request) -> str:
        match = re.search(r"\[q(\d\d)\]", request.user_prompt)
        if match is None:
            return "<think>no question id</think><answer>unknown</answer>"
        rid = match.group(1)
        if f"POISON:{rid} " in request.user_prompt:
            return f"<think>misled by noise</think><answer>decoy{rid}</answer>"
        if f"GOLD:{rid} " in request.user_prompt:
            return f"<think>found the evidence</think><answer>entity{rid}</answer>"
        return "<think>no evidence retrieved</think><answer>unknown</answer>"

    return KnowledgeBase(docs), records, embedder_overrides, critic_overrides, generator_script, region_table


def ablation_backends(fine_grained: bool, seed: int = 0) -> tuple[KnowledgeBase, list[QARecord], Backends]:
    kb, records, emb, critic, script, region_table = build_ablation_fixture(seed)
    backends = Backends(
        embedder=MockEmbedder(seed=seed, dim=_DIM, overrides=emb),
        critic=MockCritic(seed=seed, overrides=critic),
        generator=MockGenerator(seed=seed, script=script),
        region=MockRegionProposer("table", region_table) if fine_grained else MockRegionProposer("none"),
    )
    return kb, records, backends
