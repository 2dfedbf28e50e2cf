from __future__ import annotations

from pathlib import Path

import pytest

from reag.core import Document, KnowledgeBase, Passage

GOLDEN_DIR = Path(__file__).parent / "golden"


@pytest.fixture
def golden_dir() -> Path:
    return GOLDEN_DIR


def make_doc(doc_id: str, n_passages: int = 2, image_ref: str | None = None) -> Document:
    passages = tuple(
        Passage(passage_id=f"{doc_id}-p{i}", text=f"passage {i} of {doc_id}", parent_doc=doc_id)
        for i in range(n_passages)
    )
    return Document(
        doc_id=doc_id,
        metadata=f"title of {doc_id}",
        passages=passages,
        image_ref=image_ref,
    )


@pytest.fixture
def small_kb() -> KnowledgeBase:
    return KnowledgeBase([make_doc(f"d{i}", image_ref=f"img://{i}") for i in range(5)])
