"""Exact top-k nearest-neighbor search under cosine similarity.

Brute-force over a dense matrix: at desk scale (<= 1e5 documents) exactness
is affordable and the same code doubles as the oracle for any approximate
backend added later. Vectors are L2-normalized at build time, so search is a
single matrix-vector product.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import RetrievalHit, Stage


class ModalityTag(str, Enum):
    METADATA = "metadata"
    IMAGE = "image"


class VectorIndexError(ValueError):
    """Raised for malformed index input: duplicate keys, dim mismatches, bad vectors."""


@dataclass(frozen=True)
class EmbeddingVector:
    """Fixed-length embedding; entries must be finite."""

    values: tuple[float, ...]

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise VectorIndexError("embedding must be a non-empty 1-d vector")
        if not np.all(np.isfinite(arr)):
            raise VectorIndexError("embedding contains NaN or infinite entries")

    @property
    def dim(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)

    @classmethod
    def from_array(cls, arr: Sequence[float] | np.ndarray) -> "EmbeddingVector":
        return cls(values=tuple(float(x) for x in arr))


@dataclass(frozen=True)
class IndexEntry:
    doc_id: str
    vector: EmbeddingVector
    modality_tag: ModalityTag


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Cosine similarity in [-1, 1]; rejects dim mismatch and zero-norm input."""
    if a.dim != b.dim:
        raise VectorIndexError(f"dimension mismatch: {a.dim} vs {b.dim}")
    av, bv = a.as_array(), b.as_array()
    na, nb = float(np.linalg.norm(av)), float(np.linalg.norm(bv))
    if na == 0.0 or nb == 0.0:
        raise VectorIndexError("cosine undefined for zero-norm vector")
    return float(np.clip(np.dot(av, bv) / (na * nb), -1.0, 1.0))


class VectorIndex:
    """Immutable searchable index over (doc_id, modality) embeddings."""

    def __init__(self, matrix: np.ndarray, keys: list[tuple[str, ModalityTag]]):
        self._matrix = matrix
        self._keys = keys

    def __len__(self) -> int:
        return len(self._keys)

    @property
    def dim(self) -> int:
        return int(self._matrix.shape[1]) if len(self._keys) else 0

    @property
    def keys(self) -> list[tuple[str, ModalityTag]]:
        return list(self._keys)

    def search(
        self,
        query: EmbeddingVector,
        k: int,
        modality: ModalityTag | None = None,
    ) -> list[RetrievalHit]:
        """Top-k entries by descending cosine; ties break by ascending doc_id.

        The returned stage tag is always ``coarse``; callers re-tag fine hits.
        """
        if k <= 0:
            raise VectorIndexError(f"k must be positive, got {k}")
        if len(self._keys) == 0:
            return []
        if query.dim != self.dim:
            raise VectorIndexError(f"query dim {query.dim} does not match index dim {self.dim}")
        qv = query.as_array()
        qn = float(np.linalg.norm(qv))
        if qn == 0.0:
            raise VectorIndexError("cosine undefined for zero-norm query")
        scores = self._matrix @ (qv / qn)
        rows = range(len(self._keys))
        if modality is not None:
            rows = [i for i in rows if self._keys[i][1] is modality]
        ranked = sorted(rows, key=lambda i: (-scores[i], self._keys[i][0], self._keys[i][1].value))
        return [
            RetrievalHit(doc_id=self._keys[i][0], score=float(scores[i]), stage=Stage.COARSE)
            for i in ranked[:k]
        ]

    def save(self, path: str | Path) -> None:
        """Flat binary file: little-endian header (dim, count) then float64 rows,
        plus a JSON sidecar mapping row -> (doc_id, modality_tag)."""
        path = Path(path)
        count = len(self._keys)
        dim = self.dim
        with open(path, "wb") as fh:
            fh.write(struct.pack("<II", dim, count))
            if count:
                fh.write(self._matrix.astype("<f8").tobytes(order="C"))
        sidecar = {"rows": [[doc_id, tag.value] for doc_id, tag in self._keys]}
        Path(str(path) + ".meta.json").write_text(json.dumps(sidecar, indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "VectorIndex":
        path = Path(path)
        raw = path.read_bytes()
        dim, count = struct.unpack_from("<II", raw, 0)
        matrix = np.frombuffer(raw, dtype="<f8", offset=8, count=dim * count).reshape(count, dim)
        sidecar = json.loads(Path(str(path) + ".meta.json").read_text())
        keys = [(str(doc_id), ModalityTag(tag)) for doc_id, tag in sidecar["rows"]]
        if len(keys) != count:
            raise VectorIndexError(f"sidecar rows ({len(keys)}) disagree with header count ({count})")
        return cls(matrix=matrix.copy(), keys=keys)


def build_index(entries: Sequence[IndexEntry]) -> VectorIndex:
    """Validate entries and build an index; vectors are L2-normalized here."""
    if not entries:
        return VectorIndex(matrix=np.zeros((0, 0)), keys=[])
    dim = entries[0].vector.dim
    seen: set[tuple[str, ModalityTag]] = set()
    rows = []
    keys: list[tuple[str, ModalityTag]] = []
    for entry in entries:
        if entry.vector.dim != dim:
            raise VectorIndexError(
                f"dim mismatch for {entry.doc_id!r}: expected {dim}, got {entry.vector.dim}"
            )
        key = (entry.doc_id, entry.modality_tag)
        if key in seen:
            raise VectorIndexError(f"duplicate entry for (doc_id, modality) = {key!r}")
        seen.add(key)
        vec = entry.vector.as_array()
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise VectorIndexError(f"zero-norm vector for {entry.doc_id!r}")
        rows.append(vec / norm)
        keys.append(key)
    return VectorIndex(matrix=np.vstack(rows), keys=keys)
