"""Critic-gated passage filtering.

A passage survives only when the critic's yes-probability strictly exceeds
the threshold (probability equal to the threshold drops). Backend failures
fail closed: the passage is dropped with an error verdict rather than passed
through unvetted.

Training the critic itself is out of scope: this module only consumes
yes-probabilities. A critic trained for this role typically sees negatives
mixed 30% soft (related but unhelpful) / 70% hard (similar to relevant
passages); the mining of such negatives is likewise out of scope.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

from .backends import CriticBackend
from .core import Passage, Query
from .retrieval import NoisyPassageSet


@dataclass(frozen=True)
class CriticVerdict:
    passage_id: str
    yes_probability: float
    kept: bool
    error: str | None = None

    def to_dict(self) -> dict:
        out = {
            "passage_id": self.passage_id,
            "yes_probability": self.yes_probability,
            "kept": self.kept,
        }
        if self.error is not None:
            out["error"] = self.error
        return out


def filter_passages(
    query: Query,
    noisy: NoisyPassageSet,
    critic: CriticBackend,
    threshold: float,
    max_in_flight: int = 1,
) -> tuple[list[Passage], list[CriticVerdict]]:
    """Gate every noisy passage through the critic.

    Returns the surviving passages in their original order plus one verdict
    per input passage. Critic calls run concurrently up to ``max_in_flight``
    and are re-sequenced to input order before thresholding.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")

    def ask(passage: Passage) -> CriticVerdict:
        try:
            prob = float(critic.yes_probability(query, passage))
        except Exception as exc:
            return CriticVerdict(passage.passage_id, 0.0, kept=False, error=str(exc))
        return CriticVerdict(passage.passage_id, prob, kept=prob > threshold)

    if max_in_flight > 1 and len(noisy.passages) > 1:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            verdicts = list(pool.map(ask, noisy.passages))
    else:
        verdicts = [ask(p) for p in noisy.passages]

    relevant = [p for p, v in zip(noisy.passages, verdicts) if v.kept]
    return relevant, verdicts


def failure_count(verdicts: Sequence[CriticVerdict]) -> int:
    return sum(1 for v in verdicts if v.error is not None)


def sweep_threshold(
    verdicts: Sequence[CriticVerdict], thresholds: Sequence[float]
) -> list[tuple[float, int]]:
    """Kept-passage counts when re-gating recorded verdicts at each threshold.

    Counts are non-increasing in the threshold because the gate is a strict
    lower bound on the raw probabilities.
    """
    return [
        (t, sum(1 for v in verdicts if v.error is None and v.yes_probability > t))
        for t in thresholds
    ]
