"""Fitness scores and their ordering."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class FitnessScore:
    accuracy: float
    loss: float

    def key(self) -> tuple[float, float]:
        # higher accuracy wins, ties go to the lower loss
        return (self.accuracy, -self.loss)

    def beats(self, other: "FitnessScore | None") -> bool:
        return other is None or self.key() > other.key()


WORST = FitnessScore(0.0, math.inf)


def rank_key(score: FitnessScore | None) -> tuple[int, float, float]:
    """Sort key (ascending = worse); never-evaluated members rank below everything."""
    if score is None:
        return (0, 0.0, 0.0)
    return (1, *score.key())


def mean_score(scores) -> FitnessScore:
    scores = list(scores)
    if not scores:
        raise ValueError("mean of no scores")
    return FitnessScore(
        math.fsum(s.accuracy for s in scores) / len(scores),
        math.fsum(s.loss for s in scores) / len(scores),
    )
