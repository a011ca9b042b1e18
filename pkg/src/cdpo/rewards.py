"""Rule-based rewards: answer-format gate plus soft set accuracy.

A response earns the format point iff its token sequence parses as a
well-formed answer block. Accuracy is |predicted| / |correct| when the
prediction is a non-empty subset of the correct letters and zero
otherwise, so wrong letters are never partially credited.
"""

from __future__ import annotations

from dataclasses import dataclass

from .policy import parse_answer
from .qgen import Question


@dataclass(frozen=True)
class RewardWeights:
    accuracy: float = 1.0
    format: float = 0.5


@dataclass(frozen=True)
class RewardBreakdown:
    format: float
    accuracy: float
    total: float
    parsed: frozenset[str] | None


def format_reward(tokens: tuple[int, ...]) -> float:
    return 1.0 if parse_answer(tokens) is not None else 0.0


def soft_accuracy(predicted: frozenset[str] | None, answer_set: frozenset[str]) -> float:
    if not answer_set:
        raise ValueError("answer set must be non-empty")
    if not predicted:  # unparseable or empty prediction
        return 0.0
    if not predicted <= answer_set:
        return 0.0
    return len(predicted) / len(answer_set)


def total_reward(
    tokens: tuple[int, ...],
    question: Question,
    weights: RewardWeights = RewardWeights(),
) -> RewardBreakdown:
    parsed = parse_answer(tokens)
    fmt = 1.0 if parsed is not None else 0.0
    acc = soft_accuracy(parsed, question.answer_set)
    return RewardBreakdown(
        format=fmt,
        accuracy=acc,
        total=weights.accuracy * acc + weights.format * fmt,
        parsed=parsed,
    )
