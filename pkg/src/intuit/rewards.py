"""Rule-based trajectory rewards: format, correctness and count consistency."""

from __future__ import annotations

from dataclasses import dataclass

from .reasoner import MALFORMED, Trajectory, stated_counts
from .worldgen import Instance, WorldConfig, label_rule


@dataclass(frozen=True)
class RewardConfig:
    w_format: float = 0.2
    w_correct: float = 0.6
    w_consistency: float = 0.2

    def __post_init__(self):
        ws = (self.w_format, self.w_correct, self.w_consistency)
        if min(ws) < 0:
            raise ValueError("reward weights must be non-negative")
        if abs(sum(ws) - 1.0) > 1e-12:
            raise ValueError(f"reward weights must sum to 1, got {sum(ws)!r}")


@dataclass(frozen=True)
class RewardBreakdown:
    format: int
    correct: int
    consistency: float
    total: float


def format_reward(trajectory: Trajectory) -> int:
    return 0 if trajectory.provisional == MALFORMED else 1


def correctness_reward(provisional: int, y: int) -> int:
    return int(provisional != MALFORMED and provisional == y)


def consistency_reward(trajectory: Trajectory, instance: Instance, config: WorldConfig) -> float:
    """Share of classes whose stated count equals the true effective count.

    Classes the trace never states count as misses, so omitting counts
    cannot raise the score. A malformed trajectory has no trace to check
    and scores 0.
    """
    if trajectory.provisional == MALFORMED:
        return 0.0
    vocab = config.vocab
    stated = stated_counts(trajectory.trace, vocab)
    if not stated:
        return 0.0
    _, counts = label_rule(instance.x, config)
    hits = sum(1 for c, n in stated.items() if counts[c] == n)
    return hits / config.num_classes


def total_reward(breakdown: RewardBreakdown | tuple, config: RewardConfig) -> float:
    fmt, cor, cons = breakdown[:3] if isinstance(breakdown, tuple) else (
        breakdown.format,
        breakdown.correct,
        breakdown.consistency,
    )
    return config.w_format * fmt + config.w_correct * cor + config.w_consistency * cons


def score(trajectory: Trajectory, instance: Instance, world: WorldConfig, config: RewardConfig) -> RewardBreakdown:
    fmt = format_reward(trajectory)
    cor = correctness_reward(trajectory.provisional, instance.y)
    cons = consistency_reward(trajectory, instance, world)
    return RewardBreakdown(fmt, cor, cons, total_reward((fmt, cor, cons), config))
