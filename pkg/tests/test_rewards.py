from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from intuit.reasoner import MALFORMED, Trajectory, parse_trajectory, serialize
from intuit.rewards import (
    RewardBreakdown,
    RewardConfig,
    consistency_reward,
    correctness_reward,
    format_reward,
    score,
    total_reward,
)
from intuit.worldgen import Instance, WorldConfig, label_rule, trace_body

CFG = WorldConfig()
V = CFG.vocab
X = [V.evidence(0), V.evidence(0), V.evidence(1), V.neg] + [V.filler(1)] * 20
INST = Instance(0, X, 0, 0, "grpo")
COUNTS = label_rule(X, CFG)[1]  # [2, 0, 0, 0]


def traj(trace, answer):
    toks = serialize(trace, answer, V)
    body, ans = parse_trajectory(toks, V)
    return Trajectory(toks[1:], body, ans, 0.0)


def malformed(trace):
    return Trajectory(list(trace), list(trace), MALFORMED, 0.0)


def test_format_reward():
    assert format_reward(traj(trace_body(X, COUNTS, V), 0)) == 1
    assert format_reward(malformed([V.skip])) == 0
    assert format_reward(traj(trace_body(X, COUNTS, V), 3)) == 1


def test_format_ignores_think_content():
    assert format_reward(traj([], 1)) == format_reward(traj([V.neg] * 30, 1)) == 1


def test_correctness_reward():
    assert correctness_reward(2, 2) == 1
    assert correctness_reward(1, 2) == 0
    assert correctness_reward(MALFORMED, 0) == 0


def test_consistency_examples():
    assert consistency_reward(traj(trace_body(X, COUNTS, V), 0), INST, CFG) == 1.0
    wrong = list(COUNTS)
    wrong[3] = 2
    assert consistency_reward(traj(trace_body(X, wrong, V), 0), INST, CFG) == 0.75
    assert consistency_reward(traj([V.skip] * 24, 0), INST, CFG) == 0.0


def test_consistency_counts_omitted_classes_as_misses():
    partial = [V.class_marker(0), V.digit(2), V.class_marker(1), V.digit(0)]
    assert consistency_reward(traj(partial, 0), INST, CFG) == 0.5


def test_malformed_scores_zero_everywhere():
    b = score(malformed(trace_body(X, COUNTS, V)), INST, CFG, RewardConfig())
    assert (b.format, b.correct, b.consistency, b.total) == (0, 0, 0.0, 0.0)


def test_perfect_trajectory_scores_one():
    b = score(traj(trace_body(X, COUNTS, V), 0), INST, CFG, RewardConfig())
    assert b.total == pytest.approx(1.0, abs=1e-12)


def test_breakdown_total_is_weighted_sum():
    cfg = RewardConfig(0.5, 0.25, 0.25)
    b = score(traj(trace_body(X, [2, 0, 1, 0], V), 2), INST, CFG, cfg)
    assert b == RewardBreakdown(1, 0, 0.75, 0.5 + 0.25 * 0.75)
    assert total_reward(b, cfg) == b.total


def test_reward_config_validation():
    with pytest.raises(ValueError):
        RewardConfig(0.5, 0.5, 0.5)
    with pytest.raises(ValueError):
        RewardConfig(-0.2, 0.6, 0.6)


weights = st.tuples(st.floats(0, 1), st.floats(0, 1)).filter(lambda w: w[0] + w[1] <= 1)


@given(weights, st.integers(0, 1), st.integers(0, 1), st.floats(0, 1))
def test_total_is_bounded_and_monotone(w, fmt, cor, cons):
    cfg = RewardConfig(w[0], w[1], max(0.0, 1.0 - w[0] - w[1]))
    t = total_reward((fmt, cor, cons), cfg)
    assert -1e-12 <= t <= 1 + 1e-12
    assert total_reward((1, cor, cons), cfg) >= total_reward((0, cor, cons), cfg)
    assert total_reward((fmt, 1, cons), cfg) >= total_reward((fmt, 0, cons), cfg)
    assert total_reward((fmt, cor, min(1.0, cons + 0.1)), cfg) >= t


def test_rewards_are_pure():
    t = traj(trace_body(X, [2, 1, 0, 0], V), 0)
    assert score(t, INST, CFG, RewardConfig()) == score(t, INST, CFG, RewardConfig())
