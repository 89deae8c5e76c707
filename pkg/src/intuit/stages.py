"""Cold start, GRPO refinement and calibration training."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .calibrator import CalibratorModel, encode_calibration_input
from .reasoner import (
    MALFORMED,
    PolicyModel,
    SamplerConfig,
    Trajectory,
    batch_nll,
    pack_sequences,
    prompt_tokens,
    rollout,
    trajectory_rng,
)
from .rewards import RewardConfig, score
from .worldgen import Instance, TeacherTrace, WorldConfig

log = logging.getLogger(__name__)

_COLD_STREAM = 201
_GRPO_STREAM = 202
_CAL_ROLLOUT_STREAM = 203
_CAL_TRAIN_STREAM = 204


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    batch_size: int = 64
    lr: float = 2e-5
    K: int = 8
    tau: float = 1.0
    calibration_rollouts: int = 4
    cold_start_epochs: int = 3
    grpo_rounds: int = 50
    calibration_epochs: int = 10
    seed: int = 1
    max_trace_tokens: int = 48
    rollout_temperature: float = 1.0
    kl_coef: float = 0.0
    # per-stage learning rates; None falls back to lr
    lr_cold_start: float | None = None
    lr_grpo: float | None = None
    lr_calibration: float | None = None

    def __post_init__(self):
        if self.K < 1:
            raise nx.ParameterError("K must be >= 1")
        if not self.tau > 0:
            raise nx.ParameterError("tau must be positive")
        if self.lr <= 0:
            raise nx.ParameterError("lr must be positive")
        for name in ("batch_size", "calibration_rollouts"):
            if getattr(self, name) < 1:
                raise nx.ParameterError(f"{name} must be positive")
        for name in ("cold_start_epochs", "grpo_rounds", "calibration_epochs"):
            if getattr(self, name) < 0:
                raise nx.ParameterError(f"{name} must be non-negative")
        for name in ("lr_cold_start", "lr_grpo", "lr_calibration"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise nx.ParameterError(f"{name} must be positive")
        if self.kl_coef < 0:
            raise nx.ParameterError("kl_coef must be non-negative")

    def sampler(self, seed: int | None = None) -> SamplerConfig:
        return SamplerConfig(self.rollout_temperature, self.max_trace_tokens, self.seed if seed is None else seed)

    def stage_lr(self, stage: str) -> float:
        value = getattr(self, f"lr_{stage}")
        return self.lr if value is None else value

    def to_dict(self) -> dict:
        return asdict(self)


def _check_finite(loss: nx.Tensor, where: str) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value!r} at {where}")
    return value


def _batches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, size):
        yield perm[start : start + size]


# ---------------------------------------------------------------------------
# stage 1


def teacher_generation(trace: TeacherTrace, vocab) -> list[int]:
    return [*trace.trace, vocab.end_think, vocab.answer, vocab.answer_start + trace.provisional, vocab.end_answer]


def train_cold_start(
    model: PolicyModel,
    instances: Sequence[Instance],
    traces: Sequence[TeacherTrace],
    hp: Hyperparams,
    vocab,
) -> list[float]:
    """Teacher forcing on (x, R*, y_r*); returns the mean per-epoch loss.

    The loss is the batch mean of trajectory NLL.
    """
    if not instances:
        raise ValueError("cold-start data is empty")
    if len(instances) != len(traces):
        raise ValueError("instances and traces differ in length")
    xs = [inst.x for inst in instances]
    gens = [teacher_generation(t, vocab) for t in traces]
    opt = nx.Adam(model.parameters(), lr=hp.stage_lr("cold_start"))
    curve = []
    for epoch in range(hp.cold_start_epochs):
        rng = trajectory_rng(hp.seed, _COLD_STREAM, epoch)
        total = 0.0
        for step, idx in enumerate(_batches(len(xs), hp.batch_size, rng)):
            opt.zero_grad()
            with nx.Tape() as tape:
                loss = batch_nll(model, [xs[i] for i in idx], [gens[i] for i in idx], vocab, np.full(len(idx), 1.0 / len(idx)))
            total += _check_finite(loss, f"cold-start epoch {epoch} step {step}") * len(idx)
            nx.backward(loss, tape)
            opt.step()
        curve.append(total / len(xs))
    return curve


# ---------------------------------------------------------------------------
# stage 2


def group_weights(rewards: Sequence[float], tau: float) -> np.ndarray:
    """exp(R_k / tau) / sum_j exp(R_j / tau)."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 1:
        raise nx.ParameterError("group_weights needs a non-empty 1-D reward vector")
    return nx.softmax_array(r, tau)


@dataclass
class RoundStats:
    round: int
    mean_reward: float
    reward_variance: float
    malformed_rate: float
    mean_correct: float
    mean_consistency: float
    loss: float
    kl: float = 0.0

    def to_row(self) -> dict:
        return asdict(self)


GRPO_CHUNK = 16  # instances per backward pass


def grpo_loss(
    model: PolicyModel,
    xs: Sequence[Sequence[int]],
    groups: Sequence[Sequence[Trajectory]],
    weights: Sequence[np.ndarray],
    vocab,
    batch_size: int,
) -> nx.Tensor:
    """sum_i sum_k w_ik * NLL(traj_ik | x_i) / batch_size, in one batched pass."""
    flat_x, flat_gen, flat_w = [], [], []
    for x, group, w in zip(xs, groups, weights):
        for traj, wk in zip(group, w):
            flat_x.append(x)
            flat_gen.append(traj.tokens)
            flat_w.append(wk / batch_size)
    return batch_nll(model, flat_x, flat_gen, vocab, flat_w)


def kl_penalty(model, reference, xs, gens, vocab, weights) -> nx.Tensor:
    """Exact per-token KL(policy || reference), weighted and summed over generated positions."""
    prompts = [prompt_tokens(x, vocab) for x in xs]
    inputs, _, mask = pack_sequences(prompts, gens, vocab.eos)
    ref_lp = nx.Tensor(nx.log_softmax_array(reference.logits(inputs).data))
    lp = nx.log_softmax(model.logits(inputs))
    p = nx.exp(lp)
    per_tok = nx.tensor_sum(nx.mul(p, nx.sub(lp, ref_lp)), axis=-1)
    w = mask * np.asarray(weights, dtype=np.float64)[:, None]
    return nx.tensor_sum(nx.mul(per_tok, nx.Tensor(w)))


def sample_groups(model, batch: Sequence[Instance], hp: Hyperparams, vocab, stream: tuple[int, ...]) -> list[list[Trajectory]]:
    """K rollouts per instance, each from its own (seed, stream, instance, k) generator."""
    xs, rngs, parents = [], [], []
    for inst in batch:
        for k in range(hp.K):
            xs.append(inst.x)
            rngs.append(trajectory_rng(hp.seed, *stream, inst.id, k))
            parents.append(inst.id)
    flat = rollout(model, xs, vocab, hp.sampler(), rngs, parent_ids=parents)
    return [flat[i * hp.K : (i + 1) * hp.K] for i in range(len(batch))]


@dataclass
class GroupBatch:
    """One sampling round: K scored trajectories per instance and their weights."""

    instances: list[Instance]
    groups: list[list[Trajectory]]
    rewards: list[np.ndarray]
    weights: list[np.ndarray]
    correct: list[int]
    consistency: list[float]

    @property
    def num_trajectories(self) -> int:
        return sum(len(g) for g in self.groups)

    @property
    def malformed(self) -> int:
        return sum(t.malformed for g in self.groups for t in g)


def sample_and_score(
    model: PolicyModel,
    batch: Sequence[Instance],
    hp: Hyperparams,
    reward_cfg: RewardConfig,
    world: WorldConfig,
    round_index: int = 0,
) -> GroupBatch:
    groups = sample_groups(model, batch, hp, world.vocab, (_GRPO_STREAM, round_index))
    rewards, weights, correct, consistent = [], [], [], []
    for inst, group in zip(batch, groups):
        scored = [score(t, inst, world, reward_cfg) for t in group]
        r = np.array([s.total for s in scored])
        rewards.append(r)
        weights.append(group_weights(r, hp.tau))
        correct += [s.correct for s in scored]
        consistent += [s.consistency for s in scored]
    return GroupBatch(list(batch), groups, rewards, weights, correct, consistent)


def grpo_round(
    model: PolicyModel,
    batch: Sequence[Instance],
    hp: Hyperparams,
    reward_cfg: RewardConfig,
    world: WorldConfig,
    optimizer: nx.Adam,
    round_index: int = 0,
    reference: PolicyModel | None = None,
) -> RoundStats:
    """Sample K rollouts per instance from the current policy, weight them, take exactly one step."""
    gb = sample_and_score(model, batch, hp, reward_cfg, world, round_index)
    n_traj = gb.num_trajectories
    if gb.malformed == n_traj:
        log.warning("round %d: every trajectory is malformed; weights are uniform", round_index)
    optimizer.zero_grad()
    xs = [inst.x for inst in batch]
    if hp.kl_coef > 0 and reference is None:
        raise ValueError("kl_coef > 0 needs a reference policy")
    value = kl_value = 0.0
    # gradients accumulate over instance chunks so activation memory stays bounded
    for start in range(0, len(batch), GRPO_CHUNK):
        part = slice(start, start + GRPO_CHUNK)
        with nx.Tape() as tape:
            loss = grpo_loss(model, xs[part], gb.groups[part], gb.weights[part], world.vocab, hp.batch_size)
            if hp.kl_coef > 0:
                flat_x = [x for x, g in zip(xs[part], gb.groups[part]) for _ in g]
                flat_gen = [t.tokens for g in gb.groups[part] for t in g]
                kl = kl_penalty(model, reference, flat_x, flat_gen, world.vocab, np.full(len(flat_gen), 1.0 / n_traj))
                kl_value += kl.item()
                loss = loss + kl * hp.kl_coef
        value += _check_finite(loss, f"grpo round {round_index}")
        nx.backward(loss, tape)
    optimizer.step()
    all_r = np.concatenate(gb.rewards)
    return RoundStats(
        round=round_index,
        mean_reward=float(all_r.mean()),
        reward_variance=float(all_r.var()),
        malformed_rate=gb.malformed / n_traj,
        mean_correct=float(np.mean(gb.correct)),
        mean_consistency=float(np.mean(gb.consistency)),
        loss=value,
        kl=kl_value,
    )


def train_grpo(
    model: PolicyModel,
    instances: Sequence[Instance],
    hp: Hyperparams,
    reward_cfg: RewardConfig,
    world: WorldConfig,
    reference: PolicyModel | None = None,
    callback=None,
) -> list[RoundStats]:
    """hp.grpo_rounds rounds over a seeded shuffle of the GRPO split."""
    if not instances:
        raise ValueError("GRPO data is empty")
    opt = nx.Adam(model.parameters(), lr=hp.stage_lr("grpo"))
    order: list[int] = []
    epoch = 0
    stats = []
    for r in range(hp.grpo_rounds):
        while len(order) < hp.batch_size:
            order += trajectory_rng(hp.seed, _GRPO_STREAM, 10**6 + epoch).permutation(len(instances)).tolist()
            epoch += 1
        idx, order = order[: hp.batch_size], order[hp.batch_size :]
        s = grpo_round(model, [instances[i] for i in idx], hp, reward_cfg, world, opt, r, reference)
        stats.append(s)
        if callback is not None:
            callback(s)
    return stats


# ---------------------------------------------------------------------------
# stage 3


@dataclass
class CalibrationRecord:
    instance_id: int
    x: list[int]
    trace: list[int]
    provisional: int
    y: int
    source: str = "rollout"
    tokens: list[int] = field(default_factory=list, repr=False)  # full generated sequence

    def to_record(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "tokens": self.x,
            "trace_tokens": self.trace,
            "provisional": self.provisional,
            "gold": self.y,
            "source": self.source,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "CalibrationRecord":
        return cls(rec["instance_id"], list(rec["tokens"]), list(rec["trace_tokens"]), rec["provisional"], rec["gold"], rec["source"])


def stratify(records: list[CalibrationRecord], num_classes: int, rng: np.random.Generator, ratio: int = 3) -> list[CalibrationRecord]:
    """Cap the majority of (correct, incorrect) provisional records at ratio x minority, per gold class."""
    keep = np.ones(len(records), dtype=bool)
    for c in range(num_classes):
        right = [i for i, r in enumerate(records) if r.y == c and r.provisional == c]
        wrong = [i for i, r in enumerate(records) if r.y == c and r.provisional != c]
        if not right or not wrong:
            continue
        big, small = (right, wrong) if len(right) > len(wrong) else (wrong, right)
        cap = ratio * len(small)
        if len(big) > cap:
            drop = rng.choice(len(big), size=len(big) - cap, replace=False)
            keep[np.asarray(big)[drop]] = False
    return [r for r, k in zip(records, keep) if k]


def build_calibration_dataset(
    policy: PolicyModel,
    instances: Sequence[Instance],
    hp: Hyperparams,
    world: WorldConfig,
    ratio: int = 3,
) -> list[CalibrationRecord]:
    """calibration_rollouts samples per instance, deduplicated, then stratified."""
    vocab = world.vocab
    records: list[CalibrationRecord] = []
    chunk = max(1, 512 // hp.calibration_rollouts)
    for start in range(0, len(instances), chunk):
        part = instances[start : start + chunk]
        xs, rngs, parents = [], [], []
        for inst in part:
            for k in range(hp.calibration_rollouts):
                xs.append(inst.x)
                rngs.append(trajectory_rng(hp.seed, _CAL_ROLLOUT_STREAM, inst.id, k))
                parents.append(inst.id)
        trajs = rollout(policy, xs, vocab, hp.sampler(), rngs, parent_ids=parents)
        for j, inst in enumerate(part):
            seen = set()
            for t in trajs[j * hp.calibration_rollouts : (j + 1) * hp.calibration_rollouts]:
                key = tuple(t.tokens)
                if key in seen:
                    continue
                seen.add(key)
                records.append(CalibrationRecord(inst.id, list(inst.x), t.trace, t.provisional, inst.y, "rollout", t.tokens))
    return stratify(records, world.num_classes, trajectory_rng(hp.seed, _CAL_ROLLOUT_STREAM, 2**31), ratio)


def teacher_calibration_records(instances: Sequence[Instance], traces: Sequence[TeacherTrace]) -> list[CalibrationRecord]:
    """Records whose traces come from the scripted teacher (the external-source ablation)."""
    return [
        CalibrationRecord(inst.id, list(inst.x), list(t.trace), t.provisional, inst.y, "teacher")
        for inst, t in zip(instances, traces)
    ]


def train_calibration(
    calibrator: CalibratorModel,
    records: Sequence[CalibrationRecord],
    hp: Hyperparams,
    vocab,
) -> list[float]:
    """Cross-entropy of class logits against gold labels; returns per-epoch mean loss."""
    if not records:
        raise ValueError("calibration data is empty")
    seqs = [encode_calibration_input(r.x, r.trace, r.provisional, vocab, calibrator.config.context_length).tokens for r in records]
    ys = np.array([r.y for r in records])
    opt = nx.Adam(calibrator.parameters(), lr=hp.stage_lr("calibration"))
    curve = []
    for epoch in range(hp.calibration_epochs):
        rng = trajectory_rng(hp.seed, _CAL_TRAIN_STREAM, epoch)
        total = 0.0
        for step, idx in enumerate(_batches(len(seqs), hp.batch_size, rng)):
            opt.zero_grad()
            with nx.Tape() as tape:
                logits = calibrator.class_logits([seqs[i] for i in idx])
                loss = nx.token_nll(logits, ys[idx], np.full(len(idx), 1.0 / len(idx)))
            total += _check_finite(loss, f"calibration epoch {epoch} step {step}") * len(idx)
            nx.backward(loss, tape)
            opt.step()
        curve.append(total / len(seqs))
    return curve
