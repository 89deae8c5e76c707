"""End-to-end three-stage run held in memory."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .calibrator import CalibratorModel, calibrate_batch
from .config import RunConfig
from .evaluation import MetricsReport, confusion_and_scores, correction_rates
from .reasoner import PolicyModel, SamplerConfig, Trajectory, greedy_batch
from .stages import (
    CalibrationRecord,
    RoundStats,
    build_calibration_dataset,
    train_calibration,
    train_cold_start,
    train_grpo,
)
from .worldgen import Instance, TeacherTrace, generate_splits, teacher_dataset

log = logging.getLogger(__name__)


def clone_policy(policy: PolicyModel) -> PolicyModel:
    out = PolicyModel(policy.config)
    out.load_state_dict(policy.state_dict())
    return out


def answer_confidence(traj: Trajectory) -> float:
    """Probability the policy gave its own answer token (0 when malformed)."""
    if traj.malformed or len(traj.step_log_probs) < 2:
        return 0.0
    return float(np.exp(traj.step_log_probs[-2]))


def eval_sampler(cfg: RunConfig) -> SamplerConfig:
    return SamplerConfig(cfg.sampler.temperature, cfg.sampler.max_trace_tokens, cfg.seed)


def evaluate_policy(cfg: RunConfig, policy: PolicyModel, instances: list[Instance]) -> tuple[list[Trajectory], MetricsReport]:
    vocab = cfg.world.vocab
    trajs = greedy_batch(policy, [i.x for i in instances], vocab, eval_sampler(cfg))
    report = confusion_and_scores(
        [t.provisional for t in trajs],
        [i.y for i in instances],
        cfg.world.num_classes,
        confidences=[answer_confidence(t) for t in trajs],
    )
    return trajs, report


def evaluate_calibrator(
    cfg: RunConfig, calibrator: CalibratorModel, instances: list[Instance], trajs: list[Trajectory]
) -> tuple[np.ndarray, MetricsReport]:
    dists = calibrate_batch(calibrator, [(i.x, t.trace, t.provisional) for i, t in zip(instances, trajs)], cfg.world.vocab)
    pred = dists.argmax(axis=1)
    report = confusion_and_scores(pred, [i.y for i in instances], cfg.world.num_classes, confidences=dists.max(axis=1))
    return dists, report


def train_stage1(cfg: RunConfig, splits) -> tuple[PolicyModel, list[float], list[TeacherTrace]]:
    world = cfg.world_seeded
    traces = teacher_dataset(splits["cold_start"], world, budget=cfg.sampler.max_trace_tokens)
    policy = PolicyModel(cfg.model_config, seed=cfg.seed)
    curve = train_cold_start(policy, splits["cold_start"], traces, cfg.hp, world.vocab)
    policy.snap_to_float32()
    return policy, curve, traces


def train_stage2(cfg: RunConfig, splits, stage1: PolicyModel) -> tuple[PolicyModel, list[RoundStats]]:
    policy = clone_policy(stage1)
    reference = stage1 if cfg.hp.kl_coef > 0 else None
    stats = train_grpo(policy, splits["grpo"], cfg.hp, cfg.rewards, cfg.world_seeded, reference=reference)
    policy.snap_to_float32()
    return policy, stats


def new_calibrator(cfg: RunConfig, init: PolicyModel | None) -> CalibratorModel:
    C = cfg.world.num_classes
    if cfg.calibrator_init == "scratch" or init is None:
        return CalibratorModel(cfg.model_config, C, seed=cfg.seed)
    return CalibratorModel.from_policy(init, C, seed=cfg.seed)


def train_stage3(cfg: RunConfig, records: list[CalibrationRecord], init: PolicyModel | None) -> tuple[CalibratorModel, list[float]]:
    calibrator = new_calibrator(cfg, init)
    curve = train_calibration(calibrator, records, cfg.hp, cfg.world.vocab)
    calibrator.snap_to_float32()
    return calibrator, curve


@dataclass
class PipelineResult:
    config: RunConfig
    splits: dict
    stage1: PolicyModel
    stage2: PolicyModel
    calibrator: CalibratorModel
    cold_curve: list[float]
    grpo_stats: list[RoundStats]
    cal_curve: list[float]
    records: list[CalibrationRecord]
    eval_traces: dict[str, list[Trajectory]]
    reports: dict[str, MetricsReport]
    timings: dict[str, float] = field(default_factory=dict)
    calibrated_predictions: list[int] = field(default_factory=list)

    def f1(self, name: str) -> float:
        """Macro-F1 in points."""
        return 100.0 * self.reports[name].macro_f1

    def summary(self) -> dict:
        out = {
            "config_hash": self.config.hash(),
            "seed": self.config.seed,
            "trace_budget": self.config.sampler.max_trace_tokens - 4,
            "macro_f1": {k: self.f1(k) for k in self.reports},
            "accuracy": {k: 100.0 * r.accuracy for k, r in self.reports.items()},
            "calibration_records": len(self.records),
            "timings_s": {k: round(v, 2) for k, v in self.timings.items()},
        }
        out.update(
            correction_rates(
                [t.provisional for t in self.eval_traces["stage2"]],
                self.calibrated_predictions,
                [i.y for i in self.splits["eval"]],
            )
        )
        return out


def run_pipeline(cfg: RunConfig, stage1: tuple | None = None) -> PipelineResult:
    """Stage 1 -> stage 2 -> calibration records -> stage 3, then eval.

    ``stage1`` may pass a precomputed (policy, curve) pair so sweeps that do
    not touch stage 1 can share it.
    """
    timings = {}
    t = time.perf_counter()
    splits = generate_splits(cfg.world_seeded, cfg.sizes)
    eval_set = splits["eval"]

    if stage1 is None:
        p1, cold_curve, _ = train_stage1(cfg, splits)
    else:
        p1, cold_curve = stage1
    timings["stage1"] = time.perf_counter() - t
    log.info("seed %d stage1 done in %.1fs", cfg.seed, timings["stage1"])

    t = time.perf_counter()
    p2, stats = train_stage2(cfg, splits, p1)
    timings["stage2"] = time.perf_counter() - t
    log.info("seed %d stage2 done in %.1fs", cfg.seed, timings["stage2"])

    t = time.perf_counter()
    records = build_calibration_dataset(p2, splits["calibration"], cfg.hp, cfg.world_seeded)
    timings["calibration_data"] = time.perf_counter() - t

    t = time.perf_counter()
    calibrator, cal_curve = train_stage3(cfg, records, p2)
    timings["stage3"] = time.perf_counter() - t
    log.info("seed %d stage3 done in %.1fs", cfg.seed, timings["stage3"])

    t = time.perf_counter()
    tr1, rep1 = evaluate_policy(cfg, p1, eval_set)
    tr2, rep2 = evaluate_policy(cfg, p2, eval_set)
    dists, rep3 = evaluate_calibrator(cfg, calibrator, eval_set, tr2)
    timings["eval"] = time.perf_counter() - t

    return PipelineResult(
        config=cfg,
        splits=splits,
        stage1=p1,
        stage2=p2,
        calibrator=calibrator,
        cold_curve=cold_curve,
        grpo_stats=stats,
        cal_curve=cal_curve,
        records=records,
        eval_traces={"stage1": tr1, "stage2": tr2},
        reports={"stage1_provisional": rep1, "stage2_provisional": rep2, "calibrated": rep3},
        timings=timings,
        calibrated_predictions=[int(v) for v in dists.argmax(axis=1)],
    )
