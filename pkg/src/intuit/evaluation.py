"""Metrics, the bag-of-tokens probe, and ablation tables."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .numerics import ContractError
from .reasoner import MALFORMED
from .worldgen import Instance, WorldConfig, generate_splits


@dataclass
class MetricsReport:
    confusion: np.ndarray  # rows gold, columns predicted
    accuracy: float
    per_class_f1: list[float]
    macro_f1: float
    ece: float
    n: int
    # predictions that were MALFORMED, per gold class; they count as misses
    unassigned: list[int] = field(default_factory=list)
    # classes absent from both predictions and gold (their F1 is 0 by convention)
    absent_classes: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = self.confusion.tolist()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def confusion_matrix(predictions: Sequence[int], gold: Sequence[int], num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """C x C counts (rows gold) plus per-gold counts of MALFORMED predictions."""
    if len(predictions) != len(gold):
        raise ContractError(f"length mismatch: {len(predictions)} predictions vs {len(gold)} gold labels")
    p = np.asarray(predictions, dtype=np.int64).reshape(-1)
    g = np.asarray(gold, dtype=np.int64).reshape(-1)
    if g.size and (g.min() < 0 or g.max() >= num_classes):
        raise ContractError(f"gold labels must lie in [0, {num_classes})")
    bad = (p != MALFORMED) & ((p < 0) | (p >= num_classes))
    if bad.any():
        raise ContractError(f"prediction {int(p[bad][0])} outside [0, {num_classes})")
    ok = p != MALFORMED
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (g[ok], p[ok]), 1)
    unassigned = np.bincount(g[~ok], minlength=num_classes)
    return conf, unassigned


def expected_calibration_error(confidences: Sequence[float], correct: Sequence[bool], bins: int = 10) -> float:
    """sum_b (n_b / n) |acc_b - conf_b| over equal-width bins; a confidence of 1 lands in the top bin."""
    c = np.asarray(confidences, dtype=np.float64)
    ok = np.asarray(correct, dtype=np.float64)
    if c.shape != ok.shape:
        raise ContractError("confidences and correctness differ in length")
    if c.size == 0:
        return 0.0
    if bins < 1:
        raise ValueError("bins must be positive")
    idx = np.minimum((c * bins).astype(np.int64), bins - 1)
    total = 0.0
    for b in range(bins):
        m = idx == b
        if m.any():
            total += m.sum() / c.size * abs(ok[m].mean() - c[m].mean())
    return float(total)


def confusion_and_scores(
    predictions: Sequence[int],
    gold: Sequence[int],
    num_classes: int,
    confidences: Sequence[float] | None = None,
    bins: int = 10,
) -> MetricsReport:
    conf, unassigned = confusion_matrix(predictions, gold, num_classes)
    n = len(gold)
    tp = np.diag(conf).astype(np.float64)
    pred_pos = conf.sum(axis=0).astype(np.float64)
    gold_pos = conf.sum(axis=1).astype(np.float64) + unassigned
    f1 = []
    absent = []
    for c in range(num_classes):
        precision = tp[c] / pred_pos[c] if pred_pos[c] else 0.0
        recall = tp[c] / gold_pos[c] if gold_pos[c] else 0.0
        f1.append(2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0)
        if pred_pos[c] == 0 and gold_pos[c] == 0:
            absent.append(c)
    accuracy = float(tp.sum() / n) if n else 0.0
    ece = 0.0
    if confidences is not None:
        correct = np.asarray(predictions) == np.asarray(gold)
        ece = expected_calibration_error(confidences, correct, bins)
    return MetricsReport(
        confusion=conf,
        accuracy=accuracy,
        per_class_f1=[float(v) for v in f1],
        macro_f1=float(np.mean(f1)) if f1 else 0.0,
        ece=ece,
        n=n,
        unassigned=[int(v) for v in unassigned],
        absent_classes=absent,
    )


def correction_rates(provisional: Sequence[int], final: Sequence[int], gold: Sequence[int]) -> dict[str, float]:
    """How often calibration fixes a wrong provisional answer, and how often it breaks a right one."""
    p, f, g = (np.asarray(a) for a in (provisional, final, gold))
    wrong, right = p != g, p == g
    return {
        "changed": float(np.mean(p != f)) if p.size else 0.0,
        "correction_rate": float(np.mean(f[wrong] == g[wrong])) if wrong.any() else 0.0,
        "corruption_rate": float(np.mean(f[right] != g[right])) if right.any() else 0.0,
    }


# ---------------------------------------------------------------------------
# open-instance probe


def bag_of_tokens(instances: Sequence[Instance], vocab_size: int) -> np.ndarray:
    X = np.zeros((len(instances), vocab_size))
    for i, inst in enumerate(instances):
        np.add.at(X[i], inst.x, 1.0)
    return X


@dataclass
class ProbeResult:
    train_template_f1: float
    eval_template_f1: float

    @property
    def gap(self) -> float:
        return self.train_template_f1 - self.eval_template_f1


def bag_of_tokens_probe(config: WorldConfig, sizes: dict[str, int] | None = None, holdout: int = 1000) -> ProbeResult:
    """Logistic regression on token counts, fit on train-template instances.

    Scores (in macro-F1 points) on held-out train-template instances and
    on the eval split.
    """
    from sklearn.linear_model import LogisticRegression

    splits = generate_splits(config, sizes)
    train = splits["cold_start"] + splits["grpo"] + splits["calibration"]
    order = np.random.default_rng(config.seed).permutation(len(train))
    held = [train[i] for i in order[:holdout]]
    fit = [train[i] for i in order[holdout:]]
    V = config.vocab.size
    clf = LogisticRegression(max_iter=2000).fit(bag_of_tokens(fit, V), [i.y for i in fit])

    def score(insts):
        pred = clf.predict(bag_of_tokens(insts, V))
        return 100 * confusion_and_scores(pred, [i.y for i in insts], config.num_classes).macro_f1

    return ProbeResult(score(held), score(splits["eval"]))


# ---------------------------------------------------------------------------
# ablation tables


@dataclass
class AblationRow:
    stage: str
    trace_source: str
    trace_budget: int
    backbone_tag: str
    imitation_f1: float
    calibration_f1: float
    config_hash: str
    seed: int
    extra: dict = field(default_factory=dict)

    @property
    def key(self) -> tuple:
        return (self.stage, self.trace_source, self.trace_budget, self.backbone_tag)


@dataclass
class AblationTable:
    rows: list[AblationRow] = field(default_factory=list)

    def add(self, row: AblationRow) -> None:
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def to_csv(self) -> str:
        extra_keys = sorted({k for r in self.rows for k in r.extra})
        cols = ["stage", "trace_source", "trace_budget", "backbone_tag", "imitation_f1", "calibration_f1", "config_hash", "seed"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols + extra_keys)
        for r in self.rows:
            base = [r.stage, r.trace_source, r.trace_budget, r.backbone_tag, f"{r.imitation_f1:.6f}", f"{r.calibration_f1:.6f}", r.config_hash, r.seed]
            w.writerow(base + [_cell(r.extra.get(k, "")) for k in extra_keys])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "AblationTable":
        table = cls()
        core = {"stage", "trace_source", "trace_budget", "backbone_tag", "imitation_f1", "calibration_f1", "config_hash", "seed"}
        for rec in csv.DictReader(io.StringIO(text)):
            table.add(
                AblationRow(
                    rec["stage"],
                    rec["trace_source"],
                    int(rec["trace_budget"]),
                    rec["backbone_tag"],
                    float(rec["imitation_f1"]),
                    float(rec["calibration_f1"]),
                    rec["config_hash"],
                    int(rec["seed"]),
                    {k: v for k, v in rec.items() if k not in core},
                )
            )
        return table


def _cell(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


# ---------------------------------------------------------------------------
# ablation harnesses (each returns an AblationTable; a finished pipeline run
# can be passed in so several tables share one training run)


def _budget(cfg) -> int:
    return cfg.sampler.max_trace_tokens - 4


def _row(cfg, stage, source, backbone, imitation, calibration, **extra) -> AblationRow:
    return AblationRow(stage, source, _budget(cfg), backbone, imitation, calibration, cfg.hash(), cfg.seed, extra)


def run_imitation_vs_calibration(cfg, result=None) -> AblationTable:
    """Provisional vs. calibrated macro-F1 for the stage-1 and stage-2 policies.

    The stage-1 calibrator is trained on stage-1 rollouts and initialised
    from the stage-1 policy, mirroring the stage-2 path.
    """
    from .pipeline import evaluate_calibrator, run_pipeline, train_stage3
    from .stages import build_calibration_dataset

    r = result or run_pipeline(cfg)
    recs = build_calibration_dataset(r.stage1, r.splits["calibration"], cfg.hp, cfg.world_seeded)
    cal1, _ = train_stage3(cfg, recs, r.stage1)
    _, rep = evaluate_calibrator(cfg, cal1, r.splits["eval"], r.eval_traces["stage1"])
    table = AblationTable()
    table.add(_row(cfg, "stage1", "rollout", "stage1", r.f1("stage1_provisional"), 100 * rep.macro_f1))
    table.add(_row(cfg, "stage2", "rollout", "stage2", r.f1("stage2_provisional"), r.f1("calibrated")))
    return table


def run_source_ablation(cfg, result=None) -> AblationTable:
    """Calibrator trained on self-generated stage-2 traces vs. on teacher traces.

    Both start from the stage-2 policy and are scored on stage-2 greedy
    traces of the eval split.
    """
    from .pipeline import evaluate_calibrator, run_pipeline, train_stage3
    from .stages import teacher_calibration_records
    from .worldgen import teacher_dataset

    r = result or run_pipeline(cfg)
    world = cfg.world_seeded
    teacher = teacher_dataset(r.splits["calibration"], world, budget=cfg.sampler.max_trace_tokens)
    cal_t, _ = train_stage3(cfg, teacher_calibration_records(r.splits["calibration"], teacher), r.stage2)
    _, rep = evaluate_calibrator(cfg, cal_t, r.splits["eval"], r.eval_traces["stage2"])
    table = AblationTable()
    imitation = r.f1("stage2_provisional")
    table.add(_row(cfg, "stage3", "rollout", "stage2", imitation, r.f1("calibrated"), records=len(r.records)))
    table.add(_row(cfg, "stage3", "teacher", "stage2", imitation, 100 * rep.macro_f1, records=len(teacher)))
    return table


def run_length_sweep(cfg, budgets=(0, 16, 48, 128), results: dict | None = None) -> AblationTable:
    """Full pipeline per reasoning-token budget; ``results`` may hold finished runs keyed by budget."""
    from .pipeline import run_pipeline

    table = AblationTable()
    for b in budgets:
        cb = cfg.with_budget(b)
        r = (results or {}).get(b) or run_pipeline(cb)
        table.add(_row(cb, "stage3", "rollout", "stage2", r.f1("stage2_provisional"), r.f1("calibrated")))
    return table


def run_tau_sweep(cfg, taus=(0.25, 0.5, 1.0, 2.0)) -> AblationTable:
    """GRPO weight temperature sweep; stage 1 is trained once and shared."""
    import dataclasses

    from .pipeline import run_pipeline, train_stage1

    splits = generate_splits(cfg.world_seeded, cfg.sizes)
    p1, curve, _ = train_stage1(cfg, splits)
    table = AblationTable()
    for tau in taus:
        ct = dataclasses.replace(cfg, hyper=dataclasses.replace(cfg.hyper, tau=tau))
        r = run_pipeline(ct, stage1=(p1, curve))
        table.add(_row(ct, "stage3", "rollout", "stage2", r.f1("stage2_provisional"), r.f1("calibrated"), tau=tau))
    return table
