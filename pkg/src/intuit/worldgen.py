"""Synthetic open-instance classification world.

An instance is a fixed-length token sequence. Each class owns a few evidence
tokens; an evidence token immediately followed by the negation token does not
count. The label is the class with the most surviving evidence. Training and
evaluation instances are drawn from disjoint template families that differ
in where evidence sits, how dense it is and how often it is negated, so
surface statistics shift while the rule stays the same.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPLITS = ("cold_start", "grpo", "calibration", "eval")
DEFAULT_SIZES = {"cold_start": 1000, "grpo": 3000, "calibration": 4000, "eval": 1000}

STRUCTURAL = ("<think>", "</think>", "<answer>", "</answer>", "<eos>", "<sep>", "<malformed>", "<skip>")

# stream tags for per-instance rng derivation
_SPLIT_STREAM = {name: i for i, name in enumerate(SPLITS)}
_TEACHER_STREAM = 101


class VocabularyError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    num_classes: int = 4
    evidence_tokens_per_class: int = 3
    num_filler_tokens: int = 20
    sequence_length: int = 24
    train_template_family: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    eval_template_family: tuple[int, ...] = (6, 7, 8, 9, 10, 11)
    teacher_noise_rate: float = 0.1
    seed: int = 1
    # relative class frequencies for the eval split; None means balanced
    eval_class_weights: tuple[float, ...] | None = None

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.evidence_tokens_per_class < 2:
            raise ConfigError("evidence_tokens_per_class must be >= 2")
        if self.num_filler_tokens < 1:
            raise ConfigError("num_filler_tokens must be >= 1")
        if self.sequence_length < 8:
            raise ConfigError("sequence_length must be >= 8")
        if not 0.0 <= self.teacher_noise_rate < 1.0:
            raise ConfigError("teacher_noise_rate must lie in [0, 1)")
        train, ev = set(self.train_template_family), set(self.eval_template_family)
        if not train or not ev:
            raise ConfigError("template families must be non-empty")
        if train & ev:
            raise ConfigError(f"train and eval template families overlap: {sorted(train & ev)}")
        for t in train | ev:
            if t not in TEMPLATES:
                raise ConfigError(f"unknown template id {t}")
        if self.eval_class_weights is not None:
            if len(self.eval_class_weights) != self.num_classes or min(self.eval_class_weights) <= 0:
                raise ConfigError("eval_class_weights needs one positive weight per class")

    @property
    def vocab(self) -> "Vocab":
        return Vocab(self.num_classes, self.evidence_tokens_per_class, self.num_filler_tokens, self.sequence_length)

    @property
    def negation_token(self) -> int:
        return self.vocab.neg


class Vocab:
    """Contiguous token ids: evidence | filler | negation | structural.

    The structural block holds the trace grammar: tags, separator, the
    MALFORMED marker, per-class count markers, count digits and answer
    tokens.
    """

    def __init__(self, num_classes: int, evidence_per_class: int, num_fillers: int, max_count: int):
        self.num_classes = num_classes
        self.evidence_per_class = evidence_per_class
        self.num_evidence = num_classes * evidence_per_class
        self.filler_start = self.num_evidence
        self.num_fillers = num_fillers
        self.neg = self.filler_start + num_fillers
        base = self.neg + 1
        for i, name in enumerate(STRUCTURAL):
            setattr(self, _attr(name), base + i)
        base += len(STRUCTURAL)
        self.class_marker_start = base
        base += num_classes
        self.digit_start = base
        self.max_count = max_count
        base += max_count + 1
        self.answer_start = base
        base += num_classes
        self.size = base
        self.structural_start = self.neg + 1

    # token constructors
    def evidence(self, cls: int, k: int = 0) -> int:
        return cls * self.evidence_per_class + k

    def filler(self, k: int) -> int:
        return self.filler_start + k

    def class_marker(self, cls: int) -> int:
        return self.class_marker_start + cls

    def digit(self, n: int) -> int:
        if not 0 <= n <= self.max_count:
            raise VocabularyError(f"count {n} has no digit token (max {self.max_count})")
        return self.digit_start + n

    def answer(self, cls: int) -> int:
        return self.answer_start + cls

    # predicates
    def is_evidence(self, t: int) -> bool:
        return 0 <= t < self.num_evidence

    def evidence_class(self, t: int) -> int:
        return t // self.evidence_per_class

    def is_filler(self, t: int) -> bool:
        return self.filler_start <= t < self.neg

    def is_world(self, t: int) -> bool:
        return 0 <= t <= self.neg

    def is_answer(self, t: int) -> bool:
        return self.answer_start <= t < self.answer_start + self.num_classes

    def is_class_marker(self, t: int) -> bool:
        return self.class_marker_start <= t < self.class_marker_start + self.num_classes

    def is_digit(self, t: int) -> bool:
        return self.digit_start <= t <= self.digit_start + self.max_count

    def category(self, t: int) -> str:
        if self.is_evidence(t):
            return "evidence"
        if self.is_filler(t):
            return "filler"
        if t == self.neg:
            return "negation"
        if self.structural_start <= t < self.size:
            return "structural"
        raise VocabularyError(f"token {t} outside vocabulary of size {self.size}")

    def name(self, t: int) -> str:
        if self.is_evidence(t):
            return f"e{self.evidence_class(t)}.{t % self.evidence_per_class}"
        if self.is_filler(t):
            return f"f{t - self.filler_start}"
        if t == self.neg:
            return "NEG"
        for name in STRUCTURAL:
            if t == getattr(self, _attr(name)):
                return name
        if self.is_class_marker(t):
            return f"k{t - self.class_marker_start}"
        if self.is_digit(t):
            return f"n{t - self.digit_start}"
        if self.is_answer(t):
            return f"a{t - self.answer_start}"
        raise VocabularyError(f"token {t} outside vocabulary")

    def render(self, tokens: Iterable[int]) -> str:
        return " ".join(self.name(int(t)) for t in tokens)


def _attr(name: str) -> str:
    return name.strip("<>").replace("/", "end_")


@dataclass(frozen=True)
class Template:
    """Surface-form recipe for one template id.

    ``region`` is the fraction of the sequence that can hold evidence;
    ``spread`` places evidence with random gaps instead of packed together.
    """

    template_id: int
    region: tuple[float, float]
    n_evidence: tuple[int, int]
    neg_rate: float
    stray_negations: tuple[int, int]
    spread: bool


TEMPLATES: dict[int, Template] = {
    t.template_id: t
    for t in [
        # training family: dense evidence, light negation
        Template(0, (0.0, 0.55), (4, 7), 0.15, (0, 1), False),
        Template(1, (0.25, 0.8), (4, 7), 0.15, (0, 1), False),
        Template(2, (0.45, 1.0), (4, 7), 0.15, (0, 1), False),
        Template(3, (0.0, 0.7), (4, 6), 0.2, (0, 1), True),
        Template(4, (0.3, 1.0), (4, 6), 0.2, (0, 1), True),
        Template(5, (0.0, 1.0), (3, 5), 0.3, (0, 1), True),
        # held-out family: sparse evidence, heavy negation, stray negations
        Template(6, (0.0, 1.0), (3, 5), 0.5, (1, 2), True),
        Template(7, (0.1, 1.0), (4, 6), 0.55, (1, 3), True),
        Template(8, (0.0, 0.9), (3, 6), 0.5, (2, 3), True),
        Template(9, (0.2, 1.0), (4, 6), 0.6, (1, 2), True),
        Template(10, (0.0, 1.0), (5, 7), 0.5, (0, 2), True),
        Template(11, (0.15, 0.95), (3, 5), 0.55, (1, 3), True),
    ]
}


@dataclass
class Instance:
    id: int
    x: list[int]
    y: int
    template_id: int
    split: str

    def to_record(self) -> dict:
        return {"id": self.id, "split": self.split, "tokens": self.x, "label": self.y, "template_id": self.template_id}


@dataclass
class TeacherTrace:
    instance_id: int
    trace: list[int]
    provisional: int
    is_corrupted: bool
    stated_counts: list[int] = field(default_factory=list)


def label_rule(x: Sequence[int], config: WorldConfig) -> tuple[int, list[int]]:
    """Return (label, effective per-class counts); ties go to the smallest class."""
    vocab = config.vocab
    counts = [0] * config.num_classes
    n = len(x)
    for i, t in enumerate(x):
        t = int(t)
        if not vocab.is_world(t):
            raise VocabularyError(f"token {t} at position {i} is not a world token")
        if vocab.is_evidence(t) and not (i + 1 < n and int(x[i + 1]) == vocab.neg):
            counts[vocab.evidence_class(t)] += 1
    return int(np.argmax(counts)), counts


def is_tie_free(counts: Sequence[int]) -> bool:
    top = max(counts)
    return sum(1 for c in counts if c == top) == 1


def instance_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, index]))


def _place(template: Template, config: WorldConfig, target: int, rng: np.random.Generator) -> list[int] | None:
    vocab = config.vocab
    L = config.sequence_length
    C = config.num_classes
    x = [vocab.filler(int(k)) for k in rng.integers(0, config.num_filler_tokens, L)]
    lo, hi = template.region
    start, stop = int(round(lo * L)), int(round(hi * L))
    n_ev = int(rng.integers(template.n_evidence[0], template.n_evidence[1] + 1))
    n_stray = int(rng.integers(template.stray_negations[0], template.stray_negations[1] + 1))
    units: list[list[int]] = []
    for _ in range(n_ev):
        tok = vocab.evidence(int(rng.integers(C)), int(rng.integers(config.evidence_tokens_per_class)))
        units.append([tok, vocab.neg] if rng.random() < template.neg_rate else [tok])
    for _ in range(n_stray):
        units.append([vocab.filler(int(rng.integers(config.num_filler_tokens))), vocab.neg])
    order = rng.permutation(len(units))
    units = [units[i] for i in order]
    width = stop - start
    used = sum(len(u) for u in units)
    if used > width:
        return None
    k = len(units)
    if template.spread:
        offsets = np.sort(rng.choice(width - used + k, size=k, replace=False))
    else:
        # packed block at a random offset inside the region
        base = int(rng.integers(0, width - used + 1))
        offsets = np.arange(k) + base
    pos = start
    consumed = 0
    for i, u in enumerate(units):
        pos = start + int(offsets[i]) + consumed - i
        x[pos : pos + len(u)] = u
        consumed += len(u)
    label, counts = label_rule(x, config)
    if not is_tie_free(counts) or label != target:
        return None
    return x


def generate_instance(
    config: WorldConfig, template_id: int, target: int, rng: np.random.Generator, max_tries: int = 10_000
) -> list[int]:
    template = TEMPLATES[template_id]
    for _ in range(max_tries):
        x = _place(template, config, target, rng)
        if x is not None:
            return x
    raise RuntimeError(f"template {template_id} could not produce a tie-free instance of class {target}")


def _split_targets(n: int, num_classes: int, weights, rng: np.random.Generator) -> list[int]:
    if weights is None:
        targets = [i % num_classes for i in range(n)]
    else:
        w = np.asarray(weights, dtype=float) / np.sum(weights)
        quota = np.floor(w * n).astype(int)
        rem = n - quota.sum()
        for c in np.argsort(-(w * n - quota), kind="stable")[:rem]:
            quota[c] += 1
        targets = [c for c in range(num_classes) for _ in range(quota[c])]
    return [targets[i] for i in rng.permutation(n)]


def generate_splits(config: WorldConfig, sizes: dict[str, int] | None = None) -> dict[str, list[Instance]]:
    """Build the four disjoint splits. Output depends only on (config, sizes)."""
    config.validate()
    sizes = dict(DEFAULT_SIZES if sizes is None else sizes)
    for name in SPLITS:
        if sizes.get(name, 0) <= 0:
            raise ConfigError(f"split size for {name!r} must be positive")
    out: dict[str, list[Instance]] = {}
    next_id = 0
    for name in SPLITS:
        n = sizes[name]
        family = config.eval_template_family if name == "eval" else config.train_template_family
        weights = config.eval_class_weights if name == "eval" else None
        split_rng = instance_rng(config.seed, 1000 + _SPLIT_STREAM[name], 0)
        targets = _split_targets(n, config.num_classes, weights, split_rng)
        rows = []
        for i in range(n):
            rng = instance_rng(config.seed, _SPLIT_STREAM[name], i)
            template_id = int(family[int(rng.integers(len(family)))])
            x = generate_instance(config, template_id, targets[i], rng)
            rows.append(Instance(next_id + i, x, targets[i], template_id, name))
        out[name] = rows
        next_id += n
    return out


# ---------------------------------------------------------------------------
# teacher


def scan_tokens(x: Sequence[int], vocab: Vocab) -> list[int]:
    """One token per input position: k_c for surviving class-c evidence,
    NEG for cancelled evidence, <skip> for everything else."""
    out = []
    n = len(x)
    for i, t in enumerate(x):
        if vocab.is_evidence(t):
            negated = i + 1 < n and x[i + 1] == vocab.neg
            out.append(vocab.neg if negated else vocab.class_marker(vocab.evidence_class(t)))
        else:
            out.append(vocab.skip)
    return out


def trace_body(x: Sequence[int], counts: Sequence[int], vocab: Vocab, mode: str = "full") -> list[int]:
    """Tokens inside <think>...</think> for a given set of stated counts.

    ``full`` scans the input position by position and then states counts;
    ``counts`` states counts only; ``none`` is empty.
    """
    if mode == "none":
        return []
    if mode == "full":
        body = scan_tokens(x, vocab)
    elif mode == "counts":
        body = []
    else:
        raise ValueError(f"unknown trace mode {mode!r}")
    for c, n in enumerate(counts):
        body += [vocab.class_marker(c), vocab.digit(n)]
    return body


def trace_mode_for_budget(x: Sequence[int], vocab: Vocab, budget: int | None) -> str:
    """Longest teacher trace form whose generated part fits in ``budget`` tokens.

    The generated part is the body plus ``</think> <answer> a </answer>``.
    """
    if budget is None:
        return "full"
    for mode in ("full", "counts", "none"):
        if len(trace_body(x, [0] * vocab.num_classes, vocab, mode)) + 4 <= budget:
            return mode
    raise ValueError(f"budget {budget} cannot hold even an answer-only trace")


def teacher_reason(
    instance: Instance,
    noise_rate: float,
    rng: np.random.Generator,
    config: WorldConfig,
    budget: int | None = None,
) -> TeacherTrace:
    """Scripted teacher: enumerate evidence, state counts, conclude.

    With probability ``noise_rate`` one wrong class's stated count is raised
    above the true maximum and the conclusion follows the corrupted counts.
    """
    vocab = config.vocab
    _, counts = label_rule(instance.x, config)
    stated = list(counts)
    corrupted = bool(rng.random() < noise_rate)
    if corrupted:
        others = [c for c in range(config.num_classes) if c != instance.y]
        c = others[int(rng.integers(len(others)))]
        stated[c] = min(max(counts) + 1, vocab.max_count)
    provisional = int(np.argmax(stated))
    mode = trace_mode_for_budget(instance.x, vocab, budget)
    return TeacherTrace(instance.id, trace_body(instance.x, stated, vocab, mode), provisional, corrupted, stated)


def teacher_dataset(
    instances: Sequence[Instance], config: WorldConfig, budget: int | None = None, noise_rate: float | None = None
) -> list[TeacherTrace]:
    rate = config.teacher_noise_rate if noise_rate is None else noise_rate
    return [
        teacher_reason(inst, rate, instance_rng(config.seed, _TEACHER_STREAM, inst.id), config, budget)
        for inst in instances
    ]


# ---------------------------------------------------------------------------
# JSON Lines


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def instance_records(instances: Sequence[Instance], traces: Sequence[TeacherTrace] | None = None) -> list[dict]:
    rows = []
    by_id = {t.instance_id: t for t in traces} if traces is not None else {}
    for inst in instances:
        r = inst.to_record()
        tr = by_id.get(inst.id)
        if tr is not None:
            r.update(trace_tokens=tr.trace, provisional=tr.provisional, is_corrupted=tr.is_corrupted)
        rows.append(r)
    return rows


def instances_from_records(records: Iterable[dict]) -> list[Instance]:
    return [Instance(r["id"], list(r["tokens"]), r["label"], r["template_id"], r["split"]) for r in records]


def traces_from_records(records: Iterable[dict]) -> list[TeacherTrace]:
    return [
        TeacherTrace(r["id"], list(r["trace_tokens"]), r["provisional"], r["is_corrupted"])
        for r in records
        if "trace_tokens" in r
    ]


def config_dict(config: WorldConfig) -> dict:
    return asdict(config)
