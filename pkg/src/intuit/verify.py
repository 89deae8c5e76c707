"""Fast invariant suite: gradients, GRPO reductions, metrics, round trips."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .checkpoint import decode, encode
from .evaluation import confusion_and_scores
from .reasoner import PolicyModel, grammar_tags, parse_trajectory, serialize, trajectory_nll
from .rewards import RewardConfig
from .stages import Hyperparams, grpo_loss, group_weights, sample_and_score
from .worldgen import WorldConfig, generate_splits


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail} ({self.seconds:.2f}s)"


# ---------------------------------------------------------------------------
# gradient checks on mini networks


def mini_network(seed: int):
    """A random differentiable net of at most 500 parameters.

    Returns (params, loss_fn) where loss_fn(params) builds a scalar tensor.
    The architecture mixes embedding, matmul, layer norm, gelu/tanh/exp,
    softmax and token NLL, all drawn from the seed.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    V = int(rng.integers(4, 9))
    d = int(rng.integers(3, 7))
    h = int(rng.integers(3, 8))
    T = int(rng.integers(2, 5))
    B = int(rng.integers(1, 3))
    params = {
        "emb": rng.normal(0, 0.5, (V, d)),
        "w1": rng.normal(0, 0.5, (d, h)),
        "b1": rng.normal(0, 0.1, (h,)),
        "g": 1 + rng.normal(0, 0.1, (h,)),
        "beta": rng.normal(0, 0.1, (h,)),
        "w2": rng.normal(0, 0.5, (h, V)),
    }
    assert sum(p.size for p in params.values()) <= 500
    ids = rng.integers(0, V, (B, T))
    targets = rng.integers(0, V, (B, T))
    weights = rng.random((B, T))
    act = [nx.gelu, nx.tanh][int(rng.integers(2))]

    def loss_fn(p: dict[str, nx.Tensor]) -> nx.Tensor:
        x = nx.embedding(p["emb"], ids)
        z = act(x @ p["w1"] + p["b1"])
        z = nx.layer_norm(z, p["g"], p["beta"])
        # a softmax-gated residual keeps exp/softmax on the path
        gate = nx.softmax(z, temperature=1.5)
        z = z + gate * nx.exp(nx.mul(z, 0.1))
        logits = z @ p["w2"]
        return nx.token_nll(logits, targets, weights) + nx.mean(nx.mul(z, z)) * 0.01

    return params, loss_fn


def mini_network_error(seed: int, epsilon: float = 1e-6) -> float:
    """Max relative FD error over every parameter tensor of mini_network(seed)."""
    params, loss_fn = mini_network(seed)
    worst = 0.0
    for name in params:
        fixed = {k: nx.Tensor(v) for k, v in params.items()}

        def f(t, name=name, fixed=fixed):
            return loss_fn({**fixed, name: t})

        worst = max(worst, nx.finite_difference_check(f, nx.Tensor(params[name]), epsilon))
    return worst


# ---------------------------------------------------------------------------
# GRPO reduction identities


def tiny_world() -> WorldConfig:
    return WorldConfig(num_classes=3, evidence_tokens_per_class=2, num_filler_tokens=4, sequence_length=8, seed=3)


def tiny_policy(world: WorldConfig, seed: int = 0) -> PolicyModel:
    from .reasoner import ModelConfig

    return PolicyModel(ModelConfig(world.vocab.size, d_model=16, n_heads=2, n_layers=1, d_mlp=32, context_length=64), seed=seed)


def _grads(model: PolicyModel, loss_fn) -> dict[str, np.ndarray]:
    model.zero_grad()
    with nx.Tape() as tape:
        loss = loss_fn()
    nx.backward(loss, tape)
    return {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in model.params.items()}


def _max_diff(a: dict, b: dict) -> float:
    return max(float(np.max(np.abs(a[k] - b[k]))) for k in a)


def grpo_k1_gap(seed: int = 0) -> float:
    """K=1: GRPO gradient vs. plain trajectory NLL gradient on the sampled trajectory."""
    world = tiny_world()
    model = tiny_policy(world, seed)
    inst = generate_splits(world, {"cold_start": 1, "grpo": 1, "calibration": 1, "eval": 1})["grpo"][0]
    hp = Hyperparams(batch_size=1, K=1, seed=seed, max_trace_tokens=20)
    gb = sample_and_score(model, [inst], hp, RewardConfig(), world)
    g_rl = _grads(model, lambda: grpo_loss(model, [inst.x], gb.groups, gb.weights, world.vocab, 1))
    g_sft = _grads(model, lambda: trajectory_nll(model, inst.x, gb.groups[0][0], world.vocab))
    return _max_diff(g_rl, g_sft)


def grpo_equal_reward_gap(seed: int = 0, batch: int = 3, K: int = 4) -> float:
    """Equal rewards in every group: GRPO gradient vs. mean SFT gradient over all samples."""
    world = tiny_world()
    model = tiny_policy(world, seed)
    insts = generate_splits(world, {"cold_start": 1, "grpo": batch, "calibration": 1, "eval": 1})["grpo"]
    hp = Hyperparams(batch_size=batch, K=K, seed=seed, max_trace_tokens=20)
    gb = sample_and_score(model, insts, hp, RewardConfig(), world)
    flat = np.full(K, 0.5)
    weights = [group_weights(flat, hp.tau) for _ in insts]
    g_rl = _grads(model, lambda: grpo_loss(model, [i.x for i in insts], gb.groups, weights, world.vocab, batch))

    def sft():
        total = None
        for inst, group in zip(insts, gb.groups):
            for traj in group:
                term = trajectory_nll(model, inst.x, traj, world.vocab)
                total = term if total is None else total + term
        return total * (1.0 / (batch * K))

    return _max_diff(g_rl, _grads(model, sft))


def group_weight_errors(n_vectors: int = 1000, seed: int = 0) -> tuple[float, float]:
    """(max |sum - 1|, max shift-invariance gap) over random reward vectors."""
    rng = np.random.default_rng(seed)
    worst_sum = worst_shift = 0.0
    for i in range(n_vectors):
        K = int(rng.integers(1, 65))
        tau = (0.25, 1.0, 4.0)[i % 3]
        r = rng.normal(0, 3, K)
        w = group_weights(r, tau)
        worst_sum = max(worst_sum, abs(w.sum() - 1.0))
        shifted = group_weights(r + rng.normal(0, 10), tau)
        worst_shift = max(worst_shift, float(np.max(np.abs(w - shifted))))
    return worst_sum, worst_shift


# ---------------------------------------------------------------------------
# metric oracle


def brute_force_scores(pred, gold, C):
    """Loop-only reference: (confusion, accuracy, per-class F1, macro F1)."""
    conf = [[0] * C for _ in range(C)]
    for p, g in zip(pred, gold):
        conf[g][p] += 1
    n = len(gold)
    correct = sum(1 for p, g in zip(pred, gold) if p == g)
    f1s = []
    for c in range(C):
        tp = sum(1 for p, g in zip(pred, gold) if p == c and g == c)
        fp = sum(1 for p, g in zip(pred, gold) if p == c and g != c)
        fn = sum(1 for p, g in zip(pred, gold) if p != c and g == c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return conf, correct / n, f1s, sum(f1s) / C


def metric_oracle_mismatches(cases: int = 1000, seed: int = 0) -> int:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(cases):
        C = int(rng.integers(2, 7))
        n = int(rng.integers(1, 60))
        gold = rng.integers(0, C, n).tolist()
        pred = rng.integers(0, C, n).tolist()
        rep = confusion_and_scores(pred, gold, C)
        conf, acc, f1s, macro = brute_force_scores(pred, gold, C)
        same = (
            rep.confusion.tolist() == conf
            and rep.accuracy == acc
            and rep.per_class_f1 == f1s
            and abs(rep.macro_f1 - macro) <= 1e-12
        )
        bad += not same
    return bad


# ---------------------------------------------------------------------------
# round trips


def random_valid_trajectory(rng: np.random.Generator, world: WorldConfig) -> tuple[list[int], int]:
    """A trace drawn from non-tag tokens plus a class."""
    vocab = world.vocab
    tags = grammar_tags(vocab)
    allowed = [t for t in range(vocab.size) if t not in tags and not vocab.is_answer(t)]
    trace = [int(t) for t in rng.choice(allowed, int(rng.integers(0, 40)))]
    return trace, int(rng.integers(world.num_classes))


def parse_roundtrip_failures(n: int = 10_000, seed: int = 0) -> int:
    world = WorldConfig()
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n):
        trace, ans = random_valid_trajectory(rng, world)
        bad += parse_trajectory(serialize(trace, ans, world.vocab), world.vocab) != (trace, ans)
    return bad


def checkpoint_roundtrip_failures(n: int = 20, seed: int = 0) -> int:
    from .reasoner import ModelConfig

    rng = np.random.default_rng(seed)
    bad = 0
    for i in range(n):
        cfg = ModelConfig(
            int(rng.integers(10, 80)),
            d_model=int(rng.choice([8, 16, 32])),
            n_heads=2,
            n_layers=int(rng.integers(1, 3)),
            d_mlp=int(rng.choice([16, 32])),
            context_length=int(rng.integers(16, 64)),
        )
        model = PolicyModel(cfg, seed=seed * 1000 + i)
        state, meta = decode(encode(model.state_dict(), {"i": i}))
        bad += meta != {"i": i} or any(
            state[k].shape != v.shape or state[k].tobytes() != v.tobytes() for k, v in model.state_dict().items()
        ) or set(state) != set(model.state_dict())
    return bad


# ---------------------------------------------------------------------------


def _timed(name, fn, ok, fmt) -> Check:
    t = time.perf_counter()
    value = fn()
    return Check(name, bool(ok(value)), fmt(value), time.perf_counter() - t)


def run_all(quick: bool = True) -> list[Check]:
    n_nets = 5 if quick else 20
    checks = [
        _timed(
            "finite-difference gradients",
            lambda: max(mini_network_error(s) for s in range(n_nets)),
            lambda e: e < 1e-4,
            lambda e: f"max relative error {e:.2e} over {n_nets} nets",
        ),
        _timed("GRPO K=1 reduction", grpo_k1_gap, lambda e: e <= 1e-9, lambda e: f"max |diff| {e:.2e}"),
        _timed("GRPO equal-reward reduction", grpo_equal_reward_gap, lambda e: e <= 1e-9, lambda e: f"max |diff| {e:.2e}"),
        _timed(
            "group weights",
            group_weight_errors,
            lambda e: e[0] <= 1e-12 and e[1] <= 1e-12,
            lambda e: f"sum error {e[0]:.1e}, shift error {e[1]:.1e}",
        ),
        _timed(
            "metric oracle",
            lambda: (metric_oracle_mismatches(), confusion_and_scores([0, 0, 1, 1], [0, 1, 1, 1], 2).macro_f1),
            lambda e: e[0] == 0 and abs(e[1] - 0.733333333333) <= 1e-9,
            lambda e: f"{e[0]} mismatches, hand case macro-F1 {e[1]:.6f}",
        ),
        _timed(
            "trajectory parse round trip",
            lambda: parse_roundtrip_failures(2000 if quick else 10_000),
            lambda e: e == 0,
            lambda e: f"{e} failures",
        ),
        _timed(
            "checkpoint round trip",
            lambda: checkpoint_roundtrip_failures(5 if quick else 20),
            lambda e: e == 0,
            lambda e: f"{e} failures",
        ),
    ]
    return checks
