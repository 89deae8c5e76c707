"""Autoregressive reasoning policy.

Given a prompt ``x + [<think>]`` the policy writes a trace and closes it with
``</think> <answer> a_c </answer>``. Training runs through the tape
(:func:`batch_nll`); rollouts use a cached numpy forward that never touches
the tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .worldgen import Vocab

MALFORMED = -1


class ContextLengthError(ValueError):
    pass


# ---------------------------------------------------------------------------
# trace grammar


def serialize(trace: Sequence[int], answer: int, vocab: Vocab) -> list[int]:
    return [vocab.think, *trace, vocab.end_think, vocab.answer, vocab.answer_start + answer, vocab.end_answer]


def grammar_tags(vocab: Vocab) -> set[int]:
    """Tokens that may not appear inside a trace body."""
    return {vocab.think, vocab.end_think, vocab.answer, vocab.end_answer, vocab.eos}


def parse_trajectory(tokens: Sequence[int], vocab: Vocab) -> tuple[list[int], int]:
    """Split ``<think> R </think> <answer> a </answer>`` into (R, class).

    Returns ``(raw tokens, MALFORMED)`` on any grammar violation.
    """
    tokens = [int(t) for t in tokens]
    bad = (tokens[1:] if tokens[:1] == [vocab.think] else tokens, MALFORMED)
    if len(tokens) < 5 or tokens[0] != vocab.think:
        return bad
    tail = tokens[-4:]
    if tail[0] != vocab.end_think or tail[1] != vocab.answer or tail[3] != vocab.end_answer:
        return bad
    if not vocab.is_answer(tail[2]):
        return bad
    body = tokens[1:-4]
    tags = grammar_tags(vocab)
    if any(t in tags or vocab.is_answer(t) for t in body):
        return bad
    return body, tail[2] - vocab.answer_start


def stated_counts(trace: Sequence[int], vocab: Vocab) -> dict[int, int]:
    """First ``k_c n_v`` statement per class found in the trace."""
    out: dict[int, int] = {}
    for a, b in zip(trace, trace[1:]):
        if vocab.is_class_marker(a) and vocab.is_digit(b):
            out.setdefault(a - vocab.class_marker_start, b - vocab.digit_start)
    return out


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 1
    d_mlp: int = 256
    context_length: int = 160

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 1.0
    max_trace_tokens: int = 48
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise nx.ParameterError("sampler temperature must be positive")
        if self.max_trace_tokens < 4:
            raise nx.ParameterError("max_trace_tokens must be >= 4")


@dataclass
class Trajectory:
    tokens: list[int]  # generated tokens, after the prompt
    trace: list[int]
    provisional: int
    log_prob: float
    source: str = "rollout"
    parent_instance_id: int = -1
    step_log_probs: list[float] = field(default_factory=list, repr=False)

    @property
    def length(self) -> int:
        return len(self.tokens)

    @property
    def malformed(self) -> bool:
        return self.provisional == MALFORMED

    def full_sequence(self, vocab: Vocab) -> list[int]:
        return [vocab.think, *self.tokens]


def _f32(a: np.ndarray) -> np.ndarray:
    # parameters live on the float32 grid so checkpoints round-trip exactly
    return a.astype(np.float32).astype(np.float64)


class PolicyModel:
    """Pre-LayerNorm decoder-only transformer over the world vocabulary."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
        d, V, m = config.d_model, config.vocab_size, config.d_mlp
        std = 0.02
        proj_std = std / math.sqrt(2 * config.n_layers)
        p: dict[str, np.ndarray] = {
            "wte": rng.normal(0, std, (V, d)),
            "wpe": rng.normal(0, std, (config.context_length, d)),
        }
        for i in range(config.n_layers):
            pre = f"h{i}."
            p[pre + "ln1.g"] = np.ones(d)
            p[pre + "ln1.b"] = np.zeros(d)
            for n in ("q", "k", "v"):
                p[pre + f"attn.w{n}"] = rng.normal(0, std, (d, d))
                p[pre + f"attn.b{n}"] = np.zeros(d)
            p[pre + "attn.wo"] = rng.normal(0, proj_std, (d, d))
            p[pre + "attn.bo"] = np.zeros(d)
            p[pre + "ln2.g"] = np.ones(d)
            p[pre + "ln2.b"] = np.zeros(d)
            p[pre + "mlp.w1"] = rng.normal(0, std, (d, m))
            p[pre + "mlp.b1"] = np.zeros(m)
            p[pre + "mlp.w2"] = rng.normal(0, proj_std, (m, d))
            p[pre + "mlp.b2"] = np.zeros(d)
        p["lnf.g"] = np.ones(d)
        p["lnf.b"] = np.zeros(d)
        p["head.w"] = rng.normal(0, std, (d, V))
        p["head.b"] = np.zeros(V)
        self.params: dict[str, Tensor] = {k: Tensor(_f32(v), requires_grad=True, name=k) for k, v in p.items()}

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict and set(state) != set(self.params):
            missing = set(self.params) ^ set(state)
            raise KeyError(f"state dict keys differ: {sorted(missing)}")
        for k, v in state.items():
            if k in self.params:
                if v.shape != self.params[k].shape:
                    raise nx.DimensionError(f"{k}: expected {self.params[k].shape}, got {v.shape}")
                self.params[k].data = np.asarray(v, dtype=np.float64).copy()

    def snap_to_float32(self) -> None:
        for t in self.params.values():
            t.data = _f32(t.data)

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.params.values())

    # -- differentiable forward ---------------------------------------------

    def hidden(self, ids: np.ndarray, positions=None) -> Tensor:
        """Final-LayerNorm hidden states, shape (B, T, d).

        With ``positions`` (one index per row) only those states are
        returned, shape (B, d); the last block then runs its query side,
        MLP and residual for those positions alone.
        """
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        B, T = ids.shape
        cfg = self.config
        if T > cfg.context_length:
            raise ContextLengthError(f"sequence length {T} exceeds context {cfg.context_length}")
        P = self.params
        H, dh = cfg.n_heads, cfg.head_dim
        h = nx.embedding(P["wte"], ids) + nx.embedding(P["wpe"], np.arange(T))
        causal = np.triu(np.full((T, T), nx.MASK_VALUE), k=1)
        scale = 1.0 / math.sqrt(dh)
        for i in range(cfg.n_layers):
            pre = f"h{i}."
            a = nx.layer_norm(h, P[pre + "ln1.g"], P[pre + "ln1.b"])
            Tq, aq, mask = T, a, causal
            if positions is not None and i == cfg.n_layers - 1:
                pos = np.asarray(positions, dtype=np.int64)
                Tq = 1
                aq = nx.reshape(nx.take_positions(a, pos), (B, 1, cfg.d_model))
                h = nx.reshape(nx.take_positions(h, pos), (B, 1, cfg.d_model))
                mask = np.where(np.arange(T)[None, :] > pos[:, None], nx.MASK_VALUE, 0.0)[:, None, None, :]

            def heads(src, name, n):
                z = src @ P[pre + f"attn.w{name}"] + P[pre + f"attn.b{name}"]
                return nx.transpose(nx.reshape(z, (B, n, H, dh)), (0, 2, 1, 3))

            q, k, v = heads(aq, "q", Tq), heads(a, "k", T), heads(a, "v", T)
            att = nx.softmax(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))) * scale + mask)
            o = nx.reshape(nx.transpose(nx.matmul(att, v), (0, 2, 1, 3)), (B, Tq, cfg.d_model))
            h = h + (o @ P[pre + "attn.wo"] + P[pre + "attn.bo"])
            m = nx.layer_norm(h, P[pre + "ln2.g"], P[pre + "ln2.b"])
            m = nx.gelu(m @ P[pre + "mlp.w1"] + P[pre + "mlp.b1"])
            h = h + (m @ P[pre + "mlp.w2"] + P[pre + "mlp.b2"])
        out = nx.layer_norm(h, P["lnf.g"], P["lnf.b"])
        return out if positions is None else nx.reshape(out, (B, cfg.d_model))

    def logits(self, ids: np.ndarray) -> Tensor:
        return self.hidden(ids) @ self.params["head.w"] + self.params["head.b"]

    # -- cached numpy inference ---------------------------------------------

    def _np(self, name: str) -> np.ndarray:
        return self.params[name].data

    def prefill(self, ids: np.ndarray) -> tuple[np.ndarray, list]:
        """Run a rectangular (B, T) prompt; return last-position logits and a KV cache."""
        ids = np.asarray(ids, dtype=np.int64)
        B, T = ids.shape
        cfg = self.config
        if T > cfg.context_length:
            raise ContextLengthError(f"prompt length {T} exceeds context {cfg.context_length}")
        h = self._np("wte")[ids] + self._np("wpe")[:T]
        mask = np.triu(np.full((T, T), nx.MASK_VALUE), k=1)
        cache = []
        for i in range(cfg.n_layers):
            h, kv = self._block_np(i, h, None, mask)
            cache.append(kv)
        return self._head_np(h[:, -1]), cache

    def extend(self, cache: list, new_ids: np.ndarray, position: int) -> np.ndarray:
        """Feed one token per row at ``position``; returns next-token logits. Updates cache."""
        if position >= self.config.context_length:
            raise ContextLengthError(f"position {position} exceeds context {self.config.context_length}")
        h = self._np("wte")[np.asarray(new_ids)][:, None, :] + self._np("wpe")[position]
        for i in range(self.config.n_layers):
            h, cache[i] = self._block_np(i, h, cache[i], None)
        return self._head_np(h[:, -1])

    def _block_np(self, i: int, h: np.ndarray, kv, mask):
        cfg = self.config
        pre = f"h{i}."
        B, T, d = h.shape
        H, dh = cfg.n_heads, cfg.head_dim
        a = _ln_np(h, self._np(pre + "ln1.g"), self._np(pre + "ln1.b"))

        def heads(name):
            z = a @ self._np(pre + f"attn.w{name}") + self._np(pre + f"attn.b{name}")
            return z.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

        q, k, v = heads("q"), heads("k"), heads("v")
        if kv is not None:
            k = np.concatenate([kv[0], k], axis=2)
            v = np.concatenate([kv[1], v], axis=2)
        s = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        if mask is not None:
            s = s + mask
        att = nx.softmax_array(s)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
        h = h + (o @ self._np(pre + "attn.wo") + self._np(pre + "attn.bo"))
        m = _ln_np(h, self._np(pre + "ln2.g"), self._np(pre + "ln2.b"))
        m = _gelu_np(m @ self._np(pre + "mlp.w1") + self._np(pre + "mlp.b1"))
        h = h + (m @ self._np(pre + "mlp.w2") + self._np(pre + "mlp.b2"))
        return h, (k, v)

    def _head_np(self, h: np.ndarray) -> np.ndarray:
        h = _ln_np(h, self._np("lnf.g"), self._np("lnf.b"))
        return h @ self._np("head.w") + self._np("head.b")


def _ln_np(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    return xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps) * g + b


def _gelu_np(z):
    return 0.5 * z * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * z * (1.0 + 0.044715 * z * z)))


def new_policy(vocab: Vocab, seed: int = 0, **arch) -> PolicyModel:
    return PolicyModel(ModelConfig(vocab_size=vocab.size, **arch), seed=seed)


# ---------------------------------------------------------------------------
# decoding


def prompt_tokens(x: Sequence[int], vocab: Vocab) -> list[int]:
    return [int(t) for t in x] + [vocab.think]


def forward_logits(model: PolicyModel, prefix: Sequence[int]) -> Tensor:
    """Next-token logits after ``prefix`` (differentiable when a tape is active)."""
    if len(prefix) > model.config.context_length:
        raise ContextLengthError(f"prefix length {len(prefix)} exceeds context {model.config.context_length}")
    if not prefix:
        raise ValueError("prefix must be non-empty")
    return nx.reshape(nx.take_positions(model.logits(np.asarray([prefix])), [len(prefix) - 1]), (-1,))


def trajectory_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *stream]))


def rollout(
    model: PolicyModel,
    xs: Sequence[Sequence[int]],
    vocab: Vocab,
    cfg: SamplerConfig,
    rngs: Sequence[np.random.Generator] | None = None,
    greedy: bool = False,
    parent_ids: Sequence[int] | None = None,
) -> list[Trajectory]:
    """Decode one trajectory per prompt, all rows in lockstep.

    Each row draws its uniforms from its own generator, so a row's sample
    does not depend on which other rows share the batch. ``log_prob`` is
    under the model itself (temperature 1), independent of the sampling
    temperature.
    """
    n = len(xs)
    if n == 0:
        return []
    prompts = np.asarray([prompt_tokens(x, vocab) for x in xs], dtype=np.int64)
    P = prompts.shape[1]
    budget = cfg.max_trace_tokens
    if P + budget - 1 > model.config.context_length:
        raise ContextLengthError(
            f"prompt {P} + budget {budget} exceeds context {model.config.context_length}"
        )
    if not greedy:
        if rngs is None or len(rngs) != n:
            raise ValueError("sampling needs one rng per prompt")
        uniforms = np.stack([r.random(budget) for r in rngs])
    logits, cache = model.prefill(prompts)
    gen = np.full((n, budget), vocab.eos, dtype=np.int64)
    lps = np.zeros((n, budget))
    length = np.zeros(n, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    for t in range(budget):
        logp = nx.log_softmax_array(logits)
        if greedy:
            tok = np.argmax(logits, axis=-1)
        else:
            probs = nx.softmax_array(logits, cfg.temperature)
            cdf = np.cumsum(probs, axis=-1)
            tok = (cdf <= (uniforms[:, t] * cdf[:, -1])[:, None]).sum(axis=-1)
            tok = np.minimum(tok, logits.shape[-1] - 1)
        live = ~done
        gen[live, t] = tok[live]
        lps[live, t] = logp[np.arange(n), tok][live]
        length[live] += 1
        done |= tok == vocab.end_answer
        if done.all() or t == budget - 1:
            break
        logits = model.extend(cache, gen[:, t], P + t)
    out = []
    for i in range(n):
        toks = gen[i, : length[i]].tolist()
        trace, ans = parse_trajectory([vocab.think, *toks], vocab)
        step = lps[i, : length[i]].tolist()
        out.append(
            Trajectory(
                tokens=toks,
                trace=trace,
                provisional=ans,
                log_prob=float(np.sum(step)),
                parent_instance_id=-1 if parent_ids is None else int(parent_ids[i]),
                step_log_probs=step,
            )
        )
    return out


def sample_trajectory(model: PolicyModel, x: Sequence[int], vocab: Vocab, cfg: SamplerConfig, rng) -> Trajectory:
    return rollout(model, [x], vocab, cfg, [rng])[0]


def greedy_decode(model: PolicyModel, x: Sequence[int], vocab: Vocab, cfg: SamplerConfig) -> Trajectory:
    return rollout(model, [x], vocab, cfg, greedy=True)[0]


def greedy_batch(model, xs, vocab, cfg, chunk: int = 256) -> list[Trajectory]:
    out = []
    for i in range(0, len(xs), chunk):
        out += rollout(model, xs[i : i + chunk], vocab, cfg, greedy=True)
    return out


# ---------------------------------------------------------------------------
# likelihood


def pack_sequences(prompts: Sequence[Sequence[int]], gens: Sequence[Sequence[int]], pad: int):
    """Right-padded inputs/targets for teacher forcing.

    Returns (inputs, targets, mask) where mask marks positions whose target
    is a generated token.
    """
    full = [list(p) + list(g) for p, g in zip(prompts, gens)]
    T = max(len(s) for s in full) - 1
    B = len(full)
    inputs = np.full((B, T), pad, dtype=np.int64)
    targets = np.full((B, T), pad, dtype=np.int64)
    mask = np.zeros((B, T))
    for b, (s, p) in enumerate(zip(full, prompts)):
        inputs[b, : len(s) - 1] = s[:-1]
        targets[b, : len(s) - 1] = s[1:]
        mask[b, len(p) - 1 : len(s) - 1] = 1.0
    return inputs, targets, mask


def batch_nll(
    model: PolicyModel,
    xs: Sequence[Sequence[int]],
    gens: Sequence[Sequence[int]],
    vocab: Vocab,
    weights: Sequence[float] | None = None,
) -> Tensor:
    """sum_b weights[b] * -log p(gens[b] | x_b), prompt positions masked out."""
    prompts = [prompt_tokens(x, vocab) for x in xs]
    inputs, targets, mask = pack_sequences(prompts, gens, vocab.eos)
    w = np.ones(len(xs)) if weights is None else np.asarray(weights, dtype=np.float64)
    return nx.token_nll(model.logits(inputs), targets, mask * w[:, None])


def trajectory_nll(model: PolicyModel, x: Sequence[int], trajectory: Trajectory | Sequence[int], vocab: Vocab) -> Tensor:
    gen = trajectory.tokens if isinstance(trajectory, Trajectory) else list(trajectory)
    return batch_nll(model, [x], [gen], vocab)


def next_token_distribution(model: PolicyModel, prefix: Sequence[int]) -> np.ndarray:
    return nx.softmax_array(forward_logits(model, prefix).data)
