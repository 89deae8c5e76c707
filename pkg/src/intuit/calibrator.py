"""Decision model that reads (x, trace, provisional answer) and predicts the label."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .reasoner import MALFORMED, ModelConfig, PolicyModel, SamplerConfig, Trajectory, greedy_batch
from .worldgen import Vocab

LM_HEAD = ("head.w", "head.b")


@dataclass
class Encoded:
    tokens: list[int]
    truncated: bool


def encode_calibration_input(
    x: Sequence[int], trace: Sequence[int], provisional: int, vocab: Vocab, context_length: int = 160
) -> Encoded:
    """``x <sep> R <sep> answer`` with R cut from the left to fit the context."""
    tail = vocab.malformed if provisional == MALFORMED else vocab.answer_start + provisional
    room = context_length - len(x) - 3
    if room < 0:
        raise ValueError(f"input of length {len(x)} leaves no room in context {context_length}")
    trace = list(trace)
    truncated = len(trace) > room
    if truncated:
        trace = trace[len(trace) - room :] if room else []
    return Encoded([*map(int, x), vocab.sep, *trace, vocab.sep, tail], truncated)


def decode_calibration_input(tokens: Sequence[int], vocab: Vocab) -> tuple[list[int], list[int], int]:
    tokens = list(tokens)
    first = tokens.index(vocab.sep)
    if len(tokens) < first + 3 or tokens[-2] != vocab.sep:
        raise ValueError("not an encoded calibration input")
    tail = tokens[-1]
    provisional = MALFORMED if tail == vocab.malformed else tail - vocab.answer_start
    return tokens[:first], tokens[first + 1 : -2], provisional


class CalibratorModel:
    """Transformer backbone plus a linear class head on the final position."""

    def __init__(self, config: ModelConfig, num_classes: int, seed: int = 0, init_from: PolicyModel | None = None):
        self.config = config
        self.num_classes = num_classes
        self.backbone = PolicyModel(config, seed=seed)
        if init_from is not None:
            self.backbone.load_state_dict(init_from.state_dict())
        for name in LM_HEAD:
            del self.backbone.params[name]
        rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
        w = rng.normal(0, 0.02, (config.d_model, num_classes)).astype(np.float32).astype(np.float64)
        self.params: dict[str, Tensor] = dict(self.backbone.params)
        self.params["cls.w"] = Tensor(w, requires_grad=True, name="cls.w")
        self.params["cls.b"] = Tensor(np.zeros(num_classes), requires_grad=True, name="cls.b")

    @classmethod
    def from_policy(cls, policy: PolicyModel, num_classes: int, seed: int = 0) -> "CalibratorModel":
        return cls(policy.config, num_classes, seed=seed, init_from=policy)

    @property
    def head_shape(self) -> tuple[int, int]:
        return self.params["cls.w"].shape

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise KeyError(f"state dict keys differ: {sorted(set(state) ^ set(self.params))}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise nx.DimensionError(f"{k}: expected {self.params[k].shape}, got {v.shape}")
            self.params[k].data = np.asarray(v, dtype=np.float64).copy()

    def snap_to_float32(self) -> None:
        for t in self.params.values():
            t.data = t.data.astype(np.float32).astype(np.float64)

    def class_logits(self, sequences: Sequence[Sequence[int]]) -> Tensor:
        """(B, C) logits; sequences are right-padded internally."""
        lengths = np.array([len(s) for s in sequences])
        ids = np.full((len(sequences), lengths.max()), 0, dtype=np.int64)
        for i, s in enumerate(sequences):
            ids[i, : len(s)] = s
        h = self.backbone.hidden(ids, positions=lengths - 1)
        return h @ self.params["cls.w"] + self.params["cls.b"]


def calibrate(model: CalibratorModel, x, trace, provisional, vocab: Vocab) -> np.ndarray:
    """Class distribution for one (x, R, provisional) triple."""
    enc = encode_calibration_input(x, trace, provisional, vocab, model.config.context_length)
    return nx.softmax_array(model.class_logits([enc.tokens]).data[0])


def calibrate_batch(model: CalibratorModel, triples, vocab: Vocab, chunk: int = 256) -> np.ndarray:
    out = []
    triples = list(triples)
    for i in range(0, len(triples), chunk):
        seqs = [
            encode_calibration_input(x, r, p, vocab, model.config.context_length).tokens
            for x, r, p in triples[i : i + chunk]
        ]
        out.append(nx.softmax_array(model.class_logits(seqs).data))
    return np.concatenate(out) if out else np.zeros((0, model.num_classes))


def predict(distribution: np.ndarray) -> int:
    return int(np.argmax(distribution))


@dataclass
class InferenceResult:
    trajectory: Trajectory
    distribution: np.ndarray

    @property
    def provisional(self) -> int:
        return self.trajectory.provisional

    @property
    def prediction(self) -> int:
        return predict(self.distribution)


def full_inference(policy: PolicyModel, calibrator: CalibratorModel, x, vocab: Vocab, sampler: SamplerConfig) -> InferenceResult:
    return full_inference_batch(policy, calibrator, [x], vocab, sampler)[0]


def full_inference_batch(policy, calibrator, xs, vocab: Vocab, sampler: SamplerConfig) -> list[InferenceResult]:
    """Greedy reasoning with the frozen policy, then calibration."""
    trajs = greedy_batch(policy, xs, vocab, sampler)
    dists = calibrate_batch(calibrator, [(x, t.trace, t.provisional) for x, t in zip(xs, trajs)], vocab)
    return [InferenceResult(t, d) for t, d in zip(trajs, dists)]
