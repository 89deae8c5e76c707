from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from intuit.calibrator import (
    CalibratorModel,
    calibrate,
    calibrate_batch,
    decode_calibration_input,
    encode_calibration_input,
    full_inference,
    full_inference_batch,
    predict,
)
from intuit.reasoner import MALFORMED, ModelConfig, PolicyModel, SamplerConfig, greedy_decode
from intuit.stages import CalibrationRecord, Hyperparams, teacher_calibration_records, train_calibration
from intuit.worldgen import WorldConfig, generate_splits, teacher_dataset

WORLD = WorldConfig()
V = WORLD.vocab
ARCH = ModelConfig(V.size, d_model=32, n_heads=4, d_mlp=64, context_length=80)


@pytest.fixture(scope="module")
def policy():
    return PolicyModel(ARCH, seed=3)


@pytest.fixture(scope="module")
def insts():
    return generate_splits(WORLD, {"cold_start": 1, "grpo": 1, "calibration": 64, "eval": 4})["calibration"]


# -- encoding ---------------------------------------------------------------------


def test_encode_layout():
    x = [V.filler(0), V.evidence(1)]
    enc = encode_calibration_input(x, [V.skip, V.neg], 2, V)
    assert enc.tokens == [*x, V.sep, V.skip, V.neg, V.sep, V.answer_start + 2]
    assert not enc.truncated


def test_encode_empty_trace():
    x = [V.filler(3)] * 4
    assert encode_calibration_input(x, [], 0, V).tokens == [*x, V.sep, V.sep, V.answer_start]


def test_encode_malformed_uses_marker():
    assert encode_calibration_input([V.filler(0)], [V.skip], MALFORMED, V).tokens[-1] == V.malformed


def test_encode_truncates_from_the_left():
    x = [V.filler(0)] * 24
    trace = list(range(60))
    enc = encode_calibration_input(x, trace, 1, V, context_length=50)
    assert enc.truncated and len(enc.tokens) == 50
    assert decode_calibration_input(enc.tokens, V)[1] == trace[-23:]


body = st.lists(st.integers(0, V.size - 1).filter(lambda t: t != V.sep), max_size=40)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(0, V.neg), min_size=1, max_size=24), body, st.integers(-1, WORLD.num_classes - 1))
def test_encode_decode_round_trip(x, trace, provisional):
    enc = encode_calibration_input(x, trace, provisional, V)
    assert not enc.truncated
    assert decode_calibration_input(enc.tokens, V) == (x, trace, provisional)


# -- model --------------------------------------------------------------------------


def test_init_from_policy_copies_backbone(policy):
    cal = CalibratorModel.from_policy(policy, 4, seed=1)
    state = policy.state_dict()
    for k, v in cal.state_dict().items():
        if k.startswith("cls."):
            continue
        assert np.array_equal(v, state[k])
    assert "head.w" not in cal.params and cal.head_shape == (32, 4)
    scratch = CalibratorModel(ARCH, 4, seed=1)
    assert not np.array_equal(scratch.params["wte"].data, state["wte"])


def test_distribution_sums_to_one_and_is_deterministic(policy, insts):
    cal = CalibratorModel.from_policy(policy, 4, seed=2)
    rng = np.random.default_rng(0)
    for inst in insts[:10]:
        trace = rng.integers(0, V.neg, int(rng.integers(0, 30))).tolist()
        p = calibrate(cal, inst.x, trace, int(rng.integers(-1, 4)), V)
        assert abs(p.sum() - 1.0) <= 1e-12 and p.shape == (4,)
    a = calibrate(cal, insts[0].x, [V.skip], 1, V)
    b = calibrate(cal, insts[0].x, [V.skip], 1, V)
    assert np.array_equal(a, b)


def test_batch_matches_single(policy, insts):
    cal = CalibratorModel.from_policy(policy, 4, seed=2)
    triples = [(i.x, [V.skip] * (k % 5), (k % 5) - 1) for k, i in enumerate(insts[:9])]
    batch = calibrate_batch(cal, triples, V, chunk=4)
    for row, (x, r, p) in zip(batch, triples):
        assert np.allclose(row, calibrate(cal, x, r, p, V), atol=1e-12)


def test_predict_breaks_ties_low():
    assert predict(np.array([0.25, 0.25, 0.25, 0.25])) == 0
    assert predict(np.array([0.1, 0.45, 0.45, 0.0])) == 1


def test_full_inference_uses_greedy_policy(policy, insts):
    cal = CalibratorModel.from_policy(policy, 4)
    sampler = SamplerConfig(max_trace_tokens=20)
    res = full_inference(policy, cal, insts[0].x, V, sampler)
    assert res.trajectory.tokens == greedy_decode(policy, insts[0].x, V, sampler).tokens
    assert np.allclose(res.distribution, calibrate(cal, insts[0].x, res.trajectory.trace, res.provisional, V), atol=1e-12)
    batch = full_inference_batch(policy, cal, [i.x for i in insts[:3]], V, sampler)
    assert [r.prediction for r in batch] == [predict(r.distribution) for r in batch]


# -- training -----------------------------------------------------------------------


def test_echo_fit(policy, insts):
    # provisional answers are always right, so the calibrator only has to echo them
    records = [CalibrationRecord(i.id, i.x, [], i.y, i.y) for i in insts]
    cal = CalibratorModel.from_policy(policy, 4)
    train_calibration(cal, records, Hyperparams(batch_size=16, lr=3e-3, calibration_epochs=15), V)
    dist = calibrate_batch(cal, [(r.x, r.trace, r.provisional) for r in records], V)
    agree = np.mean(dist.argmax(1) == np.array([r.provisional for r in records]))
    assert agree >= 0.99


def test_eight_record_overfit(policy, insts):
    records = teacher_calibration_records(insts[:8], teacher_dataset(insts[:8], WORLD, budget=20))
    cal = CalibratorModel.from_policy(policy, 4)
    curve = train_calibration(cal, records, Hyperparams(batch_size=8, lr=3e-3, calibration_epochs=60), V)
    assert curve[-1] < 0.05


def test_zero_epochs_leave_parameters(policy, insts):
    cal = CalibratorModel.from_policy(policy, 4)
    before = cal.state_dict()
    records = [CalibrationRecord(i.id, i.x, [], MALFORMED, i.y) for i in insts[:4]]
    assert train_calibration(cal, records, Hyperparams(calibration_epochs=0), V) == []
    assert all(np.array_equal(before[k], v) for k, v in cal.state_dict().items())


def test_training_is_deterministic(policy, insts):
    records = [CalibrationRecord(i.id, i.x, [V.skip], MALFORMED if i.id % 3 == 0 else i.y, i.y) for i in insts[:20]]
    hp = Hyperparams(batch_size=8, lr=1e-3, calibration_epochs=2, seed=4)
    a, b = CalibratorModel.from_policy(policy, 4), CalibratorModel.from_policy(policy, 4)
    assert train_calibration(a, records, hp, V) == train_calibration(b, records, hp, V)
    assert all(np.array_equal(a.state_dict()[k], v) for k, v in b.state_dict().items())


def test_load_state_dict_checks_keys(policy):
    cal = CalibratorModel.from_policy(policy, 4)
    state = cal.state_dict()
    state.pop("cls.b")
    with pytest.raises(KeyError):
        cal.load_state_dict(state)
