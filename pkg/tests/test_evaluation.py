from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from intuit.evaluation import (
    AblationRow,
    AblationTable,
    bag_of_tokens,
    confusion_and_scores,
    correction_rates,
    expected_calibration_error,
)
from intuit.numerics import ContractError
from intuit.reasoner import MALFORMED
from intuit.verify import brute_force_scores, metric_oracle_mismatches
from intuit.worldgen import Instance


def test_perfect_predictions():
    rep = confusion_and_scores([0, 1, 2, 2], [0, 1, 2, 2], 3)
    assert rep.accuracy == 1.0 and rep.per_class_f1 == [1.0, 1.0, 1.0] and rep.macro_f1 == 1.0


def test_hand_case():
    rep = confusion_and_scores([0, 0, 1, 1], [0, 1, 1, 1], 2)
    assert rep.confusion.tolist() == [[1, 0], [1, 2]]
    assert rep.per_class_f1[0] == pytest.approx(2 / 3, abs=1e-12)
    assert rep.per_class_f1[1] == pytest.approx(0.8, abs=1e-12)
    assert abs(rep.macro_f1 - 0.733333333333) <= 1e-9
    assert rep.accuracy == 0.75


def test_absent_class_scores_zero_and_is_flagged():
    rep = confusion_and_scores([0, 1, 1], [0, 1, 0], 3)
    assert rep.per_class_f1[2] == 0.0 and rep.absent_classes == [2]


def test_length_mismatch_is_contract_error():
    with pytest.raises(ContractError):
        confusion_and_scores([0, 1], [0], 2)
    with pytest.raises(ContractError):
        confusion_and_scores([5], [0], 2)


def test_malformed_predictions_count_as_misses():
    rep = confusion_and_scores([MALFORMED, 1, 0, MALFORMED], [0, 1, 0, 1], 2)
    assert rep.confusion.sum() == 2 and rep.unassigned == [1, 1]
    assert rep.accuracy == 0.5
    # class 0: tp 1, fp 0, fn 1 -> 2/3 ; class 1 likewise
    assert rep.per_class_f1 == pytest.approx([2 / 3, 2 / 3])


def test_oracle_agreement():
    assert metric_oracle_mismatches(cases=300, seed=1) == 0


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 6).flatmap(lambda C: st.tuples(st.just(C), st.lists(st.tuples(st.integers(0, C - 1), st.integers(0, C - 1)), min_size=1, max_size=50))))
def test_report_invariants(case):
    C, pairs = case
    pred, gold = [p for p, _ in pairs], [g for _, g in pairs]
    rep = confusion_and_scores(pred, gold, C)
    conf, acc, f1s, macro = brute_force_scores(pred, gold, C)
    assert rep.confusion.tolist() == conf and rep.per_class_f1 == f1s
    assert rep.confusion.sum() == rep.n == len(gold)
    assert abs(rep.macro_f1 - np.mean(rep.per_class_f1)) <= 1e-12
    assert abs(rep.accuracy - np.mean(np.array(pred) == np.array(gold))) <= 1e-12
    assert 0 <= rep.accuracy <= 1 and all(0 <= f <= 1 for f in rep.per_class_f1)


def test_ece_examples():
    assert expected_calibration_error([1.0] * 6, [True] * 6) == 0.0
    assert expected_calibration_error([1.0] * 4, [True, False, True, False]) == 0.5
    # two populated bins out of ten: 0.5*|1-0.15| + 0.5*|0-0.85|
    assert expected_calibration_error([0.15, 0.85], [True, False]) == pytest.approx(0.85)
    assert expected_calibration_error([], []) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=1, max_size=60))
def test_ece_bounded(pairs):
    e = expected_calibration_error([c for c, _ in pairs], [k for _, k in pairs])
    assert 0 <= e <= 1


def test_report_with_confidences_and_json():
    rep = confusion_and_scores([0, 1], [0, 0], 2, confidences=[1.0, 1.0])
    assert rep.ece == 0.5
    d = json.loads(rep.to_json())
    assert set(d) >= {"confusion", "accuracy", "per_class_f1", "macro_f1", "ece", "n"}
    assert confusion_and_scores([0, 1], [0, 0], 2).to_dict() == confusion_and_scores([0, 1], [0, 0], 2).to_dict()


def test_correction_rates():
    r = correction_rates([0, 1, 1, 2], [0, 0, 1, 1], [0, 0, 1, 2])
    assert r == {"changed": 0.5, "correction_rate": 1.0, "corruption_rate": 1 / 3}


def test_bag_of_tokens_counts():
    X = bag_of_tokens([Instance(0, [1, 1, 3], 0, 0, "eval")], 5)
    assert X.tolist() == [[0, 2, 0, 1, 0]]


def test_ablation_csv_round_trip():
    t = AblationTable()
    t.add(AblationRow("stage1", "rollout", 48, "stage1", 61.25, 80.5, "abcd", 1))
    t.add(AblationRow("stage3", "teacher", 48, "stage2", 70.0, 75.125, "abcd", 2, {"records": 4000}))
    text = t.to_csv()
    assert text.splitlines()[0] == "stage,trace_source,trace_budget,backbone_tag,imitation_f1,calibration_f1,config_hash,seed,records"
    back = AblationTable.from_csv(text)
    assert [r.key for r in back] == [r.key for r in t]
    assert [r.calibration_f1 for r in back] == [80.5, 75.125]
    assert back.rows[1].extra == {"records": "4000"} and back.rows[1].seed == 2
