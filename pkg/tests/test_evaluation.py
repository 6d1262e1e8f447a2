"""Metrics and densities, scored against hand-derived oracles.

The six-item metrics oracle and the nine-value bandwidth oracle below were
worked out by hand before the implementation existed; the numbers are frozen.
"""

from __future__ import annotations

import math
import random

import numpy as np
import pytest

from psyche.errors import ConsistencyCheckError, InputError, PreconditionError
from psyche.evaluation import (
    DensityTable,
    EvalItem,
    compute_metrics,
    consistency_distribution,
    decomposition_check,
    items_from_records,
    kde_density,
    pairwise_compare,
    silverman_bandwidth,
)


def _item(
    qid: str,
    pred: str,
    attempts: tuple[str, ...],
    *,
    gold: str = "4",
    failed: bool = False,
) -> EvalItem:
    from collections import Counter

    majority, consistency = ("", 0)
    if attempts:
        counts = Counter(attempts)
        majority = max(counts, key=lambda a: (counts[a], -attempts.index(a)))
        consistency = counts[majority]
    return EvalItem(
        qid=qid,
        gold=gold,
        prediction=pred,
        attempt_answers=attempts,
        majority_answer=majority,
        consistency=consistency,
        task_kind="math",
        failed=failed,
    )


# Oracle, derived by hand:
#   i1 correct+hit, i2 wrong+hit, i3 correct+miss, i4 wrong+miss,
#   i5 correct+hit, i6 failed+miss
#   EM = 3/6, PM = 2/3, RM = 1/3, rm_majority = 1/4
ORACLE_ITEMS = [
    _item("i1", "4", ("4", "4", "5")),
    _item("i2", "5", ("4", "5", "5")),
    _item("i3", "4", ("5", "5", "6")),
    _item("i4", "6", ("5", "6", "6")),
    _item("i5", "4", ("4", "4", "4")),
    _item("i6", "<failed>", (), failed=True),
]


def test_metrics_oracle():
    m = compute_metrics(ORACLE_ITEMS)
    assert m.count == 6
    assert m.failed_count == 1
    assert m.em == pytest.approx(0.5)
    assert m.pm == pytest.approx(2 / 3)
    assert m.rm == pytest.approx(1 / 3)
    assert m.rm_majority == pytest.approx(1 / 4)
    assert (m.pm_numerator, m.pm_denominator) == (2, 3)
    assert (m.rm_numerator, m.rm_denominator) == (1, 3)


def test_metrics_normalize_before_comparing():
    items = [
        _item("t1", "The Eiffel Tower", ("eiffel tower",), gold="Eiffel Tower"),
    ]
    textual = EvalItem(
        qid="t1",
        gold="Eiffel Tower",
        prediction="The Eiffel Tower",
        attempt_answers=("eiffel tower",),
        majority_answer="eiffel tower",
        consistency=1,
        task_kind="textual",
    )
    m = compute_metrics([textual])
    assert m.em == 1.0
    assert m.pm == 1.0


def test_metrics_require_items_and_gold():
    with pytest.raises(PreconditionError):
        compute_metrics([])
    orphan = _item("x", "4", ("4",), gold="")
    with pytest.raises(PreconditionError):
        compute_metrics([orphan])


def test_empty_denominators_are_none():
    all_hit = [_item("a", "4", ("4",)), _item("b", "5", ("4",))]
    m = compute_metrics(all_hit)
    assert m.rm is None
    assert m.rm_denominator == 0
    all_right = [_item("a", "4", ("4",))]
    assert compute_metrics(all_right).rm_majority is None


def test_decomposition_identity_holds_on_oracle():
    m = decomposition_check(ORACLE_ITEMS)
    assert m.pm_numerator + m.rm_numerator == round(m.em * m.count)
    assert m.pm_denominator + m.rm_denominator == m.count


def test_decomposition_flags_unnormalized_attempts():
    dirty = EvalItem(
        qid="d1",
        gold="4",
        prediction="4",
        attempt_answers=("$4.00",),
        majority_answer="$4.00",
        consistency=1,
        task_kind="math",
    )
    with pytest.raises(ConsistencyCheckError) as exc:
        decomposition_check([dirty])
    assert exc.value.offending == ["d1"]


def test_decomposition_flags_majority_mismatch():
    bad_majority = EvalItem(
        qid="m1",
        gold="4",
        prediction="4",
        attempt_answers=("4", "4", "5"),
        majority_answer="5",
        consistency=1,
        task_kind="math",
    )
    with pytest.raises(ConsistencyCheckError):
        decomposition_check([bad_majority])
    bad_count = EvalItem(
        qid="m2",
        gold="4",
        prediction="4",
        attempt_answers=("4", "4", "5"),
        majority_answer="4",
        consistency=3,
        task_kind="math",
    )
    with pytest.raises(ConsistencyCheckError):
        decomposition_check([bad_count])


def test_decomposition_randomized_fixture_sweep():
    rng = random.Random(31)
    for _ in range(300):
        items = []
        for i in range(rng.randrange(1, 30)):
            attempts = tuple(rng.choice("456") for _ in range(rng.randrange(1, 6)))
            pred = rng.choice([rng.choice(attempts), rng.choice("456"), "7"])
            items.append(_item(f"q{i}", pred, attempts))
        m = decomposition_check(items)
        assert m.pm_numerator + m.rm_numerator == round(m.em * m.count)


def test_majority_prediction_never_scores_rm():
    # a voting baseline predicts one of its attempts, so when the gold is
    # absent from the attempts the answer cannot be right
    rng = random.Random(47)
    for _ in range(50):
        items = []
        for i in range(20):
            attempts = tuple(rng.choice("45678") for _ in range(5))
            item = _item(f"q{i}", "", attempts)
            items.append(
                EvalItem(
                    qid=item.qid,
                    gold="4",
                    prediction=item.majority_answer,
                    attempt_answers=item.attempt_answers,
                    majority_answer=item.majority_answer,
                    consistency=item.consistency,
                    task_kind="math",
                )
            )
        m = compute_metrics(items)
        assert m.rm_numerator == 0
        if m.rm_denominator:
            assert m.rm == 0.0


def test_pairwise_compare_contingency():
    a = [_item("1", "4", ("4",)), _item("2", "5", ("4",)), _item("3", "4", ("4",))]
    b = [_item("1", "4", ("4",)), _item("2", "4", ("4",)), _item("3", "5", ("4",))]
    cmp = pairwise_compare(a, b)
    assert cmp.count == 3
    assert cmp.both_correct == 1
    assert cmp.a_only == 1
    assert cmp.b_only == 1
    assert cmp.both_wrong == 0
    assert cmp.a_only_qids == ("3",)
    assert cmp.b_only_qids == ("2",)


def test_pairwise_compare_requires_same_questions():
    a = [_item("1", "4", ("4",))]
    b = [_item("2", "4", ("4",))]
    with pytest.raises(InputError):
        pairwise_compare(a, b)
    with pytest.raises(InputError):
        pairwise_compare(a + a, a + a)


# Bandwidth oracle for [1,2,2,3,3,3,4,4,5], derived by hand:
#   mean 3, sample variance 12/8 = 1.5, IQR = 4 - 2 = 2
#   h = 0.9 * min(sqrt(1.5), 2/1.34) * 9**(-1/5) = 0.7102967...
BANDWIDTH_VALUES = [1, 2, 2, 3, 3, 3, 4, 4, 5]
BANDWIDTH_EXPECTED = 0.9 * min(math.sqrt(1.5), 2 / 1.34) * 9 ** (-1 / 5)


def test_silverman_bandwidth_oracle():
    got = silverman_bandwidth(BANDWIDTH_VALUES)
    assert got == pytest.approx(BANDWIDTH_EXPECTED, abs=1e-12)
    assert got == pytest.approx(0.7102967, abs=1e-6)


def test_silverman_bandwidth_degenerate_floor():
    assert silverman_bandwidth([3, 3, 3]) == pytest.approx(0.1)
    assert silverman_bandwidth([7]) == pytest.approx(0.1)
    with pytest.raises(PreconditionError):
        silverman_bandwidth([])


def test_kde_integrates_to_one():
    rng = random.Random(5)
    samples = [
        BANDWIDTH_VALUES,
        [rng.gauss(0, 1) for _ in range(50)],
        [rng.gauss(10, 0.5) for _ in range(9)] + [rng.gauss(-10, 0.5) for _ in range(9)],
        [3, 3, 3, 3],
    ]
    for values in samples:
        table = kde_density(values)
        assert abs(table.integral() - 1.0) <= 0.01, values


def test_kde_two_clusters_are_bimodal():
    values = [0.0, 0.1, 0.2, 10.0, 10.1, 10.2]
    table = kde_density(values)
    assert table.mode_count() >= 2
    assert table.bimodal


def test_kde_single_cluster_is_unimodal():
    values = [4.9, 5.0, 5.0, 5.1, 5.2]
    table = kde_density(values)
    assert table.mode_count() == 1
    assert not table.bimodal


def test_kde_explicit_bandwidth_and_validation():
    table = kde_density([1.0, 2.0], bandwidth=0.5)
    assert table.bandwidth == 0.5
    with pytest.raises(PreconditionError):
        kde_density([])
    with pytest.raises(PreconditionError):
        kde_density([1.0], bandwidth=-1.0)
    with pytest.raises(PreconditionError):
        kde_density([1.0], grid_size=2)


def test_density_table_to_dict():
    table = kde_density([1.0, 2.0, 2.0, 3.0])
    d = table.to_dict()
    assert set(d) == {"grid", "density", "bandwidth", "modes", "integral"}
    assert len(d["grid"]) == len(d["density"]) == 256


def test_consistency_distribution():
    items = [_item("a", "4", ("4", "4", "5")), _item("b", "4", ("4", "5", "6"))]
    assert consistency_distribution(items) == {1: 1, 2: 1}


def test_items_from_records_round_trip():
    from psyche.backend import MockBackend
    from psyche.pipeline import PipelineConfig, run_pipeline
    from psyche.roles import Example, ExampleSet, Question, RuleSet
    from psyche.templates import TemplateLibrary

    backend = MockBackend(
        [
            ("id.attempts", ["Final answer: 4", "Final answer: 4", "Final answer: 5"]),
            ("superego.keypoints", ["1. check"]),
            ("ego.script", ["1. add"]),
            ("ego.execute", ["1. got 4"]),
            ("ego.answer", ["Final answer: 4"]),
        ]
    )
    record = run_pipeline(
        backend,
        TemplateLibrary.default(),
        Question(qid="q", text="What is 2 + 2?", gold="4", task_kind="math"),
        ExampleSet(examples=(Example(question="1+1?", answer="2"),)),
        PipelineConfig(l=3),
        RuleSet(rules=("r",)),
    )
    items = items_from_records([record])
    assert items[0].qid == "q"
    assert items[0].correct
    assert items[0].consistency == 2
    m = decomposition_check(items)
    assert m.em == 1.0
