import itertools
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gano.metrics import (
    TABLE_COMBOS,
    BoxError,
    ComboSpec,
    EvalRecord,
    GroundTruth,
    PredRecord,
    average_precision,
    iou,
    is_correct,
    precision_recall,
    top1_accuracy,
)

BOX = (0.5, 0.5, 0.4, 0.4)
FAR = (0.1, 0.1, 0.05, 0.05)
BOX_ONLY = ComboSpec.of("box")


def pred(clip, q, box, conf, noun=0, verb=0, ttc=1.0):
    return PredRecord(clip, q, box, noun, verb, ttc, conf)


def brute_force_ap(flags, n_gt):
    """Area under the PR curve by enumerating every recall step and taking the
    best precision at any rank reaching at least that recall."""
    points = []
    hits = 0
    for k, f in enumerate(flags, 1):
        hits += f
        points.append((Fraction(hits, n_gt), Fraction(hits, k)))
    area, prev = Fraction(0), Fraction(0)
    for r in sorted({r for r, _ in points}):
        if r == 0:
            continue
        area += (r - prev) * max(p for rr, p in points if rr >= r)
        prev = r
    return area


def test_table_combo_order():
    assert [c.name for c in TABLE_COMBOS] == [
        "box", "box+noun", "box+noun+ttc", "box+noun+verb", "box+noun+verb+ttc", "box+ttc", "box+verb", "box+verb+ttc"
    ]


def test_combo_requires_box():
    with pytest.raises(ValueError):
        ComboSpec.of("noun")
    with pytest.raises(ValueError):
        ComboSpec.of("box", "colour")


def test_iou_examples():
    assert iou(BOX, BOX) == pytest.approx(1.0)
    assert iou(BOX, FAR) == 0.0
    assert iou(BOX, (0.5, 0.5, 0.4, 0.2)) == pytest.approx(0.5)
    with pytest.raises(BoxError):
        iou(BOX, (0.5, 0.5, 0.0, 0.1))


@pytest.mark.parametrize(
    "box, ttc, combo, expected",
    [
        ((0.5, 0.5, 0.4, 0.2), 1.0, ComboSpec.of("box"), True),  # IoU exactly 0.5
        ((0.5, 0.5, 0.4, 0.19), 1.0, ComboSpec.of("box"), False),
        ((0.5, 0.5, 0.4, 0.3), 1.25, ComboSpec.of("box", "ttc"), True),  # error exactly 0.25
        ((0.5, 0.5, 0.4, 0.3), 1.3, ComboSpec.of("box", "ttc"), False),
        ((0.5, 0.5, 0.4, 0.3), 1.3, ComboSpec.of("box"), True),
    ],
)
def test_correctness_boundaries(box, ttc, combo, expected):
    rec = EvalRecord(pred("c", 0, box, 1.0, ttc=ttc), GroundTruth(BOX, 0, 0, 1.0))
    assert is_correct(rec, combo) is expected


def test_label_mismatch():
    rec = EvalRecord(pred("c", 0, BOX, 1.0, noun=1), GroundTruth(BOX, 0, 0, 1.0))
    assert is_correct(rec, ComboSpec.of("box", "verb"))
    assert not is_correct(rec, ComboSpec.of("box", "noun"))


def test_two_predictions_one_truth():
    truths = {"c": [GroundTruth(BOX, 0, 0, 1.0)]}
    assert average_precision([pred("c", 0, BOX, 0.9), pred("c", 1, FAR, 0.1)], truths, BOX_ONLY).ap == 1.0
    assert average_precision([pred("c", 0, FAR, 0.9), pred("c", 1, BOX, 0.1)], truths, BOX_ONLY).ap == 0.5


def test_no_truths_and_no_predictions():
    assert average_precision([pred("c", 0, BOX, 1.0)], {}, BOX_ONLY).ap is None
    r = average_precision([], {"c": [GroundTruth(BOX, 0, 0, 1.0)]}, BOX_ONLY)
    assert r.ap == 0.0 and r.tp == 0


def test_duplicate_detection_is_false_positive():
    truths = {"c": [GroundTruth(BOX, 0, 0, 1.0)]}
    r = average_precision([pred("c", 0, BOX, 0.9), pred("c", 1, BOX, 0.8)], truths, BOX_ONLY)
    assert (r.tp, r.fp, r.ap) == (1, 1, 1.0)


def test_exhaustive_pattern_sweep():
    """Every correctness pattern up to 5 predictions and 3 truths, with
    predictions spread over clips in every possible way."""
    for n_gt in range(1, 4):
        for n_pred in range(6):
            for clips in itertools.product(range(n_gt), repeat=n_pred):
                for pattern in itertools.product((False, True), repeat=n_pred):
                    truths = {f"c{j}": [GroundTruth(BOX, 0, 0, 1.0)] for j in range(n_gt)}
                    preds = [
                        pred(f"c{c}", i, BOX if good else FAR, 1.0 - i / 10) for i, (c, good) in enumerate(zip(clips, pattern))
                    ]
                    # a correct prediction is a TP only if its clip's truth is still unmatched
                    seen, flags = set(), []
                    for c, good in zip(clips, pattern):
                        flags.append(good and c not in seen)
                        if good:
                            seen.add(c)
                    r = average_precision(preds, truths, BOX_ONLY)
                    assert r.flags == flags
                    assert r.ap == float(brute_force_ap(flags, n_gt))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.booleans(), max_size=12), st.integers(1, 6))
def test_ap_bounded_and_matches_brute_force(flags, extra):
    n_gt = max(sum(flags), 1) + extra - 1
    truths = {f"c{i}": [GroundTruth(BOX, 0, 0, 1.0)] for i in range(n_gt)}
    # the k-th correct prediction lands on the k-th clip
    clips = [f"c{sum(flags[:i])}" if f else "c0" for i, f in enumerate(flags)]
    preds = [pred(c, i, BOX if f else FAR, 1.0 - i / 100) for i, (c, f) in enumerate(zip(clips, flags))]
    r = average_precision(preds, truths, BOX_ONLY)
    assert 0.0 <= r.ap <= 1.0
    assert r.ap == float(brute_force_ap(flags, n_gt))


def test_confidence_ties_broken_by_clip_then_query():
    truths = {"a": [GroundTruth(BOX, 0, 0, 1.0)], "b": [GroundTruth(BOX, 0, 0, 1.0)]}
    preds = [pred("b", 0, BOX, 0.5), pred("a", 1, FAR, 0.5), pred("a", 0, BOX, 0.5)]
    assert average_precision(preds, truths, BOX_ONLY).flags == [True, False, True]


def test_top1_accuracy():
    truths = {"a": [GroundTruth(BOX, 2, 1, 1.0)], "b": [GroundTruth(BOX, 0, 0, 1.0)]}
    preds = [pred("a", 0, BOX, 0.9, noun=2, verb=0), pred("b", 0, FAR, 0.9, noun=0, verb=0)]
    assert top1_accuracy(preds, truths, "noun") == 0.5
    assert top1_accuracy(preds, truths, "verb") == 0.0
    with pytest.raises(ValueError):
        top1_accuracy(preds, truths, "ttc")
    with pytest.raises(ValueError):
        top1_accuracy(preds, {}, "noun")


def test_precision_recall_curve():
    recall, precision = precision_recall([True, False, True], 4)
    assert list(recall) == [0.25, 0.25, 0.5]
    assert list(precision) == pytest.approx([1.0, 0.5, 2 / 3])
