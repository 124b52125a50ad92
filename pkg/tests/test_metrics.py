from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from diffseg.errors import ShapeError, UndefinedMetricsError
from diffseg.metrics import ConfusionMatrix, accumulate, append_csv_row, evaluate_masks, report


def tally_oracle(pred, truth, K, ignore):
    counts = [[0] * K for _ in range(K)]
    ignored = 0
    for p, g in zip(pred.ravel().tolist(), truth.ravel().tolist()):
        if g == ignore:
            ignored += 1
        else:
            counts[g][p] += 1
    return counts, ignored


def metrics_oracle(counts):
    """Exact rational metrics from a tally; classes with no TP/FP/FN are skipped."""
    K = len(counts)
    total = sum(map(sum, counts))
    tp = [counts[c][c] for c in range(K)]
    fp = [sum(counts[r][c] for r in range(K)) - tp[c] for c in range(K)]
    fn = [sum(counts[c]) - tp[c] for c in range(K)]
    present = [c for c in range(K) if tp[c] + fp[c] + fn[c] > 0]
    iou = {c: Fraction(tp[c], tp[c] + fp[c] + fn[c]) for c in present}
    dice = {c: Fraction(2 * tp[c], 2 * tp[c] + fp[c] + fn[c]) for c in present}
    f1 = {}
    for c in present:
        prec = Fraction(tp[c], tp[c] + fp[c]) if tp[c] + fp[c] else Fraction(0)
        rec = Fraction(tp[c], tp[c] + fn[c]) if tp[c] + fn[c] else Fraction(0)
        f1[c] = 2 * prec * rec / (prec + rec) if prec + rec else Fraction(0)
    n = len(present)
    return {
        "accuracy": Fraction(sum(tp), total),
        "mIoU": sum(iou.values()) / n,
        "mean_dice": sum(dice.values()) / n,
        "f1": sum(f1.values()) / n,
    }


def test_hand_case():
    r = report(ConfusionMatrix(2, np.array([[3, 1], [2, 4]])))
    assert r.accuracy == 0.7
    assert r.per_class["iou"] == [0.5, 4 / 7]
    assert r.mIoU == pytest.approx((0.5 + 4 / 7) / 2, abs=1e-15)


def test_perfect_and_disjoint():
    r = report(ConfusionMatrix(3, np.diag([5, 2, 7])))
    assert r.accuracy == r.mIoU == r.mean_dice == r.f1 == 1.0
    d = report(ConfusionMatrix(2, np.array([[0, 2], [2, 0]])))
    assert d.per_class["dice"] == [0.0, 0.0] and d.per_class["iou"] == [0.0, 0.0]


def test_accumulate_basics():
    truth = np.array([[0, 1], [2, 2]])
    cm = accumulate(ConfusionMatrix(3), truth, truth)
    assert np.array_equal(cm.counts, np.diag([1, 1, 2]))
    ign = accumulate(ConfusionMatrix(3), np.zeros((4, 4), int), np.full((4, 4), 3))
    assert ign.counts.sum() == 0 and ign.ignored_pixels == 16
    with pytest.raises(ShapeError):
        accumulate(ConfusionMatrix(3), np.zeros((2, 2), int), np.zeros((2, 3), int))
    with pytest.raises(UndefinedMetricsError):
        report(ign)
    with pytest.raises(ValueError):
        accumulate(ConfusionMatrix(3), np.full((2, 2), 3), truth)


@pytest.mark.parametrize("seed", range(25))
def test_random_pairs_match_oracle(seed):
    g = np.random.default_rng(seed)
    K = 4
    truth = g.integers(0, K + 1, (8, 8))
    pred = g.integers(0, K, (8, 8))
    cm = accumulate(ConfusionMatrix(K), pred, truth)
    counts, ignored = tally_oracle(pred, truth, K, K)
    assert cm.counts.tolist() == counts and cm.ignored_pixels == ignored
    assert cm.total == 64
    r = report(cm)
    for key, value in metrics_oracle(counts).items():
        assert getattr(r, key) == pytest.approx(float(value), abs=1e-12)
    for i, d in zip(r.per_class["iou"], r.per_class["dice"]):
        assert abs(d - 2 * i / (1 + i)) < 1e-12
    # F1 per class equals Dice per class, so the macro means coincide
    assert r.f1 == pytest.approx(r.mean_dice, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.int64, (6, 6), elements=st.integers(0, 3)), arrays(np.int64, (6, 6), elements=st.integers(0, 2)),
       st.permutations(range(3)))
def test_permutation_invariance(truth, pred, perm):
    perm = np.array(perm)
    base = evaluate_masks([pred], [truth], 3)  # 3 is the ignore index
    relabel = np.append(perm, 3)
    moved = evaluate_masks([perm[pred]], [relabel[truth]], 3) if (truth != 3).any() else None
    if moved is not None:
        for key in ("accuracy", "mean_dice", "mIoU", "f1"):
            assert getattr(moved, key) == pytest.approx(getattr(base, key), abs=1e-12)


def test_order_independent(rng):
    pairs = [(rng.integers(0, 3, (5, 5)), rng.integers(0, 4, (5, 5))) for _ in range(6)]
    a = evaluate_masks([p for p, _ in pairs], [t for _, t in pairs], 3)
    parts = [accumulate(ConfusionMatrix(3), p, t) for p, t in pairs[::-1]]
    merged = parts[0] + parts[1] + parts[2] + (parts[3] + parts[4] + parts[5])
    assert a.to_dict() == report(merged).to_dict()


def test_absent_classes_excluded():
    # class 2 never appears in truth or prediction
    r = report(ConfusionMatrix(3, np.array([[2, 0, 0], [0, 2, 0], [0, 0, 0]])))
    assert r.mIoU == 1.0 and r.per_class["present"] == [True, True, False]
    ex = report(ConfusionMatrix(3, np.array([[2, 1, 0], [0, 2, 0], [0, 0, 1]])), exclude_classes=[2])
    assert ex.per_class["present"][2] is False


def test_f1_averaging_modes():
    cm = ConfusionMatrix(2, np.array([[8, 2], [1, 1]]))
    micro = report(cm, "micro").f1
    assert micro == pytest.approx(report(cm).accuracy)
    weighted = report(cm, "weighted").f1
    f1c = [2 * 8 / (2 * 8 + 1 + 2), 2 * 1 / (2 + 2 + 1)]
    assert weighted == pytest.approx((f1c[0] * 10 + f1c[1] * 2) / 12)
    with pytest.raises(ValueError):
        report(cm, "harmonic")


def test_json_and_csv(tmp_path):
    r = report(ConfusionMatrix(2, np.array([[3, 1], [2, 4]])))
    path = r.to_json(tmp_path / "m.json")
    assert '"accuracy": 0.7' in path.read_text()
    csv = tmp_path / "rows.csv"
    append_csv_row(csv, {"t": 10, "accuracy": 0.5})
    append_csv_row(csv, {"t": 50, "accuracy": 0.6})
    assert csv.read_text().splitlines() == ["t,accuracy", "10,0.5", "50,0.6"]
