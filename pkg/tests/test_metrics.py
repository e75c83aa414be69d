import numpy as np
import pytest

from bagfuse.errors import ContractError, LabelError
from bagfuse.metrics import accuracy, confusion, weighted_f1, weighted_f1_from_confusion


class TestAccuracy:
    def test_all_correct(self):
        assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0

    def test_nine_of_ten(self):
        preds = [0] * 9 + [1]
        assert accuracy(preds, [0] * 10) == pytest.approx(0.9)

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(0)
        p = rng.integers(0, 5, size=200)
        t = rng.integers(0, 5, size=200)
        hits = sum(1 for a, b in zip(p, t) if a == b)
        assert accuracy(p, t) == hits / 200

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            accuracy([1, 2], [1])

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            accuracy([], [])


class TestWeightedF1:
    def test_perfect(self):
        assert weighted_f1([0, 1, 2, 1], [0, 1, 2, 1], 3) == 1.0

    def test_hand_confusion_case(self):
        # targets (0,0,1,1), predictions all 0:
        # class0: P=0.5, R=1 -> F1=2/3; class1: F1=0; weights 0.5/0.5 -> 1/3
        assert weighted_f1([0, 0, 0, 0], [0, 0, 1, 1], 2) == pytest.approx(1 / 3)

    def test_absent_class_has_no_weight(self):
        # class 2 never appears in targets; its F1 contributes nothing
        a = weighted_f1([0, 1, 0, 1], [0, 1, 1, 0], 3)
        b = weighted_f1([0, 1, 0, 1], [0, 1, 1, 0], 2)
        assert a == pytest.approx(b)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        p = rng.integers(0, 4, size=50)
        t = rng.integers(0, 4, size=50)
        perm = rng.permutation(50)
        assert weighted_f1(p, t, 4) == pytest.approx(weighted_f1(p[perm], t[perm], 4))

    def test_range(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            p = rng.integers(0, 3, size=30)
            t = rng.integers(0, 3, size=30)
            assert 0.0 <= weighted_f1(p, t, 3) <= 1.0


class TestConfusion:
    def test_all_correct_is_diagonal(self):
        mat = confusion([0, 1, 2, 2], [0, 1, 2, 2], 3)
        assert np.array_equal(mat, np.diag([1, 1, 2]))

    def test_row_sums_are_supports(self):
        rng = np.random.default_rng(5)
        p = rng.integers(0, 4, size=100)
        t = rng.integers(0, 4, size=100)
        mat = confusion(p, t, 4)
        assert np.array_equal(mat.sum(axis=1), np.bincount(t, minlength=4))
        assert mat.sum() == 100

    def test_f1_from_matrix_consistent(self):
        rng = np.random.default_rng(6)
        p = rng.integers(0, 5, size=120)
        t = rng.integers(0, 5, size=120)
        direct = weighted_f1(p, t, 5)
        via_matrix = weighted_f1_from_confusion(confusion(p, t, 5))
        assert abs(direct - via_matrix) < 1e-12

    def test_out_of_range_label(self):
        with pytest.raises(LabelError):
            confusion([0, 3], [0, 1], 3)

    def test_accuracy_equals_trace_over_total(self):
        rng = np.random.default_rng(7)
        p = rng.integers(0, 3, size=60)
        t = rng.integers(0, 3, size=60)
        mat = confusion(p, t, 3)
        assert accuracy(p, t) == np.trace(mat) / mat.sum()


def test_balanced_fraction_q_gives_accuracy_q():
    # 4 classes x 10 samples; exactly q of each class predicted correctly,
    # errors spread uniformly over the other classes
    k, per_class, correct = 4, 10, 7
    targets, preds = [], []
    for cls in range(k):
        targets += [cls] * per_class
        preds += [cls] * correct
        wrong = [c for c in range(k) if c != cls]
        preds += [wrong[i % (k - 1)] for i in range(per_class - correct)]
    assert accuracy(preds, targets) == correct / per_class
