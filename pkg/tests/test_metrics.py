import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mafbench.metrics import UndefinedMetricError, auc, auc_pairwise


class TestAuc:
    def test_perfect(self):
        assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_inverted(self):
        assert auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0

    def test_all_tied(self):
        assert auc([0.5] * 6, [0, 1, 0, 1, 0, 1]) == 0.5

    def test_hand_computed(self):
        # positives 0.4, 0.8 vs negatives 0.4, 0.1: wins 1 + 2, one tie -> (3 + 0.5) / 4
        assert auc([0.4, 0.8, 0.4, 0.1], [1, 1, 0, 0]) == pytest.approx(0.875)

    def test_single_class(self):
        with pytest.raises(UndefinedMetricError):
            auc([0.1, 0.2], [1, 1])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            auc([0.1, 0.2], [1])

    def test_bad_labels(self):
        with pytest.raises(ValueError):
            auc([0.1, 0.2], [0, 2])

    def test_pairwise_oracle_with_ties(self, rng):
        for _ in range(200):
            n = int(rng.integers(2, 120))
            s = rng.integers(0, 6, n).astype(float)
            y = rng.integers(0, 2, n)
            if y.min() == y.max():
                continue
            assert auc(s, y) == auc_pairwise(s, y)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 1)), min_size=2, max_size=60))
    def test_label_flip_complement(self, pairs):
        s = np.array([p[0] for p in pairs], dtype=float)
        y = np.array([p[1] for p in pairs])
        if y.min() == y.max():
            return
        assert auc(s, y) + auc(s, 1 - y) == 1.0

    def test_monotone_invariance(self, rng):
        s = rng.normal(size=80)
        y = np.r_[np.zeros(40, int), np.ones(40, int)]
        assert auc(s, y) == auc(np.exp(3 * s) + 2, y)
