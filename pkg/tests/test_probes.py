import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from visprobe.probes import (
    ProbeError, ProbeModel, attraction_coefficient, binary_auc, confusion_matrix,
    cosine_distance, load_probe, logistic_loss_and_grad, ovo_auc, predict_labels,
    predict_scores, random_oversample, save_probe, train_logistic_probe,
)


def pair_auc(scores, labels):
    """O(n^2) oracle: fraction of (pos, neg) pairs ranked correctly, ties half."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return total / (len(pos) * len(neg))


def ovo_oracle(scores, labels, classes):
    values = []
    for i, j in itertools.combinations(range(len(classes)), 2):
        sel = [k for k, y in enumerate(labels) if y in (classes[i], classes[j])]
        if not any(labels[k] == classes[i] for k in sel) or not any(labels[k] == classes[j] for k in sel):
            continue
        a = pair_auc([scores[k][i] for k in sel], [labels[k] == classes[i] for k in sel])
        b = pair_auc([scores[k][j] for k in sel], [labels[k] == classes[j] for k in sel])
        values.append((a + b) / 2)
    return sum(values) / len(values)


class TestOversample:
    def test_counts(self):
        x = np.arange(4)[:, None]
        xo, yo = random_oversample(x, [0, 0, 0, 1])
        assert np.bincount(yo).tolist() == [3, 3]
        assert (xo[yo == 1] == 3).all()

    def test_balanced_identity(self):
        x = np.arange(4)[:, None]
        xo, yo = random_oversample(x, [0, 1, 0, 1])
        assert np.array_equal(xo, x) and yo.tolist() == [0, 1, 0, 1]

    def test_three_classes_membership(self):
        y = np.array([0] * 5 + [1] * 2 + [2])
        x = np.arange(8)[:, None]
        xo, yo = random_oversample(x, y, seed=4)
        assert np.bincount(yo).tolist() == [5, 5, 5]
        for cls in range(3):
            assert set(xo[yo == cls, 0]) <= set(np.flatnonzero(y == cls))

    def test_single_class(self):
        with pytest.raises(ProbeError):
            random_oversample(np.zeros((3, 1)), [1, 1, 1])


class TestGradient:
    @pytest.mark.parametrize("n_classes", [2, 3, 5])
    def test_finite_differences(self, n_classes):
        rng = np.random.default_rng(n_classes)
        for _ in range(5):
            n, d = 15, 4
            x = rng.normal(size=(n, d))
            y = rng.integers(0, n_classes, n)
            rows = 1 if n_classes == 2 else n_classes
            theta = rng.normal(size=rows * d + rows)
            _, g = logistic_loss_and_grad(theta, x, y, n_classes, 0.7)
            num = np.empty_like(theta)
            for i in range(len(theta)):
                e = np.zeros_like(theta)
                e[i] = 1e-5
                num[i] = (logistic_loss_and_grad(theta + e, x, y, n_classes, 0.7)[0]
                          - logistic_loss_and_grad(theta - e, x, y, n_classes, 0.7)[0]) / 2e-5
            assert np.max(np.abs(num - g) / np.maximum(np.abs(g), 1e-3)) <= 1e-5


class TestTraining:
    def test_separable_1d(self):
        x = np.concatenate([np.linspace(-3, -0.1, 20), np.linspace(0.1, 3, 20)])[:, None]
        y = (x[:, 0] > 0).astype(int)
        m = train_logistic_probe(x, y, C=100.0)
        assert (predict_labels(m, x) == y).all()
        assert binary_auc(predict_scores(m, x)[:, 1], y) == 1.0

    def test_noise_labels_near_chance(self):
        aucs = []
        for seed in range(20):
            rng = np.random.default_rng(seed)
            x = rng.normal(size=(400, 10))
            y = rng.integers(0, 2, 400)
            m = train_logistic_probe(x[:200], y[:200], seed=seed)
            aucs.append(binary_auc(predict_scores(m, x[200:])[:, 1], y[200:]))
        assert 0.4 <= np.mean(aucs) <= 0.6
        assert all(0.3 <= a <= 0.7 for a in aucs)

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=(60, 5)), rng.integers(0, 3, 60)
        a = train_logistic_probe(x, y, seed=2, oversample=True)
        b = train_logistic_probe(x, y, seed=2, oversample=True)
        assert np.array_equal(a.weights, b.weights) and np.array_equal(a.bias, b.bias)

    def test_c_monotone(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(80, 6))
        y = (x @ rng.normal(size=6) + rng.normal(0, 0.5, 80) > 0).astype(int)
        norms = [np.linalg.norm(train_logistic_probe(x, y, C=c, tol=1e-10).weights)
                 for c in (10.0, 1.0, 0.1, 0.01)]
        assert all(b <= a + 1e-9 for a, b in zip(norms, norms[1:]))

    def test_loss_history_descends(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(100, 8))
        y = rng.integers(0, 4, 100)
        m = train_logistic_probe(x, y)
        assert m.converged
        assert all(b <= a for a, b in zip(m.loss_history, m.loss_history[1:]))

    def test_errors(self):
        with pytest.raises(ProbeError):
            train_logistic_probe(np.zeros((3, 2)), [0, 0, 0])
        with pytest.raises(ProbeError):
            train_logistic_probe(np.array([[np.nan], [1.0]]), [0, 1])
        with pytest.raises(ProbeError):
            train_logistic_probe(np.zeros((2, 1)), [0, 1], C=0)


class TestPrediction:
    def _model(self, w, b, classes=(0, 1)):
        return ProbeModel(np.atleast_2d(w).astype(float), np.atleast_1d(b).astype(float),
                          np.array(classes), 1.0, True, 0)

    def test_zero_model(self):
        p = predict_scores(self._model([0.0, 0.0], 0.0), np.random.default_rng(0).normal(size=(5, 2)))
        assert np.allclose(p, 0.5)

    def test_saturation(self):
        p = predict_scores(self._model([50.0], 0.0), [[1.0]])
        assert p[0, 1] >= 1 - 1e-6

    def test_rows_sum(self):
        rng = np.random.default_rng(1)
        m = self._model(rng.normal(size=(4, 3)), rng.normal(size=4), (0, 1, 2, 3))
        assert np.allclose(predict_scores(m, rng.normal(size=(10, 3))).sum(1), 1.0, atol=1e-12)
        with pytest.raises(ProbeError):
            predict_scores(m, np.zeros((1, 2)))

    def test_save_load(self, tmp_path):
        rng = np.random.default_rng(2)
        m = train_logistic_probe(rng.normal(size=(30, 3)), rng.integers(0, 3, 30), task="SL")
        save_probe(m, tmp_path / "m.csv")
        back = load_probe(tmp_path / "m.csv")
        assert np.array_equal(back.weights, m.weights) and np.array_equal(back.bias, m.bias)
        assert back.classes.tolist() == m.classes.tolist() and back.task == "SL"


class TestAuc:
    def test_examples(self):
        assert binary_auc([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0]) == 0.75
        assert binary_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
        assert binary_auc([0.3] * 6, [0, 1] * 3) == 0.5
        with pytest.raises(ProbeError):
            binary_auc([0.1, 0.2], [1, 1])

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 8), st.booleans()), min_size=2, max_size=60))
    def test_matches_oracle_with_ties(self, rows):
        scores, labels = [r[0] for r in rows], [r[1] for r in rows]
        if all(labels) or not any(labels):
            return
        assert abs(binary_auc(scores, labels) - pair_auc(scores, labels)) < 1e-9

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_monotone_invariance(self, seed):
        rng = np.random.default_rng(seed)
        s, y = rng.normal(size=40), rng.integers(0, 2, 40)
        y[:2] = [0, 1]
        assert binary_auc(s, y) == binary_auc(np.exp(3 * s) + 1, y)

    def test_ovo(self):
        y = np.array([0, 1, 2, 0, 1, 2])
        assert ovo_auc(np.eye(3)[y], y) == 1.0
        assert ovo_auc(np.full((6, 3), 1 / 3), y) == 0.5
        rng = np.random.default_rng(5)
        s = rng.random((12, 3))
        y = rng.integers(0, 3, 12)
        y[:3] = [0, 1, 2]
        assert abs(ovo_auc(s, y) - ovo_oracle(s.tolist(), y.tolist(), [0, 1, 2])) < 1e-12

    def test_ovo_skips_missing(self):
        s = np.random.default_rng(0).random((4, 3))
        assert abs(ovo_auc(s, [0, 0, 1, 1]) - ovo_oracle(s.tolist(), [0, 0, 1, 1], [0, 1, 2])) < 1e-12
        with pytest.raises(ProbeError):
            ovo_auc(s, [0, 0, 0, 0])


class TestMisc:
    def test_cosine(self):
        assert cosine_distance([1, 2], [1, 2]) < 1e-12
        assert abs(cosine_distance([1, 0], [0, 3]) - 1) < 1e-12
        assert abs(cosine_distance([1, 0], [1, 1]) - (1 - 1 / math.sqrt(2))) < 1e-12
        assert abs(cosine_distance([1, 0], [1, 1]) - 0.29289) < 1e-5
        with pytest.raises(ProbeError):
            cosine_distance([0, 0], [1, 0])

    def test_confusion(self):
        assert np.array_equal(confusion_matrix([0, 1, 2], [0, 1, 2], 3), 100 * np.eye(3))
        m = confusion_matrix([1, 1, 1, 1], [0, 1, 2, 0], 3)
        assert (m[:, [0, 2]] == 0).all() and (m[:, 1] == 100).all()
        rng = np.random.default_rng(0)
        m = confusion_matrix(rng.integers(0, 4, 50), np.r_[np.arange(4), rng.integers(0, 4, 46)], 4)
        assert np.allclose(m.sum(1), 100, atol=1e-9)

    def test_attraction_examples(self):
        assert abs(attraction_coefficient([0.9, 0.8, 0.7]) - 10.0) < 1e-12
        assert attraction_coefficient([0.6] * 5) == 0.0
        assert attraction_coefficient([0.5, 0.6, 0.7]) < 0
        assert abs(attraction_coefficient([0.9, float("nan"), 0.7]) - 10.0) < 1e-12
        with pytest.raises(ProbeError):
            attraction_coefficient([0.5, float("nan")])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=2, max_size=12), st.floats(-1, 1), st.floats(0.1, 3))
    def test_attraction_linear(self, series, shift, scale):
        a = np.array(series)
        base = attraction_coefficient(a)
        assert abs(attraction_coefficient(a + shift) - base) < 1e-9
        assert abs(attraction_coefficient(scale * a) - scale * base) < 1e-9
