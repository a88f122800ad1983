import math

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from nbnlkit.core import InvalidInputError, InvalidParameterError
from nbnlkit.ml3 import (class_scores, grad_phi, loss_gradient, phi,
                         softmax_loss)
from nbnlkit.stoml3 import fresh_terms

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
qs = st.sampled_from([1.0, 1.5, 2.0, 3.0, 7.0, math.inf])


def phi_oracle(z, q):
    pos = [mpmath.mpf(max(0.0, float(v))) for v in z]
    if math.isinf(q):
        return float(max(pos))
    return float(sum(p ** q for p in pos) ** (mpmath.mpf(1) / q))


def loss_oracle(W, x, y, q):
    """Naive formula evaluated in 50-digit arithmetic."""
    f = [mpmath.mpf(phi_oracle(W[:, :, r].T @ x, q)) for r in range(W.shape[2])]
    return float(mpmath.log(1 + sum(mpmath.exp(f[r] - f[y]) for r in range(len(f)) if r != y)))


def fd_gradient(W, x, y, q, h=1e-6):
    G = np.zeros_like(W)
    for idx in np.ndindex(W.shape):
        Wp, Wm = W.copy(), W.copy()
        Wp[idx] += h
        Wm[idx] -= h
        G[idx] = (softmax_loss(Wp, x, y, q) - softmax_loss(Wm, x, y, q)) / (2 * h)
    return G


mpmath.mp.dps = 50


class TestPhi:
    def test_all_negative(self):
        for q in (1, 2, 3.5, math.inf):
            assert phi(np.array([-1.0, -2.0]), q) == 0.0

    def test_three_four_five(self):
        assert phi(np.array([3.0, 4.0]), 2) == pytest.approx(5.0, abs=1e-15)

    def test_inf_is_max(self):
        assert phi(np.array([1.0, 5.0, 2.0]), math.inf) == 5.0

    def test_bad_q(self):
        with pytest.raises(InvalidParameterError):
            phi(np.array([1.0]), 0.5)
        with pytest.raises(InvalidParameterError):
            grad_phi(np.array([1.0]), 0.9)

    def test_huge_finite_q_uses_max(self):
        assert phi(np.array([2.0, 3.0]), 1e7) == 3.0

    @given(arrays(np.float64, st.integers(1, 6), elements=finite), qs)
    def test_matches_oracle(self, z, q):
        assert phi(z, q) == pytest.approx(phi_oracle(z, q), rel=1e-12, abs=1e-300)

    @given(arrays(np.float64, st.integers(1, 6), elements=finite), qs, st.floats(0, 20))
    def test_nonnegative_and_homogeneous(self, z, q, a):
        v = phi(z, q)
        assert v >= 0
        assert (v == 0) == bool(np.all(z <= 0))
        assert phi(a * z, q) == pytest.approx(a * v, rel=1e-12, abs=1e-12)

    @given(arrays(np.float64, st.integers(1, 6), elements=finite),
           st.floats(1, 10), st.floats(1, 10))
    def test_norm_monotone_in_q(self, z, q1, q2):
        lo, hi = sorted((q1, q2))
        assert phi(z, hi) <= phi(z, lo) * (1 + 1e-12) + 1e-12
        assert phi(z, math.inf) <= phi(z, lo) * (1 + 1e-12) + 1e-12


class TestGradPhi:
    def test_examples(self):
        np.testing.assert_allclose(grad_phi(np.array([3.0, 4.0]), 2), [0.6, 0.8], atol=1e-15)
        np.testing.assert_array_equal(grad_phi(np.array([-1.0, -2.0]), 2), [0.0, 0.0])
        np.testing.assert_array_equal(grad_phi(np.array([5.0, 5.0]), math.inf), [1.0, 0.0])

    def test_q_one_is_indicator(self):
        np.testing.assert_array_equal(grad_phi(np.array([0.5, -1.0, 0.0, 2.0]), 1), [1, 0, 0, 1])

    def test_inf_all_nonpositive_is_zero(self):
        np.testing.assert_array_equal(grad_phi(np.array([-1.0, 0.0]), math.inf), [0.0, 0.0])

    @settings(max_examples=200)
    @given(st.lists(st.floats(0.05, 10), min_size=1, max_size=6, unique=True),
           st.sampled_from([1.5, 2.0, 3.0, math.inf]))
    def test_euler_identity(self, zs, q):
        z = np.array(zs)
        assert np.dot(grad_phi(z, q), z) == pytest.approx(phi(z, q), rel=1e-12)

    @settings(max_examples=100)
    @given(st.lists(st.floats(-3, 3).filter(lambda v: abs(v) > 0.05), min_size=1, max_size=5),
           st.sampled_from([1.5, 2.0, 3.0]))
    def test_matches_finite_differences(self, zs, q):
        z = np.array(zs)
        assume(np.any(z > 0))
        h = 1e-7
        fd = [(phi(z + h * e, q) - phi(z - h * e, q)) / (2 * h) for e in np.eye(len(z))]
        np.testing.assert_allclose(grad_phi(z, q), fd, rtol=1e-5, atol=1e-6)


class TestClassScores:
    def test_zero_prototypes(self, rng):
        assert np.array_equal(class_scores(np.zeros((3, 2, 4)), rng.normal(size=3), 2), np.zeros(4))

    def test_identity_example(self):
        W = np.zeros((2, 2, 2))
        W[:, :, 0] = np.eye(2)
        W[:, :, 1] = -np.eye(2)
        np.testing.assert_allclose(class_scores(W, np.array([3.0, 4.0]), 2), [5.0, 0.0])

    def test_compose_oracle(self, rng):
        for q in (1.5, 2.0, math.inf):
            W = rng.normal(size=(5, 3, 4))
            x = rng.normal(size=5)
            expected = [phi_oracle([sum(W[j, i, y] * x[j] for j in range(5)) for i in range(3)], q)
                        for y in range(4)]
            np.testing.assert_allclose(class_scores(W, x, q), expected, rtol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInputError):
            class_scores(np.zeros((3, 2, 2)), np.zeros(4), 2)


class TestSoftmaxLoss:
    def test_zero_prototypes_give_log_c(self, rng):
        for c in (2, 3, 7):
            assert softmax_loss(np.zeros((4, 2, c)), rng.normal(size=4), 1, 2) == pytest.approx(math.log(c), abs=1e-15)

    def test_large_margin(self):
        W = np.zeros((1, 1, 3))
        W[0, 0, 1] = 50.0
        assert softmax_loss(W, np.array([1.0]), 1, 2) <= 1e-20

    def test_label_out_of_range(self):
        with pytest.raises(InvalidInputError):
            softmax_loss(np.zeros((2, 1, 3)), np.zeros(2), 3, 2)
        with pytest.raises(InvalidInputError):
            loss_gradient(np.zeros((2, 1, 3)), np.zeros(2), -1, 2)

    def test_matches_extended_precision(self, rng):
        for _ in range(30):
            d, k, c = rng.integers(1, 6, size=3)
            W = rng.normal(size=(d, k, c))
            x = rng.normal(size=d)
            x /= max(1.0, np.linalg.norm(x))
            y = int(rng.integers(c))
            for q in (1.5, 2.0, math.inf):
                assert softmax_loss(W, x, y, q) == pytest.approx(loss_oracle(W, x, y, q), rel=1e-12, abs=1e-15)

    def test_stable_for_large_scores(self):
        W = np.zeros((1, 1, 2))
        W[0, 0, 0] = 1000.0
        assert softmax_loss(W, np.array([1.0]), 1, 2) == pytest.approx(1000.0)
        assert softmax_loss(W, np.array([1.0]), 0, 2) == 0.0


class TestLossGradient:
    def test_zero_prototypes(self, rng):
        assert not np.any(loss_gradient(np.zeros((3, 2, 4)), rng.normal(size=3), 0, 2))

    def test_tiny_case_finite_differences(self):
        W = np.array([[[1.0, -1.0]]])
        x = np.array([1.0])
        G = loss_gradient(W, x, 0, 2)
        np.testing.assert_allclose(G, fd_gradient(W, x, 0, 2), rtol=1e-5)
        # hand value: phi = (1, 0); sigma_1 = e / (e + 1)
        s1 = math.e / (math.e + 1)
        np.testing.assert_allclose(G, [[[s1 - 1.0, 0.0]]], atol=1e-15)

    @pytest.mark.parametrize("q", [1.5, 2.0, 3.0])
    def test_matches_finite_differences(self, q, rng):
        for _ in range(10):
            d, k, c = rng.integers(2, 5, size=3)
            W = rng.uniform(0.05, 1, size=(d, k, c)) * rng.choice([-1, 1], size=(d, k, c))
            x = rng.uniform(0.1, 1, size=d)
            x /= np.linalg.norm(x)
            if np.any(class_scores(W, x, q) < 1e-2):
                continue
            y = int(rng.integers(c))
            G = loss_gradient(W, x, y, q)
            np.testing.assert_allclose(G, fd_gradient(W, x, y, q), rtol=1e-4, atol=1e-8)

    def test_matches_trainer_split(self, rng):
        for q in (1.5, 2.0, math.inf):
            W = rng.normal(size=(4, 3, 5))
            x = rng.normal(size=4) / 3
            y = 2
            dA, dB, _ = fresh_terms(W, x[None, :], np.array([y]), q)
            np.testing.assert_allclose(dA - dB, loss_gradient(W, x, y, q), rtol=1e-14, atol=1e-16)
