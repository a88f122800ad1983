import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from nbnlkit.core import (STD_FLOOR, Dataset, FeatureBag, InvalidInputError,
                          apply_standardizer, cap_norm, fit_standardizer,
                          nearest_neighbor)

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


def _ds(*mats, labels=None):
    bags = [FeatureBag(f"b{i}", np.asarray(m, dtype=float), None if labels is None else labels[i])
            for i, m in enumerate(mats)]
    return Dataset.from_bags(bags)


class TestCapNorm:
    @pytest.mark.parametrize("x, expected", [
        ([0.0, 0.0], [0.0, 0.0]),
        ([3.0, 4.0], [0.6, 0.8]),
        ([0.3, 0.4], [0.3, 0.4]),
    ])
    def test_examples(self, x, expected):
        np.testing.assert_allclose(cap_norm(np.array(x)), expected, rtol=0, atol=1e-15)

    def test_inside_ball_is_untouched(self):
        x = np.array([0.3, 0.4])
        assert np.array_equal(cap_norm(x), x)

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidInputError):
            cap_norm(np.array([1.0, np.nan]))
        with pytest.raises(InvalidInputError):
            cap_norm(np.array([np.inf, 0.0]))

    def test_rows_of_a_matrix(self):
        X = np.array([[3.0, 4.0], [0.1, 0.0]])
        np.testing.assert_allclose(cap_norm(X), [[0.6, 0.8], [0.1, 0.0]])

    @given(arrays(np.float64, st.integers(1, 12), elements=finite))
    def test_idempotent_and_direction_preserving(self, x):
        y = cap_norm(x)
        np.testing.assert_allclose(cap_norm(y), y, rtol=1e-12, atol=1e-300)
        assert np.linalg.norm(y) <= 1.0 + 1e-12
        assert np.linalg.norm(y) <= np.linalg.norm(x) + 1e-12
        nx = np.linalg.norm(x)
        if nx > 1e-150:
            cos = np.dot(x, y) / (nx * np.linalg.norm(y))
            assert cos == pytest.approx(1.0, abs=1e-12)


class TestStandardizer:
    def test_two_points(self):
        stats = fit_standardizer(_ds([[1.0], [3.0]]))
        np.testing.assert_allclose(stats.mean, [2.0])
        np.testing.assert_allclose(stats.std, [1.0])

    def test_constant_dimension_hits_floor(self):
        stats = fit_standardizer(_ds([[5.0], [5.0]]))
        np.testing.assert_allclose(stats.mean, [5.0])
        assert stats.std[0] == STD_FLOOR

    def test_matches_two_pass_oracle(self, rng):
        M = rng.normal(size=(100, 8)) * rng.uniform(0.1, 5, size=8) + rng.normal(size=8)
        stats = fit_standardizer(_ds(M[:37], M[37:80], M[80:]))
        # plain two-pass loops over the stacked matrix
        n = M.shape[0]
        mean = [sum(M[i, j] for i in range(n)) / n for j in range(8)]
        std = [np.sqrt(sum((M[i, j] - mean[j]) ** 2 for i in range(n)) / n) for j in range(8)]
        np.testing.assert_allclose(stats.mean, mean, rtol=0, atol=1e-12)
        np.testing.assert_allclose(stats.std, std, rtol=0, atol=1e-12)

    def test_empty_dataset(self):
        with pytest.raises(InvalidInputError):
            fit_standardizer(Dataset((), 3, 0))

    def test_apply_examples(self):
        stats = fit_standardizer(_ds([[1.0], [3.0]]))
        out = apply_standardizer(stats, FeatureBag("q", np.array([[3.0]])))
        np.testing.assert_allclose(out.patches, [[1.0]])
        from nbnlkit.core import StandardizationStats
        out = apply_standardizer(StandardizationStats(np.array([0.0]), np.array([2.0])),
                                 FeatureBag("q", np.array([[4.0]])))
        np.testing.assert_allclose(out.patches, [[2.0]])

    def test_dimension_mismatch(self):
        stats = fit_standardizer(_ds([[1.0], [3.0]]))
        with pytest.raises(InvalidInputError):
            apply_standardizer(stats, FeatureBag("q", np.zeros((2, 2))))

    def test_fitting_set_becomes_zero_mean_unit_std(self, rng):
        mats = [rng.normal(3, 2, size=(n, 5)) for n in (4, 9, 20)]
        mats[1][:, 4] = 7.0
        mats[0][:, 4] = 7.0
        mats[2][:, 4] = 7.0
        ds = _ds(*mats)
        stats = fit_standardizer(ds)
        Z = np.vstack([apply_standardizer(stats, b).patches for b in ds.bags])
        assert np.all(np.abs(Z.mean(axis=0)) <= 1e-9)
        np.testing.assert_allclose(Z[:, :4].std(axis=0), 1.0, atol=1e-9)


class TestNearestNeighbor:
    def test_example(self):
        assert nearest_neighbor(np.array([0.0, 0.0]), np.array([[1.0, 0.0], [0.0, 2.0]])) == (0, 1.0)

    def test_self_match(self, rng):
        Z = rng.normal(size=(30, 4))
        assert nearest_neighbor(Z[17], Z) == (17, 0.0)

    def test_tie_goes_to_lowest_index(self):
        Z = np.array([[2.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
        assert nearest_neighbor(np.zeros(2), Z) == (1, 1.0)

    def test_empty_support(self):
        with pytest.raises(InvalidInputError):
            nearest_neighbor(np.zeros(2), np.zeros((0, 2)))

    def test_matches_exhaustive_scan(self, rng):
        for _ in range(20):
            Z = rng.normal(size=(50, 6))
            x = rng.normal(size=6)
            best_i, best_d = -1, np.inf
            for i, z in enumerate(Z):
                dist = sum((float(a) - float(b)) ** 2 for a, b in zip(x, z))
                if dist < best_d:
                    best_i, best_d = i, dist
            i, dist = nearest_neighbor(x, Z)
            assert i == best_i
            assert dist == pytest.approx(best_d, rel=1e-13)


class TestTypes:
    def test_bag_requires_rows(self):
        with pytest.raises(InvalidInputError):
            FeatureBag("x", np.zeros((0, 3)))

    def test_dataset_dimension_check(self):
        with pytest.raises(InvalidInputError):
            Dataset((FeatureBag("a", np.zeros((1, 2))), FeatureBag("b", np.zeros((1, 3)))), 2, 1)

    def test_dataset_label_range(self):
        with pytest.raises(InvalidInputError):
            Dataset((FeatureBag("a", np.zeros((1, 2)), label=2),), 2, 2)
