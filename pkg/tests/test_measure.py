import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from otinform.measure import (
    DiscreteMeasure,
    GroundCost,
    LatentSpec,
    cost_matrix,
    diagonal_mixture_dataset,
    gaussian_grid_dataset,
    grid_centers,
    sample_latent,
    unit_square_grid,
)

coords = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def point_clouds(max_n=12, d=2):
    return st.integers(1, max_n).flatmap(lambda n: arrays(np.float64, (n, d), elements=coords))


class TestCostMatrix:
    def test_l1_self(self):
        np.testing.assert_array_equal(cost_matrix("l1", [[0, 0]], [[0, 0]]), [[0.0]])

    def test_sql2(self):
        np.testing.assert_array_equal(cost_matrix(GroundCost.SQL2, [[0, 0]], [[1, 1]]), [[2.0]])

    def test_l1_coordinatewise(self):
        C = cost_matrix("l1", [[0, 0], [1, 0]], [[0, 1]])
        np.testing.assert_array_equal(C, [[1.0], [2.0]])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension mismatch"):
            cost_matrix("l1", np.zeros((2, 2)), np.zeros((2, 3)))

    def test_unknown_cost(self):
        with pytest.raises(ValueError, match="unknown ground cost"):
            cost_matrix("l3", np.zeros((1, 2)), np.zeros((1, 2)))

    @pytest.mark.parametrize("cost", list(GroundCost))
    @given(X=point_clouds())
    def test_zero_diagonal(self, cost, X):
        C = cost_matrix(cost, X, X)
        assert np.all(np.diag(C) == 0)
        assert np.all(C >= 0)

    @pytest.mark.parametrize("cost", list(GroundCost))
    @given(X=point_clouds(), Y=point_clouds())
    def test_swap_is_transpose(self, cost, X, Y):
        np.testing.assert_array_equal(cost_matrix(cost, X, Y), cost_matrix(cost, Y, X).T)


class TestDiscreteMeasure:
    def test_rejects_bad_weights(self):
        with pytest.raises(ValueError):
            DiscreteMeasure(np.zeros((2, 2)), [0.7, 0.7])
        with pytest.raises(ValueError):
            DiscreteMeasure(np.zeros((2, 2)), [1.5, -0.5])

    def test_rejects_nonfinite_points(self):
        with pytest.raises(ValueError):
            DiscreteMeasure.uniform([[np.nan, 0.0]])

    def test_csv_roundtrip(self, tmp_path):
        mu = gaussian_grid_dataset(2, 0.1, 7, seed=3)
        mu.to_csv(tmp_path / "mu.csv")
        assert (tmp_path / "mu.csv").read_text().splitlines()[0] == "x0,x1,weight"
        back = DiscreteMeasure.from_csv(tmp_path / "mu.csv")
        np.testing.assert_array_equal(back.points, mu.points)
        np.testing.assert_allclose(back.weights, mu.weights, rtol=0, atol=1e-15)

    def test_csv_bad_header(self, tmp_path):
        (tmp_path / "bad.csv").write_text("a,b\n1,1\n")
        with pytest.raises(ValueError, match="header"):
            DiscreteMeasure.from_csv(tmp_path / "bad.csv")


class TestSamplers:
    def test_single_degenerate_mode(self):
        mu = gaussian_grid_dataset(1, 1e-12, 4, seed=0)
        np.testing.assert_allclose(mu.points, 0.0, atol=1e-9)

    def test_25_mode_centers(self):
        centers = grid_centers(5)
        assert centers.shape == (25, 2)
        assert set(np.round(centers[:, 0], 12)) == {-1.0, -0.5, 0.0, 0.5, 1.0}

    def test_every_mode_hit(self):
        sigma = 0.02
        mu = gaussian_grid_dataset(3, sigma, 3000, seed=1)
        d = np.sqrt(cost_matrix("sql2", grid_centers(3), mu.points))
        assert np.all((d <= 3 * sigma).sum(axis=1) >= 1)

    def test_grid_requires_enough_samples(self):
        with pytest.raises(ValueError):
            gaussian_grid_dataset(3, 0.1, 8, seed=0)

    def test_diagonal_single_mode(self):
        nu = diagonal_mixture_dataset(10, 1, 1e-12, seed=0)
        np.testing.assert_allclose(nu.points, 0.5, atol=1e-9)

    def test_diagonal_support(self):
        nu = diagonal_mixture_dataset(500, 4, 0.3, seed=2)
        np.testing.assert_array_equal(nu.points[:, 0], nu.points[:, 1])
        assert nu.points.min() >= 0 and nu.points.max() <= 1

    def test_diagonal_three_modes(self):
        # oracle: count strict local maxima of a coarse histogram along the diagonal
        nu = diagonal_mixture_dataset(300, 3, 0.05, seed=0)
        hist, _ = np.histogram(nu.points[:, 0], bins=12, range=(0, 1))
        padded = np.concatenate([[-1], hist, [-1]])
        peaks = [k for k in range(1, len(padded) - 1)
                 if padded[k] > padded[k - 1] and padded[k] >= padded[k + 1]]
        assert len(peaks) == 3

    def test_unit_square_grid(self):
        one = unit_square_grid(1)
        np.testing.assert_array_equal(one.points, [[0.5, 0.5]])
        np.testing.assert_array_equal(one.weights, [1.0])
        two = unit_square_grid(2)
        np.testing.assert_array_equal(two.weights, [0.25] * 4)
        big = unit_square_grid(32)
        assert big.n == 1024
        assert abs(big.weights.sum() - 1) <= 1e-12

    @pytest.mark.parametrize("sampler", [
        lambda s: gaussian_grid_dataset(3, 0.05, 100, s).points,
        lambda s: diagonal_mixture_dataset(100, 3, 0.05, s).points,
        lambda s: sample_latent(LatentSpec(3, 2, 4), 50, s),
    ])
    def test_reproducible(self, sampler):
        np.testing.assert_array_equal(sampler(11), sampler(11))
        assert not np.array_equal(sampler(11), sampler(12))


class TestLatent:
    def test_one_hot(self):
        z = sample_latent(LatentSpec(cat_dim=3), 200, seed=0)
        assert z.shape == (200, 3)
        np.testing.assert_array_equal(z.sum(axis=1), 1.0)
        assert set(np.unique(z)) == {0.0, 1.0}

    def test_uniform_range(self):
        z = sample_latent(LatentSpec(uni_dim=2), 500, seed=0)
        assert z.min() >= -1 and z.max() <= 1

    def test_table_dimensions(self):
        spec = LatentSpec(cat_dim=25, uni_dim=0, noise_dim=103)
        assert sample_latent(spec, 4, seed=0).shape == (4, 128)
        assert spec.info_dim == 25

    def test_block_layout(self):
        spec = LatentSpec(2, 1, 3)
        z = sample_latent(spec, 1000, seed=5)
        np.testing.assert_array_equal(z[:, :2].sum(axis=1), 1.0)
        assert np.abs(z[:, 2]).max() <= 1
        assert np.abs(z[:, 3:]).max() > 1  # gaussian tail shows up in 3000 draws

    def test_empty_latent_rejected(self):
        with pytest.raises(ValueError):
            LatentSpec(0, 0, 0)


@settings(max_examples=25)
@given(n=st.integers(1, 50), seed=st.integers(0, 2**32 - 1))
def test_constructors_on_simplex(n, seed):
    for mu in (gaussian_grid_dataset(1, 0.1, n, seed), diagonal_mixture_dataset(n, 1, 0.1, seed),
               unit_square_grid(1 + n % 7)):
        assert np.all(mu.weights >= 0)
        assert abs(mu.weights.sum() - 1) <= 1e-12
