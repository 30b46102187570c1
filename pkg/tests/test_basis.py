import numpy as np
import pytest

from spatcat.basis import (
    KnotSet,
    build_basis,
    build_knot_grid,
    build_precision,
    subsample_knots,
)
from spatcat.errors import InvalidInputError

UNIT_SQUARE = (0.0, 1.0, 0.0, 1.0)


class TestKnotGrid:
    def test_single_point_grid_is_domain_center(self):
        ks = build_knot_grid(1, 1, UNIT_SQUARE)
        assert ks.k == 1
        np.testing.assert_allclose(ks.coords[0], [0.5, 0.5])

    def test_15x15_has_225_knots(self):
        ks = build_knot_grid(15, 15, UNIT_SQUARE)
        assert ks.k == 225
        assert ks.coords[:, 0].min() == pytest.approx(1.0 / 30.0)
        assert ks.coords[:, 1].max() == pytest.approx(29.0 / 30.0)

    def test_2x2_pairwise_distances_match_enumeration(self):
        ks = build_knot_grid(2, 2, UNIT_SQUARE)
        # oracle: enumerate all pairs directly
        pts = ks.coords
        got = sorted(
            float(np.linalg.norm(pts[i] - pts[j]))
            for i in range(4)
            for j in range(i + 1, 4)
        )
        side = 0.5
        expected = sorted([side, side, side, side, side * np.sqrt(2), side * np.sqrt(2)])
        np.testing.assert_allclose(got, expected, atol=1e-14)

    def test_row_major_order(self):
        ks = build_knot_grid(3, 2, UNIT_SQUARE)
        # x varies fastest within a row, y increases across rows
        assert ks.coords[0, 1] == ks.coords[2, 1]
        assert ks.coords[3, 1] > ks.coords[0, 1]
        assert ks.coords[1, 0] > ks.coords[0, 0]

    def test_degenerate_bounds_rejected(self):
        with pytest.raises(InvalidInputError):
            build_knot_grid(2, 2, (0.0, 0.0, 0.0, 1.0))
        with pytest.raises(InvalidInputError):
            build_knot_grid(0, 2, UNIT_SQUARE)


class TestSubsample:
    def test_exhaustive_sample_returns_all(self, rng):
        pts = rng.uniform(size=(5, 2))
        ks = subsample_knots(pts, 5, seed=1)
        assert ks.k == 5
        got = {tuple(p) for p in ks.coords}
        assert got == {tuple(p) for p in pts}

    def test_large_subsample_distinct(self, rng):
        pts = rng.uniform(size=(2063, 2))
        ks = subsample_knots(pts, 1000, seed=7)
        assert ks.k == 1000
        assert np.unique(ks.coords, axis=0).shape[0] == 1000

    def test_deterministic_given_seed(self, rng):
        pts = rng.uniform(size=(50, 2))
        a = subsample_knots(pts, 20, seed=3)
        b = subsample_knots(pts, 20, seed=3)
        np.testing.assert_array_equal(a.coords, b.coords)

    def test_oversized_request_rejected(self, rng):
        pts = np.vstack([rng.uniform(size=(4, 2))] * 2)  # 8 rows, 4 distinct
        with pytest.raises(InvalidInputError):
            subsample_knots(pts, 5, seed=0)


class TestPrecision:
    def test_two_knots_at_distance_phi(self):
        ks = KnotSet(np.array([[0.0, 0.0], [0.3, 0.0]]))
        sb = build_precision(ks, phi=0.3)
        assert sb.Q[0, 1] == pytest.approx(np.exp(-1.0), abs=1e-12)
        np.testing.assert_allclose(np.diag(sb.Q), 1.0)

    def test_corners_match_bruteforce(self):
        ks = KnotSet(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]))
        sb = build_precision(ks, phi=0.2)
        expected = np.empty((4, 4))
        for i in range(4):
            for j in range(4):
                d = np.sqrt(np.sum((ks.coords[i] - ks.coords[j]) ** 2))
                expected[i, j] = np.exp(-d / 0.2)
        np.testing.assert_allclose(sb.Q, expected, atol=1e-14)

    def test_cholesky_identity_and_logdet(self, rng):
        ks = KnotSet(rng.uniform(size=(12, 2)))
        sb = build_precision(ks, phi=0.4)
        np.testing.assert_allclose(sb.Q_chol @ sb.Q_chol.T, sb.Q, rtol=1e-12, atol=1e-12)
        assert sb.log_det_Q == pytest.approx(np.linalg.slogdet(sb.Q)[1], rel=1e-10)

    def test_monotone_in_phi(self):
        ks = KnotSet(np.array([[0.0, 0.0], [0.5, 0.5]]))
        vals = [build_precision(ks, p).Q[0, 1] for p in (0.1, 0.2, 0.5, 1.0)]
        assert np.all(np.diff(vals) > 0)

    def test_duplicate_knots_rejected_at_construction(self):
        with pytest.raises(InvalidInputError, match="coincide"):
            KnotSet(np.array([[0.1, 0.1], [0.1, 0.1]]))

    @pytest.mark.parametrize("phi", [0.05, 0.2, 1.0, 5.0])
    def test_random_knots_always_factorizable(self, rng, phi):
        ks = KnotSet(rng.uniform(size=(20, 2)))
        sb = build_precision(ks, phi)
        assert np.all(np.isfinite(sb.Q_chol))
        assert np.all((sb.Q > 0) & (sb.Q <= 1.0))


class TestBasis:
    def test_location_on_knot_gives_one(self):
        ks = KnotSet(np.array([[0.2, 0.2], [0.8, 0.8]]))
        B = build_basis(np.array([[0.2, 0.2]]), ks, phi=0.3)
        assert B[0, 0] == pytest.approx(1.0)

    def test_distance_two_phi(self):
        ks = KnotSet(np.array([[0.0, 0.0]]))
        B = build_basis(np.array([[0.8, 0.0]]), ks, phi=0.4)
        assert B[0, 0] == pytest.approx(np.exp(-2.0), abs=1e-12)

    def test_basis_at_knots_equals_precision(self, rng):
        ks = KnotSet(rng.uniform(size=(9, 2)))
        sb = build_precision(ks, phi=0.25)
        B = build_basis(ks.coords, ks, phi=0.25)
        np.testing.assert_allclose(B, sb.Q, atol=1e-14)

    def test_invalid_phi(self):
        ks = KnotSet(np.array([[0.0, 0.0]]))
        with pytest.raises(InvalidInputError):
            build_basis(np.array([[0.5, 0.5]]), ks, phi=0.0)
