"""Spatial knots, the exponential-kernel precision matrix, and basis matrices.

A fixed set of k knot locations anchors a fixed-rank spatial process.  The
knot-level precision matrix is Q(phi) with entries exp(-d_ij / phi), and the
basis matrix B(phi) projects knot-level effects to arbitrary locations with
the same kernel, so evaluating the basis at the knots reproduces Q exactly.

All distances are Euclidean in the coordinates as given; callers working in
projected units (e.g. meters) must supply a range parameter in the same
units.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import InvalidInputError, SingularMatrixError

logger = logging.getLogger(__name__)

CHOLESKY_JITTER = 1e-10


def as_locations(points) -> np.ndarray:
    """Coerce a point collection to a float (n, 2) array and validate it.

    Args:
        points: Anything np.asarray turns into an (n, 2) array, or a single
            (2,) pair.

    Returns:
        Contiguous float64 array of shape (n, 2).
    """
    arr = np.atleast_2d(np.asarray(points, dtype=float))
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InvalidInputError(
            f"locations must have shape (n, 2), got {arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("locations contain non-finite coordinates")
    return np.ascontiguousarray(arr)


@dataclass(frozen=True)
class KnotSet:
    """An ordered set of k distinct spatial anchor locations."""

    coords: np.ndarray  # (k, 2)

    def __post_init__(self):
        coords = as_locations(self.coords)
        object.__setattr__(self, "coords", coords)
        if self.k < 1:
            raise InvalidInputError("a knot set needs at least one knot")
        d = cdist(coords, coords)
        np.fill_diagonal(d, np.inf)
        if d.min() <= 0.0:
            i, j = np.unravel_index(np.argmin(d), d.shape)
            raise InvalidInputError(
                f"knots {i} and {j} coincide at {coords[i].tolist()}"
            )

    @property
    def k(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True)
class SpatialBasis:
    """Knot-level precision matrix Q(phi) with its cached Cholesky factor.

    Q_chol is lower triangular with Q = Q_chol @ Q_chol.T; log_det_Q is the
    log-determinant of Q.  Both are cached here because every spatial-weight
    prior evaluation and every precision draw reuses them.
    """

    knots: KnotSet
    phi: float
    Q: np.ndarray = field(repr=False)
    Q_chol: np.ndarray = field(repr=False)
    log_det_Q: float


def build_knot_grid(nx: int, ny: int, bounds: tuple) -> KnotSet:
    """Place nx*ny knots at the cell centers of a regular grid.

    Points are ordered row-major: y varies across the outer loop (row),
    x across the inner one.  A 1x1 grid yields the domain center.

    Args:
        nx: Number of grid columns (x direction).
        ny: Number of grid rows (y direction).
        bounds: Rectangle as (xmin, xmax, ymin, ymax).

    Returns:
        KnotSet of nx*ny points.
    """
    if nx < 1 or ny < 1:
        raise InvalidInputError(f"grid dims must be >= 1, got ({nx}, {ny})")
    xmin, xmax, ymin, ymax = map(float, bounds)
    if not (xmax > xmin and ymax > ymin):
        raise InvalidInputError(
            f"degenerate bounds (xmin={xmin}, xmax={xmax}, "
            f"ymin={ymin}, ymax={ymax})"
        )
    xs = xmin + (np.arange(nx) + 0.5) * (xmax - xmin) / nx
    ys = ymin + (np.arange(ny) + 0.5) * (ymax - ymin) / ny
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return KnotSet(np.column_stack([xx.ravel(), yy.ravel()]))


def subsample_knots(locations, k: int, seed: int) -> KnotSet:
    """Sample k distinct locations without replacement.

    Duplicate coordinates are collapsed before sampling so the resulting
    knot set is always pairwise distinct.  Deterministic given the seed.
    """
    pts = as_locations(locations)
    distinct = np.unique(pts, axis=0)
    if k < 1 or k > distinct.shape[0]:
        raise InvalidInputError(
            f"requested k={k} knots from {distinct.shape[0]} distinct locations"
        )
    rng = np.random.default_rng(seed)
    idx = rng.choice(distinct.shape[0], size=k, replace=False)
    return KnotSet(distinct[idx])


def build_basis(locations, knots: KnotSet, phi: float) -> np.ndarray:
    """Evaluate the exponential kernel between locations and knots.

    Args:
        locations: (n, 2) evaluation points.
        knots: KnotSet of k anchors.
        phi: Range parameter, > 0, in the units of the coordinates.

    Returns:
        (n, k) matrix with entries exp(-||s_m - knot_i|| / phi), each in
        (0, 1].
    """
    if not phi > 0.0:
        raise InvalidInputError(f"phi must be positive, got {phi}")
    pts = as_locations(locations)
    return np.exp(-cdist(pts, knots.coords) / phi)


def build_precision(knots: KnotSet, phi: float) -> SpatialBasis:
    """Build Q(phi) over a knot set and cache its Cholesky factor.

    If the factorization fails (near-duplicate knots), retries once with a
    small diagonal jitter and logs a warning; a second failure raises
    SingularMatrixError naming the closest knot pair.
    """
    Q = build_basis(knots.coords, knots, phi)
    Q = 0.5 * (Q + Q.T)
    try:
        L = np.linalg.cholesky(Q)
    except np.linalg.LinAlgError:
        logger.warning(
            "Cholesky of Q(phi=%g) failed; retrying with %g diagonal jitter",
            phi,
            CHOLESKY_JITTER,
        )
        Qj = Q + CHOLESKY_JITTER * np.eye(knots.k)
        try:
            L = np.linalg.cholesky(Qj)
        except np.linalg.LinAlgError:
            d = cdist(knots.coords, knots.coords)
            np.fill_diagonal(d, np.inf)
            i, j = np.unravel_index(np.argmin(d), d.shape)
            raise SingularMatrixError(
                f"Q(phi={phi}) is numerically singular even with jitter; "
                f"closest knots are {i} and {j} at distance {d[i, j]:.3e}"
            ) from None
        Q = Qj
    log_det = 2.0 * float(np.sum(np.log(np.diag(L))))
    return SpatialBasis(knots=knots, phi=float(phi), Q=Q, Q_chol=L, log_det_Q=log_det)
