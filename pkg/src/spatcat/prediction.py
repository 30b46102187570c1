"""Posterior predictive sampling at new locations and derived summaries.

For each retained draw the basis vector at a prediction point is rebuilt
with that draw's range parameter, the logits follow from the draw's
(mu, W, gamma), and the softmax gives a full J-class probability vector
(control class included).  Outcome draws from those probabilities support
joint quantities a per-class mean cannot express: unions of classes and
the probability that a class appears anywhere inside an area.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .basis import as_locations
from .errors import InvalidInputError
from .model import softmax, unpack_gamma
from .sampler import ChainStore


@dataclass
class PredictiveGrid:
    """Per-draw predictive samples over a fixed set of locations.

    probs has shape (M, g, J) with each probability vector summing to 1;
    outcomes, when present, has shape (M, g) holding class indexes in
    [0, J).
    """

    locations: np.ndarray  # (g, 2)
    class_labels: list[str]
    probs: np.ndarray  # (M, g, J)
    outcomes: np.ndarray | None = None  # (M, g) int

    @property
    def n_locations(self) -> int:
        return self.locations.shape[0]

    @property
    def n_draws(self) -> int:
        return self.probs.shape[0]

    @property
    def J(self) -> int:
        return len(self.class_labels)

    def mean_probs(self) -> np.ndarray:
        """(g, J) posterior-mean class probabilities."""
        return self.probs.mean(axis=0)

    def occurrence_freq(self) -> np.ndarray:
        """(g, J) frequency of each class among outcome draws."""
        if self.outcomes is None:
            raise InvalidInputError("grid holds no outcome draws")
        g, J = self.n_locations, self.J
        out = np.zeros((g, J))
        for j in range(J):
            out[:, j] = (self.outcomes == j).mean(axis=0)
        return out


def iter_predictive_draws(chain: ChainStore, knots, locations,
                          rng: np.random.Generator | None = None,
                          want_outcomes: bool = False):
    """Yield (probs, outcomes) per retained draw, streaming.

    probs is (g, J) including the control class; outcomes is (g,) int or
    None.  The basis is rebuilt only when phi changes between consecutive
    draws.
    """
    if chain.n_draws == 0:
        raise InvalidInputError("chain has no retained draws")
    if want_outcomes and rng is None:
        raise InvalidInputError("outcome draws need an rng")
    pts = as_locations(locations)
    dist = cdist(pts, knots.coords)
    g = pts.shape[0]
    J = chain.J
    last_phi = None
    B = None
    for m in range(chain.n_draws):
        phi = float(chain.phi[m])
        if phi != last_phi:
            B = np.exp(-dist / phi)
            last_phi = phi
        Gamma = unpack_gamma(chain.gamma[m], J, chain.u)
        psi = chain.mu[m] + (B @ chain.W[m]) @ Gamma.T
        p = softmax(psi)
        probs = np.empty((g, J))
        probs[:, :-1] = p
        probs[:, -1] = np.maximum(1.0 - p.sum(axis=1), 0.0)
        outcomes = None
        if want_outcomes:
            cum = np.cumsum(probs, axis=1)
            unif = rng.uniform(size=g)
            outcomes = np.minimum(
                (unif[:, None] >= cum).sum(axis=1), J - 1
            ).astype(np.int64)
        yield probs, outcomes


def predict(chain: ChainStore, knots, locations,
            rng: np.random.Generator | None = None,
            want_outcomes: bool = False) -> PredictiveGrid:
    """Materialize the posterior predictive over a set of locations.

    With want_outcomes a categorical outcome is drawn per location and
    draw, enabling union and area-occurrence summaries downstream; in
    probability mode the result is deterministic given the chain.
    """
    pts = as_locations(locations)
    g = pts.shape[0]
    M = chain.n_draws
    J = chain.J
    probs = np.empty((M, g, J))
    outcomes = np.empty((M, g), dtype=np.int64) if want_outcomes else None
    it = iter_predictive_draws(chain, knots, pts, rng, want_outcomes)
    for m, (p, y) in enumerate(it):
        probs[m] = p
        if want_outcomes:
            outcomes[m] = y
    return PredictiveGrid(
        locations=pts, class_labels=list(chain.class_labels),
        probs=probs, outcomes=outcomes,
    )


def _check_subset(subset, J: int) -> np.ndarray:
    idx = np.unique(np.asarray(sorted(subset), dtype=np.int64))
    if idx.size == 0:
        raise InvalidInputError("class subset is empty")
    if idx.min() < 0 or idx.max() >= J:
        raise InvalidInputError(f"class indexes {idx.tolist()} outside [0, {J})")
    return idx


def union_probability(grid: PredictiveGrid, class_subset) -> np.ndarray:
    """Per-location probability that the outcome falls in a class subset.

    Per draw the union count is the sum of the subset's outcome indicators
    (a Bernoulli union for categorical data); the estimate is its mean over
    draws, which in probability mode equals the mean of the summed subset
    probabilities.
    """
    idx = _check_subset(class_subset, grid.J)
    if grid.probs is not None:
        return grid.probs[:, :, idx].sum(axis=2).mean(axis=0)
    member = np.isin(grid.outcomes, idx)
    return member.mean(axis=0)


def area_occurrence(grid: PredictiveGrid, area_partition, class_j: int) -> dict:
    """Probability that class j occurs anywhere within each area.

    Per draw and area the statistic is the indicator that at least one of
    the area's grid points drew class j; the returned value is the mean of
    that indicator over draws, a joint quantity that requires outcome
    draws rather than per-point probabilities.

    Args:
        area_partition: Length-g array of hashable area ids, one per grid
            location.
        class_j: Class index in [0, J).

    Returns:
        Mapping of area id to occurrence probability.
    """
    if grid.outcomes is None:
        raise InvalidInputError(
            "area occurrence needs outcome draws; rerun predict with "
            "want_outcomes=True"
        )
    if not 0 <= class_j < grid.J:
        raise InvalidInputError(f"class index {class_j} outside [0, {grid.J})")
    ids = np.asarray(area_partition)
    if ids.shape != (grid.n_locations,):
        raise InvalidInputError(
            f"area partition has shape {ids.shape}, expected ({grid.n_locations},)"
        )
    hits = grid.outcomes == class_j  # (M, g)
    out = {}
    for area in np.unique(ids):
        cols = ids == area
        out[area] = float(hits[:, cols].any(axis=1).mean())
    return out


def rectangular_partition(locations, tile_x: float, tile_y: float,
                          origin: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """Assign each location an area id on a rectangular tiling.

    Ids are (ix, iy) tile indexes relative to the origin, returned as an
    object array so they remain hashable keys.
    """
    pts = as_locations(locations)
    if tile_x <= 0 or tile_y <= 0:
        raise InvalidInputError("tile sizes must be positive")
    ix = np.floor((pts[:, 0] - origin[0]) / tile_x).astype(int)
    iy = np.floor((pts[:, 1] - origin[1]) / tile_y).astype(int)
    out = np.empty(pts.shape[0], dtype=object)
    for i, pair in enumerate(zip(ix, iy)):
        out[i] = pair
    return out


def posterior_mean_logits(chain: ChainStore, knots, locations) -> np.ndarray:
    """Draw-averaged logit matrix (g, J-1) at the given locations."""
    if chain.n_draws == 0:
        raise InvalidInputError("chain has no retained draws")
    pts = as_locations(locations)
    dist = cdist(pts, knots.coords)
    acc = np.zeros((pts.shape[0], chain.J - 1))
    last_phi = None
    B = None
    for m in range(chain.n_draws):
        phi = float(chain.phi[m])
        if phi != last_phi:
            B = np.exp(-dist / phi)
            last_phi = phi
        Gamma = unpack_gamma(chain.gamma[m], chain.J, chain.u)
        acc += chain.mu[m] + (B @ chain.W[m]) @ Gamma.T
    return acc / chain.n_draws


@dataclass
class PredictionSummary:
    """Streaming accumulator outputs for large prediction grids."""

    locations: np.ndarray
    class_labels: list[str]
    mean_probs: np.ndarray  # (g, J)
    occurrence_freq: np.ndarray | None  # (g, J)
    quantiles: dict | None  # level -> (g, J)
    n_draws: int


def summarize_predictions(chain: ChainStore, knots, locations,
                          rng: np.random.Generator | None = None,
                          want_outcomes: bool = False,
                          quantile_levels: tuple = (),
                          reservoir_size: int = 512) -> PredictionSummary:
    """Stream predictive draws and accumulate summaries draw by draw.

    Means accumulate online so the full (M, g, J) array never
    materializes.  Quantile surfaces, when requested, come from a
    fixed-size per-location reservoir sample of the draws -- an
    approximation whose resolution is set by reservoir_size.
    """
    pts = as_locations(locations)
    g = pts.shape[0]
    J = chain.J
    mean_acc = np.zeros((g, J))
    occ_acc = np.zeros((g, J)) if want_outcomes else None
    levels = tuple(quantile_levels)
    reservoir = None
    if levels:
        reservoir = np.empty((min(reservoir_size, chain.n_draws), g, J))
    res_rng = np.random.default_rng(chain.rng_seed ^ 0x5EED) if levels else None
    seen = 0
    for probs, outcomes in iter_predictive_draws(
        chain, knots, pts, rng, want_outcomes
    ):
        if levels:
            if seen < reservoir.shape[0]:
                reservoir[seen] = probs
            else:
                slot = res_rng.integers(0, seen + 1)
                if slot < reservoir.shape[0]:
                    reservoir[slot] = probs
        mean_acc += probs
        if want_outcomes:
            occ_acc[np.arange(g), outcomes] += 1.0
        seen += 1
    mean_probs = mean_acc / seen
    occurrence = occ_acc / seen if want_outcomes else None
    quants = None
    if levels:
        quants = {
            lvl: np.quantile(reservoir[: min(seen, reservoir.shape[0])], lvl, axis=0)
            for lvl in levels
        }
    return PredictionSummary(
        locations=pts, class_labels=list(chain.class_labels),
        mean_probs=mean_probs, occurrence_freq=occurrence,
        quantiles=quants, n_draws=seen,
    )
