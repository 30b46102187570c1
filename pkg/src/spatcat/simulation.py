"""Synthetic data generation and the two built-in simulation studies.

simulate_dataset draws a ground-truth parameter set, simulates one
categorical outcome per point of a regular grid, and splits the grid into
training and held-out test sets.  run_dimension_study measures how WAIC and
PSIS-LOO based dimension selection compare against the full-rank and true
dimensions on out-of-sample log predictive density.  run_laplace_accuracy_study
contrasts the exact sampler with its always-accept nested variant across
data-generating precision levels.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace as dc_replace

import numpy as np
import pandas as pd

from .basis import build_basis, build_knot_grid, build_precision
from .errors import InvalidInputError
from .model import (
    Dataset,
    ParamState,
    PriorSettings,
    compute_logits,
    gamma_dim,
    sample_w_prior,
    softmax,
)
from .prediction import posterior_mean_logits
from .sampler import ChainStore, SamplerConfig, run_chain
from .selection import oos_lpd, psis_loo, waic

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimConfig:
    """Design of one synthetic dataset.

    Truth values left as None are drawn from the defaults: mu and gamma
    entries iid normal, omega entries iid Gamma(omega_shape, omega_rate).
    The full grid receives one categorical outcome per point; n_train
    points are kept for fitting and the rest become the test set.
    """

    J: int = 5
    u_true: int = 2
    grid_nx: int = 50
    grid_ny: int = 50
    n_train: int = 250
    knot_nx: int = 15
    knot_ny: int = 15
    phi_true: float = 0.2
    bounds: tuple = (0.0, 1.0, 0.0, 1.0)
    mu_fixed: tuple | None = None
    gamma_fixed: tuple | None = None
    omega_fixed: tuple | None = None
    mu_sd: float = 1.0
    gamma_sd: float = 1.0
    omega_shape: float = 4.0
    omega_rate: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.u_true > self.J - 1:
            raise InvalidInputError(f"u_true={self.u_true} exceeds J-1={self.J - 1}")
        if self.n_train > self.grid_nx * self.grid_ny:
            raise InvalidInputError("n_train exceeds the number of grid points")


def _grid_locations(nx: int, ny: int, bounds) -> np.ndarray:
    xmin, xmax, ymin, ymax = bounds
    xs = xmin + (np.arange(nx) + 0.5) * (xmax - xmin) / nx
    ys = ymin + (np.arange(ny) + 0.5) * (ymax - ymin) / ny
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


def _draw_categorical_rows(probs_full: np.ndarray,
                           rng: np.random.Generator) -> np.ndarray:
    cum = np.cumsum(probs_full, axis=1)
    unif = rng.uniform(size=probs_full.shape[0])
    J = probs_full.shape[1]
    return np.minimum((unif[:, None] >= cum).sum(axis=1), J - 1).astype(np.int64)


def simulate_dataset(cfg: SimConfig) -> tuple[Dataset, Dataset, ParamState]:
    """Generate (train, test, truth) for one replicate.

    Deterministic given cfg.seed: the truth draw, the spatial weights, the
    grid outcomes, and the train/test split all flow from one generator.
    """
    rng = np.random.default_rng(cfg.seed)
    J, u = cfg.J, cfg.u_true
    d = gamma_dim(J, u)

    mu = (np.asarray(cfg.mu_fixed, dtype=float) if cfg.mu_fixed is not None
          else cfg.mu_sd * rng.standard_normal(J - 1))
    gamma = (np.asarray(cfg.gamma_fixed, dtype=float) if cfg.gamma_fixed is not None
             else cfg.gamma_sd * rng.standard_normal(d))
    omega = (np.asarray(cfg.omega_fixed, dtype=float) if cfg.omega_fixed is not None
             else rng.gamma(cfg.omega_shape, 1.0 / cfg.omega_rate, size=u))

    knots = build_knot_grid(cfg.knot_nx, cfg.knot_ny, cfg.bounds)
    spatial = build_precision(knots, cfg.phi_true)
    W = sample_w_prior(spatial, omega, rng)
    truth = ParamState(mu=mu, W=W, omega=omega, gamma=gamma, phi=cfg.phi_true)

    grid = _grid_locations(cfg.grid_nx, cfg.grid_ny, cfg.bounds)
    B = build_basis(grid, knots, cfg.phi_true)
    P = softmax(compute_logits(truth, B))
    probs_full = np.column_stack([P, np.maximum(1.0 - P.sum(axis=1), 0.0)])
    outcomes = _draw_categorical_rows(probs_full, rng)

    total = grid.shape[0]
    train_idx = np.sort(rng.choice(total, size=cfg.n_train, replace=False))
    mask = np.zeros(total, dtype=bool)
    mask[train_idx] = True
    labels = [f"class_{j}" for j in range(1, J)] + ["control"]
    train = Dataset.from_outcomes(outcomes[mask], grid[mask], labels)
    test = Dataset.from_outcomes(outcomes[~mask], grid[~mask], labels)
    return train, test, truth


# ---------------------------------------------------------------------------
# dimension-selection study


@dataclass
class DimensionStudyResult:
    """Per-fit scores, per-replicate lpd shortfalls, and their summary."""

    per_fit: pd.DataFrame
    deltas: pd.DataFrame
    summary: pd.DataFrame


def _child_seed(*keys: int) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def _default_fit_scores(train: Dataset, test: Dataset, u: int, seed: int,
                        fit_config: SamplerConfig,
                        prior_settings: PriorSettings, knots) -> dict:
    cfg = dc_replace(fit_config, seed=seed)
    chain = run_chain(train, prior_settings.build(train.J, u), u, cfg, knots)
    waic_val, _ = waic(chain.pointwise_loglik)
    elpd_loo, _ = psis_loo(chain.pointwise_loglik)
    return {
        "waic": waic_val,
        "elpd_loo": elpd_loo,
        "lpd": oos_lpd(chain, test),
        "mean_cycle_seconds": chain.mean_cycle_seconds,
    }


def _dimension_replicate(args) -> list[dict]:
    (rep, cfg, fit_config, prior_settings, u_values) = args
    sim_cfg = dc_replace(cfg, seed=_child_seed(cfg.seed, rep))
    train, test, truth = simulate_dataset(sim_cfg)
    knots = build_knot_grid(cfg.knot_nx, cfg.knot_ny, cfg.bounds)
    rows = []
    for u in u_values:
        seed = _child_seed(cfg.seed, rep, u)
        scores = _default_fit_scores(
            train, test, u, seed, fit_config, prior_settings, knots
        )
        rows.append({"replicate": rep, "u": u, **scores})
    return rows


def run_dimension_study(replicates: int, cfg: SimConfig,
                        fit_config: SamplerConfig,
                        prior_settings: PriorSettings | None = None,
                        u_values: tuple | None = None,
                        n_jobs: int = 1,
                        fit_fn=None) -> DimensionStudyResult:
    """Fit every candidate dimension on each replicate and score selections.

    For each replicate the lpd shortfall Delta-lpd(u) = lpd_best - lpd(u)
    is evaluated at the WAIC-selected, PSIS-LOO-selected, full-rank, and
    true dimensions.  The summary table reports the mean shortfall per rule
    with its standard error.

    Args:
        fit_fn: Optional hook (train, test, u, seed) -> score dict with
            keys waic, elpd_loo, lpd; used to stub fits in tests.
        n_jobs: Replicate-level process parallelism (ignored with fit_fn).
    """
    if replicates < 1:
        raise InvalidInputError("need at least one replicate")
    prior_settings = prior_settings or PriorSettings()
    u_values = tuple(u_values) if u_values else tuple(range(1, cfg.J))

    rows: list[dict] = []
    if fit_fn is not None:
        for rep in range(replicates):
            sim_cfg = dc_replace(cfg, seed=_child_seed(cfg.seed, rep))
            train, test, truth = simulate_dataset(sim_cfg)
            for u in u_values:
                seed = _child_seed(cfg.seed, rep, u)
                scores = fit_fn(train, test, u, seed)
                rows.append({"replicate": rep, "u": u, **scores})
    else:
        tasks = [
            (rep, cfg, fit_config, prior_settings, u_values)
            for rep in range(replicates)
        ]
        if n_jobs > 1:
            with ProcessPoolExecutor(max_workers=n_jobs) as pool:
                for chunk in pool.map(_dimension_replicate, tasks):
                    rows.extend(chunk)
        else:
            for task in tasks:
                rows.extend(_dimension_replicate(task))
                logger.info("dimension study: replicate %d done", task[0])

    per_fit = pd.DataFrame(rows).sort_values(["replicate", "u"]).reset_index(drop=True)

    delta_rows = []
    full_rank_u = max(u_values)
    for rep, grp in per_fit.groupby("replicate"):
        lpd_best = grp["lpd"].max()
        by_u = grp.set_index("u")
        u_waic = int(by_u["waic"].idxmin())
        u_loo = int(by_u["elpd_loo"].idxmax())
        choices = {
            "waic_selected": u_waic,
            "loo_selected": u_loo,
            "full_rank": full_rank_u,
            "true_u": cfg.u_true,
            "best": int(by_u["lpd"].idxmax()),
        }
        for rule, u in choices.items():
            delta_rows.append({
                "replicate": rep,
                "rule": rule,
                "u": u,
                "delta_lpd": float(lpd_best - by_u.loc[u, "lpd"]),
            })
    deltas = pd.DataFrame(delta_rows)

    summary = (
        deltas.groupby("rule")["delta_lpd"]
        .agg(mean="mean", sd="std", count="count")
        .reset_index()
    )
    summary["se"] = summary["sd"] / np.sqrt(summary["count"])
    return DimensionStudyResult(per_fit=per_fit, deltas=deltas, summary=summary)


# ---------------------------------------------------------------------------
# Laplace-accuracy study


@dataclass
class LaplaceAccuracyResult:
    """Acceptance rates and nested-vs-exact logit comparison per omega level."""

    table: pd.DataFrame
    logits: dict = field(default_factory=dict)  # omega -> (exact, nested) arrays


def _w_acceptance_rate(chain: ChainStore) -> float:
    acc = prop = 0
    for name, (a, p) in chain.acceptance_counts.items():
        if name.startswith("w_"):
            acc += a
            prop += p
    return acc / prop if prop else float("nan")


def origin_slope(x: np.ndarray, y: np.ndarray) -> float:
    """Least-squares slope of y on x through the origin."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    denom = float(x @ x)
    if denom == 0:
        raise InvalidInputError("cannot fit a slope against all-zero values")
    return float(x @ y) / denom


def run_laplace_accuracy_study(omega_values, cfg: SimConfig,
                               fit_config: SamplerConfig,
                               prior_settings: PriorSettings | None = None,
                               max_eval_points: int = 400
                               ) -> LaplaceAccuracyResult:
    """Compare the exact sampler with the always-accept nested variant.

    mu and gamma are drawn once at the study seed and reused across all
    omega levels; each level generates its own dataset with every
    data-generating omega_j set to that level, fits both samplers at the
    true latent dimension with identical seeds, and records the exact
    sampler's w-block acceptance rate plus the through-origin slope of the
    nested posterior-mean logits against the exact ones at held-out
    locations.
    """
    omega_values = [float(v) for v in omega_values]
    if any(v <= 0 for v in omega_values):
        raise InvalidInputError("omega levels must be positive")
    prior_settings = prior_settings or PriorSettings()

    rng = np.random.default_rng(cfg.seed)
    mu_shared = tuple(cfg.mu_sd * rng.standard_normal(cfg.J - 1))
    gamma_shared = tuple(
        cfg.gamma_sd * rng.standard_normal(gamma_dim(cfg.J, cfg.u_true))
    )

    rows = []
    logits = {}
    for idx, level in enumerate(omega_values):
        sim_cfg = dc_replace(
            cfg,
            mu_fixed=mu_shared,
            gamma_fixed=gamma_shared,
            omega_fixed=tuple([level] * cfg.u_true),
            seed=_child_seed(cfg.seed, idx),
        )
        train, test, truth = simulate_dataset(sim_cfg)
        knots = build_knot_grid(cfg.knot_nx, cfg.knot_ny, cfg.bounds)
        priors = prior_settings.build(cfg.J, cfg.u_true)
        seed = _child_seed(cfg.seed, idx, 1)

        exact_cfg = dc_replace(fit_config, seed=seed, laplace_always_accept=False)
        nested_cfg = dc_replace(fit_config, seed=seed, laplace_always_accept=True)
        exact = run_chain(train, priors, cfg.u_true, exact_cfg, knots)
        nested = run_chain(train, priors, cfg.u_true, nested_cfg, knots)

        eval_pts = test.locations[:max_eval_points]
        exact_logits = posterior_mean_logits(exact, knots, eval_pts)
        nested_logits = posterior_mean_logits(nested, knots, eval_pts)
        slope = origin_slope(exact_logits, nested_logits)
        rate = _w_acceptance_rate(exact)
        logger.info(
            "laplace accuracy: omega=%.3g w-acceptance=%.1f%% slope=%.3f",
            level, 100 * rate, slope,
        )
        rows.append({
            "omega": level,
            "w_acceptance": rate,
            "slope_nested_vs_exact": slope,
            "gamma_acceptance": exact.acceptance_rates().get("gamma", np.nan),
            "mu_acceptance": exact.acceptance_rates().get("mu", np.nan),
        })
        logits[level] = (exact_logits, nested_logits)

    return LaplaceAccuracyResult(table=pd.DataFrame(rows), logits=logits)
