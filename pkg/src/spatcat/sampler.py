"""Metropolis-within-Gibbs sampler with Laplace-approximation proposals.

One cycle updates, in order: each factor's knot weights w_1..w_u, the free
factor entries gamma, and the class means mu -- each through an
independence Metropolis-Hastings step whose proposal is a Gaussian centered
at the conditional-posterior mode with covariance the negated inverse
Hessian there (found by Newton-Raphson).  The marginal precisions omega_j
are conjugate Gamma draws, and the spatial range phi moves by a Gaussian
random walk on its log.

Every block conditions on the newest values produced earlier in the same
cycle.  All randomness flows through one numpy Generator in a fixed order,
so equal seeds give bit-identical chains.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .basis import KnotSet, SpatialBasis, build_basis, build_precision
from .derivatives import grad_hess_gamma, grad_hess_mu, grad_hess_w
from .errors import ChainAbortError, InvalidInputError, SingularMatrixError
from .model import (
    Dataset,
    Hyperpriors,
    ParamState,
    compute_logits,
    gamma_dim,
    log_likelihood_core,
    pointwise_log_likelihood,
)

logger = logging.getLogger(__name__)

PHI_ADAPT_TARGET = 0.4
PHI_SD_BOUNDS = (1e-3, 10.0)


@dataclass
class SamplerConfig:
    """Chain length, Newton-Raphson controls, and phi random-walk settings.

    omega_shape_uses_n switches the conjugate omega shape update from the
    default alpha + k/2 (k = knot count, matching the dimension of the
    quadratic form) to alpha + n/2 for comparison runs.
    laplace_always_accept skips the accept/reject decision on the w, gamma,
    and mu blocks, turning the sampler into its nested-approximation
    variant; the random-number stream is unchanged so the two variants are
    comparable draw for draw.
    """

    n_samples: int = 10_000
    n_burnin: int = 3_000
    thin: int = 1
    nr_max_iters: int = 50
    nr_grad_tol: float = 1e-8
    phi_rw_sd: float = 0.1
    seed: int = 0
    adapt_phi: bool = True
    update_phi: bool = True
    phi_init: float | None = None
    omega_shape_uses_n: bool = False
    laplace_always_accept: bool = False

    def __post_init__(self):
        if self.n_samples < 0 or self.n_burnin < 0:
            raise InvalidInputError("chain lengths must be nonnegative")
        if self.thin < 1:
            raise InvalidInputError("thin must be >= 1")
        if self.nr_max_iters < 1 or self.nr_grad_tol <= 0:
            raise InvalidInputError("invalid Newton-Raphson controls")
        if self.phi_rw_sd <= 0:
            raise InvalidInputError("phi_rw_sd must be positive")
        if self.phi_init is not None and self.phi_init <= 0:
            raise InvalidInputError("phi_init must be positive")


@dataclass(frozen=True)
class LaplaceProposal:
    """Gaussian proposal at a conditional mode.

    hess_chol is the lower Cholesky factor of -H(mode); when converged is
    False the factor may be absent and callers should fall back to a
    proposal centered at the current value.
    """

    mode: np.ndarray
    hess_chol: np.ndarray | None
    log_det_neg_hess: float
    nr_iters: int
    converged: bool


@dataclass
class BasisCache:
    """B(phi) and Q(phi) for the training locations, rebuilt on phi moves."""

    locations: np.ndarray
    spatial: SpatialBasis
    B: np.ndarray

    @classmethod
    def build(cls, locations, knots: KnotSet, phi: float) -> "BasisCache":
        return cls(
            locations=np.asarray(locations, dtype=float),
            spatial=build_precision(knots, phi),
            B=build_basis(locations, knots, phi),
        )

    @property
    def knots(self) -> KnotSet:
        return self.spatial.knots

    def rebuild(self, phi: float) -> "BasisCache":
        return BasisCache.build(self.locations, self.knots, phi)


@dataclass
class ChainStore:
    """Ordered posterior draws plus acceptance and log-likelihood bookkeeping."""

    mu: np.ndarray  # (M, J-1)
    W: np.ndarray  # (M, k, u)
    omega: np.ndarray  # (M, u)
    gamma: np.ndarray  # (M, gamma_dim)
    phi: np.ndarray  # (M,)
    pointwise_loglik: np.ndarray  # (M, n)
    acceptance_counts: dict  # block -> [accepted, proposed], sampling phase
    burnin_acceptance_counts: dict
    rng_seed: int
    config: SamplerConfig
    knots: KnotSet
    class_labels: list[str]
    priors_snapshot: dict = field(default_factory=dict)
    phi_rw_sd_final: float = 0.0
    mean_cycle_seconds: float = 0.0

    @property
    def n_draws(self) -> int:
        return self.mu.shape[0]

    @property
    def u(self) -> int:
        return self.omega.shape[1]

    @property
    def k(self) -> int:
        return self.W.shape[1]

    @property
    def J(self) -> int:
        return self.mu.shape[1] + 1

    def state_at(self, m: int) -> ParamState:
        return ParamState(
            mu=self.mu[m], W=self.W[m], omega=self.omega[m],
            gamma=self.gamma[m], phi=float(self.phi[m]),
        )

    def acceptance_rates(self) -> dict:
        out = {}
        for name, (acc, prop) in self.acceptance_counts.items():
            out[name] = acc / prop if prop else float("nan")
        return out


# ---------------------------------------------------------------------------
# numerical primitives


def _chol_neg_hess(hess: np.ndarray, extra_jitter: float = 0.0) -> np.ndarray:
    """Lower Cholesky factor of -hess, with a small jitter ladder."""
    A = -hess
    scale = max(1.0, float(np.mean(np.diag(A)))) if A.size else 1.0
    for jit in (extra_jitter, 1e-10, 1e-8, 1e-6, 1e-4):
        try:
            return np.linalg.cholesky(A + jit * scale * np.eye(A.shape[0]))
        except np.linalg.LinAlgError:
            continue
    raise SingularMatrixError(
        "negated Hessian is not positive definite even after jitter"
    )


def _logdet_from_chol(L: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(L)))) if L.size else 0.0


def _mvn_draw(mode: np.ndarray, L: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw from MVN(mode, (L L^T)^-1)."""
    z = rng.standard_normal(mode.size)
    if mode.size == 0:
        return mode.copy()
    return mode + solve_triangular(L, z, trans="T", lower=True)


def _gaussian_logq(x: np.ndarray, mode: np.ndarray, L: np.ndarray,
                   log_det: float) -> float:
    y = L.T @ (x - mode)
    return 0.5 * log_det - 0.5 * float(y @ y)


def _mh_accept(log_ratio: float, rng: np.random.Generator,
               force: bool = False) -> bool:
    """Accept/reject decision; always consumes one uniform draw."""
    unif = rng.uniform()
    return True if force else bool(np.log(unif) < log_ratio)


def newton_raphson_mode(init, value_fn, grad_hess_fn, max_iters: int = 50,
                        grad_tol: float = 1e-8) -> LaplaceProposal:
    """Find the mode of a concave log density by damped Newton-Raphson.

    Takes full Newton steps, halving the step up to 10 times whenever the
    log density fails to increase.  Stops once the gradient max-norm drops
    to grad_tol or after max_iters accepted steps; a run that exhausts its
    iterations or meets an indefinite Hessian reports converged=False.
    """
    x = np.array(init, dtype=float).copy()
    if x.size == 0:
        return LaplaceProposal(mode=x, hess_chol=np.zeros((0, 0)),
                               log_det_neg_hess=0.0, nr_iters=0, converged=True)
    fx = value_fn(x)
    grad, hess = grad_hess_fn(x)
    n_steps = 0
    stalled = False
    at_mode = False
    for _ in range(max_iters):
        if np.max(np.abs(grad)) <= grad_tol:
            break
        try:
            L = _chol_neg_hess(hess)
        except SingularMatrixError:
            stalled = True
            break
        step = cho_solve((L, True), grad)
        scale, improved = 1.0, False
        for _ in range(11):
            cand = x + scale * step
            fc = value_fn(cand)
            if fc > fx:
                improved = True
                break
            scale *= 0.5
        if not improved:
            # the Newton decrement bounds the attainable gain; once it is
            # below the objective's floating-point resolution the iterate
            # is the mode even if the gradient sits just above grad_tol
            decrement = float(grad @ step)
            at_mode = decrement <= 1e-12 * max(1.0, abs(fx))
            stalled = not at_mode
            break
        x, fx = cand, fc
        grad, hess = grad_hess_fn(x)
        n_steps += 1

    converged = at_mode or ((not stalled) and np.max(np.abs(grad)) <= grad_tol)
    chol = None
    log_det = 0.0
    if converged:
        try:
            chol = _chol_neg_hess(hess)
            log_det = _logdet_from_chol(chol)
        except SingularMatrixError:
            converged = False
    return LaplaceProposal(mode=x, hess_chol=chol, log_det_neg_hess=log_det,
                           nr_iters=n_steps, converged=converged)


def mh_laplace_update(current, proposal: LaplaceProposal, log_target_fn,
                      rng: np.random.Generator,
                      force_accept: bool = False) -> tuple[np.ndarray, bool]:
    """Independence MH step with a Laplace proposal.

    Draws x* ~ MVN(mode, (-H)^-1) and accepts with probability
    min{1, [f(x*) q(current)] / [f(current) q(x*)]}.
    """
    current = np.asarray(current, dtype=float)
    if not proposal.converged or proposal.hess_chol is None:
        raise InvalidInputError("proposal did not converge; use the fallback path")
    L = proposal.hess_chol
    cand = _mvn_draw(proposal.mode, L, rng)
    log_ratio = (
        log_target_fn(cand)
        - log_target_fn(current)
        - _gaussian_logq(cand, proposal.mode, L, proposal.log_det_neg_hess)
        + _gaussian_logq(current, proposal.mode, L, proposal.log_det_neg_hess)
    )
    accepted = _mh_accept(log_ratio, rng, force_accept)
    return (cand if accepted else current.copy()), accepted


def _mh_local_gaussian_update(current, value_fn, grad_hess_fn,
                              rng: np.random.Generator,
                              force_accept: bool = False) -> tuple[np.ndarray, bool]:
    """Fallback MH step centered at the current value.

    Proposal covariance is the regularized negated inverse Hessian at the
    center; the reverse-move density is evaluated with the Hessian at the
    proposed point, keeping the chain exact when mode finding fails.
    """
    current = np.asarray(current, dtype=float)
    _, h_cur = grad_hess_fn(current)
    L_cur = _chol_neg_hess(h_cur, extra_jitter=1e-8)
    cand = _mvn_draw(current, L_cur, rng)
    _, h_cand = grad_hess_fn(cand)
    L_cand = _chol_neg_hess(h_cand, extra_jitter=1e-8)
    log_ratio = (
        value_fn(cand)
        - value_fn(current)
        + _gaussian_logq(current, cand, L_cand, _logdet_from_chol(L_cand))
        - _gaussian_logq(cand, current, L_cur, _logdet_from_chol(L_cur))
    )
    accepted = _mh_accept(log_ratio, rng, force_accept)
    return (cand if accepted else current.copy()), accepted


def _laplace_block_update(current, value_fn, grad_hess_fn,
                          config: SamplerConfig, rng: np.random.Generator
                          ) -> tuple[np.ndarray, bool]:
    proposal = newton_raphson_mode(
        current, value_fn, grad_hess_fn,
        max_iters=config.nr_max_iters, grad_tol=config.nr_grad_tol,
    )
    if proposal.converged:
        return mh_laplace_update(
            current, proposal, value_fn, rng,
            force_accept=config.laplace_always_accept,
        )
    logger.warning("Newton-Raphson failed to converge; using fallback proposal")
    return _mh_local_gaussian_update(
        current, value_fn, grad_hess_fn, rng,
        force_accept=config.laplace_always_accept,
    )


# ---------------------------------------------------------------------------
# block updates


def _w_conditional(j: int, state: ParamState, data: Dataset, cache: BasisCache):
    Q = cache.spatial.Q
    omega_j = state.omega[j]

    def with_wj(wj):
        W = state.W.copy()
        W[:, j] = wj
        return state.replace(W=W)

    def value(wj):
        psi = compute_logits(with_wj(wj), cache.B)
        return log_likelihood_core(data.Y, data.N, psi) - 0.5 * omega_j * float(
            wj @ (Q @ wj)
        )

    def grad_hess(wj):
        gh = grad_hess_w(j, with_wj(wj), data, cache.B, Q)
        return gh.grad, gh.hess

    return value, grad_hess


def _gamma_conditional(state: ParamState, data: Dataset, cache: BasisCache,
                       priors: Hyperpriors):
    def value(g):
        psi = compute_logits(state.replace(gamma=g), cache.B)
        r = g - priors.m_gamma
        return log_likelihood_core(data.Y, data.N, psi) - 0.5 * float(
            r @ (priors.Q_gamma @ r)
        )

    def grad_hess(g):
        gh = grad_hess_gamma(state.replace(gamma=g), data, cache.B, priors)
        return gh.grad, gh.hess

    return value, grad_hess


def _mu_conditional(state: ParamState, data: Dataset, cache: BasisCache,
                    priors: Hyperpriors):
    def value(m):
        psi = compute_logits(state.replace(mu=m), cache.B)
        r = m - priors.m_mu
        return log_likelihood_core(data.Y, data.N, psi) - 0.5 * float(
            r @ (priors.Q_mu @ r)
        )

    def grad_hess(m):
        gh = grad_hess_mu(state.replace(mu=m), data, cache.B, priors)
        return gh.grad, gh.hess

    return value, grad_hess


def sample_omega(j: int, state: ParamState, Q: np.ndarray,
                 priors: Hyperpriors, rng: np.random.Generator,
                 shape_uses_n: bool = False, n_obs: int | None = None) -> float:
    """Exact conjugate Gamma draw for factor j's marginal precision.

    Posterior shape is alpha + k/2 where k is the dimension of w_j; with
    shape_uses_n the shape becomes alpha + n/2 instead (comparison mode,
    n_obs required).
    """
    wj = state.W[:, j]
    if shape_uses_n:
        if n_obs is None:
            raise InvalidInputError("shape_uses_n requires n_obs")
        shape = priors.alpha_omega[j] + 0.5 * n_obs
    else:
        shape = priors.alpha_omega[j] + 0.5 * wj.size
    rate = priors.beta_omega[j] + 0.5 * float(wj @ (Q @ wj))
    return float(rng.gamma(shape, 1.0 / rate))


def omega_conditional_params(j: int, state: ParamState, Q: np.ndarray,
                             priors: Hyperpriors,
                             shape_uses_n: bool = False,
                             n_obs: int | None = None) -> tuple[float, float]:
    """(shape, rate) of the conjugate omega_j update, for checks and tests."""
    wj = state.W[:, j]
    if shape_uses_n:
        if n_obs is None:
            raise InvalidInputError("shape_uses_n requires n_obs")
        shape = priors.alpha_omega[j] + 0.5 * n_obs
    else:
        shape = priors.alpha_omega[j] + 0.5 * wj.size
    rate = priors.beta_omega[j] + 0.5 * float(wj @ (Q @ wj))
    return float(shape), float(rate)


def sample_phi(state: ParamState, data: Dataset, cache: BasisCache,
               priors: Hyperpriors, rng: np.random.Generator,
               rw_sd: float) -> tuple[float, bool, float, BasisCache]:
    """Random-walk MH update of the range parameter on the log scale.

    The acceptance ratio carries the likelihood through B(phi), the
    w-priors through det Q(phi) and the quadratic forms, the Gamma prior,
    and the log-transform Jacobian.  Returns the new phi, the acceptance
    flag, the acceptance probability (for burn-in adaptation), and the
    basis cache for the returned phi.
    """
    z = rng.standard_normal()
    unif = rng.uniform()
    phi_cur = state.phi
    phi_new = float(np.exp(np.log(phi_cur) + rw_sd * z))

    try:
        new_cache = cache.rebuild(phi_new)
    except SingularMatrixError:
        return phi_cur, False, 0.0, cache

    u = state.u
    ll_cur = log_likelihood_core(data.Y, data.N, compute_logits(state, cache.B))
    ll_new = log_likelihood_core(
        data.Y, data.N, compute_logits(state.replace(phi=phi_new), new_cache.B)
    )

    def quads(spatial: SpatialBasis) -> np.ndarray:
        LtW = spatial.Q_chol.T @ state.W
        return np.sum(LtW * LtW, axis=0)

    delta = (
        ll_new
        - ll_cur
        + 0.5 * u * (new_cache.spatial.log_det_Q - cache.spatial.log_det_Q)
        - 0.5 * float(state.omega @ (quads(new_cache.spatial) - quads(cache.spatial)))
        + priors.alpha_phi * (np.log(phi_new) - np.log(phi_cur))
        - priors.beta_phi * (phi_new - phi_cur)
    )
    accept_prob = float(np.exp(min(delta, 0.0)))
    if np.log(unif) < delta:
        return phi_new, True, accept_prob, new_cache
    return phi_cur, False, accept_prob, cache


def gibbs_cycle(state: ParamState, data: Dataset, basis_cache: BasisCache,
                priors: Hyperpriors, config: SamplerConfig,
                rng: np.random.Generator, phi_rw_sd: float | None = None
                ) -> tuple[ParamState, BasisCache, dict]:
    """One full sweep over all blocks; each conditions on the newest values.

    Returns the updated state, the (possibly rebuilt) basis cache, and a
    dict of per-block acceptance flags plus the phi acceptance probability.
    """
    info: dict = {}
    cache = basis_cache

    for j in range(state.u):
        value_fn, gh_fn = _w_conditional(j, state, data, cache)
        new_wj, accepted = _laplace_block_update(
            state.W[:, j], value_fn, gh_fn, config, rng
        )
        W = state.W.copy()
        W[:, j] = new_wj
        state = state.replace(W=W)
        info[f"w_{j + 1}"] = accepted

    if state.gamma.size:
        value_fn, gh_fn = _gamma_conditional(state, data, cache, priors)
        new_gamma, accepted = _laplace_block_update(
            state.gamma, value_fn, gh_fn, config, rng
        )
        state = state.replace(gamma=new_gamma)
        info["gamma"] = accepted

    value_fn, gh_fn = _mu_conditional(state, data, cache, priors)
    new_mu, accepted = _laplace_block_update(state.mu, value_fn, gh_fn, config, rng)
    state = state.replace(mu=new_mu)
    info["mu"] = accepted

    omega = state.omega.copy()
    for j in range(state.u):
        omega[j] = sample_omega(
            j, state.replace(omega=omega), cache.spatial.Q, priors, rng,
            shape_uses_n=config.omega_shape_uses_n, n_obs=data.n,
        )
    state = state.replace(omega=omega)

    if config.update_phi:
        sd = config.phi_rw_sd if phi_rw_sd is None else phi_rw_sd
        phi_new, accepted, accept_prob, cache = sample_phi(
            state, data, cache, priors, rng, sd
        )
        state = state.replace(phi=phi_new)
        info["phi"] = accepted
        info["phi_accept_prob"] = accept_prob

    return state, cache, info


# ---------------------------------------------------------------------------
# full chain


def initial_state(data: Dataset, priors: Hyperpriors, u: int, k: int,
                  phi_init: float | None = None) -> ParamState:
    """Starting point: empirical log-odds for mu, zeros elsewhere.

    mu_j is the smoothed log count ratio of class j to the control class;
    W = 0 keeps the first Newton solves well conditioned, and omega/phi
    start at their prior means.
    """
    counts = data.Y.sum(axis=0).astype(float)
    control = float(data.control_counts.sum())
    mu0 = np.log((counts + 0.5) / (control + 0.5))
    omega0 = priors.alpha_omega / priors.beta_omega
    phi0 = priors.alpha_phi / priors.beta_phi if phi_init is None else phi_init
    return ParamState(
        mu=mu0,
        W=np.zeros((k, u)),
        omega=omega0.copy(),
        gamma=np.zeros(gamma_dim(data.J, u)),
        phi=float(phi0),
    )


def _priors_snapshot(priors: Hyperpriors) -> dict:
    return {
        "m_mu": priors.m_mu.tolist(),
        "Q_mu": priors.Q_mu.tolist(),
        "m_gamma": priors.m_gamma.tolist(),
        "Q_gamma": priors.Q_gamma.tolist(),
        "alpha_omega": priors.alpha_omega.tolist(),
        "beta_omega": priors.beta_omega.tolist(),
        "alpha_phi": priors.alpha_phi,
        "beta_phi": priors.beta_phi,
    }


def run_chain(data: Dataset, priors: Hyperpriors, u: int,
              config: SamplerConfig, knots: KnotSet,
              init_state: ParamState | None = None) -> ChainStore:
    """Run burn-in plus sampling and collect retained draws.

    Records one row of per-observation log-likelihoods (proper log-pmfs,
    constants included) per retained draw, per-block acceptance tallies for
    the burn-in and sampling phases separately, and the adapted phi
    random-walk scale.
    """
    J = data.J
    if not 1 <= u <= J - 1:
        raise InvalidInputError(f"u={u} outside [1, {J - 1}]")
    if priors.alpha_omega.shape != (u,):
        raise InvalidInputError(
            f"omega prior has length {priors.alpha_omega.size}, expected u={u}"
        )
    d_gamma = gamma_dim(J, u)
    if priors.m_gamma.shape != (d_gamma,):
        raise InvalidInputError(
            f"gamma prior has length {priors.m_gamma.size}, expected {d_gamma}"
        )

    rng = np.random.default_rng(config.seed)
    state = init_state if init_state is not None else initial_state(
        data, priors, u, knots.k, phi_init=config.phi_init
    )
    cache = BasisCache.build(data.locations, knots, state.phi)

    M = (config.n_samples + config.thin - 1) // config.thin
    store = ChainStore(
        mu=np.empty((M, J - 1)),
        W=np.empty((M, knots.k, u)),
        omega=np.empty((M, u)),
        gamma=np.empty((M, d_gamma)),
        phi=np.empty(M),
        pointwise_loglik=np.empty((M, data.n)),
        acceptance_counts={},
        burnin_acceptance_counts={},
        rng_seed=config.seed,
        config=config,
        knots=knots,
        class_labels=list(data.class_labels),
        priors_snapshot=_priors_snapshot(priors),
    )

    phi_sd = config.phi_rw_sd
    tallies = {"burnin": {}, "sampling": {}}
    kept = 0
    t_start = time.perf_counter()
    n_cycles = config.n_burnin + config.n_samples

    for cycle in range(n_cycles):
        in_burnin = cycle < config.n_burnin
        try:
            state, cache, info = gibbs_cycle(
                state, data, cache, priors, config, rng, phi_rw_sd=phi_sd
            )
        except (SingularMatrixError, np.linalg.LinAlgError) as exc:
            raise ChainAbortError(
                f"cycle {cycle} failed: {exc}; state summary: "
                f"phi={state.phi:.4g}, omega={np.round(state.omega, 4).tolist()}, "
                f"|mu|_max={np.max(np.abs(state.mu)):.4g}, "
                f"|W|_max={np.max(np.abs(state.W)):.4g}"
            ) from exc

        phase = "burnin" if in_burnin else "sampling"
        for name, flag in info.items():
            if name == "phi_accept_prob":
                continue
            acc = tallies[phase].setdefault(name, [0, 0])
            acc[0] += int(flag)
            acc[1] += 1

        if in_burnin and config.update_phi and config.adapt_phi:
            step = (cycle + 1) ** -0.6
            log_sd = np.log(phi_sd) + step * (info["phi_accept_prob"] - PHI_ADAPT_TARGET)
            phi_sd = float(np.clip(np.exp(log_sd), *PHI_SD_BOUNDS))

        if not in_burnin:
            s = cycle - config.n_burnin
            if s % config.thin == 0:
                store.mu[kept] = state.mu
                store.W[kept] = state.W
                store.omega[kept] = state.omega
                store.gamma[kept] = state.gamma
                store.phi[kept] = state.phi
                store.pointwise_loglik[kept] = pointwise_log_likelihood(
                    state, data, cache.B
                )
                kept += 1

    elapsed = time.perf_counter() - t_start
    store.acceptance_counts = {k: tuple(v) for k, v in tallies["sampling"].items()}
    store.burnin_acceptance_counts = {
        k: tuple(v) for k, v in tallies["burnin"].items()
    }
    store.phi_rw_sd_final = phi_sd
    store.mean_cycle_seconds = elapsed / n_cycles if n_cycles else 0.0
    assert kept == M
    return store
