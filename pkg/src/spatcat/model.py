"""Model state, the softmax link, factor parameterization, and log densities.

The observation model is multinomial with J classes.  Class J is the control
class: its logit is fixed at zero, and the n x (J-1) logit matrix for the
remaining classes is

    Psi = 1 mu^T + B(phi) W Gamma(gamma)^T,

where B is the spatial basis matrix, W holds the knot-level weights of u
latent spatial factors, and Gamma is a unit-lower-triangular (J-1) x u factor
matrix whose strictly-lower free entries are stored column-wise in the vector
gamma.  The unit-lower-triangular constraint makes the map
(Gamma, diag(omega)) <-> Gamma diag(omega)^-1 Gamma^T a bijection onto
rank-u PSD matrices, which identifies the factorization.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln

from .basis import SpatialBasis, as_locations
from .errors import InvalidInputError

__all__ = [
    "Dataset",
    "FactorMatrix",
    "ParamState",
    "Hyperpriors",
    "PriorSettings",
    "softmax",
    "compute_logits",
    "log_likelihood",
    "pointwise_log_likelihood",
    "log_posterior_unnormalized",
    "induced_row_covariance",
    "factor_from_covariance",
    "gamma_dim",
    "combined_factor_param_count",
    "pack_gamma",
    "unpack_gamma",
]


# ---------------------------------------------------------------------------
# data container


@dataclass
class Dataset:
    """Multinomial counts with trial totals and observation coordinates.

    Y excludes the control class (the LAST entry of class_labels); the
    implied control count for row i is N[i] - Y[i].sum() and must be
    nonnegative.  Categorical data is the special case N[i] == 1.
    """

    Y: np.ndarray  # (n, J-1) nonnegative integer counts
    N: np.ndarray  # (n,) positive integer trial counts
    locations: np.ndarray  # (n, 2)
    J: int
    class_labels: list[str]

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=np.int64)
        self.N = np.asarray(self.N, dtype=np.int64)
        self.locations = as_locations(self.locations)
        if self.Y.ndim != 2:
            raise InvalidInputError(f"Y must be 2-d, got shape {self.Y.shape}")
        n = self.Y.shape[0]
        if self.J < 2:
            raise InvalidInputError(f"need at least 2 classes, got J={self.J}")
        if self.Y.shape[1] != self.J - 1:
            raise InvalidInputError(
                f"Y has {self.Y.shape[1]} columns but J-1={self.J - 1}"
            )
        if self.N.shape != (n,) or self.locations.shape != (n, 2):
            raise InvalidInputError(
                f"inconsistent row counts: Y={self.Y.shape}, N={self.N.shape}, "
                f"locations={self.locations.shape}"
            )
        if len(self.class_labels) != self.J:
            raise InvalidInputError(
                f"{len(self.class_labels)} labels for J={self.J} classes"
            )
        if np.any(self.Y < 0) or np.any(self.N < 1):
            raise InvalidInputError("counts must be nonnegative and trials positive")
        over = self.Y.sum(axis=1) > self.N
        if np.any(over):
            i = int(np.argmax(over))
            raise InvalidInputError(
                f"row {i}: class counts sum to {self.Y[i].sum()} > N={self.N[i]}"
            )

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def control_counts(self) -> np.ndarray:
        return self.N - self.Y.sum(axis=1)

    @property
    def is_categorical(self) -> bool:
        return bool(np.all(self.N == 1))

    @cached_property
    def log_norm_const(self) -> np.ndarray:
        """Per-row log multinomial coefficients (constant in the parameters)."""
        return (
            gammaln(self.N + 1)
            - gammaln(self.Y + 1).sum(axis=1)
            - gammaln(self.control_counts + 1)
        )

    @classmethod
    def from_outcomes(cls, outcomes, locations, class_labels: list[str]) -> "Dataset":
        """Build a categorical dataset (N=1) from per-point class indexes.

        Args:
            outcomes: (n,) integer class indexes in [0, J); J-1 is control.
            locations: (n, 2) coordinates.
            class_labels: J labels, control last.
        """
        outcomes = np.asarray(outcomes, dtype=np.int64)
        J = len(class_labels)
        if outcomes.min(initial=0) < 0 or outcomes.max(initial=0) >= J:
            raise InvalidInputError("outcome indexes out of range")
        n = outcomes.shape[0]
        Y = np.zeros((n, J - 1), dtype=np.int64)
        obs = outcomes < J - 1
        Y[np.nonzero(obs)[0], outcomes[obs]] = 1
        return cls(Y=Y, N=np.ones(n, dtype=np.int64), locations=locations,
                   J=J, class_labels=list(class_labels))


# ---------------------------------------------------------------------------
# factor matrix and its free-entry vector


def gamma_dim(J: int, u: int) -> int:
    """Number of free (strictly lower-triangular) entries of Gamma."""
    if not 1 <= u <= J - 1:
        raise InvalidInputError(f"latent dimension u={u} outside [1, {J - 1}]")
    return (J - 1) * u - u * (u + 1) // 2


def combined_factor_param_count(J: int, u: int) -> int:
    """Free entries of Gamma plus the u marginal precisions.

    This is the parameter count of the identified rank-u factorization,
    (J-1)u - u(u-1)/2; the reduction versus an unconstrained (J-1)x(J-1)
    covariance is (J-u-1)(J-u)/2.
    """
    return gamma_dim(J, u) + u


def free_indices(J: int, u: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/column indexes of Gamma's free entries, column-wise order."""
    rows, cols = [], []
    for j in range(u):
        for i in range(j + 1, J - 1):
            rows.append(i)
            cols.append(j)
    return np.asarray(rows, dtype=np.intp), np.asarray(cols, dtype=np.intp)


def unpack_gamma(gamma: np.ndarray, J: int, u: int) -> np.ndarray:
    """Materialize the unit-lower-triangular Gamma from its free entries."""
    gamma = np.asarray(gamma, dtype=float)
    d = gamma_dim(J, u)
    if gamma.shape != (d,):
        raise InvalidInputError(f"gamma has shape {gamma.shape}, expected ({d},)")
    G = np.zeros((J - 1, u))
    G[np.arange(u), np.arange(u)] = 1.0
    rows, cols = free_indices(J, u)
    G[rows, cols] = gamma
    return G


def pack_gamma(Gamma: np.ndarray, u: int | None = None) -> np.ndarray:
    """Extract the free entries of Gamma, column-wise (inverse of unpack)."""
    Gamma = np.asarray(Gamma, dtype=float)
    if u is None:
        u = Gamma.shape[1]
    J = Gamma.shape[0] + 1
    rows, cols = free_indices(J, u)
    return Gamma[rows, cols].copy()


@dataclass(frozen=True)
class FactorMatrix:
    """The constrained factor matrix Gamma with its free-entry vector."""

    J: int
    u: int
    gamma: np.ndarray = field(repr=False)
    Gamma: np.ndarray = field(repr=False)

    @classmethod
    def from_free(cls, gamma, J: int, u: int) -> "FactorMatrix":
        gamma = np.asarray(gamma, dtype=float)
        return cls(J=J, u=u, gamma=gamma, Gamma=unpack_gamma(gamma, J, u))

    @classmethod
    def from_matrix(cls, Gamma) -> "FactorMatrix":
        Gamma = np.asarray(Gamma, dtype=float)
        J, u = Gamma.shape[0] + 1, Gamma.shape[1]
        g = pack_gamma(Gamma, u)
        rebuilt = unpack_gamma(g, J, u)
        if not np.array_equal(rebuilt, Gamma):
            raise InvalidInputError(
                "matrix is not unit-lower-triangular in its leading u x u block"
            )
        return cls(J=J, u=u, gamma=g, Gamma=Gamma)


def induced_row_covariance(fm: FactorMatrix, omega) -> np.ndarray:
    """Rank-u row covariance Gamma diag(omega)^-1 Gamma^T."""
    omega = np.asarray(omega, dtype=float)
    if omega.shape != (fm.u,) or np.any(omega <= 0):
        raise InvalidInputError("omega must be a positive vector of length u")
    return (fm.Gamma / omega) @ fm.Gamma.T


def factor_from_covariance(Sigma: np.ndarray, u: int) -> tuple[np.ndarray, np.ndarray]:
    """Recover (gamma, omega) from a rank-u covariance built by the bijection.

    Runs the order-preserving LDL recursion: omega_j is the reciprocal of the
    j-th pivot and Gamma's column j is the scaled pivot column.  Valid for
    matrices of the exact form Gamma diag(omega)^-1 Gamma^T with
    unit-lower-triangular Gamma.
    """
    S = np.array(Sigma, dtype=float, copy=True)
    m = S.shape[0]
    J = m + 1
    G = np.zeros((m, u))
    omega = np.zeros(u)
    for j in range(u):
        pivot = S[j, j]
        if pivot <= 0:
            raise InvalidInputError(
                f"pivot {j} is {pivot:.3e}; matrix is not of rank-{u} factored form"
            )
        omega[j] = 1.0 / pivot
        G[:, j] = S[:, j] / pivot
        S -= pivot * np.outer(G[:, j], G[:, j])
    return pack_gamma(G, u), omega


# ---------------------------------------------------------------------------
# parameter state


@dataclass(frozen=True)
class ParamState:
    """One joint draw of all model unknowns (mu, W, omega, gamma, phi)."""

    mu: np.ndarray  # (J-1,)
    W: np.ndarray  # (k, u)
    omega: np.ndarray  # (u,) positive
    gamma: np.ndarray  # (gamma_dim(J, u),)
    phi: float

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float))
        object.__setattr__(self, "W", np.asarray(self.W, dtype=float))
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=float))
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=float))
        J, u, k = self.J, self.u, self.k
        if self.W.shape != (k, u):
            raise InvalidInputError(f"W has shape {self.W.shape}, expected (k, {u})")
        if self.gamma.shape != (gamma_dim(J, u),):
            raise InvalidInputError(
                f"gamma has length {self.gamma.size}, expected {gamma_dim(J, u)}"
            )
        if np.any(self.omega <= 0):
            raise InvalidInputError("omega entries must be positive")
        if not self.phi > 0:
            raise InvalidInputError(f"phi must be positive, got {self.phi}")

    @property
    def J(self) -> int:
        return self.mu.shape[0] + 1

    @property
    def u(self) -> int:
        return self.omega.shape[0]

    @property
    def k(self) -> int:
        return self.W.shape[0]

    @property
    def Gamma(self) -> np.ndarray:
        return unpack_gamma(self.gamma, self.J, self.u)

    def factor_matrix(self) -> FactorMatrix:
        return FactorMatrix.from_free(self.gamma, self.J, self.u)

    def replace(self, **changes) -> "ParamState":
        return replace(self, **changes)


# ---------------------------------------------------------------------------
# hyperpriors


def _prec_chol_logdet(prec: np.ndarray, name: str) -> tuple[np.ndarray, float]:
    prec = np.asarray(prec, dtype=float)
    if prec.size == 0:
        return prec.reshape(0, 0), 0.0
    if not np.allclose(prec, prec.T, rtol=1e-10, atol=1e-12):
        raise InvalidInputError(f"{name} precision matrix is not symmetric")
    try:
        L = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        raise InvalidInputError(f"{name} precision matrix is not positive definite")
    return L, 2.0 * float(np.sum(np.log(np.diag(L))))


@dataclass
class Hyperpriors:
    """Prior location/precision for mu and gamma, Gamma priors for omega, phi.

    Precision matrices are factored once at construction; alpha/beta pairs
    use the shape/rate parameterization.
    """

    m_mu: np.ndarray
    Q_mu: np.ndarray
    m_gamma: np.ndarray
    Q_gamma: np.ndarray
    alpha_omega: np.ndarray
    beta_omega: np.ndarray
    alpha_phi: float
    beta_phi: float

    def __post_init__(self):
        self.m_mu = np.atleast_1d(np.asarray(self.m_mu, dtype=float))
        self.Q_mu = np.atleast_2d(np.asarray(self.Q_mu, dtype=float))
        self.m_gamma = np.asarray(self.m_gamma, dtype=float).reshape(-1)
        self.Q_gamma = np.asarray(self.Q_gamma, dtype=float)
        if self.m_gamma.size:
            self.Q_gamma = np.atleast_2d(self.Q_gamma)
        else:
            self.Q_gamma = self.Q_gamma.reshape(0, 0)
        self.alpha_omega = np.atleast_1d(np.asarray(self.alpha_omega, dtype=float))
        self.beta_omega = np.atleast_1d(np.asarray(self.beta_omega, dtype=float))
        if np.any(self.alpha_omega <= 0) or np.any(self.beta_omega <= 0):
            raise InvalidInputError("omega prior shapes/rates must be positive")
        if self.alpha_phi <= 0 or self.beta_phi <= 0:
            raise InvalidInputError("phi prior shape/rate must be positive")
        self._Q_mu_chol, self._Q_mu_logdet = _prec_chol_logdet(self.Q_mu, "mu")
        self._Q_gamma_chol, self._Q_gamma_logdet = _prec_chol_logdet(
            self.Q_gamma, "gamma"
        )

    def log_prior_mu(self, mu: np.ndarray) -> float:
        return _mvn_logpdf_prec(mu, self.m_mu, self.Q_mu,
                                self._Q_mu_chol, self._Q_mu_logdet)

    def log_prior_gamma(self, gamma: np.ndarray) -> float:
        if self.m_gamma.size == 0:
            return 0.0
        return _mvn_logpdf_prec(gamma, self.m_gamma, self.Q_gamma,
                                self._Q_gamma_chol, self._Q_gamma_logdet)

    def log_prior_omega(self, omega: np.ndarray) -> float:
        return float(np.sum(gamma_logpdf(omega, self.alpha_omega, self.beta_omega)))

    def log_prior_phi(self, phi: float) -> float:
        return float(gamma_logpdf(phi, self.alpha_phi, self.beta_phi))


@dataclass(frozen=True)
class PriorSettings:
    """Scalar prior settings expanded to full Hyperpriors for a given (J, u).

    mu and gamma get iid normal priors with the stated mean and sd; omega
    entries, and phi, get Gamma(shape, rate) priors.
    """

    mu_mean: float = 0.0
    mu_sd: float = 1.0
    gamma_mean: float = 0.0
    gamma_sd: float = 1.0
    omega_shape: float = 4.0
    omega_rate: float = 4.0
    phi_shape: float = 4.0
    phi_rate: float = 20.0

    def build(self, J: int, u: int) -> Hyperpriors:
        d = gamma_dim(J, u)
        return Hyperpriors(
            m_mu=np.full(J - 1, self.mu_mean),
            Q_mu=np.eye(J - 1) / self.mu_sd**2,
            m_gamma=np.full(d, self.gamma_mean),
            Q_gamma=np.eye(d) / self.gamma_sd**2,
            alpha_omega=np.full(u, self.omega_shape),
            beta_omega=np.full(u, self.omega_rate),
            alpha_phi=self.phi_shape,
            beta_phi=self.phi_rate,
        )


def gamma_logpdf(x, shape, rate):
    """Log density of Gamma(shape, rate) at x (elementwise)."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise InvalidInputError("Gamma density evaluated at non-positive value")
    return shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x


def _mvn_logpdf_prec(x, mean, prec, chol, logdet) -> float:
    d = x.shape[-1]
    r = np.asarray(x, dtype=float) - mean
    quad = float(r @ (prec @ r))
    return 0.5 * (logdet - d * np.log(2.0 * np.pi) - quad)


# ---------------------------------------------------------------------------
# link, likelihood, posterior


def softmax(psi) -> np.ndarray:
    """Map logits to class probabilities, control class implicit at zero.

    For a length J-1 input returns the J-1 non-control probabilities
    p_j = exp(psi_j) / (1 + sum_l exp(psi_l)); a 2-d input is mapped
    row-wise.  Computed with a max shift over the augmented vector
    (psi, 0), so inputs with magnitude up to ~700 neither overflow nor
    underflow to all-zero.
    """
    psi = np.asarray(psi, dtype=float)
    if not np.all(np.isfinite(psi)):
        raise InvalidInputError("softmax input contains non-finite entries")
    one_d = psi.ndim == 1
    P = psi[None, :] if one_d else psi
    m = np.maximum(P.max(axis=1), 0.0)
    e = np.exp(P - m[:, None])
    denom = e.sum(axis=1) + np.exp(-m)
    out = e / denom[:, None]
    return out[0] if one_d else out


def _log_denom(Psi: np.ndarray) -> np.ndarray:
    """Row-wise log(1 + sum_j exp(Psi_ij)), max-shifted."""
    m = np.maximum(Psi.max(axis=1), 0.0)
    return m + np.log(np.exp(Psi - m[:, None]).sum(axis=1) + np.exp(-m))


def compute_logits(state: ParamState, basis: np.ndarray) -> np.ndarray:
    """Logit matrix Psi = 1 mu^T + B W Gamma^T for the given basis matrix."""
    B = np.asarray(basis, dtype=float)
    if B.ndim != 2 or B.shape[1] != state.k:
        raise InvalidInputError(
            f"basis has shape {B.shape}; expected (n, k={state.k}) to match W"
        )
    return state.mu + (B @ state.W) @ state.Gamma.T


def log_likelihood_core(Y: np.ndarray, N: np.ndarray, Psi: np.ndarray) -> float:
    """Multinomial log-likelihood without the combinatorial constants."""
    return float(np.sum(Y * Psi) - N @ _log_denom(Psi))


def pointwise_log_likelihood(state: ParamState, data: Dataset,
                             basis: np.ndarray) -> np.ndarray:
    """Per-observation multinomial log-pmf (constants included)."""
    Psi = compute_logits(state, basis)
    return (
        data.log_norm_const
        + (data.Y * Psi).sum(axis=1)
        - data.N * _log_denom(Psi)
    )


def log_likelihood(state: ParamState, data: Dataset, basis: np.ndarray) -> float:
    """Total multinomial log-likelihood, normalizing constants included."""
    return float(pointwise_log_likelihood(state, data, basis).sum())


def w_log_prior(W: np.ndarray, omega: np.ndarray, spatial: SpatialBasis) -> float:
    """Sum over factors of log MVN(w_j | 0, (omega_j Q)^-1).

    Keeps the (k/2) log omega_j and (1/2) log det Q terms because both omega
    and phi vary across the chain.
    """
    k = W.shape[0]
    LtW = spatial.Q_chol.T @ W  # quadratic forms via the cached factor
    quads = np.sum(LtW * LtW, axis=0)
    return float(
        np.sum(
            0.5 * k * np.log(omega)
            + 0.5 * spatial.log_det_Q
            - 0.5 * k * np.log(2.0 * np.pi)
            - 0.5 * omega * quads
        )
    )


def log_posterior_unnormalized(state: ParamState, data: Dataset,
                               basis: np.ndarray, spatial: SpatialBasis,
                               priors: Hyperpriors) -> float:
    """Joint log posterior up to the normalizing constant.

    Args:
        state: Current parameter values.
        basis: B(phi) evaluated at the data locations, consistent with
            state.phi.
        spatial: Q(phi) bundle, also consistent with state.phi.
        priors: Hyperprior settings.
    """
    if abs(spatial.phi - state.phi) > 1e-12 * max(1.0, state.phi):
        raise InvalidInputError(
            f"spatial basis was built for phi={spatial.phi}, state has {state.phi}"
        )
    return (
        log_likelihood(state, data, basis)
        + priors.log_prior_mu(state.mu)
        + w_log_prior(state.W, state.omega, spatial)
        + priors.log_prior_omega(state.omega)
        + priors.log_prior_gamma(state.gamma)
        + priors.log_prior_phi(state.phi)
    )


def sample_w_prior(spatial: SpatialBasis, omega: np.ndarray,
                   rng: np.random.Generator) -> np.ndarray:
    """Draw W with columns w_j ~ MVN(0, (omega_j Q)^-1)."""
    k = spatial.knots.k
    u = omega.shape[0]
    Z = rng.standard_normal((k, u))
    X = solve_triangular(spatial.Q_chol, Z, trans="T", lower=True)
    return X / np.sqrt(omega)
