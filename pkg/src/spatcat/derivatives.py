"""Gradients and Hessians of the conditional log-posteriors.

Each function returns the derivative of the joint log posterior with respect
to one block (a factor's knot weights w_j, the free factor entries gamma, or
the class means mu) holding everything else fixed.  These drive the
Newton-Raphson mode searches and the Gaussian proposal covariances in the
sampler.

Conventions: residual matrix R = Y - diag(N) P; eta_i = W^T b_i is the
length-u latent effect at observation i; gamma indexes Gamma's strictly
lower-triangular entries column-wise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    Dataset,
    Hyperpriors,
    ParamState,
    compute_logits,
    free_indices,
    softmax,
)
from .errors import InvalidInputError


@dataclass(frozen=True)
class GradHess:
    """Gradient vector and (symmetric) Hessian matrix of a log density."""

    grad: np.ndarray
    hess: np.ndarray


def _symmetrize(H: np.ndarray) -> np.ndarray:
    return 0.5 * (H + H.T)


def _probs_and_resid(state: ParamState, data: Dataset,
                     basis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    P = softmax(compute_logits(state, basis))
    R = data.Y - data.N[:, None] * P
    return P, R


def grad_hess_w(j: int, state: ParamState, data: Dataset,
                basis: np.ndarray, Q: np.ndarray) -> GradHess:
    """Derivatives for factor j's knot weights w_j.

    grad = B^T R Gamma_j - omega_j Q w_j
    hess = -omega_j Q - B^T diag(c) B, with
    c_i = N_i [ sum_l p_il Gamma_lj^2 - (sum_l p_il Gamma_lj)^2 ] >= 0.
    """
    if not 0 <= j < state.u:
        raise InvalidInputError(f"factor index {j} outside [0, {state.u})")
    B = np.asarray(basis, dtype=float)
    P, R = _probs_and_resid(state, data, basis)
    Gj = state.Gamma[:, j]
    omega_j = state.omega[j]
    grad = B.T @ (R @ Gj) - omega_j * (Q @ state.W[:, j])
    c = data.N * (P @ Gj**2 - (P @ Gj) ** 2)
    hess = -omega_j * Q - (B * c[:, None]).T @ B
    return GradHess(grad=grad, hess=_symmetrize(hess))


def grad_hess_mu(state: ParamState, data: Dataset, basis: np.ndarray,
                 priors: Hyperpriors) -> GradHess:
    """Derivatives for the logit-scale class means mu.

    grad = R^T 1 - Q_mu (mu - m_mu)
    hess = -Q_mu - sum_i N_i [ diag(p_i) - p_i p_i^T ].
    """
    P, R = _probs_and_resid(state, data, basis)
    grad = R.sum(axis=0) - priors.Q_mu @ (state.mu - priors.m_mu)
    NP = data.N[:, None] * P
    hess = -priors.Q_mu - np.diag(NP.sum(axis=0)) + NP.T @ P
    return GradHess(grad=grad, hess=_symmetrize(hess))


def grad_hess_gamma(state: ParamState, data: Dataset, basis: np.ndarray,
                    priors: Hyperpriors) -> GradHess:
    """Derivatives for the free factor entries gamma.

    The data term of the gradient is the free-entry selection of R^T B W;
    the Hessian accumulates the selected submatrix of
    -sum_i N_i [ (eta_i eta_i^T) kron (diag(p_i) - p_i p_i^T) ]
    directly, never materializing the Kronecker product.  (With column-wise
    vec(Gamma) the latent-effect factor sits on the left of the product.)
    """
    J, u = state.J, state.u
    rows, cols = free_indices(J, u)
    d = rows.size
    if d == 0:
        return GradHess(grad=np.zeros(0), hess=np.zeros((0, 0)))
    B = np.asarray(basis, dtype=float)
    P, R = _probs_and_resid(state, data, basis)
    eta = B @ state.W  # (n, u)

    grad_data = (R.T @ eta)[rows, cols]
    grad = grad_data - priors.Q_gamma @ (state.gamma - priors.m_gamma)

    # Entry (r, s) of the data Hessian is
    #   -sum_i N_i A_i[rows_r, rows_s] eta_i[cols_r] eta_i[cols_s]
    # with A_i = diag(p_i) - p_i p_i^T.  The p p^T part is a single Gram
    # product; the diag part groups free entries sharing a class row.
    sqrtN = np.sqrt(data.N.astype(float))
    V = sqrtN[:, None] * P[:, rows] * eta[:, cols]  # (n, d)
    hess_data = V.T @ V
    for a in np.unique(rows):
        sel = np.nonzero(rows == a)[0]
        Ga = (sqrtN * np.sqrt(P[:, a]))[:, None] * eta[:, cols[sel]]
        hess_data[np.ix_(sel, sel)] -= Ga.T @ Ga

    hess = -priors.Q_gamma + hess_data
    return GradHess(grad=grad, hess=_symmetrize(hess))
