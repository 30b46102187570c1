"""Shared fixtures and numerical helpers for the test suite."""

import numpy as np
import pytest

from spatcat.basis import KnotSet, build_basis, build_precision
from spatcat.model import Dataset, ParamState, PriorSettings, gamma_dim, softmax, unpack_gamma


def central_diff_grad(f, x, h=1e-5):
    """Central finite differences of a scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def central_diff_jac(grad_fn, x, h=1e-4):
    """Central finite differences of a vector function (Hessian from grad)."""
    x = np.asarray(x, dtype=float)
    g0 = grad_fn(x)
    Jac = np.zeros((g0.size, x.size))
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        Jac[:, i] = (grad_fn(x + e) - grad_fn(x - e)) / (2.0 * h)
    return Jac


def rel_err(a, b):
    """Max-norm error of b against a, relative to max(1, |a|_inf)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0:
        return 0.0
    scale = max(1.0, np.max(np.abs(a)))
    return float(np.max(np.abs(a - b)) / scale)


def random_instance(rng, n=12, k=3, J=4, u=2, phi=0.3, logit_scale=0.6,
                    max_trials=1):
    """A small random dataset + parameter state + spatial structures.

    Keeps logits moderate so finite differences stay well conditioned.
    """
    locations = rng.uniform(0.0, 1.0, size=(n, 2))
    knots = KnotSet(rng.uniform(0.0, 1.0, size=(k, 2)))
    spatial = build_precision(knots, phi)
    B = build_basis(locations, knots, phi)

    mu = logit_scale * rng.standard_normal(J - 1)
    W = logit_scale * rng.standard_normal((k, u))
    gamma = logit_scale * rng.standard_normal(gamma_dim(J, u))
    omega = rng.uniform(0.5, 2.0, size=u)
    state = ParamState(mu=mu, W=W, omega=omega, gamma=gamma, phi=phi)

    P = softmax(state.mu + (B @ W) @ unpack_gamma(gamma, J, u).T)
    probs_full = np.column_stack([P, 1.0 - P.sum(axis=1)])
    N = rng.integers(1, max_trials + 1, size=n)
    Y = np.zeros((n, J - 1), dtype=np.int64)
    for i in range(n):
        draws = rng.multinomial(N[i], probs_full[i])
        Y[i] = draws[:-1]
    labels = [f"c{j}" for j in range(1, J)] + ["control"]
    data = Dataset(Y=Y, N=N, locations=locations, J=J, class_labels=labels)
    return data, state, spatial, B


@pytest.fixture
def rng():
    return np.random.default_rng(20260809)
