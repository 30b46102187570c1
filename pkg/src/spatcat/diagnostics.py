"""Chain diagnostics: effective sample size, Monte Carlo error, split R-hat."""

from __future__ import annotations

import numpy as np

from .errors import InvalidInputError


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance at all lags via FFT."""
    n = x.size
    xc = x - x.mean()
    nfft = int(2 ** np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, nfft)
    acov = np.fft.irfft(f * np.conjugate(f), nfft)[:n].real
    return acov / n


def ess_autocorr(x) -> float:
    """Effective sample size from the initial positive autocorrelation sequence.

    Sums autocorrelations over consecutive lag pairs until a pair sum goes
    non-positive (Geyer's initial positive sequence), then
    ESS = n / (1 + 2 sum rho_t).  Returns n for a white-noise chain and
    1.0 for a constant chain.
    """
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    if n < 2:
        return float(max(n, 1))
    acov = _autocovariance(x)
    if acov[0] <= 0:
        return 1.0
    rho = acov / acov[0]
    tau = 1.0
    t = 1
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
        t += 2
    return float(min(n, max(1.0, n / tau)))


def mcse_mean(x) -> float:
    """Monte Carlo standard error of the chain mean."""
    x = np.asarray(x, dtype=float).ravel()
    if x.size < 2:
        return float("inf")
    return float(x.std(ddof=1) / np.sqrt(ess_autocorr(x)))


def split_rhat(chains) -> float:
    """Classic split-chain potential scale reduction factor.

    Args:
        chains: (n_chains, n_draws) array or a list of equal-length 1-d
            chains; each chain is split in half before comparing.

    Returns:
        Scalar R-hat; near 1 indicates the half-chains agree.
    """
    arr = np.asarray(chains, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] < 4:
        raise InvalidInputError("need >= 4 draws per chain for split R-hat")
    half = arr.shape[1] // 2
    splits = np.vstack([arr[:, :half], arr[:, half:2 * half]])
    m, n = splits.shape
    means = splits.mean(axis=1)
    variances = splits.var(axis=1, ddof=1)
    B = n * means.var(ddof=1)
    Wv = variances.mean()
    if Wv <= 0:
        return 1.0
    var_plus = (n - 1) / n * Wv + B / n
    return float(np.sqrt(var_plus / Wv))
