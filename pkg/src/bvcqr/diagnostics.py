"""Convergence diagnostics: rank-normalized split R-hat and bulk ESS.

Arrays follow the sampler's layout: ``(n_draws, n_chains)`` for one
coordinate, ``(n_draws, n_chains, dim)`` for many.
"""

from __future__ import annotations

import logging
import warnings

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata

from .sampler import PosteriorDraws

log = logging.getLogger(__name__)


def _split(x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    half = n // 2
    # odd length: drop the middle draw
    return np.concatenate([x[:half], x[n - half :]], axis=1) if n % 2 else np.concatenate(
        [x[:half], x[half:]], axis=1
    )


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    flat = x.ravel()
    r = rankdata(flat, method="average")
    z = ndtri((r - 0.375) / (flat.size + 0.25))
    return z.reshape(x.shape)


def _rhat_core(x: np.ndarray) -> float:
    n, m = x.shape
    if np.ptp(x) == 0:
        return np.nan
    chain_mean = x.mean(axis=0)
    chain_var = x.var(axis=0, ddof=1)
    W = chain_var.mean()
    B = n * chain_mean.var(ddof=1)
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def split_rhat(x: np.ndarray) -> float:
    """Rank-normalized split R-hat: max of the bulk and folded-tail versions."""
    x = np.asarray(x, dtype=float)
    s = _split(x)
    bulk = _rhat_core(_rank_normalize(s))
    folded = np.abs(s - np.median(s))
    tail = _rhat_core(_rank_normalize(folded))
    vals = [v for v in (bulk, tail) if np.isfinite(v)]
    return max(vals) if vals else np.nan


def _autocov(x: np.ndarray) -> np.ndarray:
    """Autocovariance of each column via FFT, biased (divide by n)."""
    n = x.shape[0]
    xc = x - x.mean(axis=0)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, n=size, axis=0)
    acov = np.fft.irfft(f * np.conjugate(f), n=size, axis=0)[:n]
    return acov / n


def ess(x: np.ndarray) -> float:
    """Effective sample size of split chains with Geyer's monotone sequence."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, m = x.shape
    if np.ptp(x) == 0:
        return float(n * m)
    acov = _autocov(x)
    chain_mean = x.mean(axis=0)
    chain_var = acov[0] * n / (n - 1.0)
    mean_var = chain_var.mean()
    var_plus = mean_var * (n - 1.0) / n
    if m > 1:
        var_plus += chain_mean.var(ddof=1)
    rho = 1.0 - (mean_var - acov.mean(axis=1)) / var_plus
    rho[0] = 1.0

    # Geyer: sum adjacent pairs while positive, enforce monotone decrease
    t = 0
    pair_sums = []
    while t + 1 < n:
        p = rho[t] + rho[t + 1]
        if p <= 0:
            break
        pair_sums.append(p)
        t += 2
    pair_sums = np.minimum.accumulate(np.asarray(pair_sums)) if pair_sums else np.array([1.0])
    tau = -1.0 + 2.0 * pair_sums.sum()
    tau = max(tau, 1.0 / np.log10(n * m))
    return float(n * m / tau)


def bulk_ess(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return ess(_rank_normalize(_split(x)))


def mcse_mean(x: np.ndarray) -> float:
    """Monte Carlo standard error of the mean of one coordinate."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return float(x.std(ddof=1) / np.sqrt(ess(_split(x))))


def diagnostics(draws: PosteriorDraws) -> dict:
    """Per-coordinate R-hat/ESS plus sampler summaries.

    With a single chain, R-hat is omitted (``None``) and a warning is issued.
    """
    n, m, dim = draws.draws.shape
    if m < 2:
        warnings.warn("single chain: R-hat omitted", stacklevel=2)
    if n < 100:
        warnings.warn(f"only {n} draws per chain; diagnostics are unreliable", stacklevel=2)
    params = {}
    for j, name in enumerate(draws.names):
        x = draws.draws[:, :, j]
        rh = split_rhat(x) if m >= 2 else None
        params[name] = {
            "rhat": None if rh is None or not np.isfinite(rh) else float(rh),
            "ess_bulk": float(bulk_ess(x)),
        }
    depth = draws.tree_depth
    max_depth = draws.config.get("max_tree_depth")
    return {
        "n_draws": int(n),
        "n_chains": int(m),
        "divergent": int(draws.divergent.sum()),
        "divergent_fraction": draws.divergent_fraction,
        "divergent_per_chain": [int(v) for v in draws.divergent.sum(axis=0)],
        "step_size": [float(v) for v in draws.step_size[0]] if n else [],
        "tree_depth_mean": float(depth.mean()) if n else None,
        "tree_depth_max": int(depth.max()) if n else None,
        "max_tree_depth_hits": int((depth >= max_depth).sum()) if max_depth else None,
        "accept_stat_mean": float(draws.accept_stat.mean()) if n else None,
        "unreliable": draws.unreliable,
        "parameters": params,
    }


def max_rhat(report: dict, prefixes: tuple[str, ...]) -> float:
    vals = [
        v["rhat"]
        for k, v in report["parameters"].items()
        if k.startswith(prefixes) and v["rhat"] is not None
    ]
    return max(vals) if vals else np.nan
