"""Surface and functional estimators with tour- and batch-based standard errors.

``B_n(h)`` is the average of the prior ratio ``f_h`` over the trace and
estimates the marginal-likelihood ratio ``m_y(h)/m_y(h1)``; ``I_hat_g(h)`` is
the ``f_h``-weighted average of a recorded functional.  Pointwise standard
errors come from the delta method applied to iid tour sums; a batch-means
alternative is provided for traces without regeneration marks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from priorscan.chain_runtime import (
    ChainTrace,
    TourIndex,
    TourSums,
    as_ratio_family,
    tour_sums,
)
from priorscan.prior_family import RatioFamily

__all__ = [
    "SurfaceEstimate",
    "FunctionalEstimate",
    "estimate_B",
    "weights",
    "estimate_I",
    "ess",
    "pointwise_se_B",
    "pointwise_se_I",
    "cov_I_pair",
    "batch_values",
    "batch_se",
    "surface_on_grid",
    "functional_on_grid",
    "ESS_UNRELIABLE",
]

# below this effective sample size, reweighted estimates are flagged unreliable
ESS_UNRELIABLE = 50.0


# ------------------------------------------------------------------
# result containers
# ------------------------------------------------------------------

@dataclass
class SurfaceEstimate:
    """B_n over a grid with pointwise SEs and effective sample sizes."""

    grid: np.ndarray        # (G, k)
    values: np.ndarray      # (G,)
    se: np.ndarray          # (G,)
    ess: np.ndarray         # (G,)
    n: int
    R: int | None = None
    se_method: str = "tour"

    @property
    def unreliable(self) -> np.ndarray:
        return self.ess < ESS_UNRELIABLE

    def to_csv(self, path) -> None:
        _emit_csv(path, self.grid, self.values, self.se, self.ess)


@dataclass
class FunctionalEstimate:
    """I_hat_g over a grid with pointwise SEs and effective sample sizes."""

    grid: np.ndarray
    values: np.ndarray
    se: np.ndarray
    ess: np.ndarray
    g_name: str = ""
    n: int = 0
    R: int | None = None
    se_method: str = "tour"

    @property
    def unreliable(self) -> np.ndarray:
        return self.ess < ESS_UNRELIABLE

    def to_csv(self, path) -> None:
        _emit_csv(path, self.grid, self.values, self.se, self.ess)


def _emit_csv(path, grid, values, se, ess_vals) -> None:
    grid = np.atleast_2d(grid)
    k = grid.shape[1]
    with open(path, "w") as fh:
        fh.write(",".join(f"h_{i+1}" for i in range(k)) + ",value,se,ess\n")
        for row, v, s, e in zip(grid, values, se, ess_vals):
            cells = ["%.17g" % x for x in (*row, v, s, e)]
            fh.write(",".join(cells) + "\n")


# ------------------------------------------------------------------
# point estimates
# ------------------------------------------------------------------

def _logf(trace: ChainTrace, spec_or_family, h) -> np.ndarray:
    family = as_ratio_family(spec_or_family, trace)
    return family.log_f(np.asarray(h, dtype=float), trace.Tmat)


def estimate_B(trace: ChainTrace, spec_or_family, h) -> float:
    """(1/n) sum_i f_h(theta_i), computed as exp(logsumexp - log n)."""
    if trace.n == 0:
        raise ValueError("empty trace")
    logf = _logf(trace, spec_or_family, h)
    return float(np.exp(logsumexp(logf) - np.log(trace.n)))


def weights(trace: ChainTrace, spec_or_family, h) -> np.ndarray:
    """Normalized importance weights w_i^(h); nonnegative, sum to 1."""
    logf = _logf(trace, spec_or_family, h)
    logw = logf - logsumexp(logf)
    return np.exp(logw)


def estimate_I(trace: ChainTrace, spec_or_family, g_name: str, h) -> float:
    """Weighted posterior-expectation estimate sum_i g_i w_i^(h)."""
    g = trace.functional(g_name)
    return float(g @ weights(trace, spec_or_family, h))


def ess(trace: ChainTrace, spec_or_family, h) -> float:
    """Effective sample size 1 / sum_i w_i^2, in [1, n]."""
    w = weights(trace, spec_or_family, h)
    return float(1.0 / np.sum(w * w))


# ------------------------------------------------------------------
# tour-based standard errors (delta method over iid tours)
# ------------------------------------------------------------------

def pointwise_se_B(tsums: TourSums) -> float:
    """Delta-method SE of B_n from the tour pairs (S_r, N_r)."""
    R = tsums.R
    if R < 2:
        raise ValueError("need at least 2 complete tours")
    S, N = tsums.S, tsums.N
    Sbar, Nbar = S.mean(), N.mean()
    # influence of the ratio S/N per tour: (S_r - (Sbar/Nbar) N_r) / Nbar
    a = (S - (Sbar / Nbar) * N) / Nbar
    var = float(a @ a) / (R - 1)
    return float(np.sqrt(var / R) * np.exp(tsums.log_scale))


def _influence_I(tsums: TourSums, g_name: str) -> tuple[np.ndarray, float]:
    T = tsums.T[g_name]
    S = tsums.S
    I_hat = float(T.sum() / S.sum())
    a = (T - I_hat * S) / S.mean()
    return a, I_hat


def pointwise_se_I(tsums: TourSums, g_name: str) -> float:
    """Delta-method SE of I_hat_g from the tour triples (T_r, S_r, N_r).

    The ratio T/S does not involve N directly, so the three-statistic delta
    method reduces to the two-statistic one; scale shifts cancel.
    """
    R = tsums.R
    if R < 2:
        raise ValueError("need at least 2 complete tours")
    a, _ = _influence_I(tsums, g_name)
    var = float(a @ a) / (R - 1)
    return float(np.sqrt(var / R))


def cov_I_pair(tsums1: TourSums, tsums2: TourSums, g_name: str) -> float:
    """Plug-in covariance of the limit process sqrt(R)(I_hat - I) at two points.

    Symmetric in its arguments; at equal points it equals R times the squared
    pointwise SE exactly (same influence values).
    """
    if tsums1.R != tsums2.R:
        raise ValueError("tour sums must come from the same segmentation")
    R = tsums1.R
    if R < 2:
        raise ValueError("need at least 2 complete tours")
    a, _ = _influence_I(tsums1, g_name)
    b, _ = _influence_I(tsums2, g_name)
    return float(a @ b) / (R - 1)


# ------------------------------------------------------------------
# batch-means alternative (no regeneration marks needed)
# ------------------------------------------------------------------

def batch_values(trace: ChainTrace, spec_or_family, h, M: int,
                 g_name: str | None = None) -> np.ndarray:
    """Per-batch B_n (or I_hat_g when ``g_name`` given) over M consecutive
    batches of floor(n/M) draws; the trailing remainder is dropped."""
    if M < 2:
        raise ValueError("need at least 2 batches")
    L = trace.n // M
    if L < 1:
        raise ValueError("more batches than draws")
    logf = _logf(trace, spec_or_family, h)[:M * L].reshape(M, L)
    shift = logf.max()
    f = np.exp(logf - shift)
    if g_name is None:
        return f.mean(axis=1) * np.exp(shift)
    g = trace.functional(g_name)[:M * L].reshape(M, L)
    return (g * f).sum(axis=1) / f.sum(axis=1)


def batch_se(trace: ChainTrace, spec_or_family, h, M: int,
             g_name: str | None = None) -> float:
    """Batch-means SE of B_n (or I_hat_g): sd of batch values over sqrt(M)."""
    vals = batch_values(trace, spec_or_family, h, M, g_name=g_name)
    return float(vals.std(ddof=1) / np.sqrt(M))


# ------------------------------------------------------------------
# grid sweeps
# ------------------------------------------------------------------

def _log_f_grid(family: RatioFamily, grid: np.ndarray, Tmat: np.ndarray,
                chunk: int = 64) -> np.ndarray:
    """(n, G) matrix of log f_h over a grid of hyperparameters."""
    if hasattr(family, "log_f_many"):
        return family.log_f_many(grid, Tmat)
    cols = [family.log_f(h, Tmat) for h in grid]
    return np.stack(cols, axis=1)


def _grid_core(trace, spec_or_family, grid, tours, M):
    """Shared per-grid-point f evaluation; returns scaled f, segmentation info."""
    family = as_ratio_family(spec_or_family, trace)
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    if tours is not None:
        n_eff = tours.n_eff
    else:
        n_eff = trace.n
        if M is None:
            M = max(2, int(np.ceil(np.sqrt(trace.n))))
    logf = _log_f_grid(family, grid, trace.Tmat[:n_eff])
    return family, grid, logf, n_eff, M


def surface_on_grid(trace: ChainTrace, spec_or_family, grid,
                    tours: TourIndex | None = None,
                    M: int | None = None) -> SurfaceEstimate:
    """B_n with pointwise SEs over a grid.

    SEs are tour-based when a :class:`TourIndex` is supplied, otherwise
    batch-means with ``M`` batches (default ceil(sqrt(n)))."""
    family, grid, logf, n_eff, M = _grid_core(trace, spec_or_family, grid, tours, M)
    shift = logf.max(axis=0)
    f = np.exp(logf - shift[None, :])                    # (n_eff, G)
    sums = f.sum(axis=0)
    values = sums / n_eff * np.exp(shift)
    ess_vals = sums ** 2 / np.einsum("ij,ij->j", f, f)

    G = grid.shape[0]
    se = np.empty(G)
    if tours is not None:
        N = tours.lengths.astype(float)
        unit_tours = bool(N.max() == 1.0)
        S = f if unit_tours else np.add.reduceat(f, tours.starts0, axis=0)
        R = tours.R
        Sbar, Nbar = S.mean(axis=0), N.mean()
        a = S - np.outer(N / Nbar, Sbar)
        a /= Nbar
        var = np.einsum("rj,rj->j", a, a) / (R - 1)
        se = np.sqrt(var / R) * np.exp(shift)
        return SurfaceEstimate(grid=grid, values=values, se=se, ess=ess_vals,
                               n=n_eff, R=R, se_method="tour")
    L = n_eff // M
    fb = f[:M * L].reshape(M, L, G).mean(axis=1)         # (M, G) batch means
    se = fb.std(axis=0, ddof=1) / np.sqrt(M) * np.exp(shift)
    return SurfaceEstimate(grid=grid, values=values, se=se, ess=ess_vals,
                           n=n_eff, R=None, se_method="batch")


def functional_on_grid(trace: ChainTrace, spec_or_family, g_name: str, grid,
                       tours: TourIndex | None = None,
                       M: int | None = None) -> FunctionalEstimate:
    """I_hat_g with pointwise SEs over a grid (tour- or batch-based)."""
    family, grid, logf, n_eff, M = _grid_core(trace, spec_or_family, grid, tours, M)
    g = trace.functional(g_name)[:n_eff]
    shift = logf.max(axis=0)
    f = np.exp(logf - shift[None, :])
    sums = f.sum(axis=0)
    values = (g @ f) / sums
    ess_vals = sums ** 2 / np.einsum("ij,ij->j", f, f)

    G = grid.shape[0]
    if tours is not None:
        unit_tours = bool(tours.lengths.max() == 1)
        if unit_tours:
            S, T = f, g[:, None] * f
        else:
            S = np.add.reduceat(f, tours.starts0, axis=0)
            T = np.add.reduceat(g[:, None] * f, tours.starts0, axis=0)
        R = tours.R
        a = (T - values[None, :] * S) / S.mean(axis=0)[None, :]
        var = np.einsum("rj,rj->j", a, a) / (R - 1)
        se = np.sqrt(var / R)
        return FunctionalEstimate(grid=grid, values=values, se=se, ess=ess_vals,
                                  g_name=g_name, n=n_eff, R=R, se_method="tour")
    L = n_eff // M
    fb = f[:M * L].reshape(M, L, G)
    gb = g[:M * L].reshape(M, L)
    Ib = np.einsum("ml,mlj->mj", gb, fb) / fb.sum(axis=1)
    se = Ib.std(axis=0, ddof=1) / np.sqrt(M)
    return FunctionalEstimate(grid=grid, values=values, se=se, ess=ess_vals,
                              g_name=g_name, n=n_eff, R=None, se_method="batch")
