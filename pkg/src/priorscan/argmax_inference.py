"""Empirical-Bayes argmax of B_n and its sampling uncertainty.

The maximizer ``h_n`` of the estimated surface targets the maximizer of the
marginal likelihood.  With regenerative tours, the sandwich variance
``v_n^2 = J_n^{-1} tau_n^2 J_n^{-1}`` yields an asymptotic confidence ellipse
scaled by the tour count R; without regeneration marks, a batch-means
covariance plays the same role.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp
from scipy.stats import chi2

from priorscan.chain_runtime import ChainTrace, TourSums, as_ratio_family
from priorscan.estimators import _log_f_grid
from priorscan.prior_family import HyperRect

__all__ = [
    "MaxResult",
    "Ellipse",
    "ArgmaxReport",
    "maximize_surface",
    "hessian_Jn",
    "tau_n_sq",
    "v_n_sq",
    "confidence_ellipse",
    "batch_argmax_cov",
]


# ------------------------------------------------------------------
# surface maximization
# ------------------------------------------------------------------

@dataclass
class MaxResult:
    h: np.ndarray
    log_value: float
    boundary: bool
    multistart_consistent: bool

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.h, dtype=dtype)


def maximize_surface(trace: ChainTrace, spec_or_family, rect: HyperRect, *,
                     grid_points: int = 21, tol: float = 1e-6,
                     multi_starts: int = 8, seed: int = 0) -> MaxResult:
    """Argmax of log B_n over the rectangle.

    Coarse grid (``grid_points`` per axis, ties broken by lowest lexicographic
    index) followed by bounded Nelder-Mead refinement; ``multi_starts`` extra
    random starts probe for multimodality.  The log is maximized since the
    argmax is invariant to strictly increasing transforms.
    """
    if trace.n == 0:
        raise ValueError("empty trace")
    family = as_ratio_family(spec_or_family, trace)
    log_n = np.log(trace.n)

    def neg_obj(h):
        return -(float(logsumexp(family.log_f(np.asarray(h, dtype=float),
                                              trace.Tmat))) - log_n)

    grid = rect.grid(grid_points)
    logf = _log_f_grid(family, grid, trace.Tmat)
    obj = logsumexp(logf, axis=0) - log_n
    best = int(np.argmax(obj))  # argmax returns the lowest index on ties

    bounds = list(zip(rect.lower, rect.upper))
    opts = {"xatol": tol, "fatol": 1e-12, "maxiter": 2000}

    def refine(x0):
        res = minimize(neg_obj, np.asarray(x0, dtype=float),
                       method="Nelder-Mead", bounds=bounds, options=opts)
        return rect.clip(res.x), -float(res.fun)

    h_best, v_best = refine(grid[best])
    consistent = True
    rng = np.random.default_rng(seed)
    for x0 in rect.sample(rng, multi_starts):
        h_alt, v_alt = refine(x0)
        if v_alt > v_best + 1e-10:
            if np.linalg.norm(h_alt - h_best) > 10 * tol:
                consistent = False
            h_best, v_best = h_alt, v_alt
    return MaxResult(h=h_best, log_value=v_best,
                     boundary=rect.on_boundary(h_best),
                     multistart_consistent=consistent)


# ------------------------------------------------------------------
# sandwich variance
# ------------------------------------------------------------------

def hessian_Jn(tsums: TourSums) -> np.ndarray:
    """J_n(h) = (sum_r hessS_r) / (sum_r N_r) = (1/n) sum_i hess f_h(theta_i)."""
    if tsums.hessS is None:
        raise ValueError("tour sums lack Hessian terms (with_derivs=False)")
    J = tsums.hessS.sum(axis=0) / tsums.N.sum() * np.exp(tsums.log_scale)
    if not np.all(np.isfinite(J)):
        raise ValueError("non-finite J_n")
    return 0.5 * (J + J.T)


def tau_n_sq(tsums: TourSums) -> np.ndarray:
    """Tour-based covariance of the surface gradient.

    (1/(R Nbar^2)) sum_r (gradS_r - N_r gradSbar/Nbar)(...)^T.
    """
    if tsums.gradS is None:
        raise ValueError("tour sums lack gradient terms (with_derivs=False)")
    R = tsums.R
    if R < 2:
        raise ValueError("need at least 2 complete tours")
    N = tsums.N
    Nbar = N.mean()
    gbar = tsums.gradS.mean(axis=0)
    dev = tsums.gradS - np.outer(N, gbar / Nbar)
    tau = dev.T @ dev / (R * Nbar ** 2) * np.exp(2.0 * tsums.log_scale)
    return 0.5 * (tau + tau.T)


def v_n_sq(J_n: np.ndarray, tau_sq: np.ndarray,
           cond_limit: float = 1e12) -> np.ndarray:
    """Sandwich J_n^{-1} tau_n^2 J_n^{-1}; symmetric PSD by construction."""
    cond = np.linalg.cond(J_n)
    if not np.isfinite(cond) or cond > cond_limit:
        raise np.linalg.LinAlgError(
            f"J_n numerically singular (condition number {cond:.3g})")
    Jinv = np.linalg.inv(J_n)
    v = Jinv @ tau_sq @ Jinv.T
    return 0.5 * (v + v.T)


# ------------------------------------------------------------------
# confidence ellipse
# ------------------------------------------------------------------

@dataclass
class Ellipse:
    """Region {h : R (h - center)^T shape^{-1} (h - center) <= threshold}."""

    center: np.ndarray
    shape: np.ndarray        # v_n^2
    R: int
    alpha: float
    threshold: float
    boundary: np.ndarray     # (128, k) polyline (k = 2 only)

    def contains(self, h) -> bool:
        d = np.asarray(h, dtype=float) - self.center
        stat = self.R * float(d @ np.linalg.solve(self.shape, d))
        return stat <= self.threshold + 1e-12


def confidence_ellipse(h_n, v_sq: np.ndarray, R: int, alpha: float,
                       n_boundary: int = 128) -> Ellipse:
    """Asymptotic (1 - alpha) confidence ellipse for the argmax."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    h_n = np.asarray(h_n, dtype=float)
    k = h_n.size
    v_sq = np.asarray(v_sq, dtype=float)
    evals, evecs = np.linalg.eigh(0.5 * (v_sq + v_sq.T))
    if np.any(evals < -1e-10 * max(1.0, evals.max())):
        raise ValueError("v_n^2 is not positive semidefinite")
    threshold = float(chi2.ppf(1.0 - alpha, df=k))
    if k == 2:
        ang = np.linspace(0.0, 2.0 * np.pi, n_boundary, endpoint=False)
        circ = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        root = evecs @ np.diag(np.sqrt(np.maximum(evals, 0.0)))
        boundary = h_n[None, :] + np.sqrt(threshold / R) * circ @ root.T
    else:
        boundary = np.empty((0, k))
    return Ellipse(center=h_n, shape=v_sq, R=int(R), alpha=alpha,
                   threshold=threshold, boundary=boundary)


# ------------------------------------------------------------------
# batching alternative
# ------------------------------------------------------------------

def batch_argmax_cov(trace: ChainTrace, spec_or_family, rect: HyperRect,
                     M: int, h_n=None, grid_points: int = 21,
                     tol: float = 1e-6):
    """Batch-means covariance of the argmax, centered at the full-trace h_n.

    Returns (cov, boundary_count): per-batch argmaxes over M consecutive
    batches; cov = (1/M) sum_m (n/M) (h^[m] - h_n)(h^[m] - h_n)^T.
    """
    if M < 2:
        raise ValueError("need at least 2 batches")
    L = trace.n // M
    if L < 2:
        raise ValueError("batches shorter than 2 draws")
    family = as_ratio_family(spec_or_family, trace)
    if h_n is None:
        h_n = maximize_surface(trace, family, rect, grid_points=grid_points,
                               tol=tol, multi_starts=0).h
    h_n = np.asarray(h_n, dtype=float)

    boundary_count = 0
    diffs = np.empty((M, rect.k))
    for m in range(M):
        sub = _slice_trace(trace, m * L, (m + 1) * L)
        res = maximize_surface(sub, family, rect, grid_points=grid_points,
                               tol=tol, multi_starts=0)
        boundary_count += int(res.boundary)
        diffs[m] = res.h - h_n
    n_used = M * L
    cov = (n_used / M) * (diffs.T @ diffs) / M
    return 0.5 * (cov + cov.T), boundary_count


def _slice_trace(trace: ChainTrace, a: int, b: int) -> ChainTrace:
    delta = trace.delta[a:b].copy()
    delta[0] = True  # batches are treated as standalone runs
    return ChainTrace(Tmat=trace.Tmat[a:b],
                      g={k: v[a:b] for k, v in trace.g.items()},
                      delta=delta, meta=dict(trace.meta), ends_at_regen=False)


# ------------------------------------------------------------------
# report
# ------------------------------------------------------------------

@dataclass
class ArgmaxReport:
    h_n: np.ndarray
    J_n: np.ndarray | None
    tau_n_sq: np.ndarray | None
    v_n_sq: np.ndarray
    R: int
    n: int
    E_N1_hat: float
    alpha: float
    chi2_threshold: float
    boundary_flag: bool
    ellipse: Ellipse
    method: str = "tour"     # "tour" or "batch"

    def to_json(self, extra: dict | None = None) -> str:
        payload = {
            "h_n": self.h_n.tolist(),
            "J_n": None if self.J_n is None else self.J_n.tolist(),
            "tau_n_sq": None if self.tau_n_sq is None else self.tau_n_sq.tolist(),
            "v_n_sq": self.v_n_sq.tolist(),
            "R": self.R,
            "n": self.n,
            "E_N1_hat": self.E_N1_hat,
            "alpha": self.alpha,
            "chi2_threshold": self.chi2_threshold,
            "boundary_flag": self.boundary_flag,
            "method": self.method,
            "ellipse_boundary": self.ellipse.boundary.tolist(),
        }
        if extra:
            payload.update(extra)
        return json.dumps(payload, sort_keys=True, indent=1)
