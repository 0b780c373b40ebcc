"""Serial tempering: one chain over (label, state) mixing posteriors at anchors.

The invariant distribution is a mixture over anchor hyperparameters h_1..h_m
with tuning constants zeta controlling label occupancy; replacing the
single-chain denominator by the mixture density keeps every downstream
estimator formula unchanged while stabilizing weights across all of the
rectangle.  Uncertainty for serial-tempering traces uses batching (no
regeneration construction is attempted).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Protocol

import numpy as np
from scipy.special import logsumexp

from priorscan.chain_runtime import ChainTrace, simulate
from priorscan.prior_family import ExpFamilySpec, HyperRect, RatioFamily

__all__ = [
    "STGrid",
    "STModel",
    "MixtureRatio",
    "lattice_anchors",
    "st_step",
    "st_denominator",
    "st_log_denominator",
    "run_st",
    "tune_zeta",
    "STKernel",
    "LABEL_FUNCTIONAL",
]

LABEL_FUNCTIONAL = "_label"


@dataclass(frozen=True)
class STGrid:
    """Anchor hyperparameters with tuning constants and occupancy diagnostics."""

    anchors: np.ndarray                 # (m, k)
    zetas: np.ndarray                   # (m,)
    occupancies: np.ndarray | None = None

    def __post_init__(self):
        anchors = np.atleast_2d(np.asarray(self.anchors, dtype=float))
        zetas = np.asarray(self.zetas, dtype=float)
        object.__setattr__(self, "anchors", anchors)
        object.__setattr__(self, "zetas", zetas)
        if zetas.shape != (anchors.shape[0],):
            raise ValueError("need one zeta per anchor")
        if not np.all(zetas > 0):
            raise ValueError("zetas must be positive")

    @property
    def m(self) -> int:
        return self.anchors.shape[0]


def lattice_anchors(rect: HyperRect, shape) -> np.ndarray:
    """Uniform anchor lattice over the rectangle, snaked so that consecutive
    indices are lattice neighbors (nearest-neighbor label proposals stay local)."""
    if np.isscalar(shape):
        shape = [int(shape)] * rect.k
    axes = [np.linspace(lo, hi, p) for lo, hi, p in
            zip(rect.lower, rect.upper, shape)]
    if rect.k == 1:
        return axes[0][:, None]
    if rect.k == 2:
        rows = []
        for i, a in enumerate(axes[0]):
            col = axes[1] if i % 2 == 0 else axes[1][::-1]
            rows.append(np.column_stack([np.full_like(col, a), col]))
        return np.vstack(rows)
    raise ValueError("anchor lattices supported for k <= 2; pass explicit anchors")


# ------------------------------------------------------------------
# mixture denominator and ratio family
# ------------------------------------------------------------------

def st_log_denominator(spec: ExpFamilySpec, grid: STGrid, Tmat: np.ndarray) -> np.ndarray:
    """log of (1/m) sum_j nu_{h_j}(theta)/zeta_j, per draw (base measure dropped;
    it cancels in every ratio)."""
    Tmat = np.atleast_2d(np.asarray(Tmat, dtype=float))
    omegas = np.stack([np.asarray(spec.canon(h), dtype=float) for h in grid.anchors])
    As = np.array([float(spec.log_norm(h)) for h in grid.anchors])
    terms = Tmat @ omegas.T - As[None, :] - np.log(grid.zetas)[None, :]
    return logsumexp(terms, axis=1) - np.log(grid.m)


def st_denominator(spec: ExpFamilySpec, grid: STGrid, T) -> float:
    """The mixture denominator itself (always positive)."""
    return float(np.exp(st_log_denominator(spec, grid, np.atleast_2d(T))[0]))


class MixtureRatio(RatioFamily):
    """f_h = nu_h / mixture for serial-tempering traces.

    The denominator does not depend on h, so the h-derivatives of log f_h are
    those of log nu_h alone.
    """

    def __init__(self, spec: ExpFamilySpec, grid: STGrid):
        self.spec = spec
        self.grid = grid
        self.k = spec.k

    def _log_nu(self, h, Tmat):
        h = np.asarray(h, dtype=float)
        return Tmat @ np.asarray(self.spec.canon(h), dtype=float) \
            - float(self.spec.log_norm(h))

    def log_f(self, h, Tmat):
        return self._log_nu(h, Tmat) - st_log_denominator(self.spec, self.grid, Tmat)

    def grad_log_f(self, h, Tmat):
        h = np.asarray(h, dtype=float)
        return Tmat @ self.spec.jac(h) - self.spec.grad_A(h)[None, :]

    def hess_log_f(self, h, Tmat):
        h = np.asarray(h, dtype=float)
        hc = self.spec.hess_canon(h)
        return np.tensordot(Tmat, hc, axes=(1, 0)) - self.spec.hess_A(h)[None, :, :]

    def log_f_many(self, h_grid, Tmat):
        omegas = np.stack([np.asarray(self.spec.canon(h), dtype=float) for h in h_grid])
        As = np.array([float(self.spec.log_norm(h)) for h in h_grid])
        denom = st_log_denominator(self.spec, self.grid, Tmat)
        return Tmat @ omegas.T - As[None, :] - denom[:, None]


# ------------------------------------------------------------------
# the serial-tempering chain
# ------------------------------------------------------------------

class STModel(Protocol):
    """Per-anchor machinery a model must supply to run serial tempering."""

    def start(self, rng): ...
    def anchor_step(self, j: int, theta, rng): ...
    def suffstat(self, theta) -> np.ndarray: ...
    def observe(self, theta) -> tuple[np.ndarray, dict[str, float]]: ...


def st_step(state, grid: STGrid, spec: ExpFamilySpec, model: STModel,
            rng: np.random.Generator):
    """One serial-tempering transition on (label, theta).

    The label proposal is uniform on {j-1, j+1}; an out-of-range proposal
    leaves the label unchanged (symmetric proposal, so it cancels in the
    acceptance ratio).  The likelihood cancels too, leaving only prior ratios
    through the sufficient statistic.  Then theta moves by the kernel of the
    (possibly new) label.
    """
    j, theta = state
    m = grid.m
    if m > 1:
        jp = j + (1 if rng.random() < 0.5 else -1)
        if 0 <= jp < m:
            T = np.asarray(model.suffstat(theta), dtype=float)
            log_num = float(np.asarray(spec.canon(grid.anchors[jp])) @ T) \
                - float(spec.log_norm(grid.anchors[jp])) - np.log(grid.zetas[jp])
            log_den = float(np.asarray(spec.canon(grid.anchors[j])) @ T) \
                - float(spec.log_norm(grid.anchors[j])) - np.log(grid.zetas[j])
            if np.log(rng.random()) < log_num - log_den:
                j = jp
    theta = model.anchor_step(j, theta, rng)
    return (j, theta)


class STKernel:
    """Kernel over (label, theta); labels are recorded as a trace functional."""

    has_regen = False

    def __init__(self, model: STModel, spec: ExpFamilySpec, grid: STGrid,
                 kernel_id: str = "serial-tempering", start_label: int = 0):
        self.model = model
        self.spec = spec
        self.grid = grid
        self.kernel_id = kernel_id
        self.start_label = start_label

    def start(self, rng):
        return (self.start_label, self.model.start(rng))

    def step(self, state, rng):
        return st_step(state, self.grid, self.spec, self.model, rng), False

    def observe(self, state):
        j, theta = state
        T, g = self.model.observe(theta)
        g = dict(g)
        g[LABEL_FUNCTIONAL] = float(j)
        return T, g


def occupancies(trace: ChainTrace, m: int) -> np.ndarray:
    labels = trace.functional(LABEL_FUNCTIONAL).astype(int)
    return np.bincount(labels, minlength=m) / labels.size


def run_st(model: STModel, spec: ExpFamilySpec, grid: STGrid, n: int,
           seed=None, rng=None, meta: dict | None = None) -> ChainTrace:
    """Run the serial-tempering chain for n steps; occupancies go in meta."""
    kernel = STKernel(model, spec, grid)
    info = dict(meta or {})
    info["st_anchors"] = grid.anchors.tolist()
    info["st_zetas"] = grid.zetas.tolist()
    trace = simulate(kernel, n=n, seed=seed, rng=rng, meta=info)
    trace.meta["st_occupancies"] = occupancies(trace, grid.m).tolist()
    return trace


def bridge_init_zetas(traces: list[ChainTrace], spec: ExpFamilySpec,
                      anchors: np.ndarray) -> np.ndarray:
    """Initial zetas from one short chain per anchor.

    Consecutive-anchor normalizing-constant ratios are estimated as the
    geometric mean of the forward and backward reweighting estimates (robust
    when one direction has poor overlap) and accumulated along the snake.
    """
    from priorscan.estimators import estimate_B
    from priorscan.prior_family import ExpFamilyRatio

    m = anchors.shape[0]
    fams = [ExpFamilyRatio(spec, anchors[j]) for j in range(m)]
    log_z = np.zeros(m)
    for j in range(m - 1):
        fwd = np.log(estimate_B(traces[j], fams[j], anchors[j + 1]))
        bwd = np.log(estimate_B(traces[j + 1], fams[j + 1], anchors[j]))
        log_z[j + 1] = log_z[j] + 0.5 * (fwd - bwd)
    return np.exp(log_z - log_z.mean())


def tune_zeta(model: STModel, spec: ExpFamilySpec, grid: STGrid, *,
              rounds: int = 10, steps_per_round: int = 5000,
              seed=None, target_ratio: float = 2.0,
              mode: str = "reweight") -> tuple[STGrid, bool]:
    """Iteratively adjust zeta toward uniform label occupancy.

    Stops when the max/min occupancy ratio over a tuning run is at most
    ``target_ratio``; returns (tuned grid, converged flag).  Two update rules:

    - "reweight" (default): after each round, set zeta_j to the round's
      mixture-reweighted estimate of the normalizing constant at anchor j —
      a fixed-point iteration whose exact solution gives uniform occupancy,
      and which updates anchors the labels rarely visited.
    - "occupancy": zeta_j <- zeta_j * (m * occupancy_j)^kappa with kappa
      starting at 0.5 and halving each round.
    """
    if mode not in ("reweight", "occupancy"):
        raise ValueError(f"unknown tuning mode {mode!r}")
    rng = np.random.default_rng(seed)
    kappa = 0.5
    best = grid
    best_ratio = np.inf
    for _ in range(rounds):
        trace = run_st(model, spec, grid, n=steps_per_round, rng=rng)
        occ = occupancies(trace, grid.m)
        occ = np.maximum(occ, 1.0 / (2.0 * steps_per_round))  # keep log finite
        ratio = occ.max() / occ.min()
        if ratio < best_ratio:
            best, best_ratio = replace(grid, occupancies=occ), ratio
        if ratio <= target_ratio:
            return replace(grid, occupancies=occ), True
        if mode == "reweight":
            family = MixtureRatio(spec, grid)
            logf = family.log_f_many(grid.anchors, trace.Tmat)   # (n, m)
            log_B = logsumexp(logf, axis=0) - np.log(trace.n)
            log_z = log_B - log_B.mean()
            zetas = np.exp(log_z)
        else:
            zetas = grid.zetas * (grid.m * occ) ** kappa
            zetas = zetas / np.exp(np.mean(np.log(zetas)))       # fix overall scale
            kappa *= 0.5
        grid = STGrid(anchors=grid.anchors, zetas=zetas)
    return best, False
