"""Chain traces, regenerative (split-chain) simulation, and tour statistics.

A :class:`ChainTrace` stores, per draw, the sufficient statistic ``T_i``, the
recorded functional values ``g_i`` and a regeneration flag ``delta_i`` — never
full states.  Tours are the segments between regenerations; per-tour sums of
``f_h`` and its hyperparameter derivatives feed every downstream variance
formula.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from priorscan.prior_family import ExpFamilySpec, ExpFamilyRatio, RatioFamily

__all__ = [
    "ChainTrace",
    "TourIndex",
    "TourSums",
    "MinorizationPair",
    "Kernel",
    "IIDKernel",
    "simulate",
    "split_step",
    "indep_mh_regen_prob",
    "segment_tours",
    "tour_sums",
    "as_ratio_family",
    "save_trace",
    "load_trace",
]

TRACE_FORMAT_VERSION = 1


# ------------------------------------------------------------------
# trace container + serialization
# ------------------------------------------------------------------

@dataclass
class ChainTrace:
    """Per-draw record of sufficient statistics, functionals and regen flags.

    ``ends_at_regen`` is true when the draw after the last stored one would
    have been a regeneration (the trace ends exactly at a tour boundary);
    R-target simulation guarantees this, n-target simulation does not.
    """

    Tmat: np.ndarray                 # (n, stat_dim)
    g: dict[str, np.ndarray]         # each (n,)
    delta: np.ndarray                # (n,) bool
    meta: dict = field(default_factory=dict)
    ends_at_regen: bool = False

    def __post_init__(self):
        self.Tmat = np.atleast_2d(np.asarray(self.Tmat, dtype=float))
        self.delta = np.asarray(self.delta, dtype=bool)
        self.g = {k: np.asarray(v, dtype=float) for k, v in self.g.items()}
        n = self.Tmat.shape[0]
        if self.delta.shape != (n,):
            raise ValueError("delta length must match number of draws")
        for name, v in self.g.items():
            if v.shape != (n,):
                raise ValueError(f"functional {name!r} length must match draws")
        if n and not self.delta[0]:
            raise ValueError("delta[0] must be set (chain starts from the regeneration measure)")

    @property
    def n(self) -> int:
        return self.Tmat.shape[0]

    @property
    def stat_dim(self) -> int:
        return self.Tmat.shape[1]

    @property
    def functional_names(self) -> list[str]:
        return list(self.g)

    def functional(self, name: str) -> np.ndarray:
        try:
            return self.g[name]
        except KeyError:
            raise KeyError(f"unknown functional {name!r}; "
                           f"recorded: {self.functional_names}") from None


def save_trace(trace: ChainTrace, path) -> None:
    """Write a trace as text: one JSON header line, then one row per draw.

    Floats use %.17g, which round-trips IEEE doubles bit-exactly.
    """
    names = trace.functional_names
    header = {
        "version": TRACE_FORMAT_VERSION,
        "n": trace.n,
        "stat_dim": trace.stat_dim,
        "functionals": names,
        "ends_at_regen": trace.ends_at_regen,
        "meta": trace.meta,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        gcols = [trace.g[name] for name in names]
        for i in range(trace.n):
            vals = [*trace.Tmat[i], *(col[i] for col in gcols)]
            fh.write(",".join("%.17g" % v for v in vals))
            fh.write(",%d\n" % int(trace.delta[i]))


def load_trace(path) -> ChainTrace:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("version") != TRACE_FORMAT_VERSION:
            raise ValueError(f"unsupported trace version {header.get('version')!r}")
        body = np.loadtxt(fh, delimiter=",", ndmin=2)
    stat_dim = header["stat_dim"]
    names = header["functionals"]
    Tmat = body[:, :stat_dim]
    g = {name: body[:, stat_dim + j] for j, name in enumerate(names)}
    delta = body[:, stat_dim + len(names)].astype(bool)
    return ChainTrace(Tmat=Tmat, g=g, delta=delta, meta=header.get("meta", {}),
                      ends_at_regen=header.get("ends_at_regen", False))


# ------------------------------------------------------------------
# kernels and simulation
# ------------------------------------------------------------------

class Kernel(Protocol):
    """Markov kernel with optional built-in regeneration marks.

    ``step`` returns the next state and whether that state was drawn from the
    regeneration measure.  Kernels without regeneration info set
    ``has_regen = False`` and always return delta = False.
    """

    has_regen: bool
    kernel_id: str

    def start(self, rng: np.random.Generator): ...
    def step(self, state, rng: np.random.Generator): ...
    def observe(self, state) -> tuple[np.ndarray, dict[str, float]]: ...


class IIDKernel:
    """Adapter turning an iid sampler into a kernel that regenerates every step."""

    has_regen = True

    def __init__(self, draw: Callable, observe: Callable, kernel_id: str = "iid"):
        self._draw = draw
        self._observe = observe
        self.kernel_id = kernel_id

    def start(self, rng):
        return self._draw(rng)

    def step(self, state, rng):
        return self._draw(rng), True

    def observe(self, state):
        return self._observe(state)


@dataclass(frozen=True)
class MinorizationPair:
    """Minorization K_theta(A) >= s(theta) Q(A) with the residual kernel.

    ``residual`` samples G_theta = (K_theta - s(theta) Q) / (1 - s(theta)).
    """

    s: Callable[[object], float]
    Q: Callable[[np.random.Generator], object]
    residual: Callable[[object, np.random.Generator], object]


def split_step(state, pair: MinorizationPair, rng: np.random.Generator):
    """One step of the split chain: regenerate from Q with prob s(state)."""
    p = float(pair.s(state))
    if not 0.0 <= p < 1.0:
        raise ValueError(f"minorization probability s={p} outside [0, 1)")
    if rng.random() < p:
        return pair.Q(rng), True
    return pair.residual(state, rng), False


def indep_mh_regen_prob(w_x: float, w_y: float, c: float) -> float:
    """Conditional regeneration probability on an accepted independence-MH move.

    ``w`` is the target/proposal density ratio; ``c`` the splitting constant.
    Derived from the minorization with s(x) proportional to min(1, c/w_x) and
    regeneration measure proportional to proposal * min(w, c); valid only for
    accepted moves x -> y.
    """
    if not (w_x > 0 and w_y > 0 and c > 0):
        raise ValueError("w_x, w_y, c must all be positive")
    if w_x <= c and w_y <= c:
        return max(w_x, w_y) / c
    if w_x >= c and w_y >= c:
        return c / min(w_x, w_y)
    return 1.0


def simulate(kernel: Kernel, *, n: int | None = None, R: int | None = None,
             seed=None, rng: np.random.Generator | None = None,
             meta: Mapping | None = None) -> ChainTrace:
    """Run a kernel for a fixed number of steps or complete tours.

    Exactly one of ``n`` (draw count) and ``R`` (complete-tour count) must be
    given.  With ``R``, the chain runs until the regeneration opening tour
    R+1 and drops that draw, so the trace ends exactly at a tour boundary.
    """
    if (n is None) == (R is None):
        raise ValueError("specify exactly one of n= and R=")
    if R is not None and not getattr(kernel, "has_regen", False):
        raise ValueError("kernel has no regeneration info; R-target unavailable "
                         "(use n= and batching-based inference)")
    if rng is None:
        rng = np.random.default_rng(seed)

    T_rows: list[np.ndarray] = []
    g_rows: dict[str, list[float]] = {}
    deltas: list[bool] = []

    state = kernel.start(rng)
    delta = True  # start is a draw from the regeneration measure
    flags_stored = 0
    while True:
        if R is not None and delta and flags_stored >= R:
            ends_at_regen = True
            break
        if delta:
            flags_stored += 1
        T, g = kernel.observe(state)
        T_rows.append(np.asarray(T, dtype=float))
        for name, val in g.items():
            g_rows.setdefault(name, []).append(float(val))
        deltas.append(delta)
        if n is not None and len(T_rows) >= n:
            ends_at_regen = False
            break
        state, delta = kernel.step(state, rng)

    info = {"kernel": getattr(kernel, "kernel_id", "unknown"), "n": len(T_rows)}
    if meta:
        info.update(meta)
    return ChainTrace(
        Tmat=np.stack(T_rows),
        g={k: np.asarray(v) for k, v in g_rows.items()},
        delta=np.asarray(deltas, dtype=bool),
        meta=info,
        ends_at_regen=ends_at_regen,
    )


# ------------------------------------------------------------------
# tours
# ------------------------------------------------------------------

@dataclass(frozen=True)
class TourIndex:
    """Regeneration boundaries tau_0 < ... < tau_R, 1-based, tau_R = n_eff + 1.

    ``n_eff`` is the trace length after dropping any partial final tour.
    """

    boundaries: np.ndarray  # (R + 1,) ints
    n_eff: int

    @property
    def R(self) -> int:
        return self.boundaries.size - 1

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.boundaries)

    @property
    def starts0(self) -> np.ndarray:
        """0-based start index of each tour, for reduceat-style segment sums."""
        return self.boundaries[:-1] - 1


def segment_tours(trace: ChainTrace) -> TourIndex:
    """Tour boundaries from the trace's regeneration flags.

    If the trace does not end at a regeneration, the final partial tour is
    dropped (estimators are ratios over complete tours).
    """
    flags = np.flatnonzero(trace.delta) + 1  # 1-based positions
    n_complete_flags = flags.size if trace.ends_at_regen else flags.size - 1
    if n_complete_flags < 1:
        raise ValueError("need at least 2 regeneration flags (or one flag in a "
                         "trace ending at a regeneration) to form a complete tour")
    if trace.ends_at_regen:
        boundaries = np.append(flags, trace.n + 1)
    else:
        boundaries = flags
    return TourIndex(boundaries=boundaries.astype(int), n_eff=int(boundaries[-1] - 1))


@dataclass(frozen=True)
class TourSums:
    """Per-tour sums of f_h, g * f_h and the h-derivatives of f_h.

    All sums carry a common log-scale shift: the stored values are the true
    sums times ``exp(-log_scale)``.  Ratios of sums (B-ratios, I estimates,
    sandwich variances) are scale-invariant; absolute quantities must be
    multiplied back by ``exp(log_scale)``.
    """

    h: np.ndarray
    N: np.ndarray                        # (R,) tour lengths
    S: np.ndarray                        # (R,)
    T: dict[str, np.ndarray]             # name -> (R,)
    gradS: np.ndarray | None             # (R, k)
    hessS: np.ndarray | None             # (R, k, k)
    log_scale: float

    @property
    def R(self) -> int:
        return self.N.size

    @property
    def n(self) -> int:
        return int(self.N.sum())


def _segment_sum(values: np.ndarray, starts0: np.ndarray) -> np.ndarray:
    """Sum of ``values`` over contiguous segments starting at ``starts0``."""
    return np.add.reduceat(values, starts0, axis=0)


def as_ratio_family(spec_or_family, trace: ChainTrace) -> RatioFamily:
    """Accept either a RatioFamily or an ExpFamilySpec (anchored at meta h1)."""
    if isinstance(spec_or_family, RatioFamily):
        return spec_or_family
    if isinstance(spec_or_family, ExpFamilySpec):
        h1 = trace.meta.get("h1")
        if h1 is None:
            raise ValueError("trace meta lacks 'h1'; pass an ExpFamilyRatio explicitly")
        return ExpFamilyRatio(spec_or_family, np.asarray(h1, dtype=float))
    raise TypeError(f"expected RatioFamily or ExpFamilySpec, got {type(spec_or_family)!r}")


def tour_sums(trace: ChainTrace, tours: TourIndex, spec_or_family, h,
              functionals: Sequence[str] | None = None,
              with_derivs: bool = True) -> TourSums:
    """Per-tour sums S_r, T_r and (optionally) grad/Hessian sums at ``h``.

    Evaluation is in log space with a global max shift recorded in
    ``log_scale``; see :class:`TourSums`.
    """
    family = as_ratio_family(spec_or_family, trace)
    h = np.asarray(h, dtype=float)
    if functionals is None:
        functionals = trace.functional_names
    n_eff = tours.n_eff
    Tmat = trace.Tmat[:n_eff]

    logf = family.log_f(h, Tmat)
    shift = float(logf.max()) if logf.size else 0.0
    f = np.exp(logf - shift)

    starts = tours.starts0
    S = _segment_sum(f, starts)
    T = {name: _segment_sum(trace.functional(name)[:n_eff] * f, starts)
         for name in functionals}

    gradS = hessS = None
    if with_derivs:
        u = family.grad_log_f(h, Tmat)                      # (n, k)
        gradS = _segment_sum(f[:, None] * u, starts)
        hess_log = family.hess_log_f(h, Tmat)               # (n, k, k)
        outer = u[:, :, None] * u[:, None, :]
        hessS = _segment_sum(f[:, None, None] * (outer + hess_log), starts)

    return TourSums(h=h, N=tours.lengths.astype(float), S=S, T=T,
                    gradS=gradS, hessS=hessS, log_scale=shift)
