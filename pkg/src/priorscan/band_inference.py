"""Globally valid confidence bands for I_g(·) (and B(·)) via batching.

The trace is cut into M consecutive batches; the sup over the grid of the
scaled deviation of each batch curve from the full-trace curve gives M
approximately iid sup statistics, and an upper order statistic of those sets a
single half-width valid simultaneously at every grid point.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from priorscan.chain_runtime import ChainTrace, as_ratio_family
from priorscan.estimators import _log_f_grid

__all__ = ["BandReport", "global_band"]

MIN_BATCH_LEN = 10


@dataclass
class BandReport:
    """Simultaneous band: center(h) ± half_width with one width for all h."""

    grid: np.ndarray          # (G, k)
    center: np.ndarray        # (G,)
    half_width: float
    M: int
    alpha: float
    sup_stats: np.ndarray     # (M,) the batch sup statistics, unsorted
    n: int
    target: str               # "I:<name>" or "B"

    @property
    def lower(self) -> np.ndarray:
        return self.center - self.half_width

    @property
    def upper(self) -> np.ndarray:
        return self.center + self.half_width

    def covers(self, truth: np.ndarray) -> bool:
        truth = np.asarray(truth, dtype=float)
        return bool(np.all(np.abs(truth - self.center) <= self.half_width + 1e-12))

    def to_csv(self, path) -> None:
        k = self.grid.shape[1]
        with open(path, "w") as fh:
            fh.write(",".join(f"h_{i+1}" for i in range(k))
                     + ",center,lower,upper\n")
            for row, c in zip(self.grid, self.center):
                cells = ["%.17g" % x for x in
                         (*row, c, c - self.half_width, c + self.half_width)]
                fh.write(",".join(cells) + "\n")

    def to_json(self, extra: dict | None = None) -> str:
        payload = {
            "M": self.M,
            "alpha": self.alpha,
            "half_width": self.half_width,
            "n": self.n,
            "target": self.target,
            "sup_stats_sorted": np.sort(self.sup_stats).tolist(),
        }
        if extra:
            payload.update(extra)
        return json.dumps(payload, sort_keys=True, indent=1)


def global_band(trace: ChainTrace, spec_or_family, g_name: str | None,
                grid, M: int | None = None, alpha: float = 0.05) -> BandReport:
    """Simultaneous (1 - alpha) band for I_g(·) over the grid.

    ``g_name=None`` produces the analogous band for B(·).  The trace is split
    into M consecutive batches of floor(n/M) draws (trailing remainder
    dropped); the half-width is n^{-1/2} times the ceil((1-alpha) M)-th order
    statistic of the batch sup deviations scaled by sqrt(n/M).
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    family = as_ratio_family(spec_or_family, trace)
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    n = trace.n
    if M is None:
        M = max(2, int(np.ceil(np.sqrt(n))))
    if M < 2:
        raise ValueError("need at least 2 batches for an order statistic")
    L = n // M
    if L < MIN_BATCH_LEN:
        raise ValueError(f"batch length {L} < {MIN_BATCH_LEN}; reduce M")
    n_used = M * L

    logf = _log_f_grid(family, grid, trace.Tmat[:n_used])     # (n_used, G)
    shift = logf.max(axis=0)
    f = np.exp(logf - shift[None, :])
    G = grid.shape[0]
    fb = f.reshape(M, L, G)

    if g_name is None:
        center = f.mean(axis=0) * np.exp(shift)
        batch = fb.mean(axis=1) * np.exp(shift)[None, :]
        target = "B"
    else:
        g = trace.functional(g_name)[:n_used]
        center = (g @ f) / f.sum(axis=0)
        gb = g.reshape(M, L)
        batch = np.einsum("ml,mlj->mj", gb, fb) / fb.sum(axis=1)
        target = f"I:{g_name}"

    sup_stats = np.sqrt(n_used / M) * np.abs(batch - center[None, :]).max(axis=1)
    order = int(np.ceil((1.0 - alpha) * M))                    # 1-based index
    half_width = float(np.sort(sup_stats)[order - 1] / np.sqrt(n_used))
    return BandReport(grid=grid, center=center, half_width=half_width, M=M,
                      alpha=alpha, sup_stats=sup_stats, n=n_used, target=target)
