"""Desk-scale latent Dirichlet allocation with a collapsed+augmented Gibbs chain.

Model: topics beta_t ~ Dir_V(eta), doc mixtures theta_d ~ Dir_K(alpha), token
topics z ~ Cat(theta_d), words ~ Cat(beta_z).  The hyperparameter is
h = (eta, alpha); the prior ratio depends on the state only through
T = (sum log beta_tv, sum log theta_dk) since the z and word terms carry no h.

One chain step is a collapsed Gibbs sweep over all tokens followed by
augmentation draws of (beta, theta) from their Dirichlet conditionals.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gammaln, polygamma, psi

from priorscan.chain_runtime import ChainTrace, simulate
from priorscan.prior_family import ExpFamilySpec, HyperRect, register_family

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is an optional speedup
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f

__all__ = [
    "LDAModel",
    "LDAState",
    "lda_spec",
    "lda_closeness",
    "synth_corpus",
    "save_corpus",
    "load_corpus",
    "Corpus",
]

SIMPLEX_CLAMP = 1e-300


def lda_spec(K: int, V: int, D: int) -> ExpFamilySpec:
    """(eta, alpha) exponential family over T = (sum log beta, sum log theta).

    A(eta, alpha) = -K[lgG(V eta) - V lgG(eta)] - D[lgG(K alpha) - K lgG(alpha)].
    Canonical coordinates are (eta - 1, alpha - 1).
    """

    def canon(h):
        return np.asarray(h, dtype=float) - 1.0

    def canon_jac(h):
        return np.eye(2)

    def canon_hess(h):
        return np.zeros((2, 2, 2))

    def log_norm(h):
        eta, alpha = h
        return float(-K * (gammaln(V * eta) - V * gammaln(eta))
                     - D * (gammaln(K * alpha) - K * gammaln(alpha)))

    def log_norm_grad(h):
        eta, alpha = h
        return np.array([-K * V * (psi(V * eta) - psi(eta)),
                         -D * K * (psi(K * alpha) - psi(alpha))])

    def log_norm_hess(h):
        eta, alpha = h
        d2e = -K * V * (V * polygamma(1, V * eta) - polygamma(1, eta))
        d2a = -D * K * (K * polygamma(1, K * alpha) - polygamma(1, alpha))
        return np.array([[d2e, 0.0], [0.0, d2a]])

    def log_norm_canon(omega):
        return log_norm(np.asarray(omega, dtype=float) + 1.0)

    return ExpFamilySpec(k=2, stat_dim=2, canon=canon, log_norm=log_norm,
                         canon_jac=canon_jac, canon_hess=canon_hess,
                         log_norm_grad=log_norm_grad, log_norm_hess=log_norm_hess,
                         log_norm_canon=log_norm_canon, name="lda-dirichlet")


# ------------------------------------------------------------------
# corpus
# ------------------------------------------------------------------

@dataclass(frozen=True)
class Corpus:
    docs: tuple            # tuple of int arrays of word ids
    V: int
    meta: dict = field(default_factory=dict)

    @property
    def D(self) -> int:
        return len(self.docs)

    @property
    def n_tokens(self) -> int:
        return sum(len(d) for d in self.docs)


def synth_corpus(seed: int, D: int = 6, V: int = 12, K: int = 2,
                 n_d: int = 30, eta: float = 0.5, alpha: float = 0.5) -> Corpus:
    """Documents drawn from the LDA generative model at known (eta, alpha)."""
    rng = np.random.default_rng(seed)
    beta = rng.dirichlet(np.full(V, eta), size=K)
    theta = rng.dirichlet(np.full(K, alpha), size=D)
    docs = []
    for d in range(D):
        z = rng.choice(K, size=n_d, p=theta[d])
        words = np.array([rng.choice(V, p=beta[k]) for k in z], dtype=np.int64)
        docs.append(words)
    return Corpus(docs=tuple(docs), V=V, meta={
        "seed": seed, "D": D, "V": V, "K": K, "n_d": n_d,
        "eta_true": eta, "alpha_true": alpha,
    })


def save_corpus(corpus: Corpus, path) -> None:
    """One document per line of whitespace-separated word ids + JSON sidecar."""
    path = Path(path)
    with open(path, "w") as fh:
        for doc in corpus.docs:
            fh.write(" ".join(str(int(w)) for w in doc) + "\n")
    sidecar = dict(corpus.meta)
    sidecar["V"] = corpus.V
    with open(path.with_suffix(path.suffix + ".json"), "w") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=1)


def load_corpus(path) -> Corpus:
    path = Path(path)
    docs = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            ids = [int(tok) for tok in line.split()]
            if not ids:
                raise ValueError(f"{path}:{line_no}: empty document")
            docs.append(np.asarray(ids, dtype=np.int64))
    with open(path.with_suffix(path.suffix + ".json")) as fh:
        meta = json.load(fh)
    V = int(meta["V"])
    for doc in docs:
        if doc.min() < 0 or doc.max() >= V:
            raise ValueError("word id outside vocabulary")
    return Corpus(docs=tuple(docs), V=V, meta=meta)


# ------------------------------------------------------------------
# sampler
# ------------------------------------------------------------------

@njit(cache=True)
def _collapsed_sweep(doc_ids, word_ids, z, ckv, ck, cdk, eta, alpha, rand):
    K = ckv.shape[0]
    V = ckv.shape[1]
    Veta = V * eta
    for i in range(doc_ids.size):
        d = doc_ids[i]
        w = word_ids[i]
        k_old = z[i]
        ckv[k_old, w] -= 1
        ck[k_old] -= 1
        cdk[d, k_old] -= 1
        total = 0.0
        for k in range(K):
            total += (ckv[k, w] + eta) / (ck[k] + Veta) * (cdk[d, k] + alpha)
        r = rand[i] * total
        acc = 0.0
        k_new = K - 1
        for k in range(K):
            acc += (ckv[k, w] + eta) / (ck[k] + Veta) * (cdk[d, k] + alpha)
            if r <= acc:
                k_new = k
                break
        z[i] = k_new
        ckv[k_new, w] += 1
        ck[k_new] += 1
        cdk[d, k_new] += 1


@dataclass
class LDAState:
    z: np.ndarray         # (n_tokens,) topic per token
    ckv: np.ndarray       # (K, V) topic-word counts
    ck: np.ndarray        # (K,)
    cdk: np.ndarray       # (D, K) doc-topic counts
    beta: np.ndarray      # (K, V) row-stochastic
    theta: np.ndarray     # (D, K) row-stochastic


def lda_closeness(state: LDAState, i: int, j: int, eps: float) -> float:
    """Indicator that doc mixtures theta_i and theta_j are within eps."""
    return float(np.linalg.norm(state.theta[i] - state.theta[j]) <= eps)


class LDAModel:
    """Collapsed+augmented Gibbs machinery over a fixed corpus."""

    def __init__(self, corpus: Corpus, K: int,
                 rect: HyperRect | None = None,
                 closeness_pairs: tuple = ((0, 1, 0.05),)):
        if any(len(d) == 0 for d in corpus.docs):
            raise ValueError("empty documents are rejected at load")
        self.corpus = corpus
        self.K = int(K)
        self.V = corpus.V
        self.D = corpus.D
        self.rect = rect if rect is not None else HyperRect(
            lower=[0.1, 0.1], upper=[2.0, 2.0])
        self.closeness_pairs = tuple(closeness_pairs)
        self.doc_ids = np.concatenate([
            np.full(len(doc), d, dtype=np.int64)
            for d, doc in enumerate(corpus.docs)])
        self.word_ids = np.concatenate(corpus.docs).astype(np.int64)

    def spec(self) -> ExpFamilySpec:
        return lda_spec(self.K, self.V, self.D)

    # -- state updates ----------------------------------------------------
    def init_state(self, rng: np.random.Generator) -> LDAState:
        z = rng.integers(0, self.K, size=self.word_ids.size)
        ckv = np.zeros((self.K, self.V), dtype=np.int64)
        cdk = np.zeros((self.D, self.K), dtype=np.int64)
        np.add.at(ckv, (z, self.word_ids), 1)
        np.add.at(cdk, (self.doc_ids, z), 1)
        state = LDAState(z=z, ckv=ckv, ck=ckv.sum(axis=1), cdk=cdk,
                         beta=np.zeros((self.K, self.V)),
                         theta=np.zeros((self.D, self.K)))
        return state

    def sweep(self, state: LDAState, h, rng: np.random.Generator) -> LDAState:
        """One collapsed scan over all tokens, then augmentation draws."""
        eta, alpha = float(h[0]), float(h[1])
        if eta <= 0 or alpha <= 0:
            raise ValueError("eta and alpha must be positive")
        rand = rng.random(self.word_ids.size)
        _collapsed_sweep(self.doc_ids, self.word_ids, state.z,
                         state.ckv, state.ck, state.cdk, eta, alpha, rand)
        # augmentation: beta_t ~ Dir(eta + counts), theta_d ~ Dir(alpha + counts)
        gb = rng.gamma(eta + state.ckv)
        state.beta = gb / gb.sum(axis=1, keepdims=True)
        gt = rng.gamma(alpha + state.cdk)
        state.theta = gt / gt.sum(axis=1, keepdims=True)
        return state

    # -- trace plumbing ---------------------------------------------------
    def suffstat(self, state: LDAState) -> np.ndarray:
        logb = np.log(np.maximum(state.beta, SIMPLEX_CLAMP))
        logt = np.log(np.maximum(state.theta, SIMPLEX_CLAMP))
        return np.array([logb.sum(), logt.sum()])

    def observe(self, state: LDAState):
        g_vals = {f"close_{i}_{j}": lda_closeness(state, i, j, eps)
                  for i, j, eps in self.closeness_pairs}
        return self.suffstat(state), g_vals

    def kernel(self, h1, burn: int = 50) -> "_LDAKernel":
        return _LDAKernel(self, np.asarray(h1, dtype=float), burn=burn)

    def trace(self, h1, n: int, seed=None, rng=None, burn: int = 50) -> ChainTrace:
        return simulate(self.kernel(h1, burn=burn), n=n, seed=seed, rng=rng,
                        meta={"h1": list(np.asarray(h1, dtype=float))})

    # -- serial tempering -------------------------------------------------
    def st_model(self, anchors: np.ndarray, burn: int = 0) -> "_LDASTModel":
        return _LDASTModel(self, np.atleast_2d(np.asarray(anchors, dtype=float)))


class _LDAKernel:
    has_regen = False

    def __init__(self, model: LDAModel, h1: np.ndarray, burn: int = 50):
        self.model = model
        self.h1 = h1
        self.burn = burn
        self.kernel_id = "lda-collapsed-gibbs"

    def start(self, rng):
        state = self.model.init_state(rng)
        for _ in range(max(1, self.burn)):
            state = self.model.sweep(state, self.h1, rng)
        return state

    def step(self, state, rng):
        return self.model.sweep(state, self.h1, rng), False

    def observe(self, state):
        return self.model.observe(state)


class _LDASTModel:
    """Per-anchor Gibbs sweeps for serial tempering over (eta, alpha)."""

    def __init__(self, model: LDAModel, anchors: np.ndarray):
        self.model = model
        self.anchors = anchors

    def start(self, rng):
        state = self.model.init_state(rng)
        return self.model.sweep(state, self.anchors[0], rng)

    def anchor_step(self, j, state, rng):
        return self.model.sweep(state, self.anchors[j], rng)

    def suffstat(self, state):
        return self.model.suffstat(state)

    def observe(self, state):
        return self.model.observe(state)


def _build(corpus, K, rect=None, **_):
    return LDAModel(corpus=corpus, K=int(K), rect=rect)


register_family("lda-dirichlet", _build)
