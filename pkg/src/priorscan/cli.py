"""Command-line orchestration: config parsing, seeding, and CSV/JSON emission.

Commands: surface, argmax, band, st-tune, st-run, synth, oracle-check.
Configuration is a plain key=value file with sections (stdlib configparser);
all randomness flows from per-stream generators derived from (seed, stream
name), so identical configs produce byte-identical outputs.  Exit codes:
0 ok, 1 runtime warning (boundary argmax / tuning non-convergence /
oracle mismatch), 2 configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from priorscan.argmax_inference import (
    ArgmaxReport,
    batch_argmax_cov,
    confidence_ellipse,
    hessian_Jn,
    maximize_surface,
    tau_n_sq,
    v_n_sq,
)
from priorscan.band_inference import global_band
from priorscan.chain_runtime import ChainTrace, save_trace, segment_tours, tour_sums
from priorscan.estimators import functional_on_grid, surface_on_grid
from priorscan.models.lda import LDAModel, load_corpus, save_corpus, synth_corpus
from priorscan.models.normal_hier import NormalHierModel
from priorscan.models.varsel import VSModel, synth_regression
from priorscan.prior_family import ExpFamilyRatio, HyperRect
from priorscan.serial_tempering import (
    MixtureRatio,
    STGrid,
    lattice_anchors,
    occupancies,
    run_st,
    tune_zeta,
)

__all__ = ["main"]

EXIT_OK = 0
EXIT_WARN = 1
EXIT_CONFIG = 2


class ConfigError(Exception):
    pass


# ------------------------------------------------------------------
# config plumbing
# ------------------------------------------------------------------

def stream_rng(seed: int, name: str) -> np.random.Generator:
    """Independent, reproducible stream keyed by (seed, stream name)."""
    tag = int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "big")
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))


def _floats(text: str) -> np.ndarray:
    try:
        return np.array([float(tok) for tok in text.replace(";", ",").split(",")
                         if tok.strip()], dtype=float)
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> list[int]:
    return [int(v) for v in _floats(text)]


class RunConfig:
    """Validated view over the parsed config file."""

    def __init__(self, path: str):
        self.path = Path(path)
        if not self.path.is_file():
            raise ConfigError(f"config file not found: {path}")
        raw = self.path.read_bytes()
        self.sha256 = hashlib.sha256(raw).hexdigest()
        cp = configparser.ConfigParser()
        try:
            cp.read_string(raw.decode())
        except (configparser.Error, UnicodeDecodeError) as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        self.cp = cp

    def get(self, section: str, key: str, default=None, required: bool = False):
        if self.cp.has_option(section, key):
            return self.cp.get(section, key)
        if required:
            raise ConfigError(f"missing [{section}] {key}")
        return default

    # -- common blocks ----------------------------------------------------
    @property
    def model_id(self) -> str:
        return self.get("run", "model", required=True)

    @property
    def seed(self) -> int:
        return int(self.get("run", "seed", default="0"))

    @property
    def out_dir(self) -> Path:
        out = os.environ.get("PRIORSCAN_OUT") or self.get("run", "out", default=".")
        p = Path(out)
        p.mkdir(parents=True, exist_ok=True)
        return p

    def chain_target(self) -> dict:
        n = self.get("run", "n")
        R = self.get("run", "R")
        if (n is None) == (R is None):
            raise ConfigError("set exactly one of [run] n and [run] R")
        return {"n": int(n)} if n is not None else {"R": int(R)}

    def rect(self) -> HyperRect:
        lo = _floats(self.get("hyper", "rect_lower", required=True))
        hi = _floats(self.get("hyper", "rect_upper", required=True))
        try:
            return HyperRect(lower=lo, upper=hi)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def h1(self) -> np.ndarray:
        return _floats(self.get("hyper", "h1", required=True))

    def grid(self, rect: HyperRect) -> np.ndarray:
        points = _ints(self.get("hyper", "grid", default="21"))
        if len(points) == 1:
            points = points * rect.k
        g = rect.grid(points)
        return g

    @property
    def alpha(self) -> float:
        a = float(self.get("inference", "alpha", default="0.05"))
        if not 0.0 < a < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")
        return a

    @property
    def M(self) -> int | None:
        m = self.get("inference", "M")
        return None if m is None else int(m)

    @property
    def functional(self) -> str | None:
        return self.get("inference", "functional")


# ------------------------------------------------------------------
# model construction + chain running
# ------------------------------------------------------------------

def build_model(cfg: RunConfig):
    mid = cfg.model_id
    rect = cfg.rect()
    if mid == "normal-hier":
        y = _floats(cfg.get("model", "y", required=True))
        sigma0 = float(cfg.get("model", "sigma0", default="1.0"))
        return NormalHierModel(y=y, sigma0=sigma0, rect=rect)
    if mid == "vs-bernoulli-zellner":
        data = cfg.get("model", "data", required=True)
        # first non-comment line is the header
        lines = [ln for ln in Path(data).read_text().splitlines()
                 if ln.strip() and not ln.lstrip().startswith("#")]
        body = np.loadtxt(lines[1:], delimiter=",", ndmin=2)
        return VSModel(y=body[:, 0], X=body[:, 1:], rect=rect)
    if mid == "lda-dirichlet":
        corpus = load_corpus(cfg.get("model", "corpus", required=True))
        K = int(cfg.get("model", "K", required=True))
        return LDAModel(corpus=corpus, K=K, rect=rect)
    raise ConfigError(f"unknown model id {mid!r}")


def run_chain(model, cfg: RunConfig, stream: str) -> ChainTrace:
    rng = stream_rng(cfg.seed, stream)
    target = cfg.chain_target()
    h1 = cfg.h1()
    if isinstance(model, NormalHierModel):
        kind = cfg.get("model", "kernel", default="mh")
        if kind == "exact":
            from priorscan.chain_runtime import simulate
            return simulate(model.exact_kernel(h1), rng=rng,
                            meta={"h1": list(h1)}, **target)
        return model.mh_trace(h1, rng=rng, **target)
    if "R" in target:
        raise ConfigError("this model has no regeneration construction; use n")
    return model.trace(h1, target["n"], rng=rng)


def ratio_family(model, h1):
    return ExpFamilyRatio(model.spec(), h1)


# ------------------------------------------------------------------
# output helpers
# ------------------------------------------------------------------

def write_csv(path: Path, header: str, rows, cfg_hash: str) -> None:
    with open(path, "w") as fh:
        fh.write(f"# config_sha256={cfg_hash}\n")
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join("%.17g" % v for v in row) + "\n")


def write_json(path: Path, payload: dict, cfg_hash: str) -> None:
    payload = dict(payload)
    payload["config_sha256"] = cfg_hash
    with open(path, "w") as fh:
        fh.write(json.dumps(payload, sort_keys=True, indent=1))


def _estimate_csv(path: Path, est, cfg_hash: str) -> None:
    k = est.grid.shape[1]
    header = ",".join(f"h_{i+1}" for i in range(k)) + ",value,se,ess"
    rows = (np.column_stack([est.grid, est.values, est.se, est.ess]))
    write_csv(path, header, rows, cfg_hash)


# ------------------------------------------------------------------
# commands
# ------------------------------------------------------------------

def cmd_surface(cfg: RunConfig) -> int:
    model = build_model(cfg)
    trace = run_chain(model, cfg, "surface")
    family = ratio_family(model, cfg.h1())
    grid = cfg.grid(cfg.rect())
    tours = None
    if trace.delta.sum() >= 2 or trace.ends_at_regen:
        try:
            tours = segment_tours(trace)
        except ValueError:
            tours = None
    est = surface_on_grid(trace, family, grid, tours=tours, M=cfg.M)
    _estimate_csv(cfg.out_dir / "surface.csv", est, cfg.sha256)
    g_name = cfg.functional
    if g_name is not None:
        fest = functional_on_grid(trace, family, g_name, grid, tours=tours, M=cfg.M)
        _estimate_csv(cfg.out_dir / f"functional_{g_name}.csv", fest, cfg.sha256)
    save_trace(trace, cfg.out_dir / "trace.txt")
    return EXIT_OK


def cmd_argmax(cfg: RunConfig) -> int:
    model = build_model(cfg)
    rect = cfg.rect()
    trace = run_chain(model, cfg, "argmax")
    family = ratio_family(model, cfg.h1())
    res = maximize_surface(trace, family, rect)
    alpha = cfg.alpha

    has_tours = bool(trace.delta.sum() >= 2 or trace.ends_at_regen)
    if has_tours:
        tours = segment_tours(trace)
        tsums = tour_sums(trace, tours, family, res.h)
        J = hessian_Jn(tsums)
        tau = tau_n_sq(tsums)
        v = v_n_sq(J, tau)
        R = tours.R
        n_eff = tours.n_eff
        method = "tour"
    else:
        M = cfg.M or max(2, int(np.ceil(np.sqrt(trace.n))))
        cov, n_boundary = batch_argmax_cov(trace, family, rect, M, h_n=res.h)
        # cov approximates n Var(h_n) = E(N1) v^2; fold into the R-scaled form
        J = tau = None
        n_eff = trace.n
        R = n_eff  # with E_N1_hat = 1 the ellipse scaling R/v^2 = n/cov
        v = cov
        method = "batch"
    ellipse = confidence_ellipse(res.h, v, R, alpha)
    report = ArgmaxReport(
        h_n=res.h, J_n=J, tau_n_sq=tau, v_n_sq=v, R=R, n=n_eff,
        E_N1_hat=n_eff / R, alpha=alpha, chi2_threshold=ellipse.threshold,
        boundary_flag=res.boundary, ellipse=ellipse, method=method)
    payload = json.loads(report.to_json())
    write_json(cfg.out_dir / "argmax.json", payload, cfg.sha256)
    if ellipse.boundary.size:
        write_csv(cfg.out_dir / "ellipse.csv", "h_1,h_2",
                  ellipse.boundary, cfg.sha256)
    return EXIT_WARN if res.boundary else EXIT_OK


def cmd_band(cfg: RunConfig, replicate: int = 0) -> int:
    model = build_model(cfg)
    rect = cfg.rect()
    grid = cfg.grid(rect)
    g_name = cfg.functional
    alpha = cfg.alpha

    def one_band(stream: str):
        trace = run_chain(model, cfg, stream)
        family = ratio_family(model, cfg.h1())
        return global_band(trace, family, g_name, grid, M=cfg.M, alpha=alpha)

    band = one_band("band")
    write_csv(cfg.out_dir / "band.csv",
              ",".join(f"h_{i+1}" for i in range(grid.shape[1]))
              + ",center,lower,upper",
              np.column_stack([band.grid, band.center, band.lower, band.upper]),
              cfg.sha256)
    write_json(cfg.out_dir / "band.json", json.loads(band.to_json()), cfg.sha256)

    if replicate > 0:
        if not isinstance(model, NormalHierModel) or g_name != "theta1":
            raise ConfigError("--replicate coverage needs the normal-hier model "
                              "with functional theta1 (analytic truth)")
        truth = np.array([model.oracle_I_theta1(h) for h in grid])
        hits = int(band.covers(truth))
        for r in range(1, replicate):
            hits += int(one_band(f"band-rep-{r}").covers(truth))
        write_json(cfg.out_dir / "coverage.json", {
            "replications": replicate,
            "covered": hits,
            "coverage": hits / replicate,
            "alpha": alpha,
        }, cfg.sha256)
    return EXIT_OK


def _st_pieces(cfg: RunConfig, model):
    rect = cfg.rect()
    spec_txt = cfg.get("st", "anchors", default="lattice:3x3")
    if spec_txt.startswith("lattice:"):
        shape = [int(v) for v in spec_txt.split(":", 1)[1].split("x")]
        anchors = lattice_anchors(rect, shape if len(shape) > 1 else shape[0])
    else:
        anchors = np.array([_floats(row) for row in spec_txt.split(";")])
    zeta_txt = cfg.get("st", "zetas")
    zetas = (_floats(zeta_txt) if zeta_txt is not None
             else np.ones(anchors.shape[0]))
    grid = STGrid(anchors=anchors, zetas=zetas)
    if isinstance(model, (NormalHierModel, LDAModel)):
        st_model = model.st_model(anchors)
    else:
        raise ConfigError("serial tempering supported for normal-hier and "
                          "lda-dirichlet models")
    return grid, st_model, model.spec()


def _zeta_csv(path: Path, grid: STGrid, occ, cfg_hash: str) -> None:
    k = grid.anchors.shape[1]
    header = ",".join(f"h_{i+1}" for i in range(k)) + ",zeta,occupancy"
    occ = np.full(grid.m, np.nan) if occ is None else np.asarray(occ)
    rows = np.column_stack([grid.anchors, grid.zetas, occ])
    write_csv(path, header, rows, cfg_hash)


def cmd_st_tune(cfg: RunConfig) -> int:
    model = build_model(cfg)
    grid, st_model, spec = _st_pieces(cfg, model)
    rounds = int(cfg.get("st", "rounds", default="10"))
    steps = int(cfg.get("st", "steps_per_round", default="5000"))
    tuned, converged = tune_zeta(st_model, spec, grid, rounds=rounds,
                                 steps_per_round=steps,
                                 seed=stream_rng(cfg.seed, "st-tune"))
    _zeta_csv(cfg.out_dir / "zeta.csv", tuned, tuned.occupancies, cfg.sha256)
    write_json(cfg.out_dir / "st_tune.json", {
        "converged": bool(converged),
        "zetas": tuned.zetas.tolist(),
        "occupancies": None if tuned.occupancies is None
        else tuned.occupancies.tolist(),
    }, cfg.sha256)
    return EXIT_OK if converged else EXIT_WARN


def cmd_st_run(cfg: RunConfig) -> int:
    model = build_model(cfg)
    grid, st_model, spec = _st_pieces(cfg, model)
    target = cfg.chain_target()
    if "n" not in target:
        raise ConfigError("serial tempering runs use [run] n")
    trace = run_st(st_model, spec, grid, n=target["n"],
                   rng=stream_rng(cfg.seed, "st-run"))
    occ = occupancies(trace, grid.m)
    _zeta_csv(cfg.out_dir / "occupancy.csv", grid, occ, cfg.sha256)
    save_trace(trace, cfg.out_dir / "st_trace.txt")
    family = MixtureRatio(spec, grid)
    est = surface_on_grid(trace, family, cfg.grid(cfg.rect()), M=cfg.M)
    _estimate_csv(cfg.out_dir / "st_surface.csv", est, cfg.sha256)
    return EXIT_OK


def cmd_synth(cfg: RunConfig) -> int:
    kind = cfg.get("synth", "kind", required=True)
    out = cfg.out_dir
    if kind == "regression":
        data = synth_regression(
            seed=cfg.seed,
            m=int(cfg.get("synth", "m", default="50")),
            q=int(cfg.get("synth", "q", default="8")),
            sparsity=float(cfg.get("synth", "sparsity", default="0.3")),
            snr=float(cfg.get("synth", "snr", default="2.0")))
        path = out / "regression.csv"
        header = "y," + ",".join(f"x_{j+1}" for j in range(data.X.shape[1]))
        write_csv(path, header, np.column_stack([data.y, data.X]), cfg.sha256)
        write_json(out / "regression.json", dict(data.meta), cfg.sha256)
        return EXIT_OK
    if kind == "corpus":
        corpus = synth_corpus(
            seed=cfg.seed,
            D=int(cfg.get("synth", "D", default="6")),
            V=int(cfg.get("synth", "V", default="12")),
            K=int(cfg.get("synth", "K", default="2")),
            n_d=int(cfg.get("synth", "n_d", default="30")),
            eta=float(cfg.get("synth", "eta", default="0.5")),
            alpha=float(cfg.get("synth", "alpha", default="0.5")))
        save_corpus(corpus, out / "corpus.txt")
        return EXIT_OK
    raise ConfigError(f"unknown synth kind {kind!r} (regression|corpus)")


def cmd_oracle_check(cfg: RunConfig) -> int:
    model = build_model(cfg)
    if not isinstance(model, NormalHierModel):
        raise ConfigError("oracle-check applies to the normal-hier model")
    trace = run_chain(model, cfg, "oracle-check")
    family = ratio_family(model, cfg.h1())
    grid = cfg.grid(cfg.rect())
    tours = None
    if trace.delta.sum() >= 2 or trace.ends_at_regen:
        tours = segment_tours(trace)
    est = surface_on_grid(trace, family, grid, tours=tours, M=cfg.M)
    h1 = cfg.h1()
    truth = np.array([model.oracle_B(h, h1) for h in grid])
    z = np.abs(est.values - truth) / np.maximum(est.se, 1e-300)
    frac_ok = float(np.mean(z <= 4.0))
    write_json(cfg.out_dir / "oracle_check.json", {
        "grid_points": int(grid.shape[0]),
        "fraction_within_4se": frac_ok,
        "max_z": float(z.max()),
    }, cfg.sha256)
    return EXIT_OK if frac_ok >= 0.95 else EXIT_WARN


# ------------------------------------------------------------------
# entry point
# ------------------------------------------------------------------

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="priorscan",
        description="Hyperparameter surfaces from a single MCMC run, with "
                    "frequentist-valid uncertainty.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("surface", "argmax", "st-tune", "st-run", "synth",
                 "oracle-check"):
        p = sub.add_parser(name)
        p.add_argument("config", help="path to key=value config file")
    p = sub.add_parser("band")
    p.add_argument("config", help="path to key=value config file")
    p.add_argument("--replicate", type=int, default=0,
                   help="run a coverage study with this many replications")
    args = parser.parse_args(argv)

    try:
        cfg = RunConfig(args.config)
        if args.command == "surface":
            return cmd_surface(cfg)
        if args.command == "argmax":
            return cmd_argmax(cfg)
        if args.command == "band":
            return cmd_band(cfg, replicate=args.replicate)
        if args.command == "st-tune":
            return cmd_st_tune(cfg)
        if args.command == "st-run":
            return cmd_st_run(cfg)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "oracle-check":
            return cmd_oracle_check(cfg)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
