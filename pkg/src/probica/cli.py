"""Command-line interface: ``probica {generate,fit,reconstruct,eval,benchmark}``.

Every option can also come from a JSON file given with ``--config``; flags
given on the command line win.  Failures print one ``error: ...`` line on
stderr and exit with status 1.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .estimators import ROTATIONS, SaemConfig, init_params
from .files import (
    dump_json,
    load_json,
    load_params,
    read_matrix_csv,
    save_params,
    state_columns,
    write_matrix_csv,
)
from .model import Dataset, HiddenState, Kind, ModelError, ModelSpec
from .reconstruction import ReconOptions, reconstruct

THREADS_ENV = "SAEMICA_THREADS"


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage errors become the same one-line ``error: ...`` as runtime failures."""

    def error(self, message):
        self.exit(1, f"error: {self.prog}: {' '.join(message.split())}\n")


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise CliError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
        if n < 1:
            raise CliError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
        return n
    return os.cpu_count() or 1


# defaults live here rather than in argparse so that a config file can fill gaps
DEFAULTS = {
    "generate": dict(scenario="bg-cross-square", n=100, sigma=None, alpha=None, seed=0, out=".", prefix=None,
                     pgm=False),
    "fit": dict(model=None, p=None, K=None, shifted=False, estimate_mu0=None, estimator="saem", iters=5000,
                burn_in=None, exponent=0.6, sweeps=1, warmup=100, mc_samples=10, mc_burn_in=0, thin=1,
                seed=0, threads=None, init="none", init_params=None, skip_header=False, out=".", prefix="fit"),
    "reconstruct": dict(params=None, out="recon.csv", skip_header=False, seed=0, no_local_search=False),
    "eval": dict(est=None, truth=None, trace=None, out=None),
    "benchmark": dict(suite="table1-desk", repeats=None, iterations=None, sigmas=None, n=None, methods=None,
                      seed=None, threads=None, out="."),
}


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="probica", description="Probabilistic ICA by stochastic approximation EM.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file with option values (flags win)")
        return p

    g = add("generate", "draw a synthetic dataset")
    g.add_argument("--scenario", choices=sorted(ev.SCENARIOS))
    g.add_argument("--n", type=int)
    g.add_argument("--sigma", type=float)
    g.add_argument("--alpha", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", help="output directory")
    g.add_argument("--prefix", help="file name prefix (default: scenario name)")
    g.add_argument("--pgm", action="store_true", help="also dump the true components as PGM images")

    f = add("fit", "estimate model parameters from a dataset CSV")
    f.add_argument("data")
    f.add_argument("--model", choices=[k.value for k in Kind])
    f.add_argument("--p", type=int)
    f.add_argument("--K", type=int)
    f.add_argument("--shifted", action="store_true")
    f.add_argument("--estimate-mu0", dest="estimate_mu0", type=_bool)
    f.add_argument("--estimator", choices=ev.ESTIMATORS)
    f.add_argument("--iters", type=int)
    f.add_argument("--burn-in", dest="burn_in", type=int)
    f.add_argument("--exponent", type=float)
    f.add_argument("--sweeps", type=int)
    f.add_argument("--warmup", type=int)
    f.add_argument("--mc-samples", dest="mc_samples", type=int)
    f.add_argument("--mc-burn-in", dest="mc_burn_in", type=int)
    f.add_argument("--thin", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--threads", type=int)
    f.add_argument("--init", choices=ROTATIONS, help="rotation applied to the principal-component start")
    f.add_argument("--init-params", dest="init_params", help="parameters JSON to start from")
    f.add_argument("--skip-header", dest="skip_header", action="store_true")
    f.add_argument("--out")
    f.add_argument("--prefix")

    r = add("reconstruct", "MAP hidden variables for each observation")
    r.add_argument("observations")
    r.add_argument("--params")
    r.add_argument("--out")
    r.add_argument("--skip-header", dest="skip_header", action="store_true")
    r.add_argument("--seed", type=int)
    r.add_argument("--no-local-search", dest="no_local_search", action="store_true")

    e = add("eval", "aligned MSE between estimated and true components")
    e.add_argument("--est")
    e.add_argument("--truth")
    e.add_argument("--trace", help="trace CSV for the convergence time")
    e.add_argument("--out", help="write the result JSON here (default: stdout only)")

    b = add("benchmark", "run a table-shaped experiment suite")
    b.add_argument("--suite", choices=sorted(ev.SUITES))
    b.add_argument("--repeats", type=int)
    b.add_argument("--iterations", type=int)
    b.add_argument("--sigmas", type=_floats)
    b.add_argument("--n", type=_ints)
    b.add_argument("--methods", type=lambda s: s.split(","))
    b.add_argument("--seed", type=int)
    b.add_argument("--threads", type=int)
    b.add_argument("--out")
    return ap


def _bool(s):
    low = s.lower()
    if low in ("1", "true", "yes"):
        return True
    if low in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {s!r}")


def _floats(s):
    return [float(v) for v in s.split(",")]


def _ints(s):
    return [int(v) for v in s.split(",")]


def resolve(command: str, ns: argparse.Namespace) -> dict:
    """Merge defaults < config file < command-line flags."""
    cfg = dict(DEFAULTS[command])
    flags = vars(ns)
    if flags.get("config"):
        doc = load_json(flags["config"])
        if not isinstance(doc, dict):
            raise CliError(f"{flags['config']}: config must be a JSON object")
        unknown = set(doc) - set(cfg) - {"data", "observations"}
        if unknown:
            raise CliError(f"{flags['config']}: unknown option(s) {', '.join(sorted(unknown))}")
        cfg.update(doc)
    cfg.update({k: v for k, v in flags.items() if k not in ("config", "command")})
    return cfg


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_generate(cfg: dict) -> list:
    kw = {"n": cfg["n"], "seed": cfg["seed"]}
    for key in ("sigma", "alpha"):
        if cfg[key] is not None:
            kw[key] = cfg[key]
    scen = ev.make_scenario(cfg["scenario"], **kw)
    data, z = ev.generate(scen, np.random.default_rng(np.random.SeedSequence(cfg["seed"])))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    prefix = cfg["prefix"] or scen.name
    paths = [out / f"{prefix}_data.csv", out / f"{prefix}_truth.json", out / f"{prefix}_hidden.csv"]
    write_matrix_csv(paths[0], data.observations)
    save_params(paths[1], scen.spec, scen.theta, cfg["seed"], scenario=scen.name, n=scen.n, sigma=scen.sigma,
                config=cfg)
    header, M = state_columns(scen.spec, z)
    write_matrix_csv(paths[2], M, header)
    if cfg["pgm"] and scen.image_shape is not None:
        paths += ev.dump_components(scen.theta.A, scen.image_shape, out / f"{prefix}_component")
    return paths


def _fit_spec(cfg, d):
    if cfg["model"] is None or cfg["p"] is None:
        raise CliError("fit needs --model and --p")
    return ModelSpec(Kind.parse(cfg["model"]), int(cfg["p"]), d, shifted=bool(cfg["shifted"]),
                     K=cfg["K"], estimate_mu0=cfg["estimate_mu0"])


def cmd_fit(cfg: dict) -> list:
    if cfg["threads"] is None:
        cfg["threads"] = default_threads()
    X = read_matrix_csv(cfg["data"], cfg["skip_header"])
    data = Dataset(X)
    spec = _fit_spec(cfg, data.d)
    ev.check_pair(cfg["estimator"], spec.kind)
    sc = SaemConfig(iterations=cfg["iters"], burn_in=cfg["burn_in"], exponent=cfg["exponent"], sweeps=cfg["sweeps"],
                    seed=cfg["seed"], threads=cfg["threads"], thin=cfg["thin"], warmup=cfg["warmup"])
    if cfg["init_params"]:
        ispec, init, _ = load_params(cfg["init_params"])
        if ispec != spec:
            raise CliError(f"{cfg['init_params']}: model does not match the requested fit")
    else:
        init = init_params(spec, data, np.random.default_rng(cfg["seed"]), rotation=cfg["init"])
    req = ev.FitRequest(cfg["estimator"], spec, sc, mc_samples=cfg["mc_samples"], mc_burn_in=cfg["mc_burn_in"])
    theta, trace = ev.run_fit(req, data, init)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    prefix = cfg["prefix"]
    paths = [out / f"{prefix}_params.json", out / f"{prefix}_trace.csv", out / f"{prefix}_summary.json"]
    save_params(paths[0], spec, theta, cfg["seed"])
    trace.to_csv(paths[1])
    rates = trace.acceptance_rates
    summary = {
        "estimator": cfg["estimator"],
        "iterations": len(trace.iterations),
        "sigma2": float(theta.sigma2),
        "acceptance_rates": None if rates is None else [None if np.isnan(v) else float(v) for v in rates],
        "truncations": trace.truncations,
        "final_loglik": trace.loglik[-1] if trace.loglik else None,
        "config": cfg,
    }
    dump_json(paths[2], summary)
    return paths


def cmd_reconstruct(cfg: dict) -> list:
    if not cfg["params"]:
        raise CliError("reconstruct needs --params")
    spec, theta, _ = load_params(cfg["params"])
    X = read_matrix_csv(cfg["observations"], cfg["skip_header"])
    if X.shape[1] != spec.d:
        raise CliError(f"{cfg['observations']}: rows have {X.shape[1]} values, parameters expect d={spec.d}")
    opts = ReconOptions(seed=cfg["seed"], local_search=not cfg["no_local_search"])
    results = [reconstruct(spec, theta, x, opts) for x in X]
    zh, Z = state_columns(spec, HiddenState.stack([r.z for r in results]))
    obj = np.array([[r.objective] for r in results])
    if zh[0] == "beta_0":
        header, cols = zh + ["objective"], [Z, obj]
    else:
        B = np.stack([r.beta for r in results])
        header, cols = [f"beta_{j}" for j in range(spec.p)] + zh + ["objective"], [B, Z, obj]
    write_matrix_csv(cfg["out"], np.hstack(cols), header)
    cpath = Path(str(cfg["out"]) + ".config.json")
    dump_json(cpath, cfg)
    return [Path(cfg["out"]), cpath]


def _trace_snapshots(path):
    """A matrices from the filled rows of a trace CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CliError(f"{path}: empty trace")
    header = rows[0]
    cols = [i for i, h in enumerate(header) if h.startswith("A_")]
    if not cols:
        raise CliError(f"{path}: trace has no A columns")
    last = header[cols[-1]].split("_")
    d, p = int(last[1]) + 1, int(last[2]) + 1
    snaps = []
    for lineno, row in enumerate(rows[1:], start=2):
        if row[cols[0]] == "":
            continue
        try:
            snaps.append(np.array([float(row[i]) for i in cols]).reshape(d, p))
        except (ValueError, IndexError):
            raise CliError(f"{path}:{lineno}: malformed A entries") from None
    return snaps


def cmd_eval(cfg: dict) -> list:
    if not cfg["est"] or not cfg["truth"]:
        raise CliError("eval needs --est and --truth")
    _, est, _ = load_params(cfg["est"])
    _, truth, _ = load_params(cfg["truth"])
    if est.A.shape[0] != truth.A.shape[0]:
        raise CliError(f"{cfg['est']}: d={est.A.shape[0]} does not match {cfg['truth']}: d={truth.A.shape[0]}")
    al = ev.align(est.A, truth.A)
    res = {"mse": al.mse, "permutation": al.permutation.tolist(), "signs": al.signs.tolist(),
           "sigma2_est": float(est.sigma2), "sigma2_true": float(truth.sigma2)}
    if cfg["trace"]:
        res["t_conv"] = ev.convergence_time(_trace_snapshots(cfg["trace"]))
    res["config"] = cfg
    print(json.dumps({k: v for k, v in res.items() if k != "config"}))
    if cfg["out"]:
        dump_json(cfg["out"], res)
        return [Path(cfg["out"])]
    return []


def cmd_benchmark(cfg: dict) -> list:
    base = ev.SUITES[cfg["suite"]]
    changes = {k: cfg[k] for k in ("repeats", "iterations", "seed", "threads", "methods") if cfg[k] is not None}
    if cfg["sigmas"] is not None:
        changes["sigmas"] = tuple(cfg["sigmas"])
    if cfg["n"] is not None:
        changes["n_list"] = tuple(cfg["n"])
    if "threads" not in changes:
        changes["threads"] = default_threads()
    bc = dataclasses.replace(base, **changes)
    rows = ev.run_benchmark(bc)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{bc.name}.csv", out / f"{bc.name}.md", out / f"{bc.name}_config.json"]
    ev.write_rows_csv(rows, paths[0])
    paths[1].write_text(f"# Benchmark {bc.name}\n\n" + ev.benchmark_markdown(rows))
    dump_json(paths[2], {**cfg, "resolved": {k: (list(v) if isinstance(v, tuple) else v)
                                             for k, v in dataclasses.asdict(bc).items()}})
    return paths


COMMANDS = {
    "generate": cmd_generate,
    "fit": cmd_fit,
    "reconstruct": cmd_reconstruct,
    "eval": cmd_eval,
    "benchmark": cmd_benchmark,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:  # --help, or a usage error already reported
        return exc.code if isinstance(exc.code, int) else 1
    try:
        cfg = resolve(ns.command, ns)
        paths = COMMANDS[ns.command](cfg)
    except (CliError, ModelError, ValueError, OSError, RuntimeError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
