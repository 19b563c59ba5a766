"""Synthetic scenarios, component alignment, experiment metrics and reports."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .distributions import predicted_mean, sample_prior
from .estimators import (
    FitTrace,
    SaemConfig,
    famem_fit,
    ifa_em_fit,
    init_params,
    mcem_fit,
    saem_fit,
)
from .model import Dataset, HiddenState, Kind, ModelError, ModelSpec, Parameters, validate

GRID = (16, 16)


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    name: str
    spec: ModelSpec
    theta: Parameters
    n: int
    sigma: float
    repeats: int = 1
    seed: int = 0
    image_shape: Optional[tuple] = None

    def seeds(self):
        """One independent stream per repeat."""
        return np.random.SeedSequence(self.seed).spawn(self.repeats)


def cross_square_components() -> np.ndarray:
    """Two binary 16x16 images as columns: a cross near the top-left corner
    and a filled square near the bottom-right corner."""
    cross = np.zeros(GRID)
    cross[3, 1:6] = 1.0
    cross[1:6, 3] = 1.0
    square = np.zeros(GRID)
    square[10:15, 10:15] = 1.0
    return np.stack([cross.ravel(), square.ravel()], axis=1)


def interval_components(d: int = 64, p: int = 8) -> np.ndarray:
    if d % p:
        raise ModelError(f"d={d} is not a multiple of p={p}")
    A = np.zeros((d, p))
    w = d // p
    for j in range(p):
        A[j * w:(j + 1) * w, j] = 1.0
    return A


def bg_cross_square(n: int = 100, sigma: float = 0.5, alpha: float = 0.8, repeats: int = 1, seed: int = 0) -> Scenario:
    A = cross_square_components()
    spec = ModelSpec(Kind.BG, 2, A.shape[0], estimate_mu0=False)
    theta = Parameters(A=A, sigma2=sigma ** 2, alpha=alpha)
    return Scenario("bg-cross-square", spec, theta, n, sigma, repeats, seed, GRID)


INTERVALS_SIGMA = 0.5


def intervals8(n: int = 1000, sigma: float = INTERVALS_SIGMA, alpha: float = 0.5, shift: float = 2.0,
               repeats: int = 1, seed: int = 0) -> Scenario:
    A = interval_components()
    spec = ModelSpec(Kind.BG, 8, A.shape[0], shifted=True)
    theta = Parameters(A=A, sigma2=sigma ** 2, alpha=alpha, mu_shift=shift)
    return Scenario("intervals8", spec, theta, n, sigma, repeats, seed)


SCENARIOS = {"bg-cross-square": bg_cross_square, "intervals8": intervals8}


def make_scenario(name: str, **kw) -> Scenario:
    try:
        factory = SCENARIOS[name]
    except KeyError:
        raise ModelError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
    return factory(**kw)


def generate(scenario: Scenario, rng) -> tuple:
    """Draw ``(Dataset, HiddenState)`` from the scenario's generator."""
    spec, theta = scenario.spec, scenario.theta
    # noiseless and always-active generators are fine for sampling, so only
    # the structure is checked against the open parameter domains
    probe = theta.replace(sigma2=1.0)
    if theta.alpha is not None and 0.0 <= theta.alpha <= 1.0:
        probe = probe.replace(alpha=0.5)
    validate(spec, probe)
    if scenario.sigma < 0:
        raise ModelError(f"noise level must be nonnegative, got {scenario.sigma}")
    z = sample_prior(spec, theta, rng, scenario.n)
    noise = rng.standard_normal((scenario.n, spec.d))
    X = predicted_mean(spec, theta, z) + scenario.sigma * noise
    return Dataset(X), z


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Alignment:
    permutation: np.ndarray  # permutation[j] = estimated column matched to true column j
    signs: np.ndarray
    mse: float

    def apply(self, A_est) -> np.ndarray:
        A_est = _pad(np.asarray(A_est, dtype=float), len(self.permutation))
        return A_est[:, self.permutation] * self.signs


def _pad(A, p):
    if A.shape[1] >= p:
        return A
    return np.hstack([A, np.zeros((A.shape[0], p - A.shape[1]))])


def align(A_est, A_true) -> Alignment:
    """Best column permutation and signs of ``A_est`` against ``A_true``.

    The criterion is ``(1/d) sum_j |s_j A_est[:, pi(j)] - A_true[:, j]|^2``.
    When the column counts differ, the narrower matrix is padded with zero
    columns.  The criterion separates over matched pairs, so an assignment
    solver on the exact pairwise cost gives the global optimum.
    """
    A_est = np.asarray(A_est, dtype=float)
    A_true = np.asarray(A_true, dtype=float)
    if A_est.ndim != 2 or A_true.ndim != 2 or A_est.shape[0] != A_true.shape[0]:
        raise ModelError(f"cannot align shapes {A_est.shape} and {A_true.shape}")
    d = A_true.shape[0]
    p = max(A_est.shape[1], A_true.shape[1])
    E, T = _pad(A_est, p), _pad(A_true, p)
    cross = E.T @ T  # (est, true)
    cost = np.sum(E * E, 0)[:, None] + np.sum(T * T, 0)[None, :] - 2.0 * np.abs(cross)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(p, dtype=int)
    perm[cols] = rows
    signs = np.where(cross[perm, np.arange(p)] < 0, -1.0, 1.0)
    diff = E[:, perm] * signs - T
    return Alignment(perm, signs, float(np.sum(diff * diff)) / d)


def convergence_time(trace) -> int:
    """First iteration after which A stays within 1/1000 of its initial distance to the final A.

    ``trace`` is a FitTrace or a sequence of A matrices (iterations 1, 2, ...).
    Returns the last iteration when the threshold is never met.
    """
    if isinstance(trace, FitTrace):
        its = list(trace.snapshot_iterations)
        As = [np.asarray(s.A) for s in trace.snapshots]
    else:
        As = [np.asarray(a) for a in trace]
        its = list(range(1, len(As) + 1))
    if not As:
        raise ModelError("empty trace")
    final = As[-1]
    dist = np.array([np.linalg.norm(a - final) for a in As])
    tail_max = np.maximum.accumulate(dist[::-1])[::-1]
    hit = np.flatnonzero(tail_max <= tail_max[0] / 1000.0)
    return its[int(hit[0])] if len(hit) else its[-1]


@dataclass(frozen=True)
class HotellingResult:
    statistic: float
    p_value: float
    n_perms: int


def _t2_all(Z, labels, n1, pinv):
    """Two-sample Hotelling T^2 for every row of the 0/1 matrix ``labels``."""
    n, p = Z.shape
    n2 = n - n1
    Zc = Z - Z.mean(0)
    c = n1 * n2 / n
    diffs = (labels @ Zc) / n1 - ((1 - labels) @ Zc) / n2  # (m, p)
    total = Zc.T @ Zc
    if not pinv:
        # T = W + c d d^T with W the within scatter; Sherman-Morrison gives d^T W^-1 d
        u = c * np.einsum("mi,mi->m", diffs, np.linalg.solve(total, diffs.T).T)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(u < 1.0, (n - 2) * u / (1.0 - u), np.inf)
    out = np.empty(len(labels))
    for i, (row, dvec) in enumerate(zip(labels, diffs)):
        g1, g2 = Zc[row == 1], Zc[row == 0]
        W = (g1 - g1.mean(0)).T @ (g1 - g1.mean(0)) + (g2 - g2.mean(0)).T @ (g2 - g2.mean(0))
        out[i] = c * (n - 2) * float(dvec @ np.linalg.pinv(W) @ dvec)
    return out


def hotelling_permutation_test(group1, group2, n_perms: int, rng, allow_pinv: bool = True) -> HotellingResult:
    """Permutation p-value of the two-sample Hotelling T^2 statistic.

    ``p = (1 + #{permuted T^2 >= observed}) / (1 + n_perms)``.  A singular
    pooled covariance switches to the pseudo-inverse unless ``allow_pinv`` is
    False, in which case it is an error.
    """
    g1 = np.atleast_2d(np.asarray(group1, dtype=float))
    g2 = np.atleast_2d(np.asarray(group2, dtype=float))
    if g1.shape[1] != g2.shape[1]:
        raise ModelError(f"groups have {g1.shape[1]} and {g2.shape[1]} columns")
    if n_perms < 1:
        raise ValueError("n_perms must be >= 1")
    Z = np.vstack([g1, g2])
    n, p = Z.shape
    n1 = len(g1)
    Zc = Z - Z.mean(0)
    g1c, g2c = Zc[:n1], Zc[n1:]
    within = (g1c - g1c.mean(0)).T @ (g1c - g1c.mean(0)) + (g2c - g2c.mean(0)).T @ (g2c - g2c.mean(0))
    singular = n - 2 < p or np.linalg.matrix_rank(within) < p or np.linalg.matrix_rank(Zc.T @ Zc) < p
    if singular and not allow_pinv:
        raise ModelError("pooled covariance is singular; enable the pseudo-inverse fallback")
    base = np.zeros((1, n))
    base[0, :n1] = 1.0
    labels = np.zeros((n_perms, n))
    for i in range(n_perms):
        labels[i, rng.permutation(n)[:n1]] = 1.0
    observed = float(_t2_all(Z, base, n1, singular)[0])
    perm = _t2_all(Z, labels, n1, singular)
    tol = 1e-12 * max(1.0, abs(observed))
    count = int(np.count_nonzero(perm >= observed - tol))
    return HotellingResult(observed, (1 + count) / (1 + n_perms), n_perms)


# ---------------------------------------------------------------------------
# estimator dispatch
# ---------------------------------------------------------------------------

ESTIMATORS = ("saem", "mcem", "em-ifa", "fam-em")


@dataclass
class FitRequest:
    estimator: str
    spec: ModelSpec
    cfg: SaemConfig = field(default_factory=SaemConfig)
    mc_samples: int = 10
    mc_burn_in: int = 0


def check_pair(estimator: str, kind: Kind) -> None:
    if estimator not in ESTIMATORS:
        raise ModelError(f"unknown estimator {estimator!r}; choose from {', '.join(ESTIMATORS)}")
    if estimator == "em-ifa" and kind is not Kind.IFA:
        raise ModelError("em-ifa requires model ifa")
    if estimator == "fam-em" and kind is not Kind.LOG:
        raise ModelError("fam-em requires model log")


def run_fit(req: FitRequest, data: Dataset, init: Optional[Parameters] = None):
    """Fit with the named estimator; returns ``(theta, trace)``."""
    check_pair(req.estimator, req.spec.kind)
    if init is None:
        init = init_params(req.spec, data, np.random.default_rng(req.cfg.seed))
    if req.estimator == "saem":
        return saem_fit(req.spec, data, init, req.cfg)
    if req.estimator == "mcem":
        return mcem_fit(req.spec, data, init, req.cfg, req.mc_samples, req.mc_burn_in)
    if req.estimator == "em-ifa":
        return ifa_em_fit(req.spec, data, init, req.cfg.iterations, thin=req.cfg.thin)
    return famem_fit(req.spec, data, init, req.cfg.iterations, thin=req.cfg.thin)


# ---------------------------------------------------------------------------
# studies and reports
# ---------------------------------------------------------------------------


def alpha_vs_p_study(scenario: Scenario, p_list: Sequence[int], repeats: int = 1, iterations: int = 2000,
                     seed: int = 0, threads: int = 1, rotation: str = "varimax"):
    """Fit shifted BG for each number of components in ``p_list``.

    Every repeat draws a fresh dataset from ``scenario``; fits start from
    ``init_params`` with the given rotation.  Returns one row per
    ``p`` with the median and all values of the estimated activation
    probability, the expected active count ``p * alpha`` and the aligned MSE
    against the true components.
    """
    if not (scenario.spec.kind is Kind.BG and scenario.spec.shifted):
        raise ModelError("alpha_vs_p_study expects a shifted BG scenario")
    A_true = np.asarray(scenario.theta.A)
    seqs = np.random.SeedSequence(seed).spawn(repeats)
    datasets = [generate(scenario, np.random.default_rng(s))[0] for s in seqs]
    rows = []
    for p in p_list:
        spec = scenario.spec.with_p(p)
        alphas, mses = [], []
        for r, data in enumerate(datasets):
            cfg = SaemConfig(iterations=iterations, seed=seed * 7919 + r, threads=threads, thin=iterations)
            init = init_params(spec, data, np.random.default_rng(r), rotation=rotation)
            theta, _ = saem_fit(spec, data, init, cfg)
            alphas.append(theta.alpha)
            mses.append(align(theta.A, A_true).mse)
        a = float(np.median(alphas))
        rows.append(dict(p=p, alpha=a, alphas=alphas, active=p * a, mse=float(np.median(mses)), mses=mses))
    return rows


@dataclass
class BenchmarkConfig:
    name: str = "table1-desk"
    methods: Sequence[str] = ("fam-em/log", "saem/log", "saem/ifa", "em-ifa/ifa", "saem/bg")
    sigmas: Sequence[float] = (0.1, 0.5, 0.8, 1.5)
    n_list: Sequence[int] = (100,)
    repeats: int = 10
    iterations: int = 5000
    fam_iterations: int = 1000
    em_iterations: int = 500
    mcem_iterations: int = 500
    mc_samples: int = 10
    seed: int = 0
    threads: int = 1
    thin: int = 10


SUITES = {
    "table1-desk": BenchmarkConfig(),
    "smoke": BenchmarkConfig(name="smoke", repeats=1, iterations=200, fam_iterations=20, em_iterations=20,
                             mcem_iterations=20,
                             sigmas=(0.5,)),
}


def _method(text: str):
    est, _, model = text.partition("/")
    if est == "em-ifa" and not model:
        model = "ifa"
    check_pair(est, Kind.parse(model))
    return est, Kind.parse(model)


def run_benchmark(cfg: BenchmarkConfig):
    """Run scenarios x methods x repeats on the cross/square family.

    Returns a list of row dicts (one per fit).  Each repeat uses one dataset
    shared by all methods, as in the reference experiment.
    """
    rows = []
    for n in cfg.n_list:
        for sigma in cfg.sigmas:
            scen = bg_cross_square(n=n, sigma=sigma, repeats=cfg.repeats, seed=cfg.seed)
            for r, seq in enumerate(scen.seeds()):
                data, _ = generate(scen, np.random.default_rng(seq))
                for m in cfg.methods:
                    est, kind = _method(m)
                    spec = ModelSpec(kind, 2, scen.spec.d)
                    its = {"fam-em": cfg.fam_iterations, "em-ifa": cfg.em_iterations,
                           "mcem": cfg.mcem_iterations}.get(est, cfg.iterations)
                    sc = SaemConfig(iterations=its, seed=cfg.seed * 1_000_003 + r, threads=cfg.threads, thin=cfg.thin)
                    req = FitRequest(est, spec, sc, mc_samples=cfg.mc_samples)
                    tic = time.perf_counter()
                    theta, trace = run_fit(req, data)
                    secs = time.perf_counter() - tic
                    rows.append(dict(
                        method=m, n=n, sigma=sigma, repeat=r,
                        mse=align(theta.A, scen.theta.A).mse,
                        sigma2=theta.sigma2, true_sigma2=sigma ** 2,
                        seconds_per_1000=1000.0 * secs / its,
                        t_conv=convergence_time(trace), iterations=its,
                    ))
    return rows


def _summary(rows, key):
    groups = {}
    for r in rows:
        groups.setdefault((r["method"], r["n"], r["sigma"]), []).append(r[key])
    return {k: (float(np.mean(v)), float(np.median(v))) for k, v in groups.items()}


def benchmark_markdown(rows) -> str:
    methods = list(dict.fromkeys(r["method"] for r in rows))
    cells = sorted({(r["n"], r["sigma"]) for r in rows})
    header = "| method | " + " | ".join(f"n={n} sigma={s}" for n, s in cells) + " |"
    rule = "|---" * (len(cells) + 1) + "|"
    out = []
    for title, key, fmt in (("Aligned MSE (mean / median)", "mse", "{:.4f} / {:.4f}"),
                            ("Estimated noise variance (mean / median)", "sigma2", "{:.4f} / {:.4f}"),
                            ("Seconds per 1000 iterations (mean / median)", "seconds_per_1000", "{:.2f} / {:.2f}"),
                            ("Convergence time in iterations (mean / median)", "t_conv", "{:.0f} / {:.0f}")):
        summ = _summary(rows, key)
        out += [f"### {title}", "", header, rule]
        if key == "sigma2":
            out.append("| true | " + " | ".join(f"{s * s:.4f}" for _, s in cells) + " |")
        for m in methods:
            vals = [fmt.format(*summ[(m, n, s)]) if (m, n, s) in summ else "" for n, s in cells]
            out.append(f"| {m} | " + " | ".join(vals) + " |")
        out.append("")
    return "\n".join(out)


def write_rows_csv(rows, path) -> None:
    if not rows:
        raise ModelError("no rows to write")
    keys = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in (r[k] for k in keys)])


def write_pgm(path, image) -> tuple:
    """Write an 8-bit binary PGM, min-max scaled; the scale goes to ``path + '.txt'``."""
    img = np.asarray(image, dtype=float)
    lo, hi = float(img.min()), float(img.max())
    span = hi - lo if hi > lo else 1.0
    data = np.round(255.0 * (img - lo) / span).astype(np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
    Path(str(path) + ".txt").write_text(f"min {lo!r}\nmax {hi!r}\n")
    return lo, hi


def dump_components(A, shape, prefix) -> list:
    A = np.asarray(A, dtype=float)
    paths = []
    for j in range(A.shape[1]):
        path = Path(f"{prefix}_{j}.pgm")
        write_pgm(path, A[:, j].reshape(shape))
        paths.append(path)
    return paths
