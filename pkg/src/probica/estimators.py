"""Maximum-likelihood estimators: SAEM, MCEM, exact EM for IFA and FAM-EM."""
from __future__ import annotations

import csv
import itertools
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
from scipy.special import logsumexp

from .distributions import m_step, mean_stats
from .model import (
    SIGMA2_FLOOR,
    Dataset,
    HiddenState,
    Kind,
    ModelError,
    ModelSpec,
    Parameters,
    SuffStats,
    validate,
)
from .reconstruction import LOG2, log_map
from .sampler import ChainState, gibbs_sweep

IFA_ENUMERATION_LIMIT = 10 ** 6


class FitError(RuntimeError):
    """A fit aborted; ``iteration`` is the 1-based iteration that failed."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass
class Truncation:
    """Restart rule on random boundaries.

    The stats are reset to their first value whenever they leave the ball of
    radius ``radius * 2**q`` around it, or move by ``drift / t`` or more in
    one iteration; ``q`` counts the resets.  ``None`` radii are set from the
    norm of the first stats.
    """

    radius: Optional[float] = None
    drift: Optional[float] = None


@dataclass
class SaemConfig:
    iterations: int = 5000
    burn_in: Optional[int] = None
    exponent: float = 0.6
    sweeps: int = 1
    step_size: Optional[Callable[[int], float]] = None
    truncation: Optional[Truncation] = None
    seed: int = 0
    threads: int = 1
    thin: int = 1
    warmup: int = 100

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.burn_in is None:
            self.burn_in = math.ceil(self.iterations / 5)
        if not 0 <= self.burn_in <= self.iterations:
            raise ValueError("burn_in must lie in [0, iterations]")
        if not 0.5 < self.exponent <= 1.0:
            raise ValueError("step exponent must lie in (0.5, 1]")
        if self.sweeps < 1 or self.thin < 1 or self.threads < 1:
            raise ValueError("sweeps, thin and threads must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")

    def step(self, t: int) -> float:
        if self.step_size is not None:
            return float(self.step_size(t))
        if t <= self.burn_in:
            return 1.0
        return float((t - self.burn_in) ** -self.exponent)


@dataclass
class FitTrace:
    estimator: str
    iterations: List[int] = field(default_factory=list)
    deltas: List[float] = field(default_factory=list)
    sigma2: List[float] = field(default_factory=list)
    acceptance: List[float] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)
    loglik: List[float] = field(default_factory=list)
    snapshot_iterations: List[int] = field(default_factory=list)
    snapshots: List[Parameters] = field(default_factory=list)
    final_stats: Optional[SuffStats] = None
    acceptance_rates: Optional[np.ndarray] = None
    truncations: int = 0
    thin: int = 1
    coefficients: Optional[np.ndarray] = None

    def record(self, t, theta, delta=float("nan"), acceptance=float("nan"), seconds=0.0, loglik=None, force=False):
        self.iterations.append(t)
        self.deltas.append(float(delta))
        self.sigma2.append(float(theta.sigma2))
        self.acceptance.append(float(acceptance))
        self.seconds.append(float(seconds))
        if loglik is not None:
            self.loglik.append(float(loglik))
        if force or t == 1 or t % self.thin == 0:
            self.snapshot_iterations.append(t)
            self.snapshots.append(theta)

    @property
    def A_history(self) -> np.ndarray:
        return np.stack([np.asarray(s.A) for s in self.snapshots])

    def to_csv(self, path, include_A: bool = True) -> None:
        """Write one row per iteration; ``A_i_j`` columns are filled on snapshot rows.

        Numbers are written with ``repr`` (shortest round-trip form).  Wall-clock
        times are kept out so that seeded runs give identical files.
        """
        snaps = dict(zip(self.snapshot_iterations, self.snapshots))
        d, p = np.shape(self.snapshots[0].A) if self.snapshots else (0, 0)
        a_cols = [f"A_{i}_{j}" for i in range(d) for j in range(p)] if include_A else []
        header = ["iteration", "delta", "sigma2", "acceptance"] + (["loglik"] if self.loglik else []) + a_cols
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i, t in enumerate(self.iterations):
                row = [str(t), repr(self.deltas[i]), repr(self.sigma2[i]), repr(self.acceptance[i])]
                if self.loglik:
                    row.append(repr(self.loglik[i]))
                if include_A:
                    row += [repr(float(v)) for v in np.ravel(snaps[t].A)] if t in snaps else [""] * len(a_cols)
                w.writerow(row)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def varimax(L, max_iter: int = 500, tol: float = 1e-10) -> np.ndarray:
    """Orthogonal rotation of the columns of ``L`` maximizing the variance of squared loadings."""
    L = np.asarray(L, dtype=float)
    d, k = L.shape
    R = np.eye(k)
    crit = 0.0
    for _ in range(max_iter):
        Lam = L @ R
        u, sv, vt = np.linalg.svd(L.T @ (Lam ** 3 - Lam * (np.sum(Lam ** 2, 0) / d)))
        R = u @ vt
        prev, crit = crit, float(sv.sum())
        if prev and crit <= prev * (1.0 + tol):
            break
    return L @ R


ROTATIONS = ("none", "varimax")


def init_params(spec: ModelSpec, data: Dataset, rng=None, rotation: str = "none") -> Parameters:
    """Principal-component starting point.

    Columns of A are the leading principal directions scaled by
    singular value / sqrt(n); missing directions are filled with N(0, 0.1^2)
    entries.  sigma2 is the residual variance of the rank-p projection.
    ``rotation="varimax"`` rotates the columns towards sparse loadings.

    For shifted models the columns are oriented so that the data project
    positively on them, and the shift and column scales are matched to the
    first two moments of those projections at alpha = 0.5.
    """
    if rotation not in ROTATIONS:
        raise ModelError(f"unknown rotation {rotation!r}; choose from {', '.join(ROTATIONS)}")
    X = data.observations
    if X.shape[1] != spec.d:
        raise ModelError(f"data has {X.shape[1]} columns, model expects d={spec.d}")
    rng = np.random.default_rng(0) if rng is None else rng
    n, d, p = X.shape[0], spec.d, spec.p
    mu0 = X.mean(0) if spec.estimate_mu0 else None
    if mu0 is not None or spec.shifted:
        # shifted coefficients have a nonzero mean; take directions from the covariance
        Xc = X - X.mean(0)
    elif spec.has_offset:
        Xc = X - X.mean(1, keepdims=True)
    else:
        Xc = X
    _, sv, Vt = np.linalg.svd(Xc, full_matrices=False)
    r = min(p, len(sv))
    A = rng.normal(0.0, 0.1, size=(d, p))
    A[:, :r] = Vt[:r].T * (sv[:r] / np.sqrt(n))
    if rotation == "varimax" and p > 1:
        A = varimax(A)
    total = float(np.sum(Xc * Xc)) / (n * d)
    resid = float(np.sum(sv[r:] ** 2)) / (n * d)
    sigma2 = max(resid, 1e-6 * total, SIGMA2_FLOOR)
    kw = {}
    if spec.kind in (Kind.BG, Kind.EBG):
        kw["alpha"] = 0.5
    if spec.kind in (Kind.ET, Kind.TE, Kind.TEOFF):
        kw["gamma"] = 0.25
    if spec.shifted:
        A, kw["mu_shift"] = _match_shift(spec, X, A)
    if spec.kind is Kind.IFA:
        kw["weights"] = np.full(spec.K + 1, 1.0 / (spec.K + 1))
        kw["means"] = np.arange(1, spec.K + 1, dtype=float)
    theta = Parameters(A=A, sigma2=sigma2, mu0=mu0, **kw)
    validate(spec, theta)
    return theta


def _match_shift(spec, X, A, alpha=0.5, bounds=(0.5, 5.0)):
    """Orient and rescale columns, and pick a shift, from projection moments.

    With coefficient ``u = c * b * y``, ``b ~ Bernoulli(alpha)``,
    ``y ~ N(mu, 1)``: ``E[u]^2 / E[u^2] = alpha mu^2 / (mu^2 + 1)``.
    """
    U = X @ np.linalg.pinv(A).T
    m1 = U.mean(0)
    A = A * np.where(m1 < 0, -1.0, 1.0)
    m1 = np.abs(m1)
    m2 = np.maximum(np.mean(U * U, 0), 1e-12)
    ratio = np.clip(m1 * m1 / m2, 0.0, 0.999 * alpha)
    mu = float(np.clip(np.sqrt(np.median(ratio / (alpha - ratio))), *bounds))
    scale = np.sqrt(m2 / (alpha * (mu * mu + 1.0)))
    if spec.kind is Kind.EBG:
        scale = scale / np.sqrt(2.0)  # E[s^2] = 2 for s ~ Exp(1)
    return A * scale, mu


# ---------------------------------------------------------------------------
# chains for all observations, optionally split over worker threads
# ---------------------------------------------------------------------------


class _ChainPool:
    """One chain per observation; row chunks each own an independent stream."""

    def __init__(self, spec, X, state: ChainState, seq: np.random.SeedSequence, threads: int):
        n = X.shape[0]
        self.spec, self.X = spec, X
        k = max(1, min(threads, n))
        self.chunks = np.array_split(np.arange(n), k)
        self.rngs = [np.random.default_rng(s) for s in seq.spawn(k)]
        self.parts = [state.take(c) for c in self.chunks]
        self.base = state
        self.executor = ThreadPoolExecutor(k) if k > 1 else None

    def sweep(self, theta, n_sweeps=1):
        def run(i):
            self.parts[i] = gibbs_sweep(self.spec, theta, self.X[self.chunks[i]], self.parts[i], self.rngs[i], n_sweeps)

        if self.executor is None:
            run(0)
        else:
            list(self.executor.map(run, range(len(self.parts))))

    @property
    def state(self) -> ChainState:
        return ChainState.merge(self.parts, self.base)

    @property
    def z(self) -> HiddenState:
        if len(self.parts) == 1:
            return self.parts[0].z
        return self.state.z

    def close(self):
        if self.executor is not None:
            self.executor.shutdown()


def _acceptance(pool, before):
    acc = sum(int(p.accepted.sum()) for p in pool.parts)
    prop = sum(int(p.proposed.sum()) for p in pool.parts)
    rate = (acc - before[0]) / (prop - before[1]) if prop > before[1] else float("nan")
    return rate, (acc, prop)


def _start(spec, data, init, seed, threads, warmup=0):
    validate(spec, init)
    X = data.observations
    if X.shape[1] != spec.d:
        raise ModelError(f"data has {X.shape[1]} columns, model expects d={spec.d}")
    init_seq, sweep_seq = np.random.SeedSequence(seed).spawn(2)
    state = ChainState.from_prior(spec, init, X.shape[0], np.random.default_rng(init_seq))
    pool = _ChainPool(spec, X, state, sweep_seq, threads)
    if warmup:
        pool.sweep(init, warmup)
    return X, pool


def _m_step(spec, stats, t):
    if not stats.is_finite():
        raise FitError("non-finite sufficient statistics", t)
    try:
        return m_step(spec, stats)
    except ModelError as exc:
        raise FitError(str(exc), t) from exc


def saem_fit(spec: ModelSpec, data: Dataset, init: Parameters, cfg: Optional[SaemConfig] = None):
    """Stochastic approximation EM with one MH-within-Gibbs chain per observation.

    Returns ``(theta, trace)``.
    """
    cfg = cfg or SaemConfig()
    X, pool = _start(spec, data, init, cfg.seed, cfg.threads, cfg.warmup)
    trace = FitTrace("saem", thin=cfg.thin)
    theta, S, S_first = init, None, None
    counts = (0, 0)
    trunc = cfg.truncation
    q = 0
    try:
        for t in range(1, cfg.iterations + 1):
            tic = time.perf_counter()
            pool.sweep(theta, cfg.sweeps)
            fresh = mean_stats(spec, X, pool.z)
            if S is None:
                delta, S_new = 1.0, fresh
                S_first = fresh
                if trunc is not None:
                    scale = 10.0 * (1.0 + float(np.linalg.norm(fresh.flat())))
                    radius = trunc.radius if trunc.radius is not None else scale
                    drift = trunc.drift if trunc.drift is not None else scale
            else:
                delta = cfg.step(t)
                S_new = S.towards(fresh, delta)
                if trunc is not None:
                    out = np.linalg.norm((S_new - S_first).flat()) > radius * 2.0 ** q
                    jump = np.linalg.norm((S_new - S).flat()) >= drift / t
                    if out or jump:
                        S_new, q = S_first, q + 1
            S = S_new
            theta = _m_step(spec, S, t)
            rate, counts = _acceptance(pool, counts)
            trace.record(t, theta, delta, rate, time.perf_counter() - tic, force=t == cfg.iterations)
    finally:
        pool.close()
    trace.final_stats = S
    trace.truncations = q
    trace.acceptance_rates = pool.state.acceptance_rates()
    return theta, trace


def mcem_fit(spec: ModelSpec, data: Dataset, init: Parameters, cfg: Optional[SaemConfig] = None,
             mc_samples: int = 10, burn_in: int = 0):
    """Monte Carlo EM: each E-step averages ``mc_samples`` successive sweeps.

    Chains persist across iterations; ``burn_in`` extra sweeps are discarded
    at the start of every iteration.  No memory is kept between E-steps.
    """
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    cfg = cfg or SaemConfig()
    X, pool = _start(spec, data, init, cfg.seed, cfg.threads, cfg.warmup)
    trace = FitTrace("mcem", thin=cfg.thin)
    theta, S = init, None
    counts = (0, 0)
    try:
        for t in range(1, cfg.iterations + 1):
            tic = time.perf_counter()
            if burn_in:
                pool.sweep(theta, burn_in)
            S = None
            for _ in range(mc_samples):
                pool.sweep(theta, cfg.sweeps)
                fresh = mean_stats(spec, X, pool.z)
                S = fresh if S is None else S + fresh
            S = S.scale(1.0 / mc_samples)
            theta = _m_step(spec, S, t)
            rate, counts = _acceptance(pool, counts)
            trace.record(t, theta, float("nan"), rate, time.perf_counter() - tic, force=t == cfg.iterations)
    finally:
        pool.close()
    trace.final_stats = S
    trace.acceptance_rates = pool.state.acceptance_rates()
    return theta, trace


# ---------------------------------------------------------------------------
# exact EM for IFA
# ---------------------------------------------------------------------------


def _ifa_terms(spec: ModelSpec, theta: Parameters, X):
    """Per-configuration quantities of the IFA posterior.

    Returns ``(codes, logjoint, means, cov)`` with ``logjoint[k, c] =
    log p(x_k, label c)`` and ``means[k, c]`` the Gaussian conditional mean
    of beta.
    """
    if spec.kind is not Kind.IFA:
        raise ModelError("exact E-step requires model ifa")
    K, p, d = spec.K, spec.p, spec.d
    n_cfg = (2 * K + 1) ** p
    if n_cfg > IFA_ENUMERATION_LIMIT:
        raise ModelError(f"(2K+1)^p = {n_cfg} label configurations exceed {IFA_ENUMERATION_LIMIT}; use saem instead")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    A, s2 = np.asarray(theta.A, dtype=float), theta.sigma2
    Xc = X - theta.mean_offset
    codes = np.array(list(itertools.product(range(-K, K + 1), repeat=p)), dtype=int).reshape(n_cfg, p)
    labels = np.abs(codes)
    centres = np.sign(codes) * theta.signed_means()[labels]  # (C, p)
    w = np.asarray(theta.weights, dtype=float)
    # signed label +-k (k >= 1) each carries half the class weight
    log_label = np.where(labels > 0, np.log(w[labels] / 2.0), np.log(w[0])).sum(1)
    P = np.eye(p) + A.T @ A / s2
    cov = np.linalg.inv(P)
    cov = 0.5 * (cov + cov.T)
    h = (Xc @ A / s2)[:, None, :] + centres[None]  # (n, C, p)
    means = h @ cov
    _, logdetP = np.linalg.slogdet(P)
    logjoint = (
        log_label[None]
        - 0.5 * d * np.log(2 * np.pi * s2)
        - 0.5 * logdetP
        - 0.5 * np.sum(Xc * Xc, 1)[:, None] / s2
        - 0.5 * np.sum(centres * centres, 1)[None]
        + 0.5 * np.einsum("nci,nci->nc", h, means)
    )
    return codes, logjoint, means, cov


def ifa_observed_loglik(spec: ModelSpec, theta: Parameters, X) -> float:
    """Observed-data log-likelihood (sum over rows) of the IFA Gaussian mixture."""
    _, logjoint, _, _ = _ifa_terms(spec, theta, X)
    return float(logsumexp(logjoint, axis=1).sum())


def ifa_exact_estep(spec: ModelSpec, theta: Parameters, X) -> SuffStats:
    """Exact conditional expectation of the IFA statistics, averaged over rows of ``X``."""
    codes, logjoint, means, cov = _ifa_terms(spec, theta, X)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, p, K = X.shape[0], spec.p, spec.K
    post = np.exp(logjoint - logsumexp(logjoint, axis=1, keepdims=True))  # (n, C)
    post /= n
    Eb_rows = np.einsum("nc,nci->ni", post, means) * n  # per-row E[beta]
    Ebb = cov + np.einsum("nc,nci,ncj->ij", post, means, means)
    labels = np.abs(codes)
    onehot = (labels[:, :, None] == np.arange(K + 1)).astype(float)  # (C, p, K+1)
    s0 = np.einsum("nc,cpk->k", post, onehot)
    signed = np.sign(codes)[None, :, :, None] * means[:, :, :, None] * onehot[None]
    s1 = np.einsum("nc,ncpk->k", post, signed)
    Eb_mean = Eb_rows.mean(0)
    if spec.estimate_mu0:
        bbT = np.empty((p + 1, p + 1))
        bbT[0, 0] = 1.0
        bbT[0, 1:] = bbT[1:, 0] = Eb_mean
        bbT[1:, 1:] = Ebb
        design = np.hstack([np.ones((n, 1)), Eb_rows])
    else:
        bbT, design = Ebb, Eb_rows
    return SuffStats(
        bbT=bbT,
        xbT=X.T @ design / n,
        x2=float(np.mean(np.sum(X * X, 1))),
        s0=s0,
        s1=s1,
    )


def ifa_em_fit(spec: ModelSpec, data: Dataset, init: Parameters, iterations: int = 100, thin: int = 1):
    """Exact EM for IFA; records the observed log-likelihood at every iterate."""
    validate(spec, init)
    X = data.observations
    trace = FitTrace("em-ifa", thin=thin)
    theta, S = init, None
    for t in range(1, iterations + 1):
        tic = time.perf_counter()
        S = ifa_exact_estep(spec, theta, X)
        theta = _m_step(spec, S, t)
        trace.record(t, theta, 1.0, float("nan"), time.perf_counter() - tic,
                     loglik=ifa_observed_loglik(spec, theta, X), force=t == iterations)
    trace.final_stats = S
    return theta, trace


# ---------------------------------------------------------------------------
# FAM-EM
# ---------------------------------------------------------------------------


def _normalize_coefficients(A, B, target=LOG2):
    """Common rescaling ``(A, B) -> (A / lam, B * lam)`` giving mean(B^2) = ``target``."""
    ms = float(np.mean(B * B))
    if ms <= 0:
        return A, B
    lam = np.sqrt(target / ms)
    return A / lam, B * lam


def famem_fit(spec: ModelSpec, data: Dataset, init: Parameters, iterations: int = 100, tol: float = 1e-8,
              thin: int = 1):
    """EM with the posterior mode plugged in for the hidden coefficients (Log model).

    After every M-step A and the coefficients are rescaled by one common
    factor so that the empirical mean square of all coefficients is log 2.
    """
    if spec.kind is not Kind.LOG:
        raise ModelError("fam-em requires model log")
    validate(spec, init)
    X = data.observations
    trace = FitTrace("fam-em", thin=thin)
    theta, beta = init, None
    for t in range(1, iterations + 1):
        tic = time.perf_counter()
        try:
            beta, _ = log_map(X - theta.mean_offset, np.asarray(theta.A), theta.sigma2, beta0=beta, tol=tol)
        except ModelError as exc:
            raise FitError(str(exc), t) from exc
        new = _m_step(spec, mean_stats(spec, X, HiddenState(beta=beta)), t)
        A, beta = _normalize_coefficients(np.asarray(new.A), beta)
        theta = new.replace(A=A)
        trace.record(t, theta, float("nan"), float("nan"), time.perf_counter() - tic, force=t == iterations)
    trace.coefficients = beta
    return theta, trace
