"""Per-model exponential-family machinery.

Every model shares the Gaussian observation term; they differ in the prior
on the hidden variables and in the extra statistics it contributes:

* censored models (bg, ebg): ``nu = sum_j b_j`` drives ``alpha``
* ternary models (et, te, teoff): ``zeta = sum_j |y_j|`` drives ``gamma``
* shifted variants: ``y_sum = sum_j y_j`` drives the shift ``mu``
* ifa: label counts ``s0[k]`` and signed sums ``s1[k]`` drive ``w`` and ``m``
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import (
    ALPHA_FLOOR,
    CENSORED,
    GAMMA_FLOOR,
    SIGMA2_FLOOR,
    TERNARY,
    WEIGHT_FLOOR,
    HiddenState,
    Kind,
    ModelError,
    ModelSpec,
    Parameters,
    SuffStats,
    beta_of,
    check_state,
    design_of,
)

LOG2PI = float(np.log(2.0 * np.pi))
LOG2 = float(np.log(2.0))
RIDGE_COND = 1e12
RIDGE_SCALE = 1e-8


# ---------------------------------------------------------------------------
# primitive samplers and densities
# ---------------------------------------------------------------------------


def sample_logistic(rng, size):
    """Logistic draws with CDF ``1 / (1 + exp(-2 t))``."""
    u = rng.random(size)
    return 0.5 * (np.log(u) - np.log1p(-u))


def sample_laplace(rng, size):
    e = rng.standard_exponential(size)
    sign = rng.integers(0, 2, size=size) * 2 - 1
    return e * sign


def sample_ternary(rng, gamma, size):
    u = rng.random(size)
    return np.where(u < gamma, -1.0, np.where(u < 2.0 * gamma, 1.0, 0.0))


def log_logistic(t):
    a = np.abs(t)
    return LOG2 - 2.0 * a - 2.0 * np.log1p(np.exp(-2.0 * a))


def log_laplace(t):
    return -LOG2 - np.abs(t)


def log_std_normal(t):
    return -0.5 * LOG2PI - 0.5 * np.square(t)


def log_exponential(s):
    s = np.asarray(s, dtype=float)
    return np.where(s >= 0, -s, -np.inf)


def log_ternary(y, gamma):
    a = np.abs(y)
    return a * np.log(gamma) + (1.0 - a) * np.log1p(-2.0 * gamma)


def proposal_parameters(theta: Parameters) -> Parameters:
    """Nondegenerate copy of ``theta`` for building proposal kernels."""
    changes = {}
    if theta.alpha is not None:
        changes["alpha"] = float(np.clip(theta.alpha, ALPHA_FLOOR, 1.0 - ALPHA_FLOOR))
    if theta.gamma is not None:
        changes["gamma"] = float(np.clip(theta.gamma, GAMMA_FLOOR, 0.5 - GAMMA_FLOOR))
    if theta.weights is not None:
        changes["weights"] = _floor_weights(np.asarray(theta.weights, dtype=float))
    return theta.replace(**changes) if changes else theta


def _floor_weights(w):
    w = np.maximum(w, WEIGHT_FLOOR)
    return w / w.sum()


def _shift(spec: ModelSpec, theta: Parameters) -> float:
    return float(theta.mu_shift) if spec.shifted else 0.0


# ---------------------------------------------------------------------------
# prior sampling and log densities
# ---------------------------------------------------------------------------


def sample_prior(spec: ModelSpec, theta: Parameters, rng, n: Optional[int] = None) -> HiddenState:
    """Draw hidden variables from their prior; ``n`` adds a leading batch axis."""
    shape = (spec.p,) if n is None else (n, spec.p)
    scalar = () if n is None else (n,)
    k = spec.kind
    mu = _shift(spec, theta)
    if k is Kind.LOG:
        return HiddenState(beta=sample_logistic(rng, shape))
    if k is Kind.LAP:
        return HiddenState(beta=sample_laplace(rng, shape))
    if k is Kind.EG:
        return HiddenState(s=rng.standard_exponential(shape), y=mu + rng.standard_normal(shape))
    if k is Kind.IFA:
        w = np.asarray(theta.weights, dtype=float)
        t = rng.choice(len(w), size=shape, p=w / w.sum())
        b = (rng.integers(0, 2, size=shape) * 2 - 1).astype(float)
        beta = b * theta.signed_means()[t] + rng.standard_normal(shape)
        return HiddenState(beta=beta, b=b, t=t)
    if k is Kind.BG:
        b = (rng.random(shape) < theta.alpha).astype(float)
        return HiddenState(b=b, y=mu + rng.standard_normal(shape))
    if k is Kind.EBG:
        s = rng.standard_exponential(shape)
        b = (rng.random(shape) < theta.alpha).astype(float)
        return HiddenState(s=s, b=b, y=mu + rng.standard_normal(shape))
    if k is Kind.ET:
        return HiddenState(s=rng.standard_exponential(shape), y=sample_ternary(rng, theta.gamma, shape))
    s = rng.standard_exponential(scalar)
    y = sample_ternary(rng, theta.gamma, shape)
    if k is Kind.TE:
        return HiddenState(s=s, y=y)
    return HiddenState(s=s, y=y, mu=sample_laplace(rng, scalar))


def log_prior(spec: ModelSpec, theta: Parameters, z: HiddenState) -> np.ndarray:
    """log q_m(z; theta), summed over components (keeps batch axes)."""
    check_state(spec, z)
    k = spec.kind
    mu = _shift(spec, theta)
    if k is Kind.LOG:
        return log_logistic(z.beta).sum(-1)
    if k is Kind.LAP:
        return log_laplace(z.beta).sum(-1)
    if k is Kind.IFA:
        w = np.asarray(theta.weights, dtype=float)
        with np.errstate(divide="ignore"):
            logw = np.log(w)
        centre = z.b * theta.signed_means()[z.t]
        return (logw[z.t] - LOG2 + log_std_normal(z.beta - centre)).sum(-1)
    total = 0.0
    if k in (Kind.EG, Kind.EBG, Kind.ET):
        total = total + log_exponential(z.s).sum(-1)
    if k in (Kind.TE, Kind.TEOFF):
        total = total + log_exponential(z.s)
    if k in CENSORED:
        a = theta.alpha
        total = total + (z.b * np.log(a) + (1.0 - z.b) * np.log1p(-a)).sum(-1)
    if k in (Kind.EG, Kind.BG, Kind.EBG):
        total = total + log_std_normal(z.y - mu).sum(-1)
    if k in TERNARY:
        total = total + log_ternary(z.y, theta.gamma).sum(-1)
    if k is Kind.TEOFF:
        total = total + log_laplace(z.mu)
    return total


def design_matrix(spec: ModelSpec, theta: Parameters) -> np.ndarray:
    """Full ``(d, q)`` matrix ``W`` with ``mean(x | z) = W @ design_of(z)``."""
    cols = []
    if spec.estimate_mu0:
        cols.append(np.asarray(theta.mu0, dtype=float)[:, None])
    cols.append(np.asarray(theta.A, dtype=float))
    if spec.has_offset:
        cols.append(np.ones((spec.d, 1)))
    return np.hstack(cols)


def predicted_mean(spec: ModelSpec, theta: Parameters, z: HiddenState) -> np.ndarray:
    return design_of(spec, z) @ design_matrix(spec, theta).T


def log_likelihood_given(spec: ModelSpec, theta: Parameters, x, z: HiddenState) -> np.ndarray:
    """log q_c(x | z; theta): the Gaussian observation term."""
    r = np.asarray(x, dtype=float) - predicted_mean(spec, theta, z)
    return -0.5 * spec.d * (LOG2PI + np.log(theta.sigma2)) - 0.5 * np.sum(r * r, -1) / theta.sigma2


def log_complete(spec: ModelSpec, theta: Parameters, x, z: HiddenState) -> np.ndarray:
    """log q(x, z; theta) with every normalizing constant included."""
    return log_likelihood_given(spec, theta, x, z) + log_prior(spec, theta, z)


# ---------------------------------------------------------------------------
# sufficient statistics and M-step
# ---------------------------------------------------------------------------


def extract_stats(spec: ModelSpec, x, z: HiddenState) -> SuffStats:
    """S(x, z) for one observation; batch axes are kept on every field."""
    x = np.asarray(x, dtype=float)
    D = design_of(spec, z)
    out = dict(
        bbT=D[..., :, None] * D[..., None, :],
        xbT=x[..., :, None] * D[..., None, :],
        x2=np.broadcast_to(np.sum(x * x, -1), D.shape[:-1]).copy(),
    )
    out.update(_extra_stats(spec, z, reduce=lambda a: a.sum(-1)))
    return SuffStats(**out)


def mean_stats(spec: ModelSpec, X, z: HiddenState, weights=None) -> SuffStats:
    """Average of :func:`extract_stats` over the rows of ``X`` (optionally weighted)."""
    X = np.asarray(X, dtype=float)
    D = design_of(spec, z)
    n = X.shape[0]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)
    Dw = D * w[:, None]
    out = dict(bbT=Dw.T @ D, xbT=X.T @ Dw, x2=float(w @ np.einsum("ij,ij->i", X, X)))
    out.update(_extra_stats(spec, z, reduce=lambda a: a.sum(-1) @ w))
    return SuffStats(**out)


def _extra_stats(spec: ModelSpec, z: HiddenState, reduce):
    out = {}
    if spec.kind in CENSORED:
        out["nu"] = reduce(np.asarray(z.b, dtype=float))
    if spec.kind in TERNARY:
        out["zeta"] = reduce(np.abs(z.y))
    if spec.shifted:
        out["y_sum"] = reduce(np.asarray(z.y, dtype=float))
    if spec.kind is Kind.IFA:
        labels = np.arange(spec.K + 1)
        onehot = (np.asarray(z.t)[..., None] == labels).astype(float)  # (..., p, K+1)
        signed = (z.b * z.beta)[..., None] * onehot
        out["s0"] = _reduce_labels(reduce, onehot)
        out["s1"] = _reduce_labels(reduce, signed)
    return out


def _reduce_labels(reduce, a):
    # reduce() sums the component axis (-1); move labels out of the way first.
    return np.moveaxis(reduce(np.moveaxis(a, -1, 0)), 0, -1)


def _regularized_inverse(B, name="bbT"):
    B = 0.5 * (B + B.T)
    if not np.all(np.isfinite(B)):
        raise ModelError(f"statistic {name} has non-finite entries")
    q = B.shape[0]
    cond = np.linalg.cond(B)
    if not np.isfinite(cond) or cond > RIDGE_COND:
        tr = np.trace(B)
        if not tr > 0:
            raise ModelError(f"statistic {name} is singular (zero trace); cannot solve M-step")
        B = B + RIDGE_SCALE * tr / q * np.eye(q)
        if not np.linalg.cond(B) < 1.0 / np.finfo(float).eps:
            raise ModelError(f"statistic {name} is singular beyond regularization tolerance")
    return np.linalg.inv(B)


def m_step(spec: ModelSpec, stats: SuffStats) -> Parameters:
    """Closed-form maximizer of ``theta -> phi(theta) . stats - log C(theta)``.

    ``stats`` must already be averaged over observations.  Discrete
    probabilities landing on a boundary are clipped into their open domain.
    """
    p, d = spec.p, spec.d
    bbT = np.asarray(stats.bbT, dtype=float)
    xbT = np.asarray(stats.xbT, dtype=float)
    mu0 = None
    if spec.has_offset:
        # last design coordinate is the hidden offset, whose column is fixed to ones
        rhs = xbT[:, :p] - np.outer(np.ones(d), bbT[p, :p])
        A = rhs @ _regularized_inverse(bbT[:p, :p])
        W = np.hstack([A, np.ones((d, 1))])
    else:
        W = xbT @ _regularized_inverse(bbT)
        if spec.estimate_mu0:
            mu0, A = W[:, 0].copy(), W[:, 1:].copy()
        else:
            A = W
    resid = stats.x2 - 2.0 * np.sum(W * xbT) + np.sum((W.T @ W) * bbT)
    sigma2 = max(float(resid) / d, SIGMA2_FLOOR)

    kw = {}
    if spec.kind in CENSORED:
        kw["alpha"] = float(np.clip(stats.nu / p, ALPHA_FLOOR, 1.0 - ALPHA_FLOOR))
    if spec.kind in TERNARY:
        kw["gamma"] = float(np.clip(stats.zeta / (2.0 * p), GAMMA_FLOOR, 0.5 - GAMMA_FLOOR))
    if spec.shifted:
        kw["mu_shift"] = float(stats.y_sum / p)
    if spec.kind is Kind.IFA:
        s0 = np.asarray(stats.s0, dtype=float)
        s1 = np.asarray(stats.s1, dtype=float)
        safe = np.where(s0[1:] > 1e-12, s0[1:], 1.0)
        kw["means"] = np.where(s0[1:] > 1e-12, s1[1:] / safe, 0.0)
        kw["weights"] = _floor_weights(s0 / p)
    return Parameters(A=A, sigma2=sigma2, mu0=mu0, **kw)


def expected_log_complete(spec: ModelSpec, theta: Parameters, stats: SuffStats) -> float:
    """``phi(theta) . stats - log C(theta)`` for averaged statistics.

    Terms that do not depend on ``theta`` (e.g. the logistic prior of Log-ICA)
    are left out, so ``log_complete(theta, x, z) - expected_log_complete(theta,
    extract_stats(x, z))`` is a function of ``(x, z)`` alone.
    """
    p, d = spec.p, spec.d
    W = design_matrix(spec, theta)
    quad = stats.x2 - 2.0 * np.sum(W * stats.xbT) + np.sum((W.T @ W) * stats.bbT)
    val = -0.5 * d * (LOG2PI + np.log(theta.sigma2)) - 0.5 * quad / theta.sigma2
    if spec.kind in CENSORED:
        val += stats.nu * np.log(theta.alpha) + (p - stats.nu) * np.log1p(-theta.alpha)
    if spec.kind in TERNARY:
        val += stats.zeta * np.log(theta.gamma) + (p - stats.zeta) * np.log1p(-2.0 * theta.gamma)
    if spec.shifted:
        val += theta.mu_shift * stats.y_sum - 0.5 * p * theta.mu_shift ** 2
    if spec.kind is Kind.IFA:
        m = np.asarray(theta.means, dtype=float)
        val += np.sum(m * stats.s1[1:] - 0.5 * m * m * stats.s0[1:])
        val += np.sum(stats.s0 * np.log(np.asarray(theta.weights, dtype=float)))
    return float(val)


# ---------------------------------------------------------------------------
# single-coordinate proposals
# ---------------------------------------------------------------------------


def coordinate_groups(spec: ModelSpec):
    """Coordinate groups in sweep order as ``(field, j)``; ``j`` is None for scalars."""
    k = spec.kind
    per_component = {
        Kind.LOG: ("beta",),
        Kind.LAP: ("beta",),
        Kind.EG: ("s", "y"),
        Kind.IFA: ("t", "b", "beta"),
        Kind.BG: ("b", "y"),
        Kind.EBG: ("s", "b", "y"),
        Kind.ET: ("s", "y"),
        Kind.TE: ("y",),
        Kind.TEOFF: ("y",),
    }[k]
    groups = []
    if k in (Kind.TE, Kind.TEOFF):
        groups.append(("s", None))
    for j in range(spec.p):
        groups.extend((name, j) for name in per_component)
    if k is Kind.TEOFF:
        groups.append(("mu", None))
    return groups


def propose_values(spec: ModelSpec, theta: Parameters, z: HiddenState, group, rng):
    """Draw a replacement for one coordinate group from its prior conditional.

    ``theta`` should already be nondegenerate (see :func:`proposal_parameters`).
    Returns the new values with the batch shape of ``z``.
    """
    name, j = group
    ref = getattr(z, name)
    size = np.shape(ref)[:-1] if j is not None else np.shape(ref)
    k = spec.kind
    if name == "beta":
        if k is Kind.LOG:
            return sample_logistic(rng, size)
        if k is Kind.LAP:
            return sample_laplace(rng, size)
        centre = z.b[..., j] * theta.signed_means()[z.t[..., j]]
        return centre + rng.standard_normal(size)
    if name == "s":
        return rng.standard_exponential(size)
    if name == "mu":
        return sample_laplace(rng, size)
    if name == "y":
        if k in TERNARY:
            return sample_ternary(rng, theta.gamma, size)
        return _shift(spec, theta) + rng.standard_normal(size)
    if name == "b":
        if k in CENSORED:
            return (rng.random(size) < theta.alpha).astype(float)
        m_t = theta.signed_means()[z.t[..., j]]
        p_plus = 0.5 * (1.0 + np.tanh(z.beta[..., j] * m_t))  # 1/(1+exp(-2 beta m))
        return np.where(rng.random(size) < p_plus, 1.0, -1.0)
    if name == "t":
        m = theta.signed_means()
        w = np.asarray(theta.weights, dtype=float)
        logits = np.log(w) - 0.5 * np.square(z.beta[..., j, None] - z.b[..., j, None] * m)
        logits -= logits.max(-1, keepdims=True)
        probs = np.exp(logits)
        cdf = np.cumsum(probs, -1)
        u = rng.random(size)[..., None] * cdf[..., -1:]
        return np.minimum((u >= cdf).sum(-1), len(w) - 1)
    raise ModelError(f"unknown coordinate group {group!r}")


def propose_coordinate(spec: ModelSpec, theta: Parameters, z: HiddenState, index: int, rng) -> HiddenState:
    """Copy of ``z`` with coordinate group ``index`` redrawn from its prior conditional."""
    groups = coordinate_groups(spec)
    if not 0 <= index < len(groups):
        raise ModelError(f"coordinate group index {index} out of range [0, {len(groups)})")
    name, j = groups[index]
    new = propose_values(spec, proposal_parameters(theta), z, (name, j), rng)
    arr = np.array(getattr(z, name), copy=True)
    if j is None:
        arr = np.asarray(new, dtype=arr.dtype).reshape(arr.shape)
    else:
        arr[..., j] = new
    return z.replace(**{name: arr})


@dataclass(frozen=True)
class ModelKernel:
    """The per-model operations bound to one specification."""

    spec: ModelSpec

    def sample_prior(self, theta, rng, n=None):
        return sample_prior(self.spec, theta, rng, n)

    def log_complete(self, theta, x, z):
        return log_complete(self.spec, theta, x, z)

    def extract_stats(self, x, z):
        return extract_stats(self.spec, x, z)

    def m_step(self, stats):
        return m_step(self.spec, stats)

    def propose_coordinate(self, theta, z, index, rng):
        return propose_coordinate(self.spec, theta, z, index, rng)


# ---------------------------------------------------------------------------
# EG tail
# ---------------------------------------------------------------------------


def eg_tail_survival(t: float, n_samples: int, rng, chunk: int = 1_000_000) -> float:
    """log of the empirical fraction of ``beta = s * y`` draws exceeding ``t``.

    ``s`` is exponential(1) and ``y`` standard normal.  Raises ModelError if
    no draw exceeds ``t``.
    """
    if t < 0:
        raise ModelError(f"t must be nonnegative, got {t}")
    hits = 0
    left = int(n_samples)
    while left > 0:
        m = min(chunk, left)
        beta = rng.standard_exponential(m) * rng.standard_normal(m)
        hits += int(np.count_nonzero(beta > t))
        left -= m
    if hits == 0:
        raise ModelError(f"insufficient samples for t={t}: no exceedances in {n_samples} draws")
    return float(np.log(hits / n_samples))
