"""MAP reconstruction of hidden variables for a fitted model.

All objectives are written in the scaled form

    f(z) = |x~ - A beta(z)|^2 / (2 sigma2) + penalty(z)

with ``x~ = x - mu0``; the quadratic part is handled through
``G = A^T A / sigma2`` and ``c = A^T x~ / sigma2``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import HiddenState, Kind, ModelError, ModelSpec, Parameters, beta_of, validate

LOG2 = float(np.log(2.0))


@dataclass
class ReconOptions:
    tol: float = 1e-8
    max_iter: int = 10_000
    binary_budget: int = 20         # exhaustive over 2^p while p <= this
    ternary_budget: int = 12        # exhaustive over 3^p while p <= this
    ifa_budget: int = 3 ** 12       # exhaustive while (2K+1)^p <= this
    local_search: bool = True
    restarts: int = 10
    seed: int = 0


@dataclass
class ReconResult:
    z: HiddenState
    beta: np.ndarray
    objective: float
    iterations: int = 0
    exhaustive: bool = True
    history: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def _xi(beta):
    """2 log(e^b + e^-b), evaluated stably."""
    a = np.abs(beta)
    return 2.0 * (a + np.log1p(np.exp(-2.0 * a)))


def _ternary_rho(gamma):
    # -log P(y = +-1) + log P(y = 0)
    return float(np.log((1.0 - 2.0 * gamma) / gamma))


def _binary_rho(alpha):
    return float(np.log((1.0 - alpha) / alpha))


def objective(spec: ModelSpec, theta: Parameters, x, z: HiddenState) -> float:
    """Penalized residual minimized by :func:`reconstruct`."""
    x = np.asarray(x, dtype=float) - theta.mean_offset
    beta = beta_of(spec, z)
    r = x - theta.A @ beta
    if spec.kind is Kind.TEOFF:
        r = r - float(z.mu)
    val = float(r @ r) / (2.0 * theta.sigma2)
    k = spec.kind
    mu = theta.mu_shift if spec.shifted else 0.0
    if k is Kind.LOG:
        return val + float(np.sum(_xi(beta)))
    if k is Kind.LAP:
        return val + float(np.sum(np.abs(beta)))
    if k is Kind.IFA:
        centre = z.b * theta.signed_means()[z.t]
        w = np.asarray(theta.weights, dtype=float)
        return val + 0.5 * float(np.sum((beta - centre) ** 2)) - float(np.sum(np.log(w[z.t])))
    if k in (Kind.EG, Kind.EBG, Kind.ET, Kind.TE, Kind.TEOFF):
        val += float(np.sum(z.s))
    if k in (Kind.BG, Kind.EBG):
        val += _binary_rho(theta.alpha) * float(np.sum(z.b))
    if k in (Kind.EG, Kind.BG, Kind.EBG):
        val += 0.5 * float(np.sum((z.y - mu) ** 2))
    if k in (Kind.ET, Kind.TE, Kind.TEOFF):
        val += _ternary_rho(theta.gamma) * float(np.sum(np.abs(z.y)))
    return val


# ---------------------------------------------------------------------------
# continuous solvers
# ---------------------------------------------------------------------------


def log_map(Xc, A, sigma2, beta0=None, tol=1e-8, max_iter=200):
    """Minimize the Log-ICA objective for each row of ``Xc`` (damped Newton).

    A step is accepted when it passes the Armijo test or halves the gradient
    norm; the second test keeps progress going once objective differences
    drop below roundoff.  Rows whose gradient cannot be reduced further are
    accepted if it is already at roundoff level relative to ``A^T x / sigma2``.
    Returns ``(beta, iterations)``; raises ModelError naming the first row
    that fails to converge.
    """
    Xc = np.atleast_2d(np.asarray(Xc, dtype=float))
    G = A.T @ A / sigma2
    c = Xc @ A / sigma2
    n, p = c.shape
    eye = np.eye(p)
    beta = np.linalg.solve(G + 2.0 * eye, c.T).T if beta0 is None else np.array(beta0, dtype=float).reshape(n, p)

    def f(b, rows):
        return 0.5 * np.einsum("ni,ij,nj->n", b, G, b) - np.einsum("ni,ni->n", c[rows], b) + _xi(b).sum(1)

    def grad(b, rows):
        return b @ G - c[rows] + 2.0 * np.tanh(b)

    roundoff = 1e-10 * (1.0 + np.abs(c).max(1) + np.abs(G).max())
    active = np.ones(n, dtype=bool)
    for it in range(max_iter):
        rows = np.flatnonzero(active)
        b = beta[rows]
        g = grad(b, rows)
        gn = np.abs(g).max(1)
        keep = gn > tol
        active[rows[~keep]] = False
        rows, b, g, gn = rows[keep], b[keep], g[keep], gn[keep]
        if not len(rows):
            return beta, it
        th = np.tanh(b)
        H = G[None] + (2.0 * (1.0 - th * th))[:, :, None] * eye[None]
        step = np.linalg.solve(H, g[:, :, None])[:, :, 0]
        f0 = f(b, rows)
        slope = np.einsum("ni,ni->n", g, step)
        tau = np.ones(len(rows))
        ok = np.zeros(len(rows), dtype=bool)
        cand = b.copy()
        for _ in range(60):
            trial = b - tau[:, None] * step
            good = (f(trial, rows) <= f0 - 1e-4 * tau * slope) | (np.abs(grad(trial, rows)).max(1) <= 0.5 * gn)
            newly = good & ~ok
            cand[newly] = trial[newly]
            ok |= good
            if ok.all():
                break
            tau = np.where(ok, tau, 0.5 * tau)
        beta[rows] = cand
        stuck = ~ok
        if stuck.any():
            if np.any(gn[stuck] > roundoff[rows[stuck]]):
                bad = rows[stuck][gn[stuck] > roundoff[rows[stuck]]]
                raise ModelError(f"log reconstruction failed to converge for observation {bad[0]}")
            active[rows[stuck]] = False
    rows = np.flatnonzero(active)
    if len(rows):
        gn = np.abs(grad(beta[rows], rows)).max(1)
        bad = rows[(gn > tol) & (gn > roundoff[rows])]
        if len(bad):
            raise ModelError(f"log reconstruction failed to converge for observation {bad[0]}")
    return beta, max_iter


def lasso_cd(G, c, tol=1e-8, max_iter=10_000):
    """Minimize ``0.5 b^T G b - c^T b + sum |b|`` by cyclic coordinate descent.

    The result is polished by solving exactly on the detected active set.
    Returns ``(beta, sweeps)``.
    """
    p = len(c)
    beta = np.zeros(p)
    diag = np.diag(G)
    it = 0
    for it in range(1, max_iter + 1):
        biggest = 0.0
        for j in range(p):
            if diag[j] <= 0:
                continue
            r = c[j] - G[j] @ beta + diag[j] * beta[j]
            new = np.sign(r) * max(abs(r) - 1.0, 0.0) / diag[j]
            biggest = max(biggest, abs(new - beta[j]))
            beta[j] = new
        if biggest <= 1e-15 * (1.0 + np.abs(beta).max()):
            break
        if it % 10 == 0 and lasso_kkt_residual(G, c, _polish_lasso(G, c, beta)) <= tol * 1e-2:
            break
    polished = _polish_lasso(G, c, beta)
    if lasso_kkt_residual(G, c, polished) <= lasso_kkt_residual(G, c, beta):
        beta = polished
    return beta, it


def _polish_lasso(G, c, beta):
    act = beta != 0
    if not act.any():
        return beta
    sgn = np.sign(beta[act])
    try:
        sol = np.linalg.solve(G[np.ix_(act, act)], c[act] - sgn)
    except np.linalg.LinAlgError:
        return beta
    if np.any(np.sign(sol) != sgn):
        return beta
    out = np.zeros_like(beta)
    out[act] = sol
    return out


def lasso_kkt_residual(G, c, beta):
    grad = c - G @ beta  # = A^T (x - A beta) / sigma2
    act = beta != 0
    res = np.where(act, np.abs(grad - np.sign(beta)), np.maximum(np.abs(grad) - 1.0, 0.0))
    return float(res.max()) if len(res) else 0.0


def nnqp(H, g, tol=1e-13, max_iter=10_000):
    """Minimize ``0.5 s^T H s - g^T s`` over ``s >= 0`` (batched on leading axes)."""
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    s = np.zeros_like(g)
    diag = np.diagonal(H, axis1=-2, axis2=-1)
    safe = np.where(diag > 0, diag, 1.0)
    p = g.shape[-1]
    for _ in range(max_iter):
        biggest = 0.0
        for j in range(p):
            r = g[..., j] - np.einsum("...k,...k->...", H[..., j, :], s) + diag[..., j] * s[..., j]
            new = np.where(diag[..., j] > 0, np.maximum(r, 0.0) / safe[..., j], 0.0)
            biggest = max(biggest, float(np.max(np.abs(new - s[..., j]), initial=0.0)))
            s[..., j] = new
        if biggest <= tol * (1.0 + float(np.max(np.abs(s), initial=0.0))):
            break
    return s


def _nnqp_polish(H, g, s):
    free = s > 0
    if not free.any():
        return s
    try:
        sol = np.linalg.solve(H[np.ix_(free, free)], g[free])
    except np.linalg.LinAlgError:
        return s
    if np.any(sol <= 0):
        return s
    out = np.zeros_like(s)
    out[free] = sol
    return out


def _quad(G, c, beta):
    return 0.5 * float(beta @ G @ beta) - float(c @ beta)


# ---------------------------------------------------------------------------
# per-model solvers
# ---------------------------------------------------------------------------


def _eg_alternate(G, c, mu, mask, tol, max_iter):
    """Alternate y (ridge) and s (NNQP) for scale-times-gaussian coefficients.

    ``mask`` zeroes the switched-off components (ebg).  Returns (s, y, f, iters, history).
    """
    p = len(c)
    s = mask.astype(float).copy()
    y = np.full(p, mu)
    eye = np.eye(p)

    def f(s, y):
        beta = s * mask * y
        return _quad(G, c, beta) + float(np.sum(s)) + 0.5 * float(np.sum((y - mu) ** 2))

    hist = [f(s, y)]
    it = 0
    for it in range(1, max_iter + 1):
        S = np.diag(s * mask)
        y = np.linalg.solve(S @ G @ S + eye, S @ c + mu)
        Y = np.diag(y * mask)
        H = Y @ G @ Y
        gl = Y @ c - 1.0
        s = _nnqp_polish(H, gl, nnqp(H, gl))
        hist.append(f(s, y))
        if hist[-2] - hist[-1] < tol * 1e-2:
            break
    return s * mask, y, hist[-1], it, hist


def _local_search(score, p, levels, rng, restarts, start=None):
    """First-improvement single-coordinate search over ``levels^p``."""
    best, best_f = None, np.inf
    for r in range(restarts):
        cur = np.array(start if (r == 0 and start is not None) else rng.choice(levels, size=p), dtype=float)
        fc = score(cur)
        improved = True
        while improved:
            improved = False
            for j in range(p):
                for v in levels:
                    if v == cur[j]:
                        continue
                    cand = cur.copy()
                    cand[j] = v
                    fv = score(cand)
                    if fv < fc - 1e-12:
                        cur, fc, improved = cand, fv, True
        if fc < best_f:
            best, best_f = cur, fc
    return best, best_f


def _configs(levels, p):
    return np.array(list(itertools.product(levels, repeat=p)), dtype=float)


def _bg_scores(B, G, c, mu, rho):
    """Objective (without the |x~|^2 constant) and optimal y for each 0/1 row of B."""
    p = G.shape[0]
    M = B[:, :, None] * G[None] * B[:, None, :] + np.eye(p)[None]
    rhs = B * c + mu
    y = np.linalg.solve(M, rhs[:, :, None])[:, :, 0]
    beta = B * y
    f = 0.5 * np.einsum("ni,ij,nj->n", beta, G, beta) - beta @ c + 0.5 * np.sum((y - mu) ** 2, 1) + rho * B.sum(1)
    return f, y


def _te_scores(Y, G, c, rho):
    vGv = np.einsum("ni,ij,nj->n", Y, G, Y)
    vc = Y @ c
    s = np.where(vGv > 0, np.maximum(vc - 1.0, 0.0) / np.where(vGv > 0, vGv, 1.0), 0.0)
    f = 0.5 * s * s * vGv - s * vc + s + rho * np.abs(Y).sum(1)
    return f, s


def _et_scores(Y, G, c, rho):
    H = Y[:, :, None] * G[None] * Y[:, None, :]
    g = Y * c - 1.0
    s = nnqp(H, g, tol=1e-12, max_iter=2000)
    f = 0.5 * np.einsum("ni,nij,nj->n", s, H, s) - np.einsum("ni,ni->n", g, s) + rho * np.abs(Y).sum(1)
    return f, s


def _chunked(fn, configs, *args, chunk=1 << 14):
    fs, extra = [], []
    for start in range(0, len(configs), chunk):
        f, e = fn(configs[start:start + chunk], *args)
        fs.append(f)
        extra.append(e)
    return np.concatenate(fs), np.concatenate(extra)


def reconstruct(spec: ModelSpec, theta: Parameters, x, options: Optional[ReconOptions] = None) -> ReconResult:
    """MAP estimate of the hidden variables of observation ``x``."""
    validate(spec, theta)
    opts = options or ReconOptions()
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.d,):
        raise ModelError(f"observation has shape {x.shape}, expected ({spec.d},)")
    rng = np.random.default_rng(opts.seed)
    A, s2 = np.asarray(theta.A, dtype=float), theta.sigma2
    xc = x - theta.mean_offset
    G = A.T @ A / s2
    c = A.T @ xc / s2
    p = spec.p
    k = spec.kind
    mu = theta.mu_shift if spec.shifted else 0.0
    exhaustive = True
    iters = 0
    hist = []

    def need_search(budget_ok):
        if not budget_ok and not opts.local_search:
            raise ModelError(f"exhaustive search budget exceeded for p={p} and local search disabled")
        return not budget_ok

    if k is Kind.LOG:
        beta, iters = log_map(xc[None], A, s2, tol=opts.tol)
        z = HiddenState(beta=beta[0])
    elif k is Kind.LAP:
        beta, iters = lasso_cd(G, c, tol=opts.tol, max_iter=opts.max_iter)
        z = HiddenState(beta=beta)
    elif k is Kind.EG:
        sv, yv, _, iters, hist = _eg_alternate(G, c, mu, np.ones(p, dtype=bool), opts.tol, opts.max_iter)
        z = HiddenState(s=sv, y=yv)
    elif k is Kind.BG:
        if need_search(p <= opts.binary_budget):
            exhaustive = False
            b, _ = _local_search(lambda b: _bg_scores(b[None], G, c, mu, _binary_rho(theta.alpha))[0][0],
                                 p, [0.0, 1.0], rng, opts.restarts)
            B = b[None]
        else:
            B = _configs([0.0, 1.0], p)
        f, Y = _chunked(_bg_scores, B, G, c, mu, _binary_rho(theta.alpha))
        i = int(np.argmin(f))
        z = HiddenState(b=B[i].copy(), y=Y[i].copy())
    elif k is Kind.EBG:
        rho = _binary_rho(theta.alpha)

        def ebg_score(b):
            sv, yv, fv, _, _ = _eg_alternate(G, c, mu, b.astype(bool), opts.tol, opts.max_iter)
            return fv + rho * b.sum(), sv, yv

        if need_search(p <= opts.binary_budget):
            exhaustive = False
            b, _ = _local_search(lambda b: ebg_score(b)[0], p, [0.0, 1.0], rng, opts.restarts)
            cands = [b]
        else:
            cands = list(_configs([0.0, 1.0], p))
        scored = [(ebg_score(b), b) for b in cands]
        (fv, sv, yv), b = min(scored, key=lambda t: t[0][0])
        z = HiddenState(s=sv, b=b.copy(), y=yv)
    elif k is Kind.ET:
        rho = _ternary_rho(theta.gamma)
        if need_search(p <= opts.ternary_budget):
            exhaustive = False
            y, _ = _local_search(lambda y: _et_scores(y[None], G, c, rho)[0][0], p, [-1.0, 0.0, 1.0], rng, opts.restarts)
            Ycfg = y[None]
        else:
            Ycfg = _configs([-1.0, 0.0, 1.0], p)
        f, S = _chunked(_et_scores, Ycfg, G, c, rho)
        i = int(np.argmin(f))
        y = Ycfg[i].copy()
        H = (y[:, None] * G * y[None, :])
        sv = _nnqp_polish(H, y * c - 1.0, S[i])
        # a zero scale leaves its sign free: report 0 if that is no worse, else +1
        idle = (sv == 0.0) & (y != 0.0)
        y[idle] = 0.0 if rho >= 0 else 1.0
        z = HiddenState(s=sv, y=y)
    elif k in (Kind.TE, Kind.TEOFF):
        rho = _ternary_rho(theta.gamma)
        local = need_search(p <= opts.ternary_budget)
        exhaustive = not local
        Ycfg = None if local else _configs([-1.0, 0.0, 1.0], p)

        def te_solve(cvec, start=None):
            if local:
                y, _ = _local_search(lambda y: _te_scores(y[None], G, cvec, rho)[0][0], p, [-1.0, 0.0, 1.0],
                                     rng, opts.restarts, start=start)
                f, sv = _te_scores(y[None], G, cvec, rho)
                return y, float(sv[0]), float(f[0])
            f, sv = _chunked(_te_scores, Ycfg, G, cvec, rho)
            i = int(np.argmin(f))
            return Ycfg[i].copy(), float(sv[i]), float(f[i])

        if k is Kind.TE:
            y, sv, _ = te_solve(c)
            if sv == 0.0:
                y = np.zeros(p) if rho >= 0 else np.abs(y)
            z = HiddenState(s=np.float64(sv), y=y)
        else:
            off = float(np.mean(xc))
            y, sv = np.zeros(p), 0.0
            z = HiddenState(s=np.float64(sv), y=y, mu=np.float64(off))
            hist = [objective(spec, theta, x, z)]
            for iters in range(1, opts.max_iter + 1):
                y, sv, _ = te_solve(A.T @ (xc - off) / s2, start=y)
                off = float(np.mean(xc - sv * (A @ y)))
                z = HiddenState(s=np.float64(sv), y=y, mu=np.float64(off))
                hist.append(objective(spec, theta, x, z))
                if hist[-2] - hist[-1] < opts.tol * 1e-2:
                    break
    elif k is Kind.IFA:
        K = spec.K
        labels = np.arange(-K, K + 1)
        m = theta.signed_means()
        logw = np.log(np.asarray(theta.weights, dtype=float))
        P = G + np.eye(p)

        def ifa_scores(C):
            Ci = C.astype(int)
            centre = np.sign(C) * m[np.abs(Ci)]
            beta = np.linalg.solve(P, (c + centre).T).T
            f = (0.5 * np.einsum("ni,ij,nj->n", beta, G, beta) - beta @ c
                 + 0.5 * np.sum((beta - centre) ** 2, 1) - logw[np.abs(Ci)].sum(1))
            return f, beta

        if need_search((2 * K + 1) ** p <= opts.ifa_budget):
            exhaustive = False
            cfg, _ = _local_search(lambda C: ifa_scores(C[None])[0][0], p, list(labels.astype(float)),
                                   rng, opts.restarts)
            C = cfg[None]
        else:
            C = _configs(labels, p)
        f, Bt = _chunked(ifa_scores, C, )
        i = int(np.argmin(f))
        ci = C[i].astype(int)
        z = HiddenState(beta=Bt[i].copy(), b=np.where(ci < 0, -1.0, 1.0), t=np.abs(ci))
    else:  # pragma: no cover
        raise ModelError(f"unsupported model {k}")

    return ReconResult(z=z, beta=beta_of(spec, z), objective=objective(spec, theta, x, z),
                       iterations=int(iters), exhaustive=exhaustive, history=hist)
