"""Metropolis-Hastings within Gibbs sampling of the hidden variables.

Each coordinate group is redrawn from its prior conditional, so the
acceptance ratio reduces to the likelihood ratio ``q(x | z~) / q(x | z)``.
Chains for different observations are independent; they are advanced
together as rows of batched arrays.

The likelihood ratio is evaluated from ``u = D^T (x - mu0 - D c)`` where
``D = [A, 1?]`` and ``c = [beta, offset?]``: changing ``c`` by ``delta``
changes ``|residual|^2`` by ``delta^T G delta - 2 delta^T u`` with
``G = D^T D``, which costs O(p) per observation instead of O(d).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .distributions import (
    coordinate_groups,
    extract_stats,
    predicted_mean,
    proposal_parameters,
    propose_values,
    sample_prior,
)
from .model import HiddenState, Kind, ModelSpec, Parameters, SuffStats, beta_of, check_state


@dataclass
class ChainState:
    """Hidden states of a batch of chains plus bookkeeping.

    ``z`` carries a leading axis with one row per chain.
    """

    z: HiddenState
    sweeps: int = 0
    accepted: Optional[np.ndarray] = None
    proposed: Optional[np.ndarray] = None

    @classmethod
    def start(cls, spec: ModelSpec, z: HiddenState) -> "ChainState":
        check_state(spec, z)
        n_groups = len(coordinate_groups(spec))
        return cls(z=z, accepted=np.zeros(n_groups, dtype=np.int64), proposed=np.zeros(n_groups, dtype=np.int64))

    @classmethod
    def from_prior(cls, spec, theta, n, rng) -> "ChainState":
        return cls.start(spec, sample_prior(spec, theta, rng, n))

    @property
    def n_chains(self) -> int:
        return len(next(iter(self.z.items()))[1])

    def acceptance_rates(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.proposed > 0, self.accepted / np.maximum(self.proposed, 1), np.nan)

    def take(self, rows) -> "ChainState":
        z = HiddenState(**{k: v[rows] for k, v in self.z.items()})
        zeros = np.zeros_like(self.accepted)
        return ChainState(z=z, sweeps=self.sweeps, accepted=zeros, proposed=zeros.copy())

    @staticmethod
    def merge(parts, base: "ChainState") -> "ChainState":
        """Reassemble row chunks produced from ``base.take``."""
        names = [k for k, _ in parts[0].z.items()]
        z = HiddenState(**{k: np.concatenate([getattr(c.z, k) for c in parts]) for k in names})
        return ChainState(
            z=z,
            sweeps=parts[0].sweeps,
            accepted=base.accepted + sum(c.accepted for c in parts),
            proposed=base.proposed + sum(c.proposed for c in parts),
        )


def mh_ratio(spec: ModelSpec, theta: Parameters, x, z: HiddenState, z_tilde: HiddenState):
    """Likelihood ratio ``q(x | z~; theta) / q(x | z; theta)``."""
    x = np.asarray(x, dtype=float)
    r0 = x - predicted_mean(spec, theta, z)
    r1 = x - predicted_mean(spec, theta, z_tilde)
    return np.exp((np.sum(r0 * r0, -1) - np.sum(r1 * r1, -1)) / (2.0 * theta.sigma2))


def _residual_design(spec: ModelSpec, theta: Parameters):
    D = np.asarray(theta.A, dtype=float)
    if spec.has_offset:
        D = np.hstack([D, np.ones((spec.d, 1))])
    return D


def _coords(spec: ModelSpec, z: HiddenState):
    c = beta_of(spec, z)
    if spec.has_offset:
        c = np.concatenate([c, np.asarray(z.mu, dtype=float)[:, None]], axis=1)
    return c


def _change(spec: ModelSpec, f: dict, name: str, j, new):
    """Change of the residual coordinates caused by replacing ``f[name][:, j]``.

    Returns ``(col, delta)``: ``col`` is a column index with ``delta`` of
    shape (n,), or None with ``delta`` of shape (n, r).  ``delta is None``
    means the coordinates do not move.
    """
    k = spec.kind
    if name in ("t",) or (name == "b" and k is Kind.IFA):
        return j, None
    if name == "beta":
        return j, new - f["beta"][:, j]
    if name == "mu":
        return spec.p, new - f["mu"]
    if k in (Kind.TE, Kind.TEOFF):
        s = f["s"]
        if name == "s":
            delta = (new - s)[:, None] * f["y"]
            if spec.has_offset:
                delta = np.hstack([delta, np.zeros((len(delta), 1))])
            return None, delta
        return j, s * (new - f["y"][:, j])
    s = f["s"][:, j] if "s" in f else 1.0
    b = f["b"][:, j] if "b" in f else 1.0
    y = f["y"][:, j]
    if name == "s":
        return j, (new - f["s"][:, j]) * b * y
    if name == "b":
        return j, s * (new - f["b"][:, j]) * y
    return j, s * b * (new - y)


def gibbs_sweep(spec: ModelSpec, theta: Parameters, x, state: ChainState, rng, n_sweeps: int = 1,
                callback=None) -> ChainState:
    """Advance every chain by ``n_sweeps`` systematic sweeps.

    ``x`` is either one observation shared by all chains (shape ``(d,)``) or
    one row per chain (shape ``(n, d)``).  ``callback(z)`` is invoked after
    each sweep with the current batched state (its arrays are reused, copy
    what you keep).
    """
    ptheta = proposal_parameters(theta)
    groups = coordinate_groups(spec)
    X = np.asarray(x, dtype=float)
    f = {k: np.array(v, copy=True) for k, v in state.z.items()}
    n = state.n_chains
    D = _residual_design(spec, theta)
    G = D.T @ D
    Gdiag = np.diag(G).copy()
    u = (X - theta.mean_offset - _coords(spec, HiddenState(**f)) @ D.T) @ D
    if u.ndim == 1:
        u = np.broadcast_to(u, (n, D.shape[1])).copy()
    inv2s = 0.5 / theta.sigma2
    accepted = state.accepted.copy()
    proposed = state.proposed.copy()
    view = HiddenState(**f)

    for _ in range(n_sweeps):
        for gi, (name, j) in enumerate(groups):
            new = propose_values(spec, ptheta, view, (name, j), rng)
            col, delta = _change(spec, f, name, j, new)
            proposed[gi] += n
            if delta is None:
                f[name][:, j] = new
                accepted[gi] += n
                continue
            logu = np.log(rng.random(n))
            if col is None:
                logr = (2.0 * np.einsum("ni,ni->n", delta, u) - np.einsum("ni,ij,nj->n", delta, G, delta)) * inv2s
                ok = logu < logr
                u -= (delta * ok[:, None]) @ G
            else:
                logr = (2.0 * delta * u[:, col] - delta * delta * Gdiag[col]) * inv2s
                ok = logu < logr
                u -= np.outer(np.where(ok, delta, 0.0), G[col])
            if j is None:
                f[name] = np.where(ok, new, f[name])
                view = HiddenState(**f)
            else:
                f[name][:, j] = np.where(ok, new, f[name][:, j])
            accepted[gi] += int(np.count_nonzero(ok))
        if callback is not None:
            callback(view)

    return ChainState(z=HiddenState(**f), sweeps=state.sweeps + n_sweeps, accepted=accepted, proposed=proposed)


def chain_mean_stats(spec: ModelSpec, theta: Parameters, x, state: ChainState, n_sweeps: int, burn_in: int, rng):
    """Per-chain averages of S(x, z) over the post-burn-in sweeps.

    Returns ``(stats, state)`` where every field of ``stats`` keeps the
    leading chain axis.
    """
    if n_sweeps <= burn_in:
        raise ValueError(f"n_sweeps ({n_sweeps}) must exceed burn_in ({burn_in})")
    if burn_in:
        state = gibbs_sweep(spec, theta, x, state, rng, n_sweeps=burn_in)
    total = [None]

    def keep(z):
        s = extract_stats(spec, x, z)
        total[0] = s if total[0] is None else total[0] + s

    state = gibbs_sweep(spec, theta, x, state, rng, n_sweeps=n_sweeps - burn_in, callback=keep)
    return total[0].scale(1.0 / (n_sweeps - burn_in)), state


def posterior_mean_stats(spec: ModelSpec, theta: Parameters, x, n_sweeps: int, burn_in: int, rng,
                         n_chains: int = 1, z0: Optional[HiddenState] = None) -> SuffStats:
    """Monte Carlo estimate of E[S(x, Z) | x] for a single observation ``x``.

    Runs ``n_chains`` independent chains (started from the prior unless
    ``z0`` is given) and averages their post-burn-in states.
    """
    x = np.asarray(x, dtype=float)
    if z0 is None:
        state = ChainState.from_prior(spec, theta, n_chains, rng)
    else:
        state = ChainState.start(spec, z0)
    per_chain, _ = chain_mean_stats(spec, theta, x, state, n_sweeps, burn_in, rng)
    return per_chain.scale(1.0 / state.n_chains)._map(None, lambda a, _: np.sum(a, axis=0))
