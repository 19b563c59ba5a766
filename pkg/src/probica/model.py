"""Shared domain types: model specification, parameters, hidden states and
sufficient statistics.

Notation follows the observation model ``x = mu0 + A @ beta + sigma * eps``
with ``A`` of shape ``(d, p)``.  Arrays describing hidden variables may carry
leading batch axes (one row per observation); every helper here works on the
trailing axes so the same code serves a single observation and a whole
dataset.
"""
from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

ALPHA_FLOOR = 1e-3
GAMMA_FLOOR = 1e-3
WEIGHT_FLOOR = 1e-3
SIGMA2_FLOOR = 1e-10


class ModelError(ValueError):
    """Raised when a specification, parameter set or state is inconsistent."""


class Kind(str, enum.Enum):
    LOG = "log"
    LAP = "lap"
    EG = "eg"
    IFA = "ifa"
    BG = "bg"
    EBG = "ebg"
    ET = "et"
    TE = "te"
    TEOFF = "teoff"

    @classmethod
    def parse(cls, value) -> "Kind":
        if isinstance(value, Kind):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise ModelError(f"unknown model '{value}' (expected one of {names})") from None


# Models whose components carry a Gaussian coordinate y that a shift can act on.
SHIFTABLE = {Kind.EG, Kind.BG, Kind.EBG}
CENSORED = {Kind.BG, Kind.EBG}
TERNARY = {Kind.ET, Kind.TE, Kind.TEOFF}
SCALED = {Kind.EG, Kind.EBG, Kind.ET, Kind.TE, Kind.TEOFF}


@dataclass(frozen=True)
class ModelSpec:
    kind: Kind
    p: int
    d: int
    shifted: bool = False
    K: Optional[int] = None
    estimate_mu0: Optional[bool] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind.parse(self.kind))
        if self.estimate_mu0 is None:
            default = self.kind is not Kind.TEOFF and not self.shifted
            object.__setattr__(self, "estimate_mu0", default)
        if self.kind is Kind.IFA and self.K is None:
            object.__setattr__(self, "K", 1)
        if self.p < 1 or self.d < 1:
            raise ModelError(f"dimensions must be positive (p={self.p}, d={self.d})")
        if self.kind is Kind.TEOFF and self.estimate_mu0:
            raise ModelError("teoff treats the offset as hidden; estimate_mu0 must be false")
        if (self.K is not None) != (self.kind is Kind.IFA):
            raise ModelError("mixture size K is given iff the model is ifa")
        if self.K is not None and self.K < 1:
            raise ModelError(f"K must be >= 1, got {self.K}")
        if self.shifted and self.kind not in SHIFTABLE:
            raise ModelError(f"shifted variant not available for model {self.kind.value}")
        if self.shifted and self.estimate_mu0:
            raise ModelError("shifted models use mu0 = 0; estimate_mu0 must be false")

    @property
    def has_offset(self) -> bool:
        return self.kind is Kind.TEOFF

    @property
    def n_design(self) -> int:
        """Length of the design vector ``[1?, beta, offset?]`` used by the statistics."""
        return self.p + int(self.estimate_mu0) + int(self.has_offset)

    def with_p(self, p: int) -> "ModelSpec":
        return dataclasses.replace(self, p=p)


@dataclass(frozen=True)
class Parameters:
    A: np.ndarray
    sigma2: float
    mu0: Optional[np.ndarray] = None
    alpha: Optional[float] = None
    gamma: Optional[float] = None
    mu_shift: Optional[float] = None
    weights: Optional[np.ndarray] = None
    means: Optional[np.ndarray] = None

    def replace(self, **changes) -> "Parameters":
        return dataclasses.replace(self, **changes)

    @property
    def mean_offset(self) -> np.ndarray:
        """mu0 when present, otherwise zeros."""
        if self.mu0 is None:
            return np.zeros(self.A.shape[0])
        return self.mu0

    def signed_means(self) -> np.ndarray:
        """Means ``[0, m_1, ..., m_K]`` indexed by mixture label."""
        return np.concatenate([[0.0], np.asarray(self.means, dtype=float)])


def _in_open(value, lo, hi):
    return value is not None and np.isfinite(value) and lo < value < hi


def validate(spec: ModelSpec, theta: Parameters) -> None:
    """Check that ``theta`` carries exactly the fields ``spec`` demands, in domain.

    Raises
    ------
    ModelError
        On a dimension mismatch or a parameter outside its open domain.
    """
    A = np.asarray(theta.A)
    if A.shape != (spec.d, spec.p):
        raise ModelError(f"A has shape {A.shape}, expected {(spec.d, spec.p)}")
    if not np.all(np.isfinite(A)):
        raise ModelError("A has non-finite entries")
    if not (np.isfinite(theta.sigma2) and theta.sigma2 > 0):
        raise ModelError(f"sigma2 must be positive, got {theta.sigma2}")

    if spec.estimate_mu0:
        if theta.mu0 is None or np.shape(theta.mu0) != (spec.d,):
            raise ModelError(f"mu0 must be a vector of length {spec.d}")
        if not np.all(np.isfinite(theta.mu0)):
            raise ModelError("mu0 has non-finite entries")
    elif theta.mu0 is not None:
        raise ModelError("mu0 given but the model does not estimate it")

    if spec.kind in CENSORED:
        if not _in_open(theta.alpha, 0.0, 1.0):
            raise ModelError(f"alpha out of open interval (0, 1): {theta.alpha}")
    elif theta.alpha is not None:
        raise ModelError(f"alpha is not a parameter of model {spec.kind.value}")

    if spec.kind in TERNARY:
        if not _in_open(theta.gamma, 0.0, 0.5):
            raise ModelError(f"gamma out of open interval (0, 1/2): {theta.gamma}")
    elif theta.gamma is not None:
        raise ModelError(f"gamma is not a parameter of model {spec.kind.value}")

    if spec.shifted:
        if theta.mu_shift is None or not np.isfinite(theta.mu_shift):
            raise ModelError("shifted model requires a finite mu_shift")
    elif theta.mu_shift is not None:
        raise ModelError("mu_shift given for an unshifted model")

    if spec.kind is Kind.IFA:
        w = theta.weights
        m = theta.means
        if w is None or np.shape(w) != (spec.K + 1,):
            raise ModelError(f"weights must have length K+1={spec.K + 1}")
        if m is None or np.shape(m) != (spec.K,):
            raise ModelError(f"means must have length K={spec.K}")
        w = np.asarray(w, dtype=float)
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ModelError("mixture weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ModelError(f"mixture weights sum to {w.sum()!r}, not 1")
        if not np.all(np.isfinite(m)):
            raise ModelError("mixture means must be finite")
    elif theta.weights is not None or theta.means is not None:
        raise ModelError("mixture weights/means given for a non-ifa model")


@dataclass(frozen=True)
class HiddenState:
    """Latent variables of one observation (trailing axes) or a batch.

    Which fields are set depends on the model:

    ===========  ====================================================
    log, lap     beta
    eg           s, y
    ifa          beta, b (signs +-1), t (labels 0..K)
    bg           b (0/1), y
    ebg          s, b, y
    et           s, y (values -1, 0, 1)
    te           s (one per observation), y
    teoff        s, y, mu (offset, one per observation)
    ===========  ====================================================

    For shifted variants ``y`` already includes the shift, i.e. ``y ~ N(mu, 1)``.
    """

    beta: Optional[np.ndarray] = None
    s: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    t: Optional[np.ndarray] = None
    mu: Optional[np.ndarray] = None

    def items(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is not None:
                yield f.name, v

    def copy(self) -> "HiddenState":
        return HiddenState(**{k: np.array(v, copy=True) for k, v in self.items()})

    def replace(self, **changes) -> "HiddenState":
        return dataclasses.replace(self, **changes)

    def row(self, k: int) -> "HiddenState":
        """Single-observation view of a batched state."""
        return HiddenState(**{name: np.asarray(v)[k] for name, v in self.items()})

    @staticmethod
    def stack(states) -> "HiddenState":
        states = list(states)
        names = [name for name, _ in states[0].items()]
        return HiddenState(**{n: np.stack([getattr(z, n) for z in states]) for n in names})


_FIELDS = {
    Kind.LOG: ("beta",),
    Kind.LAP: ("beta",),
    Kind.EG: ("s", "y"),
    Kind.IFA: ("beta", "b", "t"),
    Kind.BG: ("b", "y"),
    Kind.EBG: ("s", "b", "y"),
    Kind.ET: ("s", "y"),
    Kind.TE: ("s", "y"),
    Kind.TEOFF: ("s", "y", "mu"),
}


def state_fields(spec: ModelSpec):
    return _FIELDS[spec.kind]


def check_state(spec: ModelSpec, z: HiddenState) -> None:
    present = {name for name, _ in z.items()}
    expected = set(_FIELDS[spec.kind])
    if present != expected:
        raise ModelError(
            f"state fields {sorted(present)} do not match model {spec.kind.value} "
            f"(expected {sorted(expected)})"
        )


def beta_of(spec: ModelSpec, z: HiddenState) -> np.ndarray:
    """Component coefficients implied by a hidden state, shape ``(..., p)``."""
    check_state(spec, z)
    k = spec.kind
    if k in (Kind.LOG, Kind.LAP, Kind.IFA):
        return np.asarray(z.beta, dtype=float)
    if k is Kind.EG or k is Kind.ET:
        return z.s * z.y
    if k is Kind.BG:
        return z.b * z.y
    if k is Kind.EBG:
        return z.s * z.b * z.y
    # te / teoff: one scale per observation
    return np.asarray(z.s)[..., None] * z.y


def design_of(spec: ModelSpec, z: HiddenState) -> np.ndarray:
    """Design vector ``[1 (if mu0 estimated), beta, offset (teoff)]``."""
    beta = beta_of(spec, z)
    parts = []
    if spec.estimate_mu0:
        parts.append(np.ones(beta.shape[:-1] + (1,)))
    parts.append(beta)
    if spec.has_offset:
        parts.append(np.asarray(z.mu, dtype=float)[..., None])
    return np.concatenate(parts, axis=-1) if len(parts) > 1 else beta


@dataclass(frozen=True)
class SuffStats:
    """Exponential-family sufficient statistics, single or averaged.

    ``bbT`` and ``xbT`` are taken over the design vector (see :func:`design_of`),
    so they are ``(q, q)`` and ``(d, q)`` with ``q = spec.n_design``.  With
    ``estimate_mu0`` the first design coordinate is the constant 1; for teoff
    the last one is the hidden offset.
    """

    bbT: np.ndarray
    xbT: np.ndarray
    x2: float
    nu: Optional[float] = None
    zeta: Optional[float] = None
    y_sum: Optional[float] = None
    s0: Optional[np.ndarray] = None
    s1: Optional[np.ndarray] = None

    def _map(self, other, fn) -> "SuffStats":
        out = {}
        for f in dataclasses.fields(self):
            a = getattr(self, f.name)
            if a is None:
                out[f.name] = None
                continue
            b = None if other is None else getattr(other, f.name)
            out[f.name] = fn(a, b)
        return SuffStats(**out)

    def __add__(self, other: "SuffStats") -> "SuffStats":
        return self._map(other, lambda a, b: a + b)

    def __sub__(self, other: "SuffStats") -> "SuffStats":
        return self._map(other, lambda a, b: a - b)

    def scale(self, c: float) -> "SuffStats":
        return self._map(None, lambda a, _: a * c)

    def towards(self, other: "SuffStats", step: float) -> "SuffStats":
        """``self + step * (other - self)``, the stochastic-approximation update."""
        return self._map(other, lambda a, b: a + step * (b - a))

    def flat(self) -> np.ndarray:
        parts = [np.ravel(v) for v in (getattr(self, f.name) for f in dataclasses.fields(self)) if v is not None]
        return np.concatenate(parts)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat())))


@dataclass(frozen=True)
class Dataset:
    observations: np.ndarray
    ids: Optional[tuple] = field(default=None)

    def __post_init__(self):
        X = np.array(self.observations, dtype=float)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise ModelError(f"observations must be a non-empty 2-d array, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            bad = np.argwhere(~np.isfinite(X))[0]
            raise ModelError(f"non-finite value at row {bad[0]}, column {bad[1]}")
        X.setflags(write=False)
        object.__setattr__(self, "observations", X)
        if self.ids is not None and len(self.ids) != X.shape[0]:
            raise ModelError("ids length does not match number of observations")

    @property
    def n(self) -> int:
        return self.observations.shape[0]

    @property
    def d(self) -> int:
        return self.observations.shape[1]
