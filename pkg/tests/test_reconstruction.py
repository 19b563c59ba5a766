import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import ALL_SPECS, make_theta, spec_id
from probica import HiddenState, Kind, ModelError, ModelSpec, Parameters, ReconOptions, reconstruct
from probica.model import beta_of
from probica.reconstruction import lasso_kkt_residual, objective


def independent_objective(spec, theta, x, z):
    """Penalised residual written out directly from the model densities."""
    beta = beta_of(spec, z)
    r = x - theta.mean_offset - theta.A @ beta
    if spec.kind is Kind.TEOFF:
        r = r - float(z.mu)
    val = r @ r / (2 * theta.sigma2)
    k = spec.kind
    if k is Kind.LOG:
        return val + np.sum(2 * np.log(np.exp(beta) + np.exp(-beta)))
    if k is Kind.LAP:
        return val + np.sum(np.abs(beta))
    if k is Kind.IFA:
        m = np.concatenate([[0.0], theta.means])
        return val + np.sum(0.5 * (beta - z.b * m[z.t]) ** 2 - np.log(theta.weights[z.t]))
    shift = theta.mu_shift if spec.shifted else 0.0
    if z.s is not None:
        val += np.sum(z.s)
    if k in (Kind.BG, Kind.EBG):
        val += np.log((1 - theta.alpha) / theta.alpha) * np.sum(z.b)
    if k in (Kind.EG, Kind.BG, Kind.EBG):
        val += 0.5 * np.sum((z.y - shift) ** 2)
    if k in (Kind.ET, Kind.TE, Kind.TEOFF):
        val += np.log((1 - 2 * theta.gamma) / theta.gamma) * np.sum(np.abs(z.y))
    return float(val)


@pytest.mark.parametrize("spec", ALL_SPECS, ids=spec_id)
def test_objective_matches_independent_formula(spec):
    rng = np.random.default_rng(0)
    theta = make_theta(spec, rng)
    for _ in range(3):
        x = rng.normal(size=spec.d)
        res = reconstruct(spec, theta, x)
        assert res.objective == pytest.approx(independent_objective(spec, theta, x, res.z), rel=1e-12, abs=1e-12)
        assert objective(spec, theta, x, res.z) == res.objective


@pytest.mark.parametrize("kind", [Kind.LOG, Kind.LAP])
def test_symmetric_models_at_mean(kind):
    spec = ModelSpec(kind, 3, 5)
    theta = make_theta(spec, np.random.default_rng(1))
    res = reconstruct(spec, theta, theta.mu0)
    np.testing.assert_allclose(res.beta, 0.0, atol=1e-12)


def test_lasso_soft_threshold_orthonormal():
    Q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(4, 2)))
    spec = ModelSpec(Kind.LAP, 2, 4, estimate_mu0=False)
    theta = Parameters(A=Q, sigma2=0.25)
    x = Q[:, 0] * 1.0 + Q[:, 1] * 0.1  # a1'x = 1, a2'x = 0.1 < sigma2
    res = reconstruct(spec, theta, x)
    assert res.beta[0] == pytest.approx(0.75, abs=1e-10)
    assert res.beta[1] == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_lasso_subgradient_conditions(seed):
    rng = np.random.default_rng(seed)
    spec = ModelSpec(Kind.LAP, 4, 6)
    theta = make_theta(spec, rng, sigma2=0.4)
    x = theta.mu0 + rng.normal(size=6) * 2
    beta = reconstruct(spec, theta, x).beta
    corr = theta.A.T @ (x - theta.mu0 - theta.A @ beta) / theta.sigma2
    assert np.all(np.abs(corr) <= 1 + 1e-8)
    nz = beta != 0
    np.testing.assert_allclose(corr[nz], np.sign(beta[nz]), atol=1e-8)
    G = theta.A.T @ theta.A / theta.sigma2
    c = theta.A.T @ (x - theta.mu0) / theta.sigma2
    assert lasso_kkt_residual(G, c, beta) <= 1e-8


@pytest.mark.parametrize("seed", range(5))
def test_log_gradient_vanishes(seed):
    rng = np.random.default_rng(seed)
    spec = ModelSpec(Kind.LOG, 3, 5)
    theta = make_theta(spec, rng, sigma2=0.1)
    x = theta.mu0 + rng.normal(size=5) * 3
    beta = reconstruct(spec, theta, x).beta
    g = -theta.A.T @ (x - theta.mu0 - theta.A @ beta) / theta.sigma2 + 2 * np.tanh(beta)
    assert np.abs(g).max() <= 1e-8


def test_lap_sparser_than_log():
    rng = np.random.default_rng(4)
    for _ in range(10):
        A = rng.normal(size=(6, 4))
        x = rng.normal(size=6)
        zeros = []
        for kind in (Kind.LAP, Kind.LOG):
            spec = ModelSpec(kind, 4, 6, estimate_mu0=False)
            zeros.append(np.sum(reconstruct(spec, Parameters(A=A, sigma2=0.5), x).beta == 0))
        assert zeros[0] >= zeros[1]
        assert zeros[1] == 0


@pytest.mark.parametrize("seed", range(10))
def test_bg_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    for shifted in (False, True):
        spec = ModelSpec(Kind.BG, 2, 4, shifted=shifted)
        theta = make_theta(spec, rng)
        x = theta.mean_offset + rng.normal(size=4) * 2
        res = reconstruct(spec, theta, x)
        f, b, y = oracles.bg_map(theta.A, theta.sigma2, theta.alpha, x - theta.mean_offset,
                                 shift=theta.mu_shift if shifted else 0.0)
        np.testing.assert_array_equal(res.z.b, b)
        assert res.objective == pytest.approx(f, rel=1e-10)


@pytest.mark.parametrize("seed", range(6))
def test_et_matches_brute_force(seed):
    rng = np.random.default_rng(100 + seed)
    spec = ModelSpec(Kind.ET, 3, 5)
    theta = make_theta(spec, rng)
    x = theta.mu0 + rng.normal(size=5) * 3
    res = reconstruct(spec, theta, x)
    f, y, s = oracles.et_map(theta.A, theta.sigma2, theta.gamma, x - theta.mu0)
    np.testing.assert_array_equal(res.z.y, y)
    assert res.objective == pytest.approx(f, rel=1e-7)


def test_ifa_matches_brute_force():
    rng = np.random.default_rng(3)
    spec = ModelSpec(Kind.IFA, 2, 4, K=2)
    theta = make_theta(spec, rng)
    m = np.concatenate([[0.0], theta.means])
    for _ in range(5):
        x = theta.mu0 + rng.normal(size=4) * 3
        best = None
        for t in itertools.product(range(3), repeat=2):
            for b in itertools.product([-1.0, 1.0], repeat=2):
                t_, b_ = np.array(t), np.array(b)
                s = np.sqrt(theta.sigma2)
                lhs = np.vstack([theta.A / s, np.eye(2)])
                rhs = np.concatenate([(x - theta.mu0) / s, b_ * m[t_]])
                beta = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
                z = HiddenState(beta=beta, b=b_, t=t_)
                f = independent_objective(spec, theta, x, z)
                if best is None or f < best[0]:
                    best = (f, beta)
        res = reconstruct(spec, theta, x)
        assert res.objective == pytest.approx(best[0], rel=1e-10)
        np.testing.assert_allclose(res.beta, best[1], atol=1e-8)


def test_te_zero_scale_zeroes_signs():
    spec = ModelSpec(Kind.TE, 3, 4, estimate_mu0=False)
    theta = Parameters(A=np.eye(4)[:, :3], sigma2=1.0, gamma=0.2)
    res = reconstruct(spec, theta, np.zeros(4))
    assert float(res.z.s) == 0.0
    np.testing.assert_array_equal(res.z.y, 0.0)


def test_te_scale_is_closed_form():
    rng = np.random.default_rng(2)
    spec = ModelSpec(Kind.TE, 3, 5)
    theta = make_theta(spec, rng, sigma2=0.2)
    x = theta.mu0 + theta.A @ np.array([2.0, -2.0, 0.0])
    res = reconstruct(spec, theta, x)
    v = theta.A @ res.z.y
    s = max(0.0, (v @ (x - theta.mu0) / theta.sigma2 - 1.0) / (v @ v / theta.sigma2))
    assert float(res.z.s) == pytest.approx(s, rel=1e-10)


def test_teoff_offset_is_closed_form_and_descent_monotone():
    rng = np.random.default_rng(5)
    spec = ModelSpec(Kind.TEOFF, 3, 6)
    theta = make_theta(spec, rng)
    x = theta.A @ np.array([1.5, 0.0, -1.5]) + 0.7
    res = reconstruct(spec, theta, x)
    assert float(res.z.mu) == pytest.approx(np.mean(x - float(res.z.s) * theta.A @ res.z.y), abs=1e-12)
    assert all(a >= b - 1e-12 for a, b in zip(res.history, res.history[1:]))


@pytest.mark.parametrize("shifted", [False, True])
def test_eg_alternation_monotone(shifted):
    rng = np.random.default_rng(6)
    spec = ModelSpec(Kind.EG, 3, 6, shifted=shifted)
    theta = make_theta(spec, rng)
    x = theta.mean_offset + rng.normal(size=6) * 3
    res = reconstruct(spec, theta, x)
    assert all(a >= b - 1e-12 for a, b in zip(res.history, res.history[1:]))
    assert np.all(res.z.s >= 0)


def test_ebg_not_worse_than_all_off():
    rng = np.random.default_rng(7)
    spec = ModelSpec(Kind.EBG, 3, 6)
    theta = make_theta(spec, rng)
    x = theta.mu0 + rng.normal(size=6) * 3
    res = reconstruct(spec, theta, x)
    off = HiddenState(s=np.zeros(3), b=np.zeros(3), y=np.zeros(3))
    assert res.objective <= objective(spec, theta, x, off) + 1e-12


def test_budget_exceeded_without_local_search():
    spec = ModelSpec(Kind.BG, 4, 6)
    theta = make_theta(spec, np.random.default_rng(0))
    with pytest.raises(ModelError, match="budget"):
        reconstruct(spec, theta, np.zeros(6), ReconOptions(binary_budget=2, local_search=False))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_local_search_never_beats_exhaustive(seed):
    rng = np.random.default_rng(seed)
    spec = ModelSpec(Kind.BG, 5, 8)
    theta = make_theta(spec, rng)
    x = theta.mu0 + rng.normal(size=8) * 2
    full = reconstruct(spec, theta, x)
    local = reconstruct(spec, theta, x, ReconOptions(binary_budget=2))
    assert not local.exhaustive and full.exhaustive
    assert local.objective >= full.objective - 1e-9


def test_wrong_observation_length():
    spec = ModelSpec(Kind.LOG, 2, 4)
    with pytest.raises(ModelError, match="shape"):
        reconstruct(spec, make_theta(spec, np.random.default_rng(0)), np.zeros(3))
