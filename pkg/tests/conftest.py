import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from probica import Kind, ModelSpec, Parameters  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running statistical or end-to-end check")


def make_theta(spec, rng, sigma2=0.5):
    """A random valid parameter set for ``spec``."""
    kw = {}
    if spec.estimate_mu0:
        kw["mu0"] = rng.normal(size=spec.d)
    if spec.kind in (Kind.BG, Kind.EBG):
        kw["alpha"] = float(rng.uniform(0.2, 0.8))
    if spec.kind in (Kind.ET, Kind.TE, Kind.TEOFF):
        kw["gamma"] = float(rng.uniform(0.1, 0.4))
    if spec.shifted:
        kw["mu_shift"] = float(rng.uniform(0.5, 2.0))
    if spec.kind is Kind.IFA:
        w = rng.uniform(0.5, 1.5, spec.K + 1)
        kw["weights"] = w / w.sum()
        kw["means"] = np.sort(rng.uniform(0.5, 2.5, spec.K))
    return Parameters(A=rng.normal(size=(spec.d, spec.p)), sigma2=sigma2, **kw)


ALL_SPECS = [
    ModelSpec(Kind.LOG, 2, 4),
    ModelSpec(Kind.LAP, 2, 4),
    ModelSpec(Kind.EG, 2, 4),
    ModelSpec(Kind.EG, 2, 4, shifted=True),
    ModelSpec(Kind.IFA, 2, 4, K=2),
    ModelSpec(Kind.BG, 3, 4),
    ModelSpec(Kind.BG, 3, 4, shifted=True),
    ModelSpec(Kind.EBG, 2, 4),
    ModelSpec(Kind.EBG, 2, 4, shifted=True),
    ModelSpec(Kind.ET, 3, 4),
    ModelSpec(Kind.TE, 3, 4),
    ModelSpec(Kind.TEOFF, 3, 4),
]


def spec_id(spec):
    return spec.kind.value + ("-shifted" if spec.shifted else "")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
