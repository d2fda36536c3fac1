"""
Shared fixtures for the hierarchy test suite.
"""

import json
import sys
from pathlib import Path

# Add project root to Python path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

import numpy as np
import pytest

from src.FockOracle import FockBasis, FockDensityMatrix
from src.LadderAlgebra import LadderOp, LadderPolynomial, OpKind
from src.Model import ModeGrid


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def line_grid():
    """Two modes at p = ±0.5."""
    return ModeGrid(dims=1, points_per_dim=2, p_max=1.0)


@pytest.fixture
def rest_grid():
    """Three modes at p = -1, 0, 1; the middle one is at rest."""
    return ModeGrid(dims=1, points_per_dim=3, p_max=1.5)


@pytest.fixture
def random_polynomial(rng):
    """Factory for random (not necessarily normal-ordered) polynomials."""

    def build(n_modes: int, max_degree: int, n_terms: int = 4) -> LadderPolynomial:
        terms = []
        for _ in range(n_terms):
            degree = int(rng.integers(0, max_degree + 1))
            word = tuple(
                LadderOp(OpKind(int(rng.integers(0, 2))), int(rng.integers(0, n_modes)))
                for _ in range(degree)
            )
            terms.append((word, complex(rng.normal(), rng.normal())))
        return LadderPolynomial(terms)

    return build


@pytest.fixture
def random_density(rng):
    """
    Factory for random mixed states supported on at most ``max_particles`` particles.

    With ``conserve_number`` the coherences between different particle numbers are
    removed, so every Γ^(m,n) with m != n vanishes.
    """

    def build(basis: FockBasis, max_particles: int, conserve_number: bool = False) -> FockDensityMatrix:
        totals = np.array([sum(state) for state in basis.states])
        support = totals <= max_particles
        A = rng.normal(size=(basis.dim, basis.dim)) + 1j * rng.normal(size=(basis.dim, basis.dim))
        A[~support, :] = 0.0
        rho = A @ A.conj().T
        if conserve_number:
            rho = rho * (totals[:, None] == totals[None, :])
        rho = 0.5 * (rho + rho.conj().T)
        return FockDensityMatrix(basis, rho / np.trace(rho).real)

    return build


BASELINE_DIR = Path(__file__).parent / "baselines"


def pytest_addoption(parser):
    parser.addoption(
        "--record-baselines",
        action="store_true",
        default=False,
        help="Overwrite the stored regression baselines with the values measured in this run",
    )


@pytest.fixture
def regression_baseline(request):
    """
    Compare a measured value against ``baselines/<name>.json``.

    A missing baseline (or ``--record-baselines``) stores the measured value instead;
    from then on the stored value is frozen and every run is checked against it.
    """
    record = request.config.getoption("--record-baselines", default=False)

    def check(name: str, value: float, rel: float = 1e-6, abs_tol: float = 0.0) -> float:
        path = BASELINE_DIR / f"{name}.json"
        if record or not path.exists():
            BASELINE_DIR.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps({"name": name, "value": value, "test": request.node.nodeid}, indent=2))
            return value
        stored = json.loads(path.read_text())["value"]
        assert value == pytest.approx(stored, rel=rel, abs=abs_tol), f"{name} moved from its baseline {stored}"
        return stored

    return check
