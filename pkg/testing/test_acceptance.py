"""
End-to-end checks of the hierarchy against the exact Fock-space reference.

These runs are slower than the unit tests; select them with ``-k acceptance``
or skip them with ``-k "not acceptance"``.
"""

import numpy as np
import pytest

from src.Evolution import ClosureSpec, ClosureVariant, IntegratorSpec, close, compile_model, integrate
from src.FockOracle import (
    FockBasis,
    coherent_density,
    evolve_density,
    fock_density,
    hierarchy_from_oracle,
    matrix_of,
    pure_density,
    reduced_density,
)
from src.HierarchyState import distance, init_coherent
from src.LadderAlgebra import normal_order
from src.Model import InteractionKernel, ModeGrid, ModelSpec, assemble_hamiltonian
from src.Observables import SpatialGrid, energy_density, number_density, total_number

TRUNCATE = ClosureVariant.TRUNCATE
CLUSTER = ClosureVariant.CLUSTER


def run(model, state, closure, dt=1e-3, t_final=1.0, sample_every=100):
    compiled = compile_model(model, closure.N)
    return integrate(state, compiled, closure, IntegratorSpec(dt=dt, t_final=t_final, sample_every=sample_every))


def assert_structure_preserved(trajectory):
    report = trajectory.report
    assert max(report.herm_residual) <= 1e-12
    assert max(report.sym_residual) <= 1e-12
    for sample in trajectory.samples:
        assert complex(sample.get_gamma(0, 0).data) == 1.0


def integrate_field(values, xs):
    return float(np.sum(values) * xs.cell_volume)


def quartic_model(grid, coupling):
    return ModelSpec(grid=grid, mass=1.0, kernel=InteractionKernel(value=1.0), coupling=coupling)


class TestAcceptanceNormalOrdering:
    def test_random_polynomials_on_interior_blocks(self, rng, random_polynomial):
        bases = {1: FockBasis(M=1, n_max=6), 2: FockBasis(M=2, n_max=6), 3: FockBasis(M=3, n_max=6)}
        for _ in range(200):
            M = int(rng.integers(1, 4))
            basis = bases[M]
            p = random_polynomial(M, 4)
            interior = np.array([max(s) <= basis.n_max - p.degree for s in basis.states])
            block = np.ix_(interior, interior)
            difference = matrix_of(p, basis)[block] - matrix_of(normal_order(p, M), basis)[block]
            assert np.max(np.abs(difference), initial=0.0) <= 1e-10


class TestAcceptanceFreeTheory:
    def test_phases_and_magnitudes(self):
        grid = ModeGrid(points_per_dim=4, p_max=2.0)
        model = ModelSpec(grid=grid, mass=1.0)
        alpha = np.array([0.3, -0.2j, 0.1 + 0.25j, 0.4])
        state = init_coherent(grid, alpha, 3)
        trajectory = run(model, state, ClosureSpec(TRUNCATE, 3))

        energies = model.energies()
        for sample in trajectory.samples:
            expected = np.exp(-1j * energies * sample.time) * alpha
            assert np.max(np.abs(sample.get_gamma(1, 0).data - expected)) <= 1e-8
            for m, n in sample.orders():
                drift = np.abs(sample.get_gamma(m, n).data) - np.abs(state.get_gamma(m, n).data)
                assert np.max(np.abs(drift)) <= 1e-8
        assert trajectory.times[-1] == pytest.approx(1.0)
        assert_structure_preserved(trajectory)

    def test_mean_field_closure_is_exact_for_coherent_data(self, line_grid):
        model = ModelSpec(grid=line_grid, mass=1.0)
        alpha = [0.4, 0.3j]
        closure = ClosureSpec(CLUSTER, 2)
        trajectory = run(model, init_coherent(line_grid, alpha, 2), closure, sample_every=1000)

        (rho,) = evolve_density(coherent_density(FockBasis(M=2, n_max=12), alpha), assemble_hamiltonian(model).total, [1.0])
        exact = hierarchy_from_oracle(rho, 2, line_grid)
        final = trajectory.final
        assert distance(final, exact, 2) <= 1e-8
        # Closed-out moments factorize on coherent data as well
        assert np.max(np.abs(close(final, 1, 1, closure).data - reduced_density(rho, 1, 1))) <= 1e-8
        assert_structure_preserved(trajectory)


class TestAcceptanceExactClosure:
    @pytest.mark.parametrize(
        "amplitudes",
        [
            {(1, 1): 1.0},
            {(1, 1): 1.0, (2, 0): 0.6j, (0, 2): -0.3},
        ],
        ids=["fock_pair", "two_particle_superposition"],
    )
    def test_two_particle_hierarchy_matches_oracle(self, line_grid, amplitudes):
        model = quartic_model(line_grid, 0.5)
        basis = FockBasis(M=2, n_max=4, total_cap=5)
        rho0 = pure_density(basis, amplitudes)
        state = hierarchy_from_oracle(rho0, 6, line_grid)
        trajectory = run(model, state, ClosureSpec(TRUNCATE, 6))

        densities = evolve_density(rho0, assemble_hamiltonian(model).total, trajectory.times)
        for sample, rho in zip(trajectory.samples, densities):
            assert distance(sample, hierarchy_from_oracle(rho, 6, line_grid), 5) <= 1e-6
        assert_structure_preserved(trajectory)


class TestAcceptanceClosureQuality:
    def test_higher_closures_track_the_oracle_better(self, line_grid, regression_baseline):
        model = quartic_model(line_grid, 0.1)
        alpha = [0.4, 0.3]
        (rho,) = evolve_density(coherent_density(FockBasis(M=2, n_max=10), alpha), assemble_hamiltonian(model).total, [1.0])

        finals = {}
        for variant, N in ((CLUSTER, 2), (CLUSTER, 3), (TRUNCATE, 3), (TRUNCATE, 5)):
            trajectory = run(model, init_coherent(line_grid, alpha, N), ClosureSpec(variant, N), sample_every=1000)
            assert_structure_preserved(trajectory)
            finals[(variant, N)] = trajectory.final
            # Error over every order the closure retains
            own = distance(trajectory.final, hierarchy_from_oracle(rho, N, line_grid), N)
            regression_baseline(f"closure_error_{variant.value}_{N}", own, rel=1e-6, abs_tol=1e-12)

        def error(variant, N, order_cap):
            return distance(finals[(variant, N)], hierarchy_from_oracle(rho, order_cap, line_grid), order_cap)

        assert error(CLUSTER, 3, 2) < error(CLUSTER, 2, 2)
        assert error(TRUNCATE, 5, 3) < error(TRUNCATE, 3, 3)


class TestAcceptanceSumRules:
    def test_number_sum_rule(self, rest_grid, random_density):
        basis = FockBasis(M=3, n_max=2)
        xs = SpatialGrid.dual_of(rest_grid)
        for _ in range(50):
            state = hierarchy_from_oracle(random_density(basis, 2), 3, rest_grid)
            assert integrate_field(number_density(state, xs), xs) == pytest.approx(total_number(state), abs=1e-9)

    def test_energy_sum_rule(self, rest_grid, random_density):
        model = ModelSpec(grid=rest_grid, mass=0.8)
        basis = FockBasis(M=3, n_max=2)
        xs = SpatialGrid.dual_of(rest_grid)
        energies = model.energies()
        for _ in range(50):
            state = hierarchy_from_oracle(random_density(basis, 2, conserve_number=True), 3, rest_grid)
            expected = float(np.real(np.sum(energies * np.diagonal(state.get_gamma(1, 1).data))))
            assert integrate_field(energy_density(state, model, xs), xs) == pytest.approx(expected, abs=1e-9)


class TestAcceptanceRestMass:
    def test_particle_at_rest_carries_its_mass(self, rest_grid):
        mass = 1.7
        model = ModelSpec(grid=rest_grid, mass=mass)
        state = hierarchy_from_oracle(fock_density(FockBasis(M=3, n_max=2), [0, 1, 0]), 3, rest_grid)
        xs = SpatialGrid.dual_of(rest_grid)

        values = energy_density(state, model, xs)
        assert values.dtype == np.float64
        assert integrate_field(values, xs) == pytest.approx(mass, abs=1e-8)

        # Stationary under free evolution
        trajectory = run(model, state, ClosureSpec(TRUNCATE, 3), dt=1e-2, t_final=3.0)
        assert integrate_field(energy_density(trajectory.final, model, xs), xs) == pytest.approx(mass, abs=1e-8)
        assert_structure_preserved(trajectory)
