"""
Tests for closures, the hierarchy right-hand side and RK4 integration.
"""

import numpy as np
import pytest

from src.HierarchyErrors import ClosureMisuseError, DivergenceError, InvalidInputError, ProgramMissingError
from src.HierarchyState import HierarchyState, distance, init_coherent, init_gaussian, init_vacuum
from src.LadderAlgebra import LadderPolynomial
from src.Evolution import (
    ClosureSpec,
    ClosureVariant,
    IntegratorSpec,
    close,
    compile_hierarchy,
    compile_model,
    energy_expectation,
    integrate,
    rhs,
    step,
)
from src.Model import InteractionKernel, KernelVariant, ModeGrid, ModelSpec, build_two_body_hamiltonian

TRUNCATE = ClosureVariant.TRUNCATE
CLUSTER = ClosureVariant.CLUSTER


@pytest.fixture
def single_mode():
    return ModeGrid(points_per_dim=1)


@pytest.fixture
def free_model(line_grid):
    return ModelSpec(grid=line_grid, mass=1.0)


@pytest.fixture
def quartic_kernel():
    return ((1.0, 0.4), (0.4, 2.0))


@pytest.fixture
def quartic_only(line_grid, quartic_kernel):
    """Two-body Hamiltonian with g = 1 and no free part."""
    model = ModelSpec(
        grid=line_grid,
        kernel=InteractionKernel(KernelVariant.TABULATED, table=quartic_kernel),
        coupling=1.0,
    )
    return build_two_body_hamiltonian(model)


class TestClosureSpec:
    def test_order_below_two_rejected(self):
        with pytest.raises(ClosureMisuseError):
            ClosureSpec(TRUNCATE, 1)

    def test_cluster_limited_to_low_orders(self):
        with pytest.raises(ClosureMisuseError):
            ClosureSpec(CLUSTER, 4)

    def test_label(self):
        assert str(ClosureSpec(TRUNCATE, 3)) == "truncate(N=3)"


class TestIntegratorSpec:
    def test_sample_steps_include_endpoints(self):
        spec = IntegratorSpec(dt=0.1, t_final=1.0, sample_every=3)
        assert spec.n_steps == 10
        assert spec.sample_steps() == [0, 3, 6, 9, 10]

    def test_invalid_step_rejected(self):
        with pytest.raises(InvalidInputError):
            IntegratorSpec(dt=0.0)

    def test_last_step_lands_on_final_time(self):
        spec = IntegratorSpec(dt=1e-3, t_final=1.0)
        assert spec.n_steps == 1000
        assert spec.sample_times()[-1] == pytest.approx(1.0)

    def test_partial_last_step_rejected(self):
        with pytest.raises(InvalidInputError):
            IntegratorSpec(dt=0.3, t_final=0.5)

    def test_unknown_method_rejected(self):
        with pytest.raises(InvalidInputError):
            IntegratorSpec(method="euler")


class TestClose:
    def test_truncate_gives_zero(self, line_grid):
        state = init_coherent(line_grid, [0.5, 0.2j], 3)
        closed = close(state, 2, 1, ClosureSpec(TRUNCATE, 3))
        assert closed.data.shape == (2, 2, 2)
        assert np.all(closed.data == 0)

    def test_cluster_two_reproduces_coherent_state(self, line_grid):
        alpha = [0.5, 0.2j]
        state = init_coherent(line_grid, alpha, 2)
        reference = init_coherent(line_grid, alpha, 5)
        for m, n in [(1, 1), (2, 0), (2, 1), (2, 2), (3, 1)]:
            closed = close(state, m, n, ClosureSpec(CLUSTER, 2))
            assert np.allclose(closed.data, reference.get_gamma(m, n).data)

    def test_cluster_three_on_gaussian_data(self, line_grid):
        occupations = [0.7, 1.5]
        state = init_gaussian(line_grid, occupations, 3)
        closed = close(state, 2, 2, ClosureSpec(CLUSTER, 3)).data
        for j in range(2):
            for k in range(2):
                expected = occupations[j] * occupations[k] + (occupations[j] ** 2 if j == k else 0.0)
                assert closed[j, k, j, k] == pytest.approx(expected)
        reference = init_gaussian(line_grid, occupations, 7)
        assert np.allclose(close(state, 3, 3, ClosureSpec(CLUSTER, 3)).data, reference.get_gamma(3, 3).data)

    def test_in_range_request_is_misuse(self, line_grid):
        with pytest.raises(ClosureMisuseError):
            close(init_vacuum(line_grid, 3), 1, 1, ClosureSpec(TRUNCATE, 3))


class TestRhs:
    def test_free_theory_phase(self, free_model):
        state = init_coherent(free_model.grid, [0.5, 0.2j], 3)
        compiled = compile_model(free_model, 3)
        derivative = rhs(state, compiled, ClosureSpec(TRUNCATE, 3))
        assert np.allclose(derivative[(1, 0)], -1j * free_model.energies() * np.array([0.5, 0.2j]))
        assert complex(derivative[(0, 0)]) == 0.0

    def test_quartic_truncated_at_three_is_static(self, line_grid, quartic_only):
        state = init_coherent(line_grid, [0.5, 0.2j], 3)
        compiled = compile_hierarchy(quartic_only, 3, 2)
        derivative = rhs(state, compiled, ClosureSpec(TRUNCATE, 3))
        assert np.allclose(derivative[(1, 0)], 0.0)

    def test_quartic_cluster_two_mean_field(self, line_grid, quartic_only, quartic_kernel):
        alpha = np.array([0.5 + 0.1j, 0.2j])
        state = init_coherent(line_grid, alpha, 2)
        compiled = compile_hierarchy(quartic_only, 2, 2)
        derivative = rhs(state, compiled, ClosureSpec(CLUSTER, 2))
        h = np.array(quartic_kernel)
        expected = -1j * (h @ np.abs(alpha) ** 2) * alpha
        assert np.allclose(derivative[(1, 0)], expected)

    def test_outputs_are_symmetric(self, line_grid, quartic_only, rng):
        state = HierarchyState(line_grid, 4)
        for m, n in state.orders():
            if m + n > 0:
                shape = (2,) * (m + n)
                state.set_gamma(m, n, rng.normal(size=shape) + 1j * rng.normal(size=shape))
        derivative = rhs(state, compile_hierarchy(quartic_only, 4, 2), ClosureSpec(TRUNCATE, 4))
        assert np.allclose(derivative[(2, 1)], np.transpose(derivative[(2, 1)], (1, 0, 2)))

    def test_closure_order_must_match_state(self, free_model):
        state = init_vacuum(free_model.grid, 3)
        with pytest.raises(ClosureMisuseError):
            rhs(state, compile_model(free_model, 3), ClosureSpec(TRUNCATE, 4))

    def test_programs_must_match_state(self, free_model):
        state = init_vacuum(free_model.grid, 4)
        with pytest.raises(ProgramMissingError):
            rhs(state, compile_model(free_model, 3), ClosureSpec(TRUNCATE, 4))

    def test_threaded_evaluation_matches_serial(self, line_grid, quartic_only, monkeypatch):
        state = init_coherent(line_grid, [0.5, 0.2j], 4)
        compiled = compile_hierarchy(quartic_only, 4, 2)
        closure = ClosureSpec(TRUNCATE, 4)
        serial = rhs(state, compiled, closure)
        monkeypatch.setenv("QBBGKY_THREADS", "3")
        threaded = rhs(state, compiled, closure)
        for order in serial:
            assert np.allclose(serial[order], threaded[order])


class TestStep:
    def test_single_mode_phase(self, single_mode):
        model = ModelSpec(grid=single_mode, mass=1.0)
        state = init_coherent(single_mode, [1.0], 2)
        result = step(state, compile_model(model, 2), ClosureSpec(TRUNCATE, 2), IntegratorSpec(dt=0.1))
        # RK4 local error for y' = -iy is dt^5/120
        assert abs(complex(result.get_gamma(1, 0).data[0]) - np.exp(-0.1j)) < 1e-7
        assert result.time == pytest.approx(0.1)

    def test_zero_hamiltonian_is_identity(self, line_grid):
        state = init_coherent(line_grid, [0.5, 0.2j], 3)
        compiled = compile_hierarchy(LadderPolynomial(), 3, 2)
        result = step(state, compiled, ClosureSpec(TRUNCATE, 3), IntegratorSpec(dt=0.5))
        assert distance(result, state, 3) < 1e-15

    def test_first_order_consistency(self, free_model):
        state = init_coherent(free_model.grid, [0.5, 0.2j], 3)
        compiled = compile_model(free_model, 3)
        closure = ClosureSpec(TRUNCATE, 3)
        derivative = rhs(state, compiled, closure)

        def defect(dt):
            result = step(state, compiled, closure, IntegratorSpec(dt=dt))
            return max(
                float(np.max(np.abs(result.get_gamma(m, n).data - state.get_gamma(m, n).data - dt * derivative[(m, n)])))
                for m, n in state.orders()
            )

        coarse, fine = defect(1e-2), defect(5e-3)
        assert coarse < 1e-3
        assert fine / coarse < 0.3


class TestIntegrate:
    def test_zero_duration(self, free_model):
        state = init_coherent(free_model.grid, [0.5, 0.2j], 3)
        trajectory = integrate(state, compile_model(free_model, 3), ClosureSpec(TRUNCATE, 3), IntegratorSpec(t_final=0.0))
        assert len(trajectory.samples) == 1
        assert distance(trajectory.final, state, 3) == 0.0
        assert len(trajectory.report.times) == 1

    def test_free_theory_conserves_number(self, free_model):
        state = init_coherent(free_model.grid, [0.5, 0.2j], 3)
        compiled = compile_model(free_model, 3)
        trajectory = integrate(
            state, compiled, ClosureSpec(TRUNCATE, 3), IntegratorSpec(dt=1e-2, t_final=10.0, sample_every=100)
        )
        assert trajectory.times == pytest.approx([float(t) for t in range(11)])
        assert trajectory.report.number_drift() <= 1e-10
        # Free flow only rotates phases
        for sample in trajectory.samples:
            assert np.allclose(np.abs(sample.get_gamma(2, 0).data), np.abs(state.get_gamma(2, 0).data))

    def test_report_records_every_sample(self, free_model):
        state = init_coherent(free_model.grid, [0.5, 0.2j], 3)
        compiled = compile_model(free_model, 3)
        trajectory = integrate(state, compiled, ClosureSpec(TRUNCATE, 3), IntegratorSpec(dt=0.1, t_final=1.0, sample_every=2))
        report = trajectory.report
        assert len(report.rows()) == len(trajectory.samples) == 6
        assert all(value == pytest.approx(1.0) for value in report.trace)
        assert max(report.herm_residual) <= 1e-12
        assert max(report.sym_residual) <= 1e-12
        assert report.energy[0] == pytest.approx(energy_expectation(state, compiled))

    def test_divergence_reports_partial_trajectory(self, free_model):
        state = init_coherent(free_model.grid, [0.5, 0.2j], 3)
        compiled = compile_model(free_model, 3)
        spec = IntegratorSpec(dt=10.0, t_final=3000.0, sample_every=1000)
        with pytest.raises(DivergenceError) as info:
            integrate(state, compiled, ClosureSpec(TRUNCATE, 3), spec)
        assert info.value.order in state.orders()
        assert len(info.value.trajectory) >= 1
        assert info.value.time > 0
