"""
Evolution - Closed hierarchy equations and their time integration.

Compiled contraction programs are evaluated against the stored Γ tensors;
sources above the retained orders are supplied by a closure (truncation or
cluster expansion). Time stepping is classical fixed-step RK4 with the
hierarchy invariants restored after every stage.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from src.ConfigLoader import config
from src.HierarchyErrors import (
    ClosureMisuseError,
    DivergenceError,
    InvalidInputError,
    ProgramMissingError,
)
from src.HierarchyState import (
    Cumulants,
    GammaTensor,
    HierarchyState,
    cumulant_expansion,
    hermiticity_residual,
    stored_orders,
    symmetrize,
    symmetry_residual,
)
from src.LadderAlgebra import (
    ContractionProgram,
    LadderPolynomial,
    coefficient_tensors,
    compile_rhs,
    normal_order,
    parse_kernel_id,
)
from src.Model import ModelSpec, assemble_hamiltonian

logger = logging.getLogger(__name__)

Order = Tuple[int, int]
Derivative = Dict[Order, np.ndarray]


class ClosureVariant(Enum):
    TRUNCATE = "truncate"
    CLUSTER = "cluster"


# Cluster reconstruction is available when first (N=2) or first and second (N=3) cumulants are retained
CLUSTER_ORDERS = (2, 3)

# t_final / dt may differ from an integer by this relative amount (floating-point noise)
STEP_RATIO_TOLERANCE = 1e-9


@dataclass(frozen=True)
class ClosureSpec:
    """
    Rule supplying Γ^(m,n) for m + n >= N.

    Attributes:
        variant: TRUNCATE replaces every closed source by zero; CLUSTER rebuilds it
            from the retained cumulants with all higher cumulants set to zero.
        N: Closure order; the hierarchy stores exactly the orders m + n <= N - 1.
    """

    variant: ClosureVariant
    N: int

    def __post_init__(self) -> None:
        if self.N < 2:
            raise ClosureMisuseError(f"Closure order must be at least 2, got {self.N}")
        if self.variant == ClosureVariant.CLUSTER and self.N not in CLUSTER_ORDERS:
            raise ClosureMisuseError(f"Cluster closure is available for N in {CLUSTER_ORDERS}, got {self.N}")

    def __str__(self) -> str:
        return f"{self.variant.value}(N={self.N})"


@dataclass(frozen=True)
class IntegratorSpec:
    method: str = "rk4"
    dt: float = 1e-3
    t_final: float = 1.0
    sample_every: int = 100

    def __post_init__(self) -> None:
        if self.method != "rk4":
            raise InvalidInputError(f"Unknown integrator '{self.method}'; only 'rk4' is available")
        if not self.dt > 0:
            raise InvalidInputError(f"dt must be positive, got {self.dt}")
        if self.t_final < 0:
            raise InvalidInputError(f"t_final must be non-negative, got {self.t_final}")
        if self.sample_every < 1:
            raise InvalidInputError(f"sample_every must be at least 1, got {self.sample_every}")
        ratio = self.t_final / self.dt
        if abs(ratio - round(ratio)) > STEP_RATIO_TOLERANCE * max(1.0, ratio):
            raise InvalidInputError(
                f"t_final={self.t_final} is not a whole number of steps of dt={self.dt} ({ratio:.6g} steps)"
            )

    @property
    def n_steps(self) -> int:
        """Number of fixed steps; the last one lands on t_final."""
        return int(round(self.t_final / self.dt))

    def sample_steps(self) -> List[int]:
        """Step indices at which the trajectory is recorded (always includes 0 and the last step)."""
        steps = list(range(0, self.n_steps + 1, self.sample_every))
        if steps[-1] != self.n_steps:
            steps.append(self.n_steps)
        return steps

    def sample_times(self) -> List[float]:
        return [step * self.dt for step in self.sample_steps()]


@dataclass(frozen=True)
class CompiledHierarchy:
    """
    Contraction programs for every stored target order, bound to the numeric
    coefficient tensors of one Hamiltonian.

    Attributes:
        K: Targets cover all m >= n with 1 <= m + n <= K - 1.
        n_modes: Mode count M.
        programs: Program per target order.
        kernels: Coefficient tensors keyed by kernel identifier (``H[c,a]``).
    """

    K: int
    n_modes: int
    programs: Dict[Order, ContractionProgram]
    kernels: Dict[str, np.ndarray]

    def program(self, m: int, n: int) -> ContractionProgram:
        try:
            return self.programs[(m, n)]
        except KeyError:
            raise ProgramMissingError(f"No contraction program compiled for Gamma^({m},{n})") from None

    def to_dict(self) -> Dict[str, object]:
        return {
            "K": self.K,
            "n_modes": self.n_modes,
            "kernels": sorted(self.kernels),
            "programs": [self.programs[order].to_dict() for order in sorted(self.programs)],
        }


def compile_hierarchy(H: LadderPolynomial, K: int, n_modes: int) -> CompiledHierarchy:
    """Compile programs for every stored order of a K-level hierarchy under H."""
    normal = normal_order(H, n_modes)
    programs = {
        (m, n): compile_rhs(normal, m, n)
        for m, n in stored_orders(K)
        if m + n > 0
    }
    kernels = coefficient_tensors(normal, n_modes)
    logger.info(
        "Compiled %d programs (%d terms) over kernels %s",
        len(programs), sum(len(p.terms) for p in programs.values()), sorted(kernels),
    )
    return CompiledHierarchy(K=K, n_modes=n_modes, programs=programs, kernels=kernels)


def compile_model(model: ModelSpec, K: int) -> CompiledHierarchy:
    return compile_hierarchy(assemble_hamiltonian(model).total, K, model.n_modes)


# ----------------------------------------------------------------------
# Closures
# ----------------------------------------------------------------------

def retained_cumulants(state: HierarchyState, closure: ClosureSpec) -> Cumulants:
    """First (and for N=3 second) cumulants read from the stored tensors."""
    alpha = state.get_gamma(1, 0).data
    if closure.N == 2:
        return Cumulants(first=alpha)
    pair_11 = state.get_gamma(1, 1).data - np.outer(alpha, alpha.conj())
    pair_20 = state.get_gamma(2, 0).data - np.outer(alpha, alpha)
    return Cumulants(first=alpha, pair_11=pair_11, pair_20=pair_20)


def close(
    state: HierarchyState,
    m: int,
    n: int,
    closure: ClosureSpec,
    cumulants: Optional[Cumulants] = None,
) -> GammaTensor:
    """
    Supply the out-of-range tensor Γ^(m,n).

    Raises:
        ClosureMisuseError: m + n < N, i.e. the tensor is a stored variable.
    """
    if m + n < closure.N:
        raise ClosureMisuseError(f"Gamma^({m},{n}) is retained under {closure}; read it from the state")
    if closure.variant == ClosureVariant.TRUNCATE:
        return GammaTensor(m, n, np.zeros((state.n_modes,) * (m + n), dtype=complex))
    cumulants = cumulants if cumulants is not None else retained_cumulants(state, closure)
    return GammaTensor(m, n, cumulant_expansion(cumulants, m, n))


def gamma_provider(state: HierarchyState, closure: ClosureSpec) -> Callable[[int, int], Optional[np.ndarray]]:
    """
    Source lookup for program evaluation: stored orders come from the state,
    others from the closure. Closed tensors are built once per provider; truncated
    sources are reported as None so their terms are skipped.
    """
    cache: Dict[Order, np.ndarray] = {}
    cumulants = retained_cumulants(state, closure) if closure.variant == ClosureVariant.CLUSTER else None

    def provide(m: int, n: int) -> Optional[np.ndarray]:
        if state.in_range(m, n):
            return state.get_gamma(m, n).data
        if closure.variant == ClosureVariant.TRUNCATE:
            return None
        if (m, n) not in cache:
            cache[(m, n)] = close(state, m, n, closure, cumulants).data
        return cache[(m, n)]

    return provide


def _check_consistency(state: HierarchyState, compiled: CompiledHierarchy, closure: ClosureSpec) -> None:
    if closure.N != state.K:
        raise ClosureMisuseError(f"Closure order {closure.N} does not match state order K={state.K}")
    if compiled.K != state.K or compiled.n_modes != state.n_modes:
        raise ProgramMissingError(
            f"Programs compiled for K={compiled.K}, M={compiled.n_modes}; state has K={state.K}, M={state.n_modes}"
        )


def rhs(state: HierarchyState, compiled: CompiledHierarchy, closure: ClosureSpec) -> Derivative:
    """
    d/dt of every stored tensor, keyed by (m, n) with m >= n.

    The (0,0) derivative is exactly zero; every output is symmetrized.
    """
    _check_consistency(state, compiled, closure)
    provide = gamma_provider(state, closure)
    targets = [order for order in state.orders() if order != (0, 0)]

    def evaluate(order: Order) -> np.ndarray:
        program = compiled.program(*order)
        raw = program.evaluate(compiled.kernels, provide, state.n_modes)
        return symmetrize(GammaTensor(order[0], order[1], raw)).data

    threads = config.get_threads()
    if threads > 1 and len(targets) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(evaluate, targets))
    else:
        values = [evaluate(order) for order in targets]

    derivative: Derivative = {(0, 0): np.zeros((), dtype=complex)}
    derivative.update(zip(targets, values))
    return derivative


# ----------------------------------------------------------------------
# Integration
# ----------------------------------------------------------------------

def _advance(state: HierarchyState, increments: Mapping[Order, np.ndarray], scale: float, time: float) -> HierarchyState:
    tensors = {
        order: data + scale * increments[order]
        for order, data in state.items()
        if order != (0, 0)
    }
    return state.replace_tensors(tensors, time)


def _check_finite(state: HierarchyState) -> None:
    order = state.first_nonfinite_order()
    if order is not None:
        raise DivergenceError(state.time, order)


def step(
    state: HierarchyState,
    compiled: CompiledHierarchy,
    closure: ClosureSpec,
    integrator: IntegratorSpec,
) -> HierarchyState:
    """
    One classical RK4 step of size dt.

    Raises:
        DivergenceError: A stage or the result holds non-finite values.
    """
    dt = integrator.dt
    t0 = state.time
    with np.errstate(over="ignore", invalid="ignore"):
        k1 = rhs(state, compiled, closure)
        stage = _advance(state, k1, 0.5 * dt, t0 + 0.5 * dt)
        _check_finite(stage)
        k2 = rhs(stage, compiled, closure)
        stage = _advance(state, k2, 0.5 * dt, t0 + 0.5 * dt)
        _check_finite(stage)
        k3 = rhs(stage, compiled, closure)
        stage = _advance(state, k3, dt, t0 + dt)
        _check_finite(stage)
        k4 = rhs(stage, compiled, closure)
        combined = {
            order: (k1[order] + 2.0 * k2[order] + 2.0 * k3[order] + k4[order]) / 6.0
            for order in k1
        }
        result = _advance(state, combined, dt, t0 + dt)
    _check_finite(result)
    return result


def energy_expectation(state: HierarchyState, compiled: CompiledHierarchy, closure: Optional[ClosureSpec] = None) -> float:
    """
    ⟨H⟩ = Σ_blocks Σ T[I;J] Γ^(a,c)(J;I), plus the constant block.

    Blocks reading orders above the stored range go through the closure
    (or contribute nothing when no closure is given).
    """
    provide = gamma_provider(state, closure) if closure is not None else (
        lambda m, n: state.get_gamma(m, n).data if state.in_range(m, n) else None
    )
    total = 0j
    for key, tensor in compiled.kernels.items():
        creators, annihilators = parse_kernel_id(key)
        gamma = provide(annihilators, creators)
        if gamma is None:
            continue
        # Γ^(a,c) axes are (annihilators, creators); T axes are (creators, annihilators)
        axes = list(range(annihilators, annihilators + creators)) + list(range(annihilators))
        total += np.sum(tensor * np.transpose(gamma, axes))
    return float(total.real)


@dataclass
class ConservationReport:
    """
    Diagnostics recorded at every sample point.

    Conservation is not guaranteed for truncated hierarchies; drifts are recorded, not asserted.
    """

    times: List[float] = field(default_factory=list)
    trace: List[float] = field(default_factory=list)
    number: List[float] = field(default_factory=list)
    energy: List[float] = field(default_factory=list)
    herm_residual: List[float] = field(default_factory=list)
    min_eig_gamma11: List[float] = field(default_factory=list)
    sym_residual: List[float] = field(default_factory=list)

    COLUMNS = ("t", "trace", "number", "energy", "herm_residual", "min_eig_gamma11")

    def record(self, state: HierarchyState, compiled: CompiledHierarchy, closure: ClosureSpec) -> None:
        provide = gamma_provider(state, closure)
        gamma11 = provide(1, 1)
        if gamma11 is None:
            gamma11 = np.zeros((state.n_modes, state.n_modes), dtype=complex)
        smallest = float(np.min(np.linalg.eigvalsh(0.5 * (gamma11 + gamma11.conj().T))))
        if smallest < -config.get_positivity_tolerance():
            logger.warning("Gamma^(1,1) lost positivity at t=%.6g (min eigenvalue %.3e)", state.time, smallest)

        herm = 0.0
        sym = 0.0
        for (m, n), data in state.items():
            tensor = GammaTensor(m, n, data)
            herm = max(herm, hermiticity_residual(tensor))
            sym = max(sym, symmetry_residual(tensor))

        self.times.append(state.time)
        self.trace.append(float(state.get_gamma(0, 0).data.real))
        self.number.append(float(np.real(np.trace(gamma11))))
        self.energy.append(energy_expectation(state, compiled, closure))
        self.herm_residual.append(herm)
        self.min_eig_gamma11.append(smallest)
        self.sym_residual.append(sym)

    def rows(self) -> List[Tuple[float, ...]]:
        return list(zip(self.times, self.trace, self.number, self.energy, self.herm_residual, self.min_eig_gamma11))

    def number_drift(self) -> float:
        return max(abs(value - self.number[0]) for value in self.number) if self.number else 0.0

    def energy_drift(self) -> float:
        return max(abs(value - self.energy[0]) for value in self.energy) if self.energy else 0.0


@dataclass
class Trajectory:
    """Sampled states of one integration together with its conservation report."""

    samples: List[HierarchyState] = field(default_factory=list)
    report: ConservationReport = field(default_factory=ConservationReport)

    @property
    def times(self) -> List[float]:
        return [sample.time for sample in self.samples]

    @property
    def final(self) -> HierarchyState:
        return self.samples[-1]


def integrate(
    state: HierarchyState,
    compiled: CompiledHierarchy,
    closure: ClosureSpec,
    integrator: IntegratorSpec,
) -> Trajectory:
    """
    Integrate from state.time to state.time + t_final, sampling every ``sample_every`` steps.

    Raises:
        DivergenceError: Carries the samples recorded before the failure.
    """
    _check_consistency(state, compiled, closure)
    trajectory = Trajectory()
    samples = set(integrator.sample_steps())
    t0 = state.time
    current = state.copy()
    trajectory.samples.append(current)
    trajectory.report.record(current, compiled, closure)

    for index in range(1, integrator.n_steps + 1):
        try:
            current = step(current, compiled, closure, integrator)
        except DivergenceError as exc:
            logger.error("Integration diverged at t=%.6g in Gamma^%s", exc.time, exc.order)
            raise DivergenceError(exc.time, exc.order, trajectory.samples) from None
        # Keep the clock on the step grid rather than accumulating dt
        current.time = t0 + index * integrator.dt
        if index in samples:
            trajectory.samples.append(current)
            trajectory.report.record(current, compiled, closure)
            logger.debug("t=%.6g number=%.12g", current.time, trajectory.report.number[-1])

    logger.info(
        "Integrated %d steps under %s; number drift %.3e, energy drift %.3e",
        integrator.n_steps, closure, trajectory.report.number_drift(), trajectory.report.energy_drift(),
    )
    return trajectory
