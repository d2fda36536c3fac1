"""
FockOracle - Exact evolution on a truncated bosonic Fock space.

The oracle is the ground truth for hierarchy runs: a density matrix on the
truncated occupation basis is evolved with U = exp(-iHt) from a dense
eigendecomposition, and reduced density matrices are traced out of it.

Example:
    Evolve a two-particle Fock state and compare its one-body matrix::

        basis = FockBasis(M=2, n_max=4)
        rho0 = fock_density(basis, (1, 1))
        rhos = evolve_density(rho0, H, [0.0, 0.5, 1.0])
        gamma11 = reduced_density(rhos[-1], 1, 1)
"""

from __future__ import annotations

import itertools
import logging
import math
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse as sparse

from src.ConfigLoader import config
from src.HierarchyErrors import (
    CutoffInsufficientError,
    InvalidInputError,
    InvalidModelError,
    NumericalBreakdownError,
)
from src.HierarchyState import HierarchyState, stored_orders
from src.LadderAlgebra import LadderOp, LadderPolynomial, OpKind, annihilate, normal_order
from src.Model import ModeGrid

logger = logging.getLogger(__name__)

Occupation = Tuple[int, ...]

# Validation tolerances for density matrices
HERMITICITY_TOLERANCE = 1e-12
TRACE_TOLERANCE = 1e-12


class FockBasis:
    """
    Occupation-number basis with a per-mode cutoff and an optional total-particle cap.

    States are enumerated lexicographically in their occupation vectors.

    Attributes:
        M: Mode count.
        n_max: Largest occupation of any single mode.
        total_cap: Largest total particle number, or None for no cap.
        states: Tuple of occupation vectors.
    """

    def __init__(self, M: int, n_max: int, total_cap: Optional[int] = None) -> None:
        if M < 1:
            raise InvalidInputError("Fock basis needs at least one mode")
        # A cutoff of zero leaves only the vacuum, which then sits on the boundary itself
        if n_max < 1:
            raise InvalidInputError(f"n_max must be at least 1, got {n_max}")
        if total_cap is not None and total_cap < 1:
            raise InvalidInputError(f"total_cap must be at least 1, got {total_cap}")
        self.M = M
        self.n_max = n_max
        self.total_cap = total_cap
        self.states: Tuple[Occupation, ...] = tuple(
            state
            for state in itertools.product(range(n_max + 1), repeat=M)
            if total_cap is None or sum(state) <= total_cap
        )
        limit = config.get_oracle_max_dimension()
        if self.dim > limit:
            raise InvalidInputError(f"Fock space dimension {self.dim} exceeds the oracle limit {limit}")
        self._index: Dict[Occupation, int] = {state: i for i, state in enumerate(self.states)}
        self._ladder_cache: Dict[LadderOp, sparse.csr_matrix] = {}

    @property
    def dim(self) -> int:
        return len(self.states)

    def index(self, state: Sequence[int]) -> int:
        try:
            return self._index[tuple(state)]
        except KeyError as exc:
            raise InvalidInputError(f"Occupation {tuple(state)} is outside the truncated basis") from exc

    def __contains__(self, state: Sequence[int]) -> bool:
        return tuple(state) in self._index

    def boundary_mask(self) -> np.ndarray:
        """True for basis states sitting on the occupation cutoff (or on the total cap)."""
        mask = np.array([max(state) == self.n_max for state in self.states], dtype=bool)
        if self.total_cap is not None:
            mask |= np.array([sum(state) == self.total_cap for state in self.states], dtype=bool)
        return mask

    def ladder_matrix(self, op: LadderOp) -> sparse.csr_matrix:
        """Sparse matrix of one ladder operator restricted to the basis."""
        cached = self._ladder_cache.get(op)
        if cached is not None:
            return cached
        if not 0 <= op.mode < self.M:
            raise InvalidInputError(f"Mode {op.mode} is outside the {self.M}-mode basis")
        rows, cols, values = [], [], []
        for col, state in enumerate(self.states):
            occupation = state[op.mode]
            if op.kind == OpKind.ANNIHILATE:
                if occupation == 0:
                    continue
                target = state[:op.mode] + (occupation - 1,) + state[op.mode + 1:]
                amplitude = math.sqrt(occupation)
            else:
                target = state[:op.mode] + (occupation + 1,) + state[op.mode + 1:]
                amplitude = math.sqrt(occupation + 1)
            row = self._index.get(target)
            if row is None:
                continue
            rows.append(row)
            cols.append(col)
            values.append(amplitude)
        matrix = sparse.csr_matrix((values, (rows, cols)), shape=(self.dim, self.dim), dtype=complex)
        self._ladder_cache[op] = matrix
        return matrix


class FockDensityMatrix:
    """
    Density matrix on a truncated Fock basis.

    Raises:
        InvalidInputError: rho is not hermitian, not unit trace or not positive semidefinite.
    """

    def __init__(self, basis: FockBasis, rho: np.ndarray, validate: bool = True) -> None:
        rho = np.asarray(rho, dtype=complex)
        if rho.shape != (basis.dim, basis.dim):
            raise InvalidInputError(f"rho must be {basis.dim}x{basis.dim}, got {rho.shape}")
        self.basis = basis
        self.rho = rho
        if validate:
            self.validate()

    def validate(self) -> None:
        if np.max(np.abs(self.rho - self.rho.conj().T), initial=0.0) > HERMITICITY_TOLERANCE:
            raise InvalidInputError("Density matrix is not hermitian")
        if abs(np.trace(self.rho) - 1.0) > TRACE_TOLERANCE:
            raise InvalidInputError(f"Density matrix trace is {np.trace(self.rho).real:.15g}, expected 1")
        smallest = float(np.min(np.linalg.eigvalsh(self.rho)))
        if smallest < -config.get_positivity_tolerance():
            raise InvalidInputError(f"Density matrix has negative eigenvalue {smallest:.3e}")

    def trace(self) -> complex:
        return complex(np.trace(self.rho))

    def purity(self) -> float:
        return float(np.real(np.sum(self.rho * self.rho.T)))

    def boundary_weight(self) -> float:
        return boundary_weight(self)


def matrix_of(poly: LadderPolynomial, basis: FockBasis) -> np.ndarray:
    """
    Dense matrix of a ladder polynomial on the truncated basis.

    Each word is applied right to left, so the result equals the product of the
    truncated factor matrices.
    """
    total = sparse.csr_matrix((basis.dim, basis.dim), dtype=complex)
    identity = sparse.identity(basis.dim, dtype=complex, format="csr")
    for word, coefficient in poly.terms.items():
        product = identity
        for op in reversed(word):
            product = basis.ladder_matrix(op) @ product
        total = total + coefficient * product
    return total.toarray()


def expectation(rho: FockDensityMatrix, poly: LadderPolynomial) -> complex:
    """Tr(ρ O) for a ladder polynomial O."""
    return complex(np.sum(rho.rho.T * matrix_of(poly, rho.basis)))


def boundary_weight(rho: FockDensityMatrix) -> float:
    diagonal = np.real(np.diag(rho.rho))
    return float(np.sum(diagonal[rho.basis.boundary_mask()]))


def check_cutoff(rho: FockDensityMatrix, limit: Optional[float] = None) -> float:
    """
    Raises:
        CutoffInsufficientError: Probability on the cutoff boundary exceeds the configured limit.
    """
    limit = config.get_boundary_weight_limit() if limit is None else limit
    weight = boundary_weight(rho)
    if weight > limit:
        raise CutoffInsufficientError(weight, f"n_max={rho.basis.n_max} is too small")
    return weight


def evolve_density(
    rho0: FockDensityMatrix,
    H: LadderPolynomial,
    t_grid: Sequence[float],
    check_boundary: bool = True,
) -> List[FockDensityMatrix]:
    """
    Exact evolution ρ(t) = U ρ0 U† with U = exp(-iHt).

    H is normal-ordered before its matrix is built, so the truncated matrix is
    hermitian whenever H is.

    Args:
        rho0: Initial density matrix.
        H: Hermitian Hamiltonian.
        t_grid: Sample times.
        check_boundary: Enforce the boundary-weight limit at every sample.

    Returns:
        One density matrix per entry of t_grid.

    Raises:
        InvalidModelError: H is not hermitian on the truncated basis.
        NumericalBreakdownError: The eigendecomposition failed.
        CutoffInsufficientError: Too much weight reached the occupation cutoff.
    """
    basis = rho0.basis
    h_matrix = matrix_of(normal_order(H, basis.M), basis)
    if np.max(np.abs(h_matrix - h_matrix.conj().T), initial=0.0) > config.get_hermiticity_tolerance():
        raise InvalidModelError("Hamiltonian matrix is not hermitian on the truncated basis")
    try:
        energies, vectors = scipy.linalg.eigh(h_matrix)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalBreakdownError(f"Eigendecomposition of the Hamiltonian failed: {exc}") from exc

    rho_eigen = vectors.conj().T @ rho0.rho @ vectors
    results: List[FockDensityMatrix] = []
    worst = 0.0
    for t in t_grid:
        phases = np.exp(-1j * energies * t)
        rho_t = vectors @ (rho_eigen * np.outer(phases, phases.conj())) @ vectors.conj().T
        rho_t = 0.5 * (rho_t + rho_t.conj().T)
        state = FockDensityMatrix(basis, rho_t, validate=False)
        if check_boundary:
            worst = max(worst, check_cutoff(state))
        results.append(state)
    logger.debug("Oracle evolved %d samples (dim %d), max boundary weight %.3e", len(results), basis.dim, worst)
    return results


# ----------------------------------------------------------------------
# Reduced density matrices
# ----------------------------------------------------------------------

def _annihilator_product(basis: FockBasis, modes: Sequence[int]) -> sparse.csr_matrix:
    product = sparse.identity(basis.dim, dtype=complex, format="csr")
    for mode in modes:
        product = basis.ladder_matrix(annihilate(mode)) @ product
    return product


def reduced_density(rho: FockDensityMatrix, m: int, n: int) -> np.ndarray:
    """
    Γ^(m,n)(p;p') = Tr(ρ b†_{p'_1}…b†_{p'_n} b_{p_1}…b_{p_m}) with axes (p…, p'…).

    Uses Tr(ρ A†_{P'} A_P) = Σ_ij (A_P ρ)_ij conj(A_{P'})_ij where A_P is the
    product of annihilators for the multiset P.
    """
    if m < 0 or n < 0:
        raise InvalidInputError(f"Orders must be non-negative, got ({m},{n})")
    basis = rho.basis
    if m + n > 6:
        logger.warning("Tracing Gamma^(%d,%d) from the oracle beyond the usual order cap", m, n)
    M = basis.M
    gamma = np.zeros((M,) * (m + n), dtype=complex)
    annih_sets = list(itertools.combinations_with_replacement(range(M), m))
    create_sets = list(itertools.combinations_with_replacement(range(M), n))
    products = {modes: _annihilator_product(basis, modes) for modes in set(annih_sets) | set(create_sets)}

    for P in annih_sets:
        applied = products[P] @ rho.rho
        for P_prime in create_sets:
            adjoint_factor = products[P_prime]
            value = adjoint_factor.conj().multiply(applied).sum()
            for perm_a in set(itertools.permutations(P)):
                for perm_c in set(itertools.permutations(P_prime)):
                    gamma[perm_a + perm_c] = value
    return gamma


def hierarchy_from_oracle(rho: FockDensityMatrix, K: int, grid: Optional[ModeGrid] = None) -> HierarchyState:
    """
    Hierarchy state whose stored tensors are the oracle's reduced density matrices.

    Args:
        rho: Oracle density matrix.
        K: Stored orders satisfy m + n <= K - 1.
        grid: Grid to attach; defaults to a 1D grid with one point per mode.
    """
    grid = grid if grid is not None else ModeGrid(points_per_dim=rho.basis.M)
    if grid.mode_count != rho.basis.M:
        raise InvalidInputError(f"Grid has {grid.mode_count} modes but the basis has {rho.basis.M}")
    state = HierarchyState(grid, K)
    for m, n in stored_orders(K):
        if m + n > 0:
            state.set_gamma(m, n, reduced_density(rho, m, n))
    return state


# ----------------------------------------------------------------------
# State builders
# ----------------------------------------------------------------------

def pure_density(basis: FockBasis, amplitudes: Mapping[Sequence[int], complex]) -> FockDensityMatrix:
    """Projector onto the normalized superposition Σ c_s |s⟩."""
    psi = np.zeros(basis.dim, dtype=complex)
    for state, amplitude in amplitudes.items():
        psi[basis.index(state)] += amplitude
    norm = np.linalg.norm(psi)
    if norm == 0:
        raise InvalidInputError("Superposition has zero norm")
    psi = psi / norm
    return FockDensityMatrix(basis, np.outer(psi, psi.conj()))


def vacuum_density(basis: FockBasis) -> FockDensityMatrix:
    return pure_density(basis, {(0,) * basis.M: 1.0})


def fock_density(basis: FockBasis, occupations: Sequence[int]) -> FockDensityMatrix:
    if len(occupations) != basis.M:
        raise InvalidInputError(f"Occupation list needs {basis.M} entries, got {len(occupations)}")
    return pure_density(basis, {tuple(int(n) for n in occupations): 1.0})


def coherent_density(basis: FockBasis, alpha: Sequence[complex]) -> FockDensityMatrix:
    """
    Projector onto the coherent state exp(Σ α_k b†_k)|0⟩, truncated and renormalized.

    Raises:
        CutoffInsufficientError: The dropped tail of the series exceeds the coherent tail tolerance.
    """
    alpha = np.asarray(alpha, dtype=complex)
    if alpha.shape != (basis.M,):
        raise InvalidInputError(f"alpha needs {basis.M} entries, got {alpha.size}")
    psi = np.array([
        np.prod([alpha[k] ** n / math.sqrt(math.factorial(n)) for k, n in enumerate(state)])
        for state in basis.states
    ], dtype=complex)
    kept = float(np.sum(np.abs(psi) ** 2)) * math.exp(-float(np.sum(np.abs(alpha) ** 2)))
    tail = 1.0 - kept
    if tail > config.get_coherent_tail_tolerance():
        raise CutoffInsufficientError(tail, f"coherent state needs a larger n_max than {basis.n_max}")
    psi = psi / np.linalg.norm(psi)
    return FockDensityMatrix(basis, np.outer(psi, psi.conj()))


def gaussian_density(basis: FockBasis, occupations: Sequence[float]) -> FockDensityMatrix:
    """
    Diagonal product of geometric (thermal) distributions with ⟨b†_k b_k⟩ = n_k, truncated and renormalized.
    """
    occupations = np.asarray(occupations, dtype=float)
    if occupations.shape != (basis.M,):
        raise InvalidInputError(f"occupations need {basis.M} entries, got {occupations.size}")
    if np.any(occupations < 0):
        raise InvalidInputError("Occupations must be non-negative")
    ratios = occupations / (1.0 + occupations)
    weights = np.array([
        np.prod([(1.0 - ratios[k]) * ratios[k] ** n for k, n in enumerate(state)])
        for state in basis.states
    ])
    tail = 1.0 - float(np.sum(weights))
    if tail > config.get_coherent_tail_tolerance():
        logger.warning("Gaussian state truncated at n_max=%d drops weight %.3e", basis.n_max, tail)
    return FockDensityMatrix(basis, np.diag(weights / np.sum(weights)).astype(complex))
