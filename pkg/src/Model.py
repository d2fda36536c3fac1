"""
Model - The discretized physical system.

Defines the momentum grid, the dispersion relation and the two-body interaction
kernel, and builds the graded Hamiltonian pieces H_2 … H_5 (piece i has
polynomial degree i - 1).

Continuum operators a_p relate to the unit-normalized grid modes through
b_k = a_{p_k} · sqrt(Δp^d / ((2π)^d 2E_{p_k})), so every continuum measure
∫ d^dq / ((2π)^d 2E_q) becomes a plain sum over modes.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from src.HierarchyErrors import InvalidModelError, UnsupportedInteractionError
from src.LadderAlgebra import (
    LadderPolynomial,
    MAX_HAMILTONIAN_DEGREE,
    annihilate,
    create,
    normal_order,
)

logger = logging.getLogger(__name__)

# Mode energies at or below this count as zero (the p = 0 midpoint of a massless grid)
ZERO_ENERGY_TOLERANCE = 1e-12


@dataclass(frozen=True)
class ModeGrid:
    """
    Uniform momentum lattice centered at zero, sampled at cell midpoints.

    Flat mode index = grid_point * n_species + species.

    Attributes:
        dims: Spatial dimension (1, 2 or 3).
        points_per_dim: Lattice points along each axis.
        p_max: Momentum cutoff; the lattice spans [-p_max, p_max] per axis.
        n_species: Number of discrete species sharing each grid point.
    """

    dims: int = 1
    points_per_dim: int = 1
    p_max: float = 1.0
    n_species: int = 1

    def __post_init__(self) -> None:
        if self.dims not in (1, 2, 3):
            raise InvalidModelError(f"dims must be 1, 2 or 3, got {self.dims}")
        if self.points_per_dim < 1:
            raise InvalidModelError("points_per_dim must be at least 1")
        if self.n_species < 1:
            raise InvalidModelError("n_species must be at least 1")
        if not self.p_max > 0:
            raise InvalidModelError("p_max must be positive")

    @property
    def spacing(self) -> float:
        return 2.0 * self.p_max / self.points_per_dim

    @property
    def cell_volume(self) -> float:
        return self.spacing ** self.dims

    @property
    def n_points(self) -> int:
        return self.points_per_dim ** self.dims

    @property
    def mode_count(self) -> int:
        return self.n_points * self.n_species

    def axis_momenta(self) -> np.ndarray:
        j = np.arange(self.points_per_dim)
        return -self.p_max + (j + 0.5) * self.spacing

    def point_momenta(self) -> np.ndarray:
        """Momentum vectors of the grid points, shape (n_points, dims), lexicographic order."""
        axis = self.axis_momenta()
        return np.array(list(itertools.product(axis, repeat=self.dims)), dtype=float)

    def mode_momenta(self) -> np.ndarray:
        """Momentum vector of every flat mode, shape (M, dims)."""
        return np.repeat(self.point_momenta(), self.n_species, axis=0)

    def mode_species(self) -> np.ndarray:
        return np.tile(np.arange(self.n_species), self.n_points)

    def mode_index(self, grid_point: int, species: int = 0) -> int:
        return grid_point * self.n_species + species


def dispersion(p, mass: float) -> float:
    """Relativistic particle energy E_p = sqrt(|p|^2 + m^2)."""
    if mass < 0:
        raise InvalidModelError(f"mass must be non-negative, got {mass}")
    p = np.atleast_1d(np.asarray(p, dtype=float))
    return float(np.sqrt(np.dot(p, p) + mass * mass))


class KernelVariant(Enum):
    """Supported shapes of the two-body interaction kernel h(q, s)."""
    CONSTANT = "constant"
    SEPARABLE = "separable"
    TABULATED = "tabulated"


@dataclass(frozen=True)
class InteractionKernel:
    """
    Real symmetric interaction kernel h_jk over flat modes.

    Attributes:
        variant: Kernel shape.
        value: Constant value (CONSTANT).
        profile: Tabulated real function f over modes, h_jk = f_j f_k (SEPARABLE).
        table: Full M x M table (TABULATED); must be real and symmetric.
    """

    variant: KernelVariant = KernelVariant.CONSTANT
    value: float = 1.0
    profile: Tuple[float, ...] = ()
    table: Tuple[Tuple[float, ...], ...] = ()

    def __post_init__(self) -> None:
        if self.variant == KernelVariant.TABULATED and self.table:
            matrix = np.asarray(self.table, dtype=complex)
            if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
                raise InvalidModelError("Kernel table must be square")
            if np.any(np.abs(matrix.imag) > 0):
                raise InvalidModelError("Kernel table must be real-valued")
            if not np.allclose(matrix, matrix.T, atol=0.0, rtol=0.0):
                raise InvalidModelError("Kernel table must be symmetric: h(q,s) = h(s,q)")

    def matrix(self, n_modes: int) -> np.ndarray:
        if self.variant == KernelVariant.CONSTANT:
            return np.full((n_modes, n_modes), float(self.value))
        if self.variant == KernelVariant.SEPARABLE:
            f = np.asarray(self.profile, dtype=float)
            if f.shape != (n_modes,):
                raise InvalidModelError(f"Separable profile needs {n_modes} entries, got {f.size}")
            return np.outer(f, f)
        table = np.asarray(self.table, dtype=float)
        if table.shape != (n_modes, n_modes):
            raise InvalidModelError(f"Kernel table must be {n_modes}x{n_modes}, got {table.shape}")
        return table


@dataclass(frozen=True)
class ModelSpec:
    """
    Discretized scalar model.

    Attributes:
        grid: Momentum grid.
        mass: Particle mass m >= 0.
        kernel: Two-body kernel; None for a free theory.
        coupling: Scale g multiplying the kernel.
        extra_terms: Additional Hamiltonian pieces supplied directly (e.g. cubic terms).
    """

    grid: ModeGrid
    mass: float = 1.0
    kernel: Optional[InteractionKernel] = None
    coupling: float = 0.0
    extra_terms: Optional[LadderPolynomial] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.mass < 0:
            raise InvalidModelError(f"mass must be non-negative, got {self.mass}")
        if self.kernel is not None:
            # Validates shape and symmetry against the grid
            self.kernel.matrix(self.grid.mode_count)
        if self.extra_terms is not None:
            self.extra_terms.validate_modes(self.grid.mode_count)

    @property
    def n_modes(self) -> int:
        return self.grid.mode_count

    def energies(self) -> np.ndarray:
        """E_k for every flat mode."""
        return np.array([dispersion(p, self.mass) for p in self.grid.mode_momenta()])

    def has_positive_energies(self) -> bool:
        """False for a massless model whose grid contains p = 0 (odd points_per_dim)."""
        return bool(np.all(self.energies() > ZERO_ENERGY_TOLERANCE))

    def kernel_matrix(self) -> np.ndarray:
        if self.kernel is None:
            return np.zeros((self.n_modes, self.n_modes))
        return self.kernel.matrix(self.n_modes)

    def is_interacting(self) -> bool:
        return self.kernel is not None and self.coupling != 0.0


def build_free_hamiltonian(model: ModelSpec) -> LadderPolynomial:
    """H_free = Σ_k E_k b†_k b_k."""
    energies = model.energies()
    return LadderPolynomial({(create(k), annihilate(k)): energies[k] for k in range(model.n_modes)})


def build_two_body_hamiltonian(model: ModelSpec) -> LadderPolynomial:
    """H_int = (g/2) Σ_{j,k} h_jk b†_j b†_k b_j b_k, normal-ordered."""
    h = model.kernel_matrix()
    if not np.allclose(h, h.T, atol=0.0, rtol=0.0):
        raise InvalidModelError("Interaction kernel is not symmetric")
    half_g = 0.5 * model.coupling
    raw = LadderPolynomial(
        ((create(j), create(k), annihilate(j), annihilate(k)), half_g * h[j, k])
        for j in range(model.n_modes)
        for k in range(model.n_modes)
    )
    return normal_order(raw, model.n_modes)


@dataclass(frozen=True)
class GradedHamiltonian:
    """
    Hamiltonian split by filtration level: pieces[i] holds the degree i - 1 terms (i = 2 … 5).

    Constant terms commute with everything and are kept separately in ``offset``.
    """

    pieces: Dict[int, LadderPolynomial]
    offset: complex = 0j

    def piece(self, level: int) -> LadderPolynomial:
        return self.pieces.get(level, LadderPolynomial())

    @property
    def total(self) -> LadderPolynomial:
        total = LadderPolynomial.constant(self.offset)
        for level in sorted(self.pieces):
            total = total + self.pieces[level]
        return total

    def levels(self) -> Sequence[int]:
        return [level for level in sorted(self.pieces) if not self.pieces[level].is_zero()]


def assemble_hamiltonian(model: ModelSpec) -> GradedHamiltonian:
    """
    Build the graded pieces {H_2, …, H_5} of the model Hamiltonian.

    Raises:
        UnsupportedInteractionError: An extra term has degree above 4.
        InvalidModelError: The assembled Hamiltonian is not hermitian.
    """
    total = build_free_hamiltonian(model)
    if model.is_interacting():
        total = total + build_two_body_hamiltonian(model)
    if model.extra_terms is not None:
        total = total + model.extra_terms
    total = normal_order(total, model.n_modes)
    if total.degree > MAX_HAMILTONIAN_DEGREE:
        raise UnsupportedInteractionError(f"Hamiltonian degree {total.degree} exceeds {MAX_HAMILTONIAN_DEGREE}")
    if not total.is_hermitian():
        raise InvalidModelError("Assembled Hamiltonian is not hermitian")

    by_degree: Dict[int, Dict] = {degree: {} for degree in range(MAX_HAMILTONIAN_DEGREE + 1)}
    for word, coefficient in total.terms.items():
        by_degree[len(word)][word] = coefficient
    offset = by_degree[0].get((), 0j)
    pieces = {degree + 1: LadderPolynomial(by_degree[degree]) for degree in range(1, MAX_HAMILTONIAN_DEGREE + 1)}
    levels = [level for level, piece in pieces.items() if not piece.is_zero()]
    logger.debug("Assembled Hamiltonian: levels %s, %d terms", levels, len(total))
    return GradedHamiltonian(pieces=pieces, offset=offset)
