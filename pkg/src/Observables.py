"""
Observables - Physical densities computed from a hierarchy state.

Continuum normalization is restored from the unit-normalized grid modes:
the momentum density divides by the cell volume Δp^d, while the spatial
densities weight each mode by sqrt(Δp^d / (2π)^d) together with the
per-leg energy factor of the corresponding field operator.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from src.Evolution import ClosureSpec, gamma_provider
from src.HierarchyErrors import InvalidInputError, InvalidModelError, OutOfOrderError
from src.HierarchyState import HierarchyState
from src.Model import ModeGrid, ModelSpec

logger = logging.getLogger(__name__)

# Imaginary parts below this are rounding noise and are discarded
IMAGINARY_TOLERANCE = 1e-10


@dataclass(frozen=True)
class SpatialGrid:
    """
    Uniform position lattice in [-x_max, x_max]^dims, sampled at cell midpoints.

    Attributes:
        dims: Spatial dimension.
        points_per_dim: Lattice points along each axis.
        x_max: Half-extent of the box.
    """

    dims: int = 1
    points_per_dim: int = 1
    x_max: float = math.pi

    def __post_init__(self) -> None:
        if self.dims not in (1, 2, 3):
            raise InvalidInputError(f"dims must be 1, 2 or 3, got {self.dims}")
        if self.points_per_dim < 1:
            raise InvalidInputError("points_per_dim must be at least 1")
        if not self.x_max > 0:
            raise InvalidInputError("x_max must be positive")

    @classmethod
    def dual_of(cls, grid: ModeGrid) -> "SpatialGrid":
        """The reciprocal lattice of a momentum grid, on which plane waves are exactly orthogonal."""
        return cls(dims=grid.dims, points_per_dim=grid.points_per_dim, x_max=math.pi / grid.spacing)

    @property
    def spacing(self) -> float:
        return 2.0 * self.x_max / self.points_per_dim

    @property
    def cell_volume(self) -> float:
        return self.spacing ** self.dims

    @property
    def n_points(self) -> int:
        return self.points_per_dim ** self.dims

    def points(self) -> np.ndarray:
        """Positions, shape (n_points, dims), lexicographic order."""
        axis = -self.x_max + (np.arange(self.points_per_dim) + 0.5) * self.spacing
        return np.array(list(itertools.product(axis, repeat=self.dims)), dtype=float)


def _source(state: HierarchyState, m: int, n: int, closure: Optional[ClosureSpec]) -> np.ndarray:
    """Stored Γ^(m,n), or the closure's value for it when the state does not hold it."""
    if state.in_range(m, n):
        return state.get_gamma(m, n).data
    if closure is None:
        raise OutOfOrderError(f"Gamma^({m},{n}) is not stored at K={state.K}")
    data = gamma_provider(state, closure)(m, n)
    if data is None:
        return np.zeros((state.n_modes,) * (m + n), dtype=complex)
    return data


def _gamma11(state: HierarchyState, closure: Optional[ClosureSpec] = None) -> np.ndarray:
    return _source(state, 1, 1, closure)


def _real(values: np.ndarray, label: str) -> np.ndarray:
    residual = float(np.max(np.abs(np.imag(values)), initial=0.0))
    if residual > IMAGINARY_TOLERANCE:
        logger.warning("%s has imaginary residual %.3e", label, residual)
    return np.real(values)


def momentum_density(state: HierarchyState, closure: Optional[ClosureSpec] = None) -> np.ndarray:
    """
    D(p_k) = Γ^(1,1)(k;k) / Δp^d for every flat mode.

    Args:
        state: Hierarchy state.
        closure: Supplies Γ^(1,1) when the state is too short to store it (K = 2).

    Raises:
        OutOfOrderError: Γ^(1,1) is not stored and no closure was given.
    """
    diagonal = _real(np.diagonal(_gamma11(state, closure)), "momentum density")
    return diagonal / state.grid.cell_volume


def momentum_density_by_species(state: HierarchyState, closure: Optional[ClosureSpec] = None) -> np.ndarray:
    """Momentum density reshaped to (grid points, species)."""
    grid = state.grid
    return momentum_density(state, closure).reshape(grid.n_points, grid.n_species)


def total_number(state: HierarchyState, closure: Optional[ClosureSpec] = None) -> float:
    """Σ_k Γ^(1,1)(k;k)."""
    return float(np.real(np.trace(_gamma11(state, closure))))


def _mode_weight(grid: ModeGrid) -> float:
    return math.sqrt(grid.cell_volume / (2.0 * math.pi) ** grid.dims)


def _same_species(grid: ModeGrid) -> np.ndarray:
    species = grid.mode_species()
    return species[:, None] == species[None, :]


def _plane_waves(grid: ModeGrid, xs: SpatialGrid) -> np.ndarray:
    """e^{i x·p_k}, shape (n_points, M)."""
    if xs.dims != grid.dims:
        raise InvalidInputError(f"Spatial grid has {xs.dims} dims, momentum grid has {grid.dims}")
    return np.exp(1j * xs.points() @ grid.mode_momenta().T)


def number_density(
    state: HierarchyState,
    xs: Optional[SpatialGrid] = None,
    closure: Optional[ClosureSpec] = None,
) -> np.ndarray:
    """
    N(x) = Σ_{k,p} u_k u_p e^{-ix·(k-p)} Γ^(1,1)(p;k), summed over same-species pairs.

    On the dual lattice Σ_x N(x) ΔV equals the total number exactly.
    """
    grid = state.grid
    xs = xs if xs is not None else SpatialGrid.dual_of(grid)
    gamma = _gamma11(state, closure) * _same_species(grid)
    waves = _plane_waves(grid, xs)
    u = _mode_weight(grid)
    # Γ^(1,1) axes are (p annihilated, k created): the created leg carries e^{-ix·k}
    values = u * u * np.einsum("xp,pk,xk->x", waves, gamma, waves.conj())
    return _real(values, "number density")


def energy_density(
    state: HierarchyState,
    model: ModelSpec,
    xs: Optional[SpatialGrid] = None,
    closure: Optional[ClosureSpec] = None,
) -> np.ndarray:
    """
    Free-field energy density ⟨H_free(x)⟩ on a spatial grid.

    E(x) = Σ_{k,p} w_k w_p [(m² - E_p E_k + p·k) e^{ix·(k+p)} Γ^(2,0)(k,p) + c.c.]
         + Σ_{k,p} w_k w_p (m² + E_p E_k + p·k) e^{-ix·(k-p)} Γ^(1,1)(p;k)

    with w_k = sqrt(Δp^d / (2π)^d) / sqrt(2E_k).

    Raises:
        OutOfOrderError: Γ^(2,0) or Γ^(1,1) is not stored and no closure was given.
        InvalidModelError: A mode has zero energy.
    """
    grid = state.grid
    if model.grid != grid:
        raise InvalidInputError("Model and state are defined on different grids")
    if not model.has_positive_energies():
        raise InvalidModelError("Energy density needs strictly positive mode energies (massless p=0 mode)")
    xs = xs if xs is not None else SpatialGrid.dual_of(grid)
    gamma20 = _source(state, 2, 0, closure)
    gamma11 = _gamma11(state, closure)

    energies = model.energies()
    momenta = grid.mode_momenta()
    same = _same_species(grid)
    w = _mode_weight(grid) / np.sqrt(2.0 * energies)
    dot = momenta @ momenta.T
    mass_sq = model.mass ** 2
    E_outer = np.outer(energies, energies)

    waves = _plane_waves(grid, xs)
    pair = (mass_sq - E_outer + dot) * np.outer(w, w) * same * gamma20
    anomalous = np.einsum("xk,kp,xp->x", waves, pair, waves)
    diag = (mass_sq + E_outer + dot) * np.outer(w, w) * same * gamma11
    normal = np.einsum("xp,pk,xk->x", waves, diag, waves.conj())
    return _real(anomalous + anomalous.conj() + normal, "energy density")
