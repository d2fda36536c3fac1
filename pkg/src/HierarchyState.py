"""
HierarchyState - Storage for the reduced density matrices Γ^(m,n).

Γ^(m,n)(p_1..p_m; p'_1..p'_n) = Tr(ρ b†_{p'_1}…b†_{p'_n} b_{p_1}…b_{p_m}) is held as a
dense complex tensor with the m annihilator axes first, then the n creator axes.
Only orders with m >= n are stored; Γ^(n,m) is the conjugate transpose of Γ^(m,n),
so hermiticity cannot be violated by construction. All orders with m + n <= K - 1
are stored.
"""

from __future__ import annotations

import base64
import itertools
import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.HierarchyErrors import IncompatibleStatesError, InvalidInputError, OutOfOrderError
from src.Model import ModeGrid

logger = logging.getLogger(__name__)

Order = Tuple[int, int]


@dataclass(frozen=True)
class GammaTensor:
    """One reduced density matrix Γ^(m,n) with axes (annihilators…, creators…)."""

    m: int
    n: int
    data: np.ndarray

    @property
    def order(self) -> Order:
        return self.m, self.n


def stored_orders(K: int) -> List[Order]:
    """Orders (m, n) with m >= n and m + n <= K - 1, sorted by total order."""
    return [
        (m, n)
        for total in range(K)
        for n in range(total // 2 + 1)
        for m in [total - n]
    ]


def adjoint_tensor(data: np.ndarray, m: int, n: int) -> np.ndarray:
    """Given Γ^(m,n) data, return Γ^(n,m) data (creator and annihilator blocks swapped, conjugated)."""
    axes = list(range(m, m + n)) + list(range(m))
    return np.conj(np.transpose(data, axes))


def symmetrize(tensor: GammaTensor) -> GammaTensor:
    """
    Average a tensor over all permutations of its annihilator axes and of its creator axes.

    The result is invariant under S_m x S_n and the operation is idempotent.
    """
    m, n = tensor.m, tensor.n
    data = np.asarray(tensor.data, dtype=complex)
    if m <= 1 and n <= 1:
        return GammaTensor(m, n, data.copy())
    total = np.zeros_like(data)
    count = 0
    for perm_a in itertools.permutations(range(m)):
        for perm_c in itertools.permutations(range(m, m + n)):
            total += np.transpose(data, perm_a + perm_c)
            count += 1
    return GammaTensor(m, n, total / count)


def symmetry_residual(tensor: GammaTensor) -> float:
    """Largest entrywise change under a single transposition of like-kind axes."""
    m, n = tensor.m, tensor.n
    residual = 0.0
    rank = m + n
    for start, size in ((0, m), (m, n)):
        for i in range(start, start + size - 1):
            perm = list(range(rank))
            perm[i], perm[i + 1] = perm[i + 1], perm[i]
            residual = max(residual, float(np.max(np.abs(tensor.data - np.transpose(tensor.data, perm)))))
    return residual


def hermiticity_residual(tensor: GammaTensor) -> float:
    """For diagonal orders (m == n), distance between Γ^(m,m) and its own adjoint; zero otherwise."""
    if tensor.m != tensor.n or tensor.m == 0:
        return 0.0
    return float(np.max(np.abs(tensor.data - adjoint_tensor(tensor.data, tensor.m, tensor.n))))


class HierarchyState:
    """
    The collection Γ_K = {Γ^(m,n) : m + n <= K - 1} at one instant.

    Writes go through ``set_gamma`` which symmetrizes the tensor and, for m == n,
    projects onto its hermitian part. Γ^(0,0) is pinned to 1.

    Attributes:
        grid: Momentum grid the tensors are indexed over.
        K: Stored orders satisfy m + n <= K - 1.
        time: Simulation time.
    """

    def __init__(self, grid: ModeGrid, K: int, time: float = 0.0) -> None:
        if K < 1:
            raise InvalidInputError(f"K must be at least 1, got {K}")
        self.grid = grid
        self.K = K
        self.time = time
        M = grid.mode_count
        self._tensors: Dict[Order, np.ndarray] = {
            (m, n): np.zeros((M,) * (m + n), dtype=complex) for m, n in stored_orders(K)
        }
        self._tensors[(0, 0)] = np.ones((), dtype=complex)

    @property
    def n_modes(self) -> int:
        return self.grid.mode_count

    def orders(self) -> List[Order]:
        return stored_orders(self.K)

    def in_range(self, m: int, n: int) -> bool:
        return m >= 0 and n >= 0 and m + n <= self.K - 1

    def get_gamma(self, m: int, n: int) -> GammaTensor:
        """
        Return Γ^(m,n); for m < n this is the conjugate transpose of the stored Γ^(n,m).

        Raises:
            OutOfOrderError: m + n exceeds K - 1 (a closure must supply it instead).
        """
        if not self.in_range(m, n):
            raise OutOfOrderError(f"Gamma^({m},{n}) is outside the stored range m+n <= {self.K - 1}")
        if m >= n:
            return GammaTensor(m, n, self._tensors[(m, n)])
        return GammaTensor(m, n, adjoint_tensor(self._tensors[(n, m)], n, m))

    def set_gamma(self, m: int, n: int, data: np.ndarray) -> None:
        """Store Γ^(m,n) after symmetrization; m < n is stored through its adjoint."""
        if not self.in_range(m, n):
            raise OutOfOrderError(f"Gamma^({m},{n}) is outside the stored range m+n <= {self.K - 1}")
        data = np.asarray(data, dtype=complex)
        expected = (self.n_modes,) * (m + n)
        if data.shape != expected:
            raise InvalidInputError(f"Gamma^({m},{n}) needs shape {expected}, got {data.shape}")
        if m < n:
            data, m, n = adjoint_tensor(data, m, n), n, m
        if (m, n) == (0, 0):
            return
        self._tensors[(m, n)] = _restore_invariants(data, m, n)

    def tensors(self) -> Dict[Order, np.ndarray]:
        """Stored tensors keyed by (m, n), m >= n (copies)."""
        return {order: data.copy() for order, data in self._tensors.items()}

    def items(self) -> Iterator[Tuple[Order, np.ndarray]]:
        return iter(self._tensors.items())

    def copy(self) -> "HierarchyState":
        clone = HierarchyState(self.grid, self.K, self.time)
        clone._tensors = self.tensors()
        return clone

    def replace_tensors(self, tensors: Mapping[Order, np.ndarray], time: Optional[float] = None) -> "HierarchyState":
        """New state with the given stored tensors, invariants restored."""
        clone = HierarchyState(self.grid, self.K, self.time if time is None else time)
        for (m, n), data in tensors.items():
            if (m, n) != (0, 0):
                clone._tensors[(m, n)] = _restore_invariants(np.asarray(data, dtype=complex), m, n)
        return clone

    def first_nonfinite_order(self) -> Optional[Order]:
        """Return the first order holding a non-finite entry, or None."""
        for order, data in self._tensors.items():
            if not np.all(np.isfinite(data)):
                return order
        return None

    # ------------------------------------------------------------------
    # Snapshot serialization
    # ------------------------------------------------------------------
    def to_snapshot(self) -> Dict[str, object]:
        """JSON-ready record with base64 little-endian complex64 payloads, one per stored order."""
        records = []
        for (m, n), data in sorted(self._tensors.items()):
            payload = np.ascontiguousarray(data, dtype="<c8").tobytes()
            records.append({
                "m": m,
                "n": n,
                "shape": list(data.shape),
                "data": base64.b64encode(payload).decode("ascii"),
            })
        return {
            "time": self.time,
            "K": self.K,
            "grid": {
                "dims": self.grid.dims,
                "points_per_dim": self.grid.points_per_dim,
                "p_max": self.grid.p_max,
                "n_species": self.grid.n_species,
            },
            "tensors": records,
        }

    @classmethod
    def from_snapshot(cls, record: Mapping[str, object]) -> "HierarchyState":
        grid = ModeGrid(**record["grid"])
        state = cls(grid, int(record["K"]), float(record["time"]))
        for entry in record["tensors"]:
            raw = base64.b64decode(entry["data"])
            data = np.frombuffer(raw, dtype="<c8").astype(complex).reshape(entry["shape"])
            state.set_gamma(int(entry["m"]), int(entry["n"]), data)
        return state


def _restore_invariants(data: np.ndarray, m: int, n: int) -> np.ndarray:
    data = symmetrize(GammaTensor(m, n, data)).data
    if m == n and m > 0:
        data = 0.5 * (data + adjoint_tensor(data, m, n))
    return data


def get_gamma(state: HierarchyState, m: int, n: int) -> GammaTensor:
    return state.get_gamma(m, n)


# ----------------------------------------------------------------------
# Cumulant (cluster) reconstruction
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class Cumulants:
    """
    Retained connected correlations.

    Attributes:
        first: Γ^(1,0)(p), shape (M,).
        pair_11: Second cumulant Γ^(1,1)(p;p') - conj(α_{p'}) α_p, shape (M, M); None if not retained.
        pair_20: Second cumulant Γ^(2,0)(p1,p2) - α_{p1} α_{p2}, shape (M, M); None if not retained.
    """

    first: np.ndarray
    pair_11: Optional[np.ndarray] = None
    pair_20: Optional[np.ndarray] = None


def cumulant_expansion(cumulants: Cumulants, m: int, n: int) -> np.ndarray:
    """
    Rebuild Γ^(m,n) as the sum over all partitions of its legs into singles and pairs.

    Annihilator legs contribute α, creator legs conj(α); a pair of annihilators
    contributes pair_20, a pair of creators conj(pair_20), a mixed pair pair_11.
    Cumulants of third and higher order are taken as zero.
    """
    legs = tuple(["a"] * m + ["c"] * n)
    return _expand_legs(legs, cumulants)


def _expand_legs(legs: Tuple[str, ...], cumulants: Cumulants) -> np.ndarray:
    if not legs:
        return np.ones((), dtype=complex)
    first, rest = legs[0], legs[1:]
    alpha = np.asarray(cumulants.first, dtype=complex)

    single = alpha if first == "a" else np.conj(alpha)
    result = np.multiply.outer(single, _expand_legs(rest, cumulants))

    for j, partner in enumerate(rest):
        pair = _pair_block(first, partner, cumulants)
        if pair is None:
            continue
        remaining = rest[:j] + rest[j + 1:]
        block = np.multiply.outer(pair, _expand_legs(remaining, cumulants))
        # block axes: (first, partner, remaining...); partner belongs at position j + 1
        result = result + np.moveaxis(block, 1, j + 1)
    return result


def _pair_block(first: str, partner: str, cumulants: Cumulants) -> Optional[np.ndarray]:
    if first == "a" and partner == "a":
        return cumulants.pair_20
    if first == "c" and partner == "c":
        return None if cumulants.pair_20 is None else np.conj(cumulants.pair_20)
    if cumulants.pair_11 is None:
        return None
    # pair_11 axes are (annihilator, creator)
    return cumulants.pair_11 if first == "a" else cumulants.pair_11.T


# ----------------------------------------------------------------------
# Initial states
# ----------------------------------------------------------------------

def init_vacuum(grid: ModeGrid, K: int) -> HierarchyState:
    return HierarchyState(grid, K)


def init_coherent(grid: ModeGrid, alpha: Sequence[complex], K: int) -> HierarchyState:
    """Coherent state: Γ^(m,n)(p;p') = Π_j conj(α_{p'_j}) Π_i α_{p_i} at every stored order."""
    alpha = np.asarray(alpha, dtype=complex)
    if alpha.shape != (grid.mode_count,):
        raise InvalidInputError(f"alpha needs {grid.mode_count} entries, got {alpha.size}")
    state = HierarchyState(grid, K)
    cumulants = Cumulants(first=alpha)
    for m, n in state.orders():
        if m + n > 0:
            state.set_gamma(m, n, cumulant_expansion(cumulants, m, n))
    return state


def init_gaussian(grid: ModeGrid, occupations: Sequence[float], K: int) -> HierarchyState:
    """
    Diagonal Gaussian (thermal-like) state with ⟨b†_k b_k⟩ = n_k.

    Γ^(m,m) is the permanent-of-pairings (bosonic Wick) expansion over Γ^(1,1) = diag(n);
    all Γ^(m,n) with m != n vanish.

    Raises:
        InvalidInputError: A negative occupation or a length mismatch.
    """
    occupations = np.asarray(occupations, dtype=float)
    if occupations.shape != (grid.mode_count,):
        raise InvalidInputError(f"occupations need {grid.mode_count} entries, got {occupations.size}")
    if np.any(occupations < 0):
        raise InvalidInputError("Occupations must be non-negative")
    state = HierarchyState(grid, K)
    M = grid.mode_count
    cumulants = Cumulants(
        first=np.zeros(M, dtype=complex),
        pair_11=np.diag(occupations).astype(complex),
        pair_20=np.zeros((M, M), dtype=complex),
    )
    for m, n in state.orders():
        if m == n and m > 0:
            state.set_gamma(m, n, cumulant_expansion(cumulants, m, n))
    return state


# ----------------------------------------------------------------------
# Comparison
# ----------------------------------------------------------------------

def distance(a: HierarchyState, b: HierarchyState, order_cap: int) -> float:
    """
    Max entrywise difference over all orders with m + n <= order_cap - 1.

    Raises:
        IncompatibleStatesError: Grids differ or either state stores fewer orders than the cap.
    """
    if a.grid != b.grid:
        raise IncompatibleStatesError("States are defined on different grids")
    if a.K < order_cap or b.K < order_cap:
        raise IncompatibleStatesError(f"order_cap {order_cap} exceeds stored orders (K={a.K}, {b.K})")
    worst = 0.0
    for m, n in stored_orders(order_cap):
        diff = np.abs(a.get_gamma(m, n).data - b.get_gamma(m, n).data)
        worst = max(worst, float(np.max(diff)) if diff.size else 0.0)
    return worst


def order_errors(a: HierarchyState, b: HierarchyState, order_cap: int) -> Dict[Order, float]:
    """Per-order max-norm differences (stored orders m >= n only)."""
    if a.grid != b.grid:
        raise IncompatibleStatesError("States are defined on different grids")
    return {
        (m, n): float(np.max(np.abs(a.get_gamma(m, n).data - b.get_gamma(m, n).data)))
        for m, n in stored_orders(order_cap)
    }
