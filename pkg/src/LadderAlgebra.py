"""
LadderAlgebra - Symbolic algebra of bosonic ladder operators.

This module provides normal ordering, commutators and the compilation of
hierarchy right-hand sides into contraction programs. Modes are flat integer
indices (grid point x species); operators obey [b_j, b†_k] = δ_jk.

Example:
    Compile the equation of motion for Γ^(1,0) under a free Hamiltonian::

        from src.LadderAlgebra import LadderPolynomial, create, annihilate, compile_rhs

        H = LadderPolynomial({(create(0), annihilate(0)): 1.0})
        program = compile_rhs(H, 1, 0)
        print(program.to_dict())
"""

from __future__ import annotations

import itertools
import logging
import math
import string
from dataclasses import dataclass
from enum import IntEnum
from functools import lru_cache
from typing import (
    Callable,
    Dict,
    Iterable,
    Iterator,
    List,
    Mapping,
    Optional,
    Sequence,
    Set,
    Tuple,
    Union,
    TYPE_CHECKING,
)

import numpy as np

from src.ConfigLoader import config
from src.HierarchyErrors import (
    InvalidInputError,
    InvalidModelError,
    ProgramMissingError,
    UnsupportedInteractionError,
)

# Import ModelSpec for type checking only (Model imports this module)
if TYPE_CHECKING:
    from src.Model import ModelSpec

logger = logging.getLogger(__name__)

MAX_HAMILTONIAN_DEGREE = 4


class OpKind(IntEnum):
    """Ladder operator kind. CREATE sorts before ANNIHILATE in normal form."""

    CREATE = 0
    ANNIHILATE = 1


@dataclass(frozen=True, order=True)
class LadderOp:
    """A single creation or annihilation operator on one mode."""

    kind: OpKind
    mode: int

    def adjoint(self) -> "LadderOp":
        flipped = OpKind.ANNIHILATE if self.kind == OpKind.CREATE else OpKind.CREATE
        return LadderOp(flipped, self.mode)

    def __str__(self) -> str:
        return f"b†_{self.mode}" if self.kind == OpKind.CREATE else f"b_{self.mode}"


Word = Tuple[LadderOp, ...]
Scalar = Union[int, float, complex]


def create(mode: int) -> LadderOp:
    return LadderOp(OpKind.CREATE, mode)


def annihilate(mode: int) -> LadderOp:
    return LadderOp(OpKind.ANNIHILATE, mode)


def word_shape(word: Word) -> Tuple[int, int]:
    """Return (number of creators, number of annihilators) of a word."""
    creators = sum(1 for op in word if op.kind == OpKind.CREATE)
    return creators, len(word) - creators


@dataclass(frozen=True)
class Monomial:
    """A coefficient times an ordered product of ladder operators."""

    coefficient: complex
    factors: Word

    @property
    def degree(self) -> int:
        return len(self.factors)

    def is_normal(self) -> bool:
        return tuple(sorted(self.factors)) == self.factors

    def __str__(self) -> str:
        ops = " ".join(str(op) for op in self.factors) or "1"
        return f"{self.coefficient:.6g}·{ops}"


class LadderPolynomial:
    """
    Finite linear combination of ladder-operator words with complex coefficients.

    Terms are keyed by their factor sequence; identical sequences are merged and
    coefficients below the dedup threshold are dropped. The stored words are not
    reordered, so a polynomial can hold raw products; use ``normal_order`` to obtain
    the canonical form.

    Args:
        terms: Mapping from word to coefficient, or an iterable of (word, coefficient) pairs.
        threshold: Dedup threshold; defaults to ``numerics.dedup_threshold`` from system config.
    """

    __slots__ = ("_terms",)

    def __init__(
        self,
        terms: Optional[Union[Mapping[Word, Scalar], Iterable[Tuple[Word, Scalar]]]] = None,
        threshold: Optional[float] = None,
    ) -> None:
        if threshold is None:
            threshold = config.get_dedup_threshold()
        merged: Dict[Word, complex] = {}
        if terms is not None:
            items = terms.items() if isinstance(terms, Mapping) else terms
            for word, coefficient in items:
                key = tuple(word)
                merged[key] = merged.get(key, 0j) + complex(coefficient)
        self._terms: Dict[Word, complex] = {w: c for w, c in merged.items() if abs(c) >= threshold}

    # ------------------------------------------------------------------
    # Constructors
    # ------------------------------------------------------------------
    @classmethod
    def constant(cls, value: Scalar) -> "LadderPolynomial":
        return cls({(): value})

    @classmethod
    def from_monomials(cls, monomials: Iterable[Monomial]) -> "LadderPolynomial":
        return cls((m.factors, m.coefficient) for m in monomials)

    @classmethod
    def number_operator(cls, n_modes: int) -> "LadderPolynomial":
        """Σ_k b†_k b_k over all modes."""
        return cls({(create(k), annihilate(k)): 1.0 for k in range(n_modes)})

    # ------------------------------------------------------------------
    # Inspection
    # ------------------------------------------------------------------
    @property
    def terms(self) -> Dict[Word, complex]:
        return dict(self._terms)

    @property
    def degree(self) -> int:
        return max((len(word) for word in self._terms), default=0)

    def is_zero(self) -> bool:
        return not self._terms

    def monomials(self) -> List[Monomial]:
        """Terms in canonical order: by degree, then lexicographic (kind, mode)."""
        ordered = sorted(self._terms.items(), key=lambda item: (len(item[0]), item[0]))
        return [Monomial(coefficient, word) for word, coefficient in ordered]

    def coefficient(self, word: Sequence[LadderOp]) -> complex:
        return self._terms.get(tuple(word), 0j)

    def max_mode(self) -> int:
        return max((op.mode for word in self._terms for op in word), default=-1)

    def shapes(self) -> Set[Tuple[int, int]]:
        """(creators, annihilators) shapes of the non-constant terms."""
        return {word_shape(word) for word in self._terms if word}

    def is_normal_ordered(self) -> bool:
        return all(tuple(sorted(word)) == word for word in self._terms)

    def validate_modes(self, n_modes: int) -> None:
        for word in self._terms:
            for op in word:
                if op.mode < 0 or op.mode >= n_modes:
                    raise InvalidModelError(f"Mode index {op.mode} out of range for {n_modes} modes")

    def adjoint(self) -> "LadderPolynomial":
        return LadderPolynomial(
            (tuple(op.adjoint() for op in reversed(word)), coefficient.conjugate())
            for word, coefficient in self._terms.items()
        )

    def is_hermitian(self, tolerance: Optional[float] = None) -> bool:
        """
        Check the hermitian-flag criterion on the normal-ordered coefficients.

        Every term with factors F and coefficient c must be matched by the term with
        reversed, adjointed factors carrying conj(c).
        """
        if tolerance is None:
            tolerance = config.get_hermiticity_tolerance()
        normal = normal_order(self)
        mirrored = normal_order(self.adjoint())
        return normal.allclose(mirrored, tolerance)

    def allclose(self, other: "LadderPolynomial", atol: float = 1e-10) -> bool:
        words = set(self._terms) | set(other._terms)
        return all(abs(self.coefficient(w) - other.coefficient(w)) <= atol for w in words)

    # ------------------------------------------------------------------
    # Arithmetic
    # ------------------------------------------------------------------
    def __add__(self, other: Union["LadderPolynomial", Scalar]) -> "LadderPolynomial":
        if not isinstance(other, LadderPolynomial):
            other = LadderPolynomial.constant(other)
        return LadderPolynomial(itertools.chain(self._terms.items(), other._terms.items()))

    __radd__ = __add__

    def __neg__(self) -> "LadderPolynomial":
        return LadderPolynomial({w: -c for w, c in self._terms.items()})

    def __sub__(self, other: Union["LadderPolynomial", Scalar]) -> "LadderPolynomial":
        if not isinstance(other, LadderPolynomial):
            other = LadderPolynomial.constant(other)
        return self + (-other)

    def __rsub__(self, other: Scalar) -> "LadderPolynomial":
        return LadderPolynomial.constant(other) - self

    def __mul__(self, other: Union["LadderPolynomial", Scalar]) -> "LadderPolynomial":
        if isinstance(other, LadderPolynomial):
            # Raw concatenation; normal_order() puts the product in canonical form
            return LadderPolynomial(
                (w1 + w2, c1 * c2)
                for w1, c1 in self._terms.items()
                for w2, c2 in other._terms.items()
            )
        return LadderPolynomial({w: c * other for w, c in self._terms.items()})

    def __rmul__(self, other: Scalar) -> "LadderPolynomial":
        return LadderPolynomial({w: other * c for w, c in self._terms.items()})

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LadderPolynomial):
            return NotImplemented
        return self._terms == other._terms

    def __len__(self) -> int:
        return len(self._terms)

    def __iter__(self) -> Iterator[Monomial]:
        return iter(self.monomials())

    def __repr__(self) -> str:
        return f"LadderPolynomial({self})"

    def __str__(self) -> str:
        if not self._terms:
            return "0"
        return " + ".join(str(m) for m in self.monomials())


# ----------------------------------------------------------------------
# Normal ordering and commutators
# ----------------------------------------------------------------------

@lru_cache(maxsize=1 << 16)
def _normal_order_word(word: Word) -> Tuple[Tuple[Word, int], ...]:
    """Expand a word into normal-ordered words with integer coefficients."""
    for i in range(len(word) - 1):
        left, right = word[i], word[i + 1]
        if left.kind == OpKind.ANNIHILATE and right.kind == OpKind.CREATE:
            # b_j b†_k = b†_k b_j + δ_jk
            swapped = word[:i] + (right, left) + word[i + 2:]
            result: Dict[Word, int] = dict(_normal_order_word(swapped))
            if left.mode == right.mode:
                for contracted, count in _normal_order_word(word[:i] + word[i + 2:]):
                    result[contracted] = result.get(contracted, 0) + count
            return tuple((w, c) for w, c in result.items() if c != 0)
    # Creators already precede annihilators; like kinds commute
    return ((tuple(sorted(word)), 1),)


def normal_order(poly: LadderPolynomial, n_modes: Optional[int] = None) -> LadderPolynomial:
    """
    Rewrite a polynomial with all creators left of all annihilators.

    Args:
        poly: Polynomial in any factor order.
        n_modes: When given, every mode index is checked against it.

    Returns:
        Equal operator in canonical normal form (mode indices non-decreasing per block).

    Raises:
        InvalidModelError: A mode index is negative or not below ``n_modes``.
    """
    if n_modes is not None:
        poly.validate_modes(n_modes)
    elif any(op.mode < 0 for word in poly.terms for op in word):
        raise InvalidModelError("Negative mode index")

    expanded: List[Tuple[Word, complex]] = []
    for word, coefficient in poly.terms.items():
        for normal_word, count in _normal_order_word(word):
            expanded.append((normal_word, coefficient * count))
    return LadderPolynomial(expanded)


def commutator(
    a: LadderPolynomial, b: LadderPolynomial, n_modes: Optional[int] = None
) -> LadderPolynomial:
    """Return the normal-ordered commutator [a, b] = ab - ba (no factors of i applied)."""
    if n_modes is not None:
        a.validate_modes(n_modes)
        b.validate_modes(n_modes)
    return normal_order(a * b - b * a)


def canonical_degree(poly: LadderPolynomial) -> int:
    """Filtration degree of a normal-ordered polynomial (0 for scalars)."""
    return poly.degree


# ----------------------------------------------------------------------
# Hamiltonian coefficient tensors
# ----------------------------------------------------------------------

def kernel_id(creators: int, annihilators: int) -> str:
    return f"H[{creators},{annihilators}]"


def parse_kernel_id(identifier: str) -> Tuple[int, int]:
    try:
        inner = identifier[identifier.index("[") + 1:identifier.index("]")]
        creators, annihilators = (int(part) for part in inner.split(","))
    except ValueError as exc:
        raise InvalidInputError(f"Malformed kernel identifier '{identifier}'") from exc
    return creators, annihilators


def coefficient_tensors(H: LadderPolynomial, n_modes: int) -> Dict[str, np.ndarray]:
    """
    Split a Hamiltonian into dense coefficient tensors, one per (creators, annihilators) block.

    Each block satisfies H_block = Σ_{I,J} T[I; J] b†_I b_J with T symmetric under
    permutations of the creator axes and of the annihilator axes. Axes are ordered
    creators first, then annihilators. The constant part is stored under ``H[0,0]``.
    """
    normal = normal_order(H, n_modes)
    tensors: Dict[str, np.ndarray] = {}
    for word, coefficient in normal.terms.items():
        creators = tuple(op.mode for op in word if op.kind == OpKind.CREATE)
        annihilators = tuple(op.mode for op in word if op.kind == OpKind.ANNIHILATE)
        key = kernel_id(len(creators), len(annihilators))
        tensor = tensors.setdefault(key, np.zeros((n_modes,) * len(word), dtype=complex))
        create_perms = set(itertools.permutations(creators))
        annihilate_perms = set(itertools.permutations(annihilators))
        share = coefficient / (len(create_perms) * len(annihilate_perms))
        for pc in create_perms:
            for pa in annihilate_perms:
                tensor[pc + pa] += share
    return tensors


# ----------------------------------------------------------------------
# Contraction programs
# ----------------------------------------------------------------------

SourceProvider = Callable[[int, int], Optional[np.ndarray]]


def target_labels(m: int, n: int) -> Tuple[str, ...]:
    """Free-index labels of a Γ^(m,n) target: annihilator slots a*, then creator slots c*."""
    return tuple(f"a{i}" for i in range(m)) + tuple(f"c{j}" for j in range(n))


@dataclass(frozen=True)
class ContractionTerm:
    """
    One weighted contraction of a source Γ tensor with a Hamiltonian coefficient tensor.

    Labels ``a<i>``/``c<j>`` bind to the target's free annihilator/creator momenta,
    labels ``s<k>`` are summed. ``kernel_axes`` lists the coefficient-tensor axes
    (creators then annihilators); ``source_axes`` lists the Γ^(m',n') slots
    (annihilators then creators).
    """

    source: Tuple[int, int]
    kernel: str
    kernel_axes: Tuple[str, ...]
    source_axes: Tuple[str, ...]
    weight: complex

    @lru_cache(maxsize=None)
    def subscripts(self, output: Tuple[str, ...]) -> str:
        letters: Dict[str, str] = {}
        for label in itertools.chain(output, self.kernel_axes, self.source_axes):
            if label not in letters:
                letters[label] = string.ascii_letters[len(letters)]

        def word(labels: Sequence[str]) -> str:
            return "".join(letters[label] for label in labels)

        return f"{word(self.kernel_axes)},{word(self.source_axes)}->{word(output)}"

    def to_dict(self) -> Dict[str, object]:
        return {
            "source": list(self.source),
            "kernel": self.kernel,
            "wiring": [list(self.kernel_axes), list(self.source_axes)],
            "weight": [self.weight.real, self.weight.imag],
        }


@dataclass(frozen=True)
class ContractionProgram:
    """Compiled right-hand side of the Γ^(m,n) equation of motion."""

    target: Tuple[int, int]
    terms: Tuple[ContractionTerm, ...]

    @property
    def output_labels(self) -> Tuple[str, ...]:
        return target_labels(*self.target)

    def coupled_orders(self) -> List[Tuple[int, int]]:
        """Distinct source orders this equation reads, sorted."""
        return sorted({term.source for term in self.terms})

    def evaluate(self, kernels: Mapping[str, np.ndarray], source: SourceProvider, n_modes: int) -> np.ndarray:
        """
        Evaluate the program.

        Args:
            kernels: Coefficient tensors keyed by kernel identifier.
            source: Callable returning the dense Γ^(m',n') tensor for a source order,
                or None when that source is identically zero.
            n_modes: Mode count M.

        Returns:
            d/dt Γ^(m,n) as a dense tensor of shape (M,)*(m+n).
        """
        m, n = self.target
        result = np.zeros((n_modes,) * (m + n), dtype=complex)
        output = self.output_labels
        for term in self.terms:
            kernel = kernels.get(term.kernel)
            if kernel is None:
                raise ProgramMissingError(f"No coefficient tensor for kernel '{term.kernel}'")
            data = source(*term.source)
            if data is None:
                continue
            result += term.weight * np.einsum(term.subscripts(output), kernel, data)
        return result

    def to_dict(self) -> Dict[str, object]:
        return {
            "target": list(self.target),
            "coupled_orders": [list(order) for order in self.coupled_orders()],
            "terms": [term.to_dict() for term in self.terms],
        }


@lru_cache(maxsize=None)
def _block_terms(m: int, n: int, creators: int, annihilators: int) -> Tuple[ContractionTerm, ...]:
    """
    Contraction terms of -i Tr(ρ [X, H_block]) for X = b†^n b^m and one (c, a) block.

    Wick's theorem for the product of two normal-ordered words: XY keeps only
    contractions of X's annihilators with Y's creators, YX only contractions of Y's
    annihilators with X's creators; the uncontracted parts cancel in the commutator.
    """
    key = kernel_id(creators, annihilators)
    annih_labels = [f"a{i}" for i in range(m)]
    create_labels = [f"c{j}" for j in range(n)]
    terms: List[ContractionTerm] = []

    # X H: target annihilators meet kernel creators
    for k in range(1, min(m, creators) + 1):
        multiplicity = math.perm(creators, k)
        for chosen in itertools.combinations(range(m), k):
            summed = (f"s{i}" for i in itertools.count())
            kernel_create = [annih_labels[i] for i in chosen] + [next(summed) for _ in range(creators - k)]
            kernel_annih = [next(summed) for _ in range(annihilators)]
            source_annih = [annih_labels[i] for i in range(m) if i not in chosen] + kernel_annih
            source_create = create_labels + kernel_create[k:]
            terms.append(ContractionTerm(
                source=(len(source_annih), len(source_create)),
                kernel=key,
                kernel_axes=tuple(kernel_create + kernel_annih),
                source_axes=tuple(source_annih + source_create),
                weight=complex(-1j * multiplicity),
            ))

    # H X: kernel annihilators meet target creators (enters the commutator with a minus sign)
    for k in range(1, min(n, annihilators) + 1):
        multiplicity = math.perm(annihilators, k)
        for chosen in itertools.combinations(range(n), k):
            summed = (f"s{i}" for i in itertools.count())
            kernel_create = [next(summed) for _ in range(creators)]
            kernel_annih = [create_labels[j] for j in chosen] + [next(summed) for _ in range(annihilators - k)]
            source_annih = annih_labels + kernel_annih[k:]
            source_create = [create_labels[j] for j in range(n) if j not in chosen] + kernel_create
            terms.append(ContractionTerm(
                source=(len(source_annih), len(source_create)),
                kernel=key,
                kernel_axes=tuple(kernel_create + kernel_annih),
                source_axes=tuple(source_annih + source_create),
                weight=complex(1j * multiplicity),
            ))
    return tuple(terms)


def compile_rhs(
    H: LadderPolynomial, m: int, n: int, model: Optional["ModelSpec"] = None
) -> ContractionProgram:
    """
    Compile d/dt Γ^(m,n) = -i Tr(ρ [b†_{p'_1}…b†_{p'_n} b_{p_1}…b_{p_m}, H]) into a contraction program.

    The program depends only on the (creators, annihilators) shapes present in H;
    coefficient values are bound later through ``coefficient_tensors``.

    Args:
        H: Hermitian Hamiltonian of degree at most 4.
        m: Annihilation order of the target.
        n: Creation order of the target.
        model: Optional model; when given, mode indices are validated against it.

    Raises:
        InvalidInputError: m + n < 1 or a negative order.
        UnsupportedInteractionError: H has degree above 4.
        InvalidModelError: H is not hermitian or uses out-of-range modes.
    """
    if m < 0 or n < 0 or m + n < 1:
        raise InvalidInputError(f"Target order ({m},{n}) must satisfy m, n >= 0 and m + n >= 1")
    n_modes = model.grid.mode_count if model is not None else None
    normal = normal_order(H, n_modes)
    if normal.degree > MAX_HAMILTONIAN_DEGREE:
        raise UnsupportedInteractionError(
            f"Hamiltonian degree {normal.degree} exceeds {MAX_HAMILTONIAN_DEGREE}"
        )
    if not normal.is_hermitian():
        raise InvalidModelError("Hamiltonian is not hermitian")

    terms: List[ContractionTerm] = []
    for creators, annihilators in sorted(normal.shapes()):
        terms.extend(_block_terms(m, n, creators, annihilators))
    logger.debug("Compiled Gamma^(%d,%d): %d terms", m, n, len(terms))
    return ContractionProgram(target=(m, n), terms=tuple(terms))
