"""
Exception hierarchy for the hierarchy simulator.

Every error raised by the library derives from HierarchyError. The CLI maps
each family to an exit code (see hierarchy_config.constants.ExitCode).
"""

from typing import Optional, Sequence, Tuple


class HierarchyError(Exception):
    pass


class ConfigError(HierarchyError):
    """
    Raised when a run configuration violates the schema.

    Attributes:
        path: Dotted JSON path of the offending entry (e.g. ``initial_state.alpha``).
    """

    def __init__(self, path: str, message: str) -> None:
        self.path = path
        super().__init__(f"{path}: {message}")


class InvalidModelError(HierarchyError):
    pass


class UnsupportedInteractionError(InvalidModelError):
    # Hamiltonian pieces above quartic order
    pass


class InvalidInputError(HierarchyError):
    pass


class OutOfOrderError(HierarchyError):
    pass


class ClosureMisuseError(HierarchyError):
    pass


class IncompatibleStatesError(HierarchyError):
    pass


class ProgramMissingError(HierarchyError):
    pass


class NumericalBreakdownError(HierarchyError):
    pass


class DivergenceError(NumericalBreakdownError):
    """
    Raised when the integrated hierarchy produces non-finite values.

    Attributes:
        time: Simulation time at which the blow-up was detected.
        order: The (m, n) tensor that first became non-finite.
        trajectory: Samples recorded before the failure (may be empty).
    """

    def __init__(self, time: float, order: Tuple[int, int], trajectory: Optional[Sequence] = None) -> None:
        self.time = time
        self.order = order
        self.trajectory = list(trajectory) if trajectory is not None else []
        super().__init__(f"Non-finite Gamma^{order} at t={time:.6g}")


class CutoffInsufficientError(HierarchyError):
    """
    Raised when the truncated Fock space cannot hold the oracle state.

    Attributes:
        boundary_weight: Probability weight found on cutoff-boundary basis states.
    """

    def __init__(self, boundary_weight: float, message: str = "") -> None:
        self.boundary_weight = boundary_weight
        detail = message or "occupation cutoff too small"
        super().__init__(f"{detail} (boundary weight {boundary_weight:.3e})")
