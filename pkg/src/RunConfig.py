"""
RunConfig - Validated run configuration.

A run configuration is one JSON document with the sections ``model``,
``initial_state``, ``closure``, ``integrator``, ``observables``, ``oracle`` and
``output_dir``. ``parse_config`` resolves every default and ``RunConfig.to_dict``
echoes the normalized document, so parse(echo(parse(text))) == parse(text).

Example:
    Minimal free-theory configuration::

        {
            "model": {"grid": {"dims": 1, "points_per_dim": 4}, "mass": 1.0},
            "initial_state": {"variant": "vacuum"},
            "closure": {"variant": "truncate", "N": 3}
        }
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from src.Evolution import ClosureSpec, ClosureVariant, IntegratorSpec
from src.HierarchyErrors import ClosureMisuseError, ConfigError, InvalidInputError
from src.LadderAlgebra import LadderPolynomial, annihilate, create
from src.Model import InteractionKernel, KernelVariant, ModeGrid, ModelSpec
from src.Observables import SpatialGrid

INITIAL_VARIANTS = ("vacuum", "coherent", "gaussian", "fock")
OBSERVABLE_OUTPUTS = ("momentum_density", "number_density", "energy_density")

logger = logging.getLogger(__name__)


# ----------------------------------------------------------------------
# Field readers
# ----------------------------------------------------------------------

def _section(document: Mapping[str, Any], key: str, path: str = "") -> Mapping[str, Any]:
    value = document.get(key, {})
    full = f"{path}.{key}" if path else key
    if value is None:
        return {}
    if not isinstance(value, Mapping):
        raise ConfigError(full, "expected an object")
    return value


def _reject_unknown(section: Mapping[str, Any], allowed: Sequence[str], path: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown key")


def _number(section: Mapping[str, Any], key: str, path: str, default: Optional[float] = None) -> float:
    value = section.get(key, default)
    if value is None:
        raise ConfigError(f"{path}.{key}", "required number is missing")
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigError(f"{path}.{key}", f"expected a finite number, got {value!r}")
    return float(value)


def _integer(section: Mapping[str, Any], key: str, path: str, default: Optional[int] = None) -> int:
    value = section.get(key, default)
    if value is None:
        raise ConfigError(f"{path}.{key}", "required integer is missing")
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path}.{key}", f"expected an integer, got {value!r}")
    return value


def _complex(value: Any, path: str) -> complex:
    """Accepts a real number or a [re, im] pair."""
    if isinstance(value, bool):
        raise ConfigError(path, f"expected a number or [re, im], got {value!r}")
    if isinstance(value, (int, float)):
        return complex(value)
    if isinstance(value, Sequence) and not isinstance(value, str) and len(value) == 2:
        re, im = value
        if all(isinstance(part, (int, float)) and not isinstance(part, bool) for part in (re, im)):
            return complex(re, im)
    raise ConfigError(path, f"expected a number or [re, im], got {value!r}")


def _complex_pair(value: complex) -> List[float]:
    return [value.real, value.imag]


def _list(section: Mapping[str, Any], key: str, path: str) -> List[Any]:
    value = section.get(key)
    if not isinstance(value, list):
        raise ConfigError(f"{path}.{key}", "expected a list")
    return value


# ----------------------------------------------------------------------
# Sections
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class GridSection:
    dims: int = 1
    points_per_dim: int = 1
    p_max: float = 1.0
    n_species: int = 1

    def to_grid(self) -> ModeGrid:
        return ModeGrid(self.dims, self.points_per_dim, self.p_max, self.n_species)


@dataclass(frozen=True)
class KernelSection:
    variant: str = "constant"
    value: float = 1.0
    profile: Tuple[float, ...] = ()
    table: Tuple[Tuple[float, ...], ...] = ()

    def to_kernel(self) -> InteractionKernel:
        return InteractionKernel(KernelVariant(self.variant), self.value, self.profile, self.table)

    def to_dict(self) -> Dict[str, Any]:
        record: Dict[str, Any] = {"variant": self.variant}
        if self.variant == "constant":
            record["value"] = self.value
        elif self.variant == "separable":
            record["profile"] = list(self.profile)
        else:
            record["table"] = [list(row) for row in self.table]
        return record


@dataclass(frozen=True)
class ExtraTerm:
    """One normal-ordered ladder term c · b†_{create…} b_{annihilate…}, optionally with its adjoint."""

    create: Tuple[int, ...]
    annihilate: Tuple[int, ...]
    coefficient: complex
    hermitian_conjugate: bool = True

    def to_polynomial(self) -> LadderPolynomial:
        word = tuple(create(k) for k in self.create) + tuple(annihilate(k) for k in self.annihilate)
        term = LadderPolynomial({word: self.coefficient})
        return term + term.adjoint() if self.hermitian_conjugate else term

    def to_dict(self) -> Dict[str, Any]:
        return {
            "create": list(self.create),
            "annihilate": list(self.annihilate),
            "coefficient": _complex_pair(self.coefficient),
            "hermitian_conjugate": self.hermitian_conjugate,
        }


@dataclass(frozen=True)
class ModelSection:
    grid: GridSection = field(default_factory=GridSection)
    mass: float = 1.0
    kernel: Optional[KernelSection] = None
    coupling: float = 0.0
    extra_terms: Tuple[ExtraTerm, ...] = ()

    def to_model(self) -> ModelSpec:
        extra = None
        if self.extra_terms:
            extra = LadderPolynomial()
            for term in self.extra_terms:
                extra = extra + term.to_polynomial()
        return ModelSpec(
            grid=self.grid.to_grid(),
            mass=self.mass,
            kernel=self.kernel.to_kernel() if self.kernel is not None else None,
            coupling=self.coupling,
            extra_terms=extra,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "grid": {
                "dims": self.grid.dims,
                "points_per_dim": self.grid.points_per_dim,
                "p_max": self.grid.p_max,
                "n_species": self.grid.n_species,
            },
            "mass": self.mass,
            "kernel": self.kernel.to_dict() if self.kernel is not None else None,
            "coupling": self.coupling,
            "extra_terms": [term.to_dict() for term in self.extra_terms],
        }


@dataclass(frozen=True)
class InitialStateSection:
    variant: str = "vacuum"
    alpha: Tuple[complex, ...] = ()
    occupations: Tuple[float, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        record: Dict[str, Any] = {"variant": self.variant}
        if self.variant == "coherent":
            record["alpha"] = [_complex_pair(a) for a in self.alpha]
        elif self.variant == "gaussian":
            record["occupations"] = list(self.occupations)
        elif self.variant == "fock":
            record["occupations"] = [int(n) for n in self.occupations]
        return record


@dataclass(frozen=True)
class ClosureSection:
    variant: str = "truncate"
    N: int = 3

    def to_spec(self) -> ClosureSpec:
        return ClosureSpec(ClosureVariant(self.variant), self.N)


@dataclass(frozen=True)
class IntegratorSection:
    method: str = "rk4"
    dt: float = 1e-3
    t_final: float = 1.0
    sample_every: int = 100

    def to_spec(self) -> IntegratorSpec:
        return IntegratorSpec(self.method, self.dt, self.t_final, self.sample_every)


@dataclass(frozen=True)
class ObservablesSection:
    """
    Attributes:
        outputs: Observables to write.
        spatial_points_per_dim: Position lattice size; None selects the dual lattice of the grid.
        x_max: Half-extent of the position lattice; None selects the dual lattice.
    """

    outputs: Tuple[str, ...] = OBSERVABLE_OUTPUTS
    spatial_points_per_dim: Optional[int] = None
    x_max: Optional[float] = None

    def spatial_grid(self, grid: ModeGrid) -> SpatialGrid:
        dual = SpatialGrid.dual_of(grid)
        return SpatialGrid(
            dims=grid.dims,
            points_per_dim=self.spatial_points_per_dim or dual.points_per_dim,
            x_max=self.x_max if self.x_max is not None else dual.x_max,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "outputs": list(self.outputs),
            "spatial_grid": {"points_per_dim": self.spatial_points_per_dim, "x_max": self.x_max},
        }


@dataclass(frozen=True)
class OracleSection:
    enabled: bool = False
    n_max: int = 4
    total_cap: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        return {"enabled": self.enabled, "n_max": self.n_max, "total_cap": self.total_cap}


@dataclass(frozen=True)
class RunConfig:
    """Fully validated run configuration with every default resolved."""

    model: ModelSection
    initial_state: InitialStateSection
    closure: ClosureSection
    integrator: IntegratorSection = field(default_factory=IntegratorSection)
    observables: ObservablesSection = field(default_factory=ObservablesSection)
    oracle: OracleSection = field(default_factory=OracleSection)
    output_dir: str = "output"

    @property
    def K(self) -> int:
        """The hierarchy stores exactly the orders retained by the closure."""
        return self.closure.N

    def model_spec(self) -> ModelSpec:
        return self.model.to_model()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model": self.model.to_dict(),
            "initial_state": self.initial_state.to_dict(),
            "closure": {"variant": self.closure.variant, "N": self.closure.N},
            "integrator": {
                "method": self.integrator.method,
                "dt": self.integrator.dt,
                "t_final": self.integrator.t_final,
                "sample_every": self.integrator.sample_every,
            },
            "observables": self.observables.to_dict(),
            "oracle": self.oracle.to_dict(),
            "output_dir": self.output_dir,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# ----------------------------------------------------------------------
# Parsing
# ----------------------------------------------------------------------

def _parse_grid(section: Mapping[str, Any]) -> GridSection:
    path = "model.grid"
    _reject_unknown(section, ("dims", "points_per_dim", "p_max", "n_species"), path)
    grid = GridSection(
        dims=_integer(section, "dims", path, 1),
        points_per_dim=_integer(section, "points_per_dim", path, 1),
        p_max=_number(section, "p_max", path, 1.0),
        n_species=_integer(section, "n_species", path, 1),
    )
    if grid.dims not in (1, 2, 3):
        raise ConfigError(f"{path}.dims", "must be 1, 2 or 3")
    if grid.points_per_dim < 1:
        raise ConfigError(f"{path}.points_per_dim", "must be at least 1")
    if grid.n_species < 1:
        raise ConfigError(f"{path}.n_species", "must be at least 1")
    if not grid.p_max > 0:
        raise ConfigError(f"{path}.p_max", "must be positive")
    return grid


def _parse_kernel(section: Optional[Mapping[str, Any]]) -> Optional[KernelSection]:
    if section is None:
        return None
    path = "model.kernel"
    if not isinstance(section, Mapping):
        raise ConfigError(path, "expected an object or null")
    _reject_unknown(section, ("variant", "value", "profile", "table"), path)
    variant = section.get("variant", "constant")
    if variant not in [v.value for v in KernelVariant]:
        raise ConfigError(f"{path}.variant", f"unknown kernel variant {variant!r}")
    if variant == "constant":
        return KernelSection(variant, value=_number(section, "value", path, 1.0))
    if variant == "separable":
        profile = _list(section, "profile", path)
        return KernelSection(variant, profile=tuple(
            _number({"v": v}, "v", f"{path}.profile[{i}]") for i, v in enumerate(profile)
        ))
    rows = _list(section, "table", path)
    table = []
    for i, row in enumerate(rows):
        if not isinstance(row, list):
            raise ConfigError(f"{path}.table[{i}]", "expected a list")
        table.append(tuple(_number({"v": v}, "v", f"{path}.table[{i}][{j}]") for j, v in enumerate(row)))
    return KernelSection(variant, table=tuple(table))


def _parse_extra_terms(entries: Any, n_modes: int) -> Tuple[ExtraTerm, ...]:
    path = "model.extra_terms"
    if entries is None:
        return ()
    if not isinstance(entries, list):
        raise ConfigError(path, "expected a list")
    terms = []
    for i, entry in enumerate(entries):
        entry_path = f"{path}[{i}]"
        if not isinstance(entry, Mapping):
            raise ConfigError(entry_path, "expected an object")
        _reject_unknown(entry, ("create", "annihilate", "coefficient", "hermitian_conjugate"), entry_path)
        modes = {}
        for key in ("create", "annihilate"):
            values = entry.get(key, [])
            if not isinstance(values, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in values):
                raise ConfigError(f"{entry_path}.{key}", "expected a list of mode indices")
            if any(not 0 <= v < n_modes for v in values):
                raise ConfigError(f"{entry_path}.{key}", f"mode indices must lie in [0, {n_modes})")
            modes[key] = tuple(values)
        if not modes["create"] and not modes["annihilate"]:
            raise ConfigError(entry_path, "a term needs at least one ladder operator")
        if "coefficient" not in entry:
            raise ConfigError(f"{entry_path}.coefficient", "required value is missing")
        hc = entry.get("hermitian_conjugate", True)
        if not isinstance(hc, bool):
            raise ConfigError(f"{entry_path}.hermitian_conjugate", "expected true or false")
        terms.append(ExtraTerm(
            create=modes["create"],
            annihilate=modes["annihilate"],
            coefficient=_complex(entry["coefficient"], f"{entry_path}.coefficient"),
            hermitian_conjugate=hc,
        ))
    return tuple(terms)


def _parse_model(document: Mapping[str, Any]) -> ModelSection:
    section = _section(document, "model")
    _reject_unknown(section, ("grid", "mass", "kernel", "coupling", "extra_terms"), "model")
    grid = _parse_grid(_section(section, "grid", "model"))
    n_modes = grid.points_per_dim ** grid.dims * grid.n_species
    return ModelSection(
        grid=grid,
        mass=_number(section, "mass", "model", 1.0),
        kernel=_parse_kernel(section.get("kernel")),
        coupling=_number(section, "coupling", "model", 0.0),
        extra_terms=_parse_extra_terms(section.get("extra_terms"), n_modes),
    )


def _parse_initial_state(document: Mapping[str, Any], n_modes: int) -> InitialStateSection:
    path = "initial_state"
    section = _section(document, path)
    _reject_unknown(section, ("variant", "alpha", "occupations"), path)
    variant = section.get("variant", "vacuum")
    if variant not in INITIAL_VARIANTS:
        raise ConfigError(f"{path}.variant", f"expected one of {INITIAL_VARIANTS}, got {variant!r}")
    if variant == "vacuum":
        return InitialStateSection(variant)
    if variant == "coherent":
        alpha = _list(section, "alpha", path)
        if len(alpha) != n_modes:
            raise ConfigError(f"{path}.alpha", f"expected {n_modes} entries, got {len(alpha)}")
        return InitialStateSection(variant, alpha=tuple(
            _complex(a, f"{path}.alpha[{i}]") for i, a in enumerate(alpha)
        ))
    occupations = _list(section, "occupations", path)
    if len(occupations) != n_modes:
        raise ConfigError(f"{path}.occupations", f"expected {n_modes} entries, got {len(occupations)}")
    values = []
    for i, value in enumerate(occupations):
        entry = f"{path}.occupations[{i}]"
        if variant == "fock":
            number = _integer({"v": value}, "v", entry)
        else:
            number = _number({"v": value}, "v", entry)
        if number < 0:
            raise ConfigError(entry, "occupations must be non-negative")
        values.append(float(number))
    return InitialStateSection(variant, occupations=tuple(values))


def _parse_closure(document: Mapping[str, Any]) -> ClosureSection:
    path = "closure"
    section = _section(document, path)
    _reject_unknown(section, ("variant", "N"), path)
    variant = section.get("variant", "truncate")
    if variant not in [v.value for v in ClosureVariant]:
        raise ConfigError(f"{path}.variant", f"unknown closure {variant!r}")
    closure = ClosureSection(variant, _integer(section, "N", path, 3))
    try:
        closure.to_spec()
    except ClosureMisuseError as exc:
        raise ConfigError(f"{path}.N", str(exc)) from exc
    return closure


def _parse_integrator(document: Mapping[str, Any]) -> IntegratorSection:
    path = "integrator"
    section = _section(document, path)
    _reject_unknown(section, ("method", "dt", "t_final", "sample_every"), path)
    integrator = IntegratorSection(
        method=section.get("method", "rk4"),
        dt=_number(section, "dt", path, 1e-3),
        t_final=_number(section, "t_final", path, 1.0),
        sample_every=_integer(section, "sample_every", path, 100),
    )
    try:
        integrator.to_spec()
    except InvalidInputError as exc:
        raise ConfigError(path, str(exc)) from exc
    return integrator


def _energy_density_blocker(closure: ClosureSection, model: ModelSpec) -> Optional[str]:
    """Reason energy_density cannot be evaluated for this run, or None."""
    if closure.N < 3 and closure.variant == ClosureVariant.TRUNCATE.value:
        return "energy_density needs Gamma^(2,0): use closure N >= 3 or the cluster closure"
    if not model.has_positive_energies():
        return "energy_density needs strictly positive mode energies; the massless grid has a p = 0 mode"
    return None


def _parse_observables(document: Mapping[str, Any], closure: ClosureSection, model: ModelSpec) -> ObservablesSection:
    path = "observables"
    section = _section(document, path)
    _reject_unknown(section, ("outputs", "spatial_grid"), path)
    blocker = _energy_density_blocker(closure, model)
    if "outputs" in section:
        outputs = _list(section, "outputs", path)
        for i, name in enumerate(outputs):
            if name not in OBSERVABLE_OUTPUTS:
                raise ConfigError(f"{path}.outputs[{i}]", f"unknown observable {name!r}")
        if "energy_density" in outputs and blocker is not None:
            raise ConfigError(f"{path}.outputs", blocker)
        outputs = tuple(outputs)
    elif blocker is not None:
        logger.info("Default outputs omit energy_density: %s", blocker)
        outputs = tuple(name for name in OBSERVABLE_OUTPUTS if name != "energy_density")
    else:
        outputs = OBSERVABLE_OUTPUTS
    spatial = _section(section, "spatial_grid", path)
    _reject_unknown(spatial, ("points_per_dim", "x_max"), f"{path}.spatial_grid")
    points = spatial.get("points_per_dim")
    if points is not None:
        points = _integer(spatial, "points_per_dim", f"{path}.spatial_grid")
        if points < 1:
            raise ConfigError(f"{path}.spatial_grid.points_per_dim", "must be at least 1")
    x_max = spatial.get("x_max")
    if x_max is not None:
        x_max = _number(spatial, "x_max", f"{path}.spatial_grid")
        if not x_max > 0:
            raise ConfigError(f"{path}.spatial_grid.x_max", "must be positive")
    return ObservablesSection(outputs=outputs, spatial_points_per_dim=points, x_max=x_max)


def _parse_oracle(document: Mapping[str, Any]) -> OracleSection:
    path = "oracle"
    section = _section(document, path)
    _reject_unknown(section, ("enabled", "n_max", "total_cap"), path)
    enabled = section.get("enabled", False)
    if not isinstance(enabled, bool):
        raise ConfigError(f"{path}.enabled", "expected true or false")
    n_max = _integer(section, "n_max", path, 4)
    if n_max < 1:
        raise ConfigError(f"{path}.n_max", "must be at least 1")
    total_cap = section.get("total_cap")
    if total_cap is not None:
        total_cap = _integer(section, "total_cap", path)
        if total_cap < 1:
            raise ConfigError(f"{path}.total_cap", "must be at least 1")
    return OracleSection(enabled, n_max, total_cap)


def parse_config(text: str) -> RunConfig:
    """
    Parse and validate a run configuration.

    Args:
        text: JSON document.

    Returns:
        RunConfig with all defaults resolved.

    Raises:
        ConfigError: Malformed JSON or a schema violation (the error names the JSON path).
        InvalidModelError: A physics violation such as a negative mass or an asymmetric kernel.
    """
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("$", f"invalid JSON: {exc}") from exc
    if not isinstance(document, Mapping):
        raise ConfigError("$", "expected a JSON object")
    _reject_unknown(
        document,
        ("model", "initial_state", "closure", "integrator", "observables", "oracle", "output_dir"),
        "",
    )

    model = _parse_model(document)
    # Physics validation (mass, kernel symmetry, extra-term hermiticity is checked at assembly)
    model_spec = model.to_model()
    n_modes = model.grid.points_per_dim ** model.grid.dims * model.grid.n_species

    closure = _parse_closure(document)
    initial_state = _parse_initial_state(document, n_modes)
    oracle = _parse_oracle(document)
    if initial_state.variant == "fock" and max(initial_state.occupations, default=0) > oracle.n_max:
        raise ConfigError("initial_state.occupations", f"occupations exceed oracle.n_max={oracle.n_max}")

    output_dir = document.get("output_dir", "output")
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError("output_dir", "expected a non-empty string")

    return RunConfig(
        model=model,
        initial_state=initial_state,
        closure=closure,
        integrator=_parse_integrator(document),
        observables=_parse_observables(document, closure, model_spec),
        oracle=oracle,
        output_dir=output_dir,
    )


def load_config(path: str | Path) -> RunConfig:
    """Read and parse a configuration file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("$", f"cannot read {path}: {exc}") from exc
    return parse_config(text)
