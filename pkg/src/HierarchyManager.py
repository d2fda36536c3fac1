"""
HierarchyManager - Orchestration of hierarchy runs.

This module provides the HierarchyManager class which drives the pipeline
behind every CLI subcommand: compiling contraction programs, preparing the
initial state, integrating, running the exact oracle and writing results.

The manager owns a PipelineStateMachine so the pipeline steps cannot run out
of order (integration before the programs are compiled, for example).

Example:
    Run a configuration and compare it against the oracle::

        from src.HierarchyManager import HierarchyManager
        from src.RunConfig import load_config

        manager = HierarchyManager(load_config("hierarchy_config/runs/free_coherent.json"))
        report = manager.run()
        print(report.files)
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
from statemachine import State, StateMachine

from hierarchy_config.constants import ExitCode, OutputFile
from src.Evolution import (
    CompiledHierarchy,
    ConservationReport,
    Trajectory,
    compile_hierarchy,
    integrate,
)
from src.FockOracle import (
    FockBasis,
    FockDensityMatrix,
    coherent_density,
    evolve_density,
    fock_density,
    gaussian_density,
    hierarchy_from_oracle,
    vacuum_density,
)
from src.HierarchyErrors import (
    ConfigError,
    CutoffInsufficientError,
    DivergenceError,
    HierarchyError,
    InvalidInputError,
    NumericalBreakdownError,
)
from src.HierarchyState import (
    HierarchyState,
    distance,
    init_coherent,
    init_gaussian,
    init_vacuum,
    order_errors,
)
from src.Model import GradedHamiltonian, ModelSpec, assemble_hamiltonian
from src.Observables import energy_density, momentum_density, number_density
from src.RunConfig import RunConfig

logger = logging.getLogger(__name__)


class PipelineStateMachine(StateMachine):
    """
    Sequencing of one pipeline: compile programs, prepare the initial state, integrate.

    Any step may fail; a finished or failed pipeline can be reset and rerun.
    """

    idle = State("Idle", initial=True)
    compiled = State("Compiled")
    prepared = State("Prepared")
    integrating = State("Integrating")
    finished = State("Finished")
    failed = State("Failed")

    compile_programs = idle.to(compiled)
    prepare = compiled.to(prepared)
    begin_integration = prepared.to(integrating)
    complete = integrating.to(finished)
    fail = idle.to(failed) | compiled.to(failed) | prepared.to(failed) | integrating.to(failed)
    reset = idle.to(idle) | compiled.to(idle) | prepared.to(idle) | finished.to(idle) | failed.to(idle)


@dataclass
class RunReport:
    """
    Outcome of one subcommand.

    Attributes:
        command: Subcommand name.
        exit_code: Process exit code for this outcome.
        output_dir: Directory the files were written to.
        files: Files written, in write order.
        details: Command-specific summary values.
    """

    command: str
    exit_code: ExitCode = ExitCode.SUCCESS
    output_dir: Optional[Path] = None
    files: List[Path] = field(default_factory=list)
    details: Dict[str, Any] = field(default_factory=dict)


def exit_code_for(error: BaseException) -> ExitCode:
    """Map an exception raised by the pipeline to the CLI exit code."""
    if isinstance(error, CutoffInsufficientError):
        return ExitCode.ORACLE_CUTOFF
    if isinstance(error, NumericalBreakdownError):
        return ExitCode.NUMERICAL_FAILURE
    return ExitCode.CONFIG_ERROR


class HierarchyManager:
    """
    High-level driver for the derive, run, oracle, compare and observe subcommands.

    Attributes:
        config: Validated run configuration.
        output_dir: Directory receiving every output file.
        state_machine: Pipeline sequencing machine owned by this manager.
        model: Model built from the configuration.
    """

    def __init__(self, config: RunConfig, output_dir: Optional[str | Path] = None) -> None:
        self.config = config
        self.output_dir = Path(output_dir if output_dir is not None else config.output_dir)
        self.state_machine = PipelineStateMachine()
        self.model: ModelSpec = config.model_spec()
        self._hamiltonian: Optional[GradedHamiltonian] = None
        self._compiled: Optional[CompiledHierarchy] = None
        self._initial: Optional[HierarchyState] = None
        self._last_samples: List[HierarchyState] = []

    # ------------------------------------------------------------------
    # Pipeline steps
    # ------------------------------------------------------------------
    @property
    def hamiltonian(self) -> GradedHamiltonian:
        if self._hamiltonian is None:
            self._hamiltonian = assemble_hamiltonian(self.model)
        return self._hamiltonian

    def compile(self) -> CompiledHierarchy:
        """Compile programs for every stored order."""
        self.state_machine.reset()
        try:
            self._compiled = compile_hierarchy(self.hamiltonian.total, self.config.K, self.model.n_modes)
        except HierarchyError:
            self.state_machine.fail()
            raise
        self.state_machine.compile_programs()
        return self._compiled

    def prepare_initial_state(self) -> HierarchyState:
        """Build the initial hierarchy state from the initial_state section."""
        if self.state_machine.current_state.id != "compiled":
            raise InvalidInputError("Programs must be compiled before the initial state is prepared")
        try:
            self._initial = self._build_initial_state()
        except HierarchyError:
            self.state_machine.fail()
            raise
        self.state_machine.prepare()
        return self._initial

    def integrate(self) -> Trajectory:
        """Integrate the prepared state with the configured closure and integrator."""
        if self.state_machine.current_state.id != "prepared":
            raise InvalidInputError("The initial state must be prepared before integrating")
        self.state_machine.begin_integration()
        try:
            trajectory = integrate(
                self._initial,
                self._compiled,
                self.config.closure.to_spec(),
                self.config.integrator.to_spec(),
            )
        except HierarchyError:
            self.state_machine.fail()
            raise
        self.state_machine.complete()
        return trajectory

    def _build_initial_state(self) -> HierarchyState:
        section = self.config.initial_state
        grid = self.model.grid
        K = self.config.K
        if section.variant == "vacuum":
            return init_vacuum(grid, K)
        if section.variant == "coherent":
            return init_coherent(grid, section.alpha, K)
        if section.variant == "gaussian":
            return init_gaussian(grid, section.occupations, K)
        return hierarchy_from_oracle(self._oracle_initial_density(), K, grid)

    def _oracle_basis(self) -> FockBasis:
        oracle = self.config.oracle
        return FockBasis(self.model.n_modes, oracle.n_max, oracle.total_cap)

    def _oracle_initial_density(self) -> FockDensityMatrix:
        section = self.config.initial_state
        basis = self._oracle_basis()
        if section.variant == "vacuum":
            return vacuum_density(basis)
        if section.variant == "coherent":
            return coherent_density(basis, section.alpha)
        if section.variant == "gaussian":
            return gaussian_density(basis, section.occupations)
        return fock_density(basis, [int(n) for n in section.occupations])

    def oracle_trajectory(self) -> List[HierarchyState]:
        """Exact reduced density matrices on the integrator's sample times."""
        times = self.config.integrator.to_spec().sample_times()
        rho0 = self._oracle_initial_density()
        logger.info("Oracle basis dimension %d, %d sample times", rho0.basis.dim, len(times))
        densities = evolve_density(rho0, self.hamiltonian.total, times)
        states = []
        for t, rho in zip(times, densities):
            state = hierarchy_from_oracle(rho, self.config.K, self.model.grid)
            state.time = t
            states.append(state)
        return states

    # ------------------------------------------------------------------
    # Subcommands
    # ------------------------------------------------------------------
    def derive(self) -> RunReport:
        """Compile programs and write them with their coupling structure."""
        report = RunReport(command="derive", output_dir=self.output_dir)
        compiled = self.compile()
        self._write_config(report)
        self._write_json(report, OutputFile.PROGRAMS, compiled.to_dict())
        report.details["coupled_orders"] = {
            f"{m},{n}": [list(order) for order in program.coupled_orders()]
            for (m, n), program in sorted(compiled.programs.items())
        }
        return report

    def run(self) -> RunReport:
        """
        Compile, integrate and write the trajectory, conservation report and observables.

        Raises:
            DivergenceError: After writing the partial trajectory flagged as diverged.
        """
        report = RunReport(command="run", output_dir=self.output_dir)
        self._write_config(report)
        self.compile()
        self._write_json(report, OutputFile.PROGRAMS, self._compiled.to_dict())
        self.prepare_initial_state()
        try:
            trajectory = self.integrate()
        except DivergenceError as exc:
            self._write_trajectory(report, exc.trajectory, status="diverged")
            self._write_metadata(report, status="diverged", failure={"time": exc.time, "order": list(exc.order)})
            raise
        self._write_trajectory(report, trajectory.samples, status="complete")
        self._write_conservation(report, trajectory.report)
        self._write_observables(report, trajectory.samples)
        self._write_metadata(report, status="complete")
        report.details["number_drift"] = trajectory.report.number_drift()
        report.details["energy_drift"] = trajectory.report.energy_drift()
        report.details["samples"] = len(trajectory.samples)
        return report

    def oracle(self) -> RunReport:
        """Run the exact oracle and write its trajectory in snapshot form."""
        report = RunReport(command="oracle", output_dir=self.output_dir)
        self._write_config(report)
        states = self.oracle_trajectory()
        self._write_json(report, OutputFile.ORACLE_TRAJECTORY, {
            "status": "complete",
            "samples": [state.to_snapshot() for state in states],
        })
        return report

    def compare(self) -> RunReport:
        """
        Run the hierarchy and the oracle on the shared sample times and write error tables.

        Raises:
            ConfigError: The oracle section is disabled.
        """
        if not self.config.oracle.enabled:
            raise ConfigError("oracle.enabled", "compare needs the oracle enabled")
        report = self.run()
        report.command = "compare"
        exact = self.oracle_trajectory()
        samples = self._last_samples
        order_cap = self.config.K

        rows = []
        worst: Dict[tuple, float] = {}
        for sample, reference in zip(samples, exact):
            rows.append((sample.time, distance(sample, reference, order_cap)))
            for order, error in order_errors(sample, reference, order_cap).items():
                worst[order] = max(worst.get(order, 0.0), error)
        self._write_csv(report, OutputFile.COMPARISON, ("t", "distance"), rows)
        self._write_csv(
            report, OutputFile.COMPARISON_SUMMARY, ("m", "n", "max_error"),
            [(m, n, error) for (m, n), error in sorted(worst.items())],
        )
        report.details["max_error"] = max((row[1] for row in rows), default=0.0)
        report.details["final_error"] = rows[-1][1] if rows else 0.0
        logger.info("Comparison max error %.3e", report.details["max_error"])
        return report

    def observe(self) -> RunReport:
        """Recompute observable tables from a trajectory written by ``run``."""
        report = RunReport(command="observe", output_dir=self.output_dir)
        path = self.output_dir / OutputFile.TRAJECTORY.value
        if not path.exists():
            raise InvalidInputError(f"No trajectory at {path}; run the configuration first")
        record = json.loads(path.read_text())
        samples = [HierarchyState.from_snapshot(snapshot) for snapshot in record["samples"]]
        self._write_observables(report, samples)
        return report

    # ------------------------------------------------------------------
    # Output writers
    # ------------------------------------------------------------------
    def _path(self, name: OutputFile) -> Path:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        return self.output_dir / name.value

    def _write_json(self, report: RunReport, name: OutputFile, payload: Any) -> None:
        path = self._path(name)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True))
        report.files.append(path)
        logger.info("Wrote %s", path)

    def _write_csv(self, report: RunReport, name: OutputFile, header: Sequence[str], rows: Iterable[Sequence]) -> None:
        path = self._path(name)
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(header)
            writer.writerows(rows)
        report.files.append(path)
        logger.info("Wrote %s", path)

    def _write_config(self, report: RunReport) -> None:
        self._write_json(report, OutputFile.NORMALIZED_CONFIG, self.config.to_dict())

    def _write_trajectory(self, report: RunReport, samples: Sequence[HierarchyState], status: str) -> None:
        self._last_samples = list(samples)
        self._write_json(report, OutputFile.TRAJECTORY, {
            "status": status,
            "samples": [state.to_snapshot() for state in samples],
        })

    def _write_conservation(self, report: RunReport, conservation: ConservationReport) -> None:
        self._write_csv(report, OutputFile.CONSERVATION, ConservationReport.COLUMNS, conservation.rows())

    def _write_observables(self, report: RunReport, samples: Sequence[HierarchyState]) -> None:
        outputs = self.config.observables.outputs
        if not outputs or not samples:
            return
        grid = self.model.grid
        closure = self.config.closure.to_spec()
        momenta = grid.mode_momenta()
        species = grid.mode_species()
        axes = [f"p{i}" for i in range(grid.dims)]

        if "momentum_density" in outputs:
            rows = []
            for state in samples:
                density = momentum_density(state, closure)
                for k in range(grid.mode_count):
                    rows.append((state.time, k, int(species[k]), *momenta[k], density[k]))
            self._write_csv(report, OutputFile.MOMENTUM_DENSITY, ("t", "mode", "species", *axes, "D"), rows)

        spatial = [name for name in ("energy_density", "number_density") if name in outputs]
        if spatial:
            xs = self.config.observables.spatial_grid(grid)
            points = xs.points()
            rows = []
            for state in samples:
                energy = energy_density(state, self.model, xs, closure) if "energy_density" in outputs else None
                number = number_density(state, xs, closure) if "number_density" in outputs else None
                for i, x in enumerate(points):
                    rows.append((
                        state.time,
                        *x,
                        energy[i] if energy is not None else "",
                        number[i] if number is not None else "",
                    ))
            header = ("t", *[f"x{i}" for i in range(grid.dims)], "E", "N")
            self._write_csv(report, OutputFile.SPATIAL_DENSITY, header, rows)

    def _write_metadata(self, report: RunReport, status: str, failure: Optional[Dict[str, Any]] = None) -> None:
        grid = self.model.grid
        energies = self.model.energies()
        two_pi_power = (2.0 * math.pi) ** grid.dims
        with np.errstate(divide="ignore"):
            energy_weights = np.sqrt(grid.cell_volume / two_pi_power) / np.sqrt(2.0 * energies)
        integrator = self.config.integrator.to_spec()
        metadata = {
            "status": status,
            "closure": str(self.config.closure.to_spec()),
            "K": self.config.K,
            "n_steps": integrator.n_steps,
            "sample_times": integrator.sample_times(),
            "continuum": {
                "dims": grid.dims,
                "cell_volume": grid.cell_volume,
                "two_pi_power": two_pi_power,
                "number_weight": grid.cell_volume / two_pi_power,
                "mode_momenta": grid.mode_momenta().tolist(),
                "mode_species": grid.mode_species().tolist(),
                "mode_energies": energies.tolist(),
                "energy_weights": [float(w) if np.isfinite(w) else None for w in energy_weights],
            },
        }
        if failure is not None:
            metadata["failure"] = failure
        self._write_json(report, OutputFile.METADATA, metadata)
