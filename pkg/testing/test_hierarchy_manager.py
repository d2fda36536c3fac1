"""
Tests for run orchestration, output files and the command-line entry point.
"""

import csv
import json

import pytest
from statemachine.exceptions import TransitionNotAllowed

from hierarchy_config.constants import ExitCode, OutputFile
from src import hierarchy_cli
from src.HierarchyErrors import (
    ConfigError,
    CutoffInsufficientError,
    DivergenceError,
    InvalidInputError,
    ProgramMissingError,
)
from src.HierarchyManager import HierarchyManager, PipelineStateMachine, exit_code_for
from src.RunConfig import parse_config

FREE_TWO_MODE = {
    "model": {"grid": {"dims": 1, "points_per_dim": 2, "p_max": 1.0}, "mass": 1.0},
    "initial_state": {"variant": "coherent", "alpha": [0.3, [0.1, -0.2]]},
    "closure": {"variant": "truncate", "N": 3},
    "integrator": {"dt": 0.01, "t_final": 1.0, "sample_every": 25},
    "oracle": {"enabled": True, "n_max": 10},
}


def with_changes(base, **sections):
    doc = json.loads(json.dumps(base))
    for key, value in sections.items():
        doc[key] = value
    return doc


@pytest.fixture
def write_config(tmp_path):
    def write(doc, name="config.json"):
        path = tmp_path / name
        path.write_text(json.dumps(doc))
        return path

    return write


@pytest.fixture
def manager(tmp_path):
    def build(doc):
        return HierarchyManager(parse_config(json.dumps(doc)), tmp_path / "out")

    return build


def read_csv(path):
    with open(path, newline="") as handle:
        return list(csv.reader(handle))


class TestPipelineStateMachine:
    def test_happy_path(self):
        machine = PipelineStateMachine()
        machine.compile_programs()
        machine.prepare()
        machine.begin_integration()
        machine.complete()
        assert machine.current_state.id == "finished"
        machine.reset()
        assert machine.current_state.id == "idle"

    def test_cannot_integrate_before_compiling(self):
        machine = PipelineStateMachine()
        with pytest.raises(TransitionNotAllowed):
            machine.begin_integration()

    def test_failure_is_resettable(self):
        machine = PipelineStateMachine()
        machine.compile_programs()
        machine.fail()
        assert machine.current_state.id == "failed"
        machine.reset()
        assert machine.current_state.id == "idle"


class TestPipelineSteps:
    def test_steps_must_run_in_order(self, manager):
        m = manager(FREE_TWO_MODE)
        with pytest.raises(InvalidInputError):
            m.prepare_initial_state()
        m.compile()
        with pytest.raises(InvalidInputError):
            m.integrate()
        m.prepare_initial_state()
        trajectory = m.integrate()
        assert m.state_machine.current_state.id == "finished"
        assert len(trajectory.samples) == 5

    def test_compile_failure_marks_pipeline_failed(self, manager, mocker):
        mocker.patch("src.HierarchyManager.compile_hierarchy", side_effect=ProgramMissingError("boom"))
        m = manager(FREE_TWO_MODE)
        with pytest.raises(ProgramMissingError):
            m.compile()
        assert m.state_machine.current_state.id == "failed"

    def test_integration_failure_marks_pipeline_failed(self, manager, mocker):
        mocker.patch("src.HierarchyManager.integrate", side_effect=DivergenceError(0.5, (1, 0)))
        m = manager(FREE_TWO_MODE)
        m.compile()
        m.prepare_initial_state()
        with pytest.raises(DivergenceError):
            m.integrate()
        assert m.state_machine.current_state.id == "failed"

    def test_fock_initial_state_goes_through_oracle(self, manager):
        doc = with_changes(FREE_TWO_MODE, initial_state={"variant": "fock", "occupations": [1, 1]})
        m = manager(doc)
        m.compile()
        state = m.prepare_initial_state()
        assert complex(state.get_gamma(1, 1).data[0, 0]) == pytest.approx(1.0)
        assert complex(state.get_gamma(2, 0).data[0, 1]) == pytest.approx(0.0)


class TestSubcommands:
    def test_derive_writes_programs(self, manager):
        report = manager(FREE_TWO_MODE).derive()
        names = [path.name for path in report.files]
        assert names == [OutputFile.NORMALIZED_CONFIG.value, OutputFile.PROGRAMS.value]
        programs = json.loads((report.output_dir / OutputFile.PROGRAMS.value).read_text())
        assert [p["target"] for p in programs["programs"]] == [[1, 0], [1, 1], [2, 0]]
        assert report.details["coupled_orders"]["1,0"] == [[1, 0]]

    def test_run_writes_every_output(self, manager):
        report = manager(FREE_TWO_MODE).run()
        out = report.output_dir
        for name in (
            OutputFile.NORMALIZED_CONFIG,
            OutputFile.PROGRAMS,
            OutputFile.TRAJECTORY,
            OutputFile.CONSERVATION,
            OutputFile.MOMENTUM_DENSITY,
            OutputFile.SPATIAL_DENSITY,
            OutputFile.METADATA,
        ):
            assert (out / name.value).exists()

        conservation = read_csv(out / OutputFile.CONSERVATION.value)
        assert conservation[0] == ["t", "trace", "number", "energy", "herm_residual", "min_eig_gamma11"]
        assert len(conservation) == 1 + 5
        assert report.details["number_drift"] <= 1e-10

        momentum = read_csv(out / OutputFile.MOMENTUM_DENSITY.value)
        assert momentum[0] == ["t", "mode", "species", "p0", "D"]
        assert len(momentum) == 1 + 5 * 2

        spatial = read_csv(out / OutputFile.SPATIAL_DENSITY.value)
        assert spatial[0] == ["t", "x0", "E", "N"]

        metadata = json.loads((out / OutputFile.METADATA.value).read_text())
        assert metadata["status"] == "complete"
        assert metadata["closure"] == "truncate(N=3)"
        assert metadata["continuum"]["two_pi_power"] == pytest.approx(2 * 3.141592653589793)

    def test_zero_duration_run(self, manager):
        doc = with_changes(FREE_TWO_MODE, integrator={"dt": 0.01, "t_final": 0.0})
        report = manager(doc).run()
        trajectory = json.loads((report.output_dir / OutputFile.TRAJECTORY.value).read_text())
        assert len(trajectory["samples"]) == 1
        assert report.details["samples"] == 1

    def test_mean_field_run_writes_every_output(self, manager):
        doc = with_changes(FREE_TWO_MODE, closure={"variant": "cluster", "N": 2})
        doc["model"]["kernel"] = {"variant": "constant", "value": 1.0}
        doc["model"]["coupling"] = 0.5
        report = manager(doc).run()
        out = report.output_dir
        for name in (OutputFile.CONSERVATION, OutputFile.MOMENTUM_DENSITY, OutputFile.SPATIAL_DENSITY, OutputFile.METADATA):
            assert (out / name.value).exists()
        # Mean-field dynamics under a density-density kernel keep every |α_k|² fixed
        rows = read_csv(out / OutputFile.MOMENTUM_DENSITY.value)[1:]
        densities = {}
        for row in rows:
            densities.setdefault(int(row[1]), []).append(float(row[-1]))
        assert densities[0] == pytest.approx([0.09] * 5, abs=1e-8)
        assert densities[1] == pytest.approx([0.05] * 5, abs=1e-8)
        assert report.details["number_drift"] <= 1e-8
        spatial = read_csv(out / OutputFile.SPATIAL_DENSITY.value)
        assert all(row[2] != "" and row[3] != "" for row in spatial[1:])

    def test_truncated_two_level_run_completes(self, manager):
        report = manager(with_changes(FREE_TWO_MODE, closure={"variant": "truncate", "N": 2})).run()
        assert report.details["samples"] == 5
        rows = read_csv(report.output_dir / OutputFile.MOMENTUM_DENSITY.value)[1:]
        assert all(float(row[-1]) == 0.0 for row in rows)
        metadata = json.loads((report.output_dir / OutputFile.METADATA.value).read_text())
        assert metadata["status"] == "complete"

    def test_massless_rest_mode_run_skips_energy_density(self, manager):
        doc = with_changes(FREE_TWO_MODE, initial_state={"variant": "coherent", "alpha": [0.2, 0.1, 0.3]})
        doc["model"] = {"grid": {"dims": 1, "points_per_dim": 3, "p_max": 1.5}, "mass": 0.0}
        report = manager(doc).run()
        spatial = read_csv(report.output_dir / OutputFile.SPATIAL_DENSITY.value)
        assert spatial[0][-2:] == ["E", "N"]
        assert all(row[-2] == "" for row in spatial[1:])
        assert (report.output_dir / OutputFile.METADATA.value).exists()

    def test_divergence_leaves_flagged_outputs(self, manager, regression_baseline):
        doc = with_changes(
            FREE_TWO_MODE,
            integrator={"dt": 10.0, "t_final": 3000.0, "sample_every": 1000},
        )
        doc["model"]["kernel"] = {"variant": "constant", "value": 1.0}
        doc["model"]["coupling"] = 0.5
        m = manager(doc)
        with pytest.raises(DivergenceError) as info:
            m.run()
        out = m.output_dir
        trajectory = json.loads((out / OutputFile.TRAJECTORY.value).read_text())
        metadata = json.loads((out / OutputFile.METADATA.value).read_text())
        assert trajectory["status"] == "diverged"
        assert metadata["status"] == "diverged"
        assert metadata["failure"]["time"] == pytest.approx(info.value.time)
        assert m.state_machine.current_state.id == "failed"
        # Overflow time at the unstable step size
        regression_baseline("divergence_time_quartic_dt10", info.value.time, rel=0.0)

    def test_compare_free_theory_is_exact(self, manager):
        report = manager(FREE_TWO_MODE).compare()
        assert report.command == "compare"
        assert report.details["max_error"] <= 1e-8
        rows = read_csv(report.output_dir / OutputFile.COMPARISON.value)
        assert rows[0] == ["t", "distance"]
        assert len(rows) == 1 + 5
        summary = read_csv(report.output_dir / OutputFile.COMPARISON_SUMMARY.value)
        assert summary[0] == ["m", "n", "max_error"]
        assert [row[:2] for row in summary[1:]] == [["0", "0"], ["1", "0"], ["1", "1"], ["2", "0"]]

    def test_compare_needs_oracle(self, manager):
        doc = with_changes(FREE_TWO_MODE, oracle={"enabled": False})
        with pytest.raises(ConfigError):
            manager(doc).compare()

    def test_oracle_writes_snapshots(self, manager):
        report = manager(FREE_TWO_MODE).oracle()
        record = json.loads((report.output_dir / OutputFile.ORACLE_TRAJECTORY.value).read_text())
        assert record["status"] == "complete"
        assert [sample["time"] for sample in record["samples"]] == pytest.approx([0.0, 0.25, 0.5, 0.75, 1.0])

    def test_oracle_cutoff_error(self, manager):
        doc = with_changes(FREE_TWO_MODE, oracle={"enabled": True, "n_max": 3})
        doc["initial_state"]["alpha"] = [1.5, 1.0]
        with pytest.raises(CutoffInsufficientError):
            manager(doc).oracle()

    def test_observe_recomputes_tables(self, manager):
        m = manager(FREE_TWO_MODE)
        m.run()
        density = m.output_dir / OutputFile.MOMENTUM_DENSITY.value
        first = read_csv(density)
        density.unlink()
        report = m.observe()
        second = read_csv(density)
        assert second[0] == first[0]
        # Snapshots are stored in single precision
        for old, new in zip(first[1:], second[1:]):
            assert [float(v) for v in new] == pytest.approx([float(v) for v in old], rel=1e-5, abs=1e-6)
        assert [path.name for path in report.files] == [
            OutputFile.MOMENTUM_DENSITY.value,
            OutputFile.SPATIAL_DENSITY.value,
        ]

    def test_observe_without_trajectory(self, manager):
        with pytest.raises(InvalidInputError):
            manager(FREE_TWO_MODE).observe()

    def test_rerun_is_deterministic(self, manager):
        m = manager(FREE_TWO_MODE)
        m.run()
        first = (m.output_dir / OutputFile.TRAJECTORY.value).read_text()
        m.run()
        assert (m.output_dir / OutputFile.TRAJECTORY.value).read_text() == first


class TestExitCodes:
    def test_mapping(self):
        assert exit_code_for(CutoffInsufficientError(0.1)) == ExitCode.ORACLE_CUTOFF
        assert exit_code_for(DivergenceError(1.0, (2, 0))) == ExitCode.NUMERICAL_FAILURE
        assert exit_code_for(ConfigError("model", "bad")) == ExitCode.CONFIG_ERROR

    def test_cli_success(self, write_config, tmp_path):
        path = write_config(FREE_TWO_MODE)
        assert hierarchy_cli.main(["derive", "--config", str(path), "--out", str(tmp_path / "cli")]) == 0
        assert (tmp_path / "cli" / OutputFile.PROGRAMS.value).exists()

    def test_cli_config_error(self, write_config, tmp_path):
        path = write_config(with_changes(FREE_TWO_MODE, closure={"variant": "cluster", "N": 7}))
        assert hierarchy_cli.main(["run", "--config", str(path), "--out", str(tmp_path / "cli")]) == 2

    def test_cli_missing_file(self, tmp_path):
        assert hierarchy_cli.main(["run", "--config", str(tmp_path / "absent.json")]) == 2

    def test_cli_cutoff_failure(self, write_config, tmp_path):
        doc = with_changes(FREE_TWO_MODE, oracle={"enabled": True, "n_max": 3})
        doc["initial_state"]["alpha"] = [1.5, 1.0]
        path = write_config(doc)
        assert hierarchy_cli.main(["oracle", "--config", str(path), "--out", str(tmp_path / "cli")]) == 4

    def test_cli_numerical_failure(self, write_config, tmp_path):
        doc = with_changes(FREE_TWO_MODE, integrator={"dt": 10.0, "t_final": 3000.0, "sample_every": 1000})
        path = write_config(doc)
        assert hierarchy_cli.main(["run", "--config", str(path), "--out", str(tmp_path / "cli")]) == 3

    def test_cli_requires_subcommand(self):
        with pytest.raises(SystemExit):
            hierarchy_cli.main([])
