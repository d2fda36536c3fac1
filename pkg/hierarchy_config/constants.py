"""
Constants for the hierarchy simulator.

This module contains enumerations shared by the CLI and the run orchestration.
"""
from enum import Enum


class ExitCode(Enum):
    """Process exit codes returned by the CLI."""
    SUCCESS = 0
    CONFIG_ERROR = 2
    NUMERICAL_FAILURE = 3
    ORACLE_CUTOFF = 4


class OutputFile(Enum):
    """File names written into a run's output directory."""
    NORMALIZED_CONFIG = "config.normalized.json"
    METADATA = "metadata.json"
    PROGRAMS = "programs.json"
    TRAJECTORY = "trajectory.json"
    ORACLE_TRAJECTORY = "oracle_trajectory.json"
    CONSERVATION = "conservation.csv"
    MOMENTUM_DENSITY = "momentum_density.csv"
    SPATIAL_DENSITY = "spatial_density.csv"
    COMPARISON = "comparison.csv"
    COMPARISON_SUMMARY = "comparison_summary.csv"
