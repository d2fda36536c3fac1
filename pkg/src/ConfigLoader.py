"""
Configuration loader for the hierarchy simulator.
Loads numerical tolerances and runtime defaults from JSON files.
"""

import json
import os
from pathlib import Path
from typing import Any, Dict, Optional

THREADS_ENV_VAR = "QBBGKY_THREADS"


class ConfigLoader:
    """Loads and manages system-wide numerical configuration"""

    _instance = None
    _config: Optional[Dict[str, Any]] = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super(ConfigLoader, cls).__new__(cls)
        return cls._instance

    def __init__(self):
        if self._config is None:
            self._load_config()

    def _load_config(self):
        """Load configuration from JSON file"""
        # Project root is the parent of the src directory
        project_root = Path(__file__).parent.parent
        config_path = project_root / "hierarchy_config" / "system_config.json"
        with open(config_path, "r") as f:
            self._config = json.load(f)

    def get(self, key_path: str, default=None):
        """Get configuration value using dot notation (e.g., 'numerics.dedup_threshold')"""
        keys = key_path.split('.')
        value = self._config

        try:
            for key in keys:
                value = value[key]
            return value
        except (KeyError, TypeError):
            return default

    def get_dedup_threshold(self) -> float:
        """Coefficients below this magnitude are dropped after merging"""
        return float(self.get("numerics.dedup_threshold", 1e-14))

    def get_hermiticity_tolerance(self) -> float:
        return float(self.get("numerics.hermiticity_tolerance", 1e-10))

    def get_positivity_tolerance(self) -> float:
        return float(self.get("numerics.positivity_tolerance", 1e-10))

    def get_boundary_weight_limit(self) -> float:
        """Largest probability allowed on occupation-cutoff boundary states"""
        return float(self.get("oracle.boundary_weight_limit", 1e-8))

    def get_coherent_tail_tolerance(self) -> float:
        return float(self.get("oracle.coherent_tail_tolerance", 1e-12))

    def get_oracle_max_dimension(self) -> int:
        return int(self.get("oracle.max_dimension", 3000))

    def get_threads(self) -> int:
        """Worker count; the QBBGKY_THREADS environment variable wins over the file"""
        override = os.environ.get(THREADS_ENV_VAR)
        if override:
            try:
                return max(1, int(override))
            except ValueError:
                pass
        return max(1, int(self.get("runtime.threads", 1)))

# Global config instance
config = ConfigLoader()
