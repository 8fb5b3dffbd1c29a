"""
Experiment configuration: one JSON document per run.

Example::

    {
      "scenario": "compare_desk",
      "signal": {"kind": "pste", "n": 32, "duration_s": 0.06,
                 "freqs_hz": [80, 150, 250, 400], "sigma_px": 0.32},
      "psf": {"kind": "speckle"},
      "schedule": {"lines_per_sample": 1},
      "mode": "circular",
      "solvers": {"fista_d": {"lambda": 0.1, "block_len": 10}},
      "noise": null,
      "sweep": {"param": "lines", "values": [1, 3, 5]},
      "output_dir": "out/compare",
      "rng_seed": 0,
      "options": {}
    }
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, Optional

from ..io import json_text
from ..model import MODES, NoiseSpec
from ..solvers import SolverConfig

SIGNAL_KINDS = ("pste", "pulse_sweep")
PSF_KINDS = ("speckle", "subgaussian", "delta", "file")
ALGORITHMS = ("fista_d", "tv", "l1")
SWEEP_PARAMS = ("lines", "rate", "snr")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    scenario: str
    signal: Dict[str, Any]
    psf: Dict[str, Any] = field(default_factory=lambda: {"kind": "speckle"})
    schedule: Dict[str, Any] = field(default_factory=lambda: {"lines_per_sample": 1})
    solvers: Dict[str, SolverConfig] = field(default_factory=dict)
    noise: Optional[NoiseSpec] = None
    sweep: Optional[Dict[str, Any]] = None
    output_dir: str = "out"
    rng_seed: int = 0
    mode: str = "circular"
    options: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        kind = self.signal.get("kind", "pste")
        if kind not in SIGNAL_KINDS:
            raise ConfigError(f"unknown signal kind {kind!r}")
        if self.psf.get("kind") not in PSF_KINDS:
            raise ConfigError(f"unknown psf kind {self.psf.get('kind')!r}")
        if self.psf["kind"] == "file" and "path" not in self.psf:
            raise ConfigError("psf kind 'file' needs a 'path'")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        for name in self.solvers:
            if name not in ALGORITHMS:
                raise ConfigError(f"unknown algorithm {name!r}")
        if self.sweep is not None:
            if self.sweep.get("param") not in SWEEP_PARAMS:
                raise ConfigError(f"sweep param must be one of {SWEEP_PARAMS}")
            if not self.sweep.get("values"):
                raise ConfigError("sweep values must be non-empty")
        if self.rng_seed < 0:
            raise ConfigError("rng_seed must be >= 0")

    @property
    def n(self):
        return int(self.signal.get("n", 32))

    @property
    def rate_hz(self):
        return float(self.signal.get("rate_hz", 1000.0))

    def solver(self, name):
        """Solver settings for ``name``; missing entries fall back to defaults."""
        return self.solvers.get(name) or self.solvers.get("fista_d") or SolverConfig()

    def to_dict(self):
        return {
            "scenario": self.scenario,
            "signal": self.signal,
            "psf": self.psf,
            "schedule": self.schedule,
            "solvers": {k: v.to_dict() for k, v in self.solvers.items()},
            "noise": None if self.noise is None else {"snr_db": self.noise.snr_db},
            "sweep": self.sweep,
            "output_dir": self.output_dir,
            "rng_seed": self.rng_seed,
            "mode": self.mode,
            "options": self.options,
        }

    @classmethod
    def from_dict(cls, d):
        d = copy.deepcopy(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        if "scenario" not in d or "signal" not in d:
            raise ConfigError("config needs 'scenario' and 'signal'")
        d["solvers"] = {k: SolverConfig.from_dict(v) for k, v in (d.get("solvers") or {}).items()}
        if d.get("noise") is not None:
            d["noise"] = NoiseSpec(float(d["noise"]["snr_db"]))
        return cls(**d)

    def config_hash(self):
        """SHA-256 of the canonical JSON form (seed and output dir included)."""
        return hashlib.sha256(json_text(self.to_dict()).encode()).hexdigest()

    def with_overrides(self, seed=None, out=None):
        d = self.to_dict()
        if seed is not None:
            d["rng_seed"] = int(seed)
        if out is not None:
            d["output_dir"] = str(out)
        return ExperimentConfig.from_dict(d)


def shipped_configs():
    """Names of the configs bundled with the package."""
    root = resources.files("rollingcs") / "configs"
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".json"))


def load_config(path_or_name):
    """Load a config from a path, or by name from the bundled configs."""
    p = Path(path_or_name)
    if p.is_file():
        text = p.read_text()
    else:
        name = p.name if p.name.endswith(".json") else p.name + ".json"
        res = resources.files("rollingcs") / "configs" / name
        if not res.is_file():
            raise ConfigError(f"no config file {path_or_name!r} (bundled: {shipped_configs()})")
        text = res.read_text()
    try:
        return ExperimentConfig.from_dict(json.loads(text))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path_or_name}: {e}") from None
