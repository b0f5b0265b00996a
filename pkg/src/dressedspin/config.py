"""Run configuration: a strict, nested YAML schema.

Unknown keys are rejected with the full key path, because a silently
ignored typo in a physics parameter is the main user hazard. Presets
reproducing the standard measurement configurations ship with the
package and can be overlaid by a user config.
"""

from __future__ import annotations

import importlib.resources
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import yaml

from .experiments import PulseSchedule
from .model import RelaxationRates, SystemConfig
from .noise import NoiseModel


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass
class SystemSection:
    omega_b: float = 30.0
    hyperfine: bool = False
    a_hf: float = 4.4


@dataclass
class RatesSection:
    gamma_e: float = 13.0
    branch_plus: float = 0.5
    branch_minus: float = 0.5
    branch_zero: float = 0.0
    gamma_phi_opt: float = 0.0
    gamma_s: float = 0.0


@dataclass
class DrivesSection:
    omega_m: float = 1.0
    power_nw: float = None
    omega_0: float = None
    theta: float = math.pi

    def resolved_omega_0(self):
        from .experiments import power_to_rabi
        if (self.power_nw is None) == (self.omega_0 is None):
            raise ConfigError("drives: set exactly one of power_nw or omega_0")
        if self.omega_0 is not None:
            return float(self.omega_0)
        return power_to_rabi(float(self.power_nw))


@dataclass
class NoiseSection:
    variant: str = "none"
    sigma: float = 0.0
    tau_c: float = 1.0
    sigma_opt: float = 0.0
    seed: int = 1234
    n_samples: int = 1


@dataclass
class ScheduleSection:
    t_pulse: float = 40.0
    dt: float = 2e-3
    window: list = None


@dataclass
class ScanSection:
    center: float = None          # defaults to omega_b
    span: float = 3.0             # half width of the grid, MHz
    points: int = 201
    values: list = None           # sweep values (powers or omega_m list)


@dataclass
class RunSection:
    mode: str = "steady"
    init: str = "auto"


@dataclass
class RunConfig:
    system: SystemSection = field(default_factory=SystemSection)
    rates: RatesSection = field(default_factory=RatesSection)
    drives: DrivesSection = field(default_factory=DrivesSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    scan: ScanSection = field(default_factory=ScanSection)
    run: RunSection = field(default_factory=RunSection)

    def system_config(self) -> SystemConfig:
        return SystemConfig(omega_b=self.system.omega_b, include_excited=True,
                            hyperfine=self.system.hyperfine, a_hf=self.system.a_hf)

    def relaxation_rates(self) -> RelaxationRates:
        r = self.rates
        return RelaxationRates(gamma_e=r.gamma_e, branch_plus=r.branch_plus,
                               branch_minus=r.branch_minus, branch_zero=r.branch_zero,
                               gamma_phi_opt=r.gamma_phi_opt, gamma_s=r.gamma_s)

    def noise_model(self) -> NoiseModel:
        n = self.noise
        return NoiseModel(variant=n.variant, sigma=n.sigma, tau_c=n.tau_c,
                          sigma_opt=n.sigma_opt, seed=n.seed, n_samples=n.n_samples)

    def pulse_schedule(self) -> PulseSchedule:
        s = self.schedule
        win = tuple(s.window) if s.window is not None else None
        return PulseSchedule(t_pulse=s.t_pulse, dt=s.dt, window=win)

    def scan_grid(self) -> np.ndarray:
        c = self.scan.center if self.scan.center is not None else self.system.omega_b
        if self.scan.points < 2:
            raise ConfigError("scan: need at least 2 points")
        if self.scan.span <= 0:
            raise ConfigError("scan: span must be positive")
        return c + np.linspace(-self.scan.span, self.scan.span, self.scan.points)

    def echo(self) -> dict:
        return asdict(self)


_SECTIONS = {f.name: f.type for f in fields(RunConfig)}


def _apply(obj, data, path):
    valid = {f.name for f in fields(obj)}
    for key, val in data.items():
        if key not in valid:
            raise ConfigError(f"unknown key '{path}{key}'")
        setattr(obj, key, val)
    return obj


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    cfg = RunConfig()
    for key, val in data.items():
        if key not in _SECTIONS:
            raise ConfigError(f"unknown section '{key}'")
        if not isinstance(val, dict):
            raise ConfigError(f"section '{key}' must be a mapping")
        _apply(getattr(cfg, key), val, f"{key}.")
    return cfg


def load_config(path) -> RunConfig:
    with open(path, "r") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(data or {})


PRESET_NAMES = ("fig2b", "fig2c", "fig3a", "fig3b", "fig3c", "fig3d")


def load_preset(name: str, overrides: dict = None) -> RunConfig:
    if name not in PRESET_NAMES:
        raise ConfigError(f"unknown preset '{name}'; available: {', '.join(PRESET_NAMES)}")
    ref = importlib.resources.files("dressedspin.presets").joinpath(f"{name}.yaml")
    data = yaml.safe_load(ref.read_text())
    if overrides:
        for section, vals in overrides.items():
            data.setdefault(section, {}).update(vals)
    return config_from_dict(data)


def preset_kind(name: str) -> str:
    """Which subcommand a preset belongs to."""
    return {"fig2b": "spectrum", "fig3b": "spectrum", "fig2c": "splitting",
            "fig3a": "power", "fig3c": "power", "fig3d": "omega_m"}[name]
