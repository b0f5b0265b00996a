"""Simulator for continuously dressed solid-state spins probed by
coherent population trapping.

The package models a driven four-level emitter (two Zeeman-split spin
levels, one auxiliary spin level and one optical excited state) under
two resonant microwave dressing fields and a pair of optical probe
fields, with classical bath noise, and extracts emission-dip linewidths
the way a spectroscopy experiment would.
"""

from .core import (ConvergenceError, Liouvillian, NonUniqueSteadyStateError,
                   Trajectory, build_liouvillian, expectation, propagate,
                   steady_state)
from .model import (DressedAmplitudes, DriveField, RelaxationRates,
                    SystemConfig, build_hamiltonian, collapse_operators,
                    cpt_drives, cpt_resonance_positions, dressed_energies,
                    dressed_transform, eq1_amplitudes, microwave_drive,
                    optical_dark_state_check, optical_drive)
from .noise import BathSample, CalibrationError, NoiseModel, calibrate_sigma, ensemble_average, sample
from .experiments import (PulseSchedule, RabiTrace, Spectrum, SweepResult,
                          analytic_cpt, analytic_cpt_fwhm, cpt_spectrum,
                          linewidth_vs_omega_m, linewidth_vs_power,
                          power_to_rabi, rabi_trace, splitting_vs_omega_m)
from .analysis import (FitResult, LinearFit, LorentzianModel, LorentzianPeak,
                       fit_lorentzians, fwhm_of, linear_fit)

__version__ = "0.1.0"
