"""Classical stochastic models of the spin bath and optical spectral
diffusion, plus ensemble-averaging machinery.

Randomness is counter based: each ensemble member is generated from a
Philox stream keyed by (seed, index), so samples are independent of
evaluation order and identical across worker counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

VARIANTS = ("none", "static_gaussian", "ornstein_uhlenbeck", "static_gaussian_optical")


class CalibrationError(RuntimeError):
    """Bisection failed to bracket the calibration target."""


@dataclass(frozen=True)
class NoiseModel:
    """Stochastic model for the bath shift delta_n and the optical shift.

    variant selects the delta_n process:
      none                    -- delta_n = 0
      static_gaussian         -- one N(0, sigma^2) draw per repetition
      ornstein_uhlenbeck      -- stationary OU trajectory, std sigma,
                                 correlation time tau_c (us)
      static_gaussian_optical -- delta_n = 0, optical diffusion only
    sigma_opt > 0 additionally draws a static optical detuning
    N(0, sigma_opt^2) per repetition under any variant.
    """

    variant: str = "none"
    sigma: float = 0.0
    tau_c: float = 1.0
    sigma_opt: float = 0.0
    seed: int = 0
    n_samples: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown noise variant {self.variant!r}")
        if self.sigma < 0 or self.sigma_opt < 0:
            raise ValueError("noise widths must be nonnegative")
        if self.tau_c <= 0:
            raise ValueError("tau_c must be positive")
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")


@dataclass(frozen=True)
class BathSample:
    """One realization of the bath: delta_n (MHz) and delta_opt (MHz).

    delta_n is a scalar for quasi-static variants; for an OU bath it is
    an array on the simulation time grid stored in ``trajectory``.
    """

    delta_n: float
    delta_opt: float
    trajectory: np.ndarray | None = None
    times: np.ndarray | None = None


def _stream(model: NoiseModel, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[model.seed & 0xFFFFFFFFFFFFFFFF,
                                                     index & 0xFFFFFFFFFFFFFFFF]))


def sample(model: NoiseModel, index: int, times=None) -> BathSample:
    """Deterministic bath realization number ``index``.

    OU trajectories require the simulation time grid ``times`` and use
    the exact discrete update x_{k+1} = x_k e^{-dt/tau} +
    sigma sqrt(1 - e^{-2dt/tau}) xi, which reproduces the stationary
    autocorrelation sigma^2 e^{-|dt|/tau} at machine precision.
    """
    if index < 0 or index >= model.n_samples:
        raise IndexError(f"sample index {index} out of range [0, {model.n_samples})")
    rng = _stream(model, index)
    traj = None
    tgrid = None
    if model.variant == "none" or model.variant == "static_gaussian_optical":
        delta_n = 0.0
    elif model.variant == "static_gaussian":
        delta_n = model.sigma * rng.standard_normal()
    else:  # ornstein_uhlenbeck
        if times is None:
            raise ValueError("OU sampling requires the simulation time grid")
        tgrid = np.asarray(times, dtype=float)
        n = tgrid.size
        x = np.empty(n)
        x[0] = model.sigma * rng.standard_normal()
        if n > 1:
            dts = np.diff(tgrid)
            decay = np.exp(-dts / model.tau_c)
            kick = model.sigma * np.sqrt(1.0 - decay ** 2)
            xi = rng.standard_normal(n - 1)
            for k in range(n - 1):
                x[k + 1] = x[k] * decay[k] + kick[k] * xi[k]
        delta_n = float(x[0])
        traj = x
    delta_opt = model.sigma_opt * rng.standard_normal() if model.sigma_opt > 0 else 0.0
    return BathSample(delta_n=float(delta_n), delta_opt=float(delta_opt),
                      trajectory=traj, times=tgrid)


def ensemble_average(model: NoiseModel, runner, times=None):
    """Pointwise mean spectrum over the noise ensemble.

    ``runner`` maps a BathSample to a Spectrum; samples are reduced in
    fixed index order so the result is deterministic for a given seed.
    Per-point standard error of the mean is stored on the result.
    Runner failures are re-raised with the sample index attached.
    """
    from .experiments import Spectrum  # deferred: avoids a module cycle

    signals = []
    first = None
    for idx in range(model.n_samples):
        bath = sample(model, idx, times=times)
        try:
            spec = runner(bath)
        except Exception as exc:
            raise RuntimeError(f"ensemble runner failed on sample {idx}") from exc
        if first is None:
            first = spec
        elif not np.array_equal(spec.detunings, first.detunings):
            raise ValueError(f"sample {idx} returned a different detuning grid")
        signals.append(np.asarray(spec.signal, dtype=float))
    stack = np.vstack(signals)
    mean = stack.mean(axis=0)
    if model.n_samples > 1:
        stderr = stack.std(axis=0, ddof=1) / math.sqrt(model.n_samples)
    else:
        stderr = np.zeros_like(mean)
    meta = dict(first.metadata)
    meta.update(noise_variant=model.variant, noise_sigma=model.sigma,
                noise_seed=model.seed, n_samples=model.n_samples)
    return Spectrum(detunings=first.detunings.copy(), signal=mean,
                    stderr=stderr, metadata=meta)


# Gaussian FWHM = 2 sqrt(2 ln 2) sigma. The bare CPT dip center shifts
# by 2*delta_n (the |+-> splitting moves by twice the one-sided shift),
# so the inhomogeneous dip width is 2 sqrt(2 ln 2) * (2 sigma_n).
GAUSSIAN_FWHM_FACTOR = 2.0 * math.sqrt(2.0 * math.log(2.0))


def sigma_from_bare_fwhm(fwhm: float) -> float:
    """First-order Gaussian estimate of sigma_n from a bare dip FWHM."""
    return fwhm / (2.0 * GAUSSIAN_FWHM_FACTOR)


def calibrate_sigma(target_bare_fwhm: float, cfg, rates, power: float = 0.02,
                    n_samples: int = 1500, seed: int = 711,
                    rel_tol: float = 0.02, max_iter: int = 40) -> float:
    """Bath width sigma_n reproducing a target bare-spin CPT linewidth.

    Runs low-power bare-spin spectra under a static Gaussian bath and
    bisects sigma_n until the fitted FWHM is within ``rel_tol`` of the
    target. The Markovian floor is 2 * spin_coherence_decay; a target
    at or below the floor returns sigma_n = 0 when it is reachable and
    raises CalibrationError otherwise.
    """
    from . import experiments  # deferred: avoids a module cycle

    floor = 2.0 * rates.spin_coherence_decay
    if target_bare_fwhm < floor:
        raise CalibrationError(
            f"target {target_bare_fwhm} MHz below Markovian floor {floor} MHz")

    def measured(sig):
        noise = NoiseModel(variant="static_gaussian", sigma=sig,
                           seed=seed, n_samples=n_samples if sig > 0 else 1)
        # size the scan from this sigma's own expected width
        guess = GAUSSIAN_FWHM_FACTOR * 2.0 * sig
        return experiments.bare_cpt_fwhm(cfg, rates, power, noise,
                                         fwhm_guess=guess)

    base = measured(0.0)
    if abs(base - target_bare_fwhm) <= rel_tol * target_bare_fwhm:
        return 0.0
    if base > target_bare_fwhm:
        raise CalibrationError(
            f"zero-noise linewidth {base:.4f} MHz already exceeds target "
            f"{target_bare_fwhm} MHz")
    lo, f_lo = 0.0, base
    hi = 2.0 * sigma_from_bare_fwhm(target_bare_fwhm)
    f_hi = measured(hi)
    grow = 0
    while f_hi < target_bare_fwhm:
        hi *= 2.0
        f_hi = measured(hi)
        grow += 1
        if grow > 8:
            raise CalibrationError("failed to bracket the target linewidth")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f_mid = measured(mid)
        if abs(f_mid - target_bare_fwhm) <= rel_tol * target_bare_fwhm:
            return mid
        if f_mid < target_bare_fwhm:
            lo, f_lo = mid, f_mid
        else:
            hi, f_hi = mid, f_mid
    raise CalibrationError(
        f"bisection did not converge: best bracket [{lo}, {hi}] MHz")
