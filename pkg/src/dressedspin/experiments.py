"""Measurement drivers: CPT spectra, Rabi calibration, linewidth and
splitting sweeps, plus the closed-form three-level coherence used as an
independent cross-check.

Conventions
-----------
* The two-photon detuning ``delta`` (MHz) is the frequency difference
  between the optical field driving |-><->|e> and the one driving
  |+><->|e>; bare two-photon resonance sits at delta = omega_b.
* Emission signal is gamma_e times the time-averaged excited-state
  population (steady mode: the long-pulse limit).
* ``mode="pulsed"`` integrates a finite rectangular probe pulse from a
  prepared initial state and averages rho_ee over the emission window;
  this is the faithful model of a gated experiment and includes
  transit-time broadening. ``mode="steady"`` computes the infinite-
  pulse limit: a static solve where the drive graph is loop-free, and
  the time-average of the periodic limit cycle where the four-drive
  loop fails to close. At exact loop closure the steady value averages
  over the frozen loop phase, the continuum limit of its neighbors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import analysis, engine, model
from .core import build_liouvillian, expectation, propagate, steady_state
from .model import (IDX_0, IDX_E, IDX_M, IDX_P, TWO_PI, DriveField,
                    RelaxationRates, SystemConfig, cpt_drives,
                    cpt_resonance_positions)
from .noise import NoiseModel, sample as noise_sample

SQRT2 = math.sqrt(2.0)

# calibration anchor: incident power producing Omega_0/2pi = 0.74 MHz
RABI_PER_SQRT_NW = 0.74


class ExtractionError(RuntimeError):
    """A trace or spectrum did not contain the feature to extract."""


@dataclass(frozen=True)
class PulseSchedule:
    """Rectangular probe pulse: duration, integrator step and the
    window over which emission is averaged (defaults to the full
    pulse). Times in us."""

    t_pulse: float = 40.0
    dt: float = 2e-3
    window: tuple = None

    def __post_init__(self):
        if not 0 < self.dt < self.t_pulse:
            raise ValueError("need 0 < dt < t_pulse")
        win = self.window if self.window is not None else (0.0, self.t_pulse)
        lo, hi = float(win[0]), float(win[1])
        if not (0.0 <= lo < hi <= self.t_pulse + 1e-12):
            raise ValueError(f"emission window {win} outside pulse [0, {self.t_pulse}]")
        object.__setattr__(self, "window", (lo, hi))


@dataclass
class Spectrum:
    """Emission versus two-photon detuning."""

    detunings: np.ndarray
    signal: np.ndarray
    stderr: np.ndarray = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.detunings = np.asarray(self.detunings, dtype=float)
        self.signal = np.asarray(self.signal, dtype=float)
        if self.detunings.shape != self.signal.shape:
            raise ValueError("detuning and signal grids differ in length")
        if self.signal.size and self.signal.min() < -1e-6 * max(1.0, abs(self.signal).max()):
            raise ValueError(f"negative emission {self.signal.min()}")
        np.clip(self.signal, 0.0, None, out=self.signal)


@dataclass
class SweepPoint:
    value: float
    fwhm: float
    fwhm_err: float
    status: str = "ok"            # ok | overlap | failed | unresolved
    center: float = float("nan")
    depth: float = float("nan")
    diagnostics: dict = field(default_factory=dict)


@dataclass
class SweepResult:
    variable: str
    points: list
    metadata: dict = field(default_factory=dict)

    @property
    def values(self):
        return np.array([p.value for p in self.points])

    @property
    def fwhms(self):
        return np.array([p.fwhm for p in self.points])

    @property
    def fwhm_errs(self):
        return np.array([p.fwhm_err for p in self.points])

    @property
    def ok(self):
        return np.array([p.status == "ok" for p in self.points])


def power_to_rabi(power_nw: float, coeff: float = RABI_PER_SQRT_NW) -> float:
    """Optical Rabi frequency (MHz) for an incident power in nW.

    Field scales as the square root of power; the default anchor is
    0.74 MHz at 1 nW.
    """
    if power_nw < 0:
        raise ValueError("power must be nonnegative")
    return coeff * math.sqrt(power_nw)


def analytic_cpt(delta, omega_0: float, rabi: float, gamma: float,
                 gamma_s: float, n_plus: float, n_minus: float):
    """Closed-form steady spin coherence of the driven three-level system.

    rho_-+ = -W^2 (N_+ + N_-) / (4 gamma) / [i(delta - omega_0) +
    gamma_s + W^2/(2 gamma)], evaluated with angular frequencies
    internally; all arguments are ordinary frequencies in MHz. Here
    ``gamma_s`` is the decay rate of the |+><-| coherence itself (for a
    bath modeled by the opposite-sign dephasing channel this is
    ``RelaxationRates.spin_coherence_decay``, i.e. twice the channel
    rate). Vectorized over ``delta``.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if gamma_s < 0:
        raise ValueError("gamma_s must be nonnegative")
    if not (0 <= n_plus <= 1 and 0 <= n_minus <= 1):
        raise ValueError("populations must lie in [0, 1]")
    delta = np.asarray(delta, dtype=float)
    w = TWO_PI * rabi
    g = TWO_PI * gamma
    gs = TWO_PI * gamma_s
    num = -w * w * (n_plus + n_minus) / (4.0 * g)
    den = 1j * TWO_PI * (delta - omega_0) + gs + w * w / (2.0 * g)
    return num / den


def analytic_cpt_fwhm(rabi: float, gamma: float, gamma_s: float) -> float:
    """Power-broadened linewidth (2 gamma_s + W^2/gamma)/2pi in MHz.

    With all rates as ordinary MHz frequencies this reduces to
    2*gamma_s + rabi^2/gamma.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return 2.0 * gamma_s + rabi * rabi / gamma


def expected_central_fwhm(rates: RelaxationRates, omega_0: float,
                          pulsed_t: float = None, sigma_n: float = 0.0,
                          bare: bool = False) -> float:
    """Rough width estimate used to size scan grids (MHz)."""
    w = analytic_cpt_fwhm(omega_0, rates.gamma_optical, rates.spin_coherence_decay)
    if pulsed_t:
        w += 0.9 / pulsed_t
    if bare and sigma_n > 0:
        w += noise_fwhm(sigma_n)
    return w


def noise_fwhm(sigma_n: float) -> float:
    """Gaussian FWHM of the bare dip-center distribution (MHz).

    The dip center moves by twice the one-sided shift delta_n, so the
    distribution has standard deviation 2 sigma_n.
    """
    return 2.0 * math.sqrt(2.0 * math.log(2.0)) * 2.0 * sigma_n


# ---------------------------------------------------------------------------
# spectrum assembly


def _bath_arrays(noise: NoiseModel):
    """Static per-sample draws (delta_n, delta_opt)."""
    dn = np.empty(noise.n_samples)
    dopt = np.empty(noise.n_samples)
    for i in range(noise.n_samples):
        s = noise_sample(noise, i)
        dn[i] = s.delta_n
        dopt[i] = s.delta_opt
    return dn, dopt


def _ou_trajectories(noise: NoiseModel, nodes: np.ndarray):
    dn = np.empty((noise.n_samples, nodes.size))
    dopt = np.empty(noise.n_samples)
    for i in range(noise.n_samples):
        s = noise_sample(noise, i, times=nodes)
        dn[i] = s.trajectory
        dopt[i] = s.delta_opt
    return dn, dopt


def _shift_derivatives(cfg, drives, m_n):
    """Linear response of the block Hamiltonian to delta_n and delta_opt."""
    h0, _ = model.build_hamiltonian(cfg, drives, 0.0, 0.0, m_n)
    hn, _ = model.build_hamiltonian(cfg, drives, 1.0, 0.0, m_n)
    hop, _ = model.build_hamiltonian(cfg, drives, 0.0, 1.0, m_n)
    return h0, hn - h0, hop - h0


def _initial_state(dim, level):
    rho = np.zeros((dim, dim), dtype=complex)
    rho[level, level] = 1.0
    return rho


def cpt_spectrum(cfg: SystemConfig, rates: RelaxationRates, omega_m: float,
                 omega_0: float, deltas, noise: NoiseModel = None,
                 schedule: PulseSchedule = None, mode: str = "steady",
                 theta: float = math.pi, ou_segments: int = 64) -> Spectrum:
    """Emission spectrum versus two-photon detuning.

    Dressed configuration (omega_m > 0): two resonant microwaves plus
    the optical pair, prepared in |0> for pulsed mode. Bare
    configuration (omega_m = 0): optical pair only, prepared in |+>;
    steady mode solves the three-level block directly.

    Noise samples and nuclear blocks are averaged with fixed weights;
    per-point standard error over the noise ensemble is recorded when
    there is more than one sample.
    """
    deltas = np.asarray(deltas, dtype=float)
    if deltas.size == 0:
        raise ValueError("empty detuning grid")
    if mode not in ("steady", "pulsed"):
        raise ValueError(f"unknown mode {mode!r}")
    if noise is None:
        noise = NoiseModel()
    if mode == "pulsed" and schedule is None:
        schedule = PulseSchedule()
    if mode == "steady" and noise.variant == "ornstein_uhlenbeck":
        raise ValueError("a finite-correlation-time bath requires pulsed mode")

    blocks = cfg.nuclear_projections
    w_block = 1.0 / len(blocks)
    n_s = noise.n_samples
    per_sample = np.zeros((n_s, deltas.size))

    for m_n in blocks:
        if mode == "pulsed":
            block = _pulsed_block(cfg, rates, omega_m, omega_0, deltas, noise,
                                  schedule, theta, m_n, ou_segments)
        else:
            block = _steady_block(cfg, rates, omega_m, omega_0, deltas, noise,
                                  theta, m_n)
        per_sample += w_block * block

    signal = rates.gamma_e * per_sample.mean(axis=0)
    stderr = None
    if n_s > 1:
        stderr = rates.gamma_e * per_sample.std(axis=0, ddof=1) / math.sqrt(n_s)
    meta = dict(omega_m=omega_m, omega_0=omega_0, omega_b=cfg.omega_b,
                mode=mode, theta=theta, hyperfine=cfg.hyperfine,
                gamma_e=rates.gamma_e, gamma_s=rates.gamma_s,
                noise_variant=noise.variant, noise_sigma=noise.sigma,
                noise_sigma_opt=noise.sigma_opt, noise_seed=noise.seed,
                n_samples=n_s)
    if schedule is not None:
        meta.update(t_pulse=schedule.t_pulse, dt=schedule.dt, window=schedule.window)
    return Spectrum(detunings=deltas.copy(), signal=signal, stderr=stderr,
                    metadata=meta)


def _pulsed_block(cfg, rates, omega_m, omega_0, deltas, noise, schedule,
                  theta, m_n, ou_segments):
    """Per-sample window-averaged rho_ee, shape (n_samples, n_deltas)."""
    dim = cfg.dim
    if dim != 4:
        raise ValueError("pulsed CPT requires the 4-level scheme")
    ops = model.collapse_operators(cfg, rates)
    bare = omega_m == 0
    init = _initial_state(dim, IDX_P if bare else IDX_0)
    n_s, n_d = noise.n_samples, deltas.size

    if bare:
        # both optical drives are static (no loop)
        scan = lambda d: model.cpt_drives(0.0, omega_0, d, cfg.omega_b, theta)
        amp = np.zeros((dim, dim), dtype=complex)
        osc_up, osc_lo = IDX_E, IDX_P
        freqs_d = np.zeros(deltas.size)
        h_of_delta = [model.build_hamiltonian(cfg, scan(d), 0.0, 0.0, m_n)[0]
                      for d in deltas]
        _, dh_n, dh_opt = _shift_derivatives(cfg, scan(deltas[0]), m_n)
    else:
        # microwaves and the |-><->|e> field are static; the |+><->|e>
        # coupling carries the loop oscillation at delta - omega_b
        def static_drives(d):
            d_pe, d_me = model.cpt_scan_detunings(d, cfg.omega_b)
            return [model.microwave_drive("+", omega_m),
                    model.microwave_drive("-", omega_m),
                    model.optical_drive("-", omega_0, detuning=d_me)]
        amp = np.zeros((dim, dim), dtype=complex)
        amp[IDX_E, IDX_P] = TWO_PI * 0.5 * omega_0 * np.exp(1j * (theta - math.pi))
        osc_up, osc_lo = IDX_E, IDX_P
        freqs_d = TWO_PI * (deltas - cfg.omega_b)
        h_of_delta = [model.build_hamiltonian(cfg, static_drives(d), 0.0, 0.0, m_n)[0]
                      for d in deltas]
        _, dh_n, dh_opt = _shift_derivatives(cfg, static_drives(deltas[0]), m_n)

    h_delta = np.stack(h_of_delta)                      # (n_d, dim, dim)

    if noise.variant == "ornstein_uhlenbeck":
        return _pulsed_block_ou(h_delta, freqs_d, amp, (osc_up, osc_lo), ops,
                                init, schedule, noise, dh_n, dh_opt,
                                ou_segments, n_s, n_d)

    dn, dopt = _bath_arrays(noise)
    h0 = (h_delta[None, :, :, :]
          + dn[:, None, None, None] * dh_n[None, None, :, :]
          + dopt[:, None, None, None] * dh_opt[None, None, :, :])
    h0 = h0.reshape(n_s * n_d, dim, dim)
    freqs = np.tile(freqs_d, n_s)
    osc_amp = amp[osc_up, osc_lo]
    emission, _ = engine.pulsed_emission_batch(
        h0, osc_amp, (osc_up, osc_lo), freqs, ops, init,
        schedule.t_pulse, schedule.dt, schedule.window, IDX_E)
    return emission.reshape(n_s, n_d)


def _pulsed_block_ou(h_delta, freqs_d, amp, osc_idx, ops, init, schedule,
                     noise, dh_n, dh_opt, ou_segments, n_s, n_d):
    """Piecewise-constant bath trajectory: chain segment propagations.

    The bath value is held at its node value over each segment, final
    states seed the next segment, and the oscillation clock continues
    across boundaries. Window averaging spans the full pulse (segment
    trapezoids share their boundary samples, so the chain reproduces
    the whole-pulse trapezoid exactly).
    """
    if schedule.window != (0.0, schedule.t_pulse):
        raise ValueError("OU pulsed runs average over the full pulse")
    dim = init.shape[0]
    nodes = np.linspace(0.0, schedule.t_pulse, ou_segments + 1)[:-1]
    traj, dopt = _ou_trajectories(noise, nodes)
    seg_t = schedule.t_pulse / ou_segments
    osc_amp = amp[osc_idx[0], osc_idx[1]]
    emission = np.zeros(n_s * n_d)
    states = np.ascontiguousarray(np.broadcast_to(init, (n_s * n_d, dim, dim)))
    freqs = np.tile(freqs_d, n_s)
    base = np.broadcast_to(h_delta, (n_s, n_d, dim, dim)).reshape(n_s * n_d, dim, dim)
    dopt_full = np.repeat(dopt, n_d)
    for k in range(ou_segments):
        dn_full = np.repeat(traj[:, k], n_d)
        h0 = (base + dn_full[:, None, None] * dh_n[None, :, :]
              + dopt_full[:, None, None] * dh_opt[None, :, :])
        seg_emission, states = engine.pulsed_emission_batch(
            h0, osc_amp, osc_idx, freqs, ops, states, seg_t, schedule.dt,
            (0.0, seg_t), IDX_E, t0=k * seg_t)
        emission += seg_emission / ou_segments
    return emission.reshape(n_s, n_d)


def _steady_block(cfg, rates, omega_m, omega_0, deltas, noise, theta, m_n):
    """Per-sample steady emission, shape (n_samples, n_deltas)."""
    n_s, n_d = noise.n_samples, deltas.size
    dn, dopt = _bath_arrays(noise)
    if omega_m == 0:
        return _steady_bare(cfg, rates, omega_0, deltas, dn, dopt, theta, m_n)

    dim = cfg.dim
    if dim != 4:
        raise ValueError("dressed CPT requires the 4-level scheme")
    ops = model.collapse_operators(cfg, rates)

    def static_drives(d):
        d_pe, d_me = model.cpt_scan_detunings(d, cfg.omega_b)
        return [model.microwave_drive("+", omega_m),
                model.microwave_drive("-", omega_m),
                model.optical_drive("-", omega_0, detuning=d_me)]

    amp = np.zeros((dim, dim), dtype=complex)
    amp[IDX_E, IDX_P] = TWO_PI * 0.5 * omega_0 * np.exp(1j * (theta - math.pi))
    _, dh_n, dh_opt = _shift_derivatives(cfg, static_drives(deltas[0]), m_n)
    out = np.empty((n_s, n_d))
    for j, d in enumerate(deltas):
        h_static, _ = model.build_hamiltonian(cfg, static_drives(d), 0.0, 0.0, m_n)
        freq = TWO_PI * (d - cfg.omega_b)
        for i in range(n_s):
            h = h_static + dn[i] * dh_n + dopt[i] * dh_opt
            if abs(d - cfg.omega_b) <= model.LOOP_CLOSURE_TOL:
                out[i, j] = engine.phase_averaged_static_emission(h, amp, ops, IDX_E)
            else:
                out[i, j] = engine.periodic_steady_emission(h, (amp, freq), ops, IDX_E)
    return out


def _steady_bare(cfg, rates, omega_0, deltas, dn, dopt, theta, m_n):
    """Three-level steady solve of the bare optical Lambda block."""
    if not cfg.include_excited:
        raise ValueError("bare CPT requires the optical level")
    if rates.branch_zero > 0:
        raise ValueError("bare steady state undefined with leakage into |0> "
                         "(population drains out of the Lambda system)")
    keep = [IDX_P, IDX_M, IDX_E]
    e_r = 2
    drives = model.cpt_drives(0.0, omega_0, cfg.omega_b, cfg.omega_b, theta)
    # the two-photon detuning enters the block Hamiltonian linearly
    h_base4, dh_n4, dh_opt4 = _shift_derivatives(cfg, drives, m_n)
    scan4 = model.build_hamiltonian(
        cfg, model.cpt_drives(0.0, omega_0, cfg.omega_b + 1.0, cfg.omega_b, theta),
        0.0, 0.0, m_n)[0] - h_base4
    ix = np.ix_(keep, keep)
    h_base, dh_n, dh_opt, dh_scan = (h_base4[ix], dh_n4[ix], dh_opt4[ix], scan4[ix])
    ops = [(c[ix], r) for c, r in model.collapse_operators(cfg, rates)]

    l_base = build_liouvillian(h_base, ops).matrix
    k_n = engine.commutator_superop(dh_n)
    k_opt = engine.commutator_superop(dh_opt)
    k_scan = engine.commutator_superop(dh_scan)

    n_s, n_d = dn.size, deltas.size
    scan_vals = deltas - cfg.omega_b
    l_batch = (l_base[None, None]
               + scan_vals[None, :, None, None] * k_scan[None, None]
               + dn[:, None, None, None] * k_n[None, None]
               + dopt[:, None, None, None] * k_opt[None, None])
    emission = engine.static_emission_batch(
        l_batch.reshape(n_s * n_d, *l_base.shape), len(keep), e_r)
    return emission.reshape(n_s, n_d)


def bare_cpt_fwhm(cfg, rates, power: float, noise: NoiseModel,
                  fwhm_guess: float, n_points: int = 121) -> float:
    """Fitted FWHM of the bare-spin steady CPT dip (MHz).

    The dip rides on the one-photon emission envelope of the scanned
    fields; a quadratic baseline term absorbs it (the symmetric scan
    split makes the envelope flat and even across the window).
    """
    omega_0 = power_to_rabi(power)
    width = max(fwhm_guess, analytic_cpt_fwhm(omega_0, rates.gamma_optical,
                                              rates.spin_coherence_decay))
    grid = cfg.omega_b + np.linspace(-3.0 * width, 3.0 * width, n_points)
    spec = cpt_spectrum(cfg, rates, 0.0, omega_0, grid, noise=noise, mode="steady")
    fit = _fit_central(spec, width, quadratic_baseline=True)
    if not fit.converged:
        raise ExtractionError("bare dip fit did not converge")
    return fit.model.peaks[0].fwhm


# ---------------------------------------------------------------------------
# Rabi calibration


@dataclass
class RabiTrace:
    times: np.ndarray
    population: np.ndarray
    omega_est: float
    metadata: dict = field(default_factory=dict)


def rabi_trace(cfg: SystemConfig, rates: RelaxationRates, drive: DriveField,
               t_final: float, dt: float) -> RabiTrace:
    """Drive a single transition from |0> and extract the Rabi frequency.

    The dominant oscillation frequency of the target-level population
    is taken from the discrete Fourier peak, refined by quadratic
    interpolation of the log magnitude. Raises ExtractionError for a
    flat trace or when the trace is shorter than one period.
    """
    h, h_osc = model.build_hamiltonian(cfg, [drive])
    dim = cfg.dim
    rho0 = _initial_state(dim, IDX_0)
    ops = model.collapse_operators(cfg, rates)
    traj = propagate(h, rho0, t_final, dt, collapse_ops=ops, h_osc=h_osc)
    target = drive.transition[1]
    pop = np.array([s[target, target].real for s in traj.states])
    times = traj.times

    sig = pop - pop.mean()
    if np.max(np.abs(sig)) < 1e-9:
        raise ExtractionError("flat population trace: no oscillation to extract")
    spec = np.abs(np.fft.rfft(sig))
    k = int(np.argmax(spec[1:])) + 1
    if k >= spec.size - 1:
        raise ExtractionError("oscillation peak at the Nyquist edge")
    df = 1.0 / (times[-1] - times[0])
    # quadratic refinement on log magnitude
    with np.errstate(divide="ignore"):
        la, lb, lc = (math.log(max(spec[k - 1], 1e-300)),
                      math.log(max(spec[k], 1e-300)),
                      math.log(max(spec[k + 1], 1e-300)))
    denom = la - 2.0 * lb + lc
    shift = 0.5 * (la - lc) / denom if abs(denom) > 1e-300 else 0.0
    freq = (k + shift) * df
    if freq <= 0 or 1.0 / freq > (times[-1] - times[0]):
        raise ExtractionError("trace shorter than one oscillation period")
    return RabiTrace(times=times, population=pop, omega_est=freq,
                     metadata=dict(drive_omega=drive.omega, t_final=t_final, dt=dt))


# ---------------------------------------------------------------------------
# sweeps


def _crossing_width(x, y):
    """Half-depth width and minimum position of the deepest dip.

    Walks outward from the minimum to the half-depth crossings with
    linear interpolation; robust seed for the Lorentzian fit and for
    sizing refined scan windows.
    """
    j = int(np.argmin(y))
    base = float(np.percentile(y, 80))
    half = 0.5 * (base + y[j])
    lo = j
    while lo > 0 and y[lo] < half:
        lo -= 1
    hi = j
    while hi < y.size - 1 and y[hi] < half:
        hi += 1

    def interp(a, b):
        if y[b] == y[a]:
            return x[b]
        return x[a] + (half - y[a]) * (x[b] - x[a]) / (y[b] - y[a])

    x_lo = interp(lo + 1, lo) if lo < j else x[0]
    x_hi = interp(hi - 1, hi) if hi > j else x[-1]
    return x_hi - x_lo, x[j]


def measure_central_fwhm(cfg, rates, omega_m, omega_0, noise=None,
                         schedule=None, mode="pulsed", theta=math.pi,
                         width_guess=None, n_points=81, max_refine=4):
    """Fitted FWHM of the central dip with adaptive window sizing.

    Starts from a width guess (the power-broadening law by default,
    which can overestimate a saturated dressed dip by large factors),
    measures the half-depth crossing width, and rescans until the dip
    is resolved by at least five grid steps and fills a reasonable
    fraction of the window. Returns (fwhm, fwhm_err, center, fit).
    """
    if noise is None:
        noise = NoiseModel()
    if mode == "pulsed" and schedule is None:
        schedule = PulseSchedule()
    if width_guess is None:
        width_guess = expected_central_fwhm(
            rates, omega_0, pulsed_t=schedule.t_pulse if schedule else None,
            sigma_n=noise.sigma, bare=omega_m == 0)
    span = 3.0 * width_guess
    center = cfg.omega_b
    spec = None
    for _ in range(max_refine):
        grid = center + np.linspace(-span, span, n_points)
        spec = cpt_spectrum(cfg, rates, omega_m, omega_0, grid, noise=noise,
                            schedule=schedule, mode=mode, theta=theta)
        step = 2.0 * span / (n_points - 1)
        w_est, dip_pos = _crossing_width(grid, spec.signal)
        if w_est < 5.0 * step:
            span, center = max(3.0 * w_est, 10.0 * step * 3.0 / 5.0), dip_pos
        elif w_est > 0.8 * span:
            span = 3.0 * w_est
        else:
            break
    fit = _fit_central(spec, max(w_est, 2.0 * step), quadratic_baseline=True)
    if not fit.converged:
        raise ExtractionError("central dip fit did not converge")
    pk = fit.model.peaks[0]
    err = analysis.fwhm_of(fit, 0)[1]
    return pk.fwhm, err, pk.center, fit


def _fit_central(spec, width_guess, quadratic_baseline=False):
    # scans are built centered on the expected dip; seed there rather
    # than at the global minimum, which noise or the envelope can move
    x = spec.detunings
    center = 0.5 * (x[0] + x[-1])
    j = int(np.argmin(np.abs(x - center)))
    base = float(np.percentile(spec.signal, 80))
    depth = max(base - float(spec.signal[j]), 1e-3 * float(np.ptp(spec.signal)))
    init = analysis.LorentzianModel(
        baseline=base,
        peaks=[analysis.LorentzianPeak(center=float(x[j]), fwhm=width_guess,
                                       amplitude=depth, sign=-1)])
    return analysis.fit_lorentzians(spec, 1, init=init,
                                    quadratic_baseline=quadratic_baseline)


def linewidth_vs_power(cfg: SystemConfig, rates: RelaxationRates, omega_m: float,
                       powers, dressed: bool = True, noise: NoiseModel = None,
                       schedule: PulseSchedule = None, mode: str = "pulsed",
                       n_points: int = 81, theta: float = math.pi) -> SweepResult:
    """Central-dip FWHM as a function of incident optical power (nW).

    Bare mode (dressed=False) runs omega_m = 0 from |+>; pulsed mode is
    the default so transit-time broadening is included.
    """
    powers = list(powers)
    if not powers:
        raise ValueError("empty power list")
    if noise is None:
        noise = NoiseModel()
    if mode == "pulsed" and schedule is None:
        schedule = PulseSchedule()
    w_m = omega_m if dressed else 0.0
    points = []
    for p in powers:
        omega_0 = power_to_rabi(p)
        try:
            fwhm, err, center, fit = measure_central_fwhm(
                cfg, rates, w_m, omega_0, noise=noise, schedule=schedule,
                mode=mode, theta=theta, n_points=n_points)
            points.append(SweepPoint(value=p, fwhm=fwhm, fwhm_err=err,
                                     status="ok", center=center,
                                     depth=fit.model.peaks[0].amplitude,
                                     diagnostics=dict(residual_rms=fit.residual_rms,
                                                      iterations=fit.iterations)))
        except Exception as exc:
            points.append(SweepPoint(value=p, fwhm=float("nan"),
                                     fwhm_err=float("nan"), status="failed",
                                     diagnostics=dict(error=str(exc))))
    return SweepResult(variable="power_nw", points=points,
                       metadata=dict(omega_m=w_m, dressed=dressed, mode=mode))


def _sideband_windows_overlap(omega_m, central_width):
    split = omega_m / SQRT2
    return 0.4 * split + 0.5 * central_width >= split


def _spectrum_with_sidebands(cfg, rates, omega_m, omega_0, noise, schedule,
                             mode, theta, n_points=161):
    width = expected_central_fwhm(rates, omega_0,
                                  pulsed_t=schedule.t_pulse if schedule else None)
    split = omega_m / SQRT2
    span = split + max(0.4 * split, 3.0 * width)
    grid = cfg.omega_b + np.linspace(-span, span, n_points)
    return cpt_spectrum(cfg, rates, omega_m, omega_0, grid, noise=noise,
                        schedule=schedule, mode=mode, theta=theta), width


def _fit_central_and_sidebands(spec, cfg, omega_m, width_guess):
    """Joint three-dip fit seeded at the predicted resonance positions."""
    centers = cpt_resonance_positions(omega_m, cfg.omega_b)[1:4]
    base = float(np.percentile(spec.signal, 90))
    peaks = []
    for c in centers:
        j = int(np.argmin(np.abs(spec.detunings - c)))
        depth = max(base - spec.signal[j], 1e-3 * np.ptp(spec.signal))
        peaks.append(analysis.LorentzianPeak(center=float(c), fwhm=width_guess,
                                             amplitude=float(depth), sign=-1))
    init = analysis.LorentzianModel(baseline=base, peaks=peaks)
    return analysis.fit_lorentzians(spec, 3, init=init)


def linewidth_vs_omega_m(cfg: SystemConfig, rates: RelaxationRates, omega_m_list,
                         power: float, which: str = "central",
                         noise: NoiseModel = None, schedule: PulseSchedule = None,
                         mode: str = "pulsed", theta: float = math.pi) -> SweepResult:
    """FWHM of the central dip or first sideband versus dressing amplitude.

    Sideband positions are seeded from the dressed-level splitting; the
    three dips are fitted jointly, and points where the sideband
    windows overlap the central dip are flagged "overlap".
    """
    if which not in ("central", "first_sideband"):
        raise ValueError("which must be 'central' or 'first_sideband'")
    omega_m_list = list(omega_m_list)
    if not omega_m_list:
        raise ValueError("empty omega_m list")
    if noise is None:
        noise = NoiseModel()
    if mode == "pulsed" and schedule is None:
        schedule = PulseSchedule()
    omega_0 = power_to_rabi(power)
    points = []
    for w_m in omega_m_list:
        spec, width = _spectrum_with_sidebands(cfg, rates, w_m, omega_0, noise,
                                               schedule if mode == "pulsed" else None,
                                               mode, theta)
        try:
            fit = _fit_central_and_sidebands(spec, cfg, w_m, width)
            ctr, lo_sb, hi_sb = _classify_three_dips(fit, cfg.omega_b)
            overlap = _sideband_windows_overlap(w_m, fit.model.peaks[ctr].fwhm)
            if which == "central":
                pk_idx = ctr
            else:
                pk_idx = hi_sb if (fit.model.peaks[hi_sb].fwhm
                                   <= fit.model.peaks[lo_sb].fwhm) else lo_sb
            pk = fit.model.peaks[pk_idx]
            err = analysis.fwhm_of(fit, pk_idx)[1]
            status = "ok" if fit.converged else "failed"
            if overlap and status == "ok":
                status = "overlap"
            points.append(SweepPoint(value=w_m, fwhm=pk.fwhm, fwhm_err=err,
                                     status=status, center=pk.center,
                                     depth=pk.amplitude,
                                     diagnostics=dict(residual_rms=fit.residual_rms)))
        except Exception as exc:
            points.append(SweepPoint(value=w_m, fwhm=float("nan"),
                                     fwhm_err=float("nan"), status="failed",
                                     diagnostics=dict(error=str(exc))))
    return SweepResult(variable="omega_m_mhz", points=points,
                       metadata=dict(power_nw=power, which=which, mode=mode))


def _classify_three_dips(fit, omega_b):
    """Indices of (central, lower sideband, upper sideband) peaks."""
    centers = np.array([p.center for p in fit.model.peaks])
    ctr = int(np.argmin(np.abs(centers - omega_b)))
    rest = [i for i in range(len(centers)) if i != ctr]
    lo = min(rest, key=lambda i: centers[i])
    hi = max(rest, key=lambda i: centers[i])
    return ctr, lo, hi


def splitting_vs_omega_m(cfg: SystemConfig, rates: RelaxationRates, omega_m_list,
                         power: float, noise: NoiseModel = None,
                         mode: str = "steady", schedule: PulseSchedule = None,
                         theta: float = math.pi) -> SweepResult:
    """Fitted first-sideband offset from the central dip, per omega_m.

    The fitted splitting tracks the dressed-level gap omega_m/sqrt2.
    Unresolved sidebands (separation below the fitted width) are
    flagged instead of dropped.
    """
    omega_m_list = list(omega_m_list)
    if not omega_m_list:
        raise ValueError("empty omega_m list")
    if noise is None:
        noise = NoiseModel()
    omega_0 = power_to_rabi(power)
    points = []
    for w_m in omega_m_list:
        spec, width = _spectrum_with_sidebands(cfg, rates, w_m, omega_0, noise,
                                               schedule, mode, theta)
        try:
            fit = _fit_central_and_sidebands(spec, cfg, w_m, width)
            ctr, lo_sb, hi_sb = _classify_three_dips(fit, cfg.omega_b)
            pks = fit.model.peaks
            split = 0.5 * (abs(pks[hi_sb].center - pks[ctr].center)
                           + abs(pks[lo_sb].center - pks[ctr].center))
            resolved = split > 0.5 * max(pks[ctr].fwhm, pks[hi_sb].fwhm, pks[lo_sb].fwhm)
            cov_scale = analysis.fwhm_of(fit, hi_sb)[1]
            points.append(SweepPoint(
                value=w_m, fwhm=split, fwhm_err=cov_scale,
                status="ok" if (fit.converged and resolved) else "unresolved",
                center=pks[ctr].center, depth=pks[ctr].amplitude,
                diagnostics=dict(residual_rms=fit.residual_rms,
                                 centers=[p.center for p in pks])))
        except Exception as exc:
            points.append(SweepPoint(value=w_m, fwhm=float("nan"),
                                     fwhm_err=float("nan"), status="failed",
                                     diagnostics=dict(error=str(exc))))
    return SweepResult(variable="omega_m_mhz", points=points,
                       metadata=dict(power_nw=power, observable="splitting_mhz",
                                     mode=mode))
