"""NV-specific physics: level scheme, rotating-frame Hamiltonians,
relaxation channels and the dressed-state algebra.

Level ordering is |0>, |+>, |->, |e> (indices 0..3). The |+-> pair is
split by the Zeeman frequency omega_b; two microwave fields drive
|0><->|+-> and two circularly polarized optical fields drive
|+-><->|e>. All user-facing frequencies are ordinary frequencies in
MHz; conversion to angular rad/us happens exactly once, inside
``build_hamiltonian`` and ``collapse_operators``.

Nuclear hyperfine structure is treated as a spectator: each nuclear
projection m_n = -1, 0, +1 contributes an independent block in which
the |+-> splitting is offset by m_n * a_hf. Blocks are simulated
separately and averaged with equal weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi
SQRT2 = math.sqrt(2.0)

# level indices in the canonical 4-level basis
IDX_0, IDX_P, IDX_M, IDX_E = 0, 1, 2, 3
LEVEL_NAMES = ("0", "+", "-", "e")

MICROWAVE_TRANSITIONS = ((IDX_0, IDX_P), (IDX_0, IDX_M))
OPTICAL_TRANSITIONS = ((IDX_P, IDX_E), (IDX_M, IDX_E))

# frequency mismatch below which a drive loop counts as closed (MHz)
LOOP_CLOSURE_TOL = 1e-9


@dataclass(frozen=True)
class SystemConfig:
    """Static description of the level scheme.

    omega_b : Zeeman splitting of |+-> in MHz.
    include_excited : include the optically excited level |e>
        (4 levels); otherwise the spin-only 3-level scheme.
    hyperfine : add the three nuclear-spectator blocks m_n = -1, 0, +1,
        each offsetting the |+-> splitting by m_n * a_hf.
    a_hf : full satellite offset between adjacent m_n blocks in MHz.
    """

    omega_b: float
    include_excited: bool = True
    hyperfine: bool = False
    a_hf: float = 4.4

    def __post_init__(self):
        if self.omega_b <= 0:
            raise ValueError("omega_b must be positive")
        if self.a_hf < 0:
            raise ValueError("a_hf must be nonnegative")
        if self.hyperfine and not self.include_excited:
            raise ValueError("hyperfine blocks require the 4-level scheme")

    @property
    def dim(self) -> int:
        """Dimension of one nuclear block."""
        return 4 if self.include_excited else 3

    @property
    def total_dim(self) -> int:
        return self.dim * (3 if self.hyperfine else 1)

    @property
    def nuclear_projections(self):
        return (-1, 0, 1) if self.hyperfine else (0,)


@dataclass(frozen=True)
class RelaxationRates:
    """Decay and dephasing rates, all ordinary frequencies in MHz.

    gamma_e : excited-state population decay.
    branch_plus/minus/zero : branching fractions of gamma_e into
        |+>, |->, |0>; must sum to one.
    gamma_phi_opt : extra pure dephasing of |e|, adding to the optical
        dipole decoherence.
    gamma_s : spin dephasing rate of the |+-> pair via the collapse
        operator diag(0, +1, -1, 0). Because the pair is shifted with
        opposite signs, the |+><-| coherence decays at 2*gamma_s.
    """

    gamma_e: float = 13.0
    branch_plus: float = 0.5
    branch_minus: float = 0.5
    branch_zero: float = 0.0
    gamma_phi_opt: float = 0.0
    gamma_s: float = 0.0

    def __post_init__(self):
        for name in ("gamma_e", "branch_plus", "branch_minus", "branch_zero",
                     "gamma_phi_opt", "gamma_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        total = self.branch_plus + self.branch_minus + self.branch_zero
        if self.gamma_e > 0 and abs(total - 1.0) > 1e-12:
            raise ValueError(f"branching fractions sum to {total}, expected 1")

    @property
    def gamma_optical(self) -> float:
        """Optical dipole decoherence gamma = gamma_e/2 + gamma_phi_opt (MHz)."""
        return 0.5 * self.gamma_e + self.gamma_phi_opt

    @property
    def spin_coherence_decay(self) -> float:
        """Decay rate of the |+><-| coherence, 2*gamma_s (MHz)."""
        return 2.0 * self.gamma_s


@dataclass(frozen=True)
class DriveField:
    """One coherent drive tone.

    transition : (lower, upper) level-index pair. Microwaves address
        |0><->|+-> only, optical fields |+-><->|e> only.
    omega : Rabi frequency in MHz (>= 0).
    detuning : drive frequency minus the nominal transition frequency
        (the delta_n = 0, m_n = 0 transition), in MHz.
    phase : drive phase in radians; the coupling enters as
        (omega/2) e^{i phase} |upper><lower| + h.c.
    """

    kind: str
    transition: tuple
    omega: float
    detuning: float = 0.0
    phase: float = 0.0

    def __post_init__(self):
        if self.kind not in ("microwave", "optical"):
            raise ValueError(f"unknown drive kind {self.kind!r}")
        if self.omega < 0:
            raise ValueError("Rabi frequency must be nonnegative")
        allowed = MICROWAVE_TRANSITIONS if self.kind == "microwave" else OPTICAL_TRANSITIONS
        if tuple(self.transition) not in allowed:
            raise ValueError(
                f"{self.kind} drive on forbidden transition {self.transition}; "
                f"allowed: {allowed}")


def microwave_drive(target: str, omega_m: float, detuning: float = 0.0,
                    phase: float = 0.0) -> DriveField:
    trans = (IDX_0, IDX_P) if target == "+" else (IDX_0, IDX_M)
    return DriveField("microwave", trans, omega_m, detuning, phase)


def optical_drive(target: str, omega_0: float, detuning: float = 0.0,
                  phase: float = 0.0) -> DriveField:
    trans = (IDX_P, IDX_E) if target == "+" else (IDX_M, IDX_E)
    return DriveField("optical", trans, omega_0, detuning, phase)


def cpt_scan_detunings(delta: float, omega_b: float):
    """Optical drive detunings realizing two-photon detuning ``delta``.

    The detuning is split symmetrically over the two fields, so the
    common (one-photon) detuning stays zero and the emission envelope
    is flat and even across the scan.
    Returns (detuning of the |+><->|e> field, detuning of |-><->|e>).
    """
    half = 0.5 * (delta - omega_b)
    return -half, half


def cpt_drives(omega_m: float, omega_0: float, delta: float, omega_b: float,
               theta: float = math.pi):
    """The canonical four-drive configuration of a dressed CPT scan.

    Two resonant microwaves at equal omega_m dress the spin; two
    optical fields at equal omega_0 are separated by the two-photon
    detuning ``delta``, split symmetrically between them. The
    |+><->|e> field carries the relative drive phase: ``theta``
    parametrizes the optical dark state (|+> + e^{i theta}|->)/sqrt(2),
    and theta = pi makes it coincide with the microwave dark state.

    With omega_m = 0 only the optical pair is returned (bare CPT).
    """
    d_pe, d_me = cpt_scan_detunings(delta, omega_b)
    drives = []
    if omega_m > 0:
        drives.append(microwave_drive("+", omega_m))
        drives.append(microwave_drive("-", omega_m))
    drives.append(optical_drive("+", omega_0, detuning=d_pe, phase=theta - math.pi))
    drives.append(optical_drive("-", omega_0, detuning=d_me))
    return drives


# Frame-assignment precedence: microwaves pin the spin-level frames,
# the |-><->|e> optical field pins |e>; any leftover drive closes a
# loop and carries the residual oscillation.
_FRAME_PRECEDENCE = {
    ("microwave", (IDX_0, IDX_P)): 0,
    ("microwave", (IDX_0, IDX_M)): 1,
    ("optical", (IDX_M, IDX_E)): 2,
    ("optical", (IDX_P, IDX_E)): 3,
}


def build_hamiltonian(cfg: SystemConfig, drives, delta_n: float = 0.0,
                      delta_opt: float = 0.0, m_n: int = 0):
    """Rotating-frame Hamiltonian for one nuclear block.

    Every level is assigned a frame frequency by walking the drive
    graph in a fixed precedence order; a drive whose two levels are
    already framed either closes its loop exactly (static) or leaves a
    residual oscillation at the loop mismatch. The bath shift enters
    as +delta_n on |+> and -delta_n on |->, spectral diffusion as a
    common shift delta_opt of |e>, and the hyperfine block as
    +-(a_hf/2)*m_n on |+->.

    Returns
    -------
    (h_static, h_osc) where h_static is the (dim, dim) Hamiltonian in
    rad/us and h_osc is None for a static configuration or a pair
    (amplitude_matrix, freq_rad_per_us) contributing
    A e^{i w t} + A^H e^{-i w t}.
    """
    dim = cfg.dim
    drives = list(drives)
    seen = set()
    for dr in drives:
        if not isinstance(dr, DriveField):
            raise TypeError("drives must be DriveField instances")
        if dr.transition[1] == IDX_E and not cfg.include_excited:
            raise ValueError("optical drive requires the 4-level scheme")
        if tuple(dr.transition) in seen:
            raise ValueError(f"duplicate drive on transition {dr.transition}")
        seen.add(tuple(dr.transition))

    if m_n not in (-1, 0, 1):
        raise ValueError("m_n must be -1, 0 or +1")
    hf = 0.5 * cfg.a_hf * m_n if cfg.hyperfine else 0.0
    shifts = np.zeros(dim)
    shifts[IDX_P] = delta_n + hf
    shifts[IDX_M] = -delta_n - hf
    if cfg.include_excited:
        shifts[IDX_E] = delta_opt

    # frame offsets relative to the nominal level energies (MHz)
    frame = {IDX_0: 0.0}
    ordered = sorted(drives, key=lambda d: _FRAME_PRECEDENCE[(d.kind, tuple(d.transition))])
    static_drives, osc_drive, osc_freq = [], None, 0.0
    pending = list(ordered)
    while pending:
        progressed = False
        remaining = []
        for dr in pending:
            lo, up = dr.transition
            if lo in frame and up in frame:
                residual = (frame[up] - frame[lo]) - dr.detuning
                if abs(residual) <= LOOP_CLOSURE_TOL:
                    static_drives.append(dr)
                else:
                    if osc_drive is not None:
                        raise ValueError("more than one unclosed drive loop")
                    osc_drive, osc_freq = dr, residual
                progressed = True
            elif lo in frame:
                frame[up] = frame[lo] + dr.detuning
                static_drives.append(dr)
                progressed = True
            elif up in frame:
                frame[lo] = frame[up] - dr.detuning
                static_drives.append(dr)
                progressed = True
            else:
                remaining.append(dr)
        pending = remaining
        if pending and not progressed:
            # disconnected drive subgraph: anchor its lowest level
            dr = pending[0]
            frame[dr.transition[0]] = 0.0

    h = np.zeros((dim, dim), dtype=complex)
    for i in range(dim):
        h[i, i] = TWO_PI * (shifts[i] - frame.get(i, 0.0))
    for dr in static_drives:
        lo, up = dr.transition
        g = TWO_PI * 0.5 * dr.omega * np.exp(1j * dr.phase)
        h[up, lo] += g
        h[lo, up] += np.conj(g)

    h_osc = None
    if osc_drive is not None:
        lo, up = osc_drive.transition
        amp = np.zeros((dim, dim), dtype=complex)
        amp[up, lo] = TWO_PI * 0.5 * osc_drive.omega * np.exp(1j * osc_drive.phase)
        h_osc = (amp, TWO_PI * osc_freq)
    return h, h_osc


def collapse_operators(cfg: SystemConfig, rates: RelaxationRates):
    """Collapse channels for one nuclear block, rates in rad/us.

    Channels: radiative decay |e> -> |+>, |->, |0> with branching
    fractions of gamma_e; pure dephasing of |e> realizing the extra
    dipole decoherence gamma_phi_opt (channel rate 2*gamma_phi_opt so
    the |e><g| coherences lose exactly gamma_phi_opt); and the
    opposite-sign spin dephasing diag(0, +1, -1, 0) at rate gamma_s.
    Zero-rate channels are omitted.
    """
    dim = cfg.dim
    ops = []
    if cfg.include_excited and rates.gamma_e > 0:
        for target, frac in ((IDX_P, rates.branch_plus),
                             (IDX_M, rates.branch_minus),
                             (IDX_0, rates.branch_zero)):
            if frac > 0:
                c = np.zeros((dim, dim), dtype=complex)
                c[target, IDX_E] = 1.0
                ops.append((c, TWO_PI * rates.gamma_e * frac))
    if cfg.include_excited and rates.gamma_phi_opt > 0:
        c = np.zeros((dim, dim), dtype=complex)
        c[IDX_E, IDX_E] = 1.0
        ops.append((c, TWO_PI * 2.0 * rates.gamma_phi_opt))
    if rates.gamma_s > 0:
        c = np.zeros((dim, dim), dtype=complex)
        c[IDX_P, IDX_P] = 1.0
        c[IDX_M, IDX_M] = -1.0
        ops.append((c, TWO_PI * rates.gamma_s))
    return ops


def dressed_energies(omega_m: float, delta_n: float = 0.0):
    """Eigenfrequencies (E_l, E_d, E_u) of the dressed spin, in MHz.

    E_l = -sqrt(omega_m^2/2 + delta_n^2), E_d = 0, E_u = +sqrt(...).
    The dark state energy is pinned at zero and the gap depends on the
    bath shift only at second order, which is the protection mechanism.
    """
    if omega_m < 0:
        raise ValueError("omega_m must be nonnegative")
    gap = math.sqrt(0.5 * omega_m * omega_m + delta_n * delta_n)
    return (-gap, 0.0, gap)


def dressed_transform(omega_m: float) -> np.ndarray:
    """Unitary mapping dressed amplitudes to bare spin amplitudes.

    Columns are |l> = (|0> - |b>)/sqrt2, |d> = (|+> - |->)/sqrt2,
    |u> = (|0> + |b>)/sqrt2 with |b> = (|+> + |->)/sqrt2, expressed in
    the (|0>, |+>, |->) basis. For resonant equal-amplitude dressing
    the transform is independent of the drive strength; omega_m only
    sets the eigenvalue scale.
    """
    if omega_m <= 0:
        raise ValueError("dressed basis requires omega_m > 0")
    return np.array([
        [1 / SQRT2, 0.0, 1 / SQRT2],
        [-0.5, 1 / SQRT2, 0.5],
        [-0.5, -1 / SQRT2, 0.5],
    ], dtype=complex)


@dataclass(frozen=True)
class DressedAmplitudes:
    """Probability amplitudes on the dressed basis plus |e>."""

    c_d: complex
    c_l: complex
    c_u: complex
    c_e: complex = 0.0

    @property
    def norm(self) -> float:
        return math.sqrt(abs(self.c_d) ** 2 + abs(self.c_l) ** 2
                         + abs(self.c_u) ** 2 + abs(self.c_e) ** 2)


def eq1_amplitudes(psi, t: float, omega_m: float, omega_b: float,
                   nu: float) -> DressedAmplitudes:
    """Recover dressed amplitudes from a bare-basis state at time t.

    Inverts the interaction-picture decomposition in which the |+>
    coefficient carries e^{-i omega_b t}, the |0> coefficient carries
    e^{+i nu t} (nu is the microwave frequency driving |0><->|->) and
    the dressed amplitudes rotate at -+omega_m/sqrt2. The round trip
    amplitudes -> bare state -> amplitudes is the identity. Sign
    conventions follow the printed decomposition verbatim; see README.

    psi is (a_0, a_+, a_-, a_e) in the level-ordering convention;
    frequencies in MHz, t in us.
    """
    psi = np.asarray(psi, dtype=complex)
    if psi.shape != (4,):
        raise ValueError("psi must have 4 amplitudes (|0>, |+>, |->, |e>)")
    norm = np.linalg.norm(psi)
    if abs(norm - 1.0) > 1e-9:
        raise ValueError(f"state not normalized (|psi| = {norm})")
    a0, ap, am, ae = psi
    w_m = TWO_PI * omega_m / SQRT2
    s = ap * np.exp(1j * TWO_PI * omega_b * t) + am
    diff = SQRT2 * a0 * np.exp(-1j * TWO_PI * nu * t)
    c_d = (ap * np.exp(1j * TWO_PI * omega_b * t) - am) / SQRT2
    c_u = 0.5 * (s + diff) * np.exp(1j * w_m * t)
    c_l = 0.5 * (s - diff) * np.exp(-1j * w_m * t)
    return DressedAmplitudes(c_d=complex(c_d), c_l=complex(c_l),
                             c_u=complex(c_u), c_e=complex(ae))


def bare_state_from_amplitudes(amps: DressedAmplitudes, t: float, omega_m: float,
                               omega_b: float, nu: float) -> np.ndarray:
    """Forward map of the decomposition inverted by :func:`eq1_amplitudes`."""
    w_m = TWO_PI * omega_m / SQRT2
    e_m = np.exp(-1j * w_m * t)
    e_p = np.exp(1j * w_m * t)
    ap = (0.5 * amps.c_u * e_m + 0.5 * amps.c_l * e_p
          + amps.c_d / SQRT2) * np.exp(-1j * TWO_PI * omega_b * t)
    a0 = (amps.c_u * e_m / SQRT2 - amps.c_l * e_p / SQRT2) * np.exp(1j * TWO_PI * nu * t)
    am = 0.5 * amps.c_u * e_m + 0.5 * amps.c_l * e_p - amps.c_d / SQRT2
    return np.array([a0, ap, am, amps.c_e], dtype=complex)


def optical_dark_state_check(amps: DressedAmplitudes, theta: float,
                             tol: float = 1e-6):
    """Test whether amplitudes satisfy the optical dark-state condition.

    For a dark state (|+> + e^{i theta}|->)/sqrt2 the dressed
    amplitudes must obey (C_l + C_u)/C_d = sqrt2 (1 + e^{i theta}) /
    (1 - e^{i theta}). The right side diverges at theta = 0 mod 2*pi,
    which raises ValueError. Returns (passes, residual).
    """
    if abs(amps.c_d) == 0:
        raise ValueError("dark-state condition requires C_d != 0")
    phase = np.exp(1j * theta)
    denom = 1.0 - phase
    if abs(denom) < 1e-12:
        raise ValueError("dark-state condition diverges at theta = 0 mod 2*pi")
    target = SQRT2 * (1.0 + phase) / denom
    ratio = (amps.c_l + amps.c_u) / amps.c_d
    residual = abs(ratio - target)
    return bool(residual <= tol), float(residual)


def cpt_resonance_positions(omega_m: float, omega_b: float) -> np.ndarray:
    """Two-photon detunings of the five CPT resonances, in MHz, sorted.

    {omega_b - sqrt2 W, omega_b - W/sqrt2, omega_b, omega_b + W/sqrt2,
    omega_b + sqrt2 W} for dressing amplitude W: differences of the
    dressed eigenfrequencies reachable between the m_s = +1 and
    m_s = -1 parts of the dressed levels.
    """
    if omega_m < 0:
        raise ValueError("omega_m must be nonnegative")
    off = omega_m / SQRT2
    return omega_b + np.array([-2 * off, -off, 0.0, off, 2 * off])
