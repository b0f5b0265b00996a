"""Dense complex-matrix engine for Markovian open-system dynamics.

Everything here is basis agnostic: Hamiltonians are square complex
matrices in angular units (rad/us), density matrices are trace-one
Hermitian positive matrices, and the Lindblad generator is represented
as a dense superoperator acting on column-stacked density matrices.
Systems are small (dim <= 12), so dense linear algebra is used
throughout.

All functions are pure; none of them mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonUniqueSteadyStateError(ValueError):
    """The Lindblad generator has more than one steady state."""


class ConvergenceError(RuntimeError):
    """Fixed-step integration failed to meet its accuracy criterion."""


# Tolerances used by the validators. Trace drift and Hermiticity are
# preserved exactly by the integrator in exact arithmetic, so these
# bounds only absorb floating-point roundoff.
HERMITICITY_TOL = 1e-10
TRACE_TOL = 1e-9
EIGENVALUE_TOL = 1e-8


def vec(rho: np.ndarray) -> np.ndarray:
    """Column-stack a matrix (Fortran order)."""
    return np.asarray(rho).flatten(order="F")


def unvec(x: np.ndarray, dim: int) -> np.ndarray:
    """Inverse of :func:`vec`."""
    return np.asarray(x).reshape((dim, dim), order="F")


def hermiticity_defect(a: np.ndarray) -> float:
    """Largest element of ``a - a^H``."""
    return float(np.max(np.abs(a - a.conj().T)))


def require_hermitian(h: np.ndarray, tol: float = 1e-12, name: str = "H") -> None:
    defect = hermiticity_defect(h)
    if defect > tol:
        raise ValueError(f"{name} is not Hermitian (max defect {defect:.3e} > {tol:.1e})")


def validate_density_matrix(rho: np.ndarray,
                            herm_tol: float = HERMITICITY_TOL,
                            trace_tol: float = TRACE_TOL,
                            eig_tol: float = EIGENVALUE_TOL) -> None:
    """Raise ValueError unless rho is Hermitian, unit trace and positive."""
    rho = np.asarray(rho)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError(f"density matrix must be square, got shape {rho.shape}")
    defect = hermiticity_defect(rho)
    if defect > herm_tol:
        raise ValueError(f"density matrix not Hermitian (defect {defect:.3e})")
    tr = np.trace(rho)
    if abs(tr - 1.0) > trace_tol:
        raise ValueError(f"density matrix trace {tr} deviates from 1")
    w = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))
    if w.min() < -eig_tol:
        raise ValueError(f"density matrix has negative eigenvalue {w.min():.3e}")


@dataclass(frozen=True)
class Liouvillian:
    """Lindblad generator as a dense dim^2 x dim^2 matrix.

    Acts on column-stacked density matrices; entries are in rad/us.
    """

    matrix: np.ndarray
    dim: int

    def __post_init__(self):
        d2 = self.dim * self.dim
        if self.matrix.shape != (d2, d2):
            raise ValueError(f"Liouvillian matrix shape {self.matrix.shape} "
                             f"does not match dim {self.dim}")

    def trace_preservation_defect(self) -> float:
        """Norm of vec(I)^H . L, zero for a trace-preserving generator."""
        tr_row = vec(np.eye(self.dim)).conj()
        return float(np.linalg.norm(tr_row @ self.matrix))


@dataclass
class Trajectory:
    """Time-ordered density matrices from a propagation run."""

    times: np.ndarray
    states: np.ndarray          # shape (n_times, dim, dim)
    observables: dict = field(default_factory=dict)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def build_liouvillian(h: np.ndarray, collapse_ops=()) -> Liouvillian:
    """Assemble the Lindblad superoperator.

    Parameters
    ----------
    h : complex (d, d) array
        Hamiltonian in rad/us; must be Hermitian to 1e-12.
    collapse_ops : iterable of (operator, rate)
        Dimensionless collapse operators with rates in rad/us.
        Each contributes rate * (C rho C^H - {C^H C, rho}/2).
    """
    h = np.asarray(h, dtype=complex)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ValueError(f"Hamiltonian must be square, got {h.shape}")
    require_hermitian(h)
    d = h.shape[0]
    eye = np.eye(d)
    L = -1j * (np.kron(eye, h) - np.kron(h.T, eye))
    for c, rate in collapse_ops:
        c = np.asarray(c, dtype=complex)
        if c.shape != (d, d):
            raise ValueError(f"collapse operator shape {c.shape} does not match dim {d}")
        if rate < 0:
            raise ValueError(f"negative collapse rate {rate}")
        cdc = c.conj().T @ c
        L += rate * (np.kron(c.conj(), c)
                     - 0.5 * np.kron(eye, cdc)
                     - 0.5 * np.kron(cdc.T, eye))
    return Liouvillian(matrix=L, dim=d)


def steady_state(liouv: Liouvillian, null_tol: float = 1e-10) -> np.ndarray:
    """Unique trace-one solution of L rho = 0.

    Solved as the trace-constrained linear system {L.vec(rho)=0,
    tr(rho)=1} in the least-squares sense, which stays well behaved for
    nearly degenerate generators. Raises NonUniqueSteadyStateError when
    the null space has more than one direction within tolerance.
    """
    L = liouv.matrix
    d = liouv.dim
    sv = np.linalg.svd(L, compute_uv=False)
    scale = sv[0] if sv[0] > 0 else 1.0
    n_null = int(np.sum(sv < null_tol * scale))
    if n_null > 1:
        raise NonUniqueSteadyStateError(
            f"steady-state manifold is {n_null}-dimensional "
            f"(singular values {sv[-n_null:] / scale} relative)")
    tr_row = vec(np.eye(d)).conj()
    a = np.vstack([L, scale * tr_row[None, :]])
    b = np.zeros(d * d + 1, dtype=complex)
    b[-1] = scale
    x, *_ = np.linalg.lstsq(a, b, rcond=None)
    residual = np.linalg.norm(L @ x)
    if residual > 1e-8 * scale:
        raise ConvergenceError(
            f"steady-state residual {residual:.3e} exceeds 1e-8*||L|| = {1e-8 * scale:.3e}")
    rho = unvec(x, d)
    rho = 0.5 * (rho + rho.conj().T)
    rho = rho / np.trace(rho).real
    return rho


def _lindblad_rhs(h, rho, prepared_ops):
    out = -1j * (h @ rho - rho @ h)
    for c, cd, cdc, rate in prepared_ops:
        out += rate * (c @ rho @ cd - 0.5 * (cdc @ rho + rho @ cdc))
    return out


def propagate(h_static: np.ndarray,
              rho0: np.ndarray,
              t_final: float,
              dt: float,
              collapse_ops=(),
              h_osc=None,
              record_stride: int = 1,
              trace_tol: float = 1e-8) -> Trajectory:
    """Fixed-step fourth-order integration of the master equation.

    The Hamiltonian is H(t) = h_static + A exp(i w t) + A^H exp(-i w t)
    with (A, w) = ``h_osc`` (w in rad/us); omit ``h_osc`` for static
    evolution. The step is the requested ``dt`` rounded so an integer
    number of steps lands exactly on ``t_final``. If the trace drifts
    by more than ``trace_tol`` over the run, the step is halved and the
    run repeated; below a 1e-9 us step this raises ConvergenceError.

    Runge-Kutta increments of the Lindblad right-hand side are exactly
    traceless, so the drift criterion only ever triggers on
    floating-point blowup from a too-coarse step.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t_final < dt:
        raise ValueError("t_final must be at least one step")
    rho0 = np.asarray(rho0, dtype=complex)
    validate_density_matrix(rho0)
    h_static = np.asarray(h_static, dtype=complex)
    require_hermitian(h_static)
    d = h_static.shape[0]
    if rho0.shape != (d, d):
        raise ValueError("dimension mismatch between H and rho0")
    prepared = []
    for c, rate in collapse_ops:
        c = np.asarray(c, dtype=complex)
        cd = c.conj().T
        prepared.append((c, cd, cd @ c, float(rate)))
    if h_osc is not None:
        a_osc, freq = h_osc
        a_osc = np.asarray(a_osc, dtype=complex)
    else:
        a_osc, freq = None, 0.0

    def h_of(t):
        if a_osc is None:
            return h_static
        phase = np.exp(1j * freq * t)
        return h_static + phase * a_osc + np.conj(phase) * a_osc.conj().T

    while True:
        n_steps = max(1, int(round(t_final / dt)))
        step = t_final / n_steps
        n_rec = n_steps // record_stride + 1
        times = np.empty(n_rec)
        states = np.empty((n_rec, d, d), dtype=complex)
        rho = rho0.copy()
        times[0] = 0.0
        states[0] = rho
        k_rec = 1
        max_drift = 0.0
        ok = True
        for n in range(n_steps):
            t = n * step
            k1 = _lindblad_rhs(h_of(t), rho, prepared)
            k2 = _lindblad_rhs(h_of(t + 0.5 * step), rho + 0.5 * step * k1, prepared)
            k3 = _lindblad_rhs(h_of(t + 0.5 * step), rho + 0.5 * step * k2, prepared)
            k4 = _lindblad_rhs(h_of(t + step), rho + step * k3, prepared)
            rho = rho + (step / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            rho = 0.5 * (rho + rho.conj().T)
            drift = abs(np.trace(rho).real - 1.0)
            max_drift = max(max_drift, drift)
            if drift > trace_tol or not np.isfinite(rho).all():
                ok = False
                break
            if (n + 1) % record_stride == 0:
                times[k_rec] = (n + 1) * step
                states[k_rec] = rho
                k_rec += 1
        if ok:
            if k_rec < n_rec or times[k_rec - 1] != t_final:
                # make sure the final state is recorded
                if times[k_rec - 1] != n_steps * step:
                    times[k_rec] = n_steps * step
                    states[k_rec] = rho
                    k_rec += 1
            return Trajectory(times=times[:k_rec], states=states[:k_rec],
                              observables={"trace_drift": max_drift})
        dt = dt / 2.0
        if dt < 1e-9:
            raise ConvergenceError(
                f"step size underflow: dt fell below 1e-9 us with trace drift {max_drift:.3e}")


def expectation(rho: np.ndarray, op: np.ndarray) -> complex:
    """tr(O rho)."""
    rho = np.asarray(rho)
    op = np.asarray(op)
    if rho.shape != op.shape:
        raise ValueError(f"dimension mismatch: rho {rho.shape} vs operator {op.shape}")
    return complex(np.trace(op @ rho))
