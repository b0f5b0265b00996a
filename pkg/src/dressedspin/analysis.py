"""Spectral post-processing: multi-Lorentzian least squares, linewidth
extraction and linear regression for broadening laws.

Dips are fitted as negative-going Lorentzians on a free constant
baseline, matching emission spectra that sit on an unsubtracted
background. All parameters are normalized to order one internally
before damping; widths span more than an order of magnitude across the
sweeps and the raw normal equations are ill-conditioned otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class FitConvergenceError(RuntimeError):
    """The damped least-squares loop did not converge."""


class SingularFitError(RuntimeError):
    """Normal equations are numerically singular."""


@dataclass
class LorentzianPeak:
    center: float
    fwhm: float
    amplitude: float
    sign: int = -1          # -1 dip, +1 peak

    def __post_init__(self):
        if self.fwhm <= 0:
            raise ValueError("fwhm must be positive")
        if self.sign not in (-1, 1):
            raise ValueError("sign must be -1 (dip) or +1 (peak)")


@dataclass
class LorentzianModel:
    """Baseline plus Lorentzian components.

    The optional quadratic term curvature*(x - x_ref)^2 absorbs a
    slowly varying background (the one-photon emission envelope under
    a dip); it is fitted only when requested.
    """

    baseline: float
    peaks: list
    curvature: float = 0.0
    x_ref: float = 0.0

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = self.baseline + self.curvature * (x - self.x_ref) ** 2
        for p in self.peaks:
            hw2 = (0.5 * p.fwhm) ** 2
            out = out + p.sign * p.amplitude * hw2 / ((x - p.center) ** 2 + hw2)
        return out


@dataclass
class FitResult:
    model: LorentzianModel
    covariance: np.ndarray      # parameter order: baseline, then (c, w, a) per peak
    residual_rms: float
    converged: bool
    iterations: int
    diagnostics: dict = field(default_factory=dict)


def _pack(model, with_curvature=False):
    p = [model.baseline]
    for pk in model.peaks:
        p.extend((pk.center, pk.fwhm, pk.amplitude))
    if with_curvature:
        p.append(model.curvature)
    return np.array(p)


def _unpack(params, signs, x_ref=0.0, with_curvature=False):
    peaks = [LorentzianPeak(center=params[1 + 3 * k], fwhm=params[2 + 3 * k],
                            amplitude=params[3 + 3 * k], sign=signs[k])
             for k in range(len(signs))]
    curv = params[-1] if with_curvature else 0.0
    return LorentzianModel(baseline=params[0], peaks=peaks,
                           curvature=curv, x_ref=x_ref)


def _model_and_jacobian(x, params, signs, x_ref=0.0, with_curvature=False):
    n = x.size
    npar = params.size
    f = np.full(n, params[0])
    jac = np.zeros((n, npar))
    jac[:, 0] = 1.0
    # wild trial steps can overflow transiently; the caller rejects
    # non-finite costs
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(len(signs)):
            c, w, a = params[1 + 3 * k], params[2 + 3 * k], params[3 + 3 * k]
            s = signs[k]
            hw = 0.5 * w
            dx = x - c
            den = dx * dx + hw * hw
            g = hw * hw / den
            f += s * a * g
            jac[:, 1 + 3 * k] = s * a * hw * hw * 2.0 * dx / den ** 2
            jac[:, 2 + 3 * k] = s * a * hw * dx * dx / den ** 2
            jac[:, 3 + 3 * k] = s * g
        if with_curvature:
            dx2 = (x - x_ref) ** 2
            f += params[-1] * dx2
            jac[:, -1] = dx2
    return f, jac


def default_init(x, y, n_peaks, centers_hint=None):
    """Seed a model from local minima below the baseline.

    When resonance positions are known (simulated CPT spectra) pass
    them as ``centers_hint``; otherwise the n deepest local minima
    seed the peaks.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    base = float(np.percentile(y, 85))
    span = x[-1] - x[0]
    if centers_hint is not None:
        centers = list(centers_hint)[:n_peaks]
    else:
        inner = np.arange(1, x.size - 1)
        is_min = (y[inner] <= y[inner - 1]) & (y[inner] <= y[inner + 1]) & (y[inner] < base)
        cand = inner[is_min]
        cand = cand[np.argsort(y[cand])]
        centers = list(x[cand[:n_peaks]])
        while len(centers) < n_peaks:
            centers.append(float(x[np.argmin(y)]))
    peaks = []
    for c in centers:
        j = int(np.argmin(np.abs(x - c)))
        depth = max(base - y[j], 1e-3 * max(np.ptp(y), 1e-30))
        peaks.append(LorentzianPeak(center=float(c), fwhm=max(span / 20.0, 2.0 * _grid_step(x)),
                                    amplitude=float(depth), sign=-1))
    return LorentzianModel(baseline=base, peaks=peaks)


def _grid_step(x):
    return float(np.min(np.diff(np.sort(np.asarray(x, dtype=float)))))


def fit_lorentzians(spectrum, n_peaks: int, init: LorentzianModel = None,
                    max_iter: int = 500, rel_tol: float = 1e-10,
                    quadratic_baseline: bool = False) -> FitResult:
    """Damped least-squares fit of ``n_peaks`` Lorentzians plus baseline.

    ``spectrum`` is a Spectrum or an (x, y) pair. Marquardt damping is
    multiplied by ten whenever a trial step increases the cost and
    divided by ten on success; iteration stops when the relative cost
    change of an accepted step falls below ``rel_tol`` or after
    ``max_iter`` iterations. Fitted widths are kept above the grid
    spacing. The covariance is the usual linearized estimate
    (J^T J)^-1 scaled by the residual variance. With
    ``quadratic_baseline`` a curvature term centered on the window
    absorbs a slowly varying background.
    """
    if n_peaks < 1:
        raise ValueError("n_peaks must be at least 1")
    if hasattr(spectrum, "detunings"):
        x = np.asarray(spectrum.detunings, dtype=float)
        y = np.asarray(spectrum.signal, dtype=float)
    else:
        x, y = (np.asarray(v, dtype=float) for v in spectrum)
    if x.size != y.size or x.size < 3 * n_peaks + 2 + int(quadratic_baseline):
        raise ValueError("not enough points for the requested number of peaks")
    if init is None:
        init = default_init(x, y, n_peaks)
    if len(init.peaks) != n_peaks:
        raise ValueError("initial model has a different number of peaks")

    signs = [p.sign for p in init.peaks]
    x0 = 0.5 * (x[0] + x[-1])
    params = _pack(init, with_curvature=quadratic_baseline)
    step = _grid_step(x)
    if step <= 0:
        raise ValueError("detuning grid has duplicate points")

    # normalization scales: offsets and widths by the grid span,
    # baseline and amplitudes by the signal scale
    xs = max(x[-1] - x[0], step)
    ys = max(np.ptp(y), abs(np.median(y)), 1e-30)
    scales = np.empty_like(params)
    scales[0] = ys
    for k in range(n_peaks):
        scales[1 + 3 * k] = xs
        scales[2 + 3 * k] = xs
        scales[3 + 3 * k] = ys
    if quadratic_baseline:
        scales[-1] = ys / xs ** 2

    def clip(p):
        q = p.copy()
        for k in range(n_peaks):
            q[2 + 3 * k] = min(max(q[2 + 3 * k], step), 4.0 * xs)
            q[3 + 3 * k] = max(q[3 + 3 * k], 0.0)
        return q

    def eval_model(p):
        return _model_and_jacobian(x, p, signs, x_ref=x0,
                                   with_curvature=quadratic_baseline)

    params = clip(params)
    f, jac = eval_model(params)
    r = y - f
    cost = float(r @ r)
    lam = 1e-3
    tiny_cost = (1e-14 * ys) ** 2 * x.size
    n_iter = 0
    hit_tol = cost <= tiny_cost
    while n_iter < max_iter and not hit_tol:
        n_iter += 1
        jn = jac * scales[None, :]
        jtj = jn.T @ jn
        g = jn.T @ r
        diag = np.diag(jtj).copy()
        diag[diag <= 0] = 1e-30
        try:
            delta = np.linalg.solve(jtj + lam * np.diag(diag), g)
        except np.linalg.LinAlgError as exc:
            cond = float(np.linalg.cond(jtj))
            raise SingularFitError(
                f"normal equations singular (cond {cond:.2e})") from exc
        trial = clip(params + delta * scales)
        f_t, jac_t = eval_model(trial)
        r_t = y - f_t
        cost_t = float(r_t @ r_t)
        if not np.isfinite(cost_t):
            lam *= 10.0
            if lam > 1e14:
                break
            continue
        if cost_t <= cost:
            change = (cost - cost_t) / max(cost, 1e-300)
            moved = float(np.linalg.norm((trial - params) / scales))
            params, f, jac, r, cost = trial, f_t, jac_t, r_t, cost_t
            lam = max(lam / 10.0, 1e-14)
            if change < rel_tol or cost <= tiny_cost or moved <= 1e-11:
                hit_tol = True
        else:
            lam *= 10.0
            if lam > 1e14:
                break

    jn = jac * scales[None, :]
    jtj = jn.T @ jn
    grad = jn.T @ r
    # projected gradient: a width pinned at the grid-spacing bound (or an
    # amplitude pinned at zero) is stationary when the gradient pushes
    # further into the bound
    proj = grad.copy()
    for k in range(n_peaks):
        iw, ia = 2 + 3 * k, 3 + 3 * k
        if params[iw] <= step * (1.0 + 1e-9) and proj[iw] < 0:
            proj[iw] = 0.0
        if params[iw] >= 4.0 * xs * (1.0 - 1e-9) and proj[iw] > 0:
            proj[iw] = 0.0
        if params[ia] <= 0.0 and proj[ia] < 0:
            proj[ia] = 0.0
    grad_norm = float(np.linalg.norm(proj))
    cond = float(np.linalg.cond(jtj))
    dof = max(x.size - params.size, 1)
    sigma2 = cost / dof
    try:
        cov_n = np.linalg.inv(jtj)
    except np.linalg.LinAlgError:
        cov_n = np.linalg.pinv(jtj)
    cov = sigma2 * (cov_n * np.outer(scales, scales))
    cov = 0.5 * (cov + cov.T)
    # gradient scale of a statistically converged fit: residuals of pure
    # model mismatch or noise decorrelate from the Jacobian columns
    gscale = math.sqrt(float(np.max(np.diag(jtj))) * max(cost, 1e-300))
    converged = cost <= tiny_cost or grad_norm <= 1e-2 * gscale + 1e-300
    rms = math.sqrt(cost / x.size)
    model = _unpack(params, signs, x_ref=x0, with_curvature=quadratic_baseline)
    return FitResult(model=model, covariance=cov,
                     residual_rms=rms, converged=converged, iterations=n_iter,
                     diagnostics=dict(gradient_norm=grad_norm, condition=cond,
                                      damping=lam, cost=cost))


def fwhm_of(fit: FitResult, which_peak: int):
    """Fitted width of one peak with its standard error (MHz)."""
    if not fit.converged:
        raise FitConvergenceError("fit did not converge; no width available")
    if not 0 <= which_peak < len(fit.model.peaks):
        raise IndexError(f"peak index {which_peak} out of range")
    idx = 2 + 3 * which_peak
    var = max(fit.covariance[idx, idx], 0.0)
    return fit.model.peaks[which_peak].fwhm, math.sqrt(var)


@dataclass
class LinearFit:
    slope: float
    intercept: float
    slope_err: float
    intercept_err: float
    r_squared: float


def linear_fit(x, y, y_err=None) -> LinearFit:
    """Weighted ordinary least squares through closed-form normal equations."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size != y.size or x.size < 3:
        raise ValueError("linear fit needs at least 3 points")
    if np.ptp(x) == 0:
        raise ValueError("degenerate abscissa: zero variance")
    if y_err is None:
        w = np.ones_like(x)
    else:
        y_err = np.asarray(y_err, dtype=float)
        if np.any(y_err <= 0):
            raise ValueError("y_err must be positive")
        w = 1.0 / y_err ** 2
    sw = w.sum()
    sx = (w * x).sum()
    sy = (w * y).sum()
    sxx = (w * x * x).sum()
    sxy = (w * x * y).sum()
    det = sw * sxx - sx * sx
    slope = (sw * sxy - sx * sy) / det
    intercept = (sxx * sy - sx * sxy) / det
    resid = y - slope * x - intercept
    # covariance of the weighted normal equations; for unweighted
    # fits the residual variance sets the error scale
    var_slope = sw / det
    var_inter = sxx / det
    if y_err is None:
        dof = max(x.size - 2, 1)
        sigma2 = (resid ** 2).sum() / dof
        var_slope *= sigma2
        var_inter *= sigma2
    ybar = sy / sw
    ss_tot = (w * (y - ybar) ** 2).sum()
    ss_res = (w * resid ** 2).sum()
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return LinearFit(slope=float(slope), intercept=float(intercept),
                     slope_err=float(math.sqrt(var_slope)),
                     intercept_err=float(math.sqrt(var_inter)),
                     r_squared=float(r2))
