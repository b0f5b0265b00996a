"""Command-line front end.

Subcommands: spectrum, sweep, fit, oracle, rabi. Runs are described by
a YAML config (see config.py) or one of the shipped presets; outputs
are a CSV table plus a JSON sidecar echoing the full configuration.
CSV values are written with 17 significant digits so a fixed seed and
config reproduce byte-identical files.

Exit codes: 0 success, 1 configuration error, 2 numerical failure,
3 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis, experiments, model
from .analysis import FitConvergenceError, SingularFitError
from .config import (ConfigError, PRESET_NAMES, RunConfig, config_from_dict,
                     load_config, load_preset, preset_kind)
from .core import ConvergenceError, NonUniqueSteadyStateError
from .experiments import ExtractionError
from .noise import CalibrationError

NUMERICAL_ERRORS = (ConvergenceError, NonUniqueSteadyStateError, ExtractionError,
                    CalibrationError, FitConvergenceError, SingularFitError,
                    FloatingPointError, np.linalg.LinAlgError)


def _fmt(v) -> str:
    return f"{v:.17g}"


def write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) if isinstance(v, float) else str(v)
                              for v in row) + "\n")


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _resolve_config(args) -> RunConfig:
    if args.preset and args.config:
        raise ConfigError("give either --preset or --config, not both")
    if args.preset:
        cfg = load_preset(args.preset)
    elif args.config:
        cfg = load_config(args.config)
    else:
        raise ConfigError("one of --preset or --config is required")
    if args.seed is not None:
        cfg.noise.seed = args.seed
    return cfg


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_spectrum(args) -> int:
    cfg = _resolve_config(args)
    sys_cfg = cfg.system_config()
    rates = cfg.relaxation_rates()
    omega_0 = cfg.drives.resolved_omega_0()
    grid = cfg.scan_grid()
    schedule = cfg.pulse_schedule() if cfg.run.mode == "pulsed" else None
    t_start = time.perf_counter()
    spec = experiments.cpt_spectrum(sys_cfg, rates, cfg.drives.omega_m, omega_0,
                                    grid, noise=cfg.noise_model(),
                                    schedule=schedule, mode=cfg.run.mode,
                                    theta=cfg.drives.theta)
    runtime = time.perf_counter() - t_start
    out = _outdir(args)
    stderr = spec.stderr if spec.stderr is not None else np.zeros_like(spec.signal)
    write_csv(out / "spectrum.csv", ["detuning_mhz", "signal", "stderr"],
              zip(spec.detunings.tolist(), spec.signal.tolist(), stderr.tolist()))
    predictions = model.cpt_resonance_positions(cfg.drives.omega_m, cfg.system.omega_b) \
        if cfg.drives.omega_m > 0 else [cfg.system.omega_b]
    write_json(out / "spectrum.json", dict(
        config=cfg.echo(), resonance_predictions_mhz=list(predictions),
        runtime_s=runtime, seed=cfg.noise.seed, metadata=spec.metadata))
    print(f"wrote {out / 'spectrum.csv'} ({grid.size} points, {runtime:.1f} s)")
    return 0


def _sweep_one(payload):
    """Worker for one sweep value; returns (index, points, error)."""
    kind, cfg_dict, value = payload
    cfg = config_from_dict(cfg_dict)
    sys_cfg = cfg.system_config()
    rates = cfg.relaxation_rates()
    noise = cfg.noise_model()
    schedule = cfg.pulse_schedule() if cfg.run.mode == "pulsed" else None
    theta = cfg.drives.theta
    if kind == "power":
        res = experiments.linewidth_vs_power(
            sys_cfg, rates, cfg.drives.omega_m, [value],
            dressed=cfg.drives.omega_m > 0, noise=noise, schedule=schedule,
            mode=cfg.run.mode, theta=theta)
    elif kind == "omega_m":
        res = experiments.linewidth_vs_omega_m(
            sys_cfg, rates, [value], cfg.drives.power_nw or 1.0,
            which="first_sideband" if cfg.run.init == "sideband" else "central",
            noise=noise, schedule=schedule, mode=cfg.run.mode, theta=theta)
    else:  # splitting
        res = experiments.splitting_vs_omega_m(
            sys_cfg, rates, [value], cfg.drives.power_nw or 1.0,
            noise=noise, mode=cfg.run.mode, schedule=schedule, theta=theta)
    return res.points[0]


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    kind = args.sweep or (preset_kind(args.preset) if args.preset else None)
    if kind not in ("power", "omega_m", "splitting"):
        raise ConfigError("sweep kind must be power, omega_m or splitting "
                          "(--sweep or implied by the preset)")
    values = cfg.scan.values
    if not values:
        raise ConfigError("scan.values must list the sweep points")
    payloads = [(kind, cfg.echo(), float(v)) for v in values]
    t_start = time.perf_counter()
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            points = list(pool.map(_sweep_one, payloads))
    else:
        points = [_sweep_one(p) for p in payloads]
    runtime = time.perf_counter() - t_start
    out = _outdir(args)
    label = "splitting_mhz" if kind == "splitting" else "fwhm_mhz"
    write_csv(out / "sweep.csv",
              ["sweep_value", label, f"{label[:-4]}_err", "status"],
              [(p.value, p.fwhm, p.fwhm_err, p.status) for p in points])
    write_json(out / "sweep.json", dict(
        config=cfg.echo(), sweep=kind, runtime_s=runtime, seed=cfg.noise.seed,
        points=[dict(value=p.value, fwhm_mhz=p.fwhm, fwhm_err=p.fwhm_err,
                     status=p.status, center=p.center, depth=p.depth,
                     diagnostics=p.diagnostics) for p in points]))
    n_ok = sum(p.status == "ok" for p in points)
    print(f"wrote {out / 'sweep.csv'} ({n_ok}/{len(points)} points ok, {runtime:.1f} s)")
    return 0


def cmd_fit(args) -> int:
    path = Path(args.input)
    x, y = [], []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header[:2] != ["detuning_mhz", "signal"]:
            raise ConfigError(f"{path}: expected columns detuning_mhz,signal")
        for ln, line in enumerate(fh, start=2):
            parts = line.strip().split(",")
            try:
                x.append(float(parts[0]))
                y.append(float(parts[1]))
            except (ValueError, IndexError) as exc:
                raise ConfigError(f"{path}: malformed row {ln}: {line.strip()!r}") from exc
    if args.n_peaks < 1:
        raise ConfigError("--n-peaks must be at least 1")
    init = None
    if args.centers:
        init = analysis.default_init(np.array(x), np.array(y), args.n_peaks,
                                     centers_hint=args.centers)
    fit = analysis.fit_lorentzians((np.array(x), np.array(y)), args.n_peaks, init=init)
    payload = dict(
        converged=fit.converged, iterations=fit.iterations,
        residual_rms=fit.residual_rms, baseline=fit.model.baseline,
        peaks=[dict(center_mhz=p.center, fwhm_mhz=p.fwhm, amplitude=p.amplitude,
                    sign="dip" if p.sign < 0 else "peak")
               for p in fit.model.peaks],
        covariance=fit.covariance, diagnostics=fit.diagnostics)
    if args.out_json:
        write_json(args.out_json, payload)
        print(f"wrote {args.out_json}")
    else:
        json.dump(payload, sys.stdout, indent=2, sort_keys=True, default=_json_default)
        print()
    return 0


def cmd_oracle(args) -> int:
    if args.gamma <= 0:
        raise ConfigError("gamma must be positive")
    omega_0 = args.omega_0
    if omega_0 is None:
        omega_0 = experiments.power_to_rabi(args.power)
    fwhm = experiments.analytic_cpt_fwhm(omega_0, args.gamma, args.gamma_s)
    span = args.span if args.span else max(5.0 * fwhm, 1e-3)
    grid = np.linspace(-span, span, args.points)
    rho = experiments.analytic_cpt(grid, 0.0, omega_0, args.gamma, args.gamma_s,
                                   args.n_plus, args.n_minus)
    payload = dict(
        omega_0_mhz=omega_0, gamma_mhz=args.gamma, gamma_s_mhz=args.gamma_s,
        effective_fwhm_mhz=fwhm,
        detuning_mhz=grid, coherence_re=rho.real, coherence_im=rho.imag,
        coherence_abs=np.abs(rho))
    json.dump(payload, sys.stdout, indent=2, sort_keys=True, default=_json_default)
    print()
    return 0


def cmd_rabi(args) -> int:
    cfg = _resolve_config(args)
    sys_cfg = cfg.system_config()
    rates = cfg.relaxation_rates()
    drive = model.microwave_drive(args.target, cfg.drives.omega_m)
    t_final = args.t_final if args.t_final else 4.0 / max(cfg.drives.omega_m, 0.1)
    trace = experiments.rabi_trace(sys_cfg, rates, drive, t_final, cfg.schedule.dt)
    out = _outdir(args)
    write_csv(out / "rabi.csv", ["time_us", "population"],
              zip(trace.times.tolist(), trace.population.tolist()))
    write_json(out / "rabi.json", dict(config=cfg.echo(),
                                       omega_estimate_mhz=trace.omega_est,
                                       metadata=trace.metadata))
    print(f"wrote {out / 'rabi.csv'}; extracted Rabi frequency "
          f"{trace.omega_est:.6f} MHz")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dressedspin",
        description="Simulate dressed-spin CPT spectroscopy and extract linewidths.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, help="YAML run configuration")
        p.add_argument("--preset", type=str, choices=PRESET_NAMES,
                       help="shipped measurement preset")
        p.add_argument("--seed", type=int, default=None, help="override noise seed")
        p.add_argument("--workers", type=int, default=1,
                       help="process count for sweep points")
        p.add_argument("--out", type=str, default=".", help="output directory")

    p_spec = sub.add_parser("spectrum", help="emission vs two-photon detuning")
    common(p_spec)
    p_spec.set_defaults(func=cmd_spectrum)

    p_sweep = sub.add_parser("sweep", help="linewidth or splitting sweeps")
    common(p_sweep)
    p_sweep.add_argument("--sweep", choices=("power", "omega_m", "splitting"),
                         help="sweep kind (inferred from presets)")
    p_sweep.set_defaults(func=cmd_sweep)

    p_fit = sub.add_parser("fit", help="fit Lorentzian dips to a spectrum CSV")
    p_fit.add_argument("input", type=str, help="CSV written by the spectrum command")
    p_fit.add_argument("--n-peaks", type=int, default=1)
    p_fit.add_argument("--centers", type=float, nargs="*", default=None,
                       help="initial dip centers in MHz")
    p_fit.add_argument("--out-json", type=str, default=None)
    p_fit.set_defaults(func=cmd_fit)

    p_orc = sub.add_parser("oracle", help="closed-form three-level coherence")
    p_orc.add_argument("--gamma", type=float, default=6.5,
                       help="optical dipole decoherence, MHz")
    p_orc.add_argument("--gamma-s", type=float, default=0.0,
                       help="spin coherence decay, MHz")
    p_orc.add_argument("--omega-0", type=float, default=None,
                       help="optical Rabi frequency, MHz")
    p_orc.add_argument("--power", type=float, default=1.0,
                       help="incident power in nW (used when --omega-0 absent)")
    p_orc.add_argument("--n-plus", type=float, default=0.5)
    p_orc.add_argument("--n-minus", type=float, default=0.5)
    p_orc.add_argument("--span", type=float, default=None,
                       help="half width of the detuning grid, MHz")
    p_orc.add_argument("--points", type=int, default=201)
    p_orc.set_defaults(func=cmd_oracle)

    p_rabi = sub.add_parser("rabi", help="microwave Rabi calibration trace")
    common(p_rabi)
    p_rabi.add_argument("--target", choices=("+", "-"), default="+")
    p_rabi.add_argument("--t-final", type=float, default=None)
    p_rabi.set_defaults(func=cmd_rabi)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
