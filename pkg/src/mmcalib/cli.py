"""End-to-end runs: synthetic market, multiscale calibration, artifacts.

Heavy imports happen inside functions so that the --threads cap can be
exported to the environment before numpy initializes its thread pools.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, replace

DEFAULT_SCHEDULE = (11, 21, 41, 81)


@dataclass
class RunConfig:
    spot: float = 100.0
    ref_vol: float = 0.2
    horizon: float = 1.0
    v0: float = 0.0
    schedule: tuple = DEFAULT_SCHEDULE
    delta: float = 5.0
    k_pts: float = 50.0
    epsilon: float = 1e-6
    max_sweeps: int = 500
    c_mart: float = 1e4
    w_price: float = 1.0
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    eliminate_phi_nu: bool = False
    anderson_depth: int = 5
    refine_mode: str = "interpolate"
    ssvi_eta: float = 1.6
    ssvi_lam: float = 0.4
    ssvi_rho: float = -0.15
    ssvi_theta_slope: float = 0.04
    maturities: tuple = (0.2, 0.4, 0.6, 0.8, 1.0)
    strike_counts: tuple = (5, 7, 9, 10, 12)
    output_dir: str = "calib_out"
    emit_plots: bool = False
    threads: int | None = None

    def validate(self):
        from .errors import ConfigError

        if any(b <= a for a, b in zip(self.schedule, self.schedule[1:])):
            raise ConfigError("schedule: levels must be strictly increasing")
        if len(self.strike_counts) != len(self.maturities):
            raise ConfigError("strike_counts: need one entry per maturity")
        for key in ("spot", "ref_vol", "horizon", "delta", "k_pts", "epsilon",
                    "w_price"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key}: must be positive")
        if self.c_mart < 0:
            raise ConfigError("c_mart: must be nonnegative")
        if self.refine_mode not in ("interpolate", "rebuild_reference"):
            raise ConfigError("refine_mode: expected 'interpolate' or "
                              "'rebuild_reference'")
        for level in self.schedule:
            n_steps = level - 1
            if n_steps < 1:
                raise ConfigError(f"schedule: level {level} has no timestep")
            h = self.horizon / n_steps
            for tau in self.maturities:
                k = round(tau / h)
                if abs(tau - k * h) > 1e-9 * max(1.0, tau):
                    raise ConfigError(
                        f"schedule: maturity {tau} off the level-{level} grid "
                        f"(h={h:g})")


def load_config(path: str) -> RunConfig:
    from .errors import ConfigError

    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"{path}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})")
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top-level JSON object expected")
    known = {f for f in RunConfig.__dataclass_fields__}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    for key in ("schedule", "maturities", "strike_counts"):
        if key in raw:
            raw[key] = tuple(raw[key])
    cfg = RunConfig(**raw)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

@dataclass
class LevelRecord:
    level: int
    n_points: int
    reports: list = field(default_factory=list)


def _solver_config(config: RunConfig, track_errors: bool = True):
    from .solver import SolverConfig

    return SolverConfig(epsilon=config.epsilon, max_sweeps=config.max_sweeps,
                        newton_tol=config.newton_tol,
                        newton_max_iter=config.newton_max_iter,
                        c_mart=config.c_mart, w_price=config.w_price,
                        eliminate_phi_nu=config.eliminate_phi_nu,
                        anderson_depth=config.anderson_depth,
                        track_errors=track_errors)


def run_calibration(config: RunConfig):
    """Generate the synthetic market and calibrate through the schedule.

    Returns (CalibrationResult, level_records, final_reference, instruments).
    """
    import numpy as np

    from . import diagnostics, solver
    from .acceleration import RefineMode, refine_level
    from .discretization import build_reference_measure
    from .dual import refresh_all
    from .market import SsviParams, generate_synthetic_instruments

    config.validate()
    params = SsviParams(eta=config.ssvi_eta, lam=config.ssvi_lam,
                        rho=config.ssvi_rho, theta_slope=config.ssvi_theta_slope)
    base_instruments = generate_synthetic_instruments(
        params, config.spot, maturities=config.maturities,
        strike_counts=config.strike_counts)
    x0 = float(np.log(config.spot))
    mode = (RefineMode.INTERPOLATE_POTENTIALS if config.refine_mode == "interpolate"
            else RefineMode.REBUILD_REFERENCE)
    grid_params = dict(x0=x0, v0=config.v0, delta=config.delta, K_pts=config.k_pts)

    records = []
    potentials = None
    reference = None
    ref_vol = config.ref_vol
    result = None
    for li, level in enumerate(config.schedule):
        n_steps = level - 1
        if reference is None:
            reference = build_reference_measure(
                T=config.horizon, n_steps=n_steps, maturities=config.maturities,
                ref_vol=ref_vol, **grid_params)
        tg = reference.time_grid
        instruments = [replace(inst, maturity_index=tg.maturity_map[inst.maturity])
                       for inst in base_instruments]
        sconf = _solver_config(config)
        result = solver.run(reference, instruments, sconf, potentials=potentials)
        rec = LevelRecord(level=li, n_points=level, reports=result.history)
        records.append(rec)

        if li + 1 < len(config.schedule):
            next_ref = build_reference_measure(
                T=config.horizon, n_steps=config.schedule[li + 1] - 1,
                maturities=config.maturities, ref_vol=ref_vol, **grid_params)
            if mode is RefineMode.REBUILD_REFERENCE:
                chars = diagnostics.extract_characteristics(
                    result.potentials, result.cache, reference, result.constraints)
                surface = diagnostics.local_vol_callable(chars, reference)
                potentials, reference = refine_level(
                    result.potentials, reference, next_ref, mode,
                    vol_surface=surface, grid_params=grid_params)
                ref_vol = reference.ref_vol
            else:
                potentials, reference = refine_level(
                    result.potentials, reference, next_ref, mode)

    refresh_all(result.cache, result.potentials, reference, result.constraints)
    instruments = [replace(inst,
                           maturity_index=reference.time_grid.maturity_map[inst.maturity])
                   for inst in base_instruments]
    summary = diagnostics.summarize(result.potentials, result.cache, reference,
                                    result.constraints, instruments, config.spot,
                                    [r for rec in records for r in rec.reports],
                                    result.converged)
    return summary, records, reference, instruments


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v))


def _write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(c) if isinstance(c, str) else _fmt(c)
                              for c in row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def emit_artifacts(summary, records, reference, instruments, config: RunConfig):
    """Write the CSV/JSON (and optional SVG) artifact set for one run."""
    from . import diagnostics
    from .errors import PriceOutOfBounds
    from .market import implied_vol
    from . import svgplot

    out = config.output_dir
    os.makedirs(out, exist_ok=True)

    rows = []
    for rec in records:
        for rep in rec.reports:
            rows.append((rep.sweep_index, rec.level, rec.n_points, rep.dual_value,
                         rep.e_max, rep.price_error_l2, rep.martingale_error_l2,
                         rep.wall_time * 1e3))
    _write_csv(os.path.join(out, "convergence.csv"),
               ["sweep", "level", "n_timesteps", "dual_value", "e_max",
                "price_err_l2", "mart_err_l2", "wall_ms"], rows)

    by_mat = {}
    for i, inst in enumerate(instruments):
        by_mat.setdefault(inst.maturity, []).append(i)
    for tau, ids in sorted(by_mat.items()):
        rows = []
        for i in sorted(ids, key=lambda j: instruments[j].strike):
            inst = instruments[i]
            try:
                miv = implied_vol(config.spot, inst.strike, tau,
                                  inst.target_price, inst.kind)
            except PriceOutOfBounds:
                miv = float("nan")
            rows.append((inst.strike, inst.kind.value, inst.target_price,
                         summary.model_prices[i], miv,
                         summary.model_implied_vols[i]))
        _write_csv(os.path.join(out, f"smile_{tau:g}.csv"),
                   ["strike", "kind", "target_price", "model_price",
                    "market_iv", "model_iv"], rows)

    table = diagnostics.local_vol_surface(summary.characteristics, reference)
    _write_csv(os.path.join(out, "local_vol.csv"), ["t", "x", "sigma"], table)

    for tau, k in sorted(reference.time_grid.maturity_map.items()):
        x = reference.grids[k].centers
        nu = summary.marginals[k]
        _write_csv(os.path.join(out, f"marginal_{k}.csv"), ["x", "density"],
                   zip(x, nu))

    meta = {
        "config": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in asdict(config).items()},
        "converged": bool(summary.converged),
        "price_error_l2": float(summary.price_error_l2),
        "martingale_error_l2": float(summary.martingale_error_l2),
        "specific_entropy_hkl": float(summary.specific_entropy[0]),
        "specific_entropy_limit": float(summary.specific_entropy[1]),
        "level_boundaries": [sum(len(r.reports) for r in records[:i + 1])
                             for i in range(len(records))],
        "conventions": {
            "martingale_error": "sqrt(h * sum_k E_nu[b_k^2]), marginal-mass "
                                "weighted so the norm is stable across grid "
                                "refinements",
            "prices": "undiscounted forward prices, zero rates",
        },
    }
    with open(os.path.join(out, "run_meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")

    if config.emit_plots:
        sweeps = list(range(len(summary.history)))
        perr = [r.price_error_l2 for r in summary.history]
        merr = [r.martingale_error_l2 for r in summary.history]
        emax = [r.e_max for r in summary.history]
        svgplot.line_plot(os.path.join(out, "convergence_price.svg"),
                          {"price error": (sweeps, perr)},
                          title="Price error", xlabel="sweep",
                          ylabel="L2 error", log_y=True)
        svgplot.line_plot(os.path.join(out, "convergence_mart.svg"),
                          {"martingale error": (sweeps, merr)},
                          title="Martingale error", xlabel="sweep",
                          ylabel="L2 error", log_y=True)
        svgplot.line_plot(os.path.join(out, "convergence_emax.svg"),
                          {"iterate change": (sweeps, emax)},
                          title="Relative iterate change", xlabel="sweep",
                          ylabel="e_max", log_y=True)
        for tau, ids in sorted(by_mat.items()):
            ids = sorted(ids, key=lambda j: instruments[j].strike)
            ks = [instruments[j].strike for j in ids]
            market = []
            for j in ids:
                try:
                    market.append(implied_vol(config.spot, instruments[j].strike,
                                              tau, instruments[j].target_price,
                                              instruments[j].kind))
                except PriceOutOfBounds:
                    market.append(float("nan"))
            model = [summary.model_implied_vols[j] for j in ids]
            svgplot.line_plot(os.path.join(out, f"smile_{tau:g}.svg"),
                              {"market": (ks, market), "model": (ks, model)},
                              title=f"Implied vol, t={tau:g}", xlabel="strike",
                              ylabel="vol")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="calibrate",
        description="Calibrate the local-volatility chain to a synthetic "
                    "option market.")
    parser.add_argument("--config", help="JSON config file (flat object)")
    parser.add_argument("--output-dir", help="artifact directory")
    parser.add_argument("--emit-plots", action="store_true")
    parser.add_argument("--threads", type=int)
    parser.add_argument("--schedule", help="comma-separated level sizes")
    parser.add_argument("--epsilon", type=float)
    args = parser.parse_args(argv)

    threads = args.threads
    if threads is None and os.environ.get("MMCALIB_THREADS"):
        try:
            threads = int(os.environ["MMCALIB_THREADS"])
        except ValueError:
            print("MMCALIB_THREADS: not an integer", file=sys.stderr)
            return 1
    if threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, str(threads))

    from .errors import ConfigError, MaturityOffGrid

    try:
        config = load_config(args.config) if args.config else RunConfig()
        if args.output_dir:
            config.output_dir = args.output_dir
        if args.emit_plots:
            config.emit_plots = True
        if args.schedule:
            try:
                config.schedule = tuple(int(s) for s in args.schedule.split(","))
            except ValueError:
                raise ConfigError("--schedule: expected comma-separated integers")
        if args.epsilon is not None:
            config.epsilon = args.epsilon
        config.validate()
    except (ConfigError, MaturityOffGrid, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    try:
        summary, records, reference, instruments = run_calibration(config)
    except (ConfigError, MaturityOffGrid) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    emit_artifacts(summary, records, reference, instruments, config)
    print(f"converged={summary.converged} "
          f"price_error_l2={summary.price_error_l2:.3e} "
          f"martingale_error_l2={summary.martingale_error_l2:.3e} "
          f"artifacts in {config.output_dir}")
    return 0 if summary.converged else 2


if __name__ == "__main__":
    sys.exit(main())
