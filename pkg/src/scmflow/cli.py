"""Command-line front end.

Subcommands: ``simulate`` (RK4 a config), ``solve`` (piecewise-analytic
open-link solution), ``diagram`` (flow-density CSV), ``stability``
(predicted vs fitted gap-decay rates), ``verify`` (run the property
checkers), ``jamwave`` (canned two-region ring relaxation experiment), and
``sweep`` (parameter grid with a manifest).

Exit codes: 0 success, 1 invalid input, 2 numerical failure, 3 property
verification found violations.  Diagnostics go to stderr, data products to
files or stdout.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import io
import json
import sys
import time
from itertools import product
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import analysis, analytic, engine, scenario_io, svg
from .core import ModelParams, NumericalError, OpenLink, ValidationError

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NUMERICAL = 2
EXIT_VIOLATIONS = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; our contract reserves 2 for
    # numerical failures, so remap to 1
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(ValidationError):
    pass


def _parse_range(text: str) -> list[float]:
    """Accept 'a:b:step' (inclusive grid) or a comma list 'v1,v2,...'."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValidationError(f"range must be START:STOP:STEP, got {text!r}")
        start, stop, step = (float(p) for p in parts)
        if step <= 0:
            raise ValidationError(f"range step must be > 0, got {step!r}")
        n = int(round((stop - start) / step))
        vals = [start + k * step for k in range(n + 1)]
        return [v for v in vals if v <= stop + 1e-12 * max(abs(stop), 1.0)]
    return [float(p) for p in text.split(",") if p.strip()]


def _load_config(path: str, permissive: bool) -> scenario_io.ScenarioConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ValidationError(f"cannot read config {path!r}: {e}") from e
    return scenario_io.parse_scenario(text, permissive=permissive)


def _write_product(text_or_fn, out: Optional[str]) -> None:
    if out is None:
        if callable(text_or_fn):
            buf = io.StringIO()
            text_or_fn(buf)
            sys.stdout.write(buf.getvalue())
        else:
            sys.stdout.write(text_or_fn)
    else:
        if callable(text_or_fn):
            with open(out, "w", encoding="utf-8", newline="") as fh:
                text_or_fn(fh)
        else:
            Path(out).write_text(text_or_fn, encoding="utf-8", newline="")


def _emit_svgs(trace: engine.SimTrace, out: Optional[str], every_kth: int) -> None:
    if out is None:
        raise ValidationError("--svg needs --out so the figures have a base name")
    base = Path(out)
    ts = svg.render_timespace_svg(trace, every_kth=every_kth)
    mm = svg.render_minmax_svg(trace)
    base.with_suffix(".timespace.svg").write_text(ts, encoding="utf-8", newline="")
    base.with_suffix(".minmax.svg").write_text(mm, encoding="utf-8", newline="")


def _cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config, args.permissive)
    scenario = cfg.build_scenario()
    icfg = cfg.integrator_config(horizon=args.horizon, dt=args.dt,
                                 sample_every=args.sample_every)
    trace = engine.simulate(scenario, icfg, permissive=args.permissive)
    _write_product(lambda fh: scenario_io.write_trace(trace, fh), args.out)
    if args.svg or "timespace_svg" in cfg.outputs or "minmax_svg" in cfg.outputs:
        _emit_svgs(trace, args.out, args.every_kth)
    print(f"simulated {scenario.n} vehicle(s) for {icfg.horizon:g} s "
          f"({len(trace.events)} passing event(s))", file=sys.stderr)
    return EXIT_OK


def _cmd_solve(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config, args.permissive)
    scenario = cfg.build_scenario()
    if not isinstance(scenario.topology, OpenLink):
        raise ValidationError("the analytic solver handles open links only; "
                              "use 'simulate' for rings")
    horizon = args.horizon if args.horizon is not None else \
        cfg.integrator.get("horizon", 100.0)
    traj = analytic.solve_passing(scenario, horizon=horizon,
                                  permissive=args.permissive)
    dt = args.dt if args.dt is not None else 0.1
    m = max(int(round(horizon / dt)), 1)
    trace = analytic.sample_trajectory(traj, np.linspace(0.0, horizon, m + 1))
    _write_product(lambda fh: scenario_io.write_trace(trace, fh), args.out)
    if args.svg:
        _emit_svgs(trace, args.out, args.every_kth)
    for ev in traj.events:
        print(f"pass at t={ev.t:.6f} s: vehicle {ev.passer} overtakes "
              f"vehicle {ev.passed}", file=sys.stderr)
    print(f"{len(traj.segments)} analytic segment(s), {len(traj.events)} "
          f"event(s)", file=sys.stderr)
    return EXIT_OK


def _cmd_diagram(args: argparse.Namespace) -> int:
    params = ModelParams(kappa=args.kappa, omega=args.omega)
    rho = np.array(_parse_range(args.rho))
    series = analysis.fundamental_diagram(params, args.vmax, args.L, rho)
    _write_product(lambda fh: scenario_io.write_diagram(series, fh), args.out)
    if args.svg:
        if args.out is None:
            raise ValidationError("--svg needs --out so the figure has a base name")
        Path(args.out).with_suffix(".svg").write_text(
            svg.render_diagram_svg(series), encoding="utf-8", newline="")
    print(f"peak flow {series.peak_q:.6g} veh/s at density "
          f"{series.peak_rho:.6g} veh/m", file=sys.stderr)
    return EXIT_OK


def _cmd_stability(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config, args.permissive)
    scenario = cfg.build_scenario()
    eq = analysis.platoon_equilibrium_gaps(scenario.vehicles, scenario.params)
    pred = analysis.string_stability_eigenvalues(scenario.vehicles, scenario.params)
    horizon = args.horizon if args.horizon is not None else 120.0
    dt = args.dt if args.dt is not None else 0.01
    rows = ["vehicle,lambda_predicted,rate_fitted,relative_error"]
    x_eq = analysis.platoon_positions(0.0, eq.gaps)
    for n in range(1, scenario.n):
        x0 = x_eq.copy()
        x0[n] -= 0.05 * eq.gaps[n - 1]
        vehicles = tuple(
            type(v)(id=v.id, v_max=v.v_max, x0=x0[v.id]) for v in scenario.vehicles
        )
        pert = type(scenario)(params=scenario.params, topology=scenario.topology,
                              vehicles=vehicles)
        trace = engine.simulate(pert, engine.IntegratorConfig(
            horizon=horizon, dt=dt, sample_every=max(int(0.1 / dt), 1)))
        rep = analysis.measure_decay_rates(trace, eq, scenario)
        rows.append(f"{n},{pred.eigenvalues[n - 1]!r},"
                    f"{rep.fitted_rates[n - 1]!r},{rep.relative_errors[n - 1]!r}")
    _write_product("\n".join(rows) + "\n", args.out)
    return EXIT_OK


def _cmd_verify(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config, args.permissive)
    scenario = cfg.build_scenario()
    icfg = cfg.integrator_config(horizon=args.horizon, dt=args.dt,
                                 sample_every=args.sample_every)
    trace = engine.simulate(scenario, icfg, permissive=args.permissive)
    report = analysis.verify_theorems(trace, scenario)
    print(str(report))
    if not report.all_ok:
        print("verification FAILED", file=sys.stderr)
        return EXIT_VIOLATIONS
    return EXIT_OK


def _cmd_jamwave(args: argparse.Namespace) -> int:
    params = ModelParams(kappa=args.kappa, omega=args.omega)
    scenario = engine.build_two_region_ring(
        params, args.L, args.rho, args.fraction, args.rho_jam, args.vmax)
    icfg = engine.IntegratorConfig(horizon=args.horizon, dt=args.dt,
                                   sample_every=args.sample_every)
    trace = engine.simulate(scenario, icfg)
    _write_product(lambda fh: scenario_io.write_trace(trace, fh), args.out)
    if args.svg:
        _emit_svgs(trace, args.out, args.every_kth)
    v_end = trace.velocities[-1]
    print(f"{scenario.n} vehicles, horizon {icfg.horizon:g} s: final velocity "
          f"spread {v_end.max() - v_end.min():.6g} m/s "
          f"(min {v_end.min():.6g}, max {v_end.max():.6g})", file=sys.stderr)
    return EXIT_OK


def _sweep_cell(payload: tuple) -> dict:
    text, overrides, out_dir, horizon, dt, sample_every, permissive = payload
    name = ",".join(f"{k}={v:g}" for k, v in sorted(overrides.items()))
    cell_dir = Path(out_dir) / name
    entry: dict = {"params": overrides, "dir": name}
    try:
        raw = json.loads(text)
        if "kappa" in overrides:
            raw["params"]["kappa"] = overrides["kappa"]
        if "omega" in overrides:
            raw["params"]["omega"] = overrides["omega"]
        if "rho" in overrides:
            if "generator" not in raw:
                raise ValidationError("--rho sweep needs a generator config")
            raw["generator"]["density"] = overrides["rho"]
            raw["generator"].pop("count", None)
        if "vmax" in overrides:
            if "generator" not in raw:
                raise ValidationError("--vmax sweep needs a generator config")
            raw["generator"]["v_max"] = overrides["vmax"]
        cfg = scenario_io.parse_scenario(json.dumps(raw), permissive=permissive)
        scenario = cfg.build_scenario()
        icfg = cfg.integrator_config(horizon=horizon, dt=dt,
                                     sample_every=sample_every)
        trace = engine.simulate(scenario, icfg, permissive=permissive)
        cell_dir.mkdir(parents=True, exist_ok=True)
        trace_path = cell_dir / "trace.csv"
        scenario_io.write_trace(trace, trace_path)
        digest = hashlib.sha256(trace_path.read_bytes()).hexdigest()
        entry.update(status="ok", trace="trace.csv", sha256=digest,
                     events=len(trace.events))
    except (ValidationError, NumericalError) as e:
        entry.update(status="failed", error=str(e))
    return entry


def _cmd_sweep(args: argparse.Namespace) -> int:
    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as e:
        raise ValidationError(f"cannot read config {args.config!r}: {e}") from e
    scenario_io.parse_scenario(text, permissive=args.permissive)  # template must be valid
    grids: dict[str, list[float]] = {}
    for key in ("kappa", "omega", "rho", "vmax"):
        val = getattr(args, key)
        if val is not None:
            grids[key] = _parse_range(val)
    if not grids:
        raise ValidationError("sweep needs at least one grid flag "
                              "(--kappa/--omega/--rho/--vmax)")
    if args.out is None:
        raise ValidationError("sweep needs --out DIRECTORY")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    keys = sorted(grids)
    cells = [dict(zip(keys, combo)) for combo in product(*(grids[k] for k in keys))]
    payloads = [
        (text, cell, str(out_dir), args.horizon, args.dt, args.sample_every,
         args.permissive)
        for cell in cells
    ]
    workers = max(args.parallel, 1)
    if workers == 1:
        entries = [_sweep_cell(p) for p in payloads]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_sweep_cell, payloads))
    entries.sort(key=lambda e: e["dir"])
    manifest = {
        "generated_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "config": args.config,
        "grid": {k: grids[k] for k in keys},
        "runs": entries,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    failed = sum(1 for e in entries if e["status"] != "ok")
    print(f"{len(entries)} run(s), {failed} failed; manifest at "
          f"{out_dir / 'manifest.json'}", file=sys.stderr)
    return EXIT_OK


def _build_parser() -> _Parser:
    p = _Parser(prog="scmflow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser, config: bool = True) -> None:
        if config:
            sp.add_argument("--config", required=True, help="scenario config path")
        sp.add_argument("--out", default=None, help="output path (default: stdout)")
        sp.add_argument("--horizon", type=float, default=None, help="horizon, s")
        sp.add_argument("--dt", type=float, default=None, help="step / sample spacing, s")
        sp.add_argument("--sample-every", type=int, default=None,
                        help="record every k-th step")
        sp.add_argument("--svg", action="store_true", help="also write SVG figures")
        sp.add_argument("--every-kth", type=int, default=1,
                        help="vehicle selection stride for the time-space figure")
        sp.add_argument("--permissive", action="store_true",
                        help="allow over-capacity initial states and unknown config keys")

    common(sub.add_parser("simulate", help="integrate a scenario with RK4"))
    common(sub.add_parser("solve", help="piecewise-analytic open-link solution"))

    d = sub.add_parser("diagram", help="flow-density fundamental diagram")
    d.add_argument("--kappa", type=float, required=True)
    d.add_argument("--omega", type=float, required=True)
    d.add_argument("--vmax", type=float, required=True)
    d.add_argument("--L", type=float, required=True)
    d.add_argument("--rho", required=True, help="density grid START:STOP:STEP")
    d.add_argument("--out", default=None)
    d.add_argument("--svg", action="store_true")

    common(sub.add_parser("stability",
                          help="gap-decay rates: prediction vs perturbed simulation"))
    common(sub.add_parser("verify", help="run the property checkers on a scenario"))

    j = sub.add_parser("jamwave", help="two-region ring relaxation experiment")
    j.add_argument("--L", type=float, default=1000.0)
    j.add_argument("--omega", type=float, default=10.0)
    j.add_argument("--vmax", type=float, default=6.0)
    j.add_argument("--kappa", type=float, default=10.0)
    j.add_argument("--rho", type=float, default=0.5)
    j.add_argument("--fraction", type=float, default=0.3,
                   help="fraction of the ring packed at jam density")
    j.add_argument("--rho-jam", type=float, default=1.03)
    j.add_argument("--horizon", type=float, default=500.0)
    j.add_argument("--dt", type=float, default=0.01)
    j.add_argument("--sample-every", type=int, default=100)
    j.add_argument("--out", default=None)
    j.add_argument("--svg", action="store_true")
    j.add_argument("--every-kth", type=int, default=50)

    s = sub.add_parser("sweep", help="run a parameter grid and write a manifest")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--kappa", default=None, help="grid: START:STOP:STEP or v1,v2,...")
    s.add_argument("--omega", default=None)
    s.add_argument("--rho", default=None)
    s.add_argument("--vmax", default=None)
    s.add_argument("--horizon", type=float, default=None)
    s.add_argument("--dt", type=float, default=None)
    s.add_argument("--sample-every", type=int, default=None)
    s.add_argument("--parallel", type=int, default=1)
    s.add_argument("--permissive", action="store_true")

    return p


_COMMANDS = {
    "simulate": _cmd_simulate,
    "solve": _cmd_solve,
    "diagram": _cmd_diagram,
    "stability": _cmd_stability,
    "verify": _cmd_verify,
    "jamwave": _cmd_jamwave,
    "sweep": _cmd_sweep,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Execute one subcommand; returns the exit code instead of exiting."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except (ValidationError, _UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
