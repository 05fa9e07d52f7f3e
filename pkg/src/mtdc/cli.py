"""Command-line entry point: ``mtdc run|analyze|sweep <config>``.

Exit status: 0 success, 2 invalid configuration, 3 simulation diverged,
4 randomized soundness check found a counterexample.
"""
from __future__ import annotations

import argparse
import concurrent.futures as cf
import csv
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import plotting
from .analysis import (
    CERTIFIED,
    droop_asymptotics,
    stability_report,
    voltage_difference_bound,
)
from .config import ConfigError, RunConfig, load
from .controllers import ControllerError, Variant, assemble_closed_loop, optimal_dispatch
from .grid import TopologyError
from .sim import SimulationDiverged, simulate, steady_state_metrics

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_UNSOUND = 0, 2, 3, 4
DROOP_SWEEP = (1e-4, 1e-2, 1.0, 1e2, 1e4)


def _write(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _dispatch_weights(cfg: RunConfig, spec):
    F, G = cfg.objective()
    return (1.0 / spec.K_P if F is None else F), G


def write_stability(cfg: RunConfig, out: Path, system, grid) -> tuple[object, list[Path]]:
    report = stability_report(grid, system, cfg.rtol)
    paths = []
    if cfg.output["stability"]:
        paths.append(_write(out / "stability.txt", report.to_text()))
        paths.append(_write(out / "stability.json", report.to_json()))
    if cfg.output["figures"]:
        paths.append(plotting.eigenvalue_map(report.eigenvalues, out / "eigenvalues.png", f"{cfg.variant.value} closed loop"))
    return report, paths


def run_scenario(cfg: RunConfig, out: Path, stride: Optional[int] = None, log=print) -> int:
    """Analyze, simulate and write all artifacts for one configuration."""
    out.mkdir(parents=True, exist_ok=True)
    grid, spec, scenario = cfg.grid(), cfg.controller(), cfg.scenario()
    system = assemble_closed_loop(grid, spec, delay_voltage_sum=cfg.delay_voltage_sum)
    report, paths = write_stability(cfg, out, system, grid)
    log(f"certificate: {report.certificate_verdict}  spectrum: {report.spectrum_verdict}  margin: {report.margin:+.6e}")

    stride = stride or cfg.output["stride"]
    try:
        traj = simulate(system, scenario, stride=stride)
    except SimulationDiverged as exc:
        log(f"error: {exc}; spectrum verdict (delay-free) was {report.spectrum_verdict}", file=sys.stderr)
        return EXIT_DIVERGED

    F, G = _dispatch_weights(cfg, spec)
    m = steady_state_metrics(traj, grid, spec, F, G)
    I_fin = scenario.I_inj_final
    u_star = optimal_dispatch(I_fin, F).u_star
    bound_opt = voltage_difference_bound(grid, I_fin + u_star)
    bound_obs = voltage_difference_bound(grid, I_fin + m.u_mean)
    metrics = {
        **m.to_dict(),
        "variant": cfg.variant.value,
        "spread_bound_at_optimum": bound_opt,
        "spread_bound_at_tail": bound_obs,
        "certificate_verdict": report.certificate_verdict,
        "spectrum_verdict": report.spectrum_verdict,
        "spectrum_margin": report.margin,
    }
    if cfg.output["trajectory"]:
        with open(out / "trajectory.csv", "w") as fh:
            traj.to_csv(fh)
        paths.append(out / "trajectory.csv")
    if cfg.output["metrics"]:
        paths.append(_write(out / "metrics.json", _json(metrics)))
    if cfg.output["figures"]:
        paths.append(plotting.step_response(traj, grid.V_nom, bound_obs, out / "step_response.png", f"{cfg.variant.value}, tau = {scenario.tau:g} s"))
    log("tail u [A]: " + ", ".join(f"{x:.6f}" for x in m.u_mean))
    log(f"u* [A]: " + ", ".join(f"{x:.6f}" for x in u_star))
    log(f"||u - u*||_inf = {m.u_error_inf:.6e} A  sum(u + I_inj) = {m.current_balance:.6e} A  voltage offset residual = {m.voltage_offset_residual:.6e} V")
    for p in paths:
        log(f"wrote {p}")
    return EXIT_OK


def analyze(cfg: RunConfig, out: Path, seed: Optional[int] = None, samples: int = 100, log=print) -> int:
    """Certificate and spectrum report; droop limits for droop configs.

    With ``seed`` set, also checks certificate soundness and the stationary
    voltage-spread bound on ``samples`` random networks of the same variant.
    """
    out.mkdir(parents=True, exist_ok=True)
    grid, spec = cfg.grid(), cfg.controller()
    system = assemble_closed_loop(grid, spec, delay_voltage_sum=cfg.delay_voltage_sum)
    report, paths = write_stability(cfg, out, system, grid)
    log(report.to_text().rstrip())
    status = EXIT_OK

    if cfg.variant is Variant.VDM:
        I = cfg.scenario().I_inj_final
        rows = droop_asymptotics(grid, I, DROOP_SWEEP)
        with open(out / "droop_limits.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k_P", "V_error_inf", "u_error_inf", "balance_error_inf"])
            w.writerows([[f"{x:.10e}" for x in r.as_row()] for r in rows])
        paths.append(out / "droop_limits.csv")
        if cfg.output["figures"]:
            u_star = optimal_dispatch(I, np.ones(grid.n)).u_star
            paths.append(plotting.droop_limits(rows, float(np.max(np.abs(-I - u_star))), out / "droop_limits.png"))

    if seed is not None:
        summary = randomized_checks(cfg.variant, seed, samples)
        paths.append(_write(out / "randomized_checks.json", _json(summary)))
        log(f"randomized checks (seed {seed}, {samples} networks): {summary['certified']} certified, "
            f"{summary['certified_not_hurwitz']} certified but not Hurwitz, {summary['bound_violations']} bound violations")
        if summary["certified_not_hurwitz"] or summary["bound_violations"]:
            status = EXIT_UNSOUND
    for p in paths:
        log(f"wrote {p}")
    return status


def randomized_checks(variant, seed: int, samples: int, rtol: float = 1e-13) -> dict:
    """Certificate soundness and spread-bound checks on seeded random networks."""
    from .ensembles import random_case
    from .sim import solve_equilibrium

    rng = np.random.default_rng(seed)
    certified = bad = violations = 0
    for _ in range(samples):
        grid, spec, I = random_case(rng, variant)
        system = assemble_closed_loop(grid, spec, I)
        rep = stability_report(grid, system, rtol)
        if rep.certificate_verdict == CERTIFIED:
            certified += 1
            bad += not rep.spectrum_stable
        if rep.spectrum_stable:
            x = solve_equilibrium(system)
            V, u = system.split_state(x)["V"], system.output(x)
            if np.ptp(V) > voltage_difference_bound(grid, I + u) * (1 + 1e-9):
                violations += 1
    return {
        "variant": Variant(variant).value,
        "seed": seed,
        "samples": samples,
        "spectrum_rtol": rtol,
        "certified": certified,
        "certified_not_hurwitz": bad,
        "bound_violations": violations,
    }


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _sweep_one(args) -> dict:
    data, path, value, out, simulate_runs = args
    cfg = RunConfig(data).with_value(path, value)
    cfg.output["figures"] = False
    sub = Path(out)
    quiet = lambda *a, **k: None  # noqa: E731
    row = {"value": value}
    if simulate_runs:
        code = run_scenario(cfg, sub, log=quiet)
        row["status"] = code
        if code == EXIT_OK:
            m = json.loads((sub / "metrics.json").read_text())
            for k in ("u_error_inf", "V_nom_error_inf", "current_balance", "voltage_offset_residual", "spectrum_margin"):
                row[k] = m[k]
    else:
        grid, spec = cfg.grid(), cfg.controller()
        rep = stability_report(grid, assemble_closed_loop(grid, spec, delay_voltage_sum=cfg.delay_voltage_sum), cfg.rtol)
        sub.mkdir(parents=True, exist_ok=True)
        _write(sub / "stability.json", rep.to_json())
        row.update(status=EXIT_OK, spectrum_margin=rep.margin)
        rep_c, rep_s = rep.certificate_verdict, rep.spectrum_verdict
        row.update(certificate_verdict=rep_c, spectrum_verdict=rep_s)
    return row


def sweep(cfg: RunConfig, out: Path, param: str, values: Sequence, jobs: int = 1, simulate_runs: bool = True, log=print) -> int:
    """Independent runs over one parameter; summary table and figure in ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    for v in values:  # validate every point before starting any run
        cfg.with_value(param, v)
    tasks = [(cfg.to_dict(), param, v, str(out / f"point_{k:03d}"), simulate_runs) for k, v in enumerate(values)]
    if jobs > 1:
        with cf.ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_one, tasks))
    else:
        rows = [_sweep_one(t) for t in tasks]
    keys = sorted({k for r in rows for k in r} - {"value"})
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([param] + keys)
        for r in rows:
            w.writerow([json.dumps(r["value"])] + [("" if r.get(k) is None else r.get(k)) for k in keys])
    numeric = {k: [r.get(k) for r in rows] for k in keys if all(isinstance(r.get(k), (int, float)) for r in rows) and k != "status"}
    if cfg.output["figures"] and numeric and all(isinstance(v, (int, float)) for v in values):
        plotting.sweep_summary(param, values, numeric, out / "sweep.png")
    log(f"wrote {out / 'sweep.csv'}")
    return max((r["status"] for r in rows), default=EXIT_OK)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtdc", description="MTDC droop and distributed averaging control: analysis and simulation.")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("config", help="run configuration file (TOML)")
        sp.add_argument("--out", type=Path, help="output directory (default: output.directory from the config)")
        sp.add_argument("--dump-config", action="store_true", help="print the normalized configuration and exit")

    r = sub.add_parser("run", help="analyze, simulate and write trajectory, metrics and reports")
    common(r)
    r.add_argument("--stride", type=int, help="record every k-th step in trajectory.csv")

    a = sub.add_parser("analyze", help="stability certificates and spectrum only")
    common(a)
    a.add_argument("--seed", type=int, help="also run randomized soundness checks with this seed")
    a.add_argument("--samples", type=int, default=100, help="random networks for --seed (default 100)")

    s = sub.add_parser("sweep", help="repeat a run over values of one parameter")
    common(s)
    s.add_argument("--param", required=True, help="dotted path, e.g. controller.K_P")
    s.add_argument("--values", required=True, help="comma-separated values (JSON literals)")
    s.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    s.add_argument("--no-sim", action="store_true", help="analysis only at each point")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)

    def log(*a, **k):
        print(*a, **k)

    try:
        cfg = load(args.config)
        if args.dump_config:
            sys.stdout.write(cfg.dumps())
            return EXIT_OK
        out = args.out or Path(cfg.output["directory"])
        if args.verb == "run":
            if args.stride is not None and args.stride < 1:
                raise ConfigError("--stride must be >= 1")
            return run_scenario(cfg, out, args.stride, log)
        if args.verb == "analyze":
            return analyze(cfg, out, args.seed, args.samples, log)
        values = [_parse_value(v.strip()) for v in args.values.split(",") if v.strip()]
        if not values:
            raise ConfigError("--values is empty")
        return sweep(cfg, out, args.param, values, args.jobs, not args.no_sim, log)
    except (ConfigError, TopologyError, ControllerError) as exc:
        print(f"error: invalid configuration {args.config}:", file=sys.stderr)
        for msg in getattr(exc, "issues", [str(exc)]):
            print(f"  {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
