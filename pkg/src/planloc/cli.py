"""Command line entry point: ``planloc <group> <command> ...``.

Exit codes: 0 success, 1 usage error, 2 bad input data, 3 not localized.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .bench import BenchConfig, ConfigError, export_plot_data, run_benchmark, run_single
from .geometry import Pose3
from .mcl import MCLConfig, run_mcl
from .metrics import MetricError, ate, map_rmse
from .plan import PlanError, build_prior_layers, load_plan
from .sgraph import SGraphConfig, init_graph, track
from .sim import (
    CloudParams, NoiseConfig, ObservationLogError, TrajectorySpec, read_obs_log, simulate, write_obs_log,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NOT_LOCALIZED = 0, 1, 2, 3


class DataError(Exception):
    """Input that parsed as arguments but cannot be used."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc.msg}, line {exc.lineno})") from None


def _write_text(path, text: str) -> None:
    if path is None or str(path) == "-":
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")


def _prior(plan_path, storey=None):
    plan = load_plan(plan_path)
    s = plan.storey(storey) if storey else plan.storeys[0]
    return s, build_prior_layers(s)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_plan_parse(a) -> int:
    _, prior = _prior(a.plan_file, a.storey)
    _write_text(a.out, prior.to_json())
    return EXIT_OK


def cmd_sim_run(a) -> int:
    storey, _ = _prior(a.plan, a.storey)
    try:
        traj = TrajectorySpec.from_dict(_read_json(a.traj))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad trajectory: {exc}") from None
    try:
        noise = NoiseConfig.from_dict(_read_json(a.noise)) if a.noise else NoiseConfig()
    except (TypeError, ValueError) as exc:
        raise DataError(f"bad noise config: {exc}") from None
    if a.zero_noise:
        noise = NoiseConfig.zero(a.seed)
    if a.clouds:
        frames, clouds = simulate(storey, traj, noise, a.seed, a.max_range, clouds=CloudParams())
        side = Path(str(a.out) + ".clouds.npz")
        np.savez_compressed(side, **{f"frame_{k:05d}": c for k, c in enumerate(clouds)})
    else:
        frames = simulate(storey, traj, noise, a.seed, a.max_range)
    write_obs_log(a.out, frames)
    print(f"{len(frames)} frames -> {a.out}")
    return EXIT_OK


def cmd_loc_mcl(a) -> int:
    _, prior = _prior(a.plan, a.storey)
    frames = read_obs_log(a.obs)
    base = MCLConfig()
    cfg = MCLConfig(
        particles=a.particles if a.particles is not None else base.particles,
        sigma=a.sigma if a.sigma is not None else base.sigma,
        topo=not a.no_topo,
        timeout=a.timeout if a.timeout is not None else base.timeout,
    )
    res = run_mcl(prior, frames, cfg, a.seed)
    out = res.to_dict()
    out.update({"seed": a.seed, "topo": cfg.topo, "particles": cfg.particles, "sigma": cfg.sigma})
    _write_text(a.out, json.dumps(out, indent=1))
    if not res.converged:
        print("not localized", file=sys.stderr)
        return EXIT_NOT_LOCALIZED
    print(f"converged at t={res.time:.2f}s in room {res.room_id}")
    return EXIT_OK


def cmd_loc_sgraph(a) -> int:
    _, prior = _prior(a.plan, a.storey)
    frames = read_obs_log(a.obs)
    init = _read_json(a.init)
    if not init.get("converged") or init.get("T_WO") is None:
        raise DataError(f"{a.init} holds no converged MCL result")
    try:
        T_WO = Pose3.from_list(init["T_WO"])
        k0 = int(init.get("frame_index") or 0)
    except (TypeError, ValueError) as exc:
        raise DataError(f"bad MCL result: {exc}") from None
    if not 0 <= k0 < len(frames):
        raise DataError(f"frame_index {k0} outside the observation log")
    g = init_graph(prior, T_WO, SGraphConfig())
    for fr in frames[k0:]:
        track(g, fr.odom, fr.planes, fr.t)
    report = g.optimize()
    out = g.to_dict()
    metrics = {"final_cost": report.final_cost, "iterations": report.iterations}
    gt = [(f.t, f.gt) for f in frames if f.gt is not None]
    if gt:
        metrics["ate_rmse"] = ate([(kf.stamp, kf.estimate) for kf in g.keyframes], gt, _frame_dt(frames))
    try:
        metrics["map_rmse"] = map_rmse(g, prior).rmse
    except MetricError as exc:
        metrics["map_rmse"] = None
        metrics["map_note"] = str(exc)
    out["metrics"] = metrics
    _write_text(a.out, json.dumps(out, indent=1))
    print(f"{len(g.keyframes)} keyframes, " + ", ".join(
        f"{k}={v:.4g}" for k, v in metrics.items() if isinstance(v, float)))
    return EXIT_OK


def _frame_dt(frames) -> float:
    if len(frames) < 2:
        return 0.0
    return float(np.median(np.diff([f.t for f in frames])))


def cmd_bench_run(a) -> int:
    cfg = BenchConfig.load(a.config)
    if a.no_topo:
        from dataclasses import replace
        cfg = replace(cfg, mcl=replace(cfg.mcl, topo=False))
    if a.seed is not None:
        run = run_single(cfg, a.seed, traces=not a.no_traces)
        _write_text(a.out, json.dumps(run.to_dict(), indent=1))
        if not run.converged:
            print(f"seed {a.seed}: N.L.", file=sys.stderr)
            return EXIT_NOT_LOCALIZED
        print(f"seed {a.seed}: ate={run.ate_rmse:.4f} m, position error={run.position_error:.3f} m")
        return EXIT_OK
    report = run_benchmark(cfg, traces=not a.no_traces)
    _write_text(a.out, report.to_json())
    s = report.summary
    print(f"{s['runs']} runs, {s['localized']} localized, {s['correct_room']} in the right place")
    return EXIT_OK


def cmd_bench_plot(a) -> int:
    report = _read_json(a.report)
    if "runs" not in report:
        raise DataError(f"{a.report} is not a benchmark report")
    paths = export_plot_data(report, a.out_dir)
    print(f"wrote {len(paths)} files to {a.out_dir}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="planloc", description="Plan-based global localisation and tracking.")
    groups = p.add_subparsers(dest="group", required=True, parser_class=_Parser)

    plan = groups.add_parser("plan").add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    pp = plan.add_parser("parse", help="validate a plan and print its prior graph")
    pp.add_argument("plan_file")
    pp.add_argument("--storey")
    pp.add_argument("--out")
    pp.set_defaults(func=cmd_plan_parse)

    sim = groups.add_parser("sim").add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    sr = sim.add_parser("run", help="simulate a trajectory and write an observation log")
    sr.add_argument("--plan", required=True)
    sr.add_argument("--storey")
    sr.add_argument("--traj", required=True)
    sr.add_argument("--noise")
    sr.add_argument("--zero-noise", action="store_true")
    sr.add_argument("--seed", type=int, default=0)
    sr.add_argument("--max-range", type=float, default=10.0)
    sr.add_argument("--clouds", action="store_true", help="also write ray-cast clouds next to the log")
    sr.add_argument("--out", required=True)
    sr.set_defaults(func=cmd_sim_run)

    loc = groups.add_parser("loc").add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    lm = loc.add_parser("mcl", help="global localisation with the particle filter")
    lm.add_argument("--plan", required=True)
    lm.add_argument("--storey")
    lm.add_argument("--obs", required=True)
    lm.add_argument("--seed", type=int, default=0)
    lm.add_argument("--no-topo", action="store_true")
    lm.add_argument("--particles", type=int)
    lm.add_argument("--sigma", type=float)
    lm.add_argument("--timeout", type=float)
    lm.add_argument("--out", required=True)
    lm.set_defaults(func=cmd_loc_mcl)
    ls = loc.add_parser("sgraph", help="track against the plan from an MCL result")
    ls.add_argument("--plan", required=True)
    ls.add_argument("--storey")
    ls.add_argument("--obs", required=True)
    ls.add_argument("--init", required=True)
    ls.add_argument("--out", required=True)
    ls.set_defaults(func=cmd_loc_sgraph)

    bench = groups.add_parser("bench").add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    br = bench.add_parser("run", help="run a benchmark config")
    br.add_argument("--config", required=True)
    br.add_argument("--out", required=True)
    br.add_argument("--seed", type=int, help="run only this seed; exit 3 if it is not localized")
    br.add_argument("--no-topo", action="store_true")
    br.add_argument("--no-traces", action="store_true")
    br.set_defaults(func=cmd_bench_run)
    bp = bench.add_parser("plot", help="export plot data from a report")
    bp.add_argument("--report", required=True)
    bp.add_argument("--out-dir", required=True)
    bp.set_defaults(func=cmd_bench_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DataError, PlanError, ConfigError, ObservationLogError, MetricError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
