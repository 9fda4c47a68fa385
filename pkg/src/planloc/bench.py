"""End-to-end benchmark: simulate, localise globally, track, score.

A benchmark is described by a JSON config::

    {
      "plan": "three_rooms.plan",
      "trajectory": {"waypoints": [[3, 2], [7.3, 2]], "speed": 0.5, "rate": 5},
      "noise": "default" | "zero" | {"odom_x": 0.01, "plane_angle_deg": 0.5, ...},
      "mcl": {"particles": 20000, "sigma": 0.2, "topo": true, "min_steps": 35},
      "sgraph": {"keyframe_distance": 1.0},
      "sim": {"max_range": 10.0, "occlusion": true},
      "seeds": [0, 1, 2] | {"start": 0, "count": 50}
    }

Relative plan paths are resolved against the config file's directory and
then against the plans bundled with the package. The report holds one entry
per seed (sorted), an aggregate summary and per-run traces for plotting. It
contains no wall-clock quantities, so equal inputs give equal bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .geometry import MahalanobisGate, wrap_angle
from .mcl import ConvergenceCriteria, MCLConfig, MotionNoise, run_mcl
from .metrics import MetricError, ate, map_rmse
from .plan import BuildingPlan, build_prior_layers, load_plan, parse_plan
from .sgraph import SGraphConfig, init_graph, track
from .sim import NoiseConfig, TrajectorySpec, simulate


CORRECT_POSITION = 0.5  # metres; a converged run closer than this is in the right place


class ConfigError(ValueError):
    """Raised for malformed or unresolvable benchmark configs."""


# --------------------------------------------------------------------------
# config parsing
# --------------------------------------------------------------------------

def _gate_from_dict(d: dict | None) -> MahalanobisGate:
    if not d:
        return MahalanobisGate()
    info = d.get("info", [25.0, 25.0, 100.0])
    info = np.diag(info) if np.ndim(info) == 1 else np.asarray(info, dtype=float)
    return MahalanobisGate(info, float(d.get("threshold", 7.81)))


def mcl_config_from_dict(d: dict | None) -> MCLConfig:
    d = dict(d or {})
    base = MCLConfig()
    conv = ConvergenceCriteria(
        float(d.pop("pos_tol", base.convergence.pos_tol)),
        math.radians(float(d.pop("yaw_tol_deg", math.degrees(base.convergence.yaw_tol)))),
        int(d.pop("min_steps", base.convergence.min_steps)),
    )
    m = d.pop("motion", None) or {}
    motion = MotionNoise(
        float(m.get("x", base.motion.x)), float(m.get("y", base.motion.y)),
        math.radians(float(m.get("yaw_deg", math.degrees(base.motion.yaw)))),
    )
    gate = _gate_from_dict(d.pop("gate", None))
    cfg = MCLConfig(
        particles=int(d.pop("particles", base.particles)),
        sigma=float(d.pop("sigma", base.sigma)),
        gate=gate,
        topo=bool(d.pop("topo", base.topo)),
        motion=motion,
        convergence=conv,
        timeout=float(d.pop("timeout", base.timeout)),
        frame=str(d.pop("frame", base.frame)),
        lost_ratio=float(d.pop("lost_ratio", base.lost_ratio)),
    )
    if d:
        raise ConfigError(f"unknown mcl keys: {sorted(d)}")
    return cfg


def sgraph_config_from_dict(d: dict | None) -> SGraphConfig:
    d = dict(d or {})
    base = SGraphConfig()
    kw = {}
    if "keyframe_distance" in d:
        kw["keyframe_distance"] = float(d.pop("keyframe_distance"))
    if "keyframe_angle_deg" in d:
        kw["keyframe_angle"] = math.radians(float(d.pop("keyframe_angle_deg")))
    if "gate" in d:
        kw["gate"] = _gate_from_dict(d.pop("gate"))
    for key in ("odom_sigma", "plane_sigma", "gauge_sigma"):
        if key in d:
            kw[key] = tuple(float(x) for x in d.pop(key))
    for key in ("room_tol", "room_sigma"):
        if key in d:
            kw[key] = float(d.pop(key))
    if "max_iters" in d:
        kw["max_iters"] = int(d.pop("max_iters"))
    if d:
        raise ConfigError(f"unknown sgraph keys: {sorted(d)}")
    return replace(base, **kw)


def _noise_from(value) -> NoiseConfig:
    if value is None or value == "default":
        return NoiseConfig()
    if value == "zero":
        return NoiseConfig.zero()
    if isinstance(value, dict):
        return NoiseConfig.from_dict(value)
    raise ConfigError(f"noise must be 'default', 'zero' or an object, got {value!r}")


def _seeds_from(value) -> tuple:
    if isinstance(value, dict):
        start, count = int(value.get("start", 0)), int(value["count"])
        return tuple(range(start, start + count))
    if isinstance(value, list) and all(isinstance(s, int) for s in value):
        return tuple(sorted(set(value)))
    raise ConfigError("seeds must be a list of integers or {start, count}")


def resolve_plan(name: str, base_dir: Path | None = None) -> BuildingPlan:
    """Load a plan file by path, falling back to the bundled plans."""
    candidates = []
    p = Path(name)
    if p.is_absolute():
        candidates.append(p)
    else:
        if base_dir is not None:
            candidates.append(base_dir / p)
        candidates.append(p)
    for c in candidates:
        if c.is_file():
            return load_plan(c)
    bundled = resources.files("planloc") / "data" / p.name
    if bundled.is_file():
        return parse_plan(bundled.read_text(encoding="utf-8"))
    raise ConfigError(f"plan file not found: {name}")


@dataclass(frozen=True)
class BenchConfig:
    plan: BuildingPlan
    plan_name: str
    trajectory: TrajectorySpec
    noise: NoiseConfig
    mcl: MCLConfig
    sgraph: SGraphConfig
    seeds: tuple
    max_range: float = 10.0
    occlusion: bool = True
    storey: str | None = None
    raw: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> BenchConfig:
        try:
            plan_name = d["plan"]
            traj = TrajectorySpec.from_dict(d["trajectory"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad plan/trajectory entry: {exc}") from None
        sim = d.get("sim", {}) or {}
        try:
            return cls(
                plan=resolve_plan(plan_name, base_dir),
                plan_name=str(plan_name),
                trajectory=traj,
                noise=_noise_from(d.get("noise")),
                mcl=mcl_config_from_dict(d.get("mcl")),
                sgraph=sgraph_config_from_dict(d.get("sgraph")),
                seeds=_seeds_from(d.get("seeds", [0])),
                max_range=float(sim.get("max_range", 10.0)),
                occlusion=bool(sim.get("occlusion", True)),
                storey=d.get("storey"),
                raw=d,
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> BenchConfig:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc.msg} (line {exc.lineno})") from None
        return cls.from_dict(data, path.parent)

    def storey_obj(self):
        if self.storey is not None:
            return self.plan.storey(self.storey)
        return self.plan.storeys[0]


def bundled_config(name: str) -> dict:
    """One of the JSON configs shipped in ``planloc/data``."""
    return json.loads((resources.files("planloc") / "data" / name).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# running
# --------------------------------------------------------------------------

@dataclass
class RunResult:
    seed: int
    converged: bool
    convergence_time: float | None
    convergence_frame: int | None
    converged_room: str | None
    true_room: str | None
    position_error: float | None
    yaw_error_deg: float | None
    correct_room: bool
    ate_rmse: float | None
    map_rmse: float | None
    map_associated: int | None
    map_unassociated: int | None
    duplicate_walls: int | None
    keyframes: int
    comparisons: int
    mcl_steps: int
    trace: dict = field(default_factory=dict)

    @property
    def not_localized(self) -> bool:
        return not self.converged

    def to_dict(self) -> dict:
        d = asdict(self)
        d["status"] = "ok" if self.converged else "N.L."
        return d


def _round(x, nd=9):
    return None if x is None else round(float(x), nd)


def _particle_sample(s, k: int = 300) -> list:
    idx = np.linspace(0, len(s) - 1, num=min(k, len(s))).astype(int)
    return [[_round(s.t[i, 0], 4), _round(s.t[i, 1], 4), _round(s.yaw[i], 4)] for i in idx]


def run_single(cfg: BenchConfig, seed: int, traces: bool = True) -> RunResult:
    """Simulate, localise and track one seed."""
    storey = cfg.storey_obj()
    prior = build_prior_layers(storey)
    frames = simulate(storey, cfg.trajectory, cfg.noise, seed, cfg.max_range, cfg.occlusion)
    res = run_mcl(prior, frames, cfg.mcl, seed)
    trace = {}
    if traces:
        trace["gt"] = [[_round(f.gt.t[0], 4), _round(f.gt.t[1], 4)] for f in frames]
        trace["particles"] = _particle_sample(res.particles)
    if not res.converged:
        return RunResult(seed, False, None, None, None, None, None, None, False, None, None, None, None,
                         None, 0, res.comparisons, res.steps, trace)
    k0 = res.frame_index
    gt0 = frames[k0].gt
    true_room = prior.room_at(gt0.t)
    pos_err = float(np.linalg.norm(res.best.t[:2] - gt0.t[:2]))
    yaw_err = math.degrees(abs(wrap_angle(res.best.yaw - gt0.yaw)))
    g = init_graph(prior, res.T_WO, cfg.sgraph)
    for fr in frames[k0:]:
        track(g, fr.odom, fr.planes, fr.t)
    g.optimize()
    est = [(kf.stamp, kf.estimate) for kf in g.keyframes]
    gt = [(f.t, f.gt) for f in frames]
    ate_v = ate(est, gt, 1.0 / cfg.trajectory.rate)
    try:
        m = map_rmse(g, prior, cfg.sgraph.gate)
        map_v, assoc, unassoc, dup = m.rmse, m.associated, m.unassociated, m.observed_associated
    except MetricError:
        map_v, assoc, unassoc, dup = None, 0, len(g.observed_walls()), 0
    if traces:
        trace["keyframes"] = [[_round(kf.estimate.t[0], 4), _round(kf.estimate.t[1], 4)] for kf in g.keyframes]
        trace["convergence_frame"] = k0
    return RunResult(
        seed, True, _round(frames[k0].t - frames[0].t, 6), k0, res.room_id, true_room,
        _round(pos_err), _round(yaw_err, 6), bool(pos_err < CORRECT_POSITION),
        _round(ate_v), _round(map_v), assoc, unassoc, dup, len(g.keyframes), res.comparisons,
        res.steps, trace,
    )


def _stats(values) -> dict | None:
    v = [x for x in values if x is not None]
    if not v:
        return None
    a = np.array(v, dtype=float)
    return {"n": len(v), "mean": _round(a.mean()), "median": _round(float(np.median(a))),
            "max": _round(a.max()), "min": _round(a.min())}


@dataclass
class BenchmarkReport:
    plan: str
    topo: bool
    seeds: list
    runs: list

    @property
    def summary(self) -> dict:
        n = len(self.runs)
        conv = [r for r in self.runs if r.converged]
        return {
            "runs": n,
            "localized": len(conv),
            "not_localized": n - len(conv),
            "correct_room": sum(r.correct_room for r in self.runs),
            "correct_room_rate": _round(sum(r.correct_room for r in self.runs) / n) if n else None,
            "ate_rmse": _stats(r.ate_rmse for r in conv),
            "convergence_time": _stats(r.convergence_time for r in conv),
            "map_rmse": _stats(r.map_rmse for r in conv),
        }

    def ate_pass_rate(self, tol: float) -> float:
        ok = sum(1 for r in self.runs if r.ate_rmse is not None and r.ate_rmse <= tol)
        return ok / len(self.runs) if self.runs else 0.0

    def to_dict(self) -> dict:
        return {
            "plan": self.plan,
            "topo": self.topo,
            "seeds": list(self.seeds),
            "summary": self.summary,
            "runs": [r.to_dict() for r in self.runs],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=False)


def run_benchmark(config, seeds=None, traces: bool = True) -> BenchmarkReport:
    """Run every seed of a config (path, dict or :class:`BenchConfig`)."""
    if isinstance(config, (str, Path)):
        cfg = BenchConfig.load(config)
    elif isinstance(config, dict):
        cfg = BenchConfig.from_dict(config)
    else:
        cfg = config
    seeds = tuple(sorted(set(seeds))) if seeds is not None else cfg.seeds
    runs = [run_single(cfg, s, traces) for s in seeds]
    return BenchmarkReport(cfg.plan_name, cfg.mcl.topo, list(seeds), runs)


# --------------------------------------------------------------------------
# plotting data
# --------------------------------------------------------------------------

_GNUPLOT = """set terminal pngcairo size 900,600
set output '{png}'
set size ratio -1
set key outside
set title 'seed {seed}'
plot '{gt}' using 1:2 with lines title 'ground truth', \\
     '{kf}' using 1:2 with linespoints pt 7 ps 0.6 title 'keyframes', \\
     '{pt}' using 1:2 with dots title 'particles at convergence'
"""


def _write_csv(path: Path, header: str, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join("" if v is None else repr(v) for v in row) + "\n")


def export_plot_data(report: dict, out_dir) -> list[Path]:
    """Write per-run CSVs and gnuplot scripts plus a summary CSV; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    summary = out / "summary.csv"
    _write_csv(summary, "seed,status,convergence_time,converged_room,true_room,ate_rmse,map_rmse",
               [(r["seed"], r["status"], r["convergence_time"], r["converged_room"], r["true_room"],
                 r["ate_rmse"], r["map_rmse"]) for r in report["runs"]])
    written.append(summary)
    for r in report["runs"]:
        tr = r.get("trace") or {}
        s = r["seed"]
        files = {
            "gt": (f"gt_{s}.csv", "x,y", tr.get("gt", [])),
            "kf": (f"keyframes_{s}.csv", "x,y", tr.get("keyframes", [])),
            "pt": (f"particles_{s}.csv", "x,y,yaw", tr.get("particles", [])),
        }
        for name, header, rows in files.values():
            _write_csv(out / name, header, rows)
            written.append(out / name)
        script = out / f"run_{s}.gp"
        script.write_text(
            "set datafile separator ','\n" + _GNUPLOT.format(
                png=f"run_{s}.png", seed=s, gt=files["gt"][0], kf=files["kf"][0], pt=files["pt"][0]),
            encoding="utf-8",
        )
        written.append(script)
    return written
