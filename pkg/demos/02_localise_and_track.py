"""One simulated run on the three-room plan: particle filter, then graph tracking.

Run with ``python3 demos/02_localise_and_track.py [seed]``; takes about ten
seconds on a slow machine.
"""
# %%
from __future__ import annotations

import sys

import numpy as np

from planloc.bench import BenchConfig, bundled_config
from planloc.geometry import wrap_angle
from planloc.mcl import run_mcl
from planloc.metrics import ate, map_rmse
from planloc.plan import build_prior_layers
from planloc.sgraph import init_graph, track
from planloc.sim import simulate

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 100
cfg = BenchConfig.from_dict(bundled_config("three_rooms.json"))
storey = cfg.storey_obj()
prior = build_prior_layers(storey)

# %% Simulate the walk: noisy odometry and noisy plane observations in the sensor frame.
frames = simulate(storey, cfg.trajectory, cfg.noise, seed)
print(f"{len(frames)} frames over {frames[-1].t:.1f} s, {np.mean([len(f.planes) for f in frames]):.1f} planes per frame")

# %% Global localisation. Particles start everywhere in the storey with any heading.
spread = []
res = run_mcl(prior, frames, cfg.mcl, seed,
              callback=lambda k, s: spread.append(float(np.linalg.norm(s.t[:, :2].std(axis=0)))))
for k in range(0, len(spread), 10):
    print(f"  step {k:3d}: particle spread {spread[k]:.2f} m")
if not res.converged:
    sys.exit("not localised within the timeout")
gt = frames[res.frame_index].gt
print(f"converged at t={res.time:.1f} s in room {res.room_id}: "
      f"{np.linalg.norm(res.best.t[:2] - gt.t[:2]):.3f} m, "
      f"{np.degrees(abs(wrap_angle(res.best.yaw - gt.yaw))):.2f} deg from the truth")

# %% Hand over to the graph: the filter pose fixes the odometry-to-world transform.
g = init_graph(prior, res.T_WO, cfg.sgraph)
for fr in frames[res.frame_index:]:
    track(g, fr.odom, fr.planes, fr.t)
g.optimize()
est = [(kf.stamp, kf.estimate) for kf in g.keyframes]
odom_only = [(fr.t, res.T_WO.compose(fr.odom)) for fr in frames[res.frame_index:]]
truth = [(f.t, f.gt) for f in frames]
dt = 1.0 / cfg.trajectory.rate
print(f"{len(g.keyframes)} keyframes; ATE {ate(est, truth, dt):.3f} m "
      f"(dead reckoning from the same start: {ate(odom_only, truth, dt):.3f} m)")
m = map_rmse(g, prior)
print(f"map offset error against the plan: {m.rmse:.4f} m over {m.associated} observed walls "
      f"({m.unassociated} with no plan counterpart)")
