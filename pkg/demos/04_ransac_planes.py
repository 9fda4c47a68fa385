"""Planes from a ray-cast point cloud, the way a front end would find them.

Run with ``python3 demos/04_ransac_planes.py``.
"""
# %%
from __future__ import annotations

import numpy as np

from planloc.geometry import Pose3, transform_plane
from planloc.plan import build_prior_layers, parse_plan
from planloc.sim import CloudParams, build_world, extract_planes_ransac, sample_cloud

storey = parse_plan(
    "storey g 0\n"
    "wall X g 3 -3 -1  1 0 0  0.2 6 3\n"
    "wall Y g 3 3 -1   0 1 0  0.2 6 3\n").storeys[0]
world = build_world(storey)
pose = Pose3.from_xyz_yaw(0.2, -0.1, 0.0, 0.3)

# %% A 16-ring scan with 1 cm range noise; rays that miss both walls are dropped.
cloud = sample_cloud(world, pose, CloudParams(sigma=0.01), np.random.default_rng(0))
print(cloud.shape[0], "points")

# %% Sequential RANSAC pulls out the largest plane, removes its inliers and repeats.
found = extract_planes_ransac(cloud, 0.05, 100, 4, seed=0)
truth = [transform_plane(pose.inverse(), w.plane) for w in build_prior_layers(storey).wall_nodes
         if w.side == "front"]
for p in found:
    t = max(truth, key=lambda q: q.n @ p.n)
    angle = np.degrees(np.arccos(np.clip(p.n @ t.n, -1, 1)))
    print(f"normal {np.round(p.n, 3)}  offset {p.d:+.3f}   error {angle:.3f} deg, {abs(p.d - t.d) * 1000:.1f} mm")
