"""Trajectory and map error metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import MahalanobisGate, minimal_difference, to_minimal
from .plan import PriorGraph


class MetricError(ValueError):
    """Raised when a metric has nothing to evaluate."""


def ate(est, gt, max_dt: float) -> float:
    """Translational RMSE between estimated and ground-truth poses.

    Both arguments are sequences of ``(stamp, Pose3)``. Each estimate is
    paired with the ground-truth pose nearest in time; pairs further apart
    than ``max_dt`` are skipped. No alignment is applied because both
    trajectories live in the world frame.
    """
    if not gt:
        raise MetricError("empty ground-truth trajectory")
    gt_t = np.array([s for s, _ in gt], dtype=float)
    order = np.argsort(gt_t, kind="stable")
    gt_t = gt_t[order]
    sq = []
    for stamp, pose in est:
        i = int(np.searchsorted(gt_t, stamp))
        best = None
        for j in (i - 1, i):
            if 0 <= j < len(gt_t) and (best is None or abs(gt_t[j] - stamp) < abs(gt_t[best] - stamp)):
                best = j
        if best is None or abs(gt_t[best] - stamp) > max_dt + 1e-9:
            continue
        ref = gt[int(order[best])][1]
        sq.append(float(np.sum((np.asarray(pose.t) - ref.t) ** 2)))
    if not sq:
        raise MetricError("no estimate could be matched to a ground-truth stamp")
    return math.sqrt(sum(sorted(sq)) / len(sq))


@dataclass
class MapError:
    rmse: float
    associated: int          # scored nodes, plan walls included
    unassociated: int        # online walls with no plan counterpart
    observed_associated: int  # online walls that duplicate a plan wall


def map_rmse(graph, prior: PriorGraph, gate: MahalanobisGate | None = None) -> MapError:
    """Plane-offset RMSE of observed walls against the plan.

    Every wall node carrying at least one plane observation is scored. Plan
    nodes (including those observed walls were merged into) score zero;
    an online wall is paired with the closest same-class plan wall under the
    gate and scores the offset difference. Online walls with no such plan
    wall are left out and counted.
    """
    gate = gate or MahalanobisGate()
    seen = {f.nodes[1] for f in graph.factors if f.kind == "plane_obs"}
    prior_ids = {w.id for w in prior.wall_nodes}
    errors = []
    unassociated = 0
    duplicates = 0
    for wid in sorted(seen):
        if wid in prior_ids:
            errors.append(0.0)
            continue
        w = graph.walls[wid]
        m = to_minimal(w.plane).as_array()
        best, best_err, best_dd = None, math.inf, 0.0
        for p in prior.wall_nodes:
            if graph.walls[p.id].wall_class is not w.wall_class:
                continue
            delta = minimal_difference(m, to_minimal(p.plane).as_array())
            err = float(delta @ gate.info @ delta)
            if err < best_err:
                best, best_err, best_dd = p.id, err, float(delta[2])
        if best is None or best_err >= gate.threshold:
            unassociated += 1
        else:
            errors.append(best_dd)
            duplicates += 1
    if not errors:
        raise MetricError(f"no observed wall is associated with the plan ({unassociated} unassociated)")
    return MapError(math.sqrt(float(np.mean(np.square(errors)))), len(errors), unassociated, duplicates)
