from __future__ import annotations

import math

import pytest

from planloc.bench import resolve_plan
from planloc.geometry import Plane, Pose3
from planloc.metrics import MetricError, ate, map_rmse
from planloc.plan import build_prior_layers
from planloc.sgraph import OBSERVED, Factor, WallState, init_graph


def _traj(offsets):
    gt = [(float(k), Pose3.from_xyz_yaw(k, 0)) for k in range(len(offsets))]
    est = [(float(k), Pose3.from_xyz_yaw(k + dx, dy)) for k, (dx, dy) in enumerate(offsets)]
    return est, gt


class TestAte:
    def test_identical(self):
        est, gt = _traj([(0, 0)] * 5)
        assert ate(est, gt, 0.5) == 0.0

    def test_constant_offset(self):
        est, gt = _traj([(0.1, 0)] * 4)
        assert ate(est, gt, 0.5) == pytest.approx(0.1)

    def test_two_offsets(self):
        est, gt = _traj([(0.1, 0), (0, 0.2)])
        assert ate(est, gt, 0.5) == pytest.approx(math.sqrt((0.01 + 0.04) / 2))
        assert ate(est, gt, 0.5) == pytest.approx(0.1581, abs=1e-4)

    def test_order_does_not_matter(self):
        est, gt = _traj([(0.1, 0), (0, 0.2), (0.3, 0.1)])
        assert ate(est[::-1], gt[::-1], 0.5) == ate(est, gt, 0.5)

    def test_nearest_stamp_within_tolerance(self):
        gt = [(0.0, Pose3.from_xyz_yaw(0, 0)), (1.0, Pose3.from_xyz_yaw(1, 0))]
        est = [(0.9, Pose3.from_xyz_yaw(1.0, 0.3)), (5.0, Pose3.from_xyz_yaw(9, 9))]
        assert ate(est, gt, 0.2) == pytest.approx(0.3)

    def test_nothing_matched(self):
        est, gt = _traj([(0, 0)])
        with pytest.raises(MetricError):
            ate([(10.0, est[0][1])], gt, 0.5)
        with pytest.raises(MetricError):
            ate(est, [], 0.5)


class TestMapRmse:
    @pytest.fixture
    def graph(self):
        prior = build_prior_layers(resolve_plan("single_room.plan").storeys[0])
        g = init_graph(prior, Pose3.identity())
        g.add_keyframe(Pose3.from_xyz_yaw(2.5, 2), [])
        return prior, g

    def _observe(self, g, wid, plane):
        if wid not in g.walls:
            g.walls[wid] = WallState(wid, plane, OBSERVED)
        g.factors.append(Factor("plane_obs", (0, wid), [0.0, 0.0, 0.0], [[1, 0, 0], [0, 1, 0], [0, 0, 1]]))

    def test_perfect_merge(self, graph):
        prior, g = graph
        for wid in ("R1E:front", "R1W:front", "R1N:front", "R1S:front"):
            self._observe(g, wid, None)
        m = map_rmse(g, prior)
        assert m.rmse == 0.0 and m.associated == 4 and m.unassociated == 0

    def test_one_wall_off(self, graph):
        prior, g = graph
        for wid in ("R1W:front", "R1N:front", "R1S:front"):
            self._observe(g, wid, None)
        east = prior.node("R1E:front").plane
        self._observe(g, "obs0", Plane(east.n, east.d + 0.1))
        m = map_rmse(g, prior)
        assert m.rmse == pytest.approx(math.sqrt(0.01 / 4))
        assert m.rmse == pytest.approx(0.05)
        assert m.observed_associated == 1

    def test_unassociated_excluded(self, graph):
        prior, g = graph
        self._observe(g, "R1E:front", None)
        self._observe(g, "obs0", Plane([1, 0, 0], -40.0))
        m = map_rmse(g, prior)
        assert m.rmse == 0.0 and m.associated == 1 and m.unassociated == 1

    def test_no_association(self, graph):
        prior, g = graph
        self._observe(g, "obs0", Plane([1, 0, 0], -40.0))
        self._observe(g, "obs1", Plane([0, 1, 0], -40.0))
        with pytest.raises(MetricError, match="2 unassociated"):
            map_rmse(g, prior)
