from __future__ import annotations

import math

import numpy as np
import pytest

from planloc.bench import resolve_plan
from planloc.geometry import (
    Plane, Pose3, pose_between, pose_compose, pose_retract, quat_from_rotvec, to_minimal, transform_plane,
    wrap_angle,
)
from planloc.metrics import ate
from planloc.plan import build_prior_layers, parse_plan
from planloc.sgraph import (
    OBSERVED, PRIOR, Factor, RoomCandidate, WallState, init_graph, odometry_residual, plane_obs_residual,
    prior_residual, room_wall_residual, track,
)
from planloc.sim import NoiseConfig, TrajectorySpec, build_world, observe_planes, simulate


@pytest.fixture(scope="module")
def room():
    storey = resolve_plan("single_room.plan").storeys[0]
    return storey, build_prior_layers(storey), build_world(storey)


def _random_pose(rng, tilt=0.3):
    w = rng.normal(size=3) * np.array([tilt, tilt, 1.5])
    return Pose3(rng.uniform(-5, 5, 3), quat_from_rotvec(w))


def _random_wall(rng):
    return np.array([rng.uniform(-3, 3), rng.uniform(-1.0, 1.0), rng.uniform(-6, 6)])


def _fd(f, x0, apply, dim, h=1e-6):
    cols = []
    for k in range(dim):
        e = np.zeros(dim)
        e[k] = h
        cols.append((f(apply(x0, e)) - f(apply(x0, -e))) / (2 * h))
    return np.column_stack(cols)


def _close(J, J_fd):
    scale = max(np.linalg.norm(J_fd), 1.0)
    return np.linalg.norm(J - J_fd) / scale


pose_apply = pose_retract


def vec_apply(x, e):
    return np.asarray(x) + e


class TestJacobians:
    """Analytic Jacobians against central differences at random points."""

    N = 100
    TOL = 1e-5

    def test_prior(self):
        rng = np.random.default_rng(0)
        for _ in range(self.N):
            T, T0 = _random_pose(rng), _random_pose(rng)
            T = pose_retract(T0, rng.normal(size=6) * 0.3)
            _, J = prior_residual(T, T0)
            J_fd = _fd(lambda X: prior_residual(X, T0)[0], T, pose_apply, 6)
            assert _close(J, J_fd) < self.TOL

    def test_odometry(self):
        rng = np.random.default_rng(1)
        for _ in range(self.N):
            Ti, Tj = _random_pose(rng), _random_pose(rng)
            Z = pose_retract(pose_between(Ti, Tj), rng.normal(size=6) * 0.2)
            _, Ji, Jj = odometry_residual(Ti, Tj, Z)
            Ji_fd = _fd(lambda X: odometry_residual(X, Tj, Z)[0], Ti, pose_apply, 6)
            Jj_fd = _fd(lambda X: odometry_residual(Ti, X, Z)[0], Tj, pose_apply, 6)
            assert _close(Ji, Ji_fd) < self.TOL
            assert _close(Jj, Jj_fd) < self.TOL

    def test_plane_observation(self):
        rng = np.random.default_rng(2)
        for _ in range(self.N):
            T, wall = _random_pose(rng), _random_wall(rng)
            n = np.array([math.cos(wall[1]) * math.cos(wall[0]), math.cos(wall[1]) * math.sin(wall[0]),
                          math.sin(wall[1])])
            pred = transform_plane(T.inverse(), Plane(n, wall[2]))
            meas = to_minimal(pred).as_array() + rng.normal(size=3) * 0.05
            _, Jp, Jw = plane_obs_residual(T, wall, meas)
            Jp_fd = _fd(lambda X: plane_obs_residual(X, wall, meas)[0], T, pose_apply, 6)
            Jw_fd = _fd(lambda W: plane_obs_residual(T, W, meas)[0], wall, vec_apply, 3)
            # undo a wrap of the azimuth residual between the two probes
            Jp_fd[0] = wrap_angle(Jp_fd[0] * 2e-6) / 2e-6
            Jw_fd[0] = wrap_angle(Jw_fd[0] * 2e-6) / 2e-6
            assert _close(Jp, Jp_fd) < self.TOL
            assert _close(Jw, Jw_fd) < self.TOL

    def test_room_wall(self):
        rng = np.random.default_rng(3)
        for _ in range(self.N):
            center = rng.uniform(-5, 5, 2)
            walls = [_random_wall(rng) for _ in range(4)]
            _, Jc, Jws = room_wall_residual(center, walls)
            Jc_fd = _fd(lambda c: room_wall_residual(c, walls)[0], center, vec_apply, 2)
            assert _close(Jc, Jc_fd) < self.TOL
            for k in range(4):
                def res(W, k=k):
                    ws = list(walls)
                    ws[k] = W
                    return room_wall_residual(center, ws)[0]
                assert _close(Jws[k], _fd(res, walls[k], vec_apply, 3)) < self.TOL


class TestInit:
    def test_counts(self, room):
        _, prior, _ = room
        g = init_graph(prior, Pose3.identity())
        assert g.counts() == (0, 8, 1)
        assert all(w.origin == PRIOR for w in g.walls.values())

    def test_identity_transform(self, room):
        _, prior, _ = room
        g = init_graph(prior, Pose3.identity())
        odom = Pose3.from_xyz_yaw(1, 2, 0, 0.3)
        g.add_keyframe(odom, [])
        assert g.keyframe(0).estimate.allclose(odom)

    def test_reinit_idempotent(self, room):
        _, prior, _ = room
        T = Pose3.from_xyz_yaw(1, 1, 0, 1)
        assert init_graph(prior, T).to_json() == init_graph(prior, T).to_json()

    def test_empty_prior(self):
        prior = build_prior_layers(parse_plan("storey g 0\n").storeys[0])
        with pytest.raises(ValueError):
            init_graph(prior, Pose3.identity())


class TestKeyframes:
    def test_thresholds(self, room):
        _, prior, _ = room
        T = Pose3.from_xyz_yaw(0.5, 0.5, 0, 0.2)
        g = init_graph(prior, T)
        o0 = Pose3.from_xyz_yaw(0.3, 0.1, 0, 0.1)
        assert g.add_keyframe(o0, []) == 0
        assert g.keyframe(0).estimate.allclose(pose_compose(T, o0))
        o1 = pose_compose(o0, Pose3.from_xyz_yaw(0.2, 0, 0, 0))
        assert g.add_keyframe(o1, []) is None
        o2 = pose_compose(o0, Pose3.from_xyz_yaw(1.5, 0, 0, 0))
        assert g.add_keyframe(o2, []) == 1
        odo = [f for f in g.factors if f.kind == "odometry"]
        assert len(odo) == 1 and odo[0].nodes == (0, 1)
        assert odo[0].measurement.allclose(pose_between(o0, o2))

    def test_rotation_threshold(self, room):
        _, prior, _ = room
        g = init_graph(prior, Pose3.identity())
        g.add_keyframe(Pose3.identity(), [])
        assert g.add_keyframe(Pose3.from_xyz_yaw(0, 0, 0, math.radians(10)), []) is None
        assert g.add_keyframe(Pose3.from_xyz_yaw(0, 0, 0, math.radians(16)), []) == 1

    def test_current_pose(self, room):
        _, prior, _ = room
        g = init_graph(prior, Pose3.from_xyz_yaw(1, 1, 0, math.pi / 2))
        g.add_keyframe(Pose3.identity(), [])
        assert g.current_pose().allclose(g.keyframe(0).estimate)
        g.add_keyframe(Pose3.from_xyz_yaw(0.4, 0, 0, 0), [])
        expected = pose_compose(g.keyframe(0).estimate, Pose3.from_xyz_yaw(0.4, 0, 0, 0))
        assert g.current_pose().allclose(expected)
        np.testing.assert_allclose(g.current_pose().t, [1, 1.4, 0], atol=1e-12)


class TestPlaneAssociation:
    def test_noiseless_prior_wall(self, room):
        _, prior, world = room
        pose = Pose3.from_xyz_yaw(2.5, 2, 0, 0.4)
        obs = observe_planes(world, pose, 10.0)
        g = init_graph(prior, pose)
        g.add_keyframe(Pose3.identity(), [])
        for o in obs:
            wid = g.associate_plane(o, 0)
            assert g.walls[wid].origin == PRIOR
            assert transform_plane(pose, o).allclose(g.walls[wid].plane, atol=1e-9)
        assert g.total_cost() < 1e-12

    def test_unknown_wall_creates_node(self, room):
        _, prior, _ = room
        pose = Pose3.from_xyz_yaw(2.5, 2, 0, 0)
        g = init_graph(prior, pose)
        g.add_keyframe(Pose3.identity(), [])
        partition = transform_plane(pose.inverse(), Plane([1, 0, 0], -3.5))
        wid = g.associate_plane(partition, 0)
        assert g.walls[wid].origin == OBSERVED
        assert sum(w.origin == PRIOR for w in g.walls.values()) == 8

    def test_same_wall_twice(self, room):
        _, prior, _ = room
        rng = np.random.default_rng(0)
        g = init_graph(prior, Pose3.identity())
        partition = Plane([1, 0, 0], -3.5)
        for k, x in enumerate([1.0, 2.2]):
            pose = Pose3.from_xyz_yaw(x, 2, 0, 0)
            g.add_keyframe(pose, [])
            o = transform_plane(pose.inverse(), partition)
            o = Plane(o.n, o.d + rng.normal() * 0.01)
            g.associate_plane(o, k)
        assert len(g.observed_walls()) == 1
        assert sum(f.kind == "plane_obs" for f in g.factors) == 2

    def test_floor_ignored(self, room):
        _, prior, _ = room
        g = init_graph(prior, Pose3.identity())
        g.add_keyframe(Pose3.identity(), [])
        assert g.associate_plane(Plane([0, 0, 1], 0.0), 0) is None


class TestRooms:
    def test_detect_center(self, room):
        _, prior, world = room
        pose = Pose3.from_xyz_yaw(1.5, 3.0, 0, 0.7)
        g = init_graph(prior, pose)
        g.add_keyframe(Pose3.identity(), observe_planes(world, pose, 10.0))
        cand = g.detect_room(0)
        np.testing.assert_allclose(cand.center, [2.5, 2.0], atol=1e-9)

    def test_corridor(self, room):
        _, prior, _ = room
        g = init_graph(prior, Pose3.identity())
        obs = [Plane([0, 1, 0], -1.0), Plane([0, -1, 0], -1.0)]
        g.add_keyframe(Pose3.from_xyz_yaw(20, 20), obs)
        assert g.detect_room(0) is None

    def test_x_walls_same_sign(self, room):
        _, prior, _ = room
        g = init_graph(prior, Pose3.identity())
        obs = [Plane([1, 0, 0], -1.0), Plane([1, 0, 0], -2.0), Plane([0, 1, 0], -1.0), Plane([0, -1, 0], -1.0)]
        g.add_keyframe(Pose3.from_xyz_yaw(20, 20), obs)
        assert g.detect_room(0) is None

    def _graph_with_observed_room(self, prior, shift):
        """Keyframe whose four walls are new nodes offset by ``shift`` from R1's faces."""
        g = init_graph(prior, Pose3.identity())
        g.add_keyframe(Pose3.from_xyz_yaw(2.5, 2), [])
        ids = []
        for wid in ("R1E:front", "R1W:front", "R1N:front", "R1S:front"):
            p = prior.node(wid).plane
            nid = f"obs{len(ids)}"
            g.walls[nid] = WallState(nid, Plane(p.n, p.d + shift), OBSERVED)
            g.factors.append(Factor("plane_obs", (0, nid),
                                    np.array([0.0, 0.0, 1.0]), np.eye(3)))
            ids.append(nid)
        return g, ids

    def test_match_within_tol_and_merge(self, room):
        _, prior, _ = room
        g, ids = self._graph_with_observed_room(prior, 0.05)
        cand = RoomCandidate(np.array([2.8, 2.0]), tuple(ids))
        n_walls, n_factors = len(g.walls), len(g.factors)
        assert g.associate_room(cand, tol=2.0) == "R1"
        assert len(g.walls) == n_walls - 4
        assert len(g.factors) == n_factors + 1  # plane factors re-pointed, one room factor added
        assert not g.observed_walls()
        assert all(f.nodes[1].startswith("R1") for f in g.factors if f.kind == "plane_obs")

    def test_far_candidate_makes_new_room(self, room):
        _, prior, _ = room
        g, ids = self._graph_with_observed_room(prior, 0.05)
        rid = g.associate_room(RoomCandidate(np.array([12.0, 2.0]), tuple(ids)), tol=2.0)
        assert rid not in prior.room_wall_edges and g.rooms[rid].origin == OBSERVED

    def test_tie_break(self):
        text = (
            "storey g 0\n"
            "wall a g 0 0 0 1 0 0 0.1 1 1\nwall b g 0 0 0 0 1 0 0.1 1 1\n"
            "wall c g 0 0 0 -1 0 0 0.1 1 1\nwall e g 0 0 0 0 -1 0 0.1 1 1\n"
            "room zz g 1 1 0 0 2 2 a b c e\nroom aa g 5 1 4 0 6 2 a b c e\n")
        prior = build_prior_layers(parse_plan(text).storeys[0])
        g = init_graph(prior, Pose3.identity())
        g.add_keyframe(Pose3.identity(), [])
        cand = RoomCandidate(np.array([3.0, 1.0]), ("a:front", "c:front", "b:front", "e:front"))
        assert g.associate_room(cand, tol=5.0) == "aa"

    def test_merge_preserves_factor_count(self, room):
        _, prior, _ = room
        g, ids = self._graph_with_observed_room(prior, 0.05)
        n_walls, n_factors = len(g.walls), len(g.factors)
        g.merge_walls(ids[0], "R1E:front")
        assert len(g.walls) == n_walls - 1 and len(g.factors) == n_factors
        with pytest.raises(ValueError):
            g.merge_walls("R1E:front", "R1W:front")


class TestOptimize:
    def test_noiseless_no_steps(self, room):
        _, prior, world = room
        pose = Pose3.from_xyz_yaw(2, 2, 0, 0.3)
        g = init_graph(prior, pose)
        g.add_keyframe(Pose3.identity(), observe_planes(world, pose, 10.0))
        rep = g.optimize()
        assert rep.initial_cost < 1e-12 and rep.iterations == 0

    def test_recovers_perturbed_keyframe(self, room):
        _, prior, world = room
        truth = Pose3.from_xyz_yaw(2.0, 1.5, 0, 0.2)
        obs = observe_planes(world, truth, 10.0)
        off = Pose3.from_xyz_yaw(2.0 + 0.3 / math.sqrt(2), 1.5 - 0.3 / math.sqrt(2), 0, 0.2)
        g = init_graph(prior, truth)
        g.add_keyframe(Pose3.identity(), [])
        g.keyframes[0].estimate = off
        for o in obs[:3]:
            g.associate_plane(o, 0)
        assert len(g.keyframe_walls(0)) == 3
        g.optimize(max_iters=50)
        assert np.linalg.norm(g.keyframe(0).estimate.t - truth.t) < 1e-3

    def test_odometry_chain_stays_put(self, room):
        _, prior, _ = room
        T = Pose3.from_xyz_yaw(1, 1, 0, 0.5)
        g = init_graph(prior, T)
        odo = [Pose3.from_xyz_yaw(1.2 * k, 0.1 * k, 0, 0.05 * k) for k in range(5)]
        for o in odo:
            g.add_keyframe(o, [])
        rep = g.optimize()
        assert rep.initial_cost < 1e-20
        for kf, o in zip(g.keyframes, odo):
            assert kf.estimate.allclose(pose_compose(T, o), atol=1e-9)

    def test_monotone_cost_and_fixed_prior(self, room):
        storey, prior, _ = room
        traj = TrajectorySpec(((0.8, 0.8), (4.2, 0.8), (4.2, 3.2), (0.8, 3.2)), 0.5, 5.0)
        frames = simulate(storey, traj, NoiseConfig(odom_x=0.03, odom_y=0.03, odom_yaw=0.01), seed=3)
        T = Pose3.from_xyz_yaw(0.8, 0.8)
        g = init_graph(prior, T)
        before = {w: (g.walls[w].plane.n.tobytes(), g.walls[w].plane.d) for w in g.walls}
        centers = {r: g.rooms[r].center.tobytes() for r in g.rooms}
        for fr in frames:
            track(g, fr.odom, fr.planes, fr.t, optimize=False)
        rep = g.optimize(max_iters=30)
        assert rep.iterations >= 1
        assert all(b <= a for a, b in zip(rep.costs, rep.costs[1:]))
        assert rep.final_cost <= rep.initial_cost
        for w, (nb, d) in before.items():
            assert g.walls[w].plane.n.tobytes() == nb and g.walls[w].plane.d == d
        for r, c in centers.items():
            assert g.rooms[r].center.tobytes() == c

    def test_needs_keyframe(self, room):
        _, prior, _ = room
        with pytest.raises(RuntimeError):
            init_graph(prior, Pose3.identity()).optimize()


def test_noiseless_tracking_is_exact(room):
    storey, prior, _ = room
    traj = TrajectorySpec(((0.8, 0.8), (4.2, 0.8), (4.2, 3.2)), 0.5, 5.0)
    frames = simulate(storey, traj, NoiseConfig.zero(), seed=0)
    g = init_graph(prior, frames[0].gt)
    for fr in frames:
        track(g, fr.odom, fr.planes, fr.t)
    err = ate([(kf.stamp, kf.estimate) for kf in g.keyframes], [(f.t, f.gt) for f in frames], 0.2)
    assert err < 1e-3
    assert not g.observed_walls()
    snap = g.to_dict()
    assert list(snap)[:3] == ["wall_nodes", "room_nodes", "edges"]
    assert len(snap["keyframes"]) == len(g.keyframes)
