"""Three-layer situational graph used for tracking after global localisation.

The graph holds robot keyframes, wall-plane nodes and room nodes. Wall and
room nodes that come from the building plan are fixed anchors; walls and
rooms discovered online are optimised together with the keyframe poses.

Residuals
---------
``prior``      6-dim pose difference ``[R0^T (t - t0), Log(R0^T R)]`` on the
               first keyframe, with a weak information so it only fixes the
               gauge.
``odometry``   6-dim relative pose error between consecutive keyframes.
``plane_obs``  minimal-form difference between the wall plane predicted in
               the keyframe frame and the measured plane.
``room_wall``  2-dim difference between a room centre and the midpoints of
               its x-wall pair (x component) and y-wall pair (y component).

Keyframe poses are perturbed with ``t += dt``, ``R <- R Exp(dw)``; observed
walls use their (azimuth, elevation, offset) triple and observed rooms their
2D centre. All Jacobians are analytic.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    MahalanobisGate, Plane, Pose3, WallClass, classify_wall, from_minimal, PlaneMinimal,
    minimal_arrays, pose_between, pose_compose, pose_retract, skew, so3_log,
    so3_right_jacobian_inv, to_minimal, transform_plane, wrap_angle,
)
from .plan import PriorGraph

PRIOR, OBSERVED = "prior", "observed"


# --------------------------------------------------------------------------
# residuals and Jacobians
# --------------------------------------------------------------------------

def _normal(m) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unit normal from (phi, theta) and its derivatives."""
    phi, theta = m[0], m[1]
    cp, sp, ct, st = math.cos(phi), math.sin(phi), math.cos(theta), math.sin(theta)
    n = np.array([ct * cp, ct * sp, st])
    dn_dphi = np.array([-ct * sp, ct * cp, 0.0])
    dn_dtheta = np.array([-st * cp, -st * sp, ct])
    return n, dn_dphi, dn_dtheta


def _minimal_jacobian(n: np.ndarray) -> np.ndarray:
    """d(phi, theta)/dn for a unit normal (2x3)."""
    rho2 = n[0] ** 2 + n[1] ** 2
    J = np.zeros((2, 3))
    J[0, 0] = -n[1] / rho2
    J[0, 1] = n[0] / rho2
    J[1, 2] = 1.0 / math.sqrt(max(1.0 - n[2] ** 2, 1e-300))
    return J


def prior_residual(T: Pose3, T0: Pose3):
    """Pose prior; returns ``(r, J)`` with ``J`` w.r.t. the 6-dim pose perturbation."""
    R0 = T0.R
    w = so3_log(R0.T @ T.R)
    r = np.concatenate([R0.T @ (T.t - T0.t), w])
    J = np.zeros((6, 6))
    J[:3, :3] = R0.T
    J[3:, 3:] = so3_right_jacobian_inv(w)
    return r, J


def odometry_residual(Ti: Pose3, Tj: Pose3, Z: Pose3):
    """Relative pose error of ``Ti^-1 Tj`` against ``Z``; returns ``(r, Ji, Jj)``."""
    Ri, Rj, Rz = Ti.R, Tj.R, Z.R
    v = Ri.T @ (Tj.t - Ti.t)
    w = so3_log(Rz.T @ Ri.T @ Rj)
    r = np.concatenate([Rz.T @ (v - Z.t), w])
    Jr_inv = so3_right_jacobian_inv(w)
    Ji = np.zeros((6, 6))
    Jj = np.zeros((6, 6))
    Ji[:3, :3] = -Rz.T @ Ri.T
    Ji[:3, 3:] = Rz.T @ skew(v)
    Ji[3:, 3:] = -Jr_inv @ Rj.T @ Ri
    Jj[:3, :3] = Rz.T @ Ri.T
    Jj[3:, 3:] = Jr_inv
    return r, Ji, Jj


def plane_obs_residual(T: Pose3, wall: np.ndarray, meas: np.ndarray):
    """Predicted-minus-measured plane in the keyframe frame.

    ``wall`` and ``meas`` are minimal triples (phi, theta, d); ``wall`` is in
    the world frame. Returns ``(r, J_pose, J_wall)``.
    """
    n, dn_dphi, dn_dtheta = _normal(wall)
    d = wall[2]
    R = T.R
    n_l = R.T @ n
    d_l = d + n @ T.t
    pred = minimal_arrays(n_l, d_l)
    r = pred - meas
    r[0] = wrap_angle(r[0])
    Jm = _minimal_jacobian(n_l)
    J_pose = np.zeros((3, 6))
    J_pose[:2, 3:] = Jm @ skew(n_l)
    J_pose[2, :3] = n
    J_wall = np.zeros((3, 3))
    dn = np.column_stack([dn_dphi, dn_dtheta])   # 3x2
    J_wall[:2, :2] = Jm @ R.T @ dn
    J_wall[2, :2] = T.t @ dn
    J_wall[2, 2] = 1.0
    return r, J_pose, J_wall


def _cp_and_jacobian(wall: np.ndarray):
    """Closest point ``-d n`` of a minimal wall and its 3x3 Jacobian."""
    n, dn_dphi, dn_dtheta = _normal(wall)
    d = wall[2]
    return -d * n, np.column_stack([-d * dn_dphi, -d * dn_dtheta, -n])


def room_wall_residual(center: np.ndarray, walls):
    """Room centre against its walls ``(x1, x2, y1, y2)``, all minimal triples.

    Returns ``(r, J_center, [J_x1, J_x2, J_y1, J_y2])``.
    """
    cps = [_cp_and_jacobian(np.asarray(w, dtype=float)) for w in walls]
    mx = 0.5 * (cps[0][0][0] + cps[1][0][0])
    my = 0.5 * (cps[2][0][1] + cps[3][0][1])
    r = np.asarray(center, dtype=float) - np.array([mx, my])
    J_walls = []
    for k, (_, Jcp) in enumerate(cps):
        J = np.zeros((2, 3))
        row = 0 if k < 2 else 1
        J[row] = -0.5 * Jcp[row]
        J_walls.append(J)
    return r, np.eye(2), J_walls


# --------------------------------------------------------------------------
# graph data
# --------------------------------------------------------------------------

@dataclass
class Keyframe:
    id: int
    odom: Pose3
    estimate: Pose3
    stamp: float | None = None


@dataclass
class WallState:
    id: str
    plane: Plane
    origin: str

    @property
    def wall_class(self) -> WallClass:
        return classify_wall(self.plane)

    @property
    def minimal(self) -> np.ndarray:
        return to_minimal(self.plane).as_array()


@dataclass
class RoomState:
    id: str
    center: np.ndarray
    origin: str


@dataclass
class Factor:
    kind: str                 # prior | odometry | plane_obs | room_wall
    nodes: tuple              # keyframe ids (int) and/or wall/room ids (str)
    measurement: object       # Pose3, minimal plane array, or None
    information: np.ndarray

    def __post_init__(self):
        info = np.asarray(self.information, dtype=float)
        if info.ndim != 2 or info.shape[0] != info.shape[1] or not np.allclose(info, info.T):
            raise ValueError("information matrix must be square and symmetric")
        if np.linalg.eigvalsh(info).min() <= 0.0:
            raise ValueError("information matrix must be positive definite")
        self.information = info


@dataclass(frozen=True)
class RoomCandidate:
    center: np.ndarray
    wall_node_ids: tuple      # x wall, opposing x wall, y wall, opposing y wall

    def __post_init__(self):
        if len(self.wall_node_ids) != 4 or len(set(self.wall_node_ids)) != 4:
            raise ValueError("a room candidate needs four distinct walls")


@dataclass
class OptimizeReport:
    initial_cost: float
    final_cost: float
    iterations: int           # accepted steps
    converged: bool
    message: str = ""
    costs: list = field(default_factory=list)  # initial cost, then one entry per accepted step


@dataclass(frozen=True)
class SGraphConfig:
    keyframe_distance: float = 1.0
    keyframe_angle: float = math.radians(15.0)
    gate: MahalanobisGate = field(default_factory=MahalanobisGate)
    room_tol: float = 2.0
    odom_sigma: tuple = (0.05, 0.05, 0.05, 0.02, 0.02, 0.02)
    plane_sigma: tuple = (0.01, 0.01, 0.02)
    room_sigma: float = 0.05
    gauge_sigma: tuple = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    max_iters: int = 10

    def info(self, sig) -> np.ndarray:
        return np.diag(1.0 / np.square(np.asarray(sig, dtype=float)))


def _cost(r: np.ndarray, info: np.ndarray) -> float:
    return float(r @ info @ r)


class SGraph:
    """Keyframes, wall nodes, room nodes and the factors tying them together."""

    def __init__(self, prior: PriorGraph, T_WO: Pose3, config: SGraphConfig | None = None):
        if not prior.wall_nodes:
            raise ValueError("prior graph has no wall nodes")
        self.prior = prior
        self.T_WO = T_WO
        self.config = config or SGraphConfig()
        self.keyframes: list[Keyframe] = []
        self.walls: dict[str, WallState] = {
            w.id: WallState(w.id, w.plane, PRIOR) for w in prior.wall_nodes
        }
        self.rooms: dict[str, RoomState] = {
            r.id: RoomState(r.id, np.array(r.center, dtype=float), PRIOR) for r in prior.room_nodes
        }
        self.factors: list[Factor] = []
        self._last_odom: Pose3 | None = None
        self._next_wall = 0
        self._next_room = 0

    # ---- queries ---------------------------------------------------------

    def keyframe(self, kf: int) -> Keyframe:
        return self.keyframes[kf]

    def counts(self) -> tuple[int, int, int]:
        return len(self.keyframes), len(self.walls), len(self.rooms)

    def observed_walls(self) -> list[str]:
        return [w.id for w in self.walls.values() if w.origin == OBSERVED]

    def current_pose(self) -> Pose3:
        if not self.keyframes:
            raise RuntimeError("no keyframes yet")
        kf = self.keyframes[-1]
        odom = self._last_odom if self._last_odom is not None else kf.odom
        return pose_compose(kf.estimate, pose_between(kf.odom, odom))

    def keyframe_walls(self, kf: int) -> list[str]:
        """Wall nodes with a plane observation from keyframe ``kf``, in factor order."""
        out = []
        for f in self.factors:
            if f.kind == "plane_obs" and f.nodes[0] == kf and f.nodes[1] not in out:
                out.append(f.nodes[1])
        return out

    # ---- tracking layer --------------------------------------------------

    def add_keyframe(self, odom: Pose3, obs, stamp: float | None = None) -> int | None:
        """Create a keyframe if the robot moved enough since the last one."""
        self._last_odom = odom
        cfg = self.config
        if self.keyframes:
            last = self.keyframes[-1]
            rel = pose_between(last.odom, odom)
            angle = float(np.linalg.norm(so3_log(rel.R)))
            if np.linalg.norm(rel.t) < cfg.keyframe_distance and angle < cfg.keyframe_angle:
                return None
            estimate = pose_compose(last.estimate, rel)
        else:
            estimate = pose_compose(self.T_WO, odom)
        kf = Keyframe(len(self.keyframes), odom, estimate, stamp)
        self.keyframes.append(kf)
        if kf.id == 0:
            self.factors.append(Factor("prior", (0,), estimate, cfg.info(cfg.gauge_sigma)))
        else:
            self.factors.append(Factor("odometry", (kf.id - 1, kf.id), rel, cfg.info(cfg.odom_sigma)))
        for p in obs:
            self.associate_plane(p, kf.id)
        return kf.id

    def _match_plane(self, obs: Plane, T: Pose3, candidates, gate: MahalanobisGate):
        """Best candidate wall for an observation, compared in the keyframe frame."""
        m_obs = to_minimal(obs).as_array()
        best, best_err = None, math.inf
        for wid in candidates:
            w = self.walls[wid]
            n_l = T.R.T @ w.plane.n
            m_l = minimal_arrays(n_l, w.plane.d + w.plane.n @ T.t)
            delta = m_l - m_obs
            delta[0] = wrap_angle(delta[0])
            err = float(delta @ gate.info @ delta)
            if err < best_err or (err == best_err and best is not None and wid < best):
                best, best_err = wid, err
        return best, best_err

    def associate_plane(self, obs: Plane, kf: int, gate: MahalanobisGate | None = None) -> str | None:
        """Attach an observation to the best same-class wall or create a new wall.

        Observations whose world normal is not a wall (floor, ceiling) are
        ignored and ``None`` is returned.
        """
        gate = gate or self.config.gate
        T = self.keyframes[kf].estimate
        obs_w = transform_plane(T, obs)
        cls = classify_wall(obs_w)
        if cls is WallClass.NON_WALL:
            return None
        cands = [w.id for w in self.walls.values() if w.wall_class is cls]
        best, err = self._match_plane(obs, T, cands, gate)
        if best is None or err >= gate.threshold:
            best = f"obs{self._next_wall}"
            self._next_wall += 1
            self.walls[best] = WallState(best, obs_w, OBSERVED)
        info = self.config.info(self.config.plane_sigma)
        self.factors.append(Factor("plane_obs", (kf, best), to_minimal(obs).as_array(), info))
        return best

    # ---- topological layer -----------------------------------------------

    def detect_room(self, kf: int) -> RoomCandidate | None:
        """Room candidate from the walls observed at ``kf``.

        For each class the nearest wall on each side of the keyframe is
        taken; a candidate needs both sides in both classes.
        """
        pos = self.keyframes[kf].estimate.t
        picks = {}
        for wid in self.keyframe_walls(kf):
            w = self.walls[wid]
            cls = w.wall_class
            if cls is WallClass.NON_WALL:
                continue
            axis = 0 if cls is WallClass.X_VERTICAL else 1
            key = (axis, w.plane.n[axis] > 0)
            dist = abs(w.plane.signed_distance(pos))
            if key not in picks or dist < picks[key][0]:
                picks[key] = (dist, wid)
        keys = [(0, True), (0, False), (1, True), (1, False)]
        if any(k not in picks for k in keys):
            return None
        ids = tuple(picks[k][1] for k in keys)
        cps = [-self.walls[i].plane.d * self.walls[i].plane.n for i in ids]
        center = np.array([0.5 * (cps[0][0] + cps[1][0]), 0.5 * (cps[2][1] + cps[3][1])])
        return RoomCandidate(center, ids)

    def associate_room(self, cand: RoomCandidate, tol: float | None = None) -> str:
        """Match a candidate to the nearest room within ``tol`` or add a new room.

        Observed walls of the candidate that duplicate one of the matched
        prior room's walls are merged into the prior wall.
        """
        tol = self.config.room_tol if tol is None else tol
        best, best_dist = None, math.inf
        for rid in sorted(self.rooms):
            dist = float(np.linalg.norm(self.rooms[rid].center - cand.center))
            if dist < best_dist:
                best, best_dist = rid, dist
        if best is None or best_dist > tol:
            best = f"room{self._next_room}"
            self._next_room += 1
            self.rooms[best] = RoomState(best, np.array(cand.center, dtype=float), OBSERVED)
            walls = list(cand.wall_node_ids)
        else:
            walls = [self._merge_into_prior(wid, best) for wid in cand.wall_node_ids]
        nodes = (best, *walls)
        if not any(f.kind == "room_wall" and f.nodes == nodes for f in self.factors):
            info = self.config.info([self.config.room_sigma] * 2)
            self.factors.append(Factor("room_wall", nodes, None, info))
        return best

    def _merge_into_prior(self, wid: str, room_id: str) -> str:
        w = self.walls[wid]
        if w.origin != OBSERVED or room_id not in self.prior.room_wall_edges:
            return wid
        gate = self.config.gate
        m = w.minimal
        best, best_err = None, math.inf
        for pid in self.prior.room_wall_edges[room_id]:
            p = self.walls[pid]
            if p.wall_class is not w.wall_class:
                continue
            delta = m - p.minimal
            delta[0] = wrap_angle(delta[0])
            err = float(delta @ gate.info @ delta)
            if err < best_err:
                best, best_err = pid, err
        if best is None or best_err >= gate.threshold:
            return wid
        self.merge_walls(wid, best)
        return best

    def merge_walls(self, src: str, dst: str) -> None:
        """Re-point every factor from ``src`` to ``dst`` and delete ``src``."""
        if self.walls[src].origin != OBSERVED:
            raise ValueError("only observed walls can be merged away")
        for f in self.factors:
            if src in f.nodes:
                f.nodes = tuple(dst if x == src else x for x in f.nodes)
        del self.walls[src]

    # ---- optimisation ----------------------------------------------------

    def _layout(self):
        cols = {}
        k = 0
        for kf in self.keyframes:
            cols[("kf", kf.id)] = k
            k += 6
        for wid, w in self.walls.items():
            if w.origin == OBSERVED:
                cols[("wall", wid)] = k
                k += 3
        for rid, r in self.rooms.items():
            if r.origin == OBSERVED:
                cols[("room", rid)] = k
                k += 2
        return cols, k

    def _linearize(self, cols: dict, size: int, walls_min: dict):
        H = np.zeros((size, size))
        g = np.zeros(size)
        cost = 0.0
        for f in self.factors:
            r, blocks = self._factor_jacobians(f, walls_min)
            info = f.information
            cost += _cost(r, info)
            active = [(cols[key], J) for key, J in blocks if key in cols]
            for ca, Ja in active:
                g[ca:ca + Ja.shape[1]] += Ja.T @ info @ r
                for cb, Jb in active:
                    H[ca:ca + Ja.shape[1], cb:cb + Jb.shape[1]] += Ja.T @ info @ Jb
        return H, g, cost

    def _factor_jacobians(self, f: Factor, walls_min: dict):
        if f.kind == "prior":
            kf = f.nodes[0]
            r, J = prior_residual(self.keyframes[kf].estimate, f.measurement)
            return r, [(("kf", kf), J)]
        if f.kind == "odometry":
            i, j = f.nodes
            r, Ji, Jj = odometry_residual(self.keyframes[i].estimate, self.keyframes[j].estimate,
                                          f.measurement)
            return r, [(("kf", i), Ji), (("kf", j), Jj)]
        if f.kind == "plane_obs":
            kf, wid = f.nodes
            r, Jp, Jw = plane_obs_residual(self.keyframes[kf].estimate, walls_min[wid], f.measurement)
            return r, [(("kf", kf), Jp), (("wall", wid), Jw)]
        if f.kind == "room_wall":
            rid, *wids = f.nodes
            r, Jc, Jws = room_wall_residual(self.rooms[rid].center, [walls_min[w] for w in wids])
            return r, [(("room", rid), Jc)] + [(("wall", w), J) for w, J in zip(wids, Jws)]
        raise ValueError(f"unknown factor kind {f.kind!r}")

    def total_cost(self) -> float:
        walls_min = {wid: w.minimal for wid, w in self.walls.items()}
        return sum(_cost(self._factor_jacobians(f, walls_min)[0], f.information) for f in self.factors)

    def _state(self):
        return ([kf.estimate for kf in self.keyframes],
                {wid: w.plane for wid, w in self.walls.items()},
                {rid: r.center.copy() for rid, r in self.rooms.items()})

    def _restore(self, state):
        poses, planes, centers = state
        for kf, p in zip(self.keyframes, poses):
            kf.estimate = p
        for wid, p in planes.items():
            self.walls[wid].plane = p
        for rid, c in centers.items():
            self.rooms[rid].center = c

    def _apply(self, cols: dict, dx: np.ndarray):
        for (kind, key), c in cols.items():
            if kind == "kf":
                kf = self.keyframes[key]
                kf.estimate = pose_retract(kf.estimate, dx[c:c + 6])
            elif kind == "wall":
                m = self.walls[key].minimal + dx[c:c + 3]
                self.walls[key].plane = from_minimal(PlaneMinimal(wrap_angle(m[0]), m[1], m[2]))
            else:
                self.rooms[key].center = self.rooms[key].center + dx[c:c + 2]

    def optimize(self, max_iters: int | None = None) -> OptimizeReport:
        """Levenberg-Marquardt over keyframes and observed walls/rooms."""
        if not self.keyframes:
            raise RuntimeError("optimize needs at least one keyframe")
        max_iters = self.config.max_iters if max_iters is None else max_iters
        cols, size = self._layout()
        walls_min = {wid: w.minimal for wid, w in self.walls.items()}
        H, g, cost = self._linearize(cols, size, walls_min)
        initial = cost
        costs = [cost]
        lam = 1e-4
        accepted = 0
        converged = False
        message = ""
        for _ in range(max_iters):
            if cost < 1e-14:
                converged = True
                break
            A = H + lam * np.diag(np.maximum(np.diag(H), 1e-9))
            try:
                dx = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                message = "singular normal system"
                break
            saved = self._state()
            self._apply(cols, dx)
            walls_new = {wid: w.minimal for wid, w in self.walls.items()}
            H_new, g_new, new_cost = self._linearize(cols, size, walls_new)
            if np.isfinite(new_cost) and new_cost < cost:
                decrease = (cost - new_cost) / cost
                H, g, cost = H_new, g_new, new_cost
                costs.append(cost)
                accepted += 1
                lam = max(lam / 10.0, 1e-12)
                if decrease < 1e-6:
                    converged = True
                    break
            else:
                self._restore(saved)
                lam *= 10.0
                if lam > 1e12:
                    converged = True
                    break
        return OptimizeReport(initial, cost, accepted, converged, message, costs)

    # ---- export ----------------------------------------------------------

    def to_dict(self) -> dict:
        walls_min = {wid: w.minimal for wid, w in self.walls.items()}
        factors = []
        for f in self.factors:
            r = self._factor_jacobians(f, walls_min)[0]
            factors.append({"kind": f.kind, "nodes": list(f.nodes), "residual_norm": float(np.linalg.norm(r))})
        edges = {}
        for f in self.factors:
            if f.kind == "room_wall":
                edges.setdefault(f.nodes[0], [])
                edges[f.nodes[0]] += [w for w in f.nodes[1:] if w not in edges[f.nodes[0]]]
        for rid, ids in self.prior.room_wall_edges.items():
            edges.setdefault(rid, [])
            edges[rid] = list(ids) + [w for w in edges[rid] if w not in ids]
        return {
            "wall_nodes": [
                {"id": w.id, "origin": w.origin, "n": [float(x) for x in w.plane.n], "d": float(w.plane.d)}
                for w in self.walls.values()
            ],
            "room_nodes": [
                {"id": r.id, "origin": r.origin, "center": [float(x) for x in r.center]}
                for r in self.rooms.values()
            ],
            "edges": [{"room": rid, "walls": ids} for rid, ids in edges.items()],
            "keyframes": [
                {"id": kf.id, "stamp": kf.stamp, "pose": kf.estimate.to_list()} for kf in self.keyframes
            ],
            "factors": factors,
            "T_WO": self.T_WO.to_list(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def init_graph(prior: PriorGraph, T_WO: Pose3, config: SGraphConfig | None = None) -> SGraph:
    return SGraph(prior, T_WO, config)


def track(g: SGraph, odom: Pose3, obs, stamp: float | None = None, optimize: bool = True) -> int | None:
    """One tracking step: keyframe decision, room detection and optimisation."""
    kf = g.add_keyframe(odom, obs, stamp)
    if kf is None:
        return None
    cand = g.detect_room(kf)
    if cand is not None:
        g.associate_room(cand)
    if optimize:
        g.optimize()
    return kf
