"""Deterministic simulator: trajectories, odometry, wall-plane observations and LiDAR-like clouds.

The world is the set of wall faces of one storey. Each plan wall has a front
face (through ``start``) and a back face ``thickness`` metres deeper; both
carry normals pointing into the wall body, so a face is seen from the side
where ``n . p + d < 0``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .geometry import (
    Plane, Pose3, pose_between, pose_compose, pose_inverse, quat_from_rotvec,
    quat_to_matrix, transform_plane, wrap_angle,
)
from .plan import Storey, duplicate_wall, wall_plane


@dataclass(frozen=True, eq=False)
class Face:
    id: str
    wall_id: str
    plane: Plane
    start: np.ndarray
    direction: np.ndarray
    length: float
    height: float


@dataclass(frozen=True, eq=False)
class World:
    """Wall faces plus the 2D footprints of the wall bodies used for occlusion."""

    faces: tuple
    footprints: dict  # wall_id -> (4, 2) corners


def build_world(storey: Storey) -> World:
    faces = []
    footprints = {}
    for w in storey.walls:
        front = wall_plane(w)
        back = duplicate_wall(front, w.thickness)
        u = w.direction
        faces.append(Face(f"{w.id}:front", w.id, front, w.start, u, w.length, w.height))
        faces.append(Face(f"{w.id}:back", w.id, back, w.start + w.thickness * w.normal, u, w.length, w.height))
        a = w.start[:2]
        b = a + w.length * u[:2]
        off = w.thickness * w.normal[:2]
        footprints[w.id] = np.array([a, b, b + off, a + off])
    return World(tuple(faces), footprints)


# --------------------------------------------------------------------------
# trajectories and odometry
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrajectorySpec:
    """Waypoints ``(x, y)`` or ``(x, y, yaw)``; a missing/None yaw follows the path heading."""

    waypoints: tuple
    speed: float = 0.5
    rate: float = 5.0
    z: float = 0.0

    def __post_init__(self):
        if len(self.waypoints) < 2:
            raise ValueError("trajectory needs at least two waypoints")
        if not (self.speed > 0 and self.rate > 0):
            raise ValueError("speed and rate must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> TrajectorySpec:
        return cls(tuple(tuple(w) for w in d["waypoints"]), float(d.get("speed", 0.5)),
                   float(d.get("rate", 5.0)), float(d.get("z", 0.0)))


TURN_DISTANCE = 0.5  # metres of travel over which the heading swings onto a new segment


def _segment_yaws(xy: np.ndarray, given: list) -> tuple[np.ndarray, np.ndarray]:
    """Start yaw and travel heading of every segment.

    A segment starts at its waypoint's explicit yaw, or at the heading it
    inherits from the previous segment, and turns toward its own heading.
    """
    seg = np.diff(xy, axis=0)
    headings = np.arctan2(seg[:, 1], seg[:, 0])
    start = np.empty_like(headings)
    for i in range(len(headings)):
        y = given[i]
        if y is None:
            y = headings[i - 1] if i > 0 else headings[0]
        start[i] = y
    return start, headings


def generate_trajectory(ts: TrajectorySpec) -> list[tuple[float, Pose3]]:
    """Constant-speed samples along the polyline at ``rate`` Hz, endpoint included.

    On each segment the yaw is interpolated from the segment's start yaw to
    its travel heading over the first ``TURN_DISTANCE`` metres, then held.
    """
    xy = np.array([w[:2] for w in ts.waypoints], dtype=float)
    seg_len = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    if np.any(seg_len < 1e-9):
        raise ValueError("consecutive waypoints coincide")
    given = [w[2] if len(w) > 2 else None for w in ts.waypoints]
    start, heading = _segment_yaws(xy, given)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    duration = cum[-1] / ts.speed
    n = int(math.floor(duration * ts.rate + 1e-9))
    times = np.arange(n + 1) / ts.rate
    if duration - times[-1] > 1e-9:
        times = np.append(times, duration)
    out = []
    for t in times:
        s = min(t * ts.speed, cum[-1])
        i = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg_len) - 1)
        f = (s - cum[i]) / seg_len[i]
        p = xy[i] + f * (xy[i + 1] - xy[i])
        g = min(1.0, (s - cum[i]) / min(TURN_DISTANCE, seg_len[i]))
        yaw = wrap_angle(start[i] + g * wrap_angle(heading[i] - start[i]))
        out.append((float(t), Pose3.from_xyz_yaw(p[0], p[1], ts.z, yaw)))
    # exact endpoint, facing the last waypoint's yaw when one is given
    last = xy[-1]
    yaw = given[-1] if given[-1] is not None else heading[-1]
    out[-1] = (out[-1][0], Pose3.from_xyz_yaw(last[0], last[1], ts.z, float(yaw)))
    return out


@dataclass(frozen=True)
class NoiseConfig:
    odom_x: float = 0.01
    odom_y: float = 0.01
    odom_yaw: float = math.radians(0.2)
    plane_angle: float = math.radians(0.5)
    plane_offset: float = 0.02
    cloud_point: float = 0.01
    seed: int = 0

    def __post_init__(self):
        for k in ("odom_x", "odom_y", "odom_yaw", "plane_angle", "plane_offset", "cloud_point"):
            if getattr(self, k) < 0:
                raise ValueError(f"noise {k} must be non-negative")

    @classmethod
    def zero(cls, seed: int = 0) -> NoiseConfig:
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, seed)

    @classmethod
    def from_dict(cls, d: dict) -> NoiseConfig:
        """Angles in the dict are given in degrees (keys ending in ``_deg``)."""
        kw = {}
        for k, v in d.items():
            if k.endswith("_deg"):
                kw[k[:-4]] = math.radians(float(v))
            elif k == "seed":
                kw[k] = int(v)
            else:
                kw[k] = float(v)
        return cls(**kw)


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, *stream])


def simulate_odometry(gt: list[Pose3], nc: NoiseConfig, seed: int | None = None) -> list[Pose3]:
    """Re-base the ground truth at identity and accumulate noisy increments."""
    if len(gt) < 2:
        raise ValueError("need at least two poses")
    rng = _rng(nc.seed if seed is None else seed, 21)
    odom = [Pose3.identity()]
    for a, b in zip(gt, gt[1:]):
        u = pose_between(a, b)
        ex, ey, eyaw = rng.standard_normal(3) * np.array([nc.odom_x, nc.odom_y, nc.odom_yaw])
        u = pose_compose(u, Pose3.from_xyz_yaw(ex, ey, 0.0, eyaw))
        odom.append(pose_compose(odom[-1], u))
    return odom


# --------------------------------------------------------------------------
# plane observations
# --------------------------------------------------------------------------

def _segments_cross(p, q, a, b) -> np.ndarray:
    """Proper intersection of segment p-q with segments a[i]-b[i] (2D)."""
    def cross(o, u, v):
        return (u[..., 0] - o[..., 0]) * (v[..., 1] - o[..., 1]) - (u[..., 1] - o[..., 1]) * (v[..., 0] - o[..., 0])
    eps = 1e-12
    d1 = cross(a, b, p)
    d2 = cross(a, b, q)
    d3 = cross(p, q, a)
    d4 = cross(p, q, b)
    return (d1 * d2 < -eps) & (d3 * d4 < -eps)


def _occluded(world: World, p2: np.ndarray, f2: np.ndarray, skip_wall: str) -> bool:
    for wid, c in world.footprints.items():
        if wid == skip_wall:
            continue
        a = c
        b = np.roll(c, -1, axis=0)
        if np.any(_segments_cross(p2, f2, a, b)):
            return True
    return False


def visible_faces(world: World, pose: Pose3, max_range: float, occlusion: bool = True) -> list[Face]:
    """Faces seen from ``pose``: front side, within range, perpendicular foot on the face.

    With ``occlusion`` the line from the sensor to the foot must not cross
    another wall body.
    """
    p = pose.t
    out = []
    for f in world.faces:
        s = float(f.plane.n @ p + f.plane.d)
        if not (s < 0.0 and -s <= max_range):
            continue
        foot = p - s * f.plane.n
        rel = foot - f.start
        along = float(rel @ f.direction)
        up = float(rel[2])
        if not (-1e-9 <= along <= f.length + 1e-9 and -1e-9 <= up <= f.height + 1e-9):
            continue
        if occlusion and _occluded(world, p[:2], foot[:2], f.wall_id):
            continue
        out.append(f)
    return out


def perturb_plane(p: Plane, angle_sigma: float, offset_sigma: float, rng) -> Plane:
    if angle_sigma == 0.0 and offset_sigma == 0.0:
        return p
    w = rng.standard_normal(3) * angle_sigma
    n = quat_to_matrix(quat_from_rotvec(w)) @ p.n
    return Plane(n / np.linalg.norm(n), p.d + rng.standard_normal() * offset_sigma)


def observe_planes(world: World, pose: Pose3, max_range: float = 10.0, nc: NoiseConfig | None = None,
                   rng=None, occlusion: bool = True) -> list[Plane]:
    """Visible faces expressed in the sensor frame, with Gaussian plane noise."""
    nc = nc or NoiseConfig.zero()
    if rng is None:
        rng = _rng(nc.seed, 31)
    inv = pose_inverse(pose)
    return [perturb_plane(transform_plane(inv, f.plane), nc.plane_angle, nc.plane_offset, rng)
            for f in visible_faces(world, pose, max_range, occlusion)]


# --------------------------------------------------------------------------
# point clouds and plane extraction
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CloudParams:
    rings: int = 16
    min_elevation: float = math.radians(-15.0)
    max_elevation: float = math.radians(15.0)
    azimuth_steps: int = 360
    max_range: float = 30.0
    sigma: float = 0.01


def sample_cloud(world: World, pose: Pose3, params: CloudParams = CloudParams(), rng=None) -> np.ndarray:
    """Ray-cast the faces from ``pose``; returns hit points in the sensor frame."""
    if not world.faces:
        return np.zeros((0, 3))
    if rng is None:
        rng = np.random.default_rng(0)
    el = np.linspace(params.min_elevation, params.max_elevation, params.rings)
    az = np.arange(params.azimuth_steps) * (2 * np.pi / params.azimuth_steps)
    E, A = np.meshgrid(el, az, indexing="ij")
    dirs = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)

    Rt = pose.R.T
    n = np.array([f.plane.n for f in world.faces]) @ Rt.T                 # (F, 3)
    d = np.array([f.plane.d + f.plane.n @ pose.t for f in world.faces])  # (F,)
    start = (np.array([f.start for f in world.faces]) - pose.t) @ Rt.T
    u = np.array([f.direction for f in world.faces]) @ Rt.T
    up = np.tile(Rt @ np.array([0.0, 0.0, 1.0]), (len(world.faces), 1))
    length = np.array([f.length for f in world.faces])
    height = np.array([f.height for f in world.faces])

    denom = dirs @ n.T                                                    # (R, F)
    front = (denom > 1e-9) & (d[None, :] < 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        rng_hit = np.where(front, -d[None, :] / denom, np.inf)
        # missed rays turn into inf/nan here and fail the extent test below
        pts = rng_hit[..., None] * dirs[:, None, :]                      # (R, F, 3)
        rel = pts - start[None, :, :]
        along = np.einsum("rfi,fi->rf", rel, u)
        vert = np.einsum("rfi,fi->rf", rel, up)
    inside = (along >= 0) & (along <= length) & (vert >= 0) & (vert <= height)
    rng_hit = np.where(inside, rng_hit, np.inf)
    best = rng_hit.min(axis=1)
    keep = best <= params.max_range
    r = best[keep]
    if params.sigma > 0:
        r = r + rng.standard_normal(len(r)) * params.sigma
    return dirs[keep] * r[:, None]


def _fit_plane(pts: np.ndarray) -> Plane:
    c = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - c, full_matrices=False)
    n = vt[-1]
    return Plane(n / np.linalg.norm(n), -float(n @ c))


def extract_planes_ransac(cloud, dist_thresh: float = 0.05, min_inliers: int = 100, max_planes: int = 8,
                          iterations: int = 200, seed: int = 0) -> list[Plane]:
    """Sequential RANSAC: find, refine and remove planes until support runs out.

    Normals are oriented away from the sensor origin (``d < 0``), matching
    the face convention of the map.
    """
    pts = np.asarray(cloud, dtype=float).reshape(-1, 3)
    rng = np.random.default_rng(seed)
    planes = []
    while len(planes) < max_planes and len(pts) >= max(3, min_inliers):
        idx = rng.integers(0, len(pts), size=(iterations, 3))
        a, b, c = pts[idx[:, 0]], pts[idx[:, 1]], pts[idx[:, 2]]
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n, axis=1)
        ok = norm > 1e-9
        if not np.any(ok):
            break
        n = n[ok] / norm[ok, None]
        d = -np.einsum("ij,ij->i", n, a[ok])
        counts = (np.abs(pts @ n.T + d) < dist_thresh).sum(axis=0)
        h = int(np.argmax(counts))
        inliers = np.abs(pts @ n[h] + d[h]) < dist_thresh
        if inliers.sum() < min_inliers:
            break
        for _ in range(2):
            plane = _fit_plane(pts[inliers])
            refined = np.abs(plane.signed_distance(pts)) < dist_thresh
            if refined.sum() < 3:
                break
            inliers = refined
        plane = _fit_plane(pts[inliers])
        if inliers.sum() < min_inliers:
            break
        if plane.d > 0:
            plane = plane.flipped()
        planes.append(plane)
        pts = pts[~inliers]
    return planes


# --------------------------------------------------------------------------
# observation frames and the JSON-lines log
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Frame:
    t: float
    odom: Pose3
    planes: tuple
    gt: Pose3 | None = None


class ObservationLogError(ValueError):
    pass


def simulate(storey: Storey, traj: TrajectorySpec, noise: NoiseConfig, seed: int, max_range: float = 10.0,
             occlusion: bool = True, clouds: CloudParams | None = None):
    """Ground truth, odometry and observations for one run.

    Returns the frames, and the per-frame point clouds when ``clouds`` is given.
    """
    world = build_world(storey)
    samples = generate_trajectory(traj)
    gt = [p for _, p in samples]
    odom = simulate_odometry(gt, noise, seed)
    rng = _rng(seed, 31)
    frames = []
    cloud_list = []
    for (t, g), o in zip(samples, odom):
        planes = observe_planes(world, g, max_range, noise, rng, occlusion)
        frames.append(Frame(t, o, tuple(planes), g))
        if clouds is not None:
            cp = CloudParams(clouds.rings, clouds.min_elevation, clouds.max_elevation, clouds.azimuth_steps,
                             clouds.max_range, noise.cloud_point)
            cloud_list.append(sample_cloud(world, g, cp, rng))
    if clouds is not None:
        return frames, cloud_list
    return frames


def frame_to_dict(fr: Frame) -> dict:
    d = {"t": fr.t, "odom": fr.odom.to_list(), "planes": [p.to_list() for p in fr.planes]}
    if fr.gt is not None:
        d["gt"] = fr.gt.to_list()
    return d


def frame_from_dict(d: dict) -> Frame:
    try:
        planes = tuple(Plane.from_normal(p[:3], p[3]) for p in d["planes"])
        gt = Pose3.from_list(d["gt"]) if d.get("gt") is not None else None
        return Frame(float(d["t"]), Pose3.from_list(d["odom"]), planes, gt)
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        raise ObservationLogError(f"malformed frame: {exc}") from None


def write_obs_log(path, frames) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for fr in frames:
            fh.write(json.dumps(frame_to_dict(fr)) + "\n")


def read_obs_log(path) -> list[Frame]:
    frames = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                frames.append(frame_from_dict(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise ObservationLogError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            except ObservationLogError as exc:
                raise ObservationLogError(f"line {lineno}: {exc}") from None
    if not frames:
        raise ObservationLogError("observation log is empty")
    return frames
