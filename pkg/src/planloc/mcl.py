"""Room-aware Monte Carlo localisation against prior wall planes.

Particles live in the world frame. Each filter step propagates them with the
odometry increment, matches the observed wall planes against candidate
landmarks (only the walls of the particle's own room when the topological
factor is on), reweights, and resamples when the effective sample size drops
below N/2. Once the cloud collapses around its best particle, the best pose
and the current odometry give the odometry-to-world transform.

With the topological factor on, a particle outside every room has no
candidates and keeps the floor weight. When even the best particle explains
less than ``lost_ratio`` of a frame's observations, the filter throws the set
away and draws a fresh uniform one.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    VERTICAL_LIMIT, MahalanobisGate, Pose3, classify_normals,
    minimal_arrays, pose_between, pose_compose, pose_inverse, quat_canonical,
    quat_from_yaw, quat_multiply, quat_to_matrix, wrap_angle,
)
from .plan import PriorGraph

WEIGHT_FLOOR = 1e-12
TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class Particle:
    pose: Pose3
    weight: float
    room_id: str | None = None


@dataclass(frozen=True)
class WeightParams:
    sigma: float = 0.1
    gate: MahalanobisGate = field(default_factory=MahalanobisGate)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @property
    def mu(self) -> float:
        return (2.0 * math.pi * self.sigma**2) ** -0.5


@dataclass(frozen=True)
class ConvergenceCriteria:
    pos_tol: float = 0.5
    yaw_tol: float = math.radians(10.0)
    min_steps: int = 5

    def __post_init__(self):
        if not (self.pos_tol > 0 and self.yaw_tol > 0 and self.min_steps > 0):
            raise ValueError("convergence tolerances and min_steps must be positive")


@dataclass(frozen=True)
class MotionNoise:
    """Per-step standard deviations of the perturbation added in predict."""

    x: float = 0.03
    y: float = 0.03
    yaw: float = math.radians(1.5)


@dataclass(frozen=True, eq=False)
class ParticleSet:
    """N weighted poses stored as arrays; ``rooms`` holds indices into the prior's rooms."""

    t: np.ndarray
    q: np.ndarray
    weights: np.ndarray
    rooms: np.ndarray
    room_ids: tuple
    seed: int
    step_count: int = 0
    degenerate: bool = False
    init_step: int = 0  # step at which the set was last (re)initialised

    def __len__(self):
        return len(self.weights)

    @property
    def yaw(self) -> np.ndarray:
        w, x, y, z = self.q.T
        return np.arctan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))

    def room_of(self, i: int) -> str | None:
        r = int(self.rooms[i])
        return self.room_ids[r] if r >= 0 else None

    def pose(self, i: int) -> Pose3:
        return Pose3(self.t[i], self.q[i])

    @property
    def particles(self) -> list[Particle]:
        return [Particle(self.pose(i), float(self.weights[i]), self.room_of(i)) for i in range(len(self))]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "step_count": self.step_count,
            "t": self.t.tolist(),
            "q": self.q.tolist(),
            "weights": self.weights.tolist(),
            "rooms": [self.room_of(i) for i in range(len(self))],
        }


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, *stream])


# stream tags for the seeded generators
_INIT, _PREDICT, _RESAMPLE = 11, 12, 13


def _room_index(prior: PriorGraph, xy: np.ndarray) -> np.ndarray:
    idx = np.full(len(xy), -1, dtype=int)
    for r, room in enumerate(prior.room_nodes):
        inside = np.all((xy >= room.bbox[:2]) & (xy <= room.bbox[2:]), axis=1)
        idx = np.where((idx < 0) & inside, r, idx)
    return idx


@dataclass(frozen=True)
class _Landmarks:
    ids: tuple
    n: np.ndarray
    d: np.ndarray
    cls: np.ndarray
    room_members: tuple  # per room, array of landmark indices


@functools.lru_cache(maxsize=32)
def _landmarks(prior: PriorGraph) -> _Landmarks:
    n = np.array([w.plane.n for w in prior.wall_nodes]).reshape(-1, 3)
    d = np.array([w.plane.d for w in prior.wall_nodes])
    members = tuple(
        np.array(sorted(prior.node_index(i) for i in prior.room_wall_edges[r.id]), dtype=int)
        for r in prior.room_nodes
    )
    return _Landmarks(tuple(w.id for w in prior.wall_nodes), n, d, classify_normals(n), members)


def init_particles(prior: PriorGraph, n: int, seed: int, stream: int = 0) -> ParticleSet:
    """Uniform positions over the union of room boxes, uniform yaw, equal weights."""
    if not prior.room_nodes:
        raise ValueError("prior graph has no rooms to spread particles over")
    if n < 1:
        raise ValueError("need at least one particle")
    rng = _rng(seed, _INIT, stream)
    boxes = np.array([r.bbox for r in prior.room_nodes])
    areas = np.prod(boxes[:, 2:] - boxes[:, :2], axis=1)
    which = rng.choice(len(boxes), size=n, p=areas / areas.sum())
    u = rng.random((n, 2))
    xy = boxes[which, :2] + u * (boxes[which, 2:] - boxes[which, :2])
    yaw = wrap_angle(rng.uniform(-np.pi, np.pi, size=n))
    t = np.column_stack([xy, np.full(n, prior.elevation)])
    return ParticleSet(
        t=t, q=quat_from_yaw(yaw), weights=np.full(n, 1.0 / n),
        rooms=_room_index(prior, xy), room_ids=tuple(r.id for r in prior.room_nodes),
        seed=int(seed),
    )


def predict(s: ParticleSet, delta: Pose3, noise: MotionNoise, prior: PriorGraph | None = None) -> ParticleSet:
    """Apply ``delta (+) perturbation`` on the right of every particle.

    The perturbation is Gaussian in (x, y, yaw) of the increment's frame; the
    generator is keyed by (seed, step) so the draw for particle ``i`` is row
    ``i`` of one block regardless of how the work is split.
    """
    n = len(s)
    eps = _rng(s.seed, _PREDICT, s.step_count).standard_normal((n, 3))
    eps *= np.array([noise.x, noise.y, noise.yaw])
    t_noise = np.column_stack([eps[:, 0], eps[:, 1], np.zeros(n)])
    # delta (+) noise
    t_step = delta.t + t_noise @ delta.R.T
    q_step = quat_multiply(delta.q, quat_from_yaw(eps[:, 2]))
    # particle (+) step
    R = quat_to_matrix(s.q)
    t_new = s.t + np.einsum("nij,nj->ni", R, t_step)
    q_new = quat_canonical(quat_multiply(s.q, q_step))
    rooms = _room_index(prior, t_new[:, :2]) if prior is not None else s.rooms
    return replace(s, t=t_new, q=q_new, rooms=rooms)


@dataclass
class AssociationResult:
    """Per particle/observation best landmark index (-1 = rejected) and its residual."""

    match: np.ndarray       # (N, M) int
    delta: np.ndarray       # (N, M, 3) minimal-plane difference of the match
    error: np.ndarray       # (N, M) gate error of the match
    comparisons: int        # landmark comparisons actually scored
    candidates: np.ndarray  # (N,) candidate-set size per particle


def _obs_arrays(obs) -> tuple[np.ndarray, np.ndarray]:
    if len(obs) == 0:
        return np.zeros((0, 3)), np.zeros(0)
    return np.array([p.n for p in obs]), np.array([p.d for p in obs])


def associate_batch(s: ParticleSet, obs, prior: PriorGraph, gate: MahalanobisGate,
                    topo: bool = True, frame: str = "local") -> AssociationResult:
    """Match every observation of every particle against its candidate landmarks.

    Observations are rotated into the world to decide their wall class. The
    gate error is evaluated in the sensor frame (``frame="local"``: landmarks
    brought into the particle frame) or in the world frame (``"world"``:
    observations moved into W).
    """
    lm = _landmarks(prior)
    N, M = len(s), len(obs)
    match = np.full((N, M), -1, dtype=int)
    delta = np.zeros((N, M, 3))
    error = np.full((N, M), np.inf)
    cand_sizes = np.zeros(N, dtype=int)
    if M == 0 or len(lm.ids) == 0:
        return AssociationResult(match, delta, error, 0, cand_sizes)

    on, od = _obs_arrays(obs)
    if frame == "local" and np.all(s.q[:, 1:3] == 0.0):
        return _associate_level(s, on, od, lm, gate, topo)
    R = quat_to_matrix(s.q)
    info = gate.info
    comparisons = 0
    all_idx = np.arange(len(lm.ids))

    groups = np.unique(s.rooms) if topo else np.array([-1])
    for g in groups:
        if topo:
            pidx = np.flatnonzero(s.rooms == g)
            # outside every room: nothing to match, the particle keeps the floor weight
            cand = lm.room_members[g] if g >= 0 else all_idx[:0]
        else:
            pidx = np.arange(N)
            cand = all_idx
        if len(pidx) == 0 or len(cand) == 0:
            continue
        cand_sizes[pidx] = len(cand)
        Rg, tg = R[pidx], s.t[pidx]
        n_w = np.einsum("pij,mj->pmi", Rg, on)                      # (P, M, 3)
        obs_cls = classify_normals(n_w)                              # (P, M)
        lm_n, lm_d, lm_cls = lm.n[cand], lm.d[cand], lm.cls[cand]
        if frame == "local":
            obs_min = minimal_arrays(on, od)[None, :, None, :]       # (1, M, 1, 3)
            n_l = np.einsum("pji,kj->pki", Rg, lm_n)                # R^T n  (P, K, 3)
            d_l = lm_d[None, :] + tg @ lm_n.T                        # (P, K)
            lm_min = minimal_arrays(n_l, d_l)[:, None, :, :]         # (P, 1, K, 3)
        elif frame == "world":
            d_w = od[None, :] - np.einsum("pmi,pi->pm", n_w, tg)
            obs_min = minimal_arrays(n_w, d_w)[:, :, None, :]        # (P, M, 1, 3)
            lm_min = minimal_arrays(lm_n, lm_d)[None, None, :, :]    # (1, 1, K, 3)
        else:
            raise ValueError(f"unknown matching frame {frame!r}")
        dl = obs_min - lm_min
        dl[..., 0] = wrap_angle(dl[..., 0])
        err = np.sum((dl @ info) * dl, axis=-1)
        same = (obs_cls[:, :, None] == lm_cls[None, None, :]) & (obs_cls[:, :, None] != 2)
        comparisons += int(same.sum())
        err = np.where(same, err, np.inf)
        best = np.argmin(err, axis=2)                                # (P, M)
        best_err = np.take_along_axis(err, best[..., None], axis=2)[..., 0]
        ok = best_err < gate.threshold
        match[pidx] = np.where(ok, cand[best], -1)
        error[pidx] = best_err
        delta[pidx] = np.take_along_axis(dl, best[..., None, None], axis=2)[:, :, 0, :]
    return AssociationResult(match, delta, error, comparisons, cand_sizes)


def _associate_level(s: ParticleSet, on, od, lm: _Landmarks, gate: MahalanobisGate,
                     topo: bool) -> AssociationResult:
    """Local-frame matching for particles with zero roll and pitch.

    For a pure yaw rotation the landmark's azimuth in the particle frame is
    its world azimuth minus the yaw and the elevation is unchanged, so the
    per-pair work reduces to a few broadcasts.
    """
    N, M = len(s), len(od)
    match = np.full((N, M), -1, dtype=int)
    delta = np.zeros((N, M, 3))
    error = np.full((N, M), np.inf)
    cand_sizes = np.zeros(N, dtype=int)
    obs_min = minimal_arrays(on, od)                               # (M, 3)
    lm_min = minimal_arrays(lm.n, lm.d)                            # (K, 3)
    yaw = s.yaw
    # world class of each observation under each particle's yaw
    phi_w = obs_min[None, :, 0] + yaw[:, None]                     # (N, M)
    cos_t = np.cos(obs_min[:, 1])
    obs_cls = np.where(np.abs(cos_t[None, :] * np.cos(phi_w)) >= np.abs(cos_t[None, :] * np.sin(phi_w)), 0, 1)
    obs_cls = np.where(np.abs(on[:, 2])[None, :] >= VERTICAL_LIMIT, 2, obs_cls)
    info = gate.info
    diag = np.allclose(info, np.diag(np.diag(info)))
    comparisons = 0
    all_idx = np.arange(len(lm.ids))
    groups = np.unique(s.rooms) if topo else np.array([-1])
    for g in groups:
        if topo:
            pidx = np.flatnonzero(s.rooms == g)
            # outside every room: nothing to match, the particle keeps the floor weight
            cand = lm.room_members[g] if g >= 0 else all_idx[:0]
        else:
            pidx = np.arange(N)
            cand = all_idx
        if len(pidx) == 0 or len(cand) == 0:
            continue
        cand_sizes[pidx] = len(cand)
        t_p = s.t[pidx]
        phi_p = phi_w[pidx]                                          # (P, M)
        cls_p = obs_cls[pidx]
        best_err = np.full(phi_p.shape, np.inf)
        best_k = np.full(phi_p.shape, -1, dtype=int)
        best_delta = np.zeros(phi_p.shape + (3,))
        # running minimum over candidates; strict "<" keeps the first of equal errors
        for k in cand:
            same = cls_p == lm.cls[k]
            if lm.cls[k] == 2 or not same.any():
                continue
            comparisons += int(same.sum())
            dphi = phi_p - lm_min[k, 0]
            dphi -= TWO_PI * np.rint(dphi / TWO_PI)
            dtheta = np.broadcast_to(obs_min[:, 1] - lm_min[k, 1], phi_p.shape)
            dd = od[None, :] - (lm.d[k] + t_p @ lm.n[k])[:, None]
            if diag:
                err = info[0, 0] * np.square(dphi)
                err += info[1, 1] * np.square(dtheta)
                err += info[2, 2] * np.square(dd)
            else:
                dl = np.stack([dphi, dtheta, dd], axis=-1)
                err = np.sum((dl @ info) * dl, axis=-1)
            better = same & (err < best_err)
            best_err = np.where(better, err, best_err)
            best_k = np.where(better, k, best_k)
            best_delta[better] = np.stack([dphi[better], dtheta[better], dd[better]], axis=-1)
        ok = best_err < gate.threshold
        match[pidx] = np.where(ok, best_k, -1)
        error[pidx] = best_err
        delta[pidx] = best_delta
    return AssociationResult(match, delta, error, comparisons, cand_sizes)


def associate(p: Particle, obs, prior: PriorGraph, gate: MahalanobisGate,
              topo: bool = True, frame: str = "local") -> list[tuple[int, str]]:
    """Single-particle association: list of (observation index, wall-node id)."""
    rid = p.room_id
    room_ids = tuple(r.id for r in prior.room_nodes)
    s = ParticleSet(
        t=p.pose.t[None, :], q=p.pose.q[None, :], weights=np.ones(1),
        rooms=np.array([room_ids.index(rid) if rid in room_ids else -1]),
        room_ids=room_ids, seed=0,
    )
    res = associate_batch(s, obs, prior, gate, topo, frame)
    lm = _landmarks(prior)
    return [(m, lm.ids[k]) for m, k in enumerate(res.match[0]) if k >= 0]


def match_likelihood(res: AssociationResult, wp: WeightParams) -> np.ndarray:
    """Product over accepted matches of mu * exp(-|delta|^2 / (2 sigma^2)); floor when none."""
    matched = res.match >= 0
    sq = np.sum(res.delta**2, axis=2)
    log_f = np.where(matched, math.log(wp.mu) - sq / (2.0 * wp.sigma**2), 0.0)
    like = np.exp(log_f.sum(axis=1))
    return np.where(matched.any(axis=1), like, WEIGHT_FLOOR)


def is_lost(result: AssociationResult, lost_ratio: float) -> bool:
    """True when even the best particle explains too few of the observations.

    No particle matching anything always counts as lost; ``lost_ratio`` raises
    the bar to a fraction of the observation count. Frames without
    observations never do.
    """
    m = result.match.shape[1] if result.match.ndim == 2 else 0
    if m == 0 or result.match.shape[0] == 0:
        return False
    best = int((result.match >= 0).sum(axis=1).max())
    return best == 0 or best < lost_ratio * m


def update_weights(s: ParticleSet, obs, prior: PriorGraph, wp: WeightParams, topo: bool = True,
                   frame: str = "local", result: AssociationResult | None = None,
                   lost_ratio: float = 0.0) -> ParticleSet:
    """Multiply weights by the match likelihood and normalise.

    If the total weight vanishes, or the set is lost in the sense of
    ``is_lost``, the returned set keeps its old weights and has
    ``degenerate=True`` so the caller can reinitialise.
    """
    if result is None:
        result = associate_batch(s, obs, prior, wp.gate, topo, frame)
    w = s.weights * match_likelihood(result, wp)
    total = float(w.sum())
    if is_lost(result, lost_ratio) or not (np.isfinite(total) and total > 0.0):
        return replace(s, step_count=s.step_count + 1, degenerate=True)
    return replace(s, weights=w / total, step_count=s.step_count + 1, degenerate=False)


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w * w))


def resample(s: ParticleSet, force: bool = False) -> ParticleSet:
    """Systematic resampling, only when N_eff < N/2 unless ``force``."""
    n = len(s)
    if not force and effective_sample_size(s.weights) >= n / 2.0:
        return s
    u0 = _rng(s.seed, _RESAMPLE, s.step_count).random()
    positions = (u0 + np.arange(n)) / n
    cdf = np.cumsum(s.weights)
    cdf[-1] = 1.0
    idx = np.minimum(np.searchsorted(cdf, positions, side="right"), n - 1)
    return replace(s, t=s.t[idx].copy(), q=s.q[idx].copy(), rooms=s.rooms[idx].copy(),
                   weights=np.full(n, 1.0 / n))


def mean_pose_xy_yaw(s: ParticleSet) -> tuple[np.ndarray, float]:
    """Unweighted mean position and circular-mean yaw."""
    yaw = s.yaw
    return s.t.mean(axis=0), math.atan2(np.sin(yaw).mean(), np.cos(yaw).mean())


def check_convergence(s: ParticleSet, c: ConvergenceCriteria) -> Pose3 | None:
    if s.step_count - s.init_step < c.min_steps:
        return None
    b = int(np.argmax(s.weights))
    mean_t, mean_yaw = mean_pose_xy_yaw(s)
    if (np.linalg.norm(s.t[b] - mean_t) < c.pos_tol
            and abs(wrap_angle(s.yaw[b] - mean_yaw)) < c.yaw_tol):
        return s.pose(b)
    return None


def initial_transform(best: Pose3, odom: Pose3) -> Pose3:
    """Odometry-to-world transform: ``best (+) odom^-1``."""
    return pose_compose(best, pose_inverse(odom))


# --------------------------------------------------------------------------
# filter loop
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MCLConfig:
    particles: int = 1000
    sigma: float = 0.1
    gate: MahalanobisGate = field(default_factory=MahalanobisGate)
    topo: bool = True
    motion: MotionNoise = field(default_factory=MotionNoise)
    convergence: ConvergenceCriteria = field(default_factory=ConvergenceCriteria)
    timeout: float = 120.0
    frame: str = "local"
    lost_ratio: float = 0.5

    @property
    def weight_params(self) -> WeightParams:
        return WeightParams(self.sigma, self.gate)


@dataclass
class MCLResult:
    converged: bool
    frame_index: int | None
    time: float | None
    best: Pose3 | None
    T_WO: Pose3 | None
    room_id: str | None
    particles: ParticleSet
    steps: int
    comparisons: int
    reinits: int = 0

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "frame_index": self.frame_index,
            "time": self.time,
            "best_pose": self.best.to_list() if self.best else None,
            "T_WO": self.T_WO.to_list() if self.T_WO else None,
            "room": self.room_id,
            "steps": self.steps,
            "comparisons": self.comparisons,
            "reinits": self.reinits,
        }


def run_mcl(prior: PriorGraph, frames, config: MCLConfig = MCLConfig(), seed: int = 0,
            callback=None) -> MCLResult:
    """Run the filter over observation frames until convergence or timeout.

    ``frames`` is a sequence of objects with ``t``, ``odom`` (Pose3 in O) and
    ``planes`` (list of Plane in the sensor frame). ``callback(k, particles)``
    is invoked after each update, before resampling.
    """
    wp = config.weight_params
    s = init_particles(prior, config.particles, seed)
    comparisons = 0
    reinits = 0
    t0 = frames[0].t if len(frames) else 0.0
    for k, fr in enumerate(frames):
        if fr.t - t0 > config.timeout:
            break
        if k > 0:
            s = predict(s, pose_between(frames[k - 1].odom, fr.odom), config.motion, prior)
        res = associate_batch(s, fr.planes, prior, wp.gate, config.topo, config.frame)
        comparisons += res.comparisons
        s = update_weights(s, fr.planes, prior, wp, config.topo, config.frame, result=res,
                           lost_ratio=config.lost_ratio)
        if s.degenerate:
            reinits += 1
            s = replace(init_particles(prior, config.particles, seed, stream=s.step_count),
                        step_count=s.step_count, init_step=s.step_count)
            continue
        if callback is not None:
            callback(k, s)
        best = check_convergence(s, config.convergence)
        if best is not None:
            room = prior.room_at(best.t)
            return MCLResult(True, k, fr.t - t0, best, initial_transform(best, fr.odom), room,
                             s, s.step_count, comparisons, reinits)
        s = resample(s)
    return MCLResult(False, None, None, None, None, None, s, s.step_count, comparisons, reinits)
