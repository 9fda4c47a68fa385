"""Building plans: parsing, wall planes and the prior wall/room graph layers.

Plan files are line oriented, ``#`` starts a comment, tokens are separated by
whitespace::

    storey <id> <elevation_m>
    wall   <id> <storey_id> <ax> <ay> <az> <nx> <ny> <nz> <thickness_m> <length_m> <height_m>
    room   <id> <storey_id> <anchor_x> <anchor_y> <min_x> <min_y> <max_x> <max_y> <wall_id> x4

A wall's ``start`` lies on its front face and ``normal`` points from that
face into the wall body. The wall runs ``length`` metres from ``start`` along
the normal rotated by +90 degrees about z, and ``height`` metres up.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Plane, VERTICAL_LIMIT

RENORMALIZE_BAND = (0.99, 1.01)


class PlanError(ValueError):
    """Base class for plan problems."""


class PlanSyntaxError(PlanError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class PlanReferenceError(PlanError):
    def __init__(self, message: str, ref: str, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")
        self.ref = ref
        self.line = line


class PlanValidationError(PlanError):
    pass


def _ro(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class WallSpec:
    id: str
    storey_id: str
    start: np.ndarray
    normal: np.ndarray
    thickness: float
    length: float
    height: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise PlanValidationError(f"wall {self.id}: normal is not unit length")
        if abs(n[2]) >= VERTICAL_LIMIT:
            raise PlanValidationError(f"wall {self.id}: normal {n.tolist()} is not horizontal enough for a wall")
        if self.thickness < 0:
            raise PlanValidationError(f"wall {self.id}: negative thickness")
        if self.length <= 0 or self.height <= 0:
            raise PlanValidationError(f"wall {self.id}: length and height must be positive")
        object.__setattr__(self, "start", _ro(self.start))
        object.__setattr__(self, "normal", _ro(n))

    @property
    def direction(self) -> np.ndarray:
        """Unit vector along the wall (horizontal)."""
        u = np.array([-self.normal[1], self.normal[0], 0.0])
        return u / np.linalg.norm(u)


@dataclass(frozen=True, eq=False)
class RoomSpec:
    id: str
    storey_id: str
    anchor: np.ndarray
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    wall_ids: tuple

    def __post_init__(self):
        lo, hi, a = (np.asarray(v, dtype=float) for v in (self.bbox_min, self.bbox_max, self.anchor))
        if not np.all(lo < hi):
            raise PlanValidationError(f"room {self.id}: bbox_min must be below bbox_max")
        if not (np.all(lo <= a) and np.all(a <= hi)):
            raise PlanValidationError(f"room {self.id}: anchor lies outside its bounding box")
        if len(self.wall_ids) != 4 or len(set(self.wall_ids)) != 4:
            raise PlanValidationError(f"room {self.id}: needs exactly 4 distinct walls")
        object.__setattr__(self, "anchor", _ro(a))
        object.__setattr__(self, "bbox_min", _ro(lo))
        object.__setattr__(self, "bbox_max", _ro(hi))
        object.__setattr__(self, "wall_ids", tuple(self.wall_ids))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.bbox_min + self.bbox_max)

    @property
    def area(self) -> float:
        return float(np.prod(self.bbox_max - self.bbox_min))


@dataclass(frozen=True)
class Storey:
    id: str
    elevation: float
    walls: tuple = ()
    rooms: tuple = ()

    def wall(self, wall_id: str) -> WallSpec:
        for w in self.walls:
            if w.id == wall_id:
                return w
        raise KeyError(wall_id)


@dataclass(frozen=True)
class BuildingPlan:
    storeys: tuple

    def storey(self, storey_id: str) -> Storey:
        for s in self.storeys:
            if s.id == storey_id:
                return s
        raise KeyError(storey_id)


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------

_ARITY = {"storey": 3, "wall": 12, "room": 13}


def _tokens(line: str):
    """Yield (token, 1-based column) pairs, stopping at a comment."""
    i = 0
    n = len(line)
    while i < n:
        if line[i] == "#":
            return
        if line[i].isspace():
            i += 1
            continue
        j = i
        while j < n and not line[j].isspace() and line[j] != "#":
            j += 1
        yield line[i:j], i + 1
        i = j


def _number(tok: str, col: int, lineno: int) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise PlanSyntaxError(f"expected a number, got {tok!r}", lineno, col) from None
    if not np.isfinite(v):
        raise PlanSyntaxError(f"number must be finite, got {tok!r}", lineno, col)
    return v


def parse_plan(text: str) -> BuildingPlan:
    """Parse plan text into a validated :class:`BuildingPlan`."""
    storeys: dict[str, tuple[float, int]] = {}
    walls: dict[str, tuple[WallSpec, int]] = {}
    rooms: list[tuple[tuple, int]] = []
    seen: dict[str, int] = {}

    for lineno, line in enumerate(text.splitlines(), start=1):
        toks = list(_tokens(line))
        if not toks:
            continue
        kind, kcol = toks[0]
        if kind not in _ARITY:
            raise PlanSyntaxError(f"unknown record type {kind!r}", lineno, kcol)
        if len(toks) != _ARITY[kind]:
            col = toks[_ARITY[kind]][1] if len(toks) > _ARITY[kind] else len(line.split("#")[0].rstrip()) + 1
            raise PlanSyntaxError(
                f"{kind} record takes {_ARITY[kind] - 1} fields, got {len(toks) - 1}", lineno, col)
        ident, icol = toks[1]
        key = f"{kind}:{ident}"
        if key in seen:
            raise PlanSyntaxError(f"duplicate {kind} id {ident!r} (first on line {seen[key]})", lineno, icol)
        seen[key] = lineno

        if kind == "storey":
            storeys[ident] = (_number(*toks[2], lineno), lineno)
        elif kind == "wall":
            vals = [_number(t, c, lineno) for t, c in toks[3:]]
            normal = np.array(vals[3:6])
            norm = float(np.linalg.norm(normal))
            if not (RENORMALIZE_BAND[0] <= norm <= RENORMALIZE_BAND[1]):
                raise PlanValidationError(
                    f"line {lineno}: wall {ident!r} normal has length {norm:.4g}; expected a unit vector")
            try:
                wall = WallSpec(ident, toks[2][0], vals[0:3], normal / norm, vals[6], vals[7], vals[8])
            except PlanValidationError as exc:
                raise PlanValidationError(f"line {lineno}: {exc}") from None
            walls[ident] = (wall, lineno)
        else:
            vals = [_number(t, c, lineno) for t, c in toks[3:9]]
            rooms.append(((ident, toks[2][0], vals, [t for t, _ in toks[9:13]]), lineno))

    for wall, lineno in walls.values():
        if wall.storey_id not in storeys:
            raise PlanReferenceError(f"wall {wall.id!r} references unknown storey {wall.storey_id!r}",
                                     wall.storey_id, lineno)

    room_specs = []
    for (ident, sid, vals, wall_ids), lineno in rooms:
        if sid not in storeys:
            raise PlanReferenceError(f"room {ident!r} references unknown storey {sid!r}", sid, lineno)
        for wid in wall_ids:
            if wid not in walls:
                raise PlanReferenceError(f"room {ident!r} references unknown wall {wid!r}", wid, lineno)
            if walls[wid][0].storey_id != sid:
                raise PlanReferenceError(
                    f"room {ident!r} references wall {wid!r} from storey {walls[wid][0].storey_id!r}", wid, lineno)
        try:
            room_specs.append(RoomSpec(ident, sid, vals[0:2], vals[2:4], vals[4:6], tuple(wall_ids)))
        except PlanValidationError as exc:
            raise PlanValidationError(f"line {lineno}: {exc}") from None

    ordered = sorted(storeys.items(), key=lambda kv: kv[1][0])
    for (a, (ea, _)), (b, (eb, lb)) in zip(ordered, ordered[1:]):
        if not eb > ea:
            raise PlanValidationError(f"line {lb}: storeys {a!r} and {b!r} share elevation {eb}")

    result = []
    for sid, (elev, _) in ordered:
        result.append(Storey(
            sid, elev,
            tuple(w for w, _ in walls.values() if w.storey_id == sid),
            tuple(r for r in room_specs if r.storey_id == sid),
        ))
    return BuildingPlan(tuple(result))


def load_plan(path) -> BuildingPlan:
    with open(path, encoding="utf-8") as fh:
        return parse_plan(fh.read())


# --------------------------------------------------------------------------
# geometry of walls
# --------------------------------------------------------------------------

def wall_plane(w: WallSpec) -> Plane:
    """Front-face plane through the wall's start point."""
    return Plane(w.normal, -float(w.start @ w.normal))


def duplicate_wall(p: Plane, thickness: float, literal: bool = False) -> Plane:
    """Back face of a wall whose front face is ``p``.

    The back face faces the other way and sits ``thickness`` metres deeper
    along ``p.n``. Written against the re-oriented front face ``(-n, -d)``,
    this is a plain increase of the offset by the thickness.

    ``literal=True`` returns ``(-n, d + thickness)`` instead: the textbook
    formula applied to the un-negated offset. Under ``n.p + d = 0`` that
    plane is the mirror of the wall through the origin, so the prior layers
    never use it; it is kept for comparison only.
    """
    if thickness < 0:
        raise ValueError("thickness must be non-negative")
    if literal:
        return Plane(-p.n, p.d + thickness)
    return Plane(-p.n, -p.d + thickness)


def select_storey(plan: BuildingPlan, z: float) -> Storey:
    if not plan.storeys:
        raise PlanError("plan has no storeys")
    chosen = plan.storeys[0]
    for s in plan.storeys:
        if s.elevation <= z:
            chosen = s
    return chosen


def room_contains(r: RoomSpec, p) -> bool:
    p = np.asarray(p, dtype=float)[:2]
    return bool(np.all(r.bbox_min <= p) and np.all(p <= r.bbox_max))


# --------------------------------------------------------------------------
# prior layers
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class WallNode:
    wall_id: str
    side: str
    plane: Plane

    @property
    def id(self) -> str:
        return f"{self.wall_id}:{self.side}"


@dataclass(frozen=True, eq=False)
class RoomNode:
    id: str
    center: np.ndarray
    bbox: np.ndarray  # min_x, min_y, max_x, max_y


@dataclass(frozen=True, eq=False)
class PriorGraph:
    """Metric-semantic (wall faces) and topological (rooms) prior layers."""

    wall_nodes: tuple
    room_nodes: tuple
    room_wall_edges: dict
    storey_id: str = ""
    elevation: float = 0.0
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index.update({w.id: i for i, w in enumerate(self.wall_nodes)})

    def node(self, node_id: str) -> WallNode:
        return self.wall_nodes[self._index[node_id]]

    def node_index(self, node_id: str) -> int:
        return self._index[node_id]

    def room(self, room_id: str) -> RoomNode:
        for r in self.room_nodes:
            if r.id == room_id:
                return r
        raise KeyError(room_id)

    def room_at(self, p) -> str | None:
        """Id of the first room whose box contains ``p`` (inclusive), else None."""
        p = np.asarray(p, dtype=float)[:2]
        for r in self.room_nodes:
            if np.all(r.bbox[:2] <= p) and np.all(p <= r.bbox[2:]):
                return r.id
        return None

    def to_dict(self) -> dict:
        return {
            "storey": self.storey_id,
            "elevation": float(self.elevation),
            "wall_nodes": [
                {"id": w.wall_id, "side": w.side, "n": [float(x) for x in w.plane.n], "d": float(w.plane.d)}
                for w in self.wall_nodes
            ],
            "room_nodes": [
                {"id": r.id, "center": [float(x) for x in r.center], "bbox": [float(x) for x in r.bbox]}
                for r in self.room_nodes
            ],
            "edges": [{"room": rid, "walls": list(ids)} for rid, ids in self.room_wall_edges.items()],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, data: dict) -> PriorGraph:
        walls = tuple(WallNode(w["id"], w["side"], Plane(w["n"], w["d"])) for w in data["wall_nodes"])
        rooms = tuple(RoomNode(r["id"], _ro(r["center"]), _ro(r["bbox"])) for r in data["room_nodes"])
        edges = {e["room"]: tuple(e["walls"]) for e in data["edges"]}
        return cls(walls, rooms, edges, str(data.get("storey", "")), float(data.get("elevation", 0.0)))


def build_prior_layers(s: Storey) -> PriorGraph:
    """Two wall nodes (front, back) per wall and one room node per room."""
    nodes = []
    for w in s.walls:
        front = wall_plane(w)
        nodes.append(WallNode(w.id, "front", front))
        nodes.append(WallNode(w.id, "back", duplicate_wall(front, w.thickness)))
    rooms = []
    edges = {}
    for r in s.rooms:
        bbox = np.concatenate([r.bbox_min, r.bbox_max])
        rooms.append(RoomNode(r.id, _ro(r.center), _ro(bbox)))
        edges[r.id] = tuple(f"{wid}:{side}" for wid in r.wall_ids for side in ("front", "back"))
    return PriorGraph(tuple(nodes), tuple(rooms), edges, s.id, s.elevation)
