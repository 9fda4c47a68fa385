from __future__ import annotations

import json

import numpy as np
import pytest

from planloc.bench import resolve_plan
from planloc.geometry import Plane
from planloc.plan import (
    PlanReferenceError, PlanSyntaxError, PlanValidationError, PriorGraph, RoomSpec, build_prior_layers,
    duplicate_wall, parse_plan, room_contains, select_storey, wall_plane,
)

MINIMAL = """\
# one 5 x 4 room
storey g 0.0
wall w1 g  0 4.2 0  -1 0 0  0.2 4.4 2.5
wall w2 g -0.2 0 0   0 -1 0 0.2 5.4 2.5
wall w3 g  5 -0.2 0  1 0 0  0.2 4.4 2.5
wall w4 g  5.2 4 0   0 1 0  0.2 5.4 2.5
room r1 g 2.5 2  0 0 5 4  w1 w2 w3 w4
"""


def _storey():
    return parse_plan(MINIMAL).storeys[0]


class TestParse:
    def test_minimal_document(self):
        plan = parse_plan(MINIMAL)
        assert len(plan.storeys) == 1
        s = plan.storeys[0]
        assert [w.id for w in s.walls] == ["w1", "w2", "w3", "w4"]
        assert [r.id for r in s.rooms] == ["r1"]
        np.testing.assert_allclose(s.wall("w3").start, [5, -0.2, 0])
        assert s.rooms[0].wall_ids == ("w1", "w2", "w3", "w4")

    def test_dangling_wall_reference_names_the_wall(self):
        text = MINIMAL.replace("w1 w2 w3 w4", "w1 w2 w3 w9")
        with pytest.raises(PlanReferenceError, match="w9") as info:
            parse_plan(text)
        assert info.value.ref == "w9"

    def test_non_unit_normal_is_rejected(self):
        text = MINIMAL.replace("5 -0.2 0  1 0 0", "5 -0.2 0  2 0 0")
        with pytest.raises(PlanValidationError, match="unit"):
            parse_plan(text)

    def test_near_unit_normal_is_renormalised(self):
        text = MINIMAL.replace("5 -0.2 0  1 0 0", "5 -0.2 0  1.005 0 0")
        n = parse_plan(text).storeys[0].wall("w3").normal
        np.testing.assert_allclose(n, [1, 0, 0], atol=1e-15)

    def test_syntax_error_reports_line_and_column(self):
        text = MINIMAL.replace("wall w3 g  5 -0.2", "wall w3 g  five -0.2")
        with pytest.raises(PlanSyntaxError) as info:
            parse_plan(text)
        assert info.value.line == 5
        assert info.value.column == 12

    def test_wrong_field_count(self):
        with pytest.raises(PlanSyntaxError, match="storey record takes 2 fields"):
            parse_plan("storey g\n")

    def test_unknown_record(self):
        with pytest.raises(PlanSyntaxError, match="door"):
            parse_plan("door d1 g 0 0\n")

    def test_vertical_normal_is_not_a_wall(self):
        text = MINIMAL.replace("5 -0.2 0  1 0 0", "5 -0.2 0  0 0 1")
        with pytest.raises(PlanValidationError):
            parse_plan(text)

    def test_room_needs_anchor_inside_bbox(self):
        with pytest.raises(PlanValidationError, match="anchor"):
            parse_plan(MINIMAL.replace("room r1 g 2.5 2", "room r1 g 7.5 2"))

    def test_duplicate_ids(self):
        with pytest.raises(PlanSyntaxError, match="duplicate"):
            parse_plan(MINIMAL + "storey g 3.0\n")

    def test_storeys_sorted_by_elevation(self):
        plan = parse_plan("storey up 3.0\nstorey g 0.0\n")
        assert [s.id for s in plan.storeys] == ["g", "up"]

    def test_equal_elevations_rejected(self):
        with pytest.raises(PlanValidationError):
            parse_plan("storey a 0.0\nstorey b 0.0\n")

    def test_comments_and_blank_lines(self):
        plan = parse_plan("\n  # nothing\nstorey g 1.5 # ground\n\n")
        assert plan.storeys[0].elevation == 1.5


class TestWallPlane:
    @pytest.mark.parametrize("start,n,d", [
        ((2, 0, 0), (1, 0, 0), -2.0),
        ((1, 3, 0), (0, 1, 0), -3.0),
        ((0, 0, 0), (0.6, -0.8, 0), 0.0),
    ])
    def test_examples(self, start, n, d):
        s = _storey()
        w = type(s.walls[0])("x", "g", start, n, 0.1, 1.0, 1.0)
        p = wall_plane(w)
        np.testing.assert_array_equal(p.n, n)
        assert p.d == pytest.approx(d, abs=1e-12)
        assert abs(p.signed_distance(w.start)) <= 1e-9


class TestDuplicateWall:
    def test_back_face_sits_thickness_behind_front_face(self):
        front = Plane([1, 0, 0], -2)
        back = duplicate_wall(front, 0.2)
        np.testing.assert_array_equal(back.n, [-1, 0, 0])
        # the back face passes through start + T * n, i.e. x = 2.2
        assert back.signed_distance([2.2, 0.0, 0.0]) == pytest.approx(0.0, abs=1e-12)
        assert back.d == pytest.approx(2.2)
        # a point inside the wall body is behind both faces
        assert front.signed_distance([2.1, 0, 0]) > 0 and back.signed_distance([2.1, 0, 0]) > 0

    def test_literal_formula(self):
        # (-n, d + T) reproduces the offset arithmetic of the textbook formula
        # but describes the plane x = -1.8, which is not part of the wall
        front = Plane([1, 0, 0], -2)
        lit = duplicate_wall(front, 0.2, literal=True)
        np.testing.assert_array_equal(lit.n, [-1, 0, 0])
        assert lit.d == pytest.approx(-1.8)
        assert lit.d - front.d == pytest.approx(0.2)
        assert lit.signed_distance([2.2, 0, 0]) != pytest.approx(0.0)

    def test_zero_thickness(self):
        front = Plane([0, 1, 0], -3)
        back = duplicate_wall(front, 0.0)
        assert back.allclose(front.flipped())
        assert duplicate_wall(front, 0.0, literal=True).allclose(Plane([0, -1, 0], -3))

    def test_twice_restores_normal_only(self):
        front = Plane([0.6, 0.8, 0], -1.0)
        lit = duplicate_wall(duplicate_wall(front, 0.3, literal=True), 0.3, literal=True)
        np.testing.assert_allclose(lit.n, front.n)
        # the back face of the back face is the front face again
        again = duplicate_wall(duplicate_wall(front, 0.3), 0.3)
        assert again.allclose(front)

    def test_original_untouched(self):
        front = Plane([1, 0, 0], -2)
        duplicate_wall(front, 0.2)
        assert front.d == -2 and front.n[0] == 1

    def test_negative_thickness(self):
        with pytest.raises(ValueError):
            duplicate_wall(Plane([1, 0, 0], -2), -0.1)


class TestSelectStorey:
    plan = parse_plan("storey g 0.0\nstorey one 3.0\n")

    @pytest.mark.parametrize("z,expected", [(1.2, "g"), (3.0, "one"), (-0.5, "g"), (9.0, "one")])
    def test_examples(self, z, expected):
        assert select_storey(self.plan, z).id == expected


class TestRoomContains:
    room = RoomSpec("r", "g", (1, 1), (0, 0), (5, 4), ("a", "b", "c", "d"))

    @pytest.mark.parametrize("p,inside", [((2, 1), True), ((6, 1), False), ((5, 4), True), ((0, 0), True),
                                          ((2.5, -1e-9), False)])
    def test_examples(self, p, inside):
        assert room_contains(self.room, p) is inside


class TestPriorLayers:
    def test_single_room_counts(self):
        prior = build_prior_layers(_storey())
        assert len(prior.wall_nodes) == 8
        assert len(prior.room_nodes) == 1
        assert len(prior.room_wall_edges["r1"]) == 8
        np.testing.assert_allclose(prior.room_nodes[0].center, [2.5, 2.0])

    def test_no_rooms(self):
        text = "\n".join(line for line in MINIMAL.splitlines() if not line.startswith("room"))
        prior = build_prior_layers(parse_plan(text).storeys[0])
        assert prior.room_nodes == () and prior.room_wall_edges == {}
        assert len(prior.wall_nodes) == 8

    def test_shared_wall_in_both_edge_sets(self):
        text = MINIMAL + (
            "wall w5 g 10.2 4 0  1 0 0  0.2 4.4 2.5\n"
            "wall w6 g 5.2 -0.2 0  0 -1 0 0.2 5 2.5\n"
            "wall w7 g 10.2 4 0  0 1 0  0.2 5 2.5\n"
            "room r2 g 7 2  5.2 0 10.2 4  w3 w5 w6 w7\n"
        )
        prior = build_prior_layers(parse_plan(text).storeys[0])
        assert "w3:front" in prior.room_wall_edges["r1"]
        assert "w3:front" in prior.room_wall_edges["r2"]
        assert "w3:back" in prior.room_wall_edges["r2"]

    def test_every_wall_gives_front_and_back(self):
        s = resolve_plan("three_rooms.plan").storeys[0]
        prior = build_prior_layers(s)
        assert len(prior.wall_nodes) == 2 * len(s.walls)
        for w in s.walls:
            front, back = prior.node(f"{w.id}:front").plane, prior.node(f"{w.id}:back").plane
            np.testing.assert_allclose(back.n, -front.n)
            assert back.d + front.d == pytest.approx(w.thickness)

    def test_serialisation_is_deterministic(self):
        a = build_prior_layers(_storey()).to_json()
        b = build_prior_layers(parse_plan(MINIMAL).storeys[0]).to_json()
        assert a == b
        assert list(PriorGraph.from_dict(json.loads(a)).to_dict()) == [
            "storey", "elevation", "wall_nodes", "room_nodes", "edges"]
        assert PriorGraph.from_dict(json.loads(a)).to_json() == a
