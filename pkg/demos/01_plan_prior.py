"""From a plan file to the two prior layers the localiser works against.

Run with ``python3 demos/01_plan_prior.py``. Prints and returns quickly.
"""
# %%
from __future__ import annotations

from importlib import resources

import numpy as np

from planloc.plan import build_prior_layers, duplicate_wall, parse_plan, wall_plane

text = (resources.files("planloc") / "data" / "three_rooms.plan").read_text()
plan = parse_plan(text)
storey = plan.storeys[0]
print(f"storey {storey.id}: {len(storey.walls)} walls, {len(storey.rooms)} rooms")

# %% A wall in the plan is one plane: its centreline face, normal pointing into the wall body.
w = storey.walls[0]
front = wall_plane(w)
print(w.id, "normal", front.n, "offset", round(front.d + 0.0, 3))

# The back face sits one thickness further along the normal and faces the other way.
back = duplicate_wall(front, w.thickness)
print("back face normal", back.n + 0.0, "offset", round(back.d + 0.0, 3))
assert np.isclose(front.d + back.d, w.thickness)
assert duplicate_wall(back, w.thickness).allclose(front)  # duplicating twice gives the front face back

# %% Prior layers: wall faces (metric-semantic) and rooms linked to the faces bounding them (topological).
prior = build_prior_layers(storey)
print(len(prior.wall_nodes), "wall-face nodes")
for room in prior.room_nodes:
    faces = prior.room_wall_edges[room.id]
    print(f"room {room.id}: centre {np.round(room.center[:2], 2)}, {len(faces)} faces:", ", ".join(faces))

# %% Which room contains a point? Room boxes reach into the bounding walls; None means outside every room.
for xy in ([2.0, 3.0], [7.0, 3.0], [4.55, 2.0], [16.0, 3.0]):
    print(xy, "->", prior.room_at(np.array([*xy, 0.0])))
