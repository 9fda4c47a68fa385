"""Why room membership matters: two rooms with identical geometry.

Rooms A and B are the same size and shape. Walls alone cannot tell them
apart until the robot walks into room C, which differs. Each particle only
matches observations against the faces of the room it stands in, which
also prunes particles that drift through walls.

Run with ``python3 demos/03_twin_rooms.py [n_seeds]``; each seed takes a few
seconds per variant.
"""
# %%
from __future__ import annotations

import sys
from dataclasses import replace

from planloc.bench import BenchConfig, bundled_config, run_benchmark

n = int(sys.argv[1]) if len(sys.argv) > 1 else 6
cfg = BenchConfig.from_dict(bundled_config("twin_rooms.json"))
seeds = list(range(100, 100 + n))

# %%
rows = {}
for topo in (True, False):
    c = replace(cfg, mcl=replace(cfg.mcl, topo=topo))
    rep = run_benchmark(c, seeds=seeds, traces=False)
    rows[topo] = rep
    s = rep.summary
    print(f"{'with' if topo else 'without'} room factor: {s['correct_room']}/{s['runs']} in the right place, "
          f"{s['not_localized']} not localised, {sum(r.comparisons for r in rep.runs) / len(seeds):.3g} "
          f"landmark comparisons per run")

# %% Seed by seed, with the room at convergence. A wrong-place run settles on a look-alike pose metres away.
for a, b in zip(rows[True].runs, rows[False].runs):
    fmt = lambda r: "N.L." if not r.converged else f"{r.converged_room} ({r.position_error:.2f} m)"  # noqa: E731
    print(f"seed {a.seed}: with {fmt(a):>14}   without {fmt(b):>14}")
