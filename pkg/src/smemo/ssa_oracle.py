"""Deliberately naive re-simulation used to validate the episode generator.

Everything here is scalar Python over plain floats: every agent pair is
checked every step, the full pending matrix is materialized, and no early
exits or vectorization are used.  The generator must reproduce this output
bit for bit; the two implementations share only the rule definition, not
code.
"""

from __future__ import annotations

import numpy as np


def _pending_pair(px, py, ux, uy, v, qx, qy, wx, wy, u, r) -> bool:
    dpx = px - qx
    dpy = py - qy
    dvx = v * ux - u * wx
    dvy = v * uy - u * wy
    a = dvx * dvx + dvy * dvy
    b = dpx * dvx + dpy * dvy
    if a > 0.0:
        s = min(max(-b / a, 0.0), 1.0)
    else:
        s = 0.0
    cx = dpx + s * dvx
    cy = dpy + s * dvy
    return cx * cx + cy * cy < r * r


def resimulate(starts, headings, speeds, n_steps: int, r: float):
    """Replay the interaction rule; returns (positions, blockers) as arrays.

    Accepts the same initial conditions as the generator's simulation phase.
    """
    n = len(speeds)
    px = [float(starts[i][0]) for i in range(n)]
    py = [float(starts[i][1]) for i in range(n)]
    ux = [float(headings[i][0]) for i in range(n)]
    uy = [float(headings[i][1]) for i in range(n)]
    v = [float(speeds[i]) for i in range(n)]
    r = float(r)

    order = sorted(range(n), key=lambda i: (-v[i], i))

    positions = [[(px[i], py[i])] for i in range(n)]
    blockers = [[] for _ in range(n)]

    for _t in range(n_steps - 1):
        pending = [[False] * n for _ in range(n)]
        for i in range(n):
            for j in range(n):
                if i != j:
                    pending[i][j] = _pending_pair(px[i], py[i], ux[i], uy[i], v[i],
                                                  px[j], py[j], ux[j], uy[j], v[j], r)
        moving = [True] * n
        blocked_by = [-1] * n
        for rank in range(n):
            i = order[rank]
            for prev in range(rank):
                j = order[prev]
                if moving[j] and pending[i][j]:
                    moving[i] = False
                    blocked_by[i] = j
                    break
        for i in range(n):
            if moving[i]:
                px[i] = px[i] + v[i] * ux[i]
                py[i] = py[i] + v[i] * uy[i]
            positions[i].append((px[i], py[i]))
            blockers[i].append(blocked_by[i])

    return (np.array(positions, dtype=np.float64),
            np.array(blockers, dtype=np.int16))
