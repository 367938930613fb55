"""Line-delimited episode files.

One JSON object per line with fields ``episode_id``, ``n_agents``,
``present_index``, ``speeds`` and ``positions`` (N x T x 2, row per agent).
Reals are written as decimals with 9 significant digits, which makes
re-serialization of a parsed file byte-identical.  The same format serves
externally converted datasets; only ``positions`` and ``present_index`` are
required for evaluation, ``speeds`` may be null.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .ssa import Episode


def _fmt(x: float) -> str:
    return format(float(x), ".9g")


def _fmt_point(p) -> str:
    return f"[{_fmt(p[0])},{_fmt(p[1])}]"


def episode_to_line(ep: Episode) -> str:
    positions = ",".join(
        "[" + ",".join(_fmt_point(p) for p in agent) + "]" for agent in ep.positions)
    speeds = ("[" + ",".join(_fmt(s) for s in ep.speeds) + "]"
              if ep.speeds is not None else "null")
    return (f'{{"episode_id":{int(ep.episode_id)},"n_agents":{ep.n_agents},'
            f'"present_index":{int(ep.n_past)},"speeds":{speeds},'
            f'"positions":[{positions}]}}')


def episode_from_line(line: str) -> Episode:
    rec = json.loads(line)
    positions = np.asarray(rec["positions"], dtype=np.float64)
    if positions.ndim != 3 or positions.shape[2] != 2:
        raise ValueError(f"positions must be N x T x 2, got {positions.shape}")
    if positions.shape[0] != rec["n_agents"]:
        raise ValueError("n_agents does not match the positions array")
    speeds = rec.get("speeds")
    return Episode(
        positions=positions,
        n_past=int(rec["present_index"]),
        speeds=None if speeds is None else np.asarray(speeds, dtype=np.float64),
        episode_id=int(rec["episode_id"]),
    )


def save_episodes(path, episodes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="ascii") as fh:
        for ep in episodes:
            fh.write(episode_to_line(ep))
            fh.write("\n")


def load_episodes(path) -> list[Episode]:
    episodes = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                episodes.append(episode_from_line(line))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno + 1}: bad episode record: {exc}") from exc
    return episodes


def write_manifest(path, params, seed: int, n_train: int, n_test: int) -> None:
    doc = {
        "seed": seed,
        "n_train": n_train,
        "n_test": n_test,
        "params": {k: getattr(params, k) for k in (
            "circle_radius", "interaction_radius", "n_agents_min", "n_agents_max",
            "speed_min", "speed_max", "n_past", "n_future", "n_slots")},
    }
    with open(path, "w", encoding="ascii") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
