"""Synthetic social-agents episode generator.

Agents start on a fixed-radius circle and walk a straight chord through the
center at a constant per-step speed.  A single interaction rule governs the
scene: when two agents' extrapolated motion would bring them within the
interaction radius during the upcoming step, the slower one halts and stays
halted, re-evaluated every step, until the faster one has moved clear.

The pending-collision test extrapolates both agents at nominal speed along
their fixed headings (halted agents are extrapolated as if resuming) and
takes the continuous minimum distance over the next step.  A one-step
lookahead keeps the rule local in time: any longer horizon would flag
conflicts while agents are still far apart, which would make it impossible
to sample speeds that keep the observed window interaction-free while still
producing interactions later.

Per step, agents are resolved in priority order (faster first; equal speeds
break toward the smaller index).  An agent halts only for a higher-priority
agent that is itself moving this step, so an already-halted blocker releases
the agents queued behind it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi


class GenerationError(RuntimeError):
    """Raised when episode resampling cannot satisfy the constraints."""


@dataclass
class SsaParams:
    """World geometry, kinematics, and sampling ranges for episode generation."""

    circle_radius: float = 1.0
    interaction_radius: float = 0.2
    n_agents_min: int = 3
    n_agents_max: int = 10
    speed_min: float = 0.02
    speed_max: float = 0.05
    n_past: int = 20
    n_future: int = 40
    n_slots: int = 24
    min_slot_gap: int = 2
    seed: int = 0
    max_attempts: int = 2000

    def __post_init__(self):
        if not (3 <= self.n_agents_min <= self.n_agents_max <= 10):
            raise ValueError(f"agent count range [{self.n_agents_min}, {self.n_agents_max}] "
                             "must lie within [3, 10]")
        if self.n_past + self.n_future != 60:
            raise ValueError("episodes span 60 timesteps split into past and future")
        if not (0 < self.speed_min <= self.speed_max):
            raise ValueError("speed range must be positive and ordered")
        if self.circle_radius <= 0 or self.interaction_radius <= 0:
            raise ValueError("radii must be positive")
        if self.n_slots < self.n_agents_max:
            raise ValueError("need at least one start slot per agent")
        if self.min_slot_gap < 1:
            raise ValueError("min_slot_gap must be at least 1 (distinct slots)")
        if self.n_slots < self.n_agents_max * self.min_slot_gap:
            raise ValueError("slot circle cannot hold the maximum agent count "
                             f"at gap {self.min_slot_gap}")

    @property
    def n_steps(self) -> int:
        return self.n_past + self.n_future


@dataclass
class Episode:
    """One multi-agent sequence over a shared timeline.

    ``positions`` is (N, T, 2) in a fixed world frame; indices below
    ``n_past`` are observed, the rest are future.  ``blockers`` (when the
    episode came from the simulator) holds, per agent and step, the index of
    the agent it halted for, or -1 when it moved.
    """

    positions: np.ndarray
    n_past: int
    speeds: np.ndarray | None = None
    start_angles: np.ndarray | None = None
    episode_id: int = 0
    blockers: np.ndarray | None = None

    @property
    def n_agents(self) -> int:
        return self.positions.shape[0]

    @property
    def n_steps(self) -> int:
        return self.positions.shape[1]

    @property
    def n_future(self) -> int:
        return self.n_steps - self.n_past

    def headings(self) -> np.ndarray:
        """Unit travel directions, from the first observed displacement."""
        if self.start_angles is not None:
            return -np.stack([np.cos(self.start_angles), np.sin(self.start_angles)], axis=1)
        step = self.positions[:, 1] - self.positions[:, 0]
        norm = np.linalg.norm(step, axis=1, keepdims=True)
        if (norm == 0).any():
            raise ValueError("cannot derive headings: zero displacement on the first step")
        return step / norm

    def stop_steps(self) -> np.ndarray:
        """Boolean (N, T-1) matrix of halted transitions; requires blockers."""
        if self.blockers is None:
            raise ValueError("episode carries no simulation record")
        return self.blockers >= 0

    def past_positions(self) -> np.ndarray:
        return self.positions[:, : self.n_past]

    def future_positions(self) -> np.ndarray:
        return self.positions[:, self.n_past:]


def _min_step_dist_sq(px, py, ux, uy, v, qx, qy, wx, wy, u) -> float:
    """Squared minimum distance between two agents over the next unit step.

    Both agents are extrapolated at nominal speed along their headings; the
    minimum is over continuous fractions of one step.
    """
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
    return cx * cx + cy * cy


def collision_pending(pos_i, heading_i, speed_i, pos_j, heading_j, speed_j, r) -> bool:
    """True when the two agents' imminent paths come within distance ``r``."""
    d2 = _min_step_dist_sq(pos_i[0], pos_i[1], heading_i[0], heading_i[1], speed_i,
                           pos_j[0], pos_j[1], heading_j[0], heading_j[1], speed_j)
    return d2 < r * r


def _priority_order(speeds: np.ndarray) -> list[int]:
    # faster first; the larger index yields on an exact speed tie
    return sorted(range(len(speeds)), key=lambda i: (-speeds[i], i))


def _pending_matrix(pos: np.ndarray, headings: np.ndarray, speeds: np.ndarray,
                    r: float) -> np.ndarray:
    """Vectorized pairwise pending-collision predicate (diagonal is False)."""
    vel = speeds[:, None] * headings
    dpx = pos[:, None, 0] - pos[None, :, 0]
    dpy = pos[:, None, 1] - pos[None, :, 1]
    dvx = vel[:, None, 0] - vel[None, :, 0]
    dvy = vel[:, None, 1] - vel[None, :, 1]
    a = dvx * dvx + dvy * dvy
    b = dpx * dvx + dpy * dvy
    safe = np.where(a > 0.0, a, 1.0)
    s = np.where(a > 0.0, np.minimum(np.maximum(-b / safe, 0.0), 1.0), 0.0)
    cx = dpx + s * dvx
    cy = dpy + s * dvy
    d2 = cx * cx + cy * cy
    pending = d2 < r * r
    np.fill_diagonal(pending, False)
    return pending


def simulate(starts: np.ndarray, headings: np.ndarray, speeds: np.ndarray,
             n_steps: int, r: float) -> tuple[np.ndarray, np.ndarray]:
    """Roll the interaction rule forward from the given initial conditions.

    Returns positions (N, n_steps, 2) and the blocker record (N, n_steps-1)
    with -1 marking a normal move.
    """
    n = len(speeds)
    order = _priority_order(speeds)
    pos = starts.astype(np.float64).copy()
    positions = np.empty((n, n_steps, 2), dtype=np.float64)
    positions[:, 0] = pos
    blockers = np.full((n, n_steps - 1), -1, dtype=np.int16)

    for t in range(n_steps - 1):
        pending = _pending_matrix(pos, headings, speeds, r)
        moving = np.ones(n, dtype=bool)
        for rank, i in enumerate(order):
            for j in order[:rank]:
                if moving[j] and pending[i, j]:
                    moving[i] = False
                    blockers[i, t] = j
                    break
        pos[moving] += speeds[moving, None] * headings[moving]
        positions[:, t + 1] = pos
    return positions, blockers


def _draw_slots(params: SsaParams, rng: np.random.Generator, n: int) -> np.ndarray:
    """Distinct start slots with a minimum circular gap between any two.

    Sampled constructively: the circular gap sequence is a uniform
    composition (stars and bars), anchored at a uniform slot, so placement
    never needs rejection even at the maximum packing.
    """
    total = params.n_slots
    gap = params.min_slot_gap
    anchor = int(rng.integers(0, total))
    if n == 1:
        return np.array([anchor])
    extra = total - n * gap
    if extra < 0:
        raise GenerationError(f"cannot place {n} slots at gap {gap} "
                              f"on a {total}-slot circle")
    cuts = np.sort(rng.choice(extra + n - 1, size=n - 1, replace=False))
    parts = np.diff(np.concatenate([[-1], cuts, [extra + n - 1]])) - 1
    gaps = gap + parts
    slots = (anchor + np.concatenate([[0], np.cumsum(gaps[:-1])])) % total
    return rng.permutation(slots)


def generate_episode(params: SsaParams, rng: np.random.Generator,
                     n_agents: int | None = None, episode_id: int = 0) -> Episode:
    """Draw one episode, rejection-resampled until the observed window
    contains no halt.

    Each attempt redraws start slots, the global rotation and all speeds;
    the agent count is drawn once.  ``n_agents`` overrides the sampled agent
    count (diagnostic use; values outside the configured range are allowed
    here, unlike in the dataset surface).
    """
    n = int(n_agents) if n_agents is not None else int(
        rng.integers(params.n_agents_min, params.n_agents_max + 1))

    for _ in range(params.max_attempts):
        slots = _draw_slots(params, rng, n)
        rotation = rng.uniform(0.0, TWO_PI)
        angles = TWO_PI * slots / params.n_slots + rotation
        starts = params.circle_radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        headings = -np.stack([np.cos(angles), np.sin(angles)], axis=1)
        speeds = rng.uniform(params.speed_min, params.speed_max, size=n)
        positions, blockers = simulate(starts, headings, speeds,
                                       params.n_steps, params.interaction_radius)
        if (blockers[:, : params.n_past] >= 0).any():
            continue
        return Episode(positions=positions, n_past=params.n_past, speeds=speeds,
                       start_angles=angles, episode_id=episode_id, blockers=blockers)
    raise GenerationError(
        f"could not sample interaction-free past in {params.max_attempts} attempts "
        f"(n_agents={n}); the parameter combination is too crowded")


def episode_rng(seed: int, split: int, index: int) -> np.random.Generator:
    """Generator for one episode, independent of generation order."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(split, index)))


def generate_split(params: SsaParams, split: int, count: int) -> list[Episode]:
    return [generate_episode(params, episode_rng(params.seed, split, i), episode_id=i)
            for i in range(count)]


def generate_dataset(params: SsaParams, n_train: int = 9000,
                     n_test: int = 1000) -> tuple[list[Episode], list[Episode]]:
    """Fixed train and test splits, deterministic in ``params.seed``."""
    return generate_split(params, 0, n_train), generate_split(params, 1, n_test)
