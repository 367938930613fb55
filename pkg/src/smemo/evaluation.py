"""Displacement-error metrics and the center-crossing rank correlation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits


def ade(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean Euclidean error over all future timesteps."""
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise ValueError(f"trajectory shapes differ: {pred.shape} vs {gt.shape}")
    if len(pred) == 0:
        raise ValueError("empty trajectory")
    return float(np.linalg.norm(pred - gt, axis=1).mean())


def fde(pred: np.ndarray, gt: np.ndarray) -> float:
    """Euclidean error at the final timestep only."""
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise ValueError(f"trajectory shapes differ: {pred.shape} vs {gt.shape}")
    if len(pred) == 0:
        raise ValueError("empty trajectory")
    return float(np.linalg.norm(pred[-1] - gt[-1]))


def best_of_k(preds: np.ndarray, gt: np.ndarray, coupled: bool = False) -> tuple[float, float]:
    """Minimum ADE and FDE over the prediction set.

    The two minima are taken independently by default; ``coupled=True``
    instead reports the FDE of the ADE-minimizing head.
    """
    preds = np.asarray(preds, float)
    if preds.ndim != 3:
        raise ValueError(f"prediction set must be (K, T, 2), got {preds.shape}")
    ades = [ade(p, gt) for p in preds]
    fdes = [fde(p, gt) for p in preds]
    if coupled:
        k = int(np.argmin(ades))
        return ades[k], fdes[k]
    return min(ades), min(fdes)


def crossing_times(positions: np.ndarray, headings: np.ndarray,
                   center=(0.0, 0.0)) -> np.ndarray:
    """Sub-step time at which each agent's chord parameter passes the center.

    The chord parameter is the projection of the position (relative to the
    center) onto the agent's heading; a sign change marks the crossing and
    is linearly interpolated.  Agents that never cross get ``nan``.
    """
    positions = np.asarray(positions, float)
    headings = np.asarray(headings, float)
    n, steps, _ = positions.shape
    rel = positions - np.asarray(center, float)
    proj = np.einsum("ntc,nc->nt", rel, headings)
    times = np.full(n, np.nan)
    for i in range(n):
        ge = proj[i] >= 0.0
        if not ge.any():
            continue
        t0 = int(np.argmax(ge))
        if t0 == 0:
            times[i] = 0.0
        else:
            a, b = proj[i, t0 - 1], proj[i, t0]
            times[i] = t0 - 1 + (0.0 - a) / (b - a) if b != a else float(t0)
    return times


def crossing_order(positions: np.ndarray, headings: np.ndarray,
                   center=(0.0, 0.0)) -> list[int]:
    """Agents ranked by center-crossing time.

    Agents that never cross rank after all crossing agents, ordered by their
    final distance to the center (closer first).
    """
    positions = np.asarray(positions, float)
    times = crossing_times(positions, headings, center)
    final_dist = np.linalg.norm(positions[:, -1] - np.asarray(center, float), axis=1)
    keys = [((0, times[i], i) if np.isfinite(times[i]) else (1, final_dist[i], i))
            for i in range(len(times))]
    return [key[2] for key in sorted(keys)]


def kendall_tau(order_a, order_b) -> float:
    """Rank correlation between two orderings of the same agents.

    tau = (concordant - discordant) / (n(n-1)/2) over all agent pairs; the
    orderings are assumed tie-free (crossing times are continuous).
    """
    order_a, order_b = list(order_a), list(order_b)
    if sorted(order_a) != sorted(order_b):
        raise ValueError("orderings must cover the same agent set")
    n = len(order_a)
    if n < 2:
        raise ValueError("rank correlation needs at least two agents")
    rank_a = {agent: r for r, agent in enumerate(order_a)}
    rank_b = {agent: r for r, agent in enumerate(order_b)}
    agents = order_a
    concordant = discordant = 0
    for x in range(n):
        for y in range(x + 1, n):
            da = rank_a[agents[x]] - rank_a[agents[y]]
            db = rank_b[agents[x]] - rank_b[agents[y]]
            if da * db > 0:
                concordant += 1
            else:
                discordant += 1
    return (concordant - discordant) / (n * (n - 1) / 2)


@dataclass
class EpisodeMetrics:
    episode_id: int
    n_agents: int
    ade: float
    fde: float
    kendall: float


@dataclass
class MetricReport:
    """Aggregated evaluation: mean best-of-K errors over agents and the mean
    per-episode crossing-order correlation."""

    ade: float
    fde: float
    kendall: float
    per_episode: list[EpisodeMetrics] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"ade": self.ade, "fde": self.fde, "kendall": self.kendall,
                "n_episodes": len(self.per_episode)}


def _group_indices(episodes) -> dict[tuple[int, int, int], list[int]]:
    groups: dict[tuple[int, int, int], list[int]] = {}
    for i, ep in enumerate(episodes):
        groups.setdefault((ep.n_agents, ep.n_past, ep.n_steps), []).append(i)
    return groups


def evaluate_model(model, episodes, coupled: bool = False,
                   chunk_rows: int = 512) -> MetricReport:
    """Forecast every episode and aggregate ADE/FDE/Kendall.

    Episodes are grouped by shape for batched prediction; the crossing order
    of a prediction uses, per agent, its ADE-best head stitched after the
    observed past.
    """
    if not episodes:
        raise ValueError("nothing to evaluate")
    with threadpool_limits(limits=1):
        return _evaluate(model, episodes, coupled, chunk_rows)


def _evaluate(model, episodes, coupled: bool, chunk_rows: int) -> MetricReport:
    per_episode: list[EpisodeMetrics] = []
    ade_sum = fde_sum = 0.0
    n_agents_total = 0

    groups = _group_indices(episodes)
    for key in sorted(groups):
        idx = groups[key]
        n_agents = key[0]
        chunk = max(1, chunk_rows // n_agents)
        for lo in range(0, len(idx), chunk):
            part = [episodes[i] for i in idx[lo:lo + chunk]]
            preds = model.predict(part)  # (B, N, K, T_f, 2)
            for b, ep in enumerate(part):
                gt_future = ep.future_positions()
                headings = ep.headings()
                best_traj = np.empty_like(gt_future)
                ep_ade = ep_fde = 0.0
                for i in range(ep.n_agents):
                    a, f = best_of_k(preds[b, i], gt_future[i], coupled=coupled)
                    ep_ade += a
                    ep_fde += f
                    ades = [ade(p, gt_future[i]) for p in preds[b, i]]
                    best_traj[i] = preds[b, i, int(np.argmin(ades))]
                    ade_sum += a
                    fde_sum += f
                n_agents_total += ep.n_agents
                pred_full = np.concatenate([ep.past_positions(), best_traj], axis=1)
                tau = kendall_tau(
                    crossing_order(pred_full, headings),
                    crossing_order(ep.positions, headings))
                per_episode.append(EpisodeMetrics(
                    episode_id=ep.episode_id, n_agents=ep.n_agents,
                    ade=ep_ade / ep.n_agents, fde=ep_fde / ep.n_agents, kendall=tau))

    return MetricReport(
        ade=ade_sum / n_agents_total,
        fde=fde_sum / n_agents_total,
        kendall=float(np.mean([m.kendall for m in per_episode])),
        per_episode=per_episode)