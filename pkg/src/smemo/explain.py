"""Per-agent memory segmentation and inter-agent attention extraction.

In explain mode the memory rows are partitioned into equal segments, one per
agent; each agent writes only to its own segment and reads only from the
others.  The read mass an agent puts on another agent's segment is that
agent's attention on the other, normalized per step with a softmax over the
remaining agents.  Self-attention is zero by construction because the read
mask excludes the agent's own segment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SegmentLayout:
    """Disjoint per-agent slot ranges; leftover slots are masked for all."""

    mem_slots: int
    n_agents: int
    ranges: tuple[tuple[int, int], ...]

    @classmethod
    def build(cls, mem_slots: int, n_agents: int) -> "SegmentLayout":
        if n_agents < 2:
            raise ValueError("segmented memory needs at least two agents "
                             "(nothing to read with a single agent)")
        size = mem_slots // n_agents
        if size < 1:
            raise ValueError(f"{n_agents} agents cannot share {mem_slots} memory slots")
        ranges = tuple((i * size, (i + 1) * size) for i in range(n_agents))
        return cls(mem_slots=mem_slots, n_agents=n_agents, ranges=ranges)

    @property
    def segment_size(self) -> int:
        return self.ranges[0][1] - self.ranges[0][0]

    @property
    def write_masks(self) -> np.ndarray:
        """(N, slots) boolean; agent i may write only inside its segment."""
        masks = np.zeros((self.n_agents, self.mem_slots), dtype=bool)
        for i, (lo, hi) in enumerate(self.ranges):
            masks[i, lo:hi] = True
        return masks

    @property
    def read_masks(self) -> np.ndarray:
        """(N, slots) boolean; agent i may read every segment but its own.

        Slots beyond the last segment stay masked for everyone.
        """
        used = np.zeros(self.mem_slots, dtype=bool)
        used[: self.n_agents * self.segment_size] = True
        masks = np.tile(used, (self.n_agents, 1))
        for i, (lo, hi) in enumerate(self.ranges):
            masks[i, lo:hi] = False
        return masks


def normalize_attention(raw: np.ndarray) -> np.ndarray:
    """Softmax the off-diagonal attention rows so each sums to one.

    ``raw`` is (..., N, N) segment mass with a zero diagonal; the diagonal
    stays exactly zero in the result.
    """
    raw = np.asarray(raw, dtype=np.float64)
    n = raw.shape[-1]
    if n < 2:
        raise ValueError("attention needs at least two agents")
    eye = np.eye(n, dtype=bool)
    z = np.where(eye, -np.inf, raw)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class AttentionTrace:
    """Normalized inter-agent attention per recorded step.

    ``steps[s]`` is the model step index (the step that produced the
    displacement into position ``steps[s] + 1``); ``att[s]`` is (N, N) with
    rows summing to one and a zero diagonal.
    """

    steps: list[int]
    att: np.ndarray  # (T_rec, N, N)

    @property
    def n_agents(self) -> int:
        return self.att.shape[-1]

    def at_step(self, step: int) -> np.ndarray:
        return self.att[self.steps.index(step)]

    def rows(self):
        """Yield (step, i, j, value) for every ordered agent pair."""
        n = self.n_agents
        for s, step in enumerate(self.steps):
            for i in range(n):
                for j in range(n):
                    if i != j:
                        yield step, i, j, float(self.att[s, i, j])


def explain_episode(model, episode) -> tuple[np.ndarray, AttentionTrace]:
    """Forecast one episode while recording who attends to whom.

    The model must have been trained with segmented memory (explain mode).
    Returns predicted positions (N, K, T_f, 2) and the attention trace over
    the prediction steps.
    """
    if not model.config.explain_mode:
        raise ValueError("explainability requires an explain-mode checkpoint")
    if episode.n_agents < 2:
        raise ValueError("cannot explain a single-agent episode: "
                         "there is no other segment to read")
    positions, raw = model.predict([episode], record_trace=True)
    att = normalize_attention(np.stack([r[0] for r in raw]))
    first_step = episode.n_past - 1
    steps = list(range(first_step, first_step + len(raw)))
    return positions[0], AttentionTrace(steps=steps, att=att)


def write_trace(path, trace: AttentionTrace) -> None:
    """Tabular export: one row per (step, reader, read agent, attention)."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("t,i,j,att\n")
        for t, i, j, value in trace.rows():
            fh.write(f"{t},{i},{j},{value:.9g}\n")


def plot_trace(out_dir, trace: AttentionTrace, episode_id: int = 0) -> list:
    """One attention-versus-time panel per agent; returns written paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from pathlib import Path
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = trace.n_agents
    uniform = 1.0 / (n - 1)
    written = []
    for i in range(n):
        fig, ax = plt.subplots(figsize=(6, 3))
        for j in range(n):
            if j == i:
                continue
            ax.plot(trace.steps, trace.att[:, i, j], label=f"on agent {j}")
        ax.axhline(uniform, color="gray", lw=0.8, ls="--")
        ax.set_xlabel("timestep")
        ax.set_ylabel(f"attention of agent {i}")
        ax.set_ylim(0.0, 1.0)
        ax.legend(loc="upper right", fontsize=8)
        fig.tight_layout()
        path = out_dir / f"attention_ep{episode_id}_agent{i}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def drop_agent(episode, agent: int):
    """Counterfactual copy of an episode with one agent removed."""
    from .ssa import Episode

    if not 0 <= agent < episode.n_agents:
        raise ValueError(f"agent {agent} not in episode with {episode.n_agents} agents")
    keep = [i for i in range(episode.n_agents) if i != agent]
    return Episode(
        positions=episode.positions[keep].copy(),
        n_past=episode.n_past,
        speeds=None if episode.speeds is None else episode.speeds[keep].copy(),
        start_angles=(None if episode.start_angles is None
                      else episode.start_angles[keep].copy()),
        episode_id=episode.episode_id,
        blockers=None,
    )
