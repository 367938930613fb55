"""The social working-memory forecaster.

Two streams process every agent: an egocentric stream encodes per-step
displacements with a recurrent encoder, and a social stream writes encoded
absolute positions into an external memory shared by all agents in the
episode.  Each timestep the memory is read first (producing per-head social
features) and written second; erase/add updates are max-pooled over agents
so the memory content does not depend on agent order.  A recurrent decoder
turns the concatenated egocentric and social features into displacement
predictions, one stream per read head.

For throughput, a group of same-size episodes is processed as one array:
agent-level tensors carry ``B * N`` rows (``N`` consecutive rows per
episode) and the memory is ``(B, slots, width)``.  The public step API wraps
the same code for a single episode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .explain import SegmentLayout
from .ssa import Episode

ABLATIONS = ("none", "memory_reset", "zero_read", "random_read", "state_pool")


@dataclass
class ModelConfig:
    """Dimensions and switches; defaults are the reference configuration."""

    embed_dim: int = 16
    enc_state_dim: int = 100
    controller_state_dim: int = 100
    mem_slots: int = 128
    mem_width: int = 20
    dec_state_dim: int = 120
    num_read_heads: int = 1
    explain_mode: bool = False
    eps: float = 1e-8

    def __post_init__(self):
        if self.dec_state_dim != self.enc_state_dim + self.mem_width:
            raise ValueError("decoder state must equal encoder state plus memory width "
                             f"({self.enc_state_dim} + {self.mem_width} != {self.dec_state_dim})")
        if min(self.embed_dim, self.enc_state_dim, self.controller_state_dim,
               self.mem_slots, self.mem_width, self.num_read_heads) < 1:
            raise ValueError("all dimensions must be positive")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "embed_dim", "enc_state_dim", "controller_state_dim", "mem_slots",
            "mem_width", "dec_state_dim", "num_read_heads", "explain_mode", "eps")}

    @classmethod
    def tiny(cls, num_read_heads: int = 2) -> "ModelConfig":
        """A desk-check configuration small enough for finite differences."""
        return cls(embed_dim=4, enc_state_dim=8, controller_state_dim=8,
                   mem_slots=4, mem_width=4, dec_state_dim=12,
                   num_read_heads=num_read_heads)


@dataclass
class MemoryState:
    """Social-stream state: shared memory plus per-agent controller state
    and the pooled social feature fed back autoregressively."""

    mem: dc.DiffNode     # (B, slots, width)
    gamma: dc.DiffNode   # (B*N, controller_state)
    rho: dc.DiffNode     # (B*N, width)


@dataclass
class RolloutState:
    memory: MemoryState
    tau: dc.DiffNode               # (B*N, enc_state)
    dec: list[dc.DiffNode]         # per head, (B*N, dec_state)
    n_agents: int
    batch: int


@dataclass
class StepOutput:
    sigmas: list[dc.DiffNode]        # per head, (B*N, width)
    read_alphas: list[dc.DiffNode]   # per head, (B*N, slots)
    write_alpha: dc.DiffNode | None  # (B*N, slots)
    displacements: list[dc.DiffNode]  # per head, (B*N, 2)


def gru_step(x: dc.DiffNode, h: dc.DiffNode, w_zr: dc.DiffNode, b_zr: dc.DiffNode,
             w_c: dc.DiffNode, b_c: dc.DiffNode) -> dc.DiffNode:
    """One gated recurrent unit update (update/reset gates, tanh candidate)."""
    width = h.value.shape[-1]
    zr = dc.sigmoid(dc.add_bias(dc.matmul(dc.concat([x, h]), w_zr), b_zr))
    z = dc.slice_cols(zr, 0, width)
    r = dc.slice_cols(zr, width, 2 * width)
    cand = dc.tanh(dc.add_bias(dc.matmul(dc.concat([x, dc.mul(r, h)]), w_c), b_c))
    return dc.add(h, dc.mul(z, dc.sub(cand, h)))


def mlp_encode(x: dc.DiffNode, w1, b1, w2, b2) -> dc.DiffNode:
    """Two dense layers with one rectifier in between."""
    return dc.add_bias(dc.matmul(dc.relu(dc.add_bias(dc.matmul(x, w1), b1)), w2), b2)


def init_params(config: ModelConfig, seed: int, dtype=np.float32,
                ablation: str = "none") -> dict[str, dc.DiffNode]:
    """Fresh parameter leaves: uniform +-1/sqrt(fan_in) weights, zero biases."""
    rng = np.random.default_rng(seed)
    params: dict[str, dc.DiffNode] = {}

    def dense(name: str, fan_in: int, fan_out: int) -> None:
        lim = 1.0 / np.sqrt(fan_in)
        params[name + ".w"] = dc.leaf(rng.uniform(-lim, lim, (fan_in, fan_out)).astype(dtype))
        params[name + ".b"] = dc.leaf(np.zeros(fan_out, dtype=dtype))

    def gru(name: str, in_dim: int, state_dim: int) -> None:
        lim = 1.0 / np.sqrt(in_dim + state_dim)
        for part, cols in (("w_zr", 2 * state_dim), ("w_c", state_dim)):
            params[f"{name}.{part}"] = dc.leaf(
                rng.uniform(-lim, lim, (in_dim + state_dim, cols)).astype(dtype))
        params[f"{name}.b_zr"] = dc.leaf(np.zeros(2 * state_dim, dtype=dtype))
        params[f"{name}.b_c"] = dc.leaf(np.zeros(state_dim, dtype=dtype))

    e, c, w = config.embed_dim, config.controller_state_dim, config.mem_width
    dense("e_delta.l1", 2, e)
    dense("e_delta.l2", e, e)
    dense("e_pi.l1", 2, e)
    dense("e_pi.l2", e, e)
    gru("enc", e, config.enc_state_dim)
    gru("ctrl", e + w, c)
    for k in range(config.num_read_heads):
        dense(f"read{k}", c, w + 1)
    dense("write", c, w + 1)
    dense("write_e", c, w)
    dense("write_a", c, w)
    gru("dec", config.dec_state_dim, config.dec_state_dim)
    dense("out", config.dec_state_dim, 2)
    if ablation == "state_pool":
        dense("state_pool", c, w)
    return params


class SmemoModel:
    """Forecaster plus its parameters and diagnostic variants."""

    kind = "smemo"

    def __init__(self, config: ModelConfig, params: dict[str, dc.DiffNode],
                 ablation: str = "none", noise_seed: int = 0):
        if ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {ablation!r}; pick one of {ABLATIONS}")
        self.config = config
        self.params = params
        self.ablation = ablation
        self.noise_seed = noise_seed

    @classmethod
    def build(cls, config: ModelConfig, seed: int = 0, dtype=np.float32,
              ablation: str = "none") -> "SmemoModel":
        return cls(config, init_params(config, seed, dtype, ablation), ablation,
                   noise_seed=seed)

    @property
    def dtype(self):
        return self.params["out.w"].value.dtype

    @property
    def k(self) -> int:
        return self.config.num_read_heads

    # -- building blocks ---------------------------------------------------

    def encode_displacement(self, x: dc.DiffNode) -> dc.DiffNode:
        p = self.params
        return mlp_encode(x, p["e_delta.l1.w"], p["e_delta.l1.b"],
                          p["e_delta.l2.w"], p["e_delta.l2.b"])

    def encode_position(self, x: dc.DiffNode) -> dc.DiffNode:
        p = self.params
        return mlp_encode(x, p["e_pi.l1.w"], p["e_pi.l1.b"],
                          p["e_pi.l2.w"], p["e_pi.l2.b"])

    def address(self, gamma: dc.DiffNode, head: str, mem: dc.DiffNode,
                mask: np.ndarray | None = None) -> dc.DiffNode:
        """Head emission to access weights: key/strength, cosine, softmax."""
        p = self.params
        w = self.config.mem_width
        emit = dc.add_bias(dc.matmul(gamma, p[head + ".w"]), p[head + ".b"])
        key = dc.slice_cols(emit, 0, w)
        beta = dc.softplus(dc.slice_cols(emit, w, w + 1))
        sim = dc.cosine_rows_grouped(key, mem, eps=self.config.eps)
        return dc.softmax_temp(sim, beta, mask=mask)

    def read_multihead(self, gamma: dc.DiffNode, mem: dc.DiffNode,
                       mask: np.ndarray | None = None):
        """All read heads against the current memory, plus the pooled
        feedback feature (elementwise max over heads)."""
        alphas = [self.address(gamma, f"read{k}", mem, mask) for k in range(self.k)]
        sigmas = [dc.read_rows_grouped(a, mem) for a in alphas]
        rho = sigmas[0] if self.k == 1 else dc.setmax(sigmas)
        return sigmas, alphas, rho

    def write_pooled(self, gamma: dc.DiffNode, mem: dc.DiffNode, n_agents: int,
                     mask: np.ndarray | None = None):
        """Erase/add memory update, max-pooled over the episode's agents."""
        p = self.params
        alpha = self.address(gamma, "write", mem, mask)
        erase = dc.sigmoid(dc.add_bias(dc.matmul(gamma, p["write_e.w"]), p["write_e.b"]))
        addv = dc.add_bias(dc.matmul(gamma, p["write_a.w"]), p["write_a.b"])
        e_pool = dc.pooled_outer_max(alpha, erase, n_agents)
        a_pool = dc.pooled_outer_max(alpha, addv, n_agents)
        new_mem = dc.add(dc.sub(mem, dc.mul(e_pool, mem)), a_pool)
        return new_mem, alpha

    # -- stepping ----------------------------------------------------------

    def initial_state(self, batch: int, n_agents: int,
                      initial_memory: np.ndarray | None = None) -> RolloutState:
        """Fresh episode state: wiped memory, zero recurrent states.

        ``initial_memory`` overrides the all-zero wipe (verification use:
        a zero memory keeps every row identical through the episode, which
        puts gradient checks on max/argmin ties).
        """
        cfg = self.config
        rows = batch * n_agents
        z = lambda *shape: dc.constant(np.zeros(shape, dtype=self.dtype))
        if initial_memory is None:
            mem = z(batch, cfg.mem_slots, cfg.mem_width)
        else:
            if initial_memory.shape != (batch, cfg.mem_slots, cfg.mem_width):
                raise ValueError(f"initial memory must be "
                                 f"{(batch, cfg.mem_slots, cfg.mem_width)}")
            mem = dc.constant(initial_memory.astype(self.dtype))
        memory = MemoryState(mem=mem,
                             gamma=z(rows, cfg.controller_state_dim),
                             rho=z(rows, cfg.mem_width))
        return RolloutState(memory=memory, tau=z(rows, cfg.enc_state_dim),
                            dec=[z(rows, cfg.dec_state_dim) for _ in range(self.k)],
                            n_agents=n_agents, batch=batch)

    def _masks(self, batch: int, n_agents: int):
        if not self.config.explain_mode:
            return None, None
        layout = SegmentLayout.build(self.config.mem_slots, n_agents)
        read = np.tile(layout.read_masks, (batch, 1))
        write = np.tile(layout.write_masks, (batch, 1))
        return read, write

    def step(self, state: RolloutState, disp: np.ndarray | None,
             pos: np.ndarray | None, masks=None,
             noise: np.ndarray | None = None) -> tuple[StepOutput, RolloutState]:
        """Advance every agent by one timestep.

        Past mode passes the observed displacement and absolute position per
        agent row; future mode passes ``None`` for both, which zeroes the
        two stream embeddings.  Memory is read before it is written.
        """
        cfg = self.config
        p = self.params
        rows = state.batch * state.n_agents
        if state.memory.gamma.value.shape[0] != rows:
            raise ValueError("state row count does not match batch * n_agents")
        read_mask, write_mask = masks if masks is not None else (None, None)

        if disp is not None:
            if np.asarray(disp).shape != (rows, 2):
                raise ValueError(f"disp must be ({rows}, 2)")
            delta = self.encode_displacement(dc.constant(np.asarray(disp, dtype=self.dtype)))
            pi = self.encode_position(dc.constant(np.asarray(pos, dtype=self.dtype)))
        else:
            delta = dc.constant(np.zeros((rows, cfg.embed_dim), dtype=self.dtype))
            pi = dc.constant(np.zeros((rows, cfg.embed_dim), dtype=self.dtype))

        tau = gru_step(delta, state.tau, p["enc.w_zr"], p["enc.b_zr"],
                       p["enc.w_c"], p["enc.b_c"])
        ctrl_in = dc.concat([pi, state.memory.rho])
        gamma = gru_step(ctrl_in, state.memory.gamma, p["ctrl.w_zr"], p["ctrl.b_zr"],
                         p["ctrl.w_c"], p["ctrl.b_c"])

        mem = state.memory.mem
        write_alpha = None
        read_alphas: list[dc.DiffNode] = []

        if self.ablation == "zero_read":
            zeros = dc.constant(np.zeros((rows, cfg.mem_width), dtype=self.dtype))
            sigmas = [zeros] * self.k
            rho = zeros
        elif self.ablation == "random_read":
            if noise is None:
                raise ValueError("random_read step needs a noise draw of shape "
                                 "(heads, rows, mem_width)")
            sigmas = [dc.constant(noise[k]) for k in range(self.k)]
            rho = sigmas[0] if self.k == 1 else dc.constant(
                np.max(noise, axis=0))
        elif self.ablation == "state_pool":
            pooled = dc.group_mean_broadcast(
                dc.add_bias(dc.matmul(gamma, p["state_pool.w"]), p["state_pool.b"]),
                state.n_agents)
            sigmas = [pooled] * self.k
            rho = pooled
        else:
            sigmas, read_alphas, rho = self.read_multihead(gamma, mem, read_mask)

        if self.ablation != "state_pool":
            mem, write_alpha = self.write_pooled(gamma, mem, state.n_agents, write_mask)

        outs = []
        new_dec = []
        for k in range(self.k):
            dec_in = dc.concat([tau, sigmas[k]])
            d = gru_step(dec_in, state.dec[k], p["dec.w_zr"], p["dec.b_zr"],
                         p["dec.w_c"], p["dec.b_c"])
            new_dec.append(d)
            outs.append(dc.add_bias(dc.matmul(d, p["out.w"]), p["out.b"]))

        new_state = RolloutState(memory=MemoryState(mem=mem, gamma=gamma, rho=rho),
                                 tau=tau, dec=new_dec,
                                 n_agents=state.n_agents, batch=state.batch)
        return StepOutput(sigmas=sigmas, read_alphas=read_alphas,
                          write_alpha=write_alpha, displacements=outs), new_state

    # -- rollouts ----------------------------------------------------------

    def _noise_source(self):
        return np.random.default_rng(np.random.SeedSequence(
            entropy=self.noise_seed, spawn_key=(7,)))

    def rollout(self, past_pos: np.ndarray, n_future: int,
                record_trace: bool = False,
                initial_memory: np.ndarray | None = None):
        """Run past then future steps for a group of same-size episodes.

        ``past_pos`` is (B, N, P, 2).  Returns per-head displacement nodes
        [(B*N, n_future, 2)] covering positions P .. P+n_future-1, and, when
        requested, the per-step inter-agent attention record.
        """
        batch, n_agents, n_past, _ = past_pos.shape
        rows = batch * n_agents
        flat = past_pos.reshape(rows, n_past, 2).astype(self.dtype)
        disp = np.zeros_like(flat)
        disp[:, 1:] = flat[:, 1:] - flat[:, :-1]

        if record_trace and not self.config.explain_mode:
            raise ValueError("attention traces require an explain-mode model")
        masks = self._masks(batch, n_agents) if self.config.explain_mode else None
        layout = (SegmentLayout.build(self.config.mem_slots, n_agents)
                  if record_trace else None)

        noise_rng = self._noise_source() if self.ablation == "random_read" else None

        state = self.initial_state(batch, n_agents, initial_memory=initial_memory)
        per_head_steps: list[list[dc.DiffNode]] = [[] for _ in range(self.k)]
        trace: list[np.ndarray] = []

        n_steps = n_past + n_future - 1
        for t in range(n_steps):
            past = t < n_past
            if not past and self.ablation == "memory_reset" and t == n_past:
                state.memory.mem = dc.constant(
                    np.zeros_like(state.memory.mem.value))
            noise = (noise_rng.standard_normal((self.k, rows, self.config.mem_width))
                     .astype(self.dtype) if noise_rng is not None else None)
            out, state = self.step(
                state,
                disp[:, t] if past else None,
                flat[:, t] if past else None,
                masks=masks, noise=noise)
            if t >= n_past - 1:
                for k in range(self.k):
                    per_head_steps[k].append(out.displacements[k])
                if record_trace:
                    trace.append(self._segment_attention(out.read_alphas, layout,
                                                         batch, n_agents))

        preds = [dc.stack_steps(steps) for steps in per_head_steps]
        return preds, trace

    def _segment_attention(self, read_alphas, layout, batch, n_agents) -> np.ndarray:
        """Raw per-agent attention mass on every other agent's segment,
        averaged over read heads; (B, N, N) with zero diagonal."""
        alpha = np.mean([a.value for a in read_alphas], axis=0)
        att = np.zeros((batch, n_agents, n_agents), dtype=np.float64)
        for j in range(n_agents):
            lo, hi = layout.ranges[j]
            seg_mass = alpha[:, lo:hi].sum(axis=1).reshape(batch, n_agents)
            att[:, :, j] = seg_mass
        return att

    def predict_episode_positions(self, preds: list[dc.DiffNode],
                                  last_obs: np.ndarray) -> np.ndarray:
        """Integrate displacement nodes into positions (B*N, K, T_f, 2)."""
        out = []
        for node in preds:
            pos = dc.add_const(dc.cumsum_steps(node), last_obs[:, None, :])
            out.append(pos.value)
        return np.stack(out, axis=1)

    def group_loss(self, episodes: list[Episode], weight: float = 1.0,
                   initial_memory: np.ndarray | None = None) -> dc.DiffNode:
        """Variety loss over one group of same-size episodes.

        Per agent the closest head (full-future mean squared error on
        reconstructed positions) is selected; only it receives gradient.
        The group mean is scaled by ``weight`` so that chunked batches
        reproduce the whole-batch episode mean.
        """
        from .training import variety_loss  # local import to avoid a cycle

        batch = len(episodes)
        n_agents = episodes[0].n_agents
        past = np.stack([ep.past_positions() for ep in episodes])
        future = np.stack([ep.future_positions() for ep in episodes])
        rows = batch * n_agents
        n_future = future.shape[2]
        gt = future.reshape(rows, n_future, 2).astype(self.dtype)

        preds, _ = self.rollout(past, n_future, initial_memory=initial_memory)
        last_obs = past[:, :, -1].reshape(rows, 2).astype(self.dtype)
        pos_nodes = [dc.add_const(dc.cumsum_steps(p), last_obs[:, None, :])
                     for p in preds]
        loss = variety_loss(pos_nodes, gt)
        return dc.scale(loss, weight) if weight != 1.0 else loss

    def predict(self, episodes: list[Episode], record_trace: bool = False):
        """Forecast futures for episodes sharing one agent count.

        Returns positions (B, N, K, T_f, 2) as numpy, plus the attention
        trace (list over steps of (B, N, N)) when requested.
        """
        if not episodes:
            raise ValueError("predict needs at least one episode")
        n_agents = episodes[0].n_agents
        n_past = episodes[0].n_past
        if any(ep.n_agents != n_agents or ep.n_past != n_past for ep in episodes):
            raise ValueError("predict group must share agent count and split")
        batch = len(episodes)
        past = np.stack([ep.past_positions() for ep in episodes])
        n_future = episodes[0].n_future
        preds, trace = self.rollout(past, n_future, record_trace=record_trace)
        last_obs = past[:, :, -1].reshape(batch * n_agents, 2).astype(self.dtype)
        flat = self.predict_episode_positions(preds, last_obs)
        shaped = flat.reshape(batch, n_agents, self.k, n_future, 2)
        return (shaped, trace) if record_trace else shaped
