"""Non-social reference models: every agent is forecast in isolation.

The recurrent encoder-decoder mirrors the forecaster's egocentric stream
(displacement embedding, recurrent encoder, recurrent decoder with a linear
offset head) without any memory.  The linear and multilayer regressors map
the flattened past displacements straight to all future displacements.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .ssa import Episode

BASELINE_KINDS = ("linear", "mlp", "gru_encdec")


def _episode_arrays(episodes: list[Episode], dtype):
    batch = len(episodes)
    n_agents = episodes[0].n_agents
    past = np.stack([ep.past_positions() for ep in episodes])
    future = np.stack([ep.future_positions() for ep in episodes])
    rows = batch * n_agents
    past = past.reshape(rows, -1, 2).astype(dtype)
    future = future.reshape(rows, -1, 2).astype(dtype)
    disp = past[:, 1:] - past[:, :-1]
    last_obs = past[:, -1]
    return disp, past, future, last_obs


def _positions_from_disp(disp_node: dc.DiffNode, last_obs: np.ndarray) -> dc.DiffNode:
    return dc.add_const(dc.cumsum_steps(disp_node), last_obs[:, None, :])


class _FlatBaseline:
    """Shared plumbing for the regressors on flattened displacement windows."""

    k = 1

    def __init__(self, params: dict[str, dc.DiffNode], n_past: int, n_future: int):
        self.params = params
        self.n_past = n_past
        self.n_future = n_future

    @property
    def dtype(self):
        return next(iter(self.params.values())).value.dtype

    def _forward(self, disp_flat: dc.DiffNode) -> dc.DiffNode:
        raise NotImplementedError

    def _predict_node(self, episodes):
        disp, _past, future, last_obs = _episode_arrays(episodes, self.dtype)
        rows = disp.shape[0]
        flat = dc.constant(disp.reshape(rows, -1))
        out = dc.reshape_tail(self._forward(flat), self.n_future, 2)
        return _positions_from_disp(out, last_obs), future

    def group_loss(self, episodes, weight: float = 1.0) -> dc.DiffNode:
        from .training import variety_loss

        pos, future = self._predict_node(episodes)
        loss = variety_loss([pos], future)
        return dc.scale(loss, weight) if weight != 1.0 else loss

    def predict(self, episodes) -> np.ndarray:
        pos, _ = self._predict_node(episodes)
        batch = len(episodes)
        n_agents = episodes[0].n_agents
        return pos.value.reshape(batch, n_agents, 1, self.n_future, 2)


class LinearBaseline(_FlatBaseline):
    kind = "linear"

    @classmethod
    def build(cls, n_past: int = 20, n_future: int = 40, seed: int = 0,
              dtype=np.float32) -> "LinearBaseline":
        rng = np.random.default_rng(seed)
        d_in, d_out = (n_past - 1) * 2, n_future * 2
        lim = 1.0 / np.sqrt(d_in)
        params = {
            "w": dc.leaf(rng.uniform(-lim, lim, (d_in, d_out)).astype(dtype)),
            "b": dc.leaf(np.zeros(d_out, dtype=dtype)),
        }
        return cls(params, n_past, n_future)

    def _forward(self, disp_flat):
        return dc.add_bias(dc.matmul(disp_flat, self.params["w"]), self.params["b"])


class MlpBaseline(_FlatBaseline):
    kind = "mlp"

    @classmethod
    def build(cls, n_past: int = 20, n_future: int = 40, hidden: int = 128,
              seed: int = 0, dtype=np.float32) -> "MlpBaseline":
        rng = np.random.default_rng(seed)
        d_in, d_out = (n_past - 1) * 2, n_future * 2
        params = {}
        dims = [d_in, hidden, hidden, d_out]
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            lim = 1.0 / np.sqrt(a)
            params[f"l{i}.w"] = dc.leaf(rng.uniform(-lim, lim, (a, b)).astype(dtype))
            params[f"l{i}.b"] = dc.leaf(np.zeros(b, dtype=dtype))
        return cls(params, n_past, n_future)

    def _forward(self, disp_flat):
        h = disp_flat
        last = 2
        for i in range(last + 1):
            h = dc.add_bias(dc.matmul(h, self.params[f"l{i}.w"]), self.params[f"l{i}.b"])
            if i < last:
                h = dc.relu(h)
        return h


class GruEncDecBaseline:
    """Recurrent encoder-decoder over per-agent displacements only."""

    kind = "gru_encdec"
    k = 1

    def __init__(self, params: dict[str, dc.DiffNode], embed_dim: int,
                 enc_state: int, dec_state: int):
        self.params = params
        self.embed_dim = embed_dim
        self.enc_state = enc_state
        self.dec_state = dec_state

    @classmethod
    def build(cls, embed_dim: int = 16, enc_state: int = 100, dec_state: int = 120,
              seed: int = 0, dtype=np.float32) -> "GruEncDecBaseline":
        rng = np.random.default_rng(seed)
        params: dict[str, dc.DiffNode] = {}

        def dense(name, a, b):
            lim = 1.0 / np.sqrt(a)
            params[name + ".w"] = dc.leaf(rng.uniform(-lim, lim, (a, b)).astype(dtype))
            params[name + ".b"] = dc.leaf(np.zeros(b, dtype=dtype))

        def gru(name, in_dim, state):
            lim = 1.0 / np.sqrt(in_dim + state)
            params[name + ".w_zr"] = dc.leaf(
                rng.uniform(-lim, lim, (in_dim + state, 2 * state)).astype(dtype))
            params[name + ".w_c"] = dc.leaf(
                rng.uniform(-lim, lim, (in_dim + state, state)).astype(dtype))
            params[name + ".b_zr"] = dc.leaf(np.zeros(2 * state, dtype=dtype))
            params[name + ".b_c"] = dc.leaf(np.zeros(state, dtype=dtype))

        dense("e_delta.l1", 2, embed_dim)
        dense("e_delta.l2", embed_dim, embed_dim)
        gru("enc", embed_dim, enc_state)
        gru("dec", enc_state, dec_state)
        dense("out", dec_state, 2)
        return cls(params, embed_dim, enc_state, dec_state)

    @property
    def dtype(self):
        return self.params["out.w"].value.dtype

    def _rollout(self, episodes):
        from .model import gru_step, mlp_encode

        p = self.params
        disp, past, future, last_obs = _episode_arrays(episodes, self.dtype)
        rows, n_past = past.shape[0], past.shape[1]
        n_future = future.shape[1]
        zeros_embed = dc.constant(np.zeros((rows, self.embed_dim), dtype=self.dtype))
        tau = dc.constant(np.zeros((rows, self.enc_state), dtype=self.dtype))
        dstate = dc.constant(np.zeros((rows, self.dec_state), dtype=self.dtype))

        steps = []
        for t in range(n_past + n_future - 1):
            if t < n_past:
                if t == 0:
                    delta = mlp_encode(dc.constant(np.zeros((rows, 2), dtype=self.dtype)),
                                       p["e_delta.l1.w"], p["e_delta.l1.b"],
                                       p["e_delta.l2.w"], p["e_delta.l2.b"])
                else:
                    delta = mlp_encode(dc.constant(disp[:, t - 1]),
                                       p["e_delta.l1.w"], p["e_delta.l1.b"],
                                       p["e_delta.l2.w"], p["e_delta.l2.b"])
            else:
                delta = zeros_embed
            tau = gru_step(delta, tau, p["enc.w_zr"], p["enc.b_zr"],
                           p["enc.w_c"], p["enc.b_c"])
            dstate = gru_step(tau, dstate, p["dec.w_zr"], p["dec.b_zr"],
                              p["dec.w_c"], p["dec.b_c"])
            if t >= n_past - 1:
                steps.append(dc.add_bias(dc.matmul(dstate, p["out.w"]), p["out.b"]))

        disp_node = dc.stack_steps(steps)
        return _positions_from_disp(disp_node, last_obs), future

    def group_loss(self, episodes, weight: float = 1.0) -> dc.DiffNode:
        from .training import variety_loss

        pos, future = self._rollout(episodes)
        loss = variety_loss([pos], future)
        return dc.scale(loss, weight) if weight != 1.0 else loss

    def predict(self, episodes) -> np.ndarray:
        pos, future = self._rollout(episodes)
        batch = len(episodes)
        n_agents = episodes[0].n_agents
        return pos.value.reshape(batch, n_agents, 1, -1, 2)


def build_baseline(kind: str, n_past: int = 20, n_future: int = 40,
                   seed: int = 0, dtype=np.float32):
    if kind == "linear":
        return LinearBaseline.build(n_past, n_future, seed=seed, dtype=dtype)
    if kind == "mlp":
        return MlpBaseline.build(n_past, n_future, seed=seed, dtype=dtype)
    if kind == "gru_encdec":
        return GruEncDecBaseline.build(seed=seed, dtype=dtype)
    raise ValueError(f"unknown baseline {kind!r}; pick one of {BASELINE_KINDS}")