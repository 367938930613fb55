"""End-to-end optimization: variety loss, Adam, augmentation, train loop.

Training is strictly deterministic under a fixed seed: episode shuffling,
rotation augmentation and parameter initialization all derive from the
config seed, batches are chunked and reduced in a fixed order, and the
optimizer runs single-threaded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import diffcore as dc
from . import evaluation
from .ssa import Episode


class TrainingError(RuntimeError):
    """Divergence or invalid gradients during optimization."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 128
    epochs: int = 100
    k: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    augment: bool = True
    grad_clip: float | None = 1.0
    eval_every: int = 1
    early_stop_patience: int = 20
    chunk_rows: int = 512
    group_batches: bool = True

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "learning_rate", "batch_size", "epochs", "k", "adam_beta1", "adam_beta2",
            "adam_eps", "seed", "augment", "grad_clip", "eval_every",
            "early_stop_patience", "chunk_rows", "group_batches")}
        return d


# ---------------------------------------------------------------------------
# loss and augmentation


def variety_loss(preds: list[dc.DiffNode], gt: np.ndarray) -> dc.DiffNode:
    """Best-of-K mean squared error.

    ``preds`` holds one (rows, T, 2) node per head; per row only the head
    with the smallest full-future MSE against ``gt`` enters the loss, so
    gradient reaches exactly one head per agent.  Returns the mean over rows.
    """
    if not preds:
        raise ValueError("variety loss needs at least one prediction head")
    per_head = [dc.mse_rows(p, gt) for p in preds]
    if len(per_head) == 1:
        return dc.mean_all(per_head[0])
    values = np.stack([h.value for h in per_head])
    closest = np.argmin(values, axis=0)
    return dc.mean_all(dc.select_per_row(per_head, closest))


def augment_rotate(episode: Episode, theta: float) -> Episode:
    """Rigidly rotate all trajectories in the scene about the origin."""
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    return Episode(
        positions=episode.positions @ rot.T,
        n_past=episode.n_past,
        speeds=episode.speeds,
        start_angles=(None if episode.start_angles is None
                      else episode.start_angles + theta),
        episode_id=episode.episode_id,
        blockers=episode.blockers,
    )


# ---------------------------------------------------------------------------
# optimizer


def adam_step(value: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              t: int, lr: float, beta1: float, beta2: float, eps: float) -> None:
    """One bias-corrected Adam update, in place on value and both moments."""
    if t < 1:
        raise ValueError("Adam step count starts at 1")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    value -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Adam over a named parameter dict, with optional global-norm clipping."""

    def __init__(self, params: dict[str, dc.DiffNode], config: TrainConfig):
        self.params = params
        self.config = config
        self.t = 0
        self.m = {n: np.zeros_like(p.value) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.value) for n, p in params.items()}

    def step(self) -> None:
        cfg = self.config
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            if not np.isfinite(g).all():
                raise TrainingError(f"non-finite gradient for parameter {name!r}")
            grads[name] = g
        if cfg.grad_clip is not None:
            total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if total > cfg.grad_clip:
                factor = cfg.grad_clip / total
                for g in grads.values():
                    g *= factor
        self.t += 1
        for name, p in self.params.items():
            adam_step(p.value, grads[name], self.m[name], self.v[name], self.t,
                      cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out["m." + name] = self.m[name]
            out["v." + name] = self.v[name]
        return out


# ---------------------------------------------------------------------------
# loop


def _epoch_order(episodes: list[Episode], rng: np.random.Generator,
                 group: bool) -> np.ndarray:
    """Shuffled episode indices for one epoch.

    With ``group`` enabled the shuffled stream is additionally bucketed by
    agent count (bucket order itself shuffled), so consecutive batches stay
    size-homogeneous and run as one wide array pass instead of many narrow
    ones.  Episode membership per epoch and the update count are unchanged.
    """
    order = rng.permutation(len(episodes))
    if not group:
        return order
    buckets: dict[int, list[int]] = {}
    for i in order:
        buckets.setdefault(episodes[int(i)].n_agents, []).append(int(i))
    keys = sorted(buckets)
    key_order = rng.permutation(len(keys))
    return np.array([i for k in key_order for i in buckets[keys[int(k)]]],
                    dtype=np.intp)


def _batches(order: np.ndarray, size: int):
    for lo in range(0, len(order), size):
        yield order[lo:lo + size]


def _grouped(episodes: list[Episode]) -> list[list[Episode]]:
    groups: dict[int, list[Episode]] = {}
    for ep in episodes:
        groups.setdefault(ep.n_agents, []).append(ep)
    return [groups[n] for n in sorted(groups)]


def train(model, train_episodes: list[Episode], val_episodes: list[Episode],
          config: TrainConfig, log=None, blas_threads: int = 1) -> list[dict]:
    """Optimize the model in place; returns the per-epoch history.

    Every epoch shuffles episodes, forms batches, and accumulates gradients
    over same-size chunks within each batch before a single Adam update.
    Validation runs every ``eval_every`` epochs; on an ADE plateau longer
    than ``early_stop_patience`` evaluations training stops and the
    best-validation parameters are restored.

    BLAS pools are capped at ``blas_threads`` (the arrays here are too small
    for multithreaded kernels to pay off, and a fixed width keeps gradient
    reduction order deterministic).
    """
    if not train_episodes:
        raise TrainingError("empty training set")
    with threadpool_limits(limits=blas_threads):
        return _train_loop(model, train_episodes, val_episodes, config, log)


def _train_loop(model, train_episodes, val_episodes, config, log) -> list[dict]:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed,
                                                       spawn_key=(11,)))
    opt = Adam(model.params, config)
    history: list[dict] = []
    best_ade = math.inf
    best_snapshot = None
    best_moments = None
    stale = 0

    for epoch in range(1, config.epochs + 1):
        order = _epoch_order(train_episodes, rng, config.group_batches)
        epoch_loss = 0.0
        n_batches = 0
        for batch_idx in _batches(order, config.batch_size):
            batch = []
            for i in batch_idx:
                ep = train_episodes[int(i)]
                if config.augment:
                    ep = augment_rotate(ep, float(rng.uniform(0.0, 2.0 * math.pi)))
                batch.append(ep)
            opt.zero_grad()
            batch_loss = 0.0
            for group in _grouped(batch):
                n = group[0].n_agents
                chunk = max(1, config.chunk_rows // n)
                for lo in range(0, len(group), chunk):
                    part = group[lo:lo + chunk]
                    with dc.Tape() as tape:
                        loss = model.group_loss(part, weight=len(part) / len(batch))
                        tape.backward(loss)
                    batch_loss += float(loss.value)
            if not math.isfinite(batch_loss):
                raise TrainingError(f"training diverged: loss={batch_loss} "
                                    f"at epoch {epoch}")
            opt.step()
            epoch_loss += batch_loss
            n_batches += 1

        entry = {"epoch": epoch, "train_loss": epoch_loss / max(n_batches, 1)}
        if val_episodes and epoch % config.eval_every == 0:
            report = evaluation.evaluate_model(model, val_episodes)
            entry.update(ade=report.ade, fde=report.fde, kendall=report.kendall)
            if report.ade < best_ade:
                best_ade = report.ade
                best_snapshot = {n: p.value.copy() for n, p in model.params.items()}
                best_moments = (opt.t, {n: a.copy() for n, a in opt.m.items()},
                                {n: a.copy() for n, a in opt.v.items()})
                stale = 0
            else:
                stale += 1
        history.append(entry)
        if log is not None:
            log(entry)
        if stale > config.early_stop_patience:
            break

    if best_snapshot is not None:
        for name, arr in best_snapshot.items():
            model.params[name].value[...] = arr
        opt.t, opt.m, opt.v = best_moments
    model.last_optimizer = opt
    model.last_rng_state = rng.bit_generator.state
    return history