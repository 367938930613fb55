"""Minimal reverse-mode differentiation engine on dense numpy arrays.

A ``Tape`` records operations in execution order; ``Tape.backward`` replays
them in exact reverse order, accumulating gradients into every node that
requires them.  Only the primitives the forecaster's forward pass needs are
provided; there is no general broadcasting and no graph rewriting.

Two precision regimes are supported through the dtype of the leaf arrays:
float64 for gradient verification against finite differences, float32 for
training.  All operations preserve the dtype of their inputs.

Operations executed while no tape is active compute values only (inference
mode); no graph is recorded and backward is unavailable.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

_tls = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_tls, "tape", None)


class DiffNode:
    """A value array paired with its accumulated gradient.

    Leaves are created with :func:`leaf` (trainable, gradient accumulated) or
    :func:`constant` (no gradient).  Interior nodes are produced by the
    operations in this module and registered on the active tape.
    """

    __slots__ = ("value", "grad", "needs_grad")

    def __init__(self, value: np.ndarray, needs_grad: bool):
        self.value = value
        self.grad: np.ndarray | None = None
        self.needs_grad = needs_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover
        return f"DiffNode(shape={self.value.shape}, needs_grad={self.needs_grad})"


def leaf(value, dtype=None) -> DiffNode:
    """Create a gradient-accumulating leaf (a parameter or checked input)."""
    arr = np.array(value, dtype=dtype, copy=True) if dtype else np.array(value, copy=True)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return DiffNode(arr, needs_grad=True)


def constant(value, dtype=None) -> DiffNode:
    """Create a constant node; no gradient is ever accumulated into it."""
    arr = np.asarray(value, dtype=dtype)
    return DiffNode(arr, needs_grad=False)


class Tape:
    """Ordered record of operations; backward order is reverse record order.

    Use as a context manager; operations executed inside the ``with`` block
    are recorded.  ``reset()`` drops all recorded state so a tape can be
    reused across episodes without leaking memory.
    """

    def __init__(self):
        self._ops: list[tuple[DiffNode, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active on this thread")
        _tls.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _tls.tape = None

    def __len__(self) -> int:
        return len(self._ops)

    def record(self, node: DiffNode, backward: Callable[[np.ndarray], None]) -> None:
        self._ops.append((node, backward))

    def reset(self) -> None:
        self._ops.clear()

    def backward(self, root: DiffNode) -> None:
        """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``.

        ``root`` must be scalar-valued (a single element).  Nodes whose grad
        is still ``None`` when their turn comes contribute nothing downstream
        and are skipped.
        """
        if root.value.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.value.shape}")
        root.grad = np.ones_like(root.value)
        for node, backward in reversed(self._ops):
            g = node.grad
            if g is None:
                continue
            backward(g)


def _acc(node: DiffNode, delta: np.ndarray, own: bool) -> None:
    """Accumulate ``delta`` into ``node.grad``.

    ``own`` promises the caller holds no other live reference to ``delta``;
    only then may the array be adopted without copying on first assignment.
    """
    if not node.needs_grad:
        return
    if node.grad is None:
        node.grad = delta if own else delta.copy()
    else:
        node.grad += delta


def _record(value: np.ndarray, parents: Sequence[DiffNode],
            make_backward) -> DiffNode:
    tape = _active_tape()
    needs = any(p.needs_grad for p in parents)
    node = DiffNode(value, needs_grad=needs and tape is not None)
    if tape is not None and needs:
        tape.record(node, make_backward(node))
    return node


# ---------------------------------------------------------------------------
# arithmetic


def add(a: DiffNode, b: DiffNode) -> DiffNode:
    if a.value.shape != b.value.shape:
        raise ValueError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")

    def mk(node):
        def bw(g):
            _acc(a, g, own=True)
            _acc(b, g, own=False)
        return bw

    return _record(a.value + b.value, (a, b), mk)


def sub(a: DiffNode, b: DiffNode) -> DiffNode:
    if a.value.shape != b.value.shape:
        raise ValueError(f"sub shape mismatch: {a.value.shape} vs {b.value.shape}")

    def mk(node):
        def bw(g):
            _acc(a, g, own=False)
            _acc(b, -g, own=True)
        return bw

    return _record(a.value - b.value, (a, b), mk)


def mul(a: DiffNode, b: DiffNode) -> DiffNode:
    if a.value.shape != b.value.shape:
        raise ValueError(f"mul shape mismatch: {a.value.shape} vs {b.value.shape}")

    def mk(node):
        def bw(g):
            _acc(a, g * b.value, own=True)
            _acc(b, g * a.value, own=True)
        return bw

    return _record(a.value * b.value, (a, b), mk)


def scale(x: DiffNode, c: float) -> DiffNode:
    def mk(node):
        def bw(g):
            _acc(x, g * c, own=True)
        return bw

    return _record(x.value * c, (x,), mk)


def add_const(x: DiffNode, c) -> DiffNode:
    """x + c for a non-differentiated constant; numpy broadcasting allowed."""
    c = np.asarray(c, dtype=x.value.dtype)
    val = x.value + c
    if val.shape != x.value.shape:
        raise ValueError(f"add_const must not change shape: {x.value.shape} -> {val.shape}")

    def mk(node):
        def bw(g):
            _acc(x, g, own=False)
        return bw

    return _record(val, (x,), mk)


def add_bias(x: DiffNode, b: DiffNode) -> DiffNode:
    """Row-broadcast bias add: x[..., H] + b[H]."""
    if x.value.shape[-1] != b.value.shape[0] or b.value.ndim != 1:
        raise ValueError(f"add_bias shape mismatch: {x.value.shape} vs {b.value.shape}")

    def mk(node):
        def bw(g):
            _acc(x, g, own=False)
            axes = tuple(range(g.ndim - 1))
            _acc(b, g.sum(axis=axes), own=True)
        return bw

    return _record(x.value + b.value, (x, b), mk)


def matmul(a: DiffNode, b: DiffNode) -> DiffNode:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.value.shape} @ {b.value.shape}")

    def mk(node):
        def bw(g):
            _acc(a, g @ b.value.T, own=True)
            _acc(b, a.value.T @ g, own=True)
        return bw

    return _record(a.value @ b.value, (a, b), mk)


def outer(u: DiffNode, v: DiffNode) -> DiffNode:
    if u.value.ndim != 1 or v.value.ndim != 1:
        raise ValueError(f"outer expects vectors, got {u.value.shape}, {v.value.shape}")

    def mk(node):
        def bw(g):
            _acc(u, g @ v.value, own=True)
            _acc(v, u.value @ g, own=True)
        return bw

    return _record(np.outer(u.value, v.value), (u, v), mk)


# ---------------------------------------------------------------------------
# structure


def concat(xs: Sequence[DiffNode], axis: int = -1) -> DiffNode:
    if not xs:
        raise ValueError("concat of empty list")
    xs = list(xs)
    widths = [x.value.shape[axis] for x in xs]
    offs = np.cumsum([0] + widths)

    def mk(node):
        def bw(g):
            for x, a, b in zip(xs, offs[:-1], offs[1:]):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(a, b)
                _acc(x, g[tuple(idx)], own=False)
        return bw

    return _record(np.concatenate([x.value for x in xs], axis=axis), xs, mk)


def slice_cols(x: DiffNode, start: int, stop: int) -> DiffNode:
    """Slice along the last axis."""
    def mk(node):
        def bw(g):
            if x.grad is None and x.needs_grad:
                x.grad = np.zeros_like(x.value)
            if x.needs_grad:
                x.grad[..., start:stop] += g
        return bw

    return _record(np.ascontiguousarray(x.value[..., start:stop]), (x,), mk)


def slice_rows(x: DiffNode, start: int, stop: int) -> DiffNode:
    """Slice along the first axis."""
    def mk(node):
        def bw(g):
            if x.grad is None and x.needs_grad:
                x.grad = np.zeros_like(x.value)
            if x.needs_grad:
                x.grad[start:stop] += g
        return bw

    return _record(np.ascontiguousarray(x.value[start:stop]), (x,), mk)


def stack_steps(xs: Sequence[DiffNode]) -> DiffNode:
    """Stack T same-shape [R, C] nodes into [R, T, C] (time axis 1)."""
    xs = list(xs)
    if not xs:
        raise ValueError("stack_steps of empty list")

    def mk(node):
        def bw(g):
            for t, x in enumerate(xs):
                _acc(x, g[:, t], own=False)
        return bw

    return _record(np.stack([x.value for x in xs], axis=1), xs, mk)


def reshape_tail(x: DiffNode, *shape: int) -> DiffNode:
    """Reshape the trailing axes, keeping the leading (row) axis fixed."""
    rows = x.value.shape[0]
    val = x.value.reshape((rows,) + shape)

    def mk(node):
        def bw(g):
            _acc(x, g.reshape(x.value.shape), own=False)
        return bw

    return _record(val, (x,), mk)


def cumsum_steps(x: DiffNode) -> DiffNode:
    """Cumulative sum along axis 1 of [R, T, C]."""
    def mk(node):
        def bw(g):
            _acc(x, np.flip(np.cumsum(np.flip(g, 1), axis=1), 1), own=True)
        return bw

    return _record(np.cumsum(x.value, axis=1), (x,), mk)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def relu(x: DiffNode) -> DiffNode:
    def mk(node):
        def bw(g):
            _acc(x, g * (node.value > 0), own=True)
        return bw

    return _record(np.maximum(x.value, 0), (x,), mk)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form is overflow-safe for any argument and needs one vector op
    return 0.5 * np.tanh(0.5 * v) + 0.5


def sigmoid(x: DiffNode) -> DiffNode:
    def mk(node):
        def bw(g):
            s = node.value
            _acc(x, g * (s * (1.0 - s)), own=True)
        return bw

    return _record(_sigmoid(x.value), (x,), mk)


def tanh(x: DiffNode) -> DiffNode:
    def mk(node):
        def bw(g):
            t = node.value
            _acc(x, g * (1.0 - t * t), own=True)
        return bw

    return _record(np.tanh(x.value), (x,), mk)


def softplus(x: DiffNode) -> DiffNode:
    """log(1 + exp(x)), computed overflow-safely."""
    v = x.value
    val = np.log1p(np.exp(-np.abs(v))) + np.maximum(v, 0)

    def mk(node):
        def bw(g):
            _acc(x, g * _sigmoid(v), own=True)
        return bw

    return _record(val, (x,), mk)


_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "softplus": softplus}


def elementwise(name: str, x: DiffNode) -> DiffNode:
    """Dispatch on one of {relu, sigmoid, tanh, softplus}."""
    try:
        fn = _UNARY[name]
    except KeyError:
        raise ValueError(f"unknown elementwise op {name!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# addressing primitives


def softmax_temp(s: DiffNode, beta: DiffNode, mask: np.ndarray | None = None) -> DiffNode:
    """Temperature softmax over the last axis: softmax(beta * s).

    ``beta`` broadcasts against ``s`` (scalar, or one positive entry per
    row).  Entries where ``mask`` is False receive exactly zero weight and
    no gradient; each row of ``mask`` must keep at least one entry.
    """
    z = beta.value * s.value
    if mask is not None:
        if mask.shape != s.value.shape:
            raise ValueError(f"softmax mask shape {mask.shape} != {s.value.shape}")
        if not mask.any(axis=-1).all():
            raise ValueError("softmax mask excludes every entry of some row")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    alpha = e / e.sum(axis=-1, keepdims=True)

    def mk(node):
        def bw(g):
            a = node.value
            dz = a * (g - (g * a).sum(axis=-1, keepdims=True))
            _acc(s, dz * beta.value, own=True)
            if beta.needs_grad:
                db = dz * s.value
                while db.ndim > beta.value.ndim:
                    db = db.sum(axis=0)
                for ax in range(db.ndim):
                    if beta.value.shape[ax] == 1 and db.shape[ax] > 1:
                        db = db.sum(axis=ax, keepdims=True)
                _acc(beta, db.reshape(beta.value.shape), own=True)
        return bw

    return _record(alpha, (s, beta), mk)


def _clamped_norms(v: np.ndarray, eps: float, axis: int):
    raw = np.sqrt((v * v).sum(axis=axis))
    return raw, np.maximum(raw, eps)


def cosine_rows(key: DiffNode, mem: DiffNode, eps: float) -> DiffNode:
    """Cosine similarity of a key [d] against every memory row [S, d] -> [S].

    Norms are clamped below at ``eps`` so all-zero keys or rows yield zero
    similarity with finite gradients (a freshly wiped memory hits this on
    the first read of every episode).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if key.value.ndim != 1 or mem.value.ndim != 2 or key.value.shape[0] != mem.value.shape[1]:
        raise ValueError(f"cosine_rows shape mismatch: {key.value.shape} vs {mem.value.shape}")
    k, m = key.value, mem.value
    rk, nk = _clamped_norms(k, eps, axis=0)
    rm, nm = _clamped_norms(m, eps, axis=1)
    dots = m @ k
    sim = dots / (nk * nm)

    def mk(node):
        def bw(g):
            if key.needs_grad:
                dk = (g / nm) @ m / nk
                if rk > eps:
                    dk -= (g * sim).sum() * k / (rk * nk)
                _acc(key, dk, own=True)
            if mem.needs_grad:
                dm = (g / nm)[:, None] * (k[None, :] / nk)
                unclamped = rm > eps
                coef = np.where(unclamped, g * sim / np.maximum(rm * nm, eps * eps), 0.0)
                dm -= coef[:, None] * m
                _acc(mem, dm, own=True)
        return bw

    return _record(sim, (key, mem), mk)


def cosine_rows_grouped(keys: DiffNode, mem: DiffNode, eps: float) -> DiffNode:
    """Batched cosine similarity: keys [B*n, d] against mem [B, S, d] -> [B*n, S].

    Row ``b*n + i`` of the keys is compared against memory ``b``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    B, S, d = mem.value.shape
    G = keys.value.shape[0]
    if keys.value.shape != (G, d) or G % B != 0:
        raise ValueError(f"cosine_rows_grouped shapes: keys {keys.value.shape}, mem {mem.value.shape}")
    n = G // B
    k3 = keys.value.reshape(B, n, d)
    m = mem.value
    rk, nk = _clamped_norms(k3, eps, axis=2)          # [B, n]
    rm, nm = _clamped_norms(m, eps, axis=2)           # [B, S]
    dots = k3 @ m.transpose(0, 2, 1)                  # [B, n, S]
    sim3 = dots / (nk[:, :, None] * nm[:, None, :])

    def mk(node):
        def bw(g):
            g3 = g.reshape(B, n, S)
            if keys.needs_grad:
                dk = ((g3 / nm[:, None, :]) @ m) / nk[:, :, None]
                kcoef = np.where(rk > eps, (g3 * sim3).sum(axis=2) / np.maximum(rk * nk, eps * eps), 0.0)
                dk -= kcoef[:, :, None] * k3
                _acc(keys, dk.reshape(G, d), own=True)
            if mem.needs_grad:
                dm = (g3.transpose(0, 2, 1) @ (k3 / nk[:, :, None])) / nm[:, :, None]
                mcoef = np.where(rm > eps, (g3 * sim3).sum(axis=1) / np.maximum(rm * nm, eps * eps), 0.0)
                dm -= mcoef[:, :, None] * m
                _acc(mem, dm, own=True)
        return bw

    return _record(sim3.reshape(G, S), (keys, mem), mk)


# ---------------------------------------------------------------------------
# pooling and reading


def setmax(xs: Sequence[DiffNode]) -> DiffNode:
    """Elementwise maximum over same-shape nodes.

    Backward routes each element's gradient to the earliest input attaining
    the maximum (first-occurrence tie-break, deterministic).
    """
    xs = list(xs)
    if not xs:
        raise ValueError("setmax of empty list")
    shape = xs[0].value.shape
    for x in xs[1:]:
        if x.value.shape != shape:
            raise ValueError(f"setmax shape mismatch: {x.value.shape} vs {shape}")
    if len(xs) == 1:
        x0 = xs[0]

        def mk1(node):
            def bw(g):
                _acc(x0, g, own=False)
            return bw

        return _record(xs[0].value.copy(), xs, mk1)

    best = xs[0].value.copy()
    winner = np.zeros(shape, dtype=np.int8)
    for k, x in enumerate(xs[1:], start=1):
        better = x.value > best
        np.copyto(best, x.value, where=better)
        np.copyto(winner, k, where=better)

    def mk(node):
        def bw(g):
            for k, x in enumerate(xs):
                _acc(x, g * (winner == k), own=True)
        return bw

    return _record(best, xs, mk)


def pooled_outer_max(alpha: DiffNode, v: DiffNode, n: int) -> DiffNode:
    """Per-agent outer products pooled by elementwise max over each group.

    ``alpha`` is [B*n, S] of write weights and ``v`` is [B*n, C]; the result
    [B, S, C] is max over the n group members of outer(alpha_i, v_i).  Ties
    go to the lowest agent index within the group.
    """
    G, S = alpha.value.shape
    C = v.value.shape[1]
    if v.value.shape[0] != G or G % n != 0:
        raise ValueError(f"pooled_outer_max shapes: alpha {alpha.value.shape}, v {v.value.shape}, n={n}")
    B = G // n
    a3 = alpha.value.reshape(B, n, S)
    v3 = v.value.reshape(B, n, C)
    cand = a3[:, :, :, None] * v3[:, :, None, :]          # (B, n, S, C)
    winner = np.argmax(cand, axis=1).astype(np.int8)       # first max wins ties
    best = np.take_along_axis(cand, winner[:, None].astype(np.intp), axis=1)[:, 0]

    def mk(node):
        def bw(g):
            sel = winner[:, None, :, :] == np.arange(n, dtype=np.int8)[None, :, None, None]
            gsel = np.where(sel, g[:, None, :, :], 0.0)
            da = np.einsum("bnsc,bnc->bns", gsel, v3)
            dv = np.einsum("bnsc,bns->bnc", gsel, a3)
            _acc(alpha, da.reshape(G, S), own=True)
            _acc(v, dv.reshape(G, C), own=True)
        return bw

    return _record(best, (alpha, v), mk)


def weighted_row_sum(alpha: DiffNode, mem: DiffNode) -> DiffNode:
    """Sum of memory rows weighted by alpha: [S] x [S, d] -> [d]."""
    if alpha.value.ndim != 1 or mem.value.ndim != 2 or alpha.value.shape[0] != mem.value.shape[0]:
        raise ValueError(f"weighted_row_sum shapes: {alpha.value.shape}, {mem.value.shape}")

    def mk(node):
        def bw(g):
            _acc(alpha, mem.value @ g, own=True)
            _acc(mem, np.outer(alpha.value, g), own=True)
        return bw

    return _record(alpha.value @ mem.value, (alpha, mem), mk)


def read_rows_grouped(alpha: DiffNode, mem: DiffNode) -> DiffNode:
    """Batched weighted row sum: alpha [B*n, S] against mem [B, S, d] -> [B*n, d]."""
    B, S, d = mem.value.shape
    G = alpha.value.shape[0]
    if alpha.value.shape != (G, S) or G % B != 0:
        raise ValueError(f"read_rows_grouped shapes: {alpha.value.shape}, {mem.value.shape}")
    n = G // B
    a3 = alpha.value.reshape(B, n, S)
    val = (a3 @ mem.value).reshape(G, d)

    def mk(node):
        def bw(g):
            g3 = g.reshape(B, n, d)
            _acc(alpha, (g3 @ mem.value.transpose(0, 2, 1)).reshape(G, S), own=True)
            _acc(mem, a3.transpose(0, 2, 1) @ g3, own=True)
        return bw

    return _record(val, (alpha, mem), mk)


def group_mean_broadcast(x: DiffNode, n: int) -> DiffNode:
    """Replace each row by the mean over its group of n consecutive rows."""
    G, d = x.value.shape
    if G % n != 0:
        raise ValueError(f"group_mean_broadcast: {G} rows not divisible by n={n}")
    B = G // n
    means = x.value.reshape(B, n, d).mean(axis=1)
    val = np.repeat(means, n, axis=0)

    def mk(node):
        def bw(g):
            gm = g.reshape(B, n, d).mean(axis=1)
            _acc(x, np.repeat(gm, n, axis=0), own=True)
        return bw

    return _record(val, (x,), mk)


# ---------------------------------------------------------------------------
# losses and reductions


def mse(pred: DiffNode, target: DiffNode) -> DiffNode:
    """Mean squared error over all elements -> scalar node."""
    if pred.value.shape != target.value.shape:
        raise ValueError(f"mse shape mismatch: {pred.value.shape} vs {target.value.shape}")
    diff = pred.value - target.value
    val = np.asarray((diff * diff).mean(), dtype=pred.value.dtype)

    def mk(node):
        def bw(g):
            c = 2.0 * float(g) / diff.size
            _acc(pred, c * diff, own=True)
            _acc(target, -c * diff, own=True)
        return bw

    return _record(val, (pred, target), mk)


def mse_rows(pred: DiffNode, target: np.ndarray) -> DiffNode:
    """Per-row MSE over all trailing axes: [R, ...] -> [R]; target is constant."""
    if pred.value.shape != target.shape:
        raise ValueError(f"mse_rows shape mismatch: {pred.value.shape} vs {target.shape}")
    diff = pred.value - target
    R = diff.shape[0]
    per = diff.size // R
    val = (diff * diff).reshape(R, per).mean(axis=1)

    def mk(node):
        def bw(g):
            _acc(pred, (2.0 / per) * g.reshape((R,) + (1,) * (diff.ndim - 1)) * diff, own=True)
        return bw

    return _record(val, (pred,), mk)


def select_per_row(xs: Sequence[DiffNode], index: np.ndarray) -> DiffNode:
    """Pick, per row r, entry xs[index[r]][r] from K same-shape [R] vectors.

    Gradient flows only into the selected input of each row; the other
    inputs receive exactly zero.
    """
    xs = list(xs)
    R = xs[0].value.shape[0]
    if index.shape != (R,):
        raise ValueError(f"select_per_row index shape {index.shape} != ({R},)")
    val = np.empty(R, dtype=xs[0].value.dtype)
    for k, x in enumerate(xs):
        sel = index == k
        val[sel] = x.value[sel]

    def mk(node):
        def bw(g):
            for k, x in enumerate(xs):
                _acc(x, g * (index == k), own=True)
        return bw

    return _record(val, xs, mk)


def mean_all(x: DiffNode) -> DiffNode:
    val = np.asarray(x.value.mean(), dtype=x.value.dtype)

    def mk(node):
        def bw(g):
            _acc(x, np.full_like(x.value, float(g) / x.value.size), own=True)
        return bw

    return _record(val, (x,), mk)


# ---------------------------------------------------------------------------
# verification


def grad_check_named(f: Callable[[], DiffNode], named_leaves: dict[str, DiffNode],
                     h: float = 1e-5) -> dict[str, float]:
    """Per-leaf maximum relative error of analytic versus central differences.

    ``f`` must rebuild its computation from the current ``leaf.value`` arrays
    each call.  The error of a component is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    for lf in named_leaves.values():
        lf.zero_grad()
    with Tape() as tape:
        out = f()
        if out.value.size != 1:
            raise ValueError("grad_check target must be scalar-valued")
        tape.backward(out)
    analytic = {name: (np.zeros_like(lf.value) if lf.grad is None else lf.grad.copy())
                for name, lf in named_leaves.items()}

    errors: dict[str, float] = {}
    for name, lf in named_leaves.items():
        flat = lf.value.reshape(-1)
        an_flat = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().value)
            flat[i] = orig - h
            fm = float(f().value)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            denom = max(abs(an_flat[i]), abs(num), 1e-12)
            worst = max(worst, abs(an_flat[i] - num) / denom)
        errors[name] = worst
    return errors


def grad_check(f: Callable[[], DiffNode], leaves: Sequence[DiffNode], h: float = 1e-5) -> float:
    """Maximum relative error over all leaves; see :func:`grad_check_named`."""
    named = {f"leaf{i}": lf for i, lf in enumerate(leaves)}
    errors = grad_check_named(f, named, h=h)
    return max(errors.values()) if errors else 0.0
