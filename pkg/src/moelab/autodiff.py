"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: every op builds a graph node holding its parents and a
backward closure; ``backward`` replays the graph once in reverse
topological order.  Hot inner kernels (softmax, layer norm, scatter-add)
are delegated to the selected kernel backend.
"""

import numpy as np

from . import flops, kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        data = np.asarray(data, dtype=np.float64)
        if not data.flags["C_CONTIGUOUS"]:
            data = np.ascontiguousarray(data)  # keeps 0-d shape, unlike unconditional copy
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def _node(data, parents, backward_fn):
    out = Tensor(data)
    parent_list = tuple(p for p in parents if p.requires_grad)
    if parent_list:
        out.requires_grad = True
        out._parents = parent_list
        out._backward = backward_fn
    return out


# During a backward pass, gradients of interior nodes live in a pass-local
# buffer so a second backward() call re-derives them from scratch and only
# leaf tensors see accumulation across calls.
_PASS_GRADS = None


def _accumulate(t, contribution):
    if _PASS_GRADS is not None and t._backward is not None:
        key = id(t)
        if key in _PASS_GRADS:
            _PASS_GRADS[key] = _PASS_GRADS[key] + contribution
        else:
            _PASS_GRADS[key] = contribution
    elif t.grad is None:
        t.grad = contribution
    else:
        t.grad = t.grad + contribution


def _unbroadcast(g, shape):
    """Reduce gradient g back to the given operand shape after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss):
    """Populate .grad on every reachable tensor with d(loss)/d(tensor).

    Accumulates into existing grads; visits each graph node exactly once.
    """
    global _PASS_GRADS
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._backward is None:
        _accumulate(loss, np.ones(()))
        return
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p._backward is not None:
                stack.append((p, False))
    _PASS_GRADS = {id(loss): np.ones(())}
    try:
        for node in reversed(topo):
            g = _PASS_GRADS.pop(id(node))
            node._backward(g)
    finally:
        _PASS_GRADS = None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b):
    out_data = a.data + b.data
    flops.add(out_data.size)

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), back)


def sub(a, b):
    out_data = a.data - b.data
    flops.add(out_data.size)

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _node(out_data, (a, b), back)


def mul(a, b):
    out_data = a.data * b.data
    flops.add(out_data.size)
    a_data, b_data = a.data, b.data

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b_data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a_data, b.data.shape))

    return _node(out_data, (a, b), back)


def scale(a, c):
    c = float(c)
    flops.add(a.size)

    def back(g):
        _accumulate(a, g * c)

    return _node(a.data * c, (a,), back)


def matmul(a, b):
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    out_data = np.matmul(a.data, b.data)
    flops.add(2 * out_data.size * a.data.shape[-1])
    a_data, b_data = a.data, b.data

    def back(g):
        if a.requires_grad:
            ga = np.matmul(g, b_data.swapaxes(-1, -2))
            _accumulate(a, _unbroadcast(ga, a_data.shape))
        if b.requires_grad:
            gb = np.matmul(a_data.swapaxes(-1, -2), g)
            _accumulate(b, _unbroadcast(gb, b_data.shape))

    return _node(out_data, (a, b), back)


def relu(a):
    out_data = np.maximum(a.data, 0.0)
    flops.add(a.size)
    mask = a.data > 0.0

    def back(g):
        _accumulate(a, g * mask)

    return _node(out_data, (a,), back)


def reshape(a, shape):
    out_data = a.data.reshape(shape)
    in_shape = a.data.shape

    def back(g):
        _accumulate(a, g.reshape(in_shape))

    return _node(out_data, (a,), back)


def transpose(a, axes):
    axes = tuple(axes)
    out_data = np.ascontiguousarray(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def back(g):
        _accumulate(a, np.ascontiguousarray(g.transpose(inverse)))

    return _node(out_data, (a,), back)


def sum_all(a):
    flops.add(a.size)

    def back(g):
        _accumulate(a, np.full(a.data.shape, float(g)))

    return _node(np.asarray(a.data.sum()), (a,), back)


def mean_all(a):
    n = a.size
    flops.add(n)

    def back(g):
        _accumulate(a, np.full(a.data.shape, float(g) / n))

    return _node(np.asarray(a.data.mean()), (a,), back)


def sum_axis(a, axis, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    flops.add(a.size)
    in_shape = a.data.shape

    def back(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        _accumulate(a, np.broadcast_to(gg, in_shape).copy())

    return _node(out_data, (a,), back)


def softmax(a, axis=-1):
    """Numerically stable softmax along ``axis`` (max-subtraction)."""
    x = np.moveaxis(a.data, axis, -1)
    lead_shape = x.shape
    y2d = kernels.softmax2d(np.ascontiguousarray(x.reshape(-1, x.shape[-1])))
    out_data = np.moveaxis(y2d.reshape(lead_shape), -1, axis)
    flops.add(5 * a.size)

    def back(g):
        g_last = np.ascontiguousarray(np.moveaxis(g, axis, -1).reshape(-1, lead_shape[-1]))
        gx = kernels.softmax_backward2d(y2d, g_last)
        _accumulate(a, np.moveaxis(gx.reshape(lead_shape), -1, axis))

    return _node(out_data, (a,), back)


def masked_softmax(a, keep):
    """Softmax over the last axis restricted to ``keep`` (bool, broadcastable).

    Fully masked rows yield all zeros rather than NaN.
    """
    keep_full = np.ascontiguousarray(
        np.broadcast_to(keep, a.data.shape).astype(np.uint8)
    )
    rows = int(np.prod(a.data.shape[:-1], dtype=np.int64)) if a.data.ndim > 1 else 1
    cols = a.data.shape[-1]
    y2d = kernels.masked_softmax2d(a.data.reshape(rows, cols), keep_full.reshape(rows, cols))
    out_data = y2d.reshape(a.data.shape)
    flops.add(6 * a.size)

    def back(g):
        gx = kernels.softmax_backward2d(y2d, np.ascontiguousarray(g.reshape(rows, cols)))
        _accumulate(a, gx.reshape(a.data.shape))

    return _node(out_data, (a,), back)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then gain & bias."""
    cols = x.data.shape[-1]
    if gain.data.shape != (cols,) or bias.data.shape != (cols,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({cols},), got {gain.data.shape} and {bias.data.shape}"
        )
    flat = x.data.reshape(-1, cols)
    xhat2d, inv_std = kernels.layernorm2d(flat, eps)
    flops.add(8 * x.size)

    def back_core(g):
        g2d = np.ascontiguousarray(g.reshape(-1, cols))
        gx = kernels.layernorm_backward2d(xhat2d, inv_std, g2d)
        _accumulate(x, gx.reshape(x.data.shape))

    xhat = _node(xhat2d.reshape(x.data.shape), (x,), back_core)
    return add(mul(xhat, gain), bias)


def embedding_lookup(table, ids):
    """Rows of ``table`` indexed by the integer array ``ids``."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError(
            f"token id out of range [0, {table.data.shape[0]}): min={ids.min()}, max={ids.max()}"
        )
    out_data = table.data[ids]
    flat_ids = np.ascontiguousarray(ids.reshape(-1).astype(np.int64))

    def back(g):
        gt = np.zeros_like(table.data)
        kernels.scatter_add_rows(gt, flat_ids, np.ascontiguousarray(g.reshape(-1, table.data.shape[1])))
        _accumulate(table, gt)

    return _node(out_data, (table,), back)


def gather_rows(a, idx):
    """Select rows of a 2-d tensor; duplicates allowed."""
    idx = np.ascontiguousarray(np.asarray(idx, dtype=np.int64))
    out_data = a.data[idx]
    n_rows = a.data.shape[0]

    def back(g):
        ga = np.zeros((n_rows,) + a.data.shape[1:])
        kernels.scatter_add_rows(ga, idx, np.ascontiguousarray(g))
        _accumulate(a, ga)

    return _node(out_data, (a,), back)


def scatter_rows(a, idx, num_rows):
    """Place rows of a 2-d tensor into a zero tensor with ``num_rows`` rows.

    Rows sent to the same destination accumulate, making this the exact
    adjoint of gather_rows.
    """
    idx = np.asarray(idx, dtype=np.int64)
    out_data = np.zeros((num_rows,) + a.data.shape[1:])
    np.add.at(out_data, idx, a.data)

    def back(g):
        _accumulate(a, g[idx])

    return _node(out_data, (a,), back)


def concat_rows(parts):
    """Stack tensors along axis 0. Pure data movement, free like gather."""
    if len(parts) == 1:
        return parts[0]
    out_data = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.data.shape[0] for p in parts]

    def back(g):
        start = 0
        for p, size in zip(parts, sizes):
            _accumulate(p, g[start : start + size])
            start += size

    return _node(out_data, tuple(parts), back)


def dropout(x, rate, rng):
    """Inverted dropout; call only in training mode."""
    if rate <= 0.0:
        return x
    keep = (rng.uniform(size=x.data.shape) >= rate) / (1.0 - rate)
    flops.add(2 * x.size)

    def back(g):
        _accumulate(x, g * keep)

    return _node(x.data * keep, (x,), back)


def cross_entropy(logits, targets, pad_id=None, label_smoothing=0.0):
    """Mean negative log-likelihood of ``targets`` under row softmax.

    Rows whose target equals ``pad_id`` are excluded from the mean.  With
    label smoothing s, the target distribution is (1-s)*onehot + s/V.
    """
    vocab = logits.data.shape[-1]
    flat_logits = logits.data.reshape(-1, vocab)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != flat_logits.shape[0]:
        raise ShapeError(f"targets shape {np.asarray(targets).shape} does not match logits {logits.data.shape}")
    if t.size and (t.min() < 0 or t.max() >= vocab):
        raise ValueError(f"target index out of range [0, {vocab}): min={t.min()}, max={t.max()}")
    valid = np.ones(t.shape[0], dtype=bool) if pad_id is None else t != pad_id
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("cross_entropy: no non-pad target positions")

    probs = kernels.softmax2d(np.ascontiguousarray(flat_logits))
    m = flat_logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(flat_logits - m).sum(axis=1, keepdims=True)) + m
    logp = flat_logits - logz
    s = float(label_smoothing)
    rows = np.arange(t.shape[0])
    row_loss = -(1.0 - s) * logp[rows, t] - (s / vocab) * logp.sum(axis=1)
    value = row_loss[valid].sum() / n_valid
    flops.add(7 * flat_logits.size)

    def back(g):
        target_dist = np.full_like(probs, s / vocab)
        target_dist[rows, t] += 1.0 - s
        gl = (probs - target_dist) * (float(g) / n_valid)
        gl[~valid] = 0.0
        _accumulate(logits, gl.reshape(logits.data.shape))

    return _node(np.asarray(value), (logits,), back)


_KL_FLOOR = 1e-9


def kl_divergence(p, q, row_mask=None):
    """Mean over rows of sum_v p * (log p - log q), logs floored at 1e-9.

    p and q are row-stochastic tensors of equal shape (last axis is the
    distribution).  ``row_mask`` optionally restricts the mean to a subset
    of rows.  Flooring both logs keeps the value >= -1e-9 and makes
    KL(p || p) exactly zero.
    """
    if p.data.shape != q.data.shape:
        raise ShapeError(f"kl_divergence shape mismatch: {p.data.shape} vs {q.data.shape}")
    cols = p.data.shape[-1]
    pf = p.data.reshape(-1, cols)
    qf = q.data.reshape(-1, cols)
    if row_mask is None:
        sel = np.ones(pf.shape[0], dtype=bool)
    else:
        sel = np.asarray(row_mask, dtype=bool).reshape(-1)
        if sel.shape[0] != pf.shape[0]:
            raise ShapeError(f"row_mask length {sel.shape[0]} does not match {pf.shape[0]} rows")
    n_rows = int(sel.sum())
    if n_rows == 0:
        raise ValueError("kl_divergence: no selected rows")
    for name, arr in (("p", pf), ("q", qf)):
        sums = arr[sel].sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            worst = float(np.abs(sums - 1.0).max())
            raise ValueError(f"kl_divergence: {name} rows must sum to 1 (worst deviation {worst:.3e})")

    logp = np.log(np.maximum(pf, _KL_FLOOR))
    logq = np.log(np.maximum(qf, _KL_FLOOR))
    diff = logp - logq
    value = (pf * diff)[sel].sum() / n_rows
    flops.add(8 * p.size)

    def back(g):
        w = float(g) / n_rows
        if p.requires_grad:
            gp = (diff + (pf > _KL_FLOOR)) * w
            gp[~sel] = 0.0
            _accumulate(p, gp.reshape(p.data.shape))
        if q.requires_grad:
            gq = np.where(qf > _KL_FLOOR, -pf / np.maximum(qf, _KL_FLOOR), 0.0) * w
            gq[~sel] = 0.0
            _accumulate(q, gq.reshape(q.data.shape))

    return _node(np.asarray(value), (p, q), back)


def sinusoidal_positions(seq_len, d_model):
    """Fixed sin/cos positional table, shape [seq_len, d_model]."""
    pos = np.arange(seq_len)[:, None].astype(np.float64)
    dim = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (dim // 2)) / d_model)
    pe = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return pe
