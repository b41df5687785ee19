"""Minimal dense-tensor library with reverse-mode autodiff.

Covers exactly the operations the detector needs: 2-D matmul and friends,
SiLU/sigmoid/softmax, inverted dropout, layer norm, embedding lookup and a
fused label-masked language-modeling cross entropy. Everything runs in
float64 so finite-difference gradient checks are meaningful.

Gradient tracking is implicit: every op result remembers its parents and a
backward closure, and ``Tensor.backward()`` replays the recorded ops in
reverse execution order. One graph is meant to live on one thread; there is
no internal locking.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

from .errors import ConfigError, DataError, GraphError, ShapeError

_seq_counter = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation / generation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float64 array plus an accumulated gradient of the same shape."""

    __slots__ = ("values", "requires_grad", "_grad", "_parents", "_backward",
                 "_seq", "_backward_done")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self._grad = None
        self._parents = ()
        self._backward = None
        self._seq = next(_seq_counter)
        self._backward_done = False

    @property
    def shape(self):
        return self.values.shape

    @property
    def grad(self):
        """Accumulated gradient; all-zero until a backward pass touches it."""
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        return self._grad

    def zero_grad(self):
        self._grad = None

    @property
    def _tracked(self):
        return self.requires_grad or self._backward is not None

    def backward(self):
        """Run reverse-mode accumulation from this (scalar) tensor."""
        Graph(self).backward()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, seq={self._seq})"


class Graph:
    """Ordered record of the ops that produced a root tensor.

    ``nodes`` holds every tensor reachable from the root, sorted by creation
    order; backward visits each recorded op exactly once, newest first.
    """

    def __init__(self, root):
        self.root = root
        nodes = []
        seen = set()
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq, reverse=True)
        self.nodes = nodes

    def backward(self):
        root = self.root
        if root._backward_done:
            raise GraphError("backward already ran for this graph; re-run forward first")
        if root.values.size != 1:
            raise GraphError(f"backward root must be scalar, got shape {root.shape}")
        root._backward_done = True
        root._grad = np.ones_like(root.values)
        for t in self.nodes:
            if t._backward is None:
                continue
            g = t._grad
            # Exact-zero incoming gradient propagates nothing; skipping keeps
            # zero-weighted loss branches bitwise inert.
            if g is None or not g.any():
                continue
            t._backward(g)


def _accum(t, g):
    if not t._tracked:
        return
    if t._grad is None:
        t._grad = np.zeros_like(t.values)
    t._grad += g


def _result(values, parents):
    out = Tensor(values)
    if _grad_enabled and any(p._tracked for p in parents):
        out._parents = tuple(parents)
        return out, True
    return out, False


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1-D bias broadcast over the rows of a 2-D a."""
    bias = a.values.ndim == 2 and b.values.ndim == 1 and b.shape[0] == a.shape[1]
    if not bias and a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not match")
    out, track = _result(a.values + b.values, (a, b))
    if track:
        def _bw(g):
            _accum(a, g)
            _accum(b, g.sum(axis=0) if bias else g)
        out._backward = _bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not match")
    out, track = _result(a.values * b.values, (a, b))
    if track:
        def _bw(g):
            _accum(a, g * b.values)
            _accum(b, g * a.values)
        out._backward = _bw
    return out


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""
    c = float(c)
    out, track = _result(a.values * c, (a,))
    if track:
        out._backward = lambda g: _accum(a, g * c)
    return out


def scale_by(a: Tensor, s: Tensor) -> Tensor:
    """Multiply a by a 0-d tensor, differentiable in both arguments."""
    if s.values.size != 1:
        raise ShapeError(f"scale_by: scalar operand has shape {s.shape}")
    sv = float(s.values)
    out, track = _result(a.values * sv, (a, s))
    if track:
        def _bw(g):
            _accum(a, g * sv)
            _accum(s, np.asarray((g * a.values).sum()).reshape(s.shape))
        out._backward = _bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError(f"matmul: needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims disagree, {a.shape} x {b.shape}")
    out, track = _result(a.values @ b.values, (a, b))
    if track:
        def _bw(g):
            _accum(a, g @ b.values.T)
            _accum(b, a.values.T @ g)
        out._backward = _bw
    return out


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeError(f"transpose: needs a 2-D operand, got {a.shape}")
    out, track = _result(a.values.T.copy(), (a,))
    if track:
        out._backward = lambda g: _accum(a, g.T)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out, track = _result(a.values.reshape(shape), (a,))
    if track:
        out._backward = lambda g: _accum(a, g.reshape(a.shape))
    return out


def concat(tensors, axis=0) -> Tensor:
    """Concatenate along a sequence axis (0) or feature axis (1)."""
    tensors = [t for t in tensors if t.values.size > 0]
    if not tensors:
        raise ShapeError("concat: nothing to concatenate")
    out, track = _result(np.concatenate([t.values for t in tensors], axis=axis), tensors)
    if track:
        sizes = [t.shape[axis] for t in tensors]
        def _bw(g):
            offset = 0
            for t, n in zip(tensors, sizes):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + n)
                _accum(t, g[tuple(idx)])
                offset += n
        out._backward = _bw
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeError(f"slice_cols: needs a 2-D operand, got {a.shape}")
    out, track = _result(a.values[:, start:stop].copy(), (a,))
    if track:
        def _bw(g):
            buf = np.zeros_like(a.values)
            buf[:, start:stop] = g
            _accum(a, buf)
        out._backward = _bw
    return out


def pick(a: Tensor, index) -> Tensor:
    """Extract a single element as a 0-d tensor."""
    out, track = _result(np.asarray(a.values[index]), (a,))
    if track:
        def _bw(g):
            buf = np.zeros_like(a.values)
            buf[index] = g
            _accum(a, buf)
        out._backward = _bw
    return out


def mean_rows(a: Tensor) -> Tensor:
    """Mean over the sequence axis of an [N, H] tensor, kept as [1, H]."""
    if a.values.ndim != 2 or a.shape[0] == 0:
        raise DataError(f"mean_rows: needs a non-empty 2-D operand, got {a.shape}")
    n = a.shape[0]
    out, track = _result(a.values.mean(axis=0, keepdims=True), (a,))
    if track:
        out._backward = lambda g: _accum(a, np.repeat(g / n, n, axis=0))
    return out


# ---------------------------------------------------------------------------
# nonlinearities


def _sigmoid_vals(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_vals(a.values)
    out, track = _result(s, (a,))
    if track:
        out._backward = lambda g: _accum(a, g * s * (1.0 - s))
    return out


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _sigmoid_vals(a.values)
    out, track = _result(a.values * s, (a,))
    if track:
        out._backward = lambda g: _accum(a, g * s * (1.0 + a.values * (1.0 - s)))
    return out


def softmax(a: Tensor, axis=-1) -> Tensor:
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out, track = _result(s, (a,))
    if track:
        def _bw(g):
            dot = (g * s).sum(axis=axis, keepdims=True)
            _accum(a, s * (g - dot))
        out._backward = _bw
    return out


def dropout(a: Tensor, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-rate); identity in eval mode.

    The rng is consumed only in training mode with rate > 0, so eval passes
    leave the generator untouched.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    out, track = _result(a.values * keep, (a,))
    if track:
        out._backward = lambda g: _accum(a, g * keep)
    return out


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis of [N, H], then scale/shift by gamma/beta [H]."""
    if a.values.ndim != 2:
        raise ShapeError(f"layer_norm: needs a 2-D operand, got {a.shape}")
    h = a.shape[1]
    if gamma.shape != (h,) or beta.shape != (h,):
        raise ShapeError(f"layer_norm: gamma/beta must be [{h}], got {gamma.shape}/{beta.shape}")
    mu = a.values.mean(axis=1, keepdims=True)
    var = a.values.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.values - mu) * inv
    out, track = _result(xhat * gamma.values + beta.values, (a, gamma, beta))
    if track:
        def _bw(g):
            _accum(gamma, (g * xhat).sum(axis=0))
            _accum(beta, g.sum(axis=0))
            gx = g * gamma.values
            da = inv / h * (h * gx - gx.sum(axis=1, keepdims=True)
                            - xhat * (gx * xhat).sum(axis=1, keepdims=True))
            _accum(a, da)
        out._backward = _bw
    return out


def embedding(table: Tensor, ids) -> Tensor:
    """Row-gather: ids [N] -> [N, H]; gradients accumulate per looked-up row."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise DataError(f"embedding: ids must be 1-D, got shape {ids.shape}")
    v = table.shape[0]
    bad = np.nonzero((ids < 0) | (ids >= v))[0]
    if bad.size:
        raise DataError(f"embedding: id {ids[bad[0]]} at position {bad[0]} outside table of {v} rows")
    out, track = _result(table.values[ids].copy() if ids.size else
                         np.zeros((0, table.shape[1])), (table,))
    if track:
        def _bw(g):
            buf = np.zeros_like(table.values)
            np.add.at(buf, ids, g)
            _accum(table, buf)
        out._backward = _bw
    return out


def cross_entropy_lm(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean NLL of targets under row-wise log-softmax of logits [T, V].

    Positions whose target equals ignore_index contribute nothing; if every
    position is ignored the loss is the constant 0 (empty-sum convention) and
    carries no gradient.
    """
    if logits.values.ndim != 2:
        raise ShapeError(f"cross_entropy_lm: logits must be [T, V], got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    t, v = logits.shape
    if targets.shape != (t,):
        raise ShapeError(f"cross_entropy_lm: {t} logit rows but targets shape {targets.shape}")
    bad = np.nonzero((targets != ignore_index) & ((targets < 0) | (targets >= v)))[0]
    if bad.size:
        raise DataError(f"cross_entropy_lm: target {targets[bad[0]]} at position {bad[0]} "
                        f"outside vocabulary of {v}")
    kept = np.nonzero(targets != ignore_index)[0]
    if kept.size == 0:
        return Tensor(np.asarray(0.0))
    rows = logits.values[kept]
    m = rows.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(rows - m).sum(axis=1))
    nll = lse - rows[np.arange(kept.size), targets[kept]]
    out, track = _result(np.asarray(nll.mean()), (logits,))
    if track:
        def _bw(g):
            p = np.exp(rows - m)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(kept.size), targets[kept]] -= 1.0
            buf = np.zeros_like(logits.values)
            buf[kept] = p * (float(g) / kept.size)
            _accum(logits, buf)
        out._backward = _bw
    return out
