"""A minimal reverse-mode tape over numpy arrays.

Only the handful of ops the surrogate needs: dense matmul, constant
neighbour aggregation, bias add, relu, concat and a fixed dropout mask.
"""
from __future__ import annotations

import numpy as np


MIN_GEMM_WIDTH = 4


def _rowwise_matmul(x, w):
    """x @ w with results that do not depend on a row's position in x.

    BLAS picks position-dependent kernels for outputs narrower than four
    columns; zero-padding ``w`` keeps every row on the same code path.
    """
    m = w.shape[1]
    if m >= MIN_GEMM_WIDTH:
        return x @ w
    padded = np.zeros((w.shape[0], MIN_GEMM_WIDTH))
    padded[:, :m] = w
    return (x @ padded)[:, :m]


class StaleTapeError(RuntimeError):
    pass


class Var:
    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name=None):
        self.value = value
        self.grad = None
        self.name = name

    def _acc(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g


class Tape:
    def __init__(self, version=None):
        self._ops = []
        self.version = version
        self.consumed = False

    def leaf(self, value, name=None):
        return Var(value, name)

    def _record(self, out, fn):
        self._ops.append(fn)
        return out

    def matmul(self, a: Var, w: Var):
        """``a`` (..., n, k) times weight ``w`` (k, m); leading axes are batch."""
        k = a.value.shape[-1]
        out = Var(_rowwise_matmul(a.value.reshape(-1, k), w.value).reshape(a.value.shape[:-1] + (w.value.shape[1],)))

        def back():
            if out.grad is None:
                return
            g = out.grad.reshape(-1, w.value.shape[1])
            a._acc((g @ w.value.T).reshape(a.value.shape))
            w._acc(a.value.reshape(-1, k).T @ g)
        return self._record(out, back)

    def aggregate(self, agg, h: Var):
        """``agg`` exposes ``forward(x)`` and ``transpose(g)``; it has no parameters."""
        out = Var(agg.forward(h.value))

        def back():
            if out.grad is not None:
                h._acc(agg.transpose(out.grad))
        return self._record(out, back)

    def add(self, *xs: Var):
        out = Var(sum(x.value for x in xs[1:]) + xs[0].value)

        def back():
            if out.grad is None:
                return
            for x in xs:
                g = out.grad
                if x.value.ndim < g.ndim:
                    g = g.reshape((-1,) + x.value.shape).sum(axis=0)
                x._acc(g)
        return self._record(out, back)

    def relu(self, x: Var):
        on = x.value > 0
        out = Var(np.where(on, x.value, 0.0))

        def back():
            if out.grad is not None:
                x._acc(out.grad * on)
        return self._record(out, back)

    def concat(self, xs):
        out = Var(np.concatenate([x.value for x in xs], axis=-1))
        bounds = np.cumsum([0] + [x.value.shape[-1] for x in xs])

        def back():
            if out.grad is None:
                return
            for x, a, b in zip(xs, bounds[:-1], bounds[1:]):
                x._acc(out.grad[..., a:b])
        return self._record(out, back)

    def scale(self, x: Var, factor):
        """Elementwise multiply by a constant array (dropout masks)."""
        out = Var(x.value * factor)

        def back():
            if out.grad is not None:
                x._acc(out.grad * factor)
        return self._record(out, back)

    def backward(self, out: Var, grad):
        if self.consumed:
            raise StaleTapeError("tape already consumed by a backward pass")
        self.consumed = True
        out._acc(np.asarray(grad, dtype=np.float64))
        for fn in reversed(self._ops):
            fn()
