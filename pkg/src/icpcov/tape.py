"""Minimal reverse-mode differentiation over a flat parameter vector.

Only the handful of operations the point network needs are provided. Every
operation records a closure; :meth:`Tape.backward` replays them in reverse
order, accumulating gradients into ``Tape.grad`` (same layout as the
parameters). Constants (point offsets, masks) never receive gradients.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import sparse


class Node:
    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad=True, grad=None):
        self.value = value
        self.requires_grad = requires_grad
        self.grad = grad

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            # ops always hand over fresh arrays, so ownership can be taken
            self.grad = g
        else:
            self.grad += g


def _value(x):
    return x.value if isinstance(x, Node) else x


class Tape:
    """Record of a forward pass. ``layout`` maps names to ``(offset, shape)``."""

    def __init__(self, params: np.ndarray, layout: dict, record: bool = True):
        self.params = params
        self.layout = layout
        self.record = record
        self.grad = np.zeros_like(params) if record else None
        self._ops = []
        self._params = {}
        self._done = False

    def param(self, name: str) -> Node:
        node = self._params.get(name)
        if node is None:
            off, shape = self.layout[name]
            size = int(np.prod(shape))
            value = self.params[off : off + size].reshape(shape)
            grad = self.grad[off : off + size].reshape(shape) if self.record else None
            node = Node(value, self.record, grad)
            self._params[name] = node
        return node

    def _push(self, fn):
        if self.record:
            self._ops.append(fn)

    def backward(self, output: Node, upstream) -> np.ndarray:
        """Propagate ``upstream`` (d loss / d output) back to the parameters."""
        if not self.record:
            raise RuntimeError("tape was created without recording")
        if self._done:
            raise RuntimeError("tape has already been consumed")
        self._done = True
        output.grad = np.array(upstream, dtype=float, copy=True).reshape(output.shape)
        for fn in reversed(self._ops):
            fn()
        return self.grad

    # -- operations -----------------------------------------------------------

    def linear(self, x, name: str, rows: slice | None = None, bias: bool = True) -> Node:
        """``x @ W[rows] + b``; ``rows`` selects a block of input rows of ``W``."""
        W, b = self.param(name + ".W"), self.param(name + ".b")
        Wv = W.value if rows is None else W.value[rows]
        xv = _value(x)
        out = Node(xv @ Wv + b.value if bias else xv @ Wv)
        if self.record:
            Wg = W.grad if rows is None else W.grad[rows]

            def back():
                g = out.grad
                if g is None:
                    return
                g2 = g.reshape(-1, g.shape[-1])
                Wg[...] += xv.reshape(-1, xv.shape[-1]).T @ g2
                if bias:
                    b.grad += g2.sum(axis=0)
                if isinstance(x, Node) and x.requires_grad:
                    x.accumulate(g @ Wv.T)

            self._push(back)
        return out

    def add(self, *parts: Node) -> Node:
        """Elementwise sum of equally shaped nodes."""
        out = Node(sum(p.value for p in parts[1:]) + parts[0].value)

        def back():
            if out.grad is None:
                return
            parts[0].accumulate(out.grad)
            for p in parts[1:]:
                p.accumulate(out.grad.copy())

        self._push(back)
        return out

    def relu(self, x: Node, mask_scale: np.ndarray | None = None) -> Node:
        """``max(x, 0)``, optionally times a constant (dropout) mask in the same pass."""
        pos = x.value > 0
        factor = pos if mask_scale is None else np.where(pos, mask_scale, 0.0)
        out = Node(x.value * factor)

        def back():
            if out.grad is not None:
                x.accumulate(out.grad * factor)

        self._push(back)
        return out

    def scale(self, x: Node, factor, offset=0.0) -> Node:
        """Elementwise ``factor * x + offset`` with constant factor/offset."""
        out = Node(x.value * factor + offset)

        def back():
            if out.grad is not None:
                x.accumulate(out.grad * factor)

        self._push(back)
        return out

    def gather(self, x, idx: np.ndarray) -> Node:
        """Rows of ``x`` (``(N, C)``) at integer array ``idx`` -> ``idx.shape + (C,)``."""
        xv = _value(x)
        out = Node(xv[idx])
        if isinstance(x, Node) and x.requires_grad:

            def back():
                if out.grad is None:
                    return
                flat = idx.reshape(-1)
                # scatter-add as a sparse product; much faster than np.add.at
                S = sparse.csr_matrix((np.ones(flat.size), (flat, np.arange(flat.size))), shape=(len(xv), flat.size))
                x.accumulate(S @ out.grad.reshape(-1, xv.shape[-1]))

            self._push(back)
        return out

    def concat(self, parts: Sequence, axis: int = -1) -> Node:
        vals = [_value(p) for p in parts]
        out = Node(np.concatenate(vals, axis=axis))
        sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

        def back():
            if out.grad is None:
                return
            for p, g in zip(parts, np.split(out.grad, sizes, axis=axis)):
                if isinstance(p, Node):
                    p.accumulate(g)

        self._push(back)
        return out

    def max_pool(self, x: Node, valid: np.ndarray | None = None) -> Node:
        """Max over axis -2. Invalid entries are ignored; all-invalid rows give 0.

        The gradient goes to the first maximal entry (lowest index).
        """
        v = x.value
        if valid is not None:
            v = np.where(valid[..., None], v, -np.inf)
        arg = np.argmax(v, axis=-2)
        out_v = np.take_along_axis(v, arg[..., None, :], axis=-2)[..., 0, :]
        empty = ~np.isfinite(out_v)
        out = Node(np.where(empty, 0.0, out_v))

        def back():
            if out.grad is None:
                return
            g = np.zeros_like(x.value)
            np.put_along_axis(g, arg[..., None, :], np.where(empty, 0.0, out.grad)[..., None, :], axis=-2)
            x.accumulate(g)

        self._push(back)
        return out
