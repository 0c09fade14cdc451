"""Reverse-mode automatic differentiation over dense numpy arrays.

A deliberately small op set: elementwise arithmetic, matmul, relu, exp/log/
pow, reductions, (masked) softmax and log-softmax, row gather, flat take and
its adjoint, concat, and basic slicing. Every op records a backward closure
on a tape; ``Tensor.backward`` walks the tape in reverse topological order.

Gradient recording can be suspended with ``no_grad()`` for inference paths;
the forward math is identical either way.
"""

from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward values unchanged)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over axes that were broadcast to reach ``grad.shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A numpy array plus an optional gradient and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()
        self.name = name

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def _accum(self, grad):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def zero_grad(self):
        self.grad = None

    # -- arithmetic -----------------------------------------------------------

    @staticmethod
    def _coerce(other):
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=np.float64))

    def __add__(self, other):
        other = Tensor._coerce(other)
        out_data = self.data + other.data

        def backward(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.data.shape))

        return Tensor._make(out_data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g):
            if self.requires_grad:
                self._accum(-g)

        return Tensor._make(-self.data, (self,), backward)

    def __sub__(self, other):
        return self + (-Tensor._coerce(other))

    def __rsub__(self, other):
        return Tensor._coerce(other) + (-self)

    def __mul__(self, other):
        other = Tensor._coerce(other)
        out_data = self.data * other.data

        def backward(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.data.shape))

        return Tensor._make(out_data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._coerce(other)
        out_data = self.data / other.data

        def backward(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-g * self.data / (other.data ** 2), other.data.shape))

        return Tensor._make(out_data, (self, other), backward)

    def __rtruediv__(self, other):
        return Tensor._coerce(other) / self

    def __matmul__(self, other):
        other = Tensor._coerce(other)
        out_data = self.data @ other.data

        def backward(g):
            if self.requires_grad:
                self._accum(g @ other.data.T)
            if other.requires_grad:
                other._accum(self.data.T @ g)

        return Tensor._make(out_data, (self, other), backward)

    def pow(self, exponent: float):
        out_data = self.data ** exponent

        def backward(g):
            if self.requires_grad:
                self._accum(g * exponent * self.data ** (exponent - 1))

        return Tensor._make(out_data, (self,), backward)

    def __pow__(self, exponent):
        return self.pow(float(exponent))

    # -- nonlinearities -------------------------------------------------------

    def relu(self):
        out_data = np.maximum(self.data, 0.0)

        def backward(g):
            if self.requires_grad:
                self._accum(g * (self.data > 0))

        return Tensor._make(out_data, (self,), backward)

    def exp(self):
        out_data = np.exp(self.data)

        def backward(g):
            if self.requires_grad:
                self._accum(g * out_data)

        return Tensor._make(out_data, (self,), backward)

    def log(self):
        out_data = np.log(self.data)

        def backward(g):
            if self.requires_grad:
                self._accum(g / self.data)

        return Tensor._make(out_data, (self,), backward)

    def sqrt(self):
        return self.pow(0.5)

    def tanh(self):
        out_data = np.tanh(self.data)

        def backward(g):
            if self.requires_grad:
                self._accum(g * (1.0 - out_data ** 2))

        return Tensor._make(out_data, (self,), backward)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if not self.requires_grad:
                return
            if axis is None:
                self._accum(np.broadcast_to(g, self.data.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accum(np.broadcast_to(gg, self.data.shape).copy())

        return Tensor._make(out_data, (self,), backward)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    # -- softmax family ---------------------------------------------------------

    def softmax(self, mask: np.ndarray | None = None):
        """Row softmax over the last axis.

        ``mask`` is a boolean array broadcastable to ``self.shape``; masked-out
        entries (False) contribute exactly 0 to the output and receive zero
        gradient. Rows with no admissible entry are all-zero.
        """
        x = self.data
        if mask is not None:
            neg = np.where(mask, x, -np.inf)
        else:
            neg = x
        m = neg.max(axis=-1, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.exp(neg - m)
        if mask is not None:
            e = np.where(mask, e, 0.0)
        denom = e.sum(axis=-1, keepdims=True)
        safe = np.where(denom > 0, denom, 1.0)
        out_data = e / safe

        def backward(g):
            if self.requires_grad:
                dot = (g * out_data).sum(axis=-1, keepdims=True)
                self._accum(out_data * (g - dot))

        return Tensor._make(out_data, (self,), backward)

    def log_softmax(self, mask: np.ndarray | None = None):
        """Row log-softmax over the last axis; masked entries get -inf."""
        x = self.data
        if mask is not None:
            x = np.where(mask, x, -np.inf)
        m = x.max(axis=-1, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.exp(x - m)
        lse = np.log(e.sum(axis=-1, keepdims=True)) + m
        out_data = x - lse
        probs = np.exp(out_data)

        def backward(g):
            if self.requires_grad:
                if mask is not None:
                    g = np.where(mask, g, 0.0)
                self._accum(g - probs * g.sum(axis=-1, keepdims=True))

        return Tensor._make(out_data, (self,), backward)

    # -- structural ops ---------------------------------------------------------

    def gather_rows(self, indices):
        """Select rows by integer index: out[i] = self[indices[i]]."""
        idx = np.asarray(indices, dtype=np.intp)
        out_data = self.data[idx]

        def backward(g):
            if self.requires_grad:
                acc = np.zeros_like(self.data)
                np.add.at(acc, idx, g)
                self._accum(acc)

        return Tensor._make(out_data, (self, ), backward)

    def take_flat(self, flat_indices):
        """Gather by flat index: out.flat laid out as flat_indices.shape."""
        idx = np.asarray(flat_indices, dtype=np.intp)
        out_data = self.data.reshape(-1)[idx]

        def backward(g):
            if self.requires_grad:
                acc = np.zeros(self.data.size, dtype=np.float64)
                np.add.at(acc, idx.reshape(-1), g.reshape(-1))
                self._accum(acc.reshape(self.data.shape))

        return Tensor._make(out_data, (self,), backward)

    def bin_rows_by_index(self, col_indices, num_bins: int):
        """Row-wise segment sum: out[i, b] = sum_j self[i, j] * [col_indices[i, j] == b].

        Adjoint of a per-row ``take``; used to push attention weights into
        relative-offset bins.
        """
        idx = np.asarray(col_indices, dtype=np.intp)
        rows = self.data.shape[0]
        out_data = np.zeros((rows, num_bins), dtype=np.float64)
        row_ids = np.repeat(np.arange(rows), idx.shape[1])
        np.add.at(out_data, (row_ids, idx.reshape(-1)), self.data.reshape(-1))

        def backward(g):
            if self.requires_grad:
                self._accum(g[np.arange(rows)[:, None], idx])

        return Tensor._make(out_data, (self,), backward)

    def transpose(self):
        def backward(g):
            if self.requires_grad:
                self._accum(g.T)

        return Tensor._make(self.data.T, (self,), backward)

    @property
    def T(self):
        return self.transpose()

    def reshape(self, *shape):
        old_shape = self.data.shape

        def backward(g):
            if self.requires_grad:
                self._accum(g.reshape(old_shape))

        return Tensor._make(self.data.reshape(*shape), (self,), backward)

    def __getitem__(self, key):
        out_data = self.data[key]

        def backward(g):
            if self.requires_grad:
                acc = np.zeros_like(self.data)
                acc[key] = g
                self._accum(acc)

        return Tensor._make(out_data, (self,), backward)

    # -- graph traversal --------------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``.

        ``self`` must be a finite scalar.
        """
        if self.data.shape != ():
            raise ValueError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if not np.isfinite(self.data):
            raise FloatingPointError(
                f"non-finite loss value {self.data!r}"
                + (f" at node {self.name!r}" if self.name else "")
            )
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def concat(tensors, axis=0):
    """Concatenate tensors along ``axis``."""
    tensors = [Tensor._coerce(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return Tensor._make(out_data, tuple(tensors), backward)


def stack_rows(tensors):
    """Stack 1-D tensors into a matrix (rows)."""
    return concat([t.reshape(1, -1) for t in tensors], axis=0)


def check_gradients(build_loss, params, eps: float = 1e-5, rel_tol: float = 1e-4,
                    max_entries: int | None = None, rng=None) -> float:
    """Compare analytic gradients with central finite differences.

    ``build_loss()`` must return a scalar Tensor computed from ``params``
    (a name -> Tensor mapping). Returns the worst relative error; raises
    AssertionError when any checked entry exceeds ``rel_tol``.
    """
    for p in params.values():
        p.zero_grad()
    loss = build_loss()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idxs = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            up = build_loss().item()
            flat[i] = orig - eps
            dn = build_loss().item()
            flat[i] = orig
            numeric = (up - dn) / (2 * eps)
            got = analytic[name].reshape(-1)[i]
            # floor sits above central-difference noise so zero grads pass
            scale = max(abs(numeric), abs(got), 1e-6)
            err = abs(numeric - got) / scale
            worst = max(worst, err)
            if err > rel_tol:
                raise AssertionError(
                    f"gradient mismatch for {name}[{i}]: analytic {got:.8g} vs "
                    f"finite-difference {numeric:.8g} (rel err {err:.3g})"
                )
    return worst
