"""Tensors, parameters and the reverse-mode tape.

Each differentiable op returns a :class:`Tensor` whose ``_node`` remembers its
inputs, a backward closure and a sequence number drawn from a per-thread
counter. :class:`Tape` collects the nodes reachable from a loss and replays
them in exact reverse order of forward execution. A node is released after
its backward runs, so a second backward over the same graph is refused.
"""

import contextlib
import math
import threading

import numpy as np

from ..errors import NumericError, UsageError

_state = threading.local()


def _local():
    if not hasattr(_state, "grad_enabled"):
        _state.grad_enabled = True
        _state.seq = 0
    return _state


def is_grad_enabled():
    return _local().grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    st = _local()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


def _next_seq():
    st = _local()
    st.seq += 1
    return st.seq


def check_finite(what, arr):
    # one reduction instead of a bool temporary; any NaN/Inf poisons the sum
    if not math.isfinite(float(np.sum(arr))) and not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")


class Node:
    __slots__ = ("op", "parents", "backward_fn", "seq", "released")

    def __init__(self, op, parents, backward_fn):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.seq = _next_seq()
        self.released = False

    def release(self):
        self.backward_fn = None
        self.parents = ()
        self.released = True

    def __repr__(self):
        return f"Node({self.op}, seq={self.seq})"


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode gradients."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return mul(tensor_sum(self), 1.0 / self.size)


class Parameter(Tensor):
    """Trainable leaf tensor; its gradient always exists and matches its shape."""

    def __init__(self, data, name="", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.data = np.ascontiguousarray(self.data)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        if self.grad is None or self.grad.shape != self.data.shape or self.grad.dtype != self.dtype:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def record(op, out_data, parents, backward_fn):
    """Wrap ``out_data`` as an op output and, if needed, attach a tape node.

    ``backward_fn(grad_out)`` must return one gradient (or None) per parent.
    """
    check_finite(f"{op} output", out_data)
    out = Tensor(out_data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(op, tuple(parents), backward_fn)
    return out


class Tape:
    """Ordered record of the operations a loss depends on."""

    def __init__(self, loss):
        if not isinstance(loss, Tensor):
            raise UsageError("backward expects a Tensor")
        if loss.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._node is None:
            raise UsageError("loss was not produced by recorded operations")
        self.loss = loss
        seen = {}
        stack = [loss._node]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            if node.released:
                raise UsageError(
                    f"stale tape: backward already ran through {node.op}; run a new forward first")
            seen[id(node)] = node
            for p in node.parents:
                if p._node is not None:
                    stack.append(p._node)
        # forward execution order; backward walks it reversed
        self.nodes = sorted(seen.values(), key=lambda n: n.seq)

    @property
    def ops(self):
        return [n.op for n in self.nodes]

    def run(self):
        grads = {id(self.loss._node): np.ones_like(self.loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            parents = node.parents
            if g is not None:
                pgrads = node.backward_fn(g)
                for parent, pg in zip(parents, pgrads):
                    if pg is None or not parent.requires_grad:
                        continue
                    check_finite(f"gradient of {node.op}", pg)
                    if parent._node is None:
                        _accumulate_leaf(parent, pg)
                    else:
                        key = id(parent._node)
                        if key in grads:
                            grads[key] = grads[key] + pg
                        else:
                            grads[key] = pg
            node.release()


def _accumulate_leaf(t, g):
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def backward(loss):
    """Populate ``.grad`` of every leaf the scalar ``loss`` depends on."""
    Tape(loss).run()


# elementary arithmetic used by the losses


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return record("add", a.data + b.data, (a, b), bw)


def mul(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        s = a.dtype.type(b)
        return record("scale", a.data * s, (a,), lambda g: (g * s,))
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    return record("mul", ad * bd, (a, b), bw)


def tensor_sum(a):
    shape = a.shape
    dt = a.dtype

    def bw(g):
        return (np.broadcast_to(np.asarray(g, dtype=dt).reshape(()), shape).copy(),)

    return record("sum", np.asarray(a.data.sum(), dtype=dt), (a,), bw)
