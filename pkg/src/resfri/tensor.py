"""Dense tensors and the reverse-mode gradient tape.

Every differentiable primitive in :mod:`resfri.ops` appends one :class:`Node`
to the active :class:`Tape` when grad mode is on and at least one input
requires a gradient.  :func:`backward` walks the tape in reverse execution
order, which is a valid topological order because nodes are only ever
appended after their inputs exist.
"""

import contextlib
import threading
import weakref

import numpy as np

from .errors import ShapeError, UsageError

DEFAULT_DTYPE = np.float32

_local = threading.local()


class Node:
    """One executed primitive: its inputs plus a closure computing input grads."""

    __slots__ = ("inputs", "backward_fn", "op", "consumed", "__weakref__")

    def __init__(self, inputs, backward_fn, op):
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.op = op
        self.consumed = False

    def release(self):
        self.consumed = True
        self.inputs = ()
        self.backward_fn = None


class Tape:
    """Ordered record of executed nodes.

    Nodes are held weakly: a node lives exactly as long as the tensor it
    produced, so forwards that are never differentiated do not leak.
    """

    def __init__(self):
        self._nodes = []

    def record(self, node):
        self._nodes.append(weakref.ref(node))

    def nodes(self):
        return [n for n in (r() for r in self._nodes) if n is not None]

    def __len__(self):
        return len(self.nodes())

    def clear(self):
        for node in self.nodes():
            node.release()
        self._nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


def _tape_stack():
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = [Tape()]
    return stack


def current_tape():
    return _tape_stack()[-1]


def is_grad_enabled():
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    """An N-dimensional array that can participate in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "_tape", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fiub":
            raise TypeError(f"unsupported dtype {arr.dtype}")
        if arr.dtype.kind != "f" and requires_grad:
            raise TypeError("only floating tensors can require gradients")
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self._tape = None
        self.name = name

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

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def make_result(data, inputs, backward_fn, op):
    """Wrap ``data`` as an op output and record it on the tape if needed."""
    out = Tensor(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(tuple(inputs), backward_fn, op)
        tape = current_tape()
        tape.record(node)
        out._node = node
        out._tape = tape
    return out


def backward(loss):
    """Populate ``.grad`` on every leaf that requires a gradient.

    The tape that produced ``loss`` is consumed; a second call raises.
    """
    if not isinstance(loss, Tensor):
        raise UsageError("backward expects a Tensor")
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None:
        raise UsageError("loss was not produced on a gradient tape")
    if node.consumed:
        raise UsageError("tape already consumed; run a new forward before backward")

    tape = loss._tape
    grads = {node: np.ones_like(loss.data)}
    for n in reversed(tape.nodes()):
        g = grads.pop(n, None)
        if g is None or n.consumed:
            continue
        in_grads = n.backward_fn(g)
        for inp, ig in zip(n.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp._node is not None:
                prev = grads.get(inp._node)
                grads[inp._node] = ig if prev is None else prev + ig
            elif inp.grad is None:
                inp.grad = np.array(ig, dtype=inp.dtype, copy=True)
            else:
                inp.grad = inp.grad + ig
    tape.clear()
