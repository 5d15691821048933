"""Dense tensors on a reverse-mode differentiation tape.

A ``Tensor`` wraps a contiguous row-major numpy array (float32 or float64).
Operations executed while a ``Tape`` is active append nodes in creation
order, which is automatically a topological order; ``backward`` walks the
node list in reverse and accumulates gradients additively across fan-out.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class ContractViolation(ValueError):
    """An operation was called with arguments that break its contract."""


class Node:
    """One recorded operation: inputs, outputs and how to push gradients back.

    ``backward_fn`` receives one gradient array per output (zeros for outputs
    that did not reach the loss) and returns one gradient array (or None) per
    input, aligned positionally. Returned arrays must be safe for the tape to
    own.
    """

    __slots__ = ("op", "inputs", "outputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple, outputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.outputs = outputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations for one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._index: dict[int, int] = {}

    def append(self, node: Node) -> None:
        self._index[id(node)] = len(self.nodes)
        self.nodes.append(node)

    def position(self, node: Node) -> int:
        return self._index[id(node)]

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE_STACK: list[Tape] = []
_GRAD_DISABLED = 0


def active_tape() -> Optional[Tape]:
    if _GRAD_DISABLED or not _TAPE_STACK:
        return None
    return _TAPE_STACK[-1]


class no_grad:
    """Context manager that suspends recording (inference mode)."""

    def __enter__(self):
        global _GRAD_DISABLED
        _GRAD_DISABLED += 1
        return self

    def __exit__(self, *exc):
        global _GRAD_DISABLED
        _GRAD_DISABLED -= 1


class Tensor:
    """Dense N-dimensional float array, optionally tracked on the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- operator sugar (implementations live in ops.py) -------------------

    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def sum(self, axis=None, keepdims=False):
        from . import ops

        return ops.sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def record(
    op: str,
    inputs: Sequence[Tensor],
    out_data,
    backward_fn: Callable,
    n_outputs: int = 1,
):
    """Create output tensor(s) for an op, recording a node when grad is live.

    ``out_data`` is a single array for single-output ops or a tuple of arrays
    when ``n_outputs > 1``.
    """
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    if n_outputs == 1:
        outputs = (Tensor(out_data, requires_grad=track),)
    else:
        outputs = tuple(Tensor(d, requires_grad=track) for d in out_data)
    if track:
        node = Node(op, tuple(inputs), outputs, backward_fn)
        for out in outputs:
            out.node = node
        tape.append(node)
    return outputs[0] if n_outputs == 1 else outputs


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` for every requires_grad tensor reachable from loss.

    Leaves the loss did not reach keep ``grad is None``; read them through
    ``grad_of`` to get explicit zeros.
    """
    if loss.size != 1:
        raise ContractViolation(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
        return
    tape = _TAPE_STACK[-1] if _TAPE_STACK else None
    if tape is None or id(loss.node) not in tape._index:
        raise ContractViolation("backward called without the tape that recorded the loss")
    loss.grad = np.ones_like(loss.data)
    stop = tape.position(loss.node)
    for node in reversed(tape.nodes[: stop + 1]):
        grads_out = [o.grad for o in node.outputs]
        if all(g is None for g in grads_out):
            continue
        grads_out = [
            g if g is not None else np.zeros_like(o.data)
            for g, o in zip(grads_out, node.outputs)
        ]
        grads_in = node.backward_fn(*grads_out)
        if not isinstance(grads_in, tuple):
            grads_in = (grads_in,)
        for t, g in zip(node.inputs, grads_in):
            if g is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = g
            else:
                t.grad = t.grad + g


def grad_of(t: Tensor) -> np.ndarray:
    """Gradient of ``t`` after backward; zeros when the loss never reached it."""
    if t.grad is None:
        return np.zeros_like(t.data)
    return t.grad


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum out broadcast dimensions so ``grad`` matches ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad
