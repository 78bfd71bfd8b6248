"""Tensor container, gradient tape and finite-difference oracle.

Ops in :mod:`msmlp.ops` record themselves on the tape that is active in the
current context (``with GradTape() as tape: ...``).  Tapes are stored in a
``contextvars.ContextVar`` so each thread sees its own tape.
"""

from __future__ import annotations

import contextvars
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_ACTIVE_TAPE: contextvars.ContextVar[Optional["GradTape"]] = contextvars.ContextVar(
    "msmlp_active_tape", default=None
)


class Tensor:
    """A numpy array plus a gradient slot.

    Feature maps are laid out ``(batch, height, width, channel)``.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{label})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "vjp", "op")

    def __init__(self, out, inputs, vjp, op):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.op = op


class GradTape:
    """Ordered record of primitive applications.

    Nodes are appended in execution order, which is already a topological
    order of the computation, so the backward pass just walks the list in
    reverse.  A tape is single-writer: use one per thread.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)

    def record(
        self,
        op: str,
        out: Tensor,
        inputs: Sequence[Tensor],
        vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    ):
        out.requires_grad = True
        self.nodes.append(_Node(out, tuple(inputs), vjp, op))

    def backward(self, loss: Tensor, loss_grad=None) -> dict:
        return backward(self, loss, loss_grad)


def active_tape() -> Optional[GradTape]:
    return _ACTIVE_TAPE.get()


def maybe_record(op: str, out: Tensor, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Record ``out`` on the active tape when any input needs a gradient."""
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, out, inputs, vjp)
    return out


def backward(tape: GradTape, loss: Tensor, loss_grad=None) -> dict:
    """Reverse-mode sweep over ``tape`` starting from ``loss``.

    Every tensor that receives a gradient gets it stored in ``.grad``
    (overwriting any previous value).  Contributions from multiple consumers
    are summed.  Returns a ``{tensor: gradient}`` mapping.
    """
    if not tape.nodes:
        raise RuntimeError("backward called on an empty tape")
    if loss_grad is None:
        if loss.data.size != 1:
            raise ValueError("loss must be a scalar when loss_grad is not given")
        loss_grad = np.ones_like(loss.data)
    loss_grad = np.asarray(loss_grad, dtype=loss.data.dtype)
    if loss_grad.shape != loss.data.shape:
        raise ValueError(f"loss_grad shape {loss_grad.shape} != loss shape {loss.data.shape}")

    grads: dict[int, np.ndarray] = {id(loss): loss_grad}
    owners: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.out))
        if g is None:
            continue
        in_grads = node.vjp(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                owners[key] = t

    result = {}
    for key, t in owners.items():
        t.grad = grads[key]
        result[t] = grads[key]
    return result


def finite_diff_grad(f: Callable[[np.ndarray], float], theta, step: float = 1e-5,
                     indices: Optional[Iterable[int]] = None) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector.

    ``indices`` restricts the estimate to a subset of coordinates; the other
    entries of the result are left at zero.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    theta = np.array(theta, dtype=np.float64, copy=True)
    flat = theta.reshape(-1)
    out = np.zeros_like(flat)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(theta))
        flat[i] = orig - step
        fm = float(f(theta))
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(theta.shape)


def relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
