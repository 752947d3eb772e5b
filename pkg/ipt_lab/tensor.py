"""Tensors, parameters and the reverse-mode tape."""

import contextvars
import logging
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

log = logging.getLogger("ipt-lab")

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("ipt_active_tape", default=None)


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    ``node`` points at the tape entry that produced this tensor; leaves have
    ``node is None``.
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None):
        self.data: np.ndarray = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node: Optional["Node"] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.ravel()

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        self.grad = g.copy() if self.grad is None else self.grad + g

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{req}{nm})"

    # operator sugar; implementations live in ops
    def __add__(self, other): from . import ops; return ops.add(self, other)
    def __radd__(self, other): from . import ops; return ops.add(other, self)
    def __sub__(self, other): from . import ops; return ops.sub(self, other)
    def __rsub__(self, other): from . import ops; return ops.sub(other, self)
    def __mul__(self, other): from . import ops; return ops.mul(self, other)
    def __rmul__(self, other): from . import ops; return ops.mul(other, self)
    def __neg__(self): from . import ops; return ops.neg(self)
    def __matmul__(self, other): from . import ops; return ops.matmul(self, other)
    def __getitem__(self, key): from . import ops; return ops.take(self, key)

    @property
    def T(self) -> "Tensor":
        from . import ops
        return ops.transpose(self)


class Parameter:
    """Named trainable (or frozen) tensor.

    Freezing clears ``requires_grad`` on the wrapped tensor, so the tensor
    never accumulates a gradient; gradients still flow through the ops that
    consume it to any upstream node that does require one.
    """

    __slots__ = ("name", "tensor", "_frozen")

    def __init__(self, name: str, tensor: Tensor, frozen: bool = False):
        self.name = name
        self.tensor = tensor
        self._frozen = False
        self.frozen = frozen

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self._frozen = bool(value)
        self.tensor.requires_grad = not self._frozen
        if self._frozen:
            self.tensor.grad = None

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tensor.grad

    @property
    def size(self) -> int:
        return int(self.tensor.data.size)

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.tensor.shape}, frozen={self._frozen})"


class Node:
    """One recorded operation: inputs, output and the vector-Jacobian product."""

    __slots__ = ("op", "inputs", "output", "vjp", "index", "tape")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]], index: int, tape: "Tape"):
        self.tape = tape
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.vjp = vjp
        self.index = index


class Tape:
    """Ordered record of differentiable operations.

    Operations executed inside ``with Tape():`` are appended in execution
    order, which is a topological order of the graph; ``backward`` replays
    them in reverse. A tape can be replayed once.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.consumed = False
        self._token: Optional[contextvars.Token] = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor,
               vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> None:
        if self.consumed:
            raise RuntimeError("cannot record onto a tape that has already been replayed")
        node = Node(op, inputs, output, vjp, len(self.nodes), self)
        output.node = node
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1 or loss.data.ndim > 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise RuntimeError("double backward is not supported; run a fresh forward pass")
        if loss.node is None or loss.node.tape is not self:
            raise ValueError("loss was not produced on this tape")
        self.consumed = True
        pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss.node.index + 1]):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            node.output.grad = g
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.node is None:
                    inp.accumulate(gi)
                else:
                    key = id(inp)
                    pending[key] = gi if key not in pending else pending[key] + gi


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def backward(loss: Tensor) -> None:
    """Fill ``grad`` on every requires-grad tensor that ``loss`` depends on."""
    if loss.node is None:
        raise ValueError("loss has no recorded history; compute it inside a Tape")
    loss.node.tape.backward(loss)
