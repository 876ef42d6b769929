"""Dense tensors with tape-based reverse-mode automatic differentiation.

Operations are `Function` subclasses. Applying a function while a `Tape` is
active (and at least one input requires gradients) records a `Node` on that
tape. `Tape.backward` replays the recorded nodes in reverse order and
accumulates gradients additively into every tensor that requires them.

All data is stored as 64-bit floats.
"""

import contextvars
import logging
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]

_active_tape: "contextvars.ContextVar[Optional[Tape]]" = contextvars.ContextVar(
    "groupkan_active_tape", default=None
)


class Tensor:
    """A float64 array with an optional accumulated gradient."""

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        array = np.array(data, dtype=np.float64)
        if any(extent < 1 for extent in array.shape):
            raise DimensionError(f"Tensor extents must be >= 1, got shape {array.shape}")

        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape: Optional["Tape"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise DimensionError(
                f"Gradient shape {grad.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = grad.astype(np.float64, copy=True)
        else:
            self.grad = self.grad + grad

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operators dispatch to the functions defined below.

    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return add(as_tensor(other), self)

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(as_tensor(other), self)

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return mul(as_tensor(other), self)

    def __truediv__(self, other: Any) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Any) -> "Tensor":
        return div(as_tensor(other), self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def sum(self, axis: Union[int, Tuple[int, ...], None] = None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Union[int, Tuple[int, ...], None] = None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes: int) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data: ArrayLike):
        super().__init__(data, requires_grad=True)

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape})"


def as_tensor(value: Any) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Node:
    """One recorded operation: its function, inputs and output."""

    __slots__ = ("function", "inputs", "output")

    def __init__(self, function: "Function", inputs: Sequence[Tensor], output: Tensor):
        self.function = function
        self.inputs = tuple(inputs)
        self.output = output


class Tape:
    """Ordered record of operations for one forward pass.

    Nodes are appended as operations execute, so every node's inputs were
    produced by earlier nodes (or are leaves).
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc_info) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, function: "Function", inputs: Sequence[Tensor], output: Tensor) -> None:
        self.nodes.append(Node(function, inputs, output))
        output.tape = self

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if not self.nodes:
            raise ContractError("backward() called on an empty tape")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        tensors: Dict[int, Tensor] = {id(loss): loss}

        for node in reversed(self.nodes):
            grad = grads.pop(id(node.output), None)
            if grad is None:
                continue
            node.output.accumulate_grad(grad)

            input_grads = node.function.backward(grad)
            for tensor, input_grad in zip(node.inputs, input_grads):
                if input_grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                tensors[key] = tensor
                if key in grads:
                    grads[key] = grads[key] + input_grad
                else:
                    grads[key] = input_grad

        # Whatever is left belongs to leaves.
        for key, grad in grads.items():
            tensors[key].accumulate_grad(grad)


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every tensor that contributed to `loss`."""
    if loss.tape is None:
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        raise ContractError("backward() called on a loss that was not recorded on a tape")
    loss.tape.backward(loss)


class Function:
    """Base class for differentiable operations.

    Subclasses implement `forward` on numpy arrays and `backward`, which maps
    the gradient of the output to one gradient (or None) per input.
    """

    def __init__(self, *tensors: Tensor):
        self.tensors = tensors

    def forward(self, *args: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError("Forward pass not implemented for this function")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError("Backward pass not implemented for this function")

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs: Any) -> Tensor:
        func = cls(*tensors)
        out_data = func.forward(*(t.data for t in tensors), **kwargs)

        requires_grad = any(t.requires_grad for t in tensors)
        out = Tensor(out_data, requires_grad=requires_grad)

        tape = _active_tape.get()
        if tape is not None and requires_grad:
            tape.record(func, tensors, out)
        return out

    @staticmethod
    def unbroadcast(grad: np.ndarray, to_shape: Tuple[int, ...]) -> np.ndarray:
        """Sum out broadcast extents so `grad` matches `to_shape`."""
        if grad.shape == to_shape:
            return grad
        while grad.ndim > len(to_shape):
            grad = grad.sum(axis=0)
        for axis, extent in enumerate(to_shape):
            if extent == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad


def broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    """Result shape of a one-sided broadcast between `a` and `b`.

    The smaller operand, left-padded with singleton extents, must equal the
    larger one extent-for-extent or be 1 there.
    """
    if a == b:
        return a

    def fits(small: Tuple[int, ...], large: Tuple[int, ...]) -> bool:
        if len(small) > len(large):
            return False
        padded = (1,) * (len(large) - len(small)) + tuple(small)
        return all(s == 1 or s == l for s, l in zip(padded, large))

    if fits(b, a):
        return a
    if fits(a, b):
        return b
    raise DimensionError(f"Cannot broadcast shapes {a} and {b}")


# Arithmetic


class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        broadcast_shape(a.shape, b.shape)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return self.unbroadcast(grad, self.shapes[0]), self.unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        broadcast_shape(a.shape, b.shape)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return self.unbroadcast(grad, self.shapes[0]), self.unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        broadcast_shape(a.shape, b.shape)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (
            self.unbroadcast(grad * self.b, self.a.shape),
            self.unbroadcast(grad * self.a, self.b.shape),
        )


class Div(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        broadcast_shape(a.shape, b.shape)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        return (
            self.unbroadcast(grad / self.b, self.a.shape),
            self.unbroadcast(-grad * self.a / (self.b * self.b), self.b.shape),
        )


class Neg(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        return -a

    def backward(self, grad):
        return (-grad,)


def add(a: Any, b: Any) -> Tensor:
    return Add.apply(as_tensor(a), as_tensor(b))


def sub(a: Any, b: Any) -> Tensor:
    return Sub.apply(as_tensor(a), as_tensor(b))


def mul(a: Any, b: Any) -> Tensor:
    return Mul.apply(as_tensor(a), as_tensor(b))


def div(a: Any, b: Any) -> Tensor:
    return Div.apply(as_tensor(a), as_tensor(b))


def neg(a: Tensor) -> Tensor:
    return Neg.apply(a)


# Reductions and shape manipulation


class Sum(Function):
    def forward(self, a: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
        self.shape = a.shape
        self.axis = axis
        self.keepdims = keepdims
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            axes = (self.axis,) if isinstance(self.axis, int) else self.axis
            axes = tuple(sorted(ax % len(self.shape) for ax in axes))
            for ax in axes:
                grad = np.expand_dims(grad, ax)
        return (np.broadcast_to(grad, self.shape).copy(),)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tensor_sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


class Reshape(Function):
    def forward(self, a: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"Cannot reshape {a.shape} into {tuple(shape)}") from exc

    def backward(self, grad):
        return (grad.reshape(self.shape),)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


class Permute(Function):
    def forward(self, a: np.ndarray, axes: Tuple[int, ...]) -> np.ndarray:
        if sorted(axes) != list(range(a.ndim)):
            raise DimensionError(f"Invalid permutation {axes} for a rank-{a.ndim} tensor")
        self.axes = axes
        return np.ascontiguousarray(np.transpose(a, axes))

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    return Permute.apply(a, axes=tuple(axes))


class Concat(Function):
    def forward(self, *arrays: np.ndarray, axis: int = 0) -> np.ndarray:
        self.axis = axis
        self.sizes = [arr.shape[axis] for arr in arrays]
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError as exc:
            shapes = ", ".join(str(arr.shape) for arr in arrays)
            raise DimensionError(f"Cannot concatenate shapes {shapes} on axis {axis}") from exc

    def backward(self, grad):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def no_tape_call(fn: Callable[..., Tensor], *args: Any, **kwargs: Any) -> Tensor:
    """Evaluate `fn` with no tape active, e.g. for finite differences."""
    token = _active_tape.set(None)
    try:
        return fn(*args, **kwargs)
    finally:
        _active_tape.reset(token)
