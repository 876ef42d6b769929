"""Parameter containers shared by every layer."""

from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .errors import DimensionError, FormatVersionError
from .tensor import Parameter, Tensor


class Module:
    """A tree of parameters, buffers and sub-modules.

    `component` tags every parameter below this module for parameter and
    FLOP breakdowns; the nearest tagged ancestor wins.
    """

    component: Optional[str] = None

    def __init__(self):
        self.training = True
        self._buffers: Dict[str, np.ndarray] = {}

    def forward(self, *args, **kwargs) -> Tensor:
        raise NotImplementedError

    def __call__(self, *args, **kwargs) -> Tensor:
        return self.forward(*args, **kwargs)

    def named_children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{index}", item

    def named_parameters(
        self, prefix: str = "", component: Optional[str] = None
    ) -> Iterator[Tuple[str, Parameter, Optional[str]]]:
        """Yield (dotted name, parameter, component) in definition order."""
        component = self.component or component
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value, component
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}{name}.", component)

    def parameters(self) -> List[Parameter]:
        return [param for _, param, _ in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def num_parameters(self) -> int:
        return sum(param.size for param in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.named_children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: param.data.copy() for name, param, _ in self.named_parameters()}
        for name, buffer in self.named_buffers():
            state[name] = buffer.copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        if set(state) != expected:
            missing = sorted(expected - set(state))
            unexpected = sorted(set(state) - expected)
            raise FormatVersionError(
                f"State does not match module: missing {missing}, unexpected {unexpected}"
            )
        for name, param, _ in self.named_parameters():
            _check_shape(name, param.data, state[name])
            param.data = np.array(state[name], dtype=np.float64)
        self._load_buffers(state, "")

    def _load_buffers(self, state: Dict[str, np.ndarray], prefix: str) -> None:
        for name in self._buffers:
            _check_shape(prefix + name, self._buffers[name], state[prefix + name])
            self._buffers[name] = np.array(state[prefix + name], dtype=np.float64)
        for name, child in self.named_children():
            child._load_buffers(state, f"{prefix}{name}.")


def _check_shape(name: str, current: np.ndarray, new: np.ndarray) -> None:
    if current.shape != np.shape(new):
        raise DimensionError(f"{name}: expected shape {current.shape}, got {np.shape(new)}")


def uniform_fan_in(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> Parameter:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization."""
    bound = 1.0 / np.sqrt(fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape))
