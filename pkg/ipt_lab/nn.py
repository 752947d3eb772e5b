"""Parameter containers and the small layers the models are built from."""

import logging
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import ops
from .tensor import Parameter, Tensor

log = logging.getLogger("ipt-lab")


class Module:
    """Walks its attributes for parameters and sub-modules in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise ValueError(f"state is missing parameters: {', '.join(missing)}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {p.data.shape}")
            p.tensor.data = value.copy()

    def freeze(self) -> None:
        for p in self.parameters():
            p.frozen = True

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.frozen = False

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(p.size for p in self.parameters() if not (trainable_only and p.frozen))


def param(name: str, data: np.ndarray, frozen: bool = False) -> Parameter:
    return Parameter(name, Tensor(data, name=name), frozen=frozen)


def normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Linear(Module):
    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, std: Optional[float] = None):
        std = (1.0 / np.sqrt(d_in)) if std is None else std
        self.weight = param(f"{name}.weight", normal(rng, (d_in, d_out), std))
        self.bias = param(f"{name}.bias", np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight.tensor)
        return ops.add(y, self.bias.tensor) if self.bias is not None else y

    def named_parameters(self, prefix: str = ""):
        yield f"{prefix}weight", self.weight
        if self.bias is not None:
            yield f"{prefix}bias", self.bias


class LayerNorm(Module):
    def __init__(self, name: str, dim: int, eps: float = 1e-5):
        self.gamma = param(f"{name}.gamma", np.ones(dim))
        self.beta = param(f"{name}.beta", np.zeros(dim))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma.tensor, self.beta.tensor, self._eps)


class Conv1d(Module):
    def __init__(self, name: str, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, padding: int = 0):
        self.weight = param(f"{name}.weight", normal(rng, (kernel, c_in, c_out), 1.0 / np.sqrt(kernel * c_in)))
        self.bias = param(f"{name}.bias", np.zeros(c_out))
        self._padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv1d(x, self.weight.tensor, self.bias.tensor, padding=self._padding)


class LSTM(Module):
    """Single LSTM layer unrolled over the rows of ``x [T × d_in]``."""

    def __init__(self, name: str, d_in: int, hidden: int, rng: np.random.Generator):
        self.weight = param(f"{name}.weight", normal(rng, (d_in + hidden, 4 * hidden), 1.0 / np.sqrt(d_in + hidden)))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        self.bias = param(f"{name}.bias", b)
        self._hidden = hidden

    def __call__(self, x: Tensor) -> Tensor:
        h = Tensor(np.zeros(self._hidden))
        c = Tensor(np.zeros(self._hidden))
        states = []
        for t in range(x.shape[0]):
            h, c = ops.lstm_cell(ops.take(x, t), h, c, self.weight.tensor, self.bias.tensor)
            states.append(h)
        return ops.stack(states, axis=0)
