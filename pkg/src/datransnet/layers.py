"""Parameter containers and the two trainable primitives (conv, dense)."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    def __init__(self, data) -> None:
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Parameter:
    bound = 1.0 / np.sqrt(fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape))


class Module:
    """Base class; parameters are discovered from instance attributes in definition order."""

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
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

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


class Conv2d(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        c_in: int,
        c_out: int,
        kernel: int = 1,
        dilation: int = 1,
        bias: bool = True,
    ) -> None:
        fan_in = c_in * kernel * kernel
        self.weight = uniform_init(rng, (c_out, c_in, kernel, kernel), fan_in)
        self.bias: Optional[Parameter] = uniform_init(rng, (c_out,), fan_in) if bias else None
        self.dilation = dilation
        self.padding = dilation * (kernel // 2)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.dilation, self.padding)


class Linear(Module):
    """Dense layer on (n, c_in) rows."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int) -> None:
        self.weight = uniform_init(rng, (c_in, c_out), c_in)
        self.bias = uniform_init(rng, (1, c_out), c_in)

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + T.expand(self.bias, y.shape)
