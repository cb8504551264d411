"""Global feature extraction: non-local spatial attention and squeeze-excitation.

Both branches see the whole feature map. Their outputs are concatenated
(non-local first) and fused back to ``c`` channels with a 1x1 convolution.
A disabled branch passes its input through unchanged, so the fuse layer
always receives ``2c`` channels.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import Conv2d, Linear, Module
from .tensor import DimensionError, Tensor


class NonLocalBlock(Module):
    """Embedded-Gaussian non-local block over all h*w positions."""

    def __init__(
        self, rng: np.random.Generator, c: int, c_reduced: int | None = None, residual: bool = True
    ) -> None:
        c_reduced = c_reduced or max(1, c // 2)
        if not 1 <= c_reduced <= c:
            raise ValueError(f"reduced width {c_reduced} must lie in [1, {c}]")
        self.reduce_q = Conv2d(rng, c, c_reduced)
        self.reduce_k = Conv2d(rng, c, c_reduced)
        self.reduce_v = Conv2d(rng, c, c_reduced)
        self.expand = Conv2d(rng, c_reduced, c)
        self.residual = residual
        self.c_reduced = c_reduced

    def attention(self, x: Tensor) -> Tensor:
        """Row-stochastic (n, hw, hw) matrix; row p is position p's distribution over positions."""
        n, _, h, w = x.shape
        q = T.reshape(self.reduce_q(x), (n, self.c_reduced, h * w))
        k = T.reshape(self.reduce_k(x), (n, self.c_reduced, h * w))
        return T.softmax(T.matmul(T.swap_last(q), k), axis=-1)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        a = self.attention(x)
        v = T.reshape(self.reduce_v(x), (n, self.c_reduced, h * w))
        y = T.matmul(v, T.swap_last(a))
        y = self.expand(T.reshape(y, (n, self.c_reduced, h, w)))
        return y + x if self.residual else y


class SEBlock(Module):
    def __init__(self, rng: np.random.Generator, c: int, ratio: int = 4) -> None:
        if c % ratio:
            raise ValueError(f"SE channel count {c} is not divisible by ratio {ratio}")
        self.fc1 = Linear(rng, c, c // ratio)
        self.fc2 = Linear(rng, c // ratio, c)

    def gate(self, x: Tensor) -> Tensor:
        """Per-channel gates in (0, 1), shape (n, c)."""
        return T.sigmoid(self.fc2(T.relu(self.fc1(T.global_avg_pool(x)))))

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        g = T.reshape(self.gate(x), (n, c, 1, 1))
        return x * T.expand(g, x.shape)


class GfemLayer(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        c: int,
        enable_nonlocal: bool = True,
        enable_se: bool = True,
        c_reduced: int | None = None,
        se_ratio: int = 4,
        residual: bool = True,
    ) -> None:
        if not (enable_nonlocal or enable_se):
            raise ValueError("GFEM needs at least one of the non-local and SE branches")
        self.nonlocal_ = NonLocalBlock(rng, c, c_reduced, residual) if enable_nonlocal else None
        self.se = SEBlock(rng, c, se_ratio) if enable_se else None
        self.fuse = Conv2d(rng, 2 * c, c)

    @property
    def enable_nonlocal(self) -> bool:
        return self.nonlocal_ is not None

    @property
    def enable_se(self) -> bool:
        return self.se is not None

    def forward(self, x: Tensor) -> Tensor:
        xb = x if x.ndim == 4 else T.reshape(x, (1,) + x.shape)
        if xb.ndim != 4:
            raise DimensionError(f"GFEM expects (c, h, w) or (n, c, h, w), got {x.shape}")
        spatial = self.nonlocal_(xb) if self.nonlocal_ is not None else xb
        channel = self.se(xb) if self.se is not None else xb
        y = self.fuse(T.concat([spatial, channel], axis=1))
        return y if x.ndim == 4 else T.reshape(y, y.shape[1:])


def nonlocal_forward(block: NonLocalBlock, x: Tensor) -> Tensor:
    return _per_sample(block, x)


def se_forward(block: SEBlock, x: Tensor) -> Tensor:
    return _per_sample(block, x)


def gfem_forward(layer: GfemLayer, x: Tensor) -> Tensor:
    return layer(x)


def _per_sample(block: Module, x: Tensor) -> Tensor:
    if x.ndim == 4:
        return block(x)
    y = block(T.reshape(x, (1,) + x.shape))
    return T.reshape(y, y.shape[1:])
