"""Dynamic attention transformer (DATrans) heads and layer.

A head attends from ``c_o/m`` query channels (projections of the raw input)
to ``8*c_inp/m`` key tokens built from edge differences. The attention matrix
``M`` therefore mixes (channel, direction) tokens rather than pixels, and
``M @ V = (M @ W_V) @ T``: the head is a CDC whose weight matrix
``M_mix = M @ W_V`` is recomputed for every input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .edgecdc import N_DIRECTIONS, EdgeKernelBank, diff, flatten_tokens
from .layers import Conv2d, Module, uniform_init
from .tensor import DimensionError, Tensor


@dataclass
class HeadTrace:
    """Intermediates of one head evaluation, batched on the leading axis."""

    tokens: Tensor  # T^n, (n, 8c, hw)
    query: Tensor
    key: Tensor
    value: Tensor
    attention: Tensor  # M, (n, c_o/m, 8c/m)
    output: Tensor  # (n, c_o/m, hw)


class DATransHead(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        c_inp: int,
        c_out: int,
        heads: int,
        dilation: int,
        border: str = "zero",
        norm_eps: float = 1e-5,
    ) -> None:
        if c_out % heads or (N_DIRECTIONS * c_inp) % heads:
            raise DimensionError(
                f"c_out={c_out} and 8*c_inp={N_DIRECTIONS * c_inp} must both be divisible by heads={heads}"
            )
        self.c_inp, self.c_out, self.heads = c_inp, c_out, heads
        self.bank = EdgeKernelBank(dilation, border)
        self.norm_eps = norm_eps
        q_rows, kv_rows, tok = c_out // heads, N_DIRECTIONS * c_inp // heads, N_DIRECTIONS * c_inp
        self.w_q = uniform_init(rng, (q_rows, c_inp), c_inp)
        self.w_k = uniform_init(rng, (kv_rows, tok), tok)
        self.w_v = uniform_init(rng, (kv_rows, tok), tok)

    @property
    def dilation(self) -> int:
        return self.bank.dilation

    def trace(self, image: Tensor) -> HeadTrace:
        x, squeeze = _batched(image)
        n, c, h, w = x.shape
        if c != self.c_inp:
            raise DimensionError(f"head expects {self.c_inp} input channels, got {c}")
        o = T.reshape(x, (n, c, h * w))
        tokens = flatten_tokens(diff(x, self.bank))
        q = T.project(self.w_q, o)
        k = T.project(self.w_k, tokens)
        v = T.project(self.w_v, tokens)
        sim = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / w)
        attn = T.softmax(T.instance_norm(sim, axes=(-2, -1), eps=self.norm_eps), axis=-1)
        out = T.matmul(attn, v)
        if squeeze:
            tokens, q, k, v, attn, out = (
                T.reshape(t, t.shape[1:]) for t in (tokens, q, k, v, attn, out)
            )
        return HeadTrace(tokens, q, k, v, attn, out)

    def forward(self, image: Tensor) -> Tensor:
        """(…, c_inp, h, w) -> (…, c_out/m, h*w), forming Q, K and V explicitly."""
        return self.trace(image).output

    def forward_mixed(self, image: Tensor) -> Tensor:
        """Same value as :meth:`forward`, evaluated as ``((Q T^T) W_K^T)`` and ``(M W_V) T``.

        Never materialises K or V, which are 8x wider than Q.
        """
        x, squeeze = _batched(image)
        n, c, h, w = x.shape
        if c != self.c_inp:
            raise DimensionError(f"head expects {self.c_inp} input channels, got {c}")
        tokens = flatten_tokens(diff(x, self.bank))
        q = T.project(self.w_q, T.reshape(x, (n, c, h * w)))
        qt = T.matmul(q, T.swap_last(tokens))
        sim = T.scale(T.matmul(qt, _shared(T.swap_last(self.w_k), n)), 1.0 / w)
        attn = T.softmax(T.instance_norm(sim, axes=(-2, -1), eps=self.norm_eps), axis=-1)
        out = T.matmul(T.matmul(attn, _shared(self.w_v, n)), tokens)
        return T.reshape(out, out.shape[1:]) if squeeze else out

    def dynamic_matrix(self, image: Tensor) -> Tensor:
        """Input-dependent CDC weights ``M_mix = M @ W_V``: (…, c_out/m, 8*c_inp)."""
        attn = self.trace(image).attention
        if attn.ndim == 2:
            return T.matmul(attn, self.w_v)
        return T.matmul(attn, _shared(self.w_v, attn.shape[0]))


class DATransLayer(Module):
    """Multi-head DATrans: one head per dilation, concatenated and fused by a 1x1 conv."""

    def __init__(
        self,
        rng: np.random.Generator,
        c_inp: int,
        c_out: int,
        dilations: Sequence[int] = (1, 3),
        border: str = "zero",
        reassociate: bool = True,
    ) -> None:
        if not dilations:
            raise ValueError("DATransLayer needs at least one head")
        m = len(dilations)
        self.heads = [DATransHead(rng, c_inp, c_out, m, d, border) for d in dilations]
        self.fuse = Conv2d(rng, c_out, c_out, kernel=1)
        self.c_out = c_out
        self.reassociate = reassociate

    def forward(self, image: Tensor) -> Tensor:
        x, squeeze = _batched(image)
        n, _, h, w = x.shape
        outs = [h_.forward_mixed(x) if self.reassociate else h_(x) for h_ in self.heads]
        joined = outs[0] if len(outs) == 1 else T.concat(outs, axis=1)
        y = self.fuse(T.reshape(joined, (n, self.c_out, h, w)))
        return T.reshape(y, y.shape[1:]) if squeeze else y


def _shared(w: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of a weight matrix so it can join a batched matmul."""
    return T.expand(T.reshape(w, (1,) + w.shape), (n,) + w.shape)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected (c, h, w) or (n, c, h, w), got {x.shape}")
    return x, False


def head_forward(head: DATransHead, image: Tensor) -> Tensor:
    return head(image)


def dynamic_matrix(head: DATransHead, image: Tensor) -> Tensor:
    return head.dynamic_matrix(image)


def layer_forward(layer: DATransLayer, image: Tensor) -> Tensor:
    return layer(image)

