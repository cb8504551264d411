"""Eight-direction edge differences and central difference convolution (CDC).

A CDC output is a weighted sum, over input channels and the eight dilated
neighbours, of ``neighbour - centre``. With spatially uniform weights it
factors into three steps: take the differences (:func:`diff`), lay them out
as one row per (channel, direction) token (:func:`flatten_tokens`), and
multiply by a ``c_o x 8*c_inp`` weight matrix (:func:`apply_static_cdc`).
:func:`cdc_direct` evaluates the double sum literally and serves as the
reference for that factorisation.

Directions are numbered row-major over the 3x3 neighbourhood with the centre
skipped::

    0 1 2
    3 . 4
    5 6 7
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

DIRECTIONS = ("up-left", "up", "up-right", "left", "right", "down-left", "down", "down-right")
N_DIRECTIONS = 8


def neighbor_offsets(dilation: int) -> list[tuple[int, int]]:
    n = dilation
    return [(dy * n, dx * n) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]


@dataclass(frozen=True)
class EdgeKernelBank:
    """The fixed difference kernels at one dilation.

    ``border="zero"`` zero-pads the input, so a neighbour outside the frame
    reads as 0. ``border="center"`` instead treats such a neighbour as equal
    to the centre, which keeps every difference of a constant image at 0.
    """

    dilation: int = 1
    border: str = "zero"

    def __post_init__(self) -> None:
        if self.dilation < 1:
            raise ValueError(f"dilation must be positive, got {self.dilation}")
        if self.border not in ("zero", "center"):
            raise ValueError(f"unknown border mode {self.border!r}")

    @property
    def offsets(self) -> list[tuple[int, int]]:
        return neighbor_offsets(self.dilation)

    @property
    def kernels(self) -> np.ndarray:
        """(8, 2n+1, 2n+1): +1 at the neighbour tap, -1 at the centre."""
        n = self.dilation
        k = np.zeros((N_DIRECTIONS, 2 * n + 1, 2 * n + 1))
        for j, (dy, dx) in enumerate(self.offsets):
            k[j, n + dy, n + dx] = 1.0
            k[j, n, n] = -1.0
        return k

    def conv_weight(self, c_inp: int) -> np.ndarray:
        """Dense (8*c_inp, c_inp, 2n+1, 2n+1) kernel equivalent to :func:`diff`."""
        k = self.kernels
        w = np.zeros((N_DIRECTIONS * c_inp, c_inp) + k.shape[1:])
        for i in range(c_inp):
            w[i * N_DIRECTIONS : (i + 1) * N_DIRECTIONS, i] = k
        return w


def diff(image: Tensor, bank: EdgeKernelBank) -> Tensor:
    """(…, c_inp, h, w) -> (…, 8*c_inp, h, w); channel ``i*8 + j`` is direction ``j`` of channel ``i``."""
    return T.neighbor_diff(image, bank.offsets, bank.border)


def flatten_tokens(d: Tensor) -> Tensor:
    """Collapse the two spatial axes row-major: (…, k, h, w) -> (…, k, h*w)."""
    return T.reshape(d, d.shape[:-2] + (d.shape[-2] * d.shape[-1],))


@dataclass
class StaticCdcWeights:
    """``c_o x 8*c_inp`` matrix; column ``i*8 + j`` weights direction ``j`` of input channel ``i``."""

    matrix: Tensor

    def __post_init__(self) -> None:
        if not isinstance(self.matrix, Tensor):
            self.matrix = Tensor(self.matrix)
        m = self.matrix
        if m.ndim != 2 or m.shape[1] % N_DIRECTIONS:
            raise DimensionError(f"CDC weight matrix must be c_o x 8*c_inp, got {m.shape}")
        if not np.all(np.isfinite(m.data)):
            raise ValueError("CDC weight matrix has non-finite entries")

    @property
    def c_out(self) -> int:
        return self.matrix.shape[0]

    @property
    def c_inp(self) -> int:
        return self.matrix.shape[1] // N_DIRECTIONS


def apply_static_cdc(weights: StaticCdcWeights, tokens: Tensor, h: int, w: int) -> Tensor:
    """Multiply the token matrix by ``M_w`` and restore the spatial layout."""
    m = weights.matrix
    if tokens.shape[-2] != m.shape[1] or tokens.shape[-1] != h * w:
        raise DimensionError(
            f"apply_static_cdc: weights {m.shape} cannot consume tokens {tokens.shape} "
            f"as a {h}x{w} map"
        )
    out = T.matmul(m, tokens) if tokens.ndim == 2 else T.project(m, tokens)
    return T.reshape(out, out.shape[:-1] + (h, w))


def cdc_direct(
    image, weights: StaticCdcWeights, dilation: int, border: str = "zero"
) -> Tensor:
    """Literal CDC double sum with spatially uniform weights.

    ``image`` is (c_inp, h, w). Loops over input channels and directions and
    accumulates ``weight * (neighbour - centre)`` without any of the
    diff/flatten/matmul machinery.
    """
    x = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != weights.c_inp:
        raise DimensionError(f"cdc_direct: image {x.shape} does not match weights {weights.matrix.shape}")
    c_inp, h, w = x.shape
    wm = weights.matrix.data
    n = dilation
    padded = np.zeros((c_inp, h + 2 * n, w + 2 * n))
    padded[:, n : n + h, n : n + w] = x
    out = np.zeros((weights.c_out, h, w))
    for i in range(c_inp):
        centre = x[i]
        for j, (dy, dx) in enumerate(neighbor_offsets(n)):
            neighbour = padded[i, n + dy : n + dy + h, n + dx : n + dx + w]
            delta = neighbour - centre
            if border == "center":
                inside = np.zeros((h, w), dtype=bool)
                inside[max(0, -dy) : h - max(0, dy), max(0, -dx) : w - max(0, dx)] = True
                delta = np.where(inside, delta, 0.0)
            for c in range(weights.c_out):
                out[c] += wm[c, i * N_DIRECTIONS + j] * delta
    return Tensor(out)
