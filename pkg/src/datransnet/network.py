"""U-Net assembly of DATrans stages with a GFEM bottleneck, plus checkpoint IO."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .datrans import DATransLayer
from .edgecdc import N_DIRECTIONS
from .gfem import GfemLayer
from .layers import Conv2d, Module
from .tensor import DimensionError, Tensor


class ConfigError(ValueError):
    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class NetworkConfig:
    depth: int = 4
    base_channels: int = 16
    dilations: tuple[int, ...] = (1, 3)
    datrans: bool = True
    datrans_in_decoder: bool = True
    gfem_nonlocal: bool = True
    gfem_se: bool = True
    gfem_residual: bool = True
    nonlocal_reduction: int = 2
    se_ratio: int = 4
    border: str = "zero"
    in_channels: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        self.validate()

    @property
    def heads(self) -> int:
        return len(self.dilations)

    @property
    def widths(self) -> list[int]:
        return [self.base_channels * 2**level for level in range(self.depth)]

    @property
    def gfem(self) -> bool:
        return self.gfem_nonlocal or self.gfem_se

    @property
    def multiple(self) -> int:
        return 2**self.depth

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError("depth", f"must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigError("base_channels", f"must be >= 1, got {self.base_channels}")
        if self.in_channels < 1:
            raise ConfigError("in_channels", f"must be >= 1, got {self.in_channels}")
        if not self.dilations or any(d < 1 for d in self.dilations):
            raise ConfigError("dilations", f"need one or more positive rates, got {self.dilations}")
        if self.border not in ("zero", "center"):
            raise ConfigError("border", f"must be 'zero' or 'center', got {self.border!r}")
        if self.datrans:
            m = self.heads
            for c in self.widths:
                if c % m or (N_DIRECTIONS * c) % m:
                    raise ConfigError(
                        "base_channels", f"stage width {c} is not divisible by {m} heads"
                    )
        deepest = self.widths[-1]
        if self.gfem:
            if self.gfem_se and deepest % self.se_ratio:
                raise ConfigError(
                    "se_ratio", f"deepest width {deepest} is not divisible by {self.se_ratio}"
                )
            if self.nonlocal_reduction < 1 or deepest // self.nonlocal_reduction < 1:
                raise ConfigError(
                    "nonlocal_reduction", f"cannot reduce {deepest} channels by {self.nonlocal_reduction}"
                )


class StageBlock(Module):
    """3x3 conv + ReLU, then a residual mixing layer (DATrans or a plain 3x3 conv) + ReLU."""

    def __init__(
        self,
        rng: np.random.Generator,
        c_in: int,
        c: int,
        use_datrans: bool,
        dilations: Sequence[int],
        border: str,
    ) -> None:
        self.conv_in = Conv2d(rng, c_in, c, kernel=3)
        self.mix = DATransLayer(rng, c, c, dilations, border) if use_datrans else Conv2d(rng, c, c, kernel=3)

    def forward(self, x: Tensor) -> Tensor:
        h = T.relu(self.conv_in(x))
        return T.relu(h + self.mix(h))


class DATransNet(Module):
    def __init__(self, config: NetworkConfig) -> None:
        self.config = config
        rng = np.random.default_rng(config.seed)
        widths = config.widths
        c_prev = config.in_channels
        self.stages = []
        for c in widths:
            self.stages.append(
                StageBlock(rng, c_prev, c, config.datrans, config.dilations, config.border)
            )
            c_prev = c
        self.bottleneck: Optional[GfemLayer] = None
        if config.gfem:
            self.bottleneck = GfemLayer(
                rng,
                widths[-1],
                config.gfem_nonlocal,
                config.gfem_se,
                c_reduced=max(1, widths[-1] // config.nonlocal_reduction),
                se_ratio=config.se_ratio,
                residual=config.gfem_residual,
            )
        self.up_convs = []
        self.upstages = []
        below = widths[-1]
        dec_datrans = config.datrans and config.datrans_in_decoder
        for c in reversed(widths):
            self.up_convs.append(Conv2d(rng, below, c, kernel=1))
            self.upstages.append(
                StageBlock(rng, 2 * c, c, dec_datrans, config.dilations, config.border)
            )
            below = c
        self.head = Conv2d(rng, widths[0], 1, kernel=1)

    def logits(self, x: Tensor) -> Tensor:
        skips = []
        for stage in self.stages:
            x = stage(x)
            skips.append(x)
            x = T.max_pool2d(x, 2)
        if self.bottleneck is not None:
            x = self.bottleneck(x)
        for up, block, skip in zip(self.up_convs, self.upstages, reversed(skips)):
            x = up(T.upsample_nearest(x, 2))
            x = block(T.concat([x, skip], axis=1))
        return self.head(x)

    def forward(self, image: Tensor) -> Tensor:
        """(1, h, w) or (n, 1, h, w) in, probability map of the same shape out."""
        if not isinstance(image, Tensor):
            image = Tensor(image)
        single = image.ndim == 3
        x = T.reshape(image, (1,) + image.shape) if single else image
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise DimensionError(
                f"expected ({self.config.in_channels}, h, w) or (n, {self.config.in_channels}, h, w), got {image.shape}"
            )
        m = self.config.multiple
        h, w = x.shape[-2:]
        if h % m or w % m:
            raise DimensionError(f"input {h}x{w} must be a multiple of {m} in both dimensions")
        p = T.sigmoid(self.logits(x))
        return T.reshape(p, p.shape[1:]) if single else p


def build(config: NetworkConfig) -> DATransNet:
    return DATransNet(config)


def forward(net: DATransNet, image: Tensor) -> Tensor:
    return net(image)


def param_count(net: Module) -> int:
    return net.param_count()


def predict(net: DATransNet, images: np.ndarray, batch_size: int = 4) -> np.ndarray:
    """Probability maps for an (n, c, h, w) stack, evaluated without recording a graph."""
    outs = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            outs.append(net(Tensor(images[start : start + batch_size])).data)
    return np.concatenate(outs) if outs else np.zeros((0,) + images.shape[1:])


# checkpoints ---------------------------------------------------------------

MAGIC = b"DATN"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint bytes or a checkpoint that does not fit the network."""

    def __init__(self, message: str, tensor: Optional[str] = None) -> None:
        super().__init__(message)
        self.tensor = tensor


def checkpoint_bytes(net: Module) -> bytes:
    params = list(net.named_parameters())
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, p in params:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", p.ndim))
        chunks.append(struct.pack(f"<{p.ndim}Q", *p.shape))
        chunks.append(p.data.astype("<f4").tobytes())
    return b"".join(chunks)


def save_checkpoint(net: Module, path: Union[str, Path]) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


def read_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    """Parse checkpoint bytes into name -> float64 array, in file order."""
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {pos}")
        out = blob[pos : pos + n]
        pos += n
        return out

    if take(4, "magic") != MAGIC:
        raise CheckpointError("not a DATN checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, f"rank of {name}"))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, f"extents of {name}"))
        n = int(np.prod(shape)) if rank else 1
        payload = np.frombuffer(take(4 * n, f"payload of {name}"), dtype="<f4")
        tensors[name] = payload.astype(np.float64).reshape(shape)
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after the last tensor")
    return tensors


def load_checkpoint(net: Module, path: Union[str, Path]) -> None:
    """Copy checkpoint values into ``net`` after checking every name and shape."""
    tensors = read_checkpoint(Path(path).read_bytes())
    params = dict(net.named_parameters())
    for name, p in params.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint lacks tensor {name}", name)
        if tensors[name].shape != p.shape:
            raise CheckpointError(
                f"tensor {name}: checkpoint shape {tensors[name].shape} != network shape {p.shape}",
                name,
            )
    extra = sorted(set(tensors) - set(params))
    if extra:
        raise CheckpointError(f"checkpoint has tensors the network lacks: {extra[0]}", extra[0])
    for name, p in params.items():
        p.data[...] = tensors[name]
