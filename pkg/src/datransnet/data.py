"""Synthetic infrared small-target scenes, binary PGM IO and dataset directories.

A dataset directory holds ``images/<id>.pgm`` and ``masks/<id>.pgm`` pairs,
and optionally a ``manifest.csv`` (``id,n_targets,seed``) written by the
synthesiser.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .tensor import Tensor

PathLike = Union[str, Path]


@dataclass(frozen=True)
class SyntheticSceneSpec:
    height: int = 64
    width: int = 64
    n_targets: tuple[int, int] = (1, 3)
    target_sigma: tuple[float, float] = (0.7, 2.5)
    target_intensity: tuple[float, float] = (0.35, 0.7)
    background: str = "cloud"  # flat | gradient | cloud
    background_level: tuple[float, float] = (0.1, 0.35)
    background_contrast: float = 0.25
    noise_sigma: float = 0.02
    clutter_blobs: tuple[int, int] = (0, 2)
    clutter_sigma: tuple[float, float] = (3.0, 6.0)
    clutter_intensity: tuple[float, float] = (0.05, 0.2)
    seed: int = 0
    # explicit (row, col, sigma, peak) targets; overrides the random draw
    targets: Optional[tuple[tuple[float, float, float, float], ...]] = None

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ValueError(f"scene size must be positive, got {self.height}x{self.width}")
        if self.background not in ("flat", "gradient", "cloud"):
            raise ValueError(f"unknown background {self.background!r}")
        lo, hi = self.n_targets
        if not 0 <= lo <= hi:
            raise ValueError(f"bad target count range {self.n_targets}")
        if not 0 < self.target_sigma[0] <= self.target_sigma[1]:
            raise ValueError(f"target sigma must be positive, got {self.target_sigma}")
        if not 0 < self.target_intensity[0] <= self.target_intensity[1] <= 1:
            raise ValueError(f"target intensities must lie in (0, 1], got {self.target_intensity}")
        for row, col, sigma, peak in self.targets or ():
            if sigma <= 0 or not 0 < peak <= 1:
                raise ValueError(f"explicit target needs sigma > 0 and peak in (0, 1], got {sigma}, {peak}")
        margin = 2 * math.ceil(2 * self.target_sigma[1]) + 1
        if hi and (self.height < margin or self.width < margin):
            raise ValueError(f"{self.height}x{self.width} frame cannot hold sigma {self.target_sigma[1]} targets")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


@dataclass
class Sample:
    image: np.ndarray  # (1, h, w) in [0, 1]
    mask: np.ndarray  # (1, h, w) in {0, 1}
    id: str = ""
    n_targets: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.image.shape != self.mask.shape:
            raise ValueError(f"sample {self.id}: image {self.image.shape} vs mask {self.mask.shape}")


def _uniform(rng: np.random.Generator, bounds: Sequence[float]) -> float:
    lo, hi = bounds
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def _value_noise(rng: np.random.Generator, h: int, w: int, octaves: int = 3) -> np.ndarray:
    """Sum of bilinearly upsampled random grids at doubling frequencies, scaled to [0, 1]."""
    total = np.zeros((h, w))
    amp = 1.0
    for octave in range(octaves):
        cells = 2 ** (octave + 1)
        grid = rng.uniform(0.0, 1.0, size=(cells + 1, cells + 1))
        ys = np.linspace(0, cells, h)
        xs = np.linspace(0, cells, w)
        y0 = np.minimum(ys.astype(int), cells - 1)
        x0 = np.minimum(xs.astype(int), cells - 1)
        fy = (ys - y0)[:, None]
        fx = (xs - x0)[None, :]
        g00 = grid[np.ix_(y0, x0)]
        g01 = grid[np.ix_(y0, x0 + 1)]
        g10 = grid[np.ix_(y0 + 1, x0)]
        g11 = grid[np.ix_(y0 + 1, x0 + 1)]
        total += amp * ((1 - fy) * ((1 - fx) * g00 + fx * g01) + fy * ((1 - fx) * g10 + fx * g11))
        amp *= 0.5
    lo, hi = total.min(), total.max()
    return (total - lo) / (hi - lo) if hi > lo else np.zeros((h, w))


def _background(spec: SyntheticSceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    level = _uniform(rng, spec.background_level)
    if spec.background == "flat":
        return np.full((h, w), level)
    if spec.background == "gradient":
        angle = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        ramp = np.cos(angle) * yy / max(h - 1, 1) + np.sin(angle) * xx / max(w - 1, 1)
        ramp = (ramp - ramp.min()) / (np.ptp(ramp) or 1.0)
        return level + spec.background_contrast * ramp
    return level + spec.background_contrast * _value_noise(rng, h, w)


def _gaussian(h: int, w: int, cy: float, cx: float, sigma: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))


def generate_scene(spec: SyntheticSceneSpec, sample_id: str = "") -> Sample:
    """Background + clutter + Gaussian targets + noise, clipped to [0, 1].

    The mask marks pixels where a target's own contribution reaches half its
    peak, i.e. a disc of radius ``sigma * sqrt(2 ln 2)`` around each centre.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    image = _background(spec, rng)
    for _ in range(int(rng.integers(spec.clutter_blobs[0], spec.clutter_blobs[1] + 1))):
        s = _uniform(rng, spec.clutter_sigma)
        image += _uniform(rng, spec.clutter_intensity) * _gaussian(
            h, w, rng.uniform(0, h - 1), rng.uniform(0, w - 1), s
        )
    if spec.targets is not None:
        targets = list(spec.targets)
    else:
        targets = []
        for _ in range(int(rng.integers(spec.n_targets[0], spec.n_targets[1] + 1))):
            sigma = _uniform(rng, spec.target_sigma)
            margin = math.ceil(2 * sigma)
            cy = rng.uniform(margin, h - 1 - margin)
            cx = rng.uniform(margin, w - 1 - margin)
            targets.append((cy, cx, sigma, _uniform(rng, spec.target_intensity)))
    mask = np.zeros((h, w), dtype=bool)
    for cy, cx, sigma, peak in targets:
        profile = _gaussian(h, w, cy, cx, sigma)
        image += peak * profile
        mask |= profile >= 0.5
    if spec.noise_sigma > 0:
        image += rng.normal(0.0, spec.noise_sigma, size=(h, w))
    image = np.clip(image, 0.0, 1.0)
    return Sample(image[None], mask[None].astype(np.float64), sample_id, len(targets), spec.seed)


def synthesize(spec: SyntheticSceneSpec, count: int, prefix: str = "scene") -> list[Sample]:
    """``count`` scenes; scene ``i`` uses seed ``spec.seed ^ i``."""
    width = max(4, len(str(max(count - 1, 0))))
    return [
        generate_scene(replace(spec, seed=spec.seed ^ i), f"{prefix}_{i:0{width}d}")
        for i in range(count)
    ]


# PGM ------------------------------------------------------------------------


class PgmError(ValueError):
    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def encode_pgm(image) -> bytes:
    """P5 bytes for an (h, w) or (1, h, w) array in [0, 1]; values round half up."""
    a = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ValueError(f"PGM needs a single-channel image, got shape {a.shape}")
    if not np.all(np.isfinite(a)) or a.min() < 0.0 or a.max() > 1.0:
        raise ValueError("PGM pixel values must lie in [0, 1]")
    levels = np.floor(a * 255.0 + 0.5).astype(np.uint8)
    h, w = a.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + levels.tobytes()


def save_pgm(image, path: PathLike) -> None:
    Path(path).write_bytes(encode_pgm(image))


def _skip_blank(blob: bytes, pos: int) -> int:
    while pos < len(blob):
        if blob[pos] == ord("#"):
            while pos < len(blob) and blob[pos] not in b"\r\n":
                pos += 1
        elif chr(blob[pos]).isspace():
            pos += 1
        else:
            break
    return pos


def decode_pgm(blob: bytes) -> np.ndarray:
    """Parse P5 bytes (maxval 255) into an (h, w) float array in [0, 1]."""
    if blob[:2] != b"P5":
        raise PgmError(f"unsupported format {blob[:2]!r}, only binary P5 is accepted", 0)
    pos = 2
    fields = {}
    for name in ("width", "height", "maxval"):
        start = pos
        pos = _skip_blank(blob, pos)
        if pos == start:
            raise PgmError(f"malformed header: expected whitespace before {name}", pos)
        tok = pos
        while pos < len(blob) and chr(blob[pos]).isdigit():
            pos += 1
        if pos == tok:
            raise PgmError(f"malformed header: {name} is not a decimal number", tok)
        fields[name] = (int(blob[tok:pos]), tok)
    if pos >= len(blob) or not chr(blob[pos]).isspace():
        raise PgmError("malformed header: maxval must be followed by one whitespace byte", pos)
    pos += 1
    (w, w_at), (h, _), (maxval, mv_at) = fields["width"], fields["height"], fields["maxval"]
    if w < 1 or h < 1:
        raise PgmError(f"bad image size {w}x{h}", w_at)
    if maxval != 255:
        raise PgmError(f"unsupported maxval {maxval}, only 255 is accepted", mv_at)
    need = w * h
    if len(blob) - pos < need:
        raise PgmError(f"truncated payload: need {need} bytes, found {len(blob) - pos}", len(blob))
    return np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos).reshape(h, w) / 255.0


def load_pgm(path: PathLike) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


# dataset directories -----------------------------------------------------------


class DatasetError(ValueError):
    pass


def load_dataset_dir(root: PathLike) -> list[Sample]:
    """Matched ``images/`` and ``masks/`` PGM pairs in lexicographic id order; masks binarised at 0.5."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    ids = {}
    for kind in ("images", "masks"):
        d = root / kind
        ids[kind] = {p.stem for p in d.glob("*.pgm")} if d.is_dir() else set()
    orphans = sorted(ids["images"] ^ ids["masks"])
    if orphans:
        which = "mask" if orphans[0] in ids["images"] else "image"
        raise DatasetError(f"sample {orphans[0]} has no {which} in {root}")
    samples = []
    for sid in sorted(ids["images"]):
        img = load_pgm(root / "images" / f"{sid}.pgm")
        mask = load_pgm(root / "masks" / f"{sid}.pgm")
        if img.shape != mask.shape:
            raise DatasetError(f"sample {sid}: image {img.shape} and mask {mask.shape} differ")
        samples.append(Sample(img[None], (mask[None] >= 0.5).astype(np.float64), sid))
    return samples


MANIFEST_HEADER = ("id", "n_targets", "seed")


def write_dataset_dir(samples: Sequence[Sample], root: PathLike) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_pgm(s.image, root / "images" / f"{s.id}.pgm")
        save_pgm(s.mask, root / "masks" / f"{s.id}.pgm")
    with open(root / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for s in samples:
            writer.writerow((s.id, s.n_targets, s.seed))


def read_manifest(root: PathLike) -> list[dict]:
    with open(Path(root) / "manifest.csv", newline="") as fh:
        return list(csv.DictReader(fh))
