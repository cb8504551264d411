"""Flat ``key = value`` run configuration.

Keys carry a section prefix (``net.``, ``train.``, ``data.``, ``paths.``)
except the shared ``seed``. Blank lines and ``#`` comments are ignored.
Every key is checked against :data:`SCHEMA`; unknown keys, malformed values
and values the owning config rejects all raise :class:`ConfigError` naming
the key. A minimal file::

    seed = 7
    net.depth = 2
    net.base_channels = 8
    net.dilations = 1,3
    train.epochs = 5
    data.train_count = 16
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Union

from .data import SyntheticSceneSpec
from .network import ConfigError, NetworkConfig
from .training import TrainConfig


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _int_range(text: str) -> tuple[int, int]:
    lo, hi = _ints(text)
    return lo, hi


def _float_range(text: str) -> tuple[float, float]:
    lo, hi = (float(t) for t in text.split(","))
    return lo, hi


def _path(text: str) -> Optional[Path]:
    return Path(text.strip()) if text.strip() else None


@dataclass(frozen=True)
class SynthSettings:
    """How much synthetic data to draw when no dataset directory is given."""

    train_count: int = 200
    val_count: int = 50


@dataclass(frozen=True)
class Paths:
    train: Optional[Path] = None  # dataset dir; synthetic data when unset
    val: Optional[Path] = None
    out: Path = Path("runs/default")


# key -> (section, field, parser); defaults are those of the owning dataclasses
SCHEMA: dict[str, tuple[str, str, Callable[[str], Any]]] = {
    "seed": ("run", "seed", int),
    "net.depth": ("net", "depth", int),
    "net.base_channels": ("net", "base_channels", int),
    "net.dilations": ("net", "dilations", _ints),
    "net.datrans": ("net", "datrans", _bool),
    "net.datrans_in_decoder": ("net", "datrans_in_decoder", _bool),
    "net.gfem_nonlocal": ("net", "gfem_nonlocal", _bool),
    "net.gfem_se": ("net", "gfem_se", _bool),
    "net.gfem_residual": ("net", "gfem_residual", _bool),
    "net.nonlocal_reduction": ("net", "nonlocal_reduction", int),
    "net.se_ratio": ("net", "se_ratio", int),
    "net.border": ("net", "border", str),
    "train.lr0": ("train", "lr0", float),
    "train.drop1_epoch": ("train", "drop1_epoch", int),
    "train.drop1_lr": ("train", "drop1_lr", float),
    "train.drop2_epoch": ("train", "drop2_epoch", int),
    "train.drop2_lr": ("train", "drop2_lr", float),
    "train.epochs": ("train", "epochs", int),
    "train.batch_size": ("train", "batch_size", int),
    "train.threshold": ("train", "threshold", float),
    "train.match_radius": ("train", "match_radius", float),
    "data.height": ("data", "height", int),
    "data.width": ("data", "width", int),
    "data.n_targets": ("data", "n_targets", _int_range),
    "data.target_sigma": ("data", "target_sigma", _float_range),
    "data.target_intensity": ("data", "target_intensity", _float_range),
    "data.background": ("data", "background", str),
    "data.background_level": ("data", "background_level", _float_range),
    "data.background_contrast": ("data", "background_contrast", float),
    "data.noise_sigma": ("data", "noise_sigma", float),
    "data.clutter_blobs": ("data", "clutter_blobs", _int_range),
    "data.clutter_sigma": ("data", "clutter_sigma", _float_range),
    "data.clutter_intensity": ("data", "clutter_intensity", _float_range),
    "data.train_count": ("synth", "train_count", int),
    "data.val_count": ("synth", "val_count", int),
    "paths.train": ("paths", "train", _path),
    "paths.val": ("paths", "val", _path),
    "paths.out": ("paths", "out", _path),
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    net: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SyntheticSceneSpec = field(default_factory=SyntheticSceneSpec)
    synth: SynthSettings = field(default_factory=SynthSettings)
    paths: Paths = field(default_factory=Paths)

    def with_seed(self, seed: int) -> "RunConfig":
        """The shared seed drives weight init, batch order and synthetic data."""
        if seed < 0:
            raise ConfigError("seed", f"must be non-negative, got {seed}")
        return dataclasses.replace(
            self,
            seed=seed,
            net=dataclasses.replace(self.net, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
            data=dataclasses.replace(self.data, seed=seed),
        )

    def with_net(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, net=dataclasses.replace(self.net, **changes))

    def to_text(self) -> str:
        """Serialise every schema key; ``parse_config(to_text())`` round-trips."""
        lines = []
        for key, (section, name, _) in SCHEMA.items():
            value = self.seed if section == "run" else getattr(getattr(self, section), name)
            if isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                text = "true" if value else "false"
            elif value is None:
                text = ""
            else:
                text = str(value)
            lines.append(f"{key} = {text}")
        return "\n".join(lines) + "\n"


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values: dict[str, dict[str, Any]] = {s: {} for s in ("run", "net", "train", "data", "synth", "paths")}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", f"expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        section, name, parse = SCHEMA[key]
        try:
            values[section][name] = parse(value)
        except ValueError as exc:
            raise ConfigError(key, f"bad value {value!r} ({exc})") from None
    return _assemble(values)


def _build(key_prefix: str, cls, kwargs: dict):
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{key_prefix}.{exc.field}", str(exc).split(": ", 1)[-1]) from None
    except ValueError as exc:
        # SyntheticSceneSpec validation does not name the field; report the section
        raise ConfigError(key_prefix, str(exc)) from None


def _assemble(values: dict[str, dict[str, Any]]) -> RunConfig:
    seed = values["run"].get("seed", 0)
    if seed < 0:
        raise ConfigError("seed", f"must be non-negative, got {seed}")
    synth = SynthSettings(**values["synth"])
    for name in ("train_count", "val_count"):
        if getattr(synth, name) < 0:
            raise ConfigError(f"data.{name}", "must be non-negative")
    return RunConfig(
        seed=seed,
        net=_build("net", NetworkConfig, {**values["net"], "seed": seed}),
        train=_build("train", TrainConfig, {**values["train"], "seed": seed}),
        data=_build("data", SyntheticSceneSpec, {**values["data"], "seed": seed}),
        synth=synth,
        paths=Paths(**values["paths"]),
    )


def load_config(path: Union[str, Path, None]) -> RunConfig:
    """Read a config file; ``None`` gives the all-defaults configuration."""
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text(), str(path))
