"""Training configuration and its flat ``key: value`` file format.

Every :class:`TrainConfig` field is a key; topology fields are written at the
top level too. Tuples are written ``192x192x128``; ``max_steps: none``
disables the step cap. Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .topology import TopologySpec

_TOPO_FIELDS = {f.name: f for f in dataclasses.fields(TopologySpec)}


@dataclass
class TrainConfig:
    topology: TopologySpec = field(default_factory=TopologySpec)
    learning_rate: float = 3e-4
    batch_size: int = 4
    epochs: int = 100
    max_steps: int | None = None
    crop_shape: tuple[int, int, int] = (192, 192, 128)
    patch_depth: int = 64
    patch_stride: int = 32
    l2_weight: float = 0.01
    l2_mode: str = "prediction"
    head_bias_prior: bool = True
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    threshold: float = 0.5
    min_et_voxels: int = 300
    component_fraction: float = 0.3
    connectivity: int = 26
    filter_mode: str = "whole_tumor"

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "epochs", "patch_depth", "patch_stride"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_steps is not None and self.max_steps <= 0:
            raise ValueError("max_steps must be positive")
        if self.l2_weight < 0:
            raise ValueError("l2_weight must be non-negative")
        self.crop_shape = tuple(int(c) for c in self.crop_shape)
        if len(self.crop_shape) != 3 or min(self.crop_shape) <= 0:
            raise ValueError("crop_shape needs three positive extents")

    def postprocess_kwargs(self) -> dict:
        return dict(
            threshold=self.threshold,
            min_et_voxels=self.min_et_voxels,
            fraction=self.component_fraction,
            connectivity=self.connectivity,
            mode=self.filter_mode,
        )

    # -- text form -----------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for k, v in self.topology.to_dict().items():
            lines.append(f"{k}: {_fmt(v)}")
        for f in dataclasses.fields(self):
            if f.name != "topology":
                lines.append(f"{f.name}: {_fmt(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str, overrides: dict | None = None) -> TrainConfig:
        raw: dict[str, str] = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition(":")
            if not sep:
                raise ValueError(f"config line {n}: expected 'key: value', got {line!r}")
            raw[key.strip()] = value.strip()
        for k, v in (overrides or {}).items():
            raw[k] = str(v)
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict[str, str]) -> TrainConfig:
        own = {f.name: f for f in dataclasses.fields(cls) if f.name != "topology"}
        topo, rest = {}, {}
        for k, v in raw.items():
            if k in _TOPO_FIELDS:
                topo[k] = _parse(v, _TOPO_FIELDS[k].type)
            elif k in own:
                rest[k] = _parse(v, own[k].type)
            else:
                raise ValueError(f"unknown config key {k!r}")
        return cls(topology=TopologySpec(**topo), **rest)

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> TrainConfig:
        return cls.from_text(Path(path).read_text(), overrides)


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return "x".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(value: str, typ):
    typ = str(typ)
    if value.lower() == "none" and "None" in typ:
        return None
    if "tuple" in typ:
        return tuple(int(x) for x in value.lower().split("x"))
    if typ.startswith("bool") or typ == "<class 'bool'>":
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"bad boolean {value!r}")
    if "int" in typ:
        return int(value)
    if "float" in typ:
        return float(value)
    return value
