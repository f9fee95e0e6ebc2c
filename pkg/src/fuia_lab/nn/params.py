"""Flat parameter vectors with a named layer map."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from ..errors import DataFormatError, LayerMapMismatch


@dataclass(frozen=True)
class LayerSlot:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


LayerMap = tuple[LayerSlot, ...]


def build_layer_map(shapes: Iterable[tuple[str, tuple[int, ...]]]) -> LayerMap:
    slots, offset = [], 0
    for name, shape in shapes:
        slot = LayerSlot(name, offset, tuple(int(s) for s in shape))
        slots.append(slot)
        offset += slot.size
    return tuple(slots)


class ParamVector:
    """Immutable float64 vector plus the layout of the model layers inside it.

    Arithmetic between vectors requires identical layer maps.
    """

    __slots__ = ("data", "layer_map")

    def __init__(self, data, layer_map: LayerMap):
        arr = np.array(data, dtype=np.float64).reshape(-1)
        total = sum(s.size for s in layer_map)
        if arr.size != total:
            raise LayerMapMismatch(f"data has {arr.size} entries, layer map covers {total}")
        offset = 0
        for slot in layer_map:
            if slot.offset != offset:
                raise LayerMapMismatch(f"layer {slot.name!r} offset {slot.offset} != {offset}")
            offset += slot.size
        arr.flags.writeable = False
        self.data = arr
        self.layer_map = tuple(layer_map)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ParamVector":
        layer_map = build_layer_map((k, np.shape(v)) for k, v in arrays.items())
        data = np.concatenate([np.asarray(v, dtype=np.float64).reshape(-1) for v in arrays.values()])
        return cls(data, layer_map)

    @classmethod
    def zeros_like(cls, other: "ParamVector") -> "ParamVector":
        return cls(np.zeros_like(other.data), other.layer_map)

    def with_data(self, data) -> "ParamVector":
        return ParamVector(data, self.layer_map)

    def __len__(self):
        return self.data.size

    def slot(self, name: str) -> LayerSlot:
        for s in self.layer_map:
            if s.name == name:
                return s
        raise KeyError(name)

    def view(self, name: str) -> np.ndarray:
        s = self.slot(name)
        return self.data[s.offset : s.offset + s.size].reshape(s.shape)

    def arrays(self) -> dict[str, np.ndarray]:
        return {s.name: self.view(s.name) for s in self.layer_map}

    def check_compatible(self, other: "ParamVector") -> None:
        if self.layer_map != other.layer_map:
            raise LayerMapMismatch("parameter vectors have different layer maps")

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self.check_compatible(other)
        return ParamVector(self.data + other.data, self.layer_map)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self.check_compatible(other)
        return ParamVector(self.data - other.data, self.layer_map)

    def __mul__(self, scalar: float) -> "ParamVector":
        return ParamVector(self.data * float(scalar), self.layer_map)

    __rmul__ = __mul__

    def __neg__(self) -> "ParamVector":
        return ParamVector(-self.data, self.layer_map)

    def l1(self) -> float:
        return float(np.abs(self.data).sum())

    def l2(self) -> float:
        return float(np.linalg.norm(self.data))

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layer_map == other.layer_map and np.array_equal(self.data, other.data)

    def __repr__(self):
        names = ", ".join(s.name for s in self.layer_map)
        return f"ParamVector(n={self.data.size}, layers=[{names}])"


def layer_map_to_json(layer_map: LayerMap) -> list[dict]:
    return [{"name": s.name, "offset": s.offset, "shape": list(s.shape)} for s in layer_map]


def layer_map_from_json(entries) -> LayerMap:
    return tuple(LayerSlot(e["name"], int(e["offset"]), tuple(int(x) for x in e["shape"])) for e in entries)


def save_params(params: ParamVector, path) -> None:
    """Write ``<path>.bin`` (little-endian float64) and ``<path>.json`` (layer map)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.with_suffix(".bin").write_bytes(params.data.astype("<f8").tobytes())
    manifest = {"dtype": "float64-le", "length": len(params), "layers": layer_map_to_json(params.layer_map)}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_params(path) -> ParamVector:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    raw = path.with_suffix(".bin").read_bytes()
    if len(raw) != 8 * int(manifest["length"]):
        raise DataFormatError(
            f"{path.with_suffix('.bin')}: {len(raw)} bytes, manifest expects {8 * manifest['length']}"
        )
    layer_map = layer_map_from_json(manifest["layers"])
    return ParamVector(np.frombuffer(raw, dtype="<f8"), layer_map)
