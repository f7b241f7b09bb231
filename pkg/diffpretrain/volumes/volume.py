import hashlib
import json
import os
from enum import Enum
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from diffpretrain.errors import MissingArtifactError, VolumeFormatError
from diffpretrain.models.schemas import ExtractionPlan

PathLike = Union[str, os.PathLike]

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class VolumeKind(str, Enum):
    IMAGE = "image"
    LABEL = "label"
    COORD = "coord"


class Volume(BaseModel):
    """A single-channel 3D grid stored z-major as (D_z, D_y, D_x)."""

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: VolumeKind = VolumeKind.IMAGE

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    @field_validator("data")
    @classmethod
    def _three_dims(cls, value: np.ndarray) -> np.ndarray:
        value = np.asarray(value)
        if value.ndim != 3 or min(value.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {value.shape}")
        return value

    @field_validator("spacing")
    @classmethod
    def _positive_spacing(cls, value):
        if any(not s > 0 for s in value):
            raise ValueError(f"spacing components must be > 0, got {value}")
        return tuple(float(s) for s in value)

    @model_validator(mode="after")
    def _kind_rules(self):
        if self.kind == VolumeKind.LABEL:
            if not np.issubdtype(self.data.dtype, np.integer) or (self.data.size and self.data.min() < 0):
                raise ValueError("label volumes hold non-negative integer class ids")
        return self

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(int(s) for s in self.data.shape)

    def with_data(self, data: np.ndarray, kind: VolumeKind = None) -> "Volume":
        return Volume(data=data, spacing=self.spacing, kind=kind or self.kind)


class FeatureVolume(BaseModel):
    """Voxel-wise features (C, D_z, D_y, D_x); channels are ordered level-major within each timestep block."""

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    plan: ExtractionPlan
    backbone: str = ""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    @model_validator(mode="after")
    def _channels_match_plan(self):
        if self.data.ndim != 4:
            raise ValueError(f"feature data must be (C, z, y, x), got shape {self.data.shape}")
        if self.data.shape[0] != self.plan.channels:
            raise ValueError(f"feature volume has {self.data.shape[0]} channels, plan declares {self.plan.channels}")
        return self

    @property
    def channels(self) -> int:
        return int(self.data.shape[0])

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(int(s) for s in self.data.shape[1:])

    def timestep_block(self, index: int) -> np.ndarray:
        width = self.plan.channels_per_timestep
        return self.data[index * width:(index + 1) * width]


def _storage_dtype(kind: VolumeKind) -> str:
    return "u8" if kind == VolumeKind.LABEL else "f32"


def _header(v: Volume) -> bytes:
    header = {
        "shape": list(v.shape),
        "spacing": list(v.spacing),
        "dtype": _storage_dtype(v.kind),
        "kind": v.kind.value,
    }
    return (json.dumps(header) + "\n").encode("utf-8")


def _payload(v: Volume) -> bytes:
    dtype = _DTYPES[_storage_dtype(v.kind)]
    if v.kind == VolumeKind.LABEL and v.data.size and v.data.max() > 255:
        raise VolumeFormatError("label volumes are stored as unsigned bytes; class ids must be < 256")
    return np.ascontiguousarray(v.data, dtype=dtype).tobytes()


def save_volume(v: Volume, path: PathLike) -> None:
    """Write a `.v3d` file. Label volumes are narrowed to unsigned bytes (class ids 0..255) and load back as
    uint8; images and coordinate maps are stored as little-endian float32."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_header(v))
        f.write(_payload(v))


def load_volume(path: PathLike) -> Volume:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"volume file not found: {path}")
    raw = path.read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise VolumeFormatError(f"{path}: missing JSON header line")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
        shape = tuple(int(s) for s in header["shape"])
        spacing = tuple(float(s) for s in header["spacing"])
        dtype_tag = header["dtype"]
        kind = VolumeKind(header["kind"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"{path}: malformed header ({exc})") from exc
    if dtype_tag not in _DTYPES:
        raise VolumeFormatError(f"{path}: unknown dtype {dtype_tag!r}")
    dtype = _DTYPES[dtype_tag]
    payload = raw[newline + 1:]
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: payload size mismatch (header declares {expected} bytes, found {len(payload)})"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(shape)
    if dtype_tag == "f32":
        data = data.astype(np.float32)
    else:
        data = data.copy()
    try:
        return Volume(data=data, spacing=spacing, kind=kind)
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: {exc}") from exc


def volume_hash(v: Volume) -> str:
    digest = hashlib.sha256()
    digest.update(_header(v))
    digest.update(_payload(v))
    return digest.hexdigest()
