import itertools
import math
from typing import List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from diffpretrain.errors import PatchGridError, ShapeMismatchError
from diffpretrain.volumes.volume import Volume

Triple = Tuple[int, int, int]


class PatchGrid(BaseModel):
    volume_shape: Triple
    patch_shape: Triple
    strides: Triple
    origins: List[Triple]

    model_config = ConfigDict(frozen=True)

    def __len__(self) -> int:
        return len(self.origins)

    def slices(self, origin: Sequence[int]) -> Tuple[slice, slice, slice]:
        return tuple(slice(o, o + p) for o, p in zip(origin, self.patch_shape))


def _axis_origins(size: int, patch: int, stride: int) -> List[int]:
    origins = list(range(0, size - patch + 1, stride))
    if origins[-1] != size - patch:
        origins.append(size - patch)
    return origins


def plan_patch_grid(volume_shape: Sequence[int], patch_shape: Sequence[int], overlap_fraction: float = 0.5) -> PatchGrid:
    volume_shape = tuple(int(s) for s in volume_shape)
    patch_shape = tuple(int(p) for p in patch_shape)
    if not 0.0 <= overlap_fraction < 1.0:
        raise PatchGridError(f"overlap_fraction must lie in [0, 1), got {overlap_fraction}")
    if len(volume_shape) != 3 or len(patch_shape) != 3:
        raise PatchGridError("volume and patch shapes must be 3D")
    if any(p > v for p, v in zip(patch_shape, volume_shape)):
        raise PatchGridError(f"patch {patch_shape} is larger than volume {volume_shape}")
    strides = tuple(max(1, math.floor(p * (1.0 - overlap_fraction))) for p in patch_shape)
    per_axis = [_axis_origins(v, p, s) for v, p, s in zip(volume_shape, patch_shape, strides)]
    origins = [tuple(o) for o in itertools.product(*per_axis)]
    return PatchGrid(volume_shape=volume_shape, patch_shape=patch_shape, strides=strides, origins=origins)


def extract_patch(v: Volume, origin: Sequence[int], patch_shape: Sequence[int]) -> Volume:
    origin = tuple(int(o) for o in origin)
    patch_shape = tuple(int(p) for p in patch_shape)
    if any(o < 0 or o + p > n for o, p, n in zip(origin, patch_shape, v.shape)):
        raise PatchGridError(f"patch at {origin} of size {patch_shape} exceeds volume {v.shape}")
    window = tuple(slice(o, o + p) for o, p in zip(origin, patch_shape))
    return Volume(data=np.ascontiguousarray(v.data[window]).copy(), spacing=v.spacing, kind=v.kind)


def coverage_map(grid: PatchGrid) -> np.ndarray:
    counts = np.zeros(grid.volume_shape, dtype=np.int64)
    for origin in grid.origins:
        counts[grid.slices(origin)] += 1
    return counts


class PatchAccumulator:
    """Running sum of per-patch outputs; ``result()`` divides by the coverage count."""

    def __init__(self, grid: PatchGrid, squeeze: bool = False):
        self.grid = grid
        self.squeeze = squeeze
        self.total = None
        self.added = 0

    def add(self, origin: Sequence[int], out: np.ndarray) -> None:
        out = np.asarray(out)
        if self.squeeze:
            out = out[None]
        if out.ndim != 4 or tuple(out.shape[1:]) != self.grid.patch_shape:
            raise ShapeMismatchError(f"patch output shape {out.shape} does not match patch {self.grid.patch_shape}")
        if self.total is None:
            self.total = np.zeros((out.shape[0],) + self.grid.volume_shape, dtype=np.float64)
        elif out.shape[0] != self.total.shape[0]:
            raise ShapeMismatchError(f"channel mismatch: {out.shape[0]} vs {self.total.shape[0]}")
        self.total[(slice(None),) + self.grid.slices(origin)] += out
        self.added += 1

    def result(self) -> np.ndarray:
        if self.added != len(self.grid):
            raise ShapeMismatchError(f"expected {len(self.grid)} patch outputs, got {self.added}")
        counts = coverage_map(self.grid)
        if counts.min() < 1:
            raise PatchGridError("patch grid leaves voxels uncovered")
        fused = (self.total / counts[None]).astype(np.float32)
        return fused[0] if self.squeeze else fused


def fuse_patches(grid: PatchGrid, patch_outputs: Sequence[np.ndarray]) -> np.ndarray:
    """Mean-aggregate per-patch outputs of shape (C, h, w, d) into a (C, D_z, D_y, D_x) volume.

    3D outputs are treated as single-channel and the result is returned 3D as well.
    """
    if len(patch_outputs) != len(grid.origins):
        raise ShapeMismatchError(f"expected {len(grid.origins)} patch outputs, got {len(patch_outputs)}")
    if not patch_outputs:
        raise ShapeMismatchError("no patch outputs to fuse")
    accumulator = PatchAccumulator(grid, squeeze=np.ndim(patch_outputs[0]) == 3)
    for origin, out in zip(grid.origins, patch_outputs):
        accumulator.add(origin, out)
    return accumulator.result()
