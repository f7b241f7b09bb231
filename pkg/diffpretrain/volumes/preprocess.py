from typing import Sequence, Tuple

import numpy as np
from scipy import ndimage

from diffpretrain.errors import ShapeMismatchError
from diffpretrain.volumes.volume import Volume, VolumeKind


def resampled_shape(shape: Sequence[int], spacing: Sequence[float], target_spacing: Sequence[float]) -> Tuple[int, ...]:
    return tuple(int(round(n * s / t)) for n, s, t in zip(shape, spacing, target_spacing))


def resample(v: Volume, target_spacing: Sequence[float]) -> Volume:
    """Resample onto ``target_spacing`` mm.

    Images and coordinate maps use trilinear interpolation, labels use nearest neighbour.
    Output voxel i sits at i * target_spacing mm from the first voxel, so the stated spacing is the
    true sample pitch; samples past the last input voxel repeat the edge value.
    """
    target_spacing = tuple(float(t) for t in target_spacing)
    if len(target_spacing) != 3 or any(not t > 0 for t in target_spacing):
        raise ValueError(f"target_spacing must be three positive values, got {target_spacing}")
    new_shape = resampled_shape(v.shape, v.spacing, target_spacing)
    if min(new_shape) < 1:
        raise ShapeMismatchError(
            f"resampling {v.shape} at {v.spacing} mm to {target_spacing} mm gives an empty axis {new_shape}"
        )
    if new_shape == v.shape:
        return Volume(data=v.data.copy(), spacing=target_spacing, kind=v.kind)

    step = [t / s for t, s in zip(target_spacing, v.spacing)]
    if v.kind == VolumeKind.LABEL:
        data = ndimage.affine_transform(v.data, step, output_shape=new_shape, order=0, mode="nearest")
        data = data.astype(v.data.dtype)
    else:
        data = ndimage.affine_transform(v.data.astype(np.float64), step, output_shape=new_shape, order=1,
                                        mode="nearest")
        data = data.astype(np.float32)
    if data.shape != new_shape:
        raise ShapeMismatchError(f"resampler produced {data.shape}, expected {new_shape}")
    return Volume(data=data, spacing=target_spacing, kind=v.kind)


def normalize_intensity(v: Volume, window: Sequence[float]) -> Volume:
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise ValueError(f"intensity window needs lo < hi, got ({lo}, {hi})")
    clipped = np.clip(v.data.astype(np.float64), lo, hi)
    scaled = 2.0 * (clipped - lo) / (hi - lo) - 1.0
    return Volume(data=scaled.astype(np.float32), spacing=v.spacing, kind=VolumeKind.IMAGE)


def is_normalized(v: Volume) -> bool:
    return v.kind == VolumeKind.IMAGE and float(v.data.min()) >= -1.0 and float(v.data.max()) <= 1.0
