"""
Synthetic phantom bodies.

Each phantom covers a random window of a latent body axis: the body coordinate is linear in z,
``b(z) = offset + scale * (2 z / (Z - 1) - 1)``, and every organ is an ellipsoid whose centre sits
at the z where ``b`` equals the organ's configured body position (plus jitter). The body outline
tapers slowly along the axis. Two Small organs share size and intensity and differ only in body
position, so telling them apart needs global position information.
"""

from typing import Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import ndimage

from diffpretrain.errors import PhantomError
from diffpretrain.models.schemas import OrganSpec, PhantomConfig
from diffpretrain.volumes.preprocess import normalize_intensity
from diffpretrain.volumes.volume import Volume, VolumeKind


class Phantom(BaseModel):
    image: Volume
    labels: Volume
    body_coord: Volume
    organ_centers: Dict[str, List[float]] = {}
    organ_radii: Dict[str, List[float]] = {}

    model_config = ConfigDict(arbitrary_types_allowed=True)


def body_axis(Z: int, offset: float, scale: float) -> np.ndarray:
    z = np.arange(Z, dtype=np.float64)
    return offset + scale * (2.0 * z / max(Z - 1, 1) - 1.0)


def ellipsoid_mask(shape, center, radii) -> np.ndarray:
    zz, yy, xx = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")
    dist = ((zz - center[0]) / radii[0]) ** 2 + ((yy - center[1]) / radii[1]) ** 2 + ((xx - center[2]) / radii[2]) ** 2
    return dist <= 1.0


def _place_organ(organ: OrganSpec, config: PhantomConfig, rng: np.random.Generator,
                 offset: float, scale: float) -> Tuple[List[float], List[float]]:
    Z, Y, X = config.shape
    factor = rng.uniform(1.0 - config.radius_jitter, 1.0 + config.radius_jitter)
    radii = [r * factor for r in organ.radii]
    target = organ.body_position + rng.normal(0.0, organ.position_jitter)
    zc = ((target - offset) / scale + 1.0) * (Z - 1) / 2.0
    half_y, half_x = config.body_half_axes[0] * Y, config.body_half_axes[1] * X
    yc = (Y - 1) / 2.0 + organ.center_yx[0] * half_y + float(np.clip(rng.normal(0.0, 0.5), -1.0, 1.0))
    xc = (X - 1) / 2.0 + organ.center_yx[1] * half_x + float(np.clip(rng.normal(0.0, 0.5), -1.0, 1.0))
    center = [zc, yc, xc]
    for axis, (c, r, n) in enumerate(zip(center, radii, config.shape)):
        if 2 * r > n:
            raise PhantomError(f"organ {organ.name} (radius {r:.1f} on axis {axis}) cannot fit in {n} voxels")
    if not 0.0 <= zc <= Z - 1:
        raise PhantomError(f"organ {organ.name} centre z={zc:.1f} falls outside the volume (0..{Z - 1})")
    if yc - radii[1] < 0 or yc + radii[1] > Y - 1 or xc - radii[2] < 0 or xc + radii[2] > X - 1:
        raise PhantomError(f"organ {organ.name} does not fit in-plane at ({yc:.1f}, {xc:.1f})")
    return center, radii


def generate_phantom(seed: int, config: PhantomConfig = None) -> Phantom:
    config = config or PhantomConfig()
    rng = np.random.default_rng(seed)
    Z, Y, X = config.shape

    scale = rng.uniform(*config.body_scale_range)
    max_offset = min(config.body_offset_jitter, 1.0 - scale)
    offset = rng.uniform(-max_offset, max_offset)
    b = body_axis(Z, offset, scale)

    raw = np.full(config.shape, config.air_intensity, dtype=np.float64)
    _, yy, xx = np.meshgrid(np.arange(Z), np.arange(Y, dtype=np.float64), np.arange(X, dtype=np.float64), indexing="ij")
    taper = (1.0 - config.body_taper * b)[:, None, None]
    half_y = config.body_half_axes[0] * Y * taper
    half_x = config.body_half_axes[1] * X * taper
    body = ((yy - (Y - 1) / 2.0) / half_y) ** 2 + ((xx - (X - 1) / 2.0) / half_x) ** 2 <= 1.0
    raw[body] = config.body_intensity + config.intensity_shift

    labels = np.zeros(config.shape, dtype=np.uint8)
    centers, radii_by_name = {}, {}
    for organ in config.organs:
        center, radii = _place_organ(organ, config, rng, offset, scale)
        mask = ellipsoid_mask(config.shape, center, radii)
        labels[mask] = organ.label
        raw[mask] = organ.intensity + config.intensity_shift
        centers[organ.name] = center
        radii_by_name[organ.name] = radii

    texture = ndimage.gaussian_filter(rng.standard_normal(config.shape), sigma=1.0)
    texture *= config.texture_noise_std / max(float(texture.std()), 1e-12)
    raw[body] += texture[body]
    raw += rng.normal(0.0, config.background_noise_std, size=config.shape)

    spacing = tuple(config.spacing)
    image = normalize_intensity(Volume(data=raw.astype(np.float32), spacing=spacing), config.window)
    coord = np.broadcast_to(b[:, None, None], config.shape).astype(np.float32)
    return Phantom(
        image=image,
        labels=Volume(data=labels, spacing=spacing, kind=VolumeKind.LABEL),
        body_coord=Volume(data=coord, spacing=spacing, kind=VolumeKind.COORD),
        organ_centers=centers,
        organ_radii=radii_by_name,
    )
