"""
Frozen-backbone voxel features.

For every patch of the sliding-window grid and every requested timestep the clean patch is
noised with its own seeded draw, passed through the denoiser, and the selected decoder levels are
upsampled trilinearly to patch resolution. Channels are concatenated level by level, then
timestep by timestep, and overlapping patches are averaged.
"""

import logging
import os
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from diffpretrain.diffusion.process import q_sample
from diffpretrain.errors import ConditioningError, ConfigError
from diffpretrain.models.schemas import DenoiserConfig, ExtractConfig, ExtractionPlan
from diffpretrain.pipeline.bpr import BprModel, coordinate_map, model_fingerprint
from diffpretrain.pipeline.pretrain import Backbone, load_backbone
from diffpretrain.storage.feature_cache import FeatureCache
from diffpretrain.utils.seeding import derive_seed, make_generator
from diffpretrain.volumes.patches import PatchAccumulator, plan_patch_grid
from diffpretrain.volumes.volume import FeatureVolume, Volume, volume_hash

logger = logging.getLogger(__name__)


def select_levels(
    config: DenoiserConfig,
    which: Optional[Sequence[int]] = None,
    timesteps: Sequence[int] = (1,),
    noise_samples: int = 1,
    overlap: float = 0.5,
    seed: int = 0,
) -> ExtractionPlan:
    """Extraction plan over pyramid levels ``which`` (all levels when None)."""
    levels = list(range(config.levels)) if which is None else [int(level) for level in which]
    if not levels:
        raise ConfigError("extract.levels must name at least one pyramid level")
    unknown = [level for level in levels if not 0 <= level < config.levels]
    if unknown:
        raise ConfigError(f"unknown pyramid level(s) {unknown}; the denoiser has levels 0..{config.levels - 1}")
    if len(set(levels)) != len(levels):
        raise ConfigError(f"extract.levels lists a level twice: {levels}")
    if not timesteps:
        raise ConfigError("extract.timesteps must not be empty")
    return ExtractionPlan(
        levels=levels, level_channels=config.level_channels, timesteps=[int(t) for t in timesteps],
        noise_samples=noise_samples, overlap=overlap, seed=seed,
    )


def plan_from_config(backbone: Backbone, config: ExtractConfig, timesteps: Optional[Sequence[int]] = None) -> ExtractionPlan:
    return select_levels(
        backbone.config, config.levels, timesteps if timesteps is not None else config.timesteps,
        noise_samples=config.noise_samples, overlap=config.overlap, seed=config.seed,
    )


def _pad_to(data: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    pad = [(0, max(0, p - n)) for n, p in zip(data.shape, shape)]
    return np.pad(data, pad, mode="edge") if any(after for _, after in pad) else data


class FeatureExtractor:
    def __init__(self, backbone: Backbone, plan: ExtractionPlan, bpr: Optional[BprModel] = None,
                 cache: Optional[FeatureCache] = None):
        if backbone.conditioned and bpr is None:
            raise ConditioningError(
                "the backbone was trained with a coordinate map; pass a body-part regressor checkpoint (--bpr)"
            )
        if bpr is not None and not backbone.conditioned:
            raise ConditioningError("a body-part regressor was given but the backbone is unconditioned")
        for t in plan.timesteps:
            backbone.schedule.check_step(t)
        if plan.level_channels != backbone.config.level_channels:
            raise ConfigError("extraction plan was built for a different denoiser configuration")
        self.backbone = backbone
        self.plan = plan
        self.bpr = bpr
        self.cache = cache
        self._bpr_identity = model_fingerprint(bpr) if bpr is not None else ""

    def _patch_features(self, x0: torch.Tensor, cond: Optional[torch.Tensor], patch_index: int) -> np.ndarray:
        patch_shape = tuple(x0.shape[2:])
        blocks = []
        for t in self.plan.timesteps:
            total = None
            for draw in range(self.plan.noise_samples):
                generator = make_generator(derive_seed(self.plan.seed, patch_index, t, draw))
                eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
                pyramid = self.backbone.model(q_sample(x0, t, eps, self.backbone.schedule), t, cond).pyramid
                levels = []
                for level in self.plan.levels:
                    h = pyramid.levels[level]
                    if tuple(h.shape[2:]) != patch_shape:
                        h = F.interpolate(h, size=patch_shape, mode="trilinear", align_corners=False)
                    levels.append(h)
                features = torch.cat(levels, dim=1)
                total = features if total is None else total + features
            blocks.append(total / self.plan.noise_samples)
        return torch.cat(blocks, dim=1)[0].numpy()

    def compute(self, v: Volume) -> FeatureVolume:
        patch_shape = self.backbone.patch_shape
        image = _pad_to(np.asarray(v.data, dtype=np.float32), patch_shape)
        coords = None
        if self.bpr is not None:
            coords = _pad_to(coordinate_map(self.bpr, v).data, patch_shape)
        grid = plan_patch_grid(image.shape, patch_shape, self.plan.overlap)
        accumulator = PatchAccumulator(grid)
        with torch.no_grad():
            for patch_index, origin in enumerate(grid.origins):
                window = grid.slices(origin)
                x0 = torch.from_numpy(image[window].copy())[None, None]
                cond = torch.from_numpy(coords[window].copy())[None, None] if coords is not None else None
                accumulator.add(origin, self._patch_features(x0, cond, patch_index))
        fused = accumulator.result()
        fused = np.ascontiguousarray(fused[(slice(None),) + tuple(slice(0, n) for n in v.shape)])
        return FeatureVolume(data=fused, spacing=v.spacing, plan=self.plan, backbone=self.backbone.identity)

    def __call__(self, v: Volume) -> FeatureVolume:
        if self.cache is None:
            return self.compute(v)
        key = FeatureCache.key(self.backbone.identity, volume_hash(v), self.plan, self._bpr_identity)
        cached = self.cache.load(key)
        if cached is not None:
            return cached
        features = self.compute(v)
        self.cache.save(key, features)
        return features


def extract_features(
    checkpoint: Union[str, os.PathLike, Backbone],
    v: Volume,
    timesteps: Sequence[int],
    bpr: Optional[BprModel] = None,
    overlap: float = 0.5,
    seed: int = 0,
    levels: Optional[Sequence[int]] = None,
    noise_samples: int = 1,
    cache: Optional[FeatureCache] = None,
) -> FeatureVolume:
    backbone = checkpoint if isinstance(checkpoint, Backbone) else load_backbone(checkpoint)
    plan = select_levels(backbone.config, levels, timesteps, noise_samples=noise_samples, overlap=overlap, seed=seed)
    return FeatureExtractor(backbone, plan, bpr, cache)(v)
