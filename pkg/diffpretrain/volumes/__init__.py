from diffpretrain.volumes.volume import FeatureVolume, Volume, VolumeKind, load_volume, save_volume, volume_hash
from diffpretrain.volumes.preprocess import resample, normalize_intensity, is_normalized
from diffpretrain.volumes.patches import (
    PatchAccumulator, PatchGrid, plan_patch_grid, extract_patch, coverage_map, fuse_patches
)
