from diffpretrain.storage.checkpoint import (
    Checkpoint, CheckpointManifest, save_checkpoint, load_checkpoint, read_manifest, checkpoint_hash
)
from diffpretrain.storage.feature_cache import FeatureCache
