import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Optional, Union

import numpy as np
from pydantic import ValidationError

from diffpretrain.models.schemas import ExtractionPlan
from diffpretrain.volumes.volume import FeatureVolume

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
PAYLOAD_NAME = "features.bin"


class FeatureCache:
    """On-disk FeatureVolume store keyed by (backbone, volume, extraction plan)."""

    def __init__(self, root: Union[str, os.PathLike]):
        self.root = Path(root)

    @staticmethod
    def key(backbone: str, volume_digest: str, plan: ExtractionPlan, conditioning: str = "") -> str:
        blob = json.dumps(
            {"backbone": backbone, "volume": volume_digest, "plan": plan.model_dump(), "conditioning": conditioning},
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def _entry(self, key: str) -> Path:
        return self.root / key[:2] / key

    def __contains__(self, key: str) -> bool:
        entry = self._entry(key)
        return (entry / MANIFEST_NAME).is_file() and (entry / PAYLOAD_NAME).is_file()

    def save(self, key: str, features: FeatureVolume) -> Path:
        entry = self._entry(key)
        entry.mkdir(parents=True, exist_ok=True)
        data = np.ascontiguousarray(features.data, dtype="<f4")
        (entry / PAYLOAD_NAME).write_bytes(data.tobytes())
        manifest = {
            "shape": list(data.shape),
            "spacing": list(features.spacing),
            "plan": features.plan.model_dump(),
            "backbone": features.backbone,
        }
        (entry / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
        logger.debug("cached features %s (%d channels)", key[:12], features.channels)
        return entry

    def load(self, key: str) -> Optional[FeatureVolume]:
        """Cached features, or None on a miss; unreadable entries count as misses."""
        if key not in self:
            return None
        entry = self._entry(key)
        try:
            manifest = json.loads((entry / MANIFEST_NAME).read_text(encoding="utf-8"))
            shape = tuple(int(s) for s in manifest["shape"])
            data = np.frombuffer((entry / PAYLOAD_NAME).read_bytes(), dtype="<f4").reshape(shape)
            return FeatureVolume(
                data=data.astype(np.float32), spacing=tuple(manifest["spacing"]),
                plan=ExtractionPlan.model_validate(manifest["plan"]), backbone=manifest["backbone"],
            )
        except (OSError, KeyError, ValueError, ValidationError) as exc:
            logger.warning("ignoring unreadable feature cache entry %s: %s", entry, exc)
            return None
