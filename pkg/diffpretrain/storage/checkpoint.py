import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import numpy as np
import torch
from pydantic import BaseModel, ValidationError

from diffpretrain.errors import CheckpointError, MissingArtifactError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
PAYLOAD_NAME = "tensors.bin"
RUN_INFO_NAME = "run_info.json"

_DTYPES = {
    "f32": (torch.float32, np.dtype("<f4")),
    "f64": (torch.float64, np.dtype("<f8")),
    "i64": (torch.int64, np.dtype("<i8")),
    "u8": (torch.uint8, np.dtype("u1")),
}
_TAGS = {torch_dtype: tag for tag, (torch_dtype, _) in _DTYPES.items()}


class TensorEntry(BaseModel):
    shape: List[int]
    dtype: str
    offset: int
    nbytes: int


class CheckpointManifest(BaseModel):
    kind: Literal["denoiser", "bpr", "probe"]
    step: int = 0
    config: Dict[str, Any]
    schedule: Optional[Dict[str, Any]] = None
    training: Optional[Dict[str, Any]] = None
    extra: Dict[str, Any] = {}
    tensors: Dict[str, TensorEntry]


class Checkpoint(BaseModel):
    path: str
    manifest: CheckpointManifest
    tensors: Dict[str, Any]

    def group(self, prefix: str) -> Dict[str, torch.Tensor]:
        """Tensors under ``prefix/`` with the prefix stripped."""
        marker = prefix.rstrip("/") + "/"
        return {name[len(marker):]: t for name, t in self.tensors.items() if name.startswith(marker)}


def save_checkpoint(
    path: Union[str, os.PathLike],
    kind: str,
    tensors: Dict[str, torch.Tensor],
    config: Dict[str, Any],
    schedule: Optional[Dict[str, Any]] = None,
    training: Optional[Dict[str, Any]] = None,
    step: int = 0,
    extra: Optional[Dict[str, Any]] = None,
    run_info: Optional[Dict[str, Any]] = None,
) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries: Dict[str, TensorEntry] = {}
    offset = 0
    with open(path / PAYLOAD_NAME, "wb") as payload:
        for name in sorted(tensors):
            tensor = tensors[name].detach().cpu().contiguous()
            if tensor.dtype not in _TAGS:
                raise CheckpointError(f"unsupported tensor dtype {tensor.dtype} for {name}")
            tag = _TAGS[tensor.dtype]
            raw = tensor.numpy().astype(_DTYPES[tag][1], copy=False).tobytes()
            payload.write(raw)
            entries[name] = TensorEntry(shape=list(tensor.shape), dtype=tag, offset=offset, nbytes=len(raw))
            offset += len(raw)
    manifest = CheckpointManifest(
        kind=kind, step=step, config=config, schedule=schedule, training=training,
        extra=extra or {}, tensors=entries,
    )
    with open(path / MANIFEST_NAME, "w", encoding="utf-8") as f:
        json.dump(manifest.model_dump(), f, indent=2, sort_keys=True)
    if run_info is not None:
        with open(path / RUN_INFO_NAME, "w", encoding="utf-8") as f:
            json.dump(run_info, f, indent=2, sort_keys=True)
    logger.debug("saved %s checkpoint with %d tensors to %s", kind, len(entries), path)
    return path


def read_manifest(path: Union[str, os.PathLike]) -> CheckpointManifest:
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise MissingArtifactError(f"no checkpoint manifest at {manifest_path}")
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            return CheckpointManifest.model_validate(json.load(f))
    except (json.JSONDecodeError, ValidationError) as exc:
        raise CheckpointError(f"corrupt checkpoint manifest {manifest_path}: {exc}") from exc


def load_checkpoint(path: Union[str, os.PathLike], expected_kind: Optional[str] = None) -> Checkpoint:
    path = Path(path)
    manifest = read_manifest(path)
    if expected_kind is not None and manifest.kind != expected_kind:
        raise CheckpointError(f"{path} holds a {manifest.kind!r} checkpoint, expected {expected_kind!r}")
    payload_path = path / PAYLOAD_NAME
    if not payload_path.is_file():
        raise MissingArtifactError(f"no checkpoint payload at {payload_path}")
    payload = payload_path.read_bytes()
    tensors: Dict[str, torch.Tensor] = {}
    for name, entry in manifest.tensors.items():
        if entry.dtype not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype {entry.dtype!r} for {name}")
        torch_dtype, np_dtype = _DTYPES[entry.dtype]
        end = entry.offset + entry.nbytes
        if end > len(payload) or entry.nbytes != int(np.prod(entry.shape)) * np_dtype.itemsize:
            raise CheckpointError(f"{path}: payload for {name} is truncated or mis-sized")
        array = np.frombuffer(payload, dtype=np_dtype, count=int(np.prod(entry.shape)), offset=entry.offset)
        tensors[name] = torch.from_numpy(array.reshape(entry.shape).copy()).to(torch_dtype)
    return Checkpoint(path=str(path), manifest=manifest, tensors=tensors)


def checkpoint_hash(path: Union[str, os.PathLike]) -> str:
    path = Path(path)
    digest = hashlib.sha256()
    for name in (MANIFEST_NAME, PAYLOAD_NAME):
        file_path = path / name
        if not file_path.is_file():
            raise MissingArtifactError(f"checkpoint file missing: {file_path}")
        digest.update(file_path.read_bytes())
    return digest.hexdigest()
