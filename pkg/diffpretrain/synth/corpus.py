import logging
import os
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

from pydantic import ValidationError

from diffpretrain.errors import MissingArtifactError, VolumeFormatError
from diffpretrain.models.schemas import CorpusItem, CorpusManifest, PhantomConfig
from diffpretrain.synth.phantom import Phantom, generate_phantom
from diffpretrain.utils.seeding import spawn_seeds
from diffpretrain.volumes.volume import Volume, load_volume, save_volume

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def generate_corpus(n: int, seed: int, config: Optional[PhantomConfig] = None) -> CorpusManifest:
    """Deterministic list of ``n`` phantoms; item ``i`` always gets the same per-item seed."""
    if n < 0:
        raise ValueError(f"corpus size must be >= 0, got {n}")
    config = config or PhantomConfig()
    items = [CorpusItem(index=i, seed=item_seed) for i, item_seed in enumerate(spawn_seeds(seed, n))]
    return CorpusManifest(seed=seed, config=config, items=items)


def iter_phantoms(manifest: CorpusManifest) -> Iterator[Phantom]:
    for item in manifest.items:
        yield generate_phantom(item.seed, manifest.config)


def write_corpus(manifest: CorpusManifest, out_dir: Union[str, os.PathLike]) -> Path:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise MissingArtifactError(f"cannot create corpus directory {out_dir}: {exc}") from exc

    written: List[CorpusItem] = []
    for item, phantom in zip(manifest.items, iter_phantoms(manifest)):
        names = {part: f"{item.index:04d}_{part}.v3d" for part in ("image", "labels", "coord")}
        save_volume(phantom.image, out_dir / names["image"])
        save_volume(phantom.labels, out_dir / names["labels"])
        save_volume(phantom.body_coord, out_dir / names["coord"])
        written.append(item.model_copy(update=names))
        if len(written) % 50 == 0:
            logger.info("wrote %d/%d phantoms to %s", len(written), len(manifest.items), out_dir)

    stored = manifest.model_copy(update={"items": written})
    (out_dir / MANIFEST_NAME).write_text(stored.model_dump_json(indent=2), encoding="utf-8")
    logger.info("corpus of %d phantoms (distribution %s) written to %s",
                len(written), manifest.config.distribution, out_dir)
    return out_dir / MANIFEST_NAME


def load_corpus(path: Union[str, os.PathLike]) -> CorpusManifest:
    """Read a corpus manifest; ``path`` may be the manifest file or its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise MissingArtifactError(f"no corpus manifest at {path}")
    try:
        return CorpusManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as exc:
        raise VolumeFormatError(f"corrupt corpus manifest {path}: {exc}") from exc


def corpus_root(path: Union[str, os.PathLike]) -> Path:
    path = Path(path)
    return path if path.is_dir() else path.parent


def load_corpus_volumes(path: Union[str, os.PathLike]) -> List[Tuple[Volume, Volume, Volume]]:
    """(image, labels, coord) triples for every item of the corpus at ``path``."""
    manifest = load_corpus(path)
    root = corpus_root(path)
    triples = []
    for item in manifest.items:
        if not (item.image and item.labels and item.coord):
            raise VolumeFormatError(f"corpus item {item.index} in {root} has no stored files")
        triples.append((load_volume(root / item.image), load_volume(root / item.labels), load_volume(root / item.coord)))
    return triples
