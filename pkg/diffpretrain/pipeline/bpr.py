import hashlib
import logging
import math
import os
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict
from scipy import stats
from tqdm import tqdm

from diffpretrain.errors import CheckpointError, ConditioningError, ConfigError, NumericError
from diffpretrain.models.schemas import BprConfig, BprEvaluation
from diffpretrain.networks.base import load_named_tensors, named_tensors
from diffpretrain.networks.bpr import SliceScorer, bpr_losses
from diffpretrain.storage.checkpoint import load_checkpoint, save_checkpoint
from diffpretrain.utils.seeding import derive_seed, make_generator
from diffpretrain.volumes.preprocess import is_normalized
from diffpretrain.volumes.volume import Volume, VolumeKind

logger = logging.getLogger(__name__)

SCORE_CHUNK = 64


class BprModel(BaseModel):
    scorer: SliceScorer
    config: BprConfig
    score_min: float = -1.0
    score_max: float = 1.0
    losses: List[float] = []

    model_config = ConfigDict(arbitrary_types_allowed=True)

    def normalize(self, scores: np.ndarray) -> np.ndarray:
        scaled = 2.0 * (np.asarray(scores, dtype=np.float64) - self.score_min) / (self.score_max - self.score_min) - 1.0
        return np.clip(scaled, -1.0, 1.0)


def _slices_tensor(data: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(data, dtype=np.float32)).unsqueeze(1)


def slice_scores(model: BprModel, v: Volume) -> np.ndarray:
    """Raw (unnormalized) score of every axial slice of ``v``, ordered by z."""
    model.scorer.eval()
    scores = []
    with torch.no_grad():
        for start in range(0, v.shape[0], SCORE_CHUNK):
            scores.append(model.scorer(_slices_tensor(v.data[start:start + SCORE_CHUNK])).double().numpy())
    return np.concatenate(scores) if scores else np.zeros(0)


def train_bpr(volumes: Sequence[Volume], config: Optional[BprConfig] = None) -> BprModel:
    config = config or BprConfig()
    if len(volumes) < 2:
        raise ConfigError(f"body-part regressor training needs at least 2 volumes, got {len(volumes)}")
    short = [i for i, v in enumerate(volumes) if v.shape[0] < config.min_slices]
    if short:
        raise ConfigError(
            f"{len(short)} volume(s) have fewer than {config.min_slices} axial slices "
            f"(bpr.slices_per_sample={config.slices_per_sample}, bpr.gap_range={config.gap_range})"
        )

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(config.seed, 1))
        scorer = SliceScorer(config.widths)
    optimizer = torch.optim.Adam(scorer.parameters(), lr=config.learning_rate)
    generator = make_generator(config.seed)
    m = config.slices_per_sample
    gap_lo, gap_hi = config.gap_range

    losses: List[float] = []
    last_finite = None
    scorer.train()
    for step in tqdm(range(1, config.steps + 1), desc="bpr", disable=not config.progress):
        index = int(torch.randint(len(volumes), (1,), generator=generator))
        gap = int(torch.randint(gap_lo, gap_hi + 1, (1,), generator=generator))
        depth = volumes[index].shape[0]
        start = int(torch.randint(depth - (m - 1) * gap, (1,), generator=generator))
        batch = _slices_tensor(volumes[index].data[start:start + (m - 1) * gap + 1:gap])

        order_loss, dist_loss = bpr_losses(scorer(batch), gap)
        loss = order_loss + dist_loss
        if not torch.isfinite(loss):
            raise NumericError(
                f"non-finite body-part regressor loss at step {step} (volume {index}, gap {gap}); "
                f"last finite loss {last_finite}"
            )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        last_finite = float(loss)
        losses.append(last_finite)
        if step % config.log_every == 0:
            logger.info("bpr step %d/%d loss %.4f (order %.4f, dist %.4f)",
                        step, config.steps, last_finite, float(order_loss), float(dist_loss))

    model = BprModel(scorer=scorer, config=config, losses=losses)
    fit_normalization(model, volumes)
    return model


def fit_normalization(model: BprModel, volumes: Sequence[Volume]) -> None:
    scores = np.concatenate([slice_scores(model, v) for v in volumes])
    lo, hi = np.percentile(scores, model.config.percentiles)
    if not math.isfinite(lo) or not math.isfinite(hi) or hi - lo < 1e-12:
        raise NumericError(f"degenerate body-part score range [{lo}, {hi}] after training")
    model.score_min, model.score_max = float(lo), float(hi)
    logger.info("bpr score range fitted to [%.4f, %.4f] over %d slices", lo, hi, scores.size)


def coordinate_map(model: BprModel, v: Volume) -> Volume:
    if not is_normalized(v):
        raise ConditioningError("coordinate_map needs a normalized image volume (kind=image, values in [-1, 1])")
    coords = model.normalize(slice_scores(model, v)).astype(np.float32)
    data = np.broadcast_to(coords[:, None, None], v.shape).copy()
    return Volume(data=data, spacing=v.spacing, kind=VolumeKind.COORD)


def evaluate_bpr(model: BprModel, phantoms) -> BprEvaluation:
    """Rank agreement between slice scores and the phantoms' true body coordinate."""
    rhos, monotone = [], []
    for phantom in phantoms:
        scores = slice_scores(model, phantom.image)
        truth = phantom.body_coord.data[:, 0, 0]
        rho = stats.spearmanr(scores, truth)[0]
        rhos.append(0.0 if not np.isfinite(rho) else float(rho))
        monotone.append(float(np.mean(np.diff(scores) > 0)))
    if not rhos:
        raise ConfigError("evaluate_bpr needs at least one phantom")
    return BprEvaluation(spearman=float(np.mean(rhos)), monotone_fraction=float(np.mean(monotone)),
                         per_volume_spearman=rhos)


def save_bpr(model: BprModel, path: Union[str, os.PathLike]) -> Path:
    tensors = {f"scorer/{name}": t for name, t in named_tensors(model.scorer).items()}
    return save_checkpoint(
        path, "bpr", tensors, config=model.config.model_dump(), step=len(model.losses),
        extra={"score_min": model.score_min, "score_max": model.score_max,
               "final_loss": model.losses[-1] if model.losses else None},
    )


def load_bpr(path: Union[str, os.PathLike]) -> BprModel:
    checkpoint = load_checkpoint(path, expected_kind="bpr")
    config = BprConfig.model_validate(checkpoint.manifest.config)
    scorer = SliceScorer(config.widths)
    load_named_tensors(scorer, checkpoint.group("scorer"))
    scorer.eval()
    extra = checkpoint.manifest.extra
    if "score_min" not in extra or "score_max" not in extra:
        raise CheckpointError(f"{path}: bpr checkpoint lacks its score normalization constants")
    return BprModel(scorer=scorer, config=config, score_min=extra["score_min"], score_max=extra["score_max"])


def model_fingerprint(model: BprModel) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(named_tensors(model.scorer).items()):
        digest.update(name.encode("utf-8"))
        digest.update(tensor.numpy().tobytes())
    digest.update(f"{model.score_min!r},{model.score_max!r}".encode("utf-8"))
    return digest.hexdigest()
