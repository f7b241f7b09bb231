"""
Diffusion pretraining.

Every step draws, from one trainer-owned ``torch.Generator``: a volume per batch element, a
random patch origin, a uniform timestep and the Gaussian noise. The generator state is stored in
each checkpoint next to the Adam moments, so a run resumed from step ``n`` continues with exactly
the draws an uninterrupted run would have made.

Output layout under ``out_dir``::

    loss.csv                  step,loss,wall_ms (one row per optimizer step)
    checkpoints/step_0000500  periodic checkpoints
    final/                    latest state, returned by train_ddpm and resume
"""

import hashlib
import json
import logging
import os
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from diffpretrain.diffusion.process import ddpm_loss, sample_timesteps
from diffpretrain.diffusion.schedule import NoiseSchedule, make_schedule, schedule_from_config
from diffpretrain.errors import (
    CheckpointError, ConditioningError, ConfigError, NumericError, ShapeMismatchError,
)
from diffpretrain.models.schemas import DenoiserConfig, PretrainConfig
from diffpretrain.networks.denoiser import Denoiser
from diffpretrain.pipeline.bpr import BprModel, coordinate_map
from diffpretrain.storage.checkpoint import (
    Checkpoint, checkpoint_hash, load_checkpoint, read_manifest, save_checkpoint,
)
from diffpretrain.utils.seeding import derive_seed, make_generator
from diffpretrain.volumes.volume import Volume

logger = logging.getLogger(__name__)

LOSS_LOG = "loss.csv"
LOSS_COLUMNS = ["step", "loss", "wall_ms"]
FINAL_NAME = "final"
PERIODIC_DIR = "checkpoints"

# keys that may change between a checkpoint and the config used to resume it
_RESUMABLE_KEYS = {"epochs", "max_steps", "checkpoint_every", "log_every", "progress"}


class Backbone(NamedTuple):
    model: Denoiser
    schedule: NoiseSchedule
    config: DenoiserConfig
    patch_shape: Tuple[int, int, int]
    identity: str
    path: Optional[str] = None

    @property
    def conditioned(self) -> bool:
        return self.config.conditioned


def init_denoiser(config: DenoiserConfig, seed: int) -> Denoiser:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Denoiser(config)


class _Trainer:
    def __init__(self, dataset: Sequence[Volume], config: PretrainConfig, bpr: Optional[BprModel],
                 out_dir: Union[str, os.PathLike]):
        _check_dataset(dataset, config, bpr)
        self.config = config
        self.out_dir = Path(out_dir)
        self.images = [np.asarray(v.data, dtype=np.float32) for v in dataset]
        self.coords = [coordinate_map(bpr, v).data for v in dataset] if bpr is not None else None
        self.schedule = schedule_from_config(config.schedule)
        self.model = init_denoiser(config.denoiser, derive_seed(config.seed, 1))
        self.optimizer = torch.optim.Adam(
            self.model.parameters(), lr=config.learning_rate,
            betas=tuple(config.adam_betas), eps=config.adam_eps,
        )
        self.generator = make_generator(config.seed)
        self.step = 0
        self.total_steps = config.total_steps(len(dataset))

    def _draw_batch(self) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        patches, conds = [], []
        for _ in range(self.config.batch_size):
            index = int(torch.randint(len(self.images), (1,), generator=self.generator))
            shape = self.images[index].shape
            origin = [int(torch.randint(n - p + 1, (1,), generator=self.generator))
                      for n, p in zip(shape, self.config.patch_shape)]
            window = tuple(slice(o, o + p) for o, p in zip(origin, self.config.patch_shape))
            patches.append(self.images[index][window])
            if self.coords is not None:
                conds.append(self.coords[index][window])
        x0 = torch.from_numpy(np.stack(patches)[:, None].copy())
        cond = torch.from_numpy(np.stack(conds)[:, None].copy()) if conds else None
        return x0, cond

    def _optimizer_tensors(self) -> Dict[str, torch.Tensor]:
        names = [name for name, _ in self.model.named_parameters()]
        tensors = {}
        for index, slots in self.optimizer.state_dict()["state"].items():
            for slot, value in slots.items():
                if slot == "step":
                    value = torch.as_tensor(float(value), dtype=torch.float32)
                tensors[f"optim/{names[index]}/{slot}"] = value
        return tensors

    def _load_optimizer(self, tensors: Dict[str, torch.Tensor]) -> None:
        names = [name for name, _ in self.model.named_parameters()]
        state = {}
        for index, name in enumerate(names):
            slots = {key.rpartition("/")[2]: t for key, t in tensors.items() if key.rpartition("/")[0] == name}
            if slots:
                state[index] = slots
        if self.step > 0 and len(state) != len(names):
            raise CheckpointError(f"optimizer state covers {len(state)} of {len(names)} parameters")
        template = self.optimizer.state_dict()
        self.optimizer.load_state_dict({"state": state, "param_groups": template["param_groups"]})

    def restore(self, checkpoint: Checkpoint) -> None:
        self.model.load_parameter_tensors(checkpoint.group("model"), self.config.denoiser)
        self.step = checkpoint.manifest.step
        self._load_optimizer(checkpoint.group("optim"))
        rng = checkpoint.tensors.get("rng/state")
        if rng is None:
            raise CheckpointError(f"{checkpoint.path} has no trainer rng state; it cannot be resumed")
        self.generator.set_state(rng.to(torch.uint8))

    def save(self, path: Path, wall_seconds: float) -> Path:
        tensors = {f"model/{name}": t for name, t in self.model.parameter_tensors().items()}
        tensors.update(self._optimizer_tensors())
        tensors["rng/state"] = self.generator.get_state()
        return save_checkpoint(
            path, "denoiser", tensors,
            config=self.config.denoiser.model_dump(),
            schedule=self.schedule.parameters(),
            training=self.config.model_dump(),
            step=self.step,
            extra={"conditioned": self.config.conditioning, "total_steps": self.total_steps,
                   "n_volumes": len(self.images)},
            run_info={"saved_at": datetime.now(timezone.utc).isoformat(), "wall_seconds": wall_seconds},
        )

    def _flush_log(self, rows: List[dict]) -> None:
        if not rows:
            return
        path = self.out_dir / LOSS_LOG
        pd.DataFrame(rows, columns=LOSS_COLUMNS).to_csv(
            path, mode="a", header=not path.exists(), index=False, float_format="%.9g"
        )

    def truncate_log(self) -> None:
        path = self.out_dir / LOSS_LOG
        if path.exists():
            log = pd.read_csv(path)
            log[log["step"] <= self.step].to_csv(path, index=False, float_format="%.9g")

    def run(self) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        config = self.config
        started = time.perf_counter()
        rows: List[dict] = []
        last_finite = None
        steps = range(self.step + 1, self.total_steps + 1)
        self.model.train()
        bar = tqdm(steps, desc="ddpm", initial=self.step, total=self.total_steps, disable=not config.progress)
        for step in bar:
            x0, cond = self._draw_batch()
            t = sample_timesteps(x0.shape[0], self.schedule, self.generator)
            loss = ddpm_loss(self.model, x0, t, cond, self.schedule, self.generator)
            if not torch.isfinite(loss):
                self._flush_log(rows)
                raise NumericError(
                    f"non-finite diffusion loss at step {step} (t={t.tolist()}); last finite loss {last_finite}"
                )
            self.optimizer.zero_grad()
            loss.backward()
            self.optimizer.step()
            self.step = step
            last_finite = loss.item()
            rows.append({"step": step, "loss": last_finite,
                         "wall_ms": int(round((time.perf_counter() - started) * 1000))})
            if step % config.log_every == 0:
                recent = [row["loss"] for row in rows[-config.log_every:]]
                logger.info("ddpm step %d/%d loss %.5f (mean of last %d: %.5f)",
                            step, self.total_steps, last_finite, len(recent), float(np.mean(recent)))
                bar.set_postfix(loss=f"{last_finite:.4f}")
            if step % config.checkpoint_every == 0 and step < self.total_steps:
                self._flush_log(rows)
                rows = []
                self.save(self.out_dir / PERIODIC_DIR / f"step_{step:07d}", time.perf_counter() - started)
        self._flush_log(rows)
        final = self.save(self.out_dir / FINAL_NAME, time.perf_counter() - started)
        logger.info("ddpm training reached step %d; checkpoint at %s", self.step, final)
        return final


def _check_dataset(dataset: Sequence[Volume], config: PretrainConfig, bpr: Optional[BprModel]) -> None:
    if not dataset:
        raise ConfigError("diffusion pretraining needs at least one volume")
    if config.conditioning and bpr is None:
        raise ConditioningError("pretrain.conditioning=true but no body-part regressor was given (--bpr)")
    if bpr is not None and not config.conditioning:
        raise ConditioningError("a body-part regressor was given but pretrain.conditioning=false")
    for index, v in enumerate(dataset):
        if any(n < p for n, p in zip(v.shape, config.patch_shape)):
            raise ShapeMismatchError(f"volume {index} with shape {v.shape} is smaller than patch {config.patch_shape}")


def train_ddpm(
    dataset: Sequence[Volume],
    config: Optional[PretrainConfig] = None,
    bpr: Optional[BprModel] = None,
    out_dir: Union[str, os.PathLike] = "runs/ddpm",
) -> Path:
    config = config or PretrainConfig()
    trainer = _Trainer(dataset, config, bpr, out_dir)
    log = Path(out_dir) / LOSS_LOG
    if log.exists():
        log.unlink()
    logger.info("training %s denoiser for %d steps on %d volumes",
                "conditioned" if config.conditioning else "unconditioned", trainer.total_steps, len(dataset))
    return trainer.run()


def run_dir(checkpoint: Union[str, os.PathLike]) -> Path:
    """Training directory a checkpoint belongs to: the parent of `final` or of the periodic folder."""
    checkpoint = Path(checkpoint)
    if checkpoint.parent.name == PERIODIC_DIR:
        return checkpoint.parent.parent
    return checkpoint.parent


def _incompatible_keys(stored: PretrainConfig, config: PretrainConfig) -> List[str]:
    old, new = stored.model_dump(), config.model_dump()
    return sorted(key for key in old if key not in _RESUMABLE_KEYS and old[key] != new[key])


def resume(
    checkpoint: Union[str, os.PathLike],
    dataset: Sequence[Volume],
    bpr: Optional[BprModel] = None,
    config: Optional[PretrainConfig] = None,
    out_dir: Optional[Union[str, os.PathLike]] = None,
) -> Path:
    """Continue training from ``checkpoint`` up to the step count of ``config``.

    Only the run length and logging keys may differ from the stored training config. A checkpoint
    that already reached the target step is returned unchanged.
    """
    checkpoint = Path(checkpoint)
    manifest = read_manifest(checkpoint)
    if manifest.kind != "denoiser":
        raise CheckpointError(f"{checkpoint} holds a {manifest.kind!r} checkpoint, expected 'denoiser'")
    if not manifest.training:
        raise CheckpointError(f"{checkpoint} has no training config; it cannot be resumed")
    stored = PretrainConfig.model_validate(manifest.training)
    config = config or stored
    mismatched = _incompatible_keys(stored, config)
    if mismatched:
        raise ConfigError(f"cannot resume {checkpoint}: pretrain key(s) {', '.join(mismatched)} differ from the checkpoint")

    target = config.total_steps(len(dataset))
    if manifest.step >= target:
        logger.info("checkpoint %s is already at step %d (target %d); nothing to do", checkpoint, manifest.step, target)
        return checkpoint

    trainer = _Trainer(dataset, config, bpr, out_dir or run_dir(checkpoint))
    trainer.restore(load_checkpoint(checkpoint, expected_kind="denoiser"))
    trainer.truncate_log()
    logger.info("resuming %s from step %d to %d", checkpoint, trainer.step, target)
    return trainer.run()


def read_loss_log(out_dir: Union[str, os.PathLike]) -> pd.DataFrame:
    return pd.read_csv(Path(out_dir) / LOSS_LOG)


def load_backbone(path: Union[str, os.PathLike]) -> Backbone:
    """Frozen denoiser plus its schedule; everything comes from the checkpoint itself."""
    checkpoint = load_checkpoint(path, expected_kind="denoiser")
    manifest = checkpoint.manifest
    if manifest.schedule is None or manifest.training is None:
        raise CheckpointError(f"{path} lacks its schedule or training config")
    config = DenoiserConfig.model_validate(manifest.config)
    model = Denoiser(config)
    model.load_parameter_tensors(checkpoint.group("model"), config)
    model.eval()
    model.requires_grad_(False)
    schedule = make_schedule(manifest.schedule["T"], manifest.schedule["beta_min"], manifest.schedule["beta_max"])
    patch_shape = tuple(manifest.training["patch_shape"])
    return Backbone(model=model, schedule=schedule, config=config, patch_shape=patch_shape,
                    identity=checkpoint_hash(path), path=str(path))


def random_backbone(checkpoint: Union[str, os.PathLike, Backbone], seed: int = 0) -> Backbone:
    """Identically configured but untrained denoiser (the random-initialization baseline)."""
    reference = checkpoint if isinstance(checkpoint, Backbone) else load_backbone(checkpoint)
    model = init_denoiser(reference.config, derive_seed(seed, 2))
    model.eval()
    model.requires_grad_(False)
    digest = hashlib.sha256(json.dumps(reference.config.model_dump(), sort_keys=True).encode()).hexdigest()
    return reference._replace(model=model, identity=f"random-{seed}-{digest[:16]}", path=None)
