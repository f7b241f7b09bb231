"""
Experiment orchestration.

``ExperimentRunner`` binds the stages into reproducible runs under one output directory::

    corpus/{train,test,shift}/   synthetic corpora (.v3d + manifest.json)
    bpr/                         body-part regressor checkpoint
    ddpm/                        loss.csv, periodic checkpoints, final/
    features/                    optional feature cache
    probe/                       probe checkpoint
    reports/                     dice.csv, report.md, ablation.csv, compare.csv, compare.md
    resolved_config.ini          snapshot of the config every command ran with

Every stage takes explicit artifact paths when given and falls back to the paths above, so the
CLI commands and the full ``pipeline`` share one implementation.
"""

import json
import logging
import os
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import pandas as pd

from diffpretrain.config import write_config_snapshot
from diffpretrain.errors import ConditioningError
from diffpretrain.models.schemas import DiceReport, ExperimentConfig, PhantomConfig
from diffpretrain.pipeline import bpr as bpr_stage
from diffpretrain.pipeline import pretrain as pretrain_stage
from diffpretrain.pipeline.features import FeatureExtractor, plan_from_config
from diffpretrain.pipeline.probing import (
    Case, ablate_timesteps, compare_backbones, evaluate_many, fit_probe, load_probe, render_comparison,
    render_markdown, report_frame, save_probe, feature_cases,
)
from diffpretrain.storage.feature_cache import FeatureCache
from diffpretrain.synth.corpus import generate_corpus, load_corpus, load_corpus_volumes, write_corpus
from diffpretrain.utils.reports import write_csv
from diffpretrain.utils.seeding import derive_seed
from diffpretrain.volumes.volume import Volume, volume_hash

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]


class ExperimentRunner:
    def __init__(self, config: ExperimentConfig, out_dir: Optional[PathLike] = None):
        self.config = config
        self.out_dir = Path(out_dir or config.global_.output_dir)
        self.stages: List[Dict[str, str]] = []

    def _record(self, stage: str, **details) -> None:
        self.stages.append({"stage": stage, **{k: str(v) for k, v in details.items()}})
        logger.info("stage %s done: %s", stage, ", ".join(f"{k}={v}" for k, v in details.items()))

    def snapshot(self) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        return write_config_snapshot(self.config, self.out_dir)

    def corpus_dir(self, split: str) -> Path:
        return self.out_dir / "corpus" / split

    @property
    def bpr_path(self) -> Path:
        return self.out_dir / "bpr"

    @property
    def ddpm_dir(self) -> Path:
        return self.out_dir / "ddpm"

    @property
    def probe_path(self) -> Path:
        return self.out_dir / "probe"

    @property
    def reports_dir(self) -> Path:
        return self.out_dir / "reports"

    def _phantom_config(self, distribution: str) -> PhantomConfig:
        return PhantomConfig.for_distribution(distribution, shape=list(self.config.synth.shape))

    # -- stages ------------------------------------------------------------------------------

    def synth(self, out_dir: Optional[PathLike] = None) -> Dict[str, Path]:
        """Train and test corpora from distribution A, the shifted corpus from distribution B."""
        synth = self.config.synth
        root = Path(out_dir) if out_dir is not None else self.out_dir / "corpus"
        plans = {
            "train": (synth.n_train, synth.seed, "A"),
            "test": (synth.n_test, derive_seed(synth.seed, 1), "A"),
            "shift": (synth.n_shift, derive_seed(synth.seed, 2), "B"),
        }
        written = {}
        for split, (n, seed, distribution) in plans.items():
            manifest = generate_corpus(n, seed, self._phantom_config(distribution))
            written[split] = write_corpus(manifest, root / split)
        self._record("synth", **{split: n for split, (n, _, _) in plans.items()})
        return written

    def _images(self, corpus: Optional[PathLike], split: str = "train") -> List[Volume]:
        return [image for image, _, _ in load_corpus_volumes(corpus or self.corpus_dir(split))]

    def _cases(self, corpus: Optional[PathLike], split: str) -> List[Case]:
        return [(image, labels) for image, labels, _ in load_corpus_volumes(corpus or self.corpus_dir(split))]

    def _organs(self, corpus: Optional[PathLike], split: str = "train"):
        return load_corpus(corpus or self.corpus_dir(split)).config.organs

    def train_bpr(self, corpus: Optional[PathLike] = None, out: Optional[PathLike] = None) -> Path:
        model = bpr_stage.train_bpr(self._images(corpus), self.config.bpr)
        path = bpr_stage.save_bpr(model, out or self.bpr_path)
        self._record("train-bpr", checkpoint=path, final_loss=f"{model.losses[-1]:.4f}")
        return path

    def _load_bpr(self, bpr: Optional[PathLike]) -> Optional[bpr_stage.BprModel]:
        return bpr_stage.load_bpr(bpr) if bpr is not None else None

    def train_ddpm(self, corpus: Optional[PathLike] = None, bpr: Optional[PathLike] = None,
                   out: Optional[PathLike] = None) -> Path:
        pretrain = self.config.pretrain
        if pretrain.conditioning and bpr is None:
            raise ConditioningError("pretrain.conditioning=true needs a body-part regressor checkpoint (--bpr)")
        path = pretrain_stage.train_ddpm(self._images(corpus), pretrain, self._load_bpr(bpr), out or self.ddpm_dir)
        self._record("train-ddpm", checkpoint=path)
        return path

    def resume(self, checkpoint: PathLike, corpus: Optional[PathLike] = None, bpr: Optional[PathLike] = None,
               out: Optional[PathLike] = None) -> Path:
        path = pretrain_stage.resume(checkpoint, self._images(corpus), self._load_bpr(bpr), self.config.pretrain, out)
        self._record("resume", checkpoint=path)
        return path

    def _backbone(self, checkpoint: Optional[PathLike]) -> pretrain_stage.Backbone:
        return pretrain_stage.load_backbone(checkpoint or self.ddpm_dir / pretrain_stage.FINAL_NAME)

    def _cache(self) -> Optional[FeatureCache]:
        return FeatureCache(self.out_dir / "features") if self.config.extract.cache else None

    def extract(self, checkpoint: Optional[PathLike] = None, corpus: Optional[PathLike] = None,
                bpr: Optional[PathLike] = None) -> Path:
        """Extract features for every corpus item into the feature cache and index the entries."""
        backbone = self._backbone(checkpoint)
        plan = plan_from_config(backbone, self.config.extract)
        bpr_model = self._load_bpr(bpr)
        cache = FeatureCache(self.out_dir / "features")
        extractor = FeatureExtractor(backbone, plan, bpr_model, cache)
        identity = bpr_stage.model_fingerprint(bpr_model) if bpr_model is not None else ""
        index = {}
        for number, image in enumerate(self._images(corpus)):
            features = extractor(image)
            index[number] = FeatureCache.key(backbone.identity, volume_hash(image), plan, identity)
            logger.debug("item %d: %d feature channels", number, features.channels)
        index_path = self.out_dir / "features" / "index.json"
        index_path.parent.mkdir(parents=True, exist_ok=True)
        index_path.write_text(json.dumps({"plan": plan.model_dump(), "entries": index}, indent=2, sort_keys=True),
                              encoding="utf-8")
        self._record("extract", items=len(index), channels=plan.channels)
        return index_path

    def probe(self, checkpoint: Optional[PathLike] = None, corpus: Optional[PathLike] = None,
              bpr: Optional[PathLike] = None, out: Optional[PathLike] = None) -> Path:
        backbone = self._backbone(checkpoint)
        extractor = FeatureExtractor(backbone, plan_from_config(backbone, self.config.extract),
                                     self._load_bpr(bpr), self._cache())
        organs = self._organs(corpus)
        num_classes = max(organ.label for organ in organs) + 1
        probe_config = self.config.probe
        probe = fit_probe(extractor, self._cases(corpus, "train"), probe_config, num_classes, [probe_config.seed])[0]
        path = save_probe(probe, out or self.probe_path)
        self._record("probe", checkpoint=path, final_loss=f"{probe.final_loss:.4f}")
        return path

    def evaluate(self, checkpoint: Optional[PathLike] = None, probe: Optional[PathLike] = None,
                 corpora: Optional[Dict[str, PathLike]] = None, bpr: Optional[PathLike] = None) -> Dict[str, DiceReport]:
        """Dice reports per evaluated corpus; writes dice.csv (first corpus) and report.md (all)."""
        backbone = self._backbone(checkpoint)
        trained = load_probe(probe or self.probe_path)
        extractor = FeatureExtractor(backbone, trained.plan, self._load_bpr(bpr), self._cache())
        if corpora is None:
            corpora = {"test": self.corpus_dir("test")}
            if (self.corpus_dir("shift") / "manifest.json").is_file():
                corpora["shift"] = self.corpus_dir("shift")
        reports = {}
        for name, corpus in corpora.items():
            cases = self._cases(corpus, name)
            reports[name] = evaluate_many([trained], feature_cases(extractor, cases), self._organs(corpus))[0]
        first = next(iter(reports.values()))
        write_csv(report_frame(first), self.reports_dir / "dice.csv")
        (self.reports_dir / "report.md").write_text(render_markdown(reports, label="Split"), encoding="utf-8")
        self._record("eval", **{name: f"{report.average:.4f}" for name, report in reports.items()})
        return reports

    def _timesteps(self, backbone: pretrain_stage.Backbone) -> List[int]:
        T = backbone.schedule.T
        return [max(1, min(T, round(fraction * T))) for fraction in self.config.ablate.t_fractions]

    def ablate(self, checkpoint: Optional[PathLike] = None, train: Optional[PathLike] = None,
               test: Optional[PathLike] = None, bpr: Optional[PathLike] = None) -> pd.DataFrame:
        backbone = self._backbone(checkpoint)
        table = ablate_timesteps(
            backbone, self._cases(train, "train"), self._cases(test, "test"), self._timesteps(backbone),
            self.config.probe, self._organs(train), self.config.extract, self._load_bpr(bpr),
            seeds=self.config.ablate.seeds,
        )
        write_csv(table, self.reports_dir / "ablation.csv")
        self._record("ablate", rows=len(table))
        return table

    def compare(self, checkpoints: Union[PathLike, Sequence[PathLike], None] = None,
                train: Optional[PathLike] = None, test: Optional[PathLike] = None,
                shift: Optional[PathLike] = None, bpr: Optional[PathLike] = None) -> pd.DataFrame:
        """Random initialization against one or more pretrained backbones, on distributions A and B.

        Unconditioned checkpoints are reported as ``pretrained`` and conditioned ones as
        ``pretrained_bpr``; repeated names get a numeric suffix. The random baseline shares the
        architecture of the first unconditioned checkpoint, or of the first checkpoint when all
        are conditioned.
        """
        if checkpoints is None or isinstance(checkpoints, (str, os.PathLike)):
            checkpoints = [checkpoints]
        pretrained = [self._backbone(path) for path in checkpoints]
        reference = next((b for b in pretrained if not b.conditioned), pretrained[0])
        backbones = {"random": pretrain_stage.random_backbone(reference, seed=self.config.global_.seed)}
        for backbone in pretrained:
            base = "pretrained_bpr" if backbone.conditioned else "pretrained"
            name, suffix = base, 2
            while name in backbones:
                name, suffix = f"{base}_{suffix}", suffix + 1
            backbones[name] = backbone

        shift_dir = Path(shift) if shift is not None else self.corpus_dir("shift")
        tests = {"A": self._cases(test, "test")}
        if (shift_dir / "manifest.json").is_file():
            tests["B"] = self._cases(shift_dir, "shift")
        table = compare_backbones(
            backbones, self._cases(train, "train"), tests,
            self.config.probe, self._organs(train), self.config.extract, self._load_bpr(bpr),
            seeds=self.config.ablate.seeds,
        )
        write_csv(table, self.reports_dir / "compare.csv")
        (self.reports_dir / "compare.md").write_text(render_comparison(table), encoding="utf-8")
        self._record("compare", backbones=list(backbones), rows=len(table))
        return table

    def pipeline(self) -> Dict[str, DiceReport]:
        """synth -> (bpr) -> ddpm -> probe -> eval with the default artifact layout."""
        self.synth()
        bpr = self.train_bpr() if self.config.pretrain.conditioning else None
        checkpoint = self.train_ddpm(bpr=bpr)
        self.probe(checkpoint=checkpoint, bpr=bpr)
        return self.evaluate(checkpoint=checkpoint, bpr=bpr)

