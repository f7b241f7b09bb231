import logging
import os
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict
from tqdm import tqdm

from diffpretrain.errors import NumericError, ProbeError, ShapeMismatchError
from diffpretrain.models.schemas import (
    SIZE_GROUPS, DiceReport, ExtractConfig, ExtractionPlan, OrganSpec, ProbeConfig, TimestepMode,
)
from diffpretrain.networks.base import load_named_tensors, named_tensors
from diffpretrain.pipeline.bpr import BprModel
from diffpretrain.pipeline.features import FeatureExtractor, plan_from_config
from diffpretrain.pipeline.pretrain import Backbone
from diffpretrain.storage.checkpoint import load_checkpoint, save_checkpoint
from diffpretrain.utils.reports import frame_to_markdown
from diffpretrain.utils.seeding import derive_seed, make_generator
from diffpretrain.volumes.volume import FeatureVolume, Volume, VolumeKind

logger = logging.getLogger(__name__)

Case = Tuple[Volume, Volume]
REPORT_COLUMNS = ["Small", "Medium", "Big", "Avg"]


class ProbeHead(nn.Module):
    """1x1x1 conv -> ReLU -> 3x3x3 conv -> ReLU -> 1x1x1 conv to class logits."""

    def __init__(self, in_channels: int, num_classes: int, hidden: int = 64):
        super().__init__()
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.net = nn.Sequential(
            nn.Conv3d(in_channels, hidden, 1),
            nn.ReLU(),
            nn.Conv3d(hidden, hidden, 3, padding=1),
            nn.ReLU(),
            nn.Conv3d(hidden, num_classes, 1),
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.net(features)


class Probe(BaseModel):
    """Trained head(s): one head on all channels (concat) or one per timestep block (ensemble)."""

    heads: List[ProbeHead]
    mode: TimestepMode = "concat"
    plan: ExtractionPlan
    num_classes: int
    config: ProbeConfig
    final_loss: Optional[float] = None

    model_config = ConfigDict(arbitrary_types_allowed=True)

    def inputs(self, features: FeatureVolume) -> List[np.ndarray]:
        if self.mode == "ensemble":
            return [features.timestep_block(i) for i in range(len(features.plan.timesteps))]
        return [features.data]


def soft_dice_loss(logits: torch.Tensor, target: torch.Tensor, num_classes: int, smooth: float = 1.0) -> torch.Tensor:
    """1 - soft Dice, averaged over the foreground classes."""
    probs = F.softmax(logits, dim=1)
    onehot = F.one_hot(target, num_classes).movedim(-1, 1).to(probs.dtype)
    dims = (0,) + tuple(range(2, probs.dim()))
    intersection = (probs * onehot).sum(dims)
    denominator = probs.sum(dims) + onehot.sum(dims)
    per_class = 1.0 - (2.0 * intersection + smooth) / (denominator + smooth)
    return per_class[1:].mean()


def _check_pairs(arrays: Sequence[np.ndarray], labels: Sequence[Volume], num_classes: int) -> None:
    if not arrays:
        raise ProbeError("probe training needs at least one labelled feature volume")
    if len(arrays) != len(labels):
        raise ShapeMismatchError(f"{len(arrays)} feature volumes but {len(labels)} label volumes")
    channels = arrays[0].shape[0]
    if channels == 0:
        raise ProbeError("feature volumes have zero channels; select at least one pyramid level")
    for index, (array, label) in enumerate(zip(arrays, labels)):
        if array.shape[0] != channels:
            raise ShapeMismatchError(f"feature volume {index} has {array.shape[0]} channels, expected {channels}")
        if tuple(array.shape[1:]) != label.shape:
            raise ShapeMismatchError(f"features {tuple(array.shape[1:])} and labels {label.shape} differ in shape (case {index})")
        if int(label.data.max()) >= num_classes:
            raise ProbeError(f"label volume {index} holds class {int(label.data.max())} but num_classes={num_classes}")


def _train_head(arrays: Sequence[np.ndarray], labels: Sequence[Volume], config: ProbeConfig,
                num_classes: int, seed: int, name: str) -> Tuple[ProbeHead, float]:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, 1))
        head = ProbeHead(arrays[0].shape[0], num_classes, config.hidden)
    optimizer = torch.optim.Adam(head.parameters(), lr=config.learning_rate)
    generator = make_generator(derive_seed(seed, 2))
    last_finite = None
    head.train()
    for step in tqdm(range(1, config.steps + 1), desc=name, disable=not config.progress):
        index = int(torch.randint(len(arrays), (1,), generator=generator))
        shape = labels[index].shape
        crop = [min(c, n) for c, n in zip(config.crop_shape, shape)]
        origin = [int(torch.randint(n - c + 1, (1,), generator=generator)) for n, c in zip(shape, crop)]
        window = tuple(slice(o, o + c) for o, c in zip(origin, crop))
        x = torch.from_numpy(np.ascontiguousarray(arrays[index][(slice(None),) + window], dtype=np.float32))[None]
        y = torch.from_numpy(labels[index].data[window].astype(np.int64))[None]

        logits = head(x)
        loss = config.ce_weight * F.cross_entropy(logits, y) + config.dice_weight * soft_dice_loss(logits, y, num_classes)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite probe loss at step {step} (case {index}); last finite loss {last_finite}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        last_finite = float(loss)
        if step % config.log_every == 0:
            logger.info("%s step %d/%d loss %.4f", name, step, config.steps, last_finite)
    head.eval()
    return head, last_finite


def train_probe(
    features: Sequence[FeatureVolume],
    labels: Sequence[Volume],
    config: Optional[ProbeConfig] = None,
    num_classes: Optional[int] = None,
) -> Probe:
    config = config or ProbeConfig()
    if not features:
        raise ProbeError("probe training needs at least one labelled feature volume")
    if num_classes is None:
        num_classes = int(max(int(label.data.max()) for label in labels)) + 1
    plan = features[0].plan
    if any(f.plan != plan for f in features):
        raise ProbeError("all feature volumes must come from the same extraction plan")
    _check_pairs([f.data for f in features], labels, num_classes)

    if config.timestep_mode == "ensemble":
        blocks = range(len(plan.timesteps))
    else:
        blocks = [None]
    heads, losses = [], []
    for block in blocks:
        if block is None:
            arrays, name = [f.data for f in features], "probe"
        else:
            arrays, name = [f.timestep_block(block) for f in features], f"probe[t={plan.timesteps[block]}]"
        head, loss = _train_head(arrays, labels, config, num_classes, derive_seed(config.seed, 0 if block is None else block), name)
        heads.append(head)
        losses.append(loss)
    return Probe(heads=heads, mode=config.timestep_mode, plan=plan, num_classes=num_classes,
                 config=config, final_loss=float(np.mean(losses)))


def class_probabilities(probe: Union[Probe, ProbeHead], features: FeatureVolume) -> np.ndarray:
    """Per-voxel class scores (num_classes, z, y, x): logits for one head, mean softmax for an ensemble."""
    if isinstance(probe, ProbeHead):
        heads, inputs = [probe], [features.data]
    else:
        heads, inputs = probe.heads, probe.inputs(features)
    if len(heads) != len(inputs):
        raise ProbeError(f"probe has {len(heads)} heads for {len(inputs)} timestep blocks")
    outputs = []
    with torch.no_grad():
        for head, array in zip(heads, inputs):
            if array.shape[0] != head.in_channels:
                raise ProbeError(f"probe expects {head.in_channels} feature channels, got {array.shape[0]}")
            logits = head(torch.from_numpy(np.ascontiguousarray(array, dtype=np.float32))[None])[0]
            outputs.append(logits if len(heads) == 1 else F.softmax(logits, dim=0))
    return torch.stack(outputs).mean(dim=0).numpy()


def segment(probe: Union[Probe, ProbeHead], features: FeatureVolume) -> Volume:
    scores = class_probabilities(probe, features)
    # np.argmax returns the first maximal index, so ties resolve to the lower class id
    labels = np.argmax(scores, axis=0).astype(np.uint8)
    return Volume(data=labels, spacing=features.spacing, kind=VolumeKind.LABEL)


def dice(pred: Union[Volume, np.ndarray], gt: Union[Volume, np.ndarray], class_id: int) -> float:
    pred = pred.data if isinstance(pred, Volume) else np.asarray(pred)
    gt = gt.data if isinstance(gt, Volume) else np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    p, g = pred == class_id, gt == class_id
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def group_report(per_class: Mapping[str, float], grouping: Mapping[str, str]) -> DiceReport:
    unassigned = [name for name in per_class if name not in grouping]
    if unassigned:
        raise ProbeError(f"class(es) without a size group: {', '.join(unassigned)}")
    if not per_class:
        raise ProbeError("no classes to report")
    groups = {}
    for group in SIZE_GROUPS:
        members = [value for name, value in per_class.items() if grouping[name] == group]
        if members:
            groups[group] = float(np.mean(members))
    return DiceReport(
        per_class={name: float(v) for name, v in per_class.items()},
        grouping={name: grouping[name] for name in per_class},
        groups=groups,
        average=float(np.mean(list(per_class.values()))),
    )


def merge_columns(per_label: Mapping[int, float], organs: Sequence[OrganSpec]) -> Tuple[Dict[str, float], Dict[str, str]]:
    """Collapse organs sharing a report name (paired organs) into one averaged column."""
    members: "OrderedDict[str, List[float]]" = OrderedDict()
    grouping: Dict[str, str] = {}
    for organ in organs:
        members.setdefault(organ.report_name, []).append(per_label[organ.label])
        previous = grouping.setdefault(organ.report_name, organ.size_group)
        if previous != organ.size_group:
            raise ProbeError(f"report column {organ.report_name} merges organs from different size groups")
    return {name: float(np.mean(values)) for name, values in members.items()}, grouping


def evaluate_many(probes: Sequence[Union[Probe, ProbeHead]], cases: Iterable[Tuple[FeatureVolume, Volume]],
                  organs: Sequence[OrganSpec]) -> List[DiceReport]:
    """Per-probe DiceReports over one pass of ``cases``; Dice is averaged over volumes per organ."""
    scores = [{organ.label: [] for organ in organs} for _ in probes]
    count = 0
    for features, labels in cases:
        for probe, table in zip(probes, scores):
            pred = segment(probe, features)
            for organ in organs:
                table[organ.label].append(dice(pred, labels, organ.label))
        count += 1
    if count == 0:
        raise ProbeError("evaluation needs at least one labelled test volume")
    reports = []
    for table in scores:
        columns, grouping = merge_columns({label: float(np.mean(v)) for label, v in table.items()}, organs)
        reports.append(group_report(columns, grouping))
    return reports


def evaluate(probe: Union[Probe, ProbeHead], cases: Iterable[Tuple[FeatureVolume, Volume]],
             organs: Sequence[OrganSpec]) -> DiceReport:
    return evaluate_many([probe], cases, organs)[0]


def report_frame(report: DiceReport) -> pd.DataFrame:
    """Rows for dice.csv: class,dice,group."""
    rows = [{"class": name, "dice": value, "group": report.grouping[name]} for name, value in report.per_class.items()]
    rows += [{"class": group, "dice": value, "group": "group"} for group, value in report.groups.items()]
    rows.append({"class": "Avg", "dice": report.average, "group": "all"})
    return pd.DataFrame(rows, columns=["class", "dice", "group"])


def group_row(report: DiceReport) -> Dict[str, float]:
    row = {group: report.groups.get(group, float("nan")) for group in SIZE_GROUPS}
    row["Avg"] = report.average
    return row


def render_markdown(reports: Mapping[str, DiceReport], label: str = "Model") -> str:
    """One row per model, one column per reported class, Avg last; Dice in percent."""
    rows = []
    for name, report in reports.items():
        row = {label: name}
        row.update({column: 100.0 * value for column, value in report.per_class.items()})
        row["Avg"] = 100.0 * report.average
        rows.append(row)
    return frame_to_markdown(pd.DataFrame(rows), digits=1)


def save_probe(probe: Probe, path: Union[str, os.PathLike]) -> Path:
    tensors = {}
    for index, head in enumerate(probe.heads):
        tensors.update({f"head{index}/{name}": t for name, t in named_tensors(head).items()})
    return save_checkpoint(
        path, "probe", tensors, config=probe.config.model_dump(),
        extra={"mode": probe.mode, "num_classes": probe.num_classes, "plan": probe.plan.model_dump(),
               "in_channels": [head.in_channels for head in probe.heads], "final_loss": probe.final_loss},
    )


def load_probe(path: Union[str, os.PathLike]) -> Probe:
    checkpoint = load_checkpoint(path, expected_kind="probe")
    config = ProbeConfig.model_validate(checkpoint.manifest.config)
    extra = checkpoint.manifest.extra
    heads = []
    for index, in_channels in enumerate(extra["in_channels"]):
        head = ProbeHead(in_channels, extra["num_classes"], config.hidden)
        load_named_tensors(head, checkpoint.group(f"head{index}"))
        head.eval()
        heads.append(head)
    return Probe(heads=heads, mode=extra["mode"], plan=ExtractionPlan.model_validate(extra["plan"]),
                 num_classes=extra["num_classes"], config=config, final_loss=extra.get("final_loss"))


def feature_cases(extractor: FeatureExtractor, cases: Iterable[Case]) -> Iterable[Tuple[FeatureVolume, Volume]]:
    for image, labels in cases:
        yield extractor(image), labels


def fit_probe(extractor: FeatureExtractor, cases: Sequence[Case], config: ProbeConfig, num_classes: int,
              seeds: Sequence[int]) -> List[Probe]:
    """Train one probe per seed on features of the first ``config.train_volumes`` cases."""
    train = list(cases)[:config.train_volumes]
    features = [extractor(image) for image, _ in train]
    labels = [label for _, label in train]
    return [train_probe(features, labels, config.model_copy(update={"seed": seed}), num_classes) for seed in seeds]


def _mean_rows(reports: Sequence[DiceReport]) -> Dict[str, float]:
    rows = pd.DataFrame([group_row(report) for report in reports], columns=REPORT_COLUMNS)
    return {column: float(rows[column].mean()) for column in REPORT_COLUMNS}


def ablate_timesteps(
    backbone: Backbone,
    train_cases: Sequence[Case],
    test_cases: Sequence[Case],
    t_candidates: Sequence[int],
    probe_config: ProbeConfig,
    organs: Sequence[OrganSpec],
    extract_config: Optional[ExtractConfig] = None,
    bpr: Optional[BprModel] = None,
    seeds: Sequence[int] = (0,),
) -> pd.DataFrame:
    """One row per candidate timestep: group Dice and Avg of single-timestep probes, averaged over seeds."""
    extract_config = extract_config or ExtractConfig()
    num_classes = max(organ.label for organ in organs) + 1
    rows = []
    for t in t_candidates:
        extractor = FeatureExtractor(backbone, plan_from_config(backbone, extract_config, [t]), bpr)
        probes = fit_probe(extractor, train_cases, probe_config, num_classes, seeds)
        reports = evaluate_many(probes, feature_cases(extractor, test_cases), organs)
        row = {"t": int(t)}
        row.update(_mean_rows(reports))
        logger.info("ablation t=%d: Avg Dice %.4f over %d seed(s)", t, row["Avg"], len(seeds))
        rows.append(row)
    return pd.DataFrame(rows, columns=["t"] + REPORT_COLUMNS)


def compare_backbones(
    backbones: Mapping[str, Backbone],
    train_cases: Sequence[Case],
    test_cases: Mapping[str, Sequence[Case]],
    probe_config: ProbeConfig,
    organs: Sequence[OrganSpec],
    extract_config: Optional[ExtractConfig] = None,
    bpr: Optional[BprModel] = None,
    seeds: Sequence[int] = (0,),
) -> pd.DataFrame:
    """Rows backbone,split,Small,Medium,Big,Avg; with splits A and B a ``drop`` row holds A minus B.

    Probes are always trained on ``train_cases`` (distribution A); each test split is evaluated
    with the same probes.
    """
    extract_config = extract_config or ExtractConfig()
    num_classes = max(organ.label for organ in organs) + 1
    rows = []
    for name, backbone in backbones.items():
        extractor = FeatureExtractor(backbone, plan_from_config(backbone, extract_config),
                                     bpr if backbone.conditioned else None)
        probes = fit_probe(extractor, train_cases, probe_config, num_classes, seeds)
        by_split = {}
        for split, cases in test_cases.items():
            by_split[split] = _mean_rows(evaluate_many(probes, feature_cases(extractor, cases), organs))
            rows.append({"backbone": name, "split": split, **by_split[split]})
            logger.info("%s on split %s: Avg Dice %.4f", name, split, by_split[split]["Avg"])
        if "A" in by_split and "B" in by_split:
            drop = {column: by_split["A"][column] - by_split["B"][column] for column in REPORT_COLUMNS}
            rows.append({"backbone": name, "split": "drop", **drop})
    return pd.DataFrame(rows, columns=["backbone", "split"] + REPORT_COLUMNS)


def render_comparison(table: pd.DataFrame) -> str:
    """One pipe table for ``compare_backbones`` rows: a row per split and size group, a column per
    backbone. Dice in percent; ``drop`` rows are percentage points."""
    backbones = list(dict.fromkeys(table["backbone"]))
    indexed = table.set_index(["backbone", "split"])
    rows = []
    for split in dict.fromkeys(table["split"]):
        for group in REPORT_COLUMNS:
            row = {"split": split, "group": group}
            for name in backbones:
                key = (name, split)
                row[name] = 100.0 * float(indexed.loc[key, group]) if key in indexed.index else float("nan")
            rows.append(row)
    return frame_to_markdown(pd.DataFrame(rows, columns=["split", "group", *backbones]), digits=1)
