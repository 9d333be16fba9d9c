"""Downstream segmentation protocol: build data-expansion arms, train a small
segmenter on each, and compare per-class IoU/Dice on one shared test split.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from casdm.config import SegmenterSection
from casdm.data import PairSet
from casdm.errors import ParameterError, ProtocolError, TrainingError
from casdm.mapgen import derive_prompt
from casdm.metrics import MetricsReport, SegCounts
from casdm.training import Checkpoint, step_seeds, synthesize_images, synthesize_maps

STRATEGIES = ("original", "naive_dup", "casdm_aug", "casdm_plus_maps")
ARM_TITLES = {
    "original": "Original",
    "naive_dup": "+ Naive Data Augmentation",
    "casdm_aug": "+ CASDM",
    "casdm_plus_maps": "+ CASDM + Synthetic Maps",
}


def _block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.GroupNorm(4, cout), nn.ReLU(),
        nn.Conv2d(cout, cout, 3, padding=1), nn.GroupNorm(4, cout), nn.ReLU(),
    )


class SmallSegmenter(nn.Module):
    """Three-level encoder-decoder with skip connections and per-pixel logits."""

    def __init__(self, num_classes: int, width: int = 16, in_channels: int = 3):
        super().__init__()
        w = width
        self.num_classes = num_classes
        self.enc1, self.enc2, self.enc3 = _block(in_channels, w), _block(w, 2 * w), _block(2 * w, 4 * w)
        self.dec2, self.dec1 = _block(6 * w, 2 * w), _block(3 * w, w)
        self.head = nn.Conv2d(w, num_classes, 1)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        e3 = self.enc3(F.max_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([F.interpolate(e3, scale_factor=2, mode="nearest"), e2], 1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, scale_factor=2, mode="nearest"), e1], 1))
        return self.head(d1)

    @torch.no_grad()
    def predict(self, images: torch.Tensor, batch_size: int = 100) -> torch.Tensor:
        self.eval()
        return torch.cat([self(images[i:i + batch_size]).argmax(1) for i in range(0, len(images), batch_size)])


@dataclass
class ExperimentArm:
    label: str
    strategy: str
    pairs: PairSet
    seg_seed: int = 0
    segmenter: SegmenterSection = field(default_factory=SegmenterSection)

    @property
    def title(self) -> str:
        return ARM_TITLES.get(self.strategy, self.label)


@dataclass
class Generators:
    casdm: Checkpoint | None = None
    mapgen: Checkpoint | None = None
    num_inference_steps: int | None = None
    max_map_attempts: int = 5


def _contains_any(labels: torch.Tensor, classes) -> torch.Tensor:
    hit = torch.zeros(labels.shape[0], dtype=torch.bool)
    for c in classes:
        hit |= (labels == c).flatten(1).any(1)
    return hit


def build_arm(
    base: PairSet,
    strategy: str,
    generators: Generators | None,
    target_classes,
    extra_count: int | None = None,
    seed: int = 0,
    segmenter: SegmenterSection | None = None,
) -> ExperimentArm:
    """Expand ``base`` with ``extra_count`` pairs focused on ``target_classes``.

    ``extra_count`` defaults to ``len(base)``, doubling the training set.
    """
    if strategy not in STRATEGIES:
        raise ParameterError(f"strategy must be one of {STRATEGIES}")
    segmenter = segmenter or SegmenterSection()
    target_classes = list(target_classes)
    n_extra = len(base) if extra_count is None else extra_count
    if strategy == "original":
        return ExperimentArm(strategy, strategy, base, seed, segmenter)
    target_idx = torch.nonzero(_contains_any(base.labels, target_classes)).flatten().tolist()
    if not target_idx:
        raise ProtocolError(f"no training map contains any of the target classes {target_classes}")
    order = np.random.default_rng(seed).permutation(target_idx)
    picks = [int(order[j % len(order)]) for j in range(n_extra)]
    stems = [f"{strategy}_{j:05d}" for j in range(n_extra)]
    if strategy == "naive_dup":
        extra = base.subset(picks)
        extra = PairSet(extra.images.clone(), extra.labels.clone(), base.palette, ["naive_dup"] * n_extra, stems)
        return ExperimentArm(strategy, strategy, base.concat(extra), seed, segmenter)
    if generators is None or generators.casdm is None:
        raise ProtocolError(f"{strategy} needs a trained CASDM checkpoint")
    steps = generators.num_inference_steps
    if strategy == "casdm_aug":
        labels = base.labels[picks]
        images = synthesize_images(generators.casdm, labels, seed, steps)
        extra = PairSet(images, labels, base.palette, ["synthetic_image"] * n_extra, stems)
        return ExperimentArm(strategy, strategy, base.concat(extra), seed, segmenter)
    if generators.mapgen is None:
        raise ProtocolError("casdm_plus_maps needs a trained map-generator checkpoint")
    h, w = base.labels.shape[1:]
    specs = [derive_prompt(base.labels[p].numpy(), base.palette) for p in picks]
    labels = synthesize_maps(generators.mapgen, specs, seed, h, w, steps)
    # regenerate maps that lost every target class, a bounded number of times
    for attempt in range(1, generators.max_map_attempts):
        miss = torch.nonzero(~_contains_any(labels, target_classes)).flatten().tolist()
        if not miss:
            break
        retry = synthesize_maps(generators.mapgen, [specs[i] for i in miss], seed + 7919 * attempt, h, w, steps)
        labels[miss] = retry
    images = synthesize_images(generators.casdm, labels, seed + 1, steps)
    extra = PairSet(images, labels, base.palette, ["synthetic_pair"] * n_extra, stems)
    return ExperimentArm(strategy, strategy, base.concat(extra), seed, segmenter)


@dataclass
class SegmenterRun:
    model: SmallSegmenter
    losses: list[float]


def train_segmenter(arm: ExperimentArm, seed: int | None = None) -> SegmenterRun:
    """Fixed-budget cross-entropy training, deterministic per seed."""
    cfg = arm.segmenter
    seed = arm.seg_seed if seed is None else seed
    pairs = arm.pairs
    torch.manual_seed(seed)
    model = SmallSegmenter(pairs.palette.num_classes, cfg.width)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    losses = []
    model.train()
    for step in range(1, cfg.steps + 1):
        gen = torch.Generator().manual_seed(step_seeds(seed, step, 1)[0])
        idx = torch.randint(0, len(pairs), (cfg.batch_size,), generator=gen)
        loss = F.cross_entropy(model(pairs.images[idx]), pairs.labels[idx])
        if not torch.isfinite(loss):
            raise TrainingError("segmenter loss is not finite", step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    model.eval()
    return SegmenterRun(model, losses)


def default_fit(arm: ExperimentArm, seed: int) -> Callable[[torch.Tensor], torch.Tensor]:
    return train_segmenter(arm, seed).model.predict


@dataclass
class ComparisonReport:
    """Per-arm, per-seed segmentation scores on a single test split."""

    rows: list[dict]
    class_names: dict[int, str]
    target_classes: list[int]
    test_hash: str
    segmenter_hash: str

    def arms(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r["arm"] not in seen:
                seen.append(r["arm"])
        return seen

    def seed_rows(self, arm: str) -> list[dict]:
        return [r for r in self.rows if r["arm"] == arm]

    def reports(self, arm: str) -> list[MetricsReport]:
        return [
            MetricsReport(
                arm_label=f"{arm}/seed{r['seed']}",
                per_class_iou={int(k): v for k, v in r["iou"].items()},
                per_class_dice={int(k): v for k, v in r["dice"].items()},
            )
            for r in self.seed_rows(arm)
        ]

    def target_miou(self, arm: str) -> list[float]:
        """Mean IoU over the target classes, one value per seed."""
        return [float(np.mean([r["iou"].get(str(c), 0.0) for c in self.target_classes])) for r in self.seed_rows(arm)]

    def mean_scores(self, arm: str) -> tuple[dict[int, float], dict[int, float]]:
        rows = self.seed_rows(arm)
        classes = sorted({int(k) for r in rows for k in r["iou"]})
        iou = {c: float(np.mean([r["iou"].get(str(c), 0.0) for r in rows])) for c in classes}
        dice = {c: float(np.mean([r["dice"].get(str(c), 0.0) for r in rows])) for c in classes}
        return iou, dice

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ComparisonReport":
        d = json.loads(text)
        d["class_names"] = {int(k): v for k, v in d["class_names"].items()}
        return cls(**d)

    def render(self, per_seed: bool = True) -> str:
        """Markdown grid: arms by target classes plus "All", mIoU and mDice in percent."""
        cols = [self.class_names[c] for c in self.target_classes] + ["All"]
        head = "| Training Dataset | " + " | ".join(f"{c} mIoU | {c} mDice" for c in cols) + " |"
        lines = [
            f"test split sha256: {self.test_hash}",
            f"segmenter config: {self.segmenter_hash}",
            "",
            head,
            "|" + "---|" * (1 + 2 * len(cols)),
        ]

        def cells(iou, dice):
            vals = []
            for c in self.target_classes:
                vals += [iou.get(c, 0.0), dice.get(c, 0.0)]
            vals += [np.mean(list(iou.values())), np.mean(list(dice.values()))]
            return " | ".join(f"{100 * v:.1f}" for v in vals)

        for arm in self.arms():
            title = ARM_TITLES.get(arm, arm)
            if per_seed:
                for r in self.seed_rows(arm):
                    iou = {int(k): v for k, v in r["iou"].items()}
                    dice = {int(k): v for k, v in r["dice"].items()}
                    lines.append(f"| {title} (seed {r['seed']}) | {cells(iou, dice)} |")
            lines.append(f"| {title} (mean) | {cells(*self.mean_scores(arm))} |")
        return "\n".join(lines) + "\n"


def evaluate_arms(
    arms: list[ExperimentArm],
    test: PairSet,
    seeds,
    target_classes,
    fit: Callable[[ExperimentArm, int], Callable] = default_fit,
) -> ComparisonReport:
    """Train one segmenter per (arm, seed) and score it on ``test``."""
    if not arms:
        raise ParameterError("need at least one arm")
    seg_hashes = {hashlib.sha256(json.dumps(asdict(a.segmenter), sort_keys=True).encode()).hexdigest()[:16] for a in arms}
    if len(seg_hashes) != 1:
        raise ProtocolError("arms use different segmenter settings")
    test_hash = test.content_hash()
    n = test.palette.num_classes
    rows = []
    for arm in arms:
        for seed in seeds:
            predict = fit(arm, seed)
            pred = predict(test.images)
            if test.content_hash() != test_hash:
                raise ProtocolError(f"test split changed while evaluating {arm.label}")
            iou, dice = SegCounts(n).update(pred.numpy(), test.labels.numpy()).scores()
            rows.append({
                "arm": arm.label,
                "seed": int(seed),
                "iou": {str(k): v for k, v in iou.items()},
                "dice": {str(k): v for k, v in dice.items()},
            })
    return ComparisonReport(
        rows=rows,
        class_names={i: name for i, name in enumerate(test.palette.names)},
        target_classes=[int(c) for c in target_classes],
        test_hash=test_hash,
        segmenter_hash=seg_hashes.pop(),
    )
