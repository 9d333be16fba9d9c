"""Image-quality and segmentation metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from casdm.errors import ParameterError, ShapeError

PSNR_CAP = 100.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WINDOW = 11


def psnr(a, b, cap: float = PSNR_CAP, data_range: float = 2.0) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"{a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-12:
        return cap
    return min(cap, 10.0 * np.log10(data_range**2 / mse))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = 1.5) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - size // 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def _ssim_terms(x: torch.Tensor, y: torch.Tensor, data_range: float) -> tuple[torch.Tensor, torch.Tensor]:
    c = x.shape[1]
    win = _gaussian_window().to(x.dtype).expand(c, 1, SSIM_WINDOW, SSIM_WINDOW)
    filt = lambda z: F.conv2d(z, win, groups=c)
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x**2
    syy = filt(y * y) - mu_y**2
    sxy = filt(x * y) - mu_x * mu_y
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)
    return (lum * cs).mean(dim=(-2, -1)), cs.mean(dim=(-2, -1))


def max_ms_ssim_scales(height: int, width: int) -> int:
    s = 0
    while min(height, width) >= 2**s * SSIM_WINDOW:
        s += 1
    return s


def ms_ssim(a, b, scales: int = 3, data_range: float = 2.0) -> float:
    """Multi-scale SSIM of two ``(C, H, W)`` images, channel-averaged.

    Uses the canonical per-scale exponents truncated to ``scales`` and
    renormalized; negative contrast-structure terms are clamped at zero.
    """
    x = torch.as_tensor(np.asarray(a), dtype=torch.float64)
    y = torch.as_tensor(np.asarray(b), dtype=torch.float64)
    if x.shape != y.shape:
        raise ShapeError(f"{tuple(x.shape)} vs {tuple(y.shape)}")
    if x.ndim == 2:
        x, y = x[None], y[None]
    if not 1 <= scales <= len(MS_SSIM_WEIGHTS):
        raise ParameterError(f"scales must be in [1, {len(MS_SSIM_WEIGHTS)}]")
    if min(x.shape[-2:]) < 2 ** (scales - 1) * SSIM_WINDOW:
        raise ParameterError(f"{tuple(x.shape[-2:])} image too small for {scales} scales")
    w = torch.tensor(MS_SSIM_WEIGHTS[:scales], dtype=torch.float64)
    w = w / w.sum()
    x, y = x[None], y[None]
    vals = []
    for s in range(scales):
        ssim_s, cs_s = _ssim_terms(x, y, data_range)
        vals.append(ssim_s if s == scales - 1 else cs_s)
        if s < scales - 1:
            x, y = F.avg_pool2d(x, 2), F.avg_pool2d(y, 2)
    stack = torch.stack(vals, dim=0).clamp(min=0.0)  # (scales, 1, C)
    per_channel = torch.prod(stack ** w[:, None, None], dim=0)
    return float(per_channel.mean())


class RandomConvFeatures(nn.Module):
    """Frozen, seeded random conv net used as a desk-scale FID extractor."""

    def __init__(self, seed: int = 0, in_channels: int = 3, width: int = 32, out_dim: int = 64):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.seed = seed
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(width, out_dim, 3, stride=2, padding=1), nn.ReLU(),
        )
        with torch.no_grad():
            for p in self.net.parameters():
                p.copy_(torch.randn(p.shape, generator=gen) * (1.0 / np.sqrt(max(1, p[0].numel())) if p.ndim > 1 else 0.1))
        self.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> torch.Tensor:
        f = self.net(images.float())
        return torch.cat([f.mean(dim=(-2, -1)), f.amax(dim=(-2, -1))], dim=1).double()


def _as_features(images, extractor: Callable | None) -> np.ndarray:
    if extractor is None:
        return np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    x = torch.as_tensor(np.asarray(images)) if not isinstance(images, torch.Tensor) else images
    feats = extractor(x)
    return np.asarray(feats.detach().cpu().numpy() if isinstance(feats, torch.Tensor) else feats, dtype=np.float64)


def frechet_from_features(fa: np.ndarray, fb: np.ndarray, eps: float = 1e-6) -> float:
    fa = np.asarray(fa, dtype=np.float64).reshape(len(fa), -1)
    fb = np.asarray(fb, dtype=np.float64).reshape(len(fb), -1)
    if len(fa) < 2 or len(fb) < 2:
        raise ParameterError("each set needs at least 2 samples")
    mu_a, mu_b = fa.mean(0), fb.mean(0)
    cov_a = np.atleast_2d(np.cov(fa, rowvar=False))
    cov_b = np.atleast_2d(np.cov(fb, rowvar=False))
    # regularize only rank-deficient covariances
    for cov in (cov_a, cov_b):
        ev = np.linalg.eigvalsh(cov)
        if ev.min() <= 1e-10 * max(1.0, ev.max()):
            cov += eps * np.eye(cov.shape[0])
    # tr sqrt(A B) = tr sqrt(A^1/2 B A^1/2), a symmetric PSD matrix
    ev_a, vec_a = np.linalg.eigh(cov_a)
    sqrt_a = (vec_a * np.sqrt(np.clip(ev_a, 0, None))) @ vec_a.T
    inner = sqrt_a @ cov_b @ sqrt_a
    ev = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = float(np.sqrt(np.clip(ev, 0, None)).sum())
    diff = mu_a - mu_b
    return float(max(0.0, diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt))


def frechet_feature_distance(set_a, set_b, extractor: Callable | None = None) -> float:
    """Fréchet distance between Gaussian fits of extracted features.

    ``extractor=None`` treats each sample as its own feature vector.
    """
    return frechet_from_features(_as_features(set_a, extractor), _as_features(set_b, extractor))


@dataclass
class SegCounts:
    """Micro-accumulated per-class pixel counts over an evaluation set."""

    num_classes: int
    intersection: np.ndarray = None
    pred_area: np.ndarray = None
    gt_area: np.ndarray = None

    def __post_init__(self):
        for name in ("intersection", "pred_area", "gt_area"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.num_classes, dtype=np.int64))

    def update(self, pred, gt) -> "SegCounts":
        pred = np.asarray(getattr(pred, "classes", pred), dtype=np.int64).ravel()
        gt = np.asarray(getattr(gt, "classes", gt), dtype=np.int64).ravel()
        if pred.shape != gt.shape:
            raise ShapeError(f"{pred.shape} vs {gt.shape}")
        n = self.num_classes
        self.intersection += np.bincount(gt[pred == gt], minlength=n)[:n]
        self.pred_area += np.bincount(pred, minlength=n)[:n]
        self.gt_area += np.bincount(gt, minlength=n)[:n]
        return self

    @property
    def union(self) -> np.ndarray:
        return self.pred_area + self.gt_area - self.intersection

    def scores(self, classes: Iterable[int] | None = None) -> tuple[dict[int, float], dict[int, float]]:
        classes = range(self.num_classes) if classes is None else classes
        iou, dice = {}, {}
        for c in classes:
            u = int(self.union[c])
            if u == 0:
                continue  # absent from both prediction and ground truth
            i = int(self.intersection[c])
            iou[c] = i / u
            dice[c] = 2 * i / (int(self.pred_area[c]) + int(self.gt_area[c]))
        return iou, dice


def segmentation_scores(pred, gt, classes: Iterable[int] | None = None, num_classes: int | None = None):
    """Per-class IoU and Dice, micro-accumulated over one map or a batch of maps."""
    pred = np.asarray(getattr(pred, "classes", pred))
    gt = np.asarray(getattr(gt, "classes", gt))
    if pred.shape != gt.shape:
        raise ShapeError(f"{pred.shape} vs {gt.shape}")
    if num_classes is None:
        num_classes = int(max(pred.max(initial=0), gt.max(initial=0))) + 1
        if classes is not None:
            num_classes = max(num_classes, max(classes, default=-1) + 1)
    return SegCounts(num_classes).update(pred, gt).scores(classes)


@dataclass
class MetricsReport:
    arm_label: str
    ffd: float = float("nan")
    mean_ms_ssim: float = float("nan")
    mean_psnr: float = float("nan")
    per_class_iou: dict[int, float] = field(default_factory=dict)
    per_class_dice: dict[int, float] = field(default_factory=dict)

    @property
    def miou(self) -> float:
        return float(np.mean(list(self.per_class_iou.values()))) if self.per_class_iou else float("nan")

    @property
    def mdice(self) -> float:
        return float(np.mean(list(self.per_class_dice.values()))) if self.per_class_dice else float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_iou"] = {str(k): v for k, v in self.per_class_iou.items()}
        d["per_class_dice"] = {str(k): v for k, v in self.per_class_dice.items()}
        d["miou"], d["mdice"] = self.miou, self.mdice
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            arm_label=d["arm_label"],
            ffd=d["ffd"],
            mean_ms_ssim=d["mean_ms_ssim"],
            mean_psnr=d["mean_psnr"],
            per_class_iou={int(k): v for k, v in d["per_class_iou"].items()},
            per_class_dice={int(k): v for k, v in d["per_class_dice"].items()},
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True) + "\n"


def quality_report(real, synthetic, arm_label: str, extractor: Callable | None = None, scales: int | None = None) -> MetricsReport:
    """FFD over the two sets plus per-pair MS-SSIM and PSNR averaged over pairs."""
    real = torch.as_tensor(real)
    synthetic = torch.as_tensor(synthetic)
    if real.shape != synthetic.shape:
        raise ShapeError(f"{tuple(real.shape)} vs {tuple(synthetic.shape)}")
    if extractor is None:
        extractor = RandomConvFeatures()
    if scales is None:
        scales = min(3 if max(real.shape[-2:]) <= 64 else 5, max_ms_ssim_scales(*real.shape[-2:]))
    ssims = [ms_ssim(r.numpy(), s.numpy(), scales) for r, s in zip(real, synthetic)]
    psnrs = [psnr(r.numpy(), s.numpy()) for r, s in zip(real, synthetic)]
    return MetricsReport(
        arm_label=arm_label,
        ffd=frechet_feature_distance(real, synthetic, extractor),
        mean_ms_ssim=float(np.mean(ssims)),
        mean_psnr=float(np.mean(psnrs)),
    )


def render_quality_table(reports: list[MetricsReport]) -> str:
    lines = ["| Method | FFD ↓ | Mean MS-SSIM ↑ | Mean PSNR ↑ |", "|---|---|---|---|"]
    for r in reports:
        lines.append(f"| {r.arm_label} | {r.ffd:.3f} | {r.mean_ms_ssim:.4f} | {r.mean_psnr:.2f} |")
    return "\n".join(lines) + "\n"


def class_color_agreement(images, labels, reference_colors) -> tuple[float, dict[tuple[int, int], int]]:
    """Share of (image, class) regions whose mean color is nearest to that class's reference color.

    ``images`` are ``(N, 3, H, W)`` in [-1, 1]; ``reference_colors`` are
    ``(C, 3)`` in 0..255. Also returns a count of confusions keyed
    ``(true_class, nearest_class)``.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    ref = np.asarray(reference_colors, dtype=np.float64) / 127.5 - 1.0
    hits = total = 0
    confusions: dict[tuple[int, int], int] = {}
    for img, lab in zip(images, labels):
        for c in np.unique(lab):
            mean = img[:, lab == c].mean(axis=1)
            nearest = int(((ref - mean) ** 2).sum(axis=1).argmin())
            total += 1
            if nearest == c:
                hits += 1
            else:
                confusions[(int(c), nearest)] = confusions.get((int(c), nearest), 0) + 1
    if total == 0:
        raise ParameterError("no regions to score")
    return hits / total, confusions
