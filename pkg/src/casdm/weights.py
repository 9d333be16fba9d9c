"""Inverse-frequency class weights and their per-pixel / pooled images.

Weights are computed per conditioning map over the classes present in it:
``w_c = (1 / n_c) / sum_j (1 / n_j)``. The ``H * W`` factor cancels.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

from casdm.errors import ConsistencyError, ParameterError


@dataclass(frozen=True)
class ClassWeights:
    weights: dict[int, float]

    @property
    def present_classes(self) -> frozenset[int]:
        return frozenset(self.weights)

    def __getitem__(self, c: int) -> float:
        return self.weights[c]


def _grid(label_map) -> np.ndarray:
    grid = getattr(label_map, "classes", label_map)
    if isinstance(grid, torch.Tensor):
        grid = grid.detach().cpu().numpy()
    return np.asarray(grid)


def compute_class_weights(label_map) -> ClassWeights:
    grid = _grid(label_map)
    if grid.size == 0:
        raise ParameterError("label map has no pixels")
    ids, counts = np.unique(grid, return_counts=True)
    inv = 1.0 / counts.astype(np.float64)
    w = inv / inv.sum()
    return ClassWeights({int(c): float(v) for c, v in zip(ids, w)})


def expand_to_weight_image(label_map, weights: ClassWeights) -> np.ndarray:
    grid = _grid(label_map)
    missing = set(np.unique(grid).tolist()) - set(weights.weights)
    if missing:
        raise ConsistencyError(f"classes {sorted(missing)} have no weight entry")
    lut = np.zeros(int(grid.max()) + 1, dtype=np.float64)
    for c, v in weights.weights.items():
        if c < lut.size:
            lut[c] = v
    return lut[grid]


@lru_cache(maxsize=64)
def area_pool_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) row-stochastic matrix of exact fractional bin overlaps.

    Every source cell contributes total mass ``dst / src``, so the mean of
    the pooled signal equals the mean of the source.
    """
    if dst < 1 or dst > src:
        raise ParameterError(f"cannot area-pool {src} cells down to {dst}")
    m = np.zeros((dst, src), dtype=np.float64)
    scale = src / dst
    for i in range(dst):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(np.floor(lo)), min(int(np.ceil(hi)), src)):
            m[i, j] = min(hi, j + 1) - max(lo, j)
    m /= scale
    m.setflags(write=False)
    return m


def pool_weights(weight_image: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    img = np.asarray(weight_image, dtype=np.float64)
    h, w = img.shape[-2:]
    if target_h > h or target_w > w:
        raise ParameterError(f"target {(target_h, target_w)} exceeds source {(h, w)}")
    if (target_h, target_w) == (h, w):
        return img.copy()
    return area_pool_matrix(h, target_h) @ img @ area_pool_matrix(w, target_w).T


def pool_weight_tensor(weight_image: torch.Tensor, target_h: int, target_w: int) -> torch.Tensor:
    """Torch version of :func:`pool_weights` for ``(..., H, W)`` tensors."""
    h, w = weight_image.shape[-2:]
    if target_h > h or target_w > w:
        raise ParameterError(f"target {(target_h, target_w)} exceeds source {(h, w)}")
    if (target_h, target_w) == (h, w):
        return weight_image
    ph = torch.tensor(area_pool_matrix(h, target_h), dtype=weight_image.dtype)
    pw = torch.tensor(area_pool_matrix(w, target_w), dtype=weight_image.dtype)
    return ph @ weight_image @ pw.T


def batch_class_weights(labels: torch.Tensor, num_classes: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-image class weights for a ``(B, H, W)`` label batch.

    Returns ``(weights, counts)``, both ``(B, C)`` float64; absent classes
    get weight 0.
    """
    if labels.numel() == 0:
        raise ParameterError("label map has no pixels")
    b = labels.shape[0]
    flat = labels.reshape(b, -1).long()
    if int(flat.max()) >= num_classes or int(flat.min()) < 0:
        raise ParameterError(f"class id outside [0, {num_classes})")
    counts = torch.zeros(b, num_classes, dtype=torch.float64)
    counts.scatter_add_(1, flat, torch.ones_like(flat, dtype=torch.float64))
    inv = torch.where(counts > 0, 1.0 / counts.clamp(min=1.0), torch.zeros_like(counts))
    return inv / inv.sum(dim=1, keepdim=True), counts


def batch_weight_image(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """``(B, H, W)`` float64 image holding each pixel's class weight."""
    w, _ = batch_class_weights(labels, num_classes)
    return torch.gather(w, 1, labels.reshape(labels.shape[0], -1).long()).reshape(labels.shape)
