"""Training objectives: pixel MSE, class-aware MSE and class-aware self-perceptual loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch

from casdm.diffusion import NoiseSchedule, check_timestep, forward_sample, reconstruct_x0
from casdm.errors import ConsistencyError, ParameterError, ShapeError
from casdm.weights import batch_class_weights, batch_weight_image, pool_weight_tensor

FeatureEncoder = Callable[[torch.Tensor, torch.Tensor], Sequence[torch.Tensor]]


def _labels_tensor(labels) -> torch.Tensor:
    grid = getattr(labels, "classes", labels)
    grid = torch.as_tensor(grid).long()
    return grid.unsqueeze(0) if grid.ndim == 2 else grid


def mse_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    if eps.shape != eps_hat.shape:
        raise ShapeError(f"eps {tuple(eps.shape)} vs eps_hat {tuple(eps_hat.shape)}")
    return ((eps - eps_hat) ** 2).mean()


def camse_loss(
    eps: torch.Tensor,
    eps_hat: torch.Tensor,
    labels,
    num_classes: int | None = None,
    weighting: str = "class",
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Class-aware MSE.

    Each class contributes the mean squared error over its pixels (all
    channels), weighted by the map's inverse-frequency class weight.
    ``weighting="pixel"`` falls back to plain MSE, as in an unweighted
    semantic diffusion model.

    Returns ``(loss, per_class_mse, class_weights)``; the last two are
    ``(B, C)`` and zero for classes absent from an image.
    """
    if eps.shape != eps_hat.shape:
        raise ShapeError(f"eps {tuple(eps.shape)} vs eps_hat {tuple(eps_hat.shape)}")
    labels = _labels_tensor(labels)
    if labels.numel() == 0:
        raise ParameterError("label map has no pixels")
    b, ch = eps.shape[:2]
    if labels.shape != (b, *eps.shape[2:]):
        raise ShapeError(f"labels {tuple(labels.shape)} do not match eps {tuple(eps.shape)}")
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    weights, counts = batch_class_weights(labels, num_classes)
    sq = ((eps - eps_hat) ** 2).sum(dim=1).reshape(b, -1)
    sums = torch.zeros(b, num_classes, dtype=sq.dtype).scatter_add(1, labels.reshape(b, -1), sq)
    denom = (counts * ch).clamp(min=1.0).to(sq.dtype)
    per_class = sums / denom
    if weighting == "pixel":
        loss = sq.sum() / eps.numel()
    elif weighting == "class":
        loss = (per_class * weights.to(sq.dtype)).sum(dim=1).mean()
    else:
        raise ParameterError(f"unknown weighting {weighting!r}")
    return loss, per_class, weights


def casp_loss(
    encoder: FeatureEncoder,
    x_input: torch.Tensor,
    x0_hat: torch.Tensor,
    labels,
    schedule: NoiseSchedule,
    t_prime,
    eps_prime: torch.Tensor,
    num_classes: int | None = None,
    weight_image: torch.Tensor | None = None,
) -> torch.Tensor:
    """Class-aware self-perceptual loss.

    Both the real image and the reconstruction are re-noised with the same
    ``(t_prime, eps_prime)``, passed through ``encoder`` and compared level
    by level under the area-pooled class-weight image. The real branch is
    a constant target.
    """
    if x_input.shape != x0_hat.shape or eps_prime.shape != x_input.shape:
        raise ShapeError("x_input, x0_hat and eps_prime must share a shape")
    check_timestep(schedule, t_prime)
    b = x_input.shape[0]
    if weight_image is None:
        labels = _labels_tensor(labels)
        if num_classes is None:
            num_classes = int(labels.max()) + 1
        weight_image = batch_weight_image(labels, num_classes)
    weight_image = weight_image.to(x_input.dtype)
    tt = torch.as_tensor(t_prime).long().expand(b) if torch.as_tensor(t_prime).ndim == 0 else t_prime
    with torch.no_grad():
        target = encoder(forward_sample(x_input, tt, eps_prime, schedule), tt)
    pred = encoder(forward_sample(x0_hat, tt, eps_prime, schedule), tt)
    if len(target) != len(pred):
        raise ConsistencyError("branches produced different numbers of feature levels")
    total = x_input.new_zeros(())
    for fa, fb in zip(target, pred):
        if fa.shape != fb.shape:
            raise ConsistencyError(f"feature level shapes differ: {tuple(fa.shape)} vs {tuple(fb.shape)}")
        w = pool_weight_tensor(weight_image, fa.shape[-2], fa.shape[-1]).unsqueeze(1)
        total = total + (((fb - fa.detach()) * w) ** 2).sum()
    return total / b


@dataclass
class LossBreakdown:
    camse: torch.Tensor
    casp: torch.Tensor
    total: torch.Tensor
    lambda_casp: float
    t_prime: int
    per_class_camse: dict[int, float] = field(default_factory=dict)

    def record(self, step: int) -> dict:
        return {
            "step": step,
            "camse": float(self.camse.detach()),
            "casp": float(self.casp.detach()),
            "total": float(self.total.detach()),
            "lambda": self.lambda_casp,
            "t_prime": self.t_prime,
        }


class _EncoderCall(torch.nn.Module):
    def __init__(self, model):
        super().__init__()
        self.model = model

    def forward(self, x, t):
        return self.model.encode_features(x, t)


def frozen_encoder(model: torch.nn.Module) -> FeatureEncoder:
    """``model.encode_features`` evaluated with detached parameters.

    Gradients still reach the input (and hence the reconstruction), but the
    perceptual term never moves the encoder weights it is measured with.
    """
    wrapper = _EncoderCall(model)

    def encode(x, t):
        params = {f"model.{k}": v.detach() for k, v in model.named_parameters()}
        buffers = {f"model.{k}": v for k, v in model.named_buffers()}
        return torch.func.functional_call(wrapper, {**params, **buffers}, (x, t))

    return encode


def draw_casp_noise(schedule: NoiseSchedule, shape, dtype, seed: int) -> tuple[int, torch.Tensor]:
    gen = torch.Generator().manual_seed(int(seed))
    t_prime = int(torch.randint(1, schedule.num_steps + 1, (1,), generator=gen))
    return t_prime, torch.randn(shape, generator=gen, dtype=dtype)


def total_loss(
    eps: torch.Tensor,
    eps_hat: torch.Tensor,
    labels,
    encoder: FeatureEncoder | None,
    x_t: torch.Tensor,
    t,
    schedule: NoiseSchedule,
    lambda_casp: float,
    rng_seed: int,
    x0: torch.Tensor | None = None,
    num_classes: int | None = None,
    weighting: str = "class",
    clip_x0: bool = False,
) -> LossBreakdown:
    """``camse + lambda_casp * casp`` for one batch.

    ``x0`` defaults to the exact inversion of ``(x_t, eps)``. With
    ``lambda_casp == 0`` the encoder is never called.
    """
    labels = _labels_tensor(labels)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    camse, per_class, weights = camse_loss(eps, eps_hat, labels, num_classes, weighting)
    present = weights > 0
    breakdown = {
        c: float(per_class[present[:, c], c].detach().mean())
        for c in range(num_classes)
        if bool(present[:, c].any())
    }
    t_prime, eps_prime = draw_casp_noise(schedule, x_t.shape, x_t.dtype, rng_seed)
    if lambda_casp == 0 or encoder is None:
        casp = camse.new_zeros(())
    else:
        if x0 is None:
            x0 = reconstruct_x0(x_t, eps, t, schedule)
        x0_hat = reconstruct_x0(x_t, eps_hat, t, schedule)
        if clip_x0:
            x0_hat = x0_hat.clamp(-1.0, 1.0)
        casp = casp_loss(encoder, x0, x0_hat, labels, schedule, t_prime, eps_prime, num_classes)
    return LossBreakdown(
        camse=camse,
        casp=casp,
        total=camse + lambda_casp * casp,
        lambda_casp=float(lambda_casp),
        t_prime=t_prime,
        per_class_camse=breakdown,
    )
