"""Closed-form diffusion mathematics.

All timesteps are 1-based, ``t in [1, T]``. ``alpha_bars[t - 1]`` is the
cumulative product of ``1 - beta_i`` for ``i <= t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from casdm.errors import NumericalError, ParameterError, ShapeError

Denoiser = Callable[[torch.Tensor, torch.Tensor, object], torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    num_steps: int
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(init=False, repr=False, compare=False)
    alpha_bars: np.ndarray = field(init=False, repr=False, compare=False)
    posterior_sigmas: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind != "linear":
            raise ParameterError(f"unsupported schedule kind {self.kind!r}")
        if int(self.num_steps) != self.num_steps or self.num_steps < 1:
            raise ParameterError(f"num_steps must be a positive integer, got {self.num_steps}")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ParameterError(
                f"need 0 < beta_start <= beta_end < 1, got ({self.beta_start}, {self.beta_end})"
            )
        betas = np.linspace(self.beta_start, self.beta_end, self.num_steps, dtype=np.float64)
        alpha_bars = np.cumprod(1.0 - betas)
        prev = np.concatenate([[1.0], alpha_bars[:-1]])
        # variance of q(x_{t-1} | x_t, x_0); zero at t = 1 since alpha_bar_0 = 1
        var = betas * (1.0 - prev) / (1.0 - alpha_bars)
        for name, arr in (("betas", betas), ("alpha_bars", alpha_bars), ("posterior_sigmas", np.sqrt(var))):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def alpha_bar(self, t: int) -> float:
        """ᾱ_t with the convention ᾱ_0 = 1."""
        if t == 0:
            return 1.0
        check_timestep(self, t)
        return float(self.alpha_bars[t - 1])

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "num_steps": int(self.num_steps),
            "beta_start": float(self.beta_start),
            "beta_end": float(self.beta_end),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(d["kind"], int(d["num_steps"]), float(d["beta_start"]), float(d["beta_end"]))


def make_schedule(
    kind: str = "linear", num_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    return NoiseSchedule(kind, num_steps, beta_start, beta_end)


def check_timestep(schedule: NoiseSchedule, t) -> None:
    ts = torch.as_tensor(t)
    if ts.numel() == 0 or int(ts.min()) < 1 or int(ts.max()) > schedule.num_steps:
        raise IndexError(f"timestep {t} outside [1, {schedule.num_steps}]")


def _gather(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Look up ``values[t - 1]`` and shape it to broadcast against ``like``."""
    table = torch.from_numpy(np.array(values, dtype=np.float64))
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if t.shape[0] != like.shape[0]:
            raise ShapeError(f"got {t.shape[0]} timesteps for batch of {like.shape[0]}")
        out = table[t.long() - 1].reshape(-1, *([1] * (like.ndim - 1)))
    else:
        out = table[int(t) - 1]
    return out.to(like.dtype)


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape {tuple(b.shape)} does not match {tuple(a.shape)}")


def forward_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Draw x_t from q(x_t | x_0) using the supplied noise ``eps``.

    ``t`` is an int or a 1-D tensor with one timestep per batch element.
    """
    check_timestep(schedule, t)
    _same_shape(x0, eps, "eps")
    ab = _gather(schedule.alpha_bars, t, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def reconstruct_x0(x_t: torch.Tensor, eps_hat: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    check_timestep(schedule, t)
    _same_shape(x_t, eps_hat, "eps_hat")
    ab = _gather(schedule.alpha_bars, t, x_t)
    if float(ab.min()) < 1e-12:
        raise NumericalError(f"alpha_bar at t={t} is below 1e-12; x0 is not recoverable")
    return (x_t - (1.0 - ab).sqrt() * eps_hat) / ab.sqrt()


def reverse_step(
    x_t: torch.Tensor, eps_hat: torch.Tensor, t, schedule: NoiseSchedule, noise: torch.Tensor | None = None
) -> torch.Tensor:
    """One ancestral step x_t -> x_{t-1} with the posterior variance."""
    check_timestep(schedule, t)
    _same_shape(x_t, eps_hat, "eps_hat")
    beta = _gather(schedule.betas, t, x_t)
    ab = _gather(schedule.alpha_bars, t, x_t)
    mean = (x_t - beta / (1.0 - ab).sqrt() * eps_hat) / (1.0 - beta).sqrt()
    if noise is None:
        return mean
    _same_shape(x_t, noise, "noise")
    # sigma_1 is exactly zero, so t = 1 adds nothing
    return mean + _gather(schedule.posterior_sigmas, t, x_t) * noise


def sampling_timesteps(schedule: NoiseSchedule, num_inference_steps: int) -> list[int]:
    """Evenly strided descending subset of [1, T] starting at T."""
    T = schedule.num_steps
    if not 1 <= num_inference_steps <= T:
        raise ParameterError(f"num_inference_steps must lie in [1, {T}], got {num_inference_steps}")
    return [T - (i * T) // num_inference_steps for i in range(num_inference_steps)]


def ddim_update(
    x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int, schedule: NoiseSchedule, clip_x0: bool = False
) -> torch.Tensor:
    """Deterministic first-order jump from t to t_prev (t_prev = 0 means clean).

    With ``clip_x0`` the clean estimate is clamped to [-1, 1] and the noise
    estimate re-derived from it before the jump.
    """
    x0_hat = reconstruct_x0(x_t, eps_hat, t, schedule)
    if clip_x0:
        x0_hat = x0_hat.clamp(-1.0, 1.0)
        ab = schedule.alpha_bar(t)
        if ab < 1.0:
            eps_hat = (x_t - ab**0.5 * x0_hat) / (1.0 - ab) ** 0.5
    ab_prev = schedule.alpha_bar(t_prev)
    return ab_prev**0.5 * x0_hat + (1.0 - ab_prev) ** 0.5 * eps_hat


def fast_sample(
    denoiser: Denoiser,
    condition,
    schedule: NoiseSchedule,
    num_inference_steps: int,
    seed: int,
    shape: tuple[int, ...],
    dtype: torch.dtype = torch.float32,
    update=ddim_update,
    x_init: torch.Tensor | None = None,
    clip_x0: bool = False,
) -> torch.Tensor:
    """Deterministic strided sampler; calls ``denoiser`` exactly ``num_inference_steps`` times.

    ``update(x_t, eps_hat, t, t_prev, schedule, clip_x0)`` may be swapped
    for a higher-order solver step.
    """
    steps = sampling_timesteps(schedule, num_inference_steps)
    if x_init is None:
        gen = torch.Generator().manual_seed(int(seed))
        x = torch.randn(shape, generator=gen, dtype=dtype)
    else:
        x = x_init.clone()
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        tt = torch.full((x.shape[0],), t, dtype=torch.long)
        with torch.no_grad():
            eps_hat = denoiser(x, tt, condition)
        if eps_hat.shape != x.shape:
            raise ShapeError(f"denoiser returned {tuple(eps_hat.shape)}, expected {tuple(x.shape)}")
        x = update(x, eps_hat, t, t_prev, schedule, clip_x0)
    return x
