"""Generator training loops, checkpoints and batch synthesis.

Every random draw in step ``s`` comes from generators seeded by
``(seed, s)``, so a run resumed from a checkpoint continues bit-identically.
"""

from __future__ import annotations

import json
import logging
import os
import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from casdm.config import RunConfig, config_from_dict
from casdm.data import Palette, PairSet, augment_batch
from casdm.denoiser import DenoiserConfig, UNet
from casdm.diffusion import NoiseSchedule, fast_sample, forward_sample, make_schedule
from casdm.errors import ConfigError, FormatError, TrainingError
from casdm.losses import frozen_encoder, mse_loss, total_loss
from casdm.mapgen import HashTextEncoder, derive_prompt, embed_batch, map_to_image, quantize_to_palette

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
KINDS = ("casdm", "mapgen")
DETERMINISTIC_ENV = "CASDM_DETERMINISTIC"


def set_deterministic(flag: bool | None = None) -> bool:
    """Single-threaded deterministic kernels; on when ``CASDM_DETERMINISTIC=1``."""
    if flag is None:
        flag = os.environ.get(DETERMINISTIC_ENV, "0") not in ("", "0", "false")
    if flag:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    return flag


def step_seeds(seed: int, step: int, n: int = 4) -> list[int]:
    return [int(v) for v in np.random.SeedSequence([seed, step]).generate_state(n)]


def build_schedule(cfg: RunConfig) -> NoiseSchedule:
    s = cfg.schedule
    return make_schedule(s.kind, s.num_steps, s.beta_start, s.beta_end)


def build_denoiser_config(kind: str, cfg: RunConfig, num_classes: int) -> DenoiserConfig:
    if kind not in KINDS:
        raise ConfigError(f"unknown generator kind {kind!r}")
    d = cfg.denoiser
    common = dict(
        in_channels=3,
        base_width=d.base_width,
        num_levels=d.num_levels,
        num_classes=num_classes,
        time_embed_dim=d.time_embed_dim,
        channel_mults=tuple(d.channel_mults) if d.channel_mults else None,
        spade_hidden=d.spade_hidden,
    )
    if kind == "casdm":
        return DenoiserConfig(cond_mode="semantic_map", **common)
    return DenoiserConfig(cond_mode="text_embedding", text_dim=cfg.mapgen.max_classes * cfg.mapgen.embed_dim, **common)


@dataclass
class Checkpoint:
    kind: str
    model: UNet
    schedule: NoiseSchedule
    run_config: RunConfig
    palette: Palette
    step: int
    optimizer_state: dict | None = None

    def text_encoder(self) -> HashTextEncoder:
        m = self.run_config.mapgen
        return HashTextEncoder(m.embed_dim, m.encoder_seed)


def save_checkpoint(path, ckpt: Checkpoint, optimizer: torch.optim.Optimizer | None = None) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": ckpt.kind,
        "denoiser_config": ckpt.model.config.to_dict(),
        "schedule": ckpt.schedule.to_dict(),
        "params": ckpt.model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else ckpt.optimizer_state,
        "step": ckpt.step,
        "run_config": ckpt.run_config.to_dict(),
        "palette": ckpt.palette.to_json(),
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path, expect_kind: str | None = None) -> Checkpoint:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    version = payload.get("format_version") if isinstance(payload, dict) else None
    if version is None or version > FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint format version {version}")
    if expect_kind is not None and payload["kind"] != expect_kind:
        raise ConfigError(f"{path} holds a {payload['kind']!r} model, expected {expect_kind!r}")
    dcfg = dict(payload["denoiser_config"])
    model = UNet(DenoiserConfig(**dcfg))
    model.load_state_dict(payload["params"])
    model.eval()
    return Checkpoint(
        kind=payload["kind"],
        model=model,
        schedule=NoiseSchedule.from_dict(payload["schedule"]),
        run_config=config_from_dict(payload["run_config"]),
        palette=Palette.from_json(payload["palette"]),
        step=int(payload["step"]),
        optimizer_state=payload.get("optimizer"),
    )


def _sample_batch(pairs: PairSet, cfg: RunConfig, seeds: list[int]) -> tuple[torch.Tensor, torch.Tensor]:
    gen = torch.Generator().manual_seed(seeds[0])
    idx = torch.randint(0, len(pairs), (cfg.training.batch_size,), generator=gen)
    images, labels = pairs.images[idx], pairs.labels[idx]
    if cfg.training.augment:
        images, labels = augment_batch(images, labels, seeds[1])
    return images, labels


def train_step(kind: str, model: UNet, pairs: PairSet, cfg: RunConfig, schedule: NoiseSchedule, step: int, encoder=None) -> dict:
    """Forward pass and loss for one step; returns the log record with a ``loss`` tensor."""
    seeds = step_seeds(cfg.training.seed, step)
    images, labels = _sample_batch(pairs, cfg, seeds)
    gen = torch.Generator().manual_seed(seeds[2])
    b = images.shape[0]
    t = torch.randint(1, schedule.num_steps + 1, (b,), generator=gen)
    if kind == "casdm":
        x0 = images
        eps = torch.randn(x0.shape, generator=gen)
        x_t = forward_sample(x0, t, eps, schedule)
        onehot = F.one_hot(labels, pairs.palette.num_classes).permute(0, 3, 1, 2).float()
        eps_hat = model(x_t, t, onehot)
        lam = cfg.losses.lambda_casp if step > cfg.losses.casp_warmup_steps else 0.0
        br = total_loss(
            eps, eps_hat, labels, frozen_encoder(model), x_t, t, schedule, lam, seeds[3],
            x0=x0, num_classes=pairs.palette.num_classes,
            weighting=cfg.losses.weighting, clip_x0=cfg.losses.clip_x0,
        )
        rec = br.record(step)
        rec["loss"] = br.total
        return rec
    x0 = map_to_image(labels, pairs.palette)
    eps = torch.randn(x0.shape, generator=gen)
    x_t = forward_sample(x0, t, eps, schedule)
    specs = [derive_prompt(lab.numpy(), pairs.palette) for lab in labels]
    cond = embed_batch(specs, encoder, cfg.mapgen.max_classes)
    loss = mse_loss(eps, model(x_t, t, cond))
    return {"step": step, "mse": float(loss.detach()), "total": float(loss.detach()), "loss": loss}


def train_generator(
    kind: str,
    cfg: RunConfig,
    pairs: PairSet,
    out_dir=None,
    steps: int | None = None,
    resume=None,
) -> Checkpoint:
    """Train a CASDM image denoiser or a map generator up to ``steps`` total steps.

    With ``out_dir`` set, writes ``train_log.jsonl`` (one record per step),
    periodic ``ckpt_<step>.pt`` files and ``last.pt``. A NaN loss raises
    :class:`TrainingError`; earlier checkpoints stay untouched.
    """
    total_steps = cfg.training.steps if steps is None else steps
    schedule = build_schedule(cfg)
    torch.manual_seed(cfg.training.seed)
    model = UNet(build_denoiser_config(kind, cfg, pairs.palette.num_classes))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.training.learning_rate)
    start = 0
    if resume is not None:
        prev = load_checkpoint(resume, expect_kind=kind)
        model.load_state_dict(prev.model.state_dict())
        if prev.optimizer_state is not None:
            opt.load_state_dict(prev.optimizer_state)
        start = prev.step
    encoder = HashTextEncoder(cfg.mapgen.embed_dim, cfg.mapgen.encoder_seed) if kind == "mapgen" else None
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json())
        log_file = open(out / "train_log.jsonl", "a")
    ckpt = Checkpoint(kind, model, schedule, cfg, pairs.palette, start)
    model.train()
    try:
        for step in range(start + 1, total_steps + 1):
            rec = train_step(kind, model, pairs, cfg, schedule, step, encoder)
            loss = rec.pop("loss")
            if not torch.isfinite(loss):
                raise TrainingError("non-finite loss", step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.training.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.training.grad_clip)
            opt.step()
            ckpt.step = step
            if log_file is not None:
                log_file.write(json.dumps(rec) + "\n")
            if out is not None and (step % cfg.training.checkpoint_every == 0 or step == total_steps):
                log_file.flush()
                save_checkpoint(out / f"ckpt_{step}.pt", ckpt, opt)
                save_checkpoint(out / "last.pt", ckpt, opt)
            if step % 100 == 0:
                log.info("%s step %d total %.4f", kind, step, rec["total"])
    finally:
        if log_file is not None:
            log_file.close()
    model.eval()
    ckpt.optimizer_state = opt.state_dict()
    return ckpt


def read_log(path) -> list[dict]:
    """Training log records, keeping the latest record for each step."""
    by_step = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            by_step[rec["step"]] = rec
    return [by_step[k] for k in sorted(by_step)]


def moving_average(values, window: int = 100) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return np.convolve(v, np.ones(window) / window, mode="valid")


def _initial_noise(n: int, shape: tuple[int, ...], seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn((n, *shape), generator=gen)


def synthesize_images(ckpt: Checkpoint, labels: torch.Tensor, seed: int, num_inference_steps: int | None = None, batch_size: int | None = None) -> torch.Tensor:
    """Images in [-1, 1] for a ``(N, H, W)`` batch of label maps."""
    sampling = ckpt.run_config.sampling
    steps = num_inference_steps or sampling.num_inference_steps
    bs = batch_size or sampling.batch_size
    labels = torch.as_tensor(labels).long()
    n, h, w = labels.shape
    noise = _initial_noise(n, (3, h, w), seed)
    out = []
    for i in range(0, n, bs):
        onehot = F.one_hot(labels[i:i + bs], ckpt.palette.num_classes).permute(0, 3, 1, 2).float()
        x = fast_sample(ckpt.model, onehot, ckpt.schedule, steps, seed, tuple(noise[i:i + bs].shape), x_init=noise[i:i + bs], clip_x0=sampling.clip_x0)
        out.append(x.clamp(-1.0, 1.0))
    return torch.cat(out)


def synthesize_maps(ckpt: Checkpoint, specs, seed: int, height: int, width: int, num_inference_steps: int | None = None, batch_size: int | None = None) -> torch.Tensor:
    """Quantized ``(N, H, W)`` label maps for a list of prompt specs."""
    sampling = ckpt.run_config.sampling
    steps = num_inference_steps or sampling.num_inference_steps
    bs = batch_size or sampling.batch_size
    cond = embed_batch(list(specs), ckpt.text_encoder(), ckpt.run_config.mapgen.max_classes)
    noise = _initial_noise(len(specs), (3, height, width), seed)
    grids = []
    for i in range(0, len(specs), bs):
        raw = fast_sample(ckpt.model, cond[i:i + bs], ckpt.schedule, steps, seed, tuple(noise[i:i + bs].shape), x_init=noise[i:i + bs], clip_x0=sampling.clip_x0)
        grids += [m.classes for m in quantize_to_palette(raw.clamp(-1.0, 1.0), ckpt.palette)]
    return torch.from_numpy(np.stack(grids))
