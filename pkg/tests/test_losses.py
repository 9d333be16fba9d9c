import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from casdm.denoiser import DenoiserConfig, UNet
from casdm.diffusion import forward_sample, make_schedule, reconstruct_x0
from casdm.errors import ConsistencyError, ParameterError, ShapeError
from casdm.losses import camse_loss, casp_loss, draw_casp_noise, frozen_encoder, mse_loss, total_loss


def toy_encoder(x, t):
    """Three feature levels at full, half and quarter resolution."""
    scale = 1.0 + t.to(x.dtype).view(-1, 1, 1, 1) / 1000.0
    f1 = torch.tanh(x) * scale
    f2 = F.avg_pool2d(x**2, 2)
    f3 = F.avg_pool2d(torch.sin(x), 4)
    return [f1, f2, f3]


def _instance(seed, b=2, c=3, h=4, w=4, k=3):
    g = torch.Generator().manual_seed(seed)
    eps = torch.randn(b, c, h, w, dtype=torch.float64, generator=g)
    eps_hat = torch.randn(b, c, h, w, dtype=torch.float64, generator=g)
    labels = torch.randint(0, k, (b, h, w), generator=g)
    return eps, eps_hat, labels


def camse_oracle(eps, eps_hat, labels):
    b, c, h, w = eps.shape
    total = 0.0
    for i in range(b):
        counts = {}
        for y in range(h):
            for x in range(w):
                counts[int(labels[i, y, x])] = counts.get(int(labels[i, y, x]), 0) + 1
        norm = sum(1.0 / n for n in counts.values())
        for cls, n in counts.items():
            err = 0.0
            for y in range(h):
                for x in range(w):
                    if int(labels[i, y, x]) == cls:
                        for ch in range(c):
                            err += (float(eps[i, ch, y, x]) - float(eps_hat[i, ch, y, x])) ** 2
            total += (1.0 / n) / norm * err / (n * c)
    return total / b


def _pool_loop(img, th, tw):
    h, w = len(img), len(img[0])
    out = [[0.0] * tw for _ in range(th)]
    for i in range(th):
        for j in range(tw):
            acc = 0.0
            # overlap of target cell with every source cell, in source units
            for y in range(h):
                oy = max(0.0, min((i + 1) * h / th, y + 1) - max(i * h / th, y))
                for x in range(w):
                    ox = max(0.0, min((j + 1) * w / tw, x + 1) - max(j * w / tw, x))
                    acc += oy * ox * img[y][x]
            out[i][j] = acc / ((h / th) * (w / tw))
    return out


def casp_oracle(x0, x0_hat, labels, t, eps_p):
    betas = [1e-4 + (0.02 - 1e-4) * i / 999 for i in range(1000)]
    ab = math.prod(1 - b for b in betas[:t])
    noisy_a = math.sqrt(ab) * x0 + math.sqrt(1 - ab) * eps_p
    noisy_b = math.sqrt(ab) * x0_hat + math.sqrt(1 - ab) * eps_p
    tt = torch.full((x0.shape[0],), t)
    fa, fb = toy_encoder(noisy_a, tt), toy_encoder(noisy_b, tt)
    total = 0.0
    for i in range(x0.shape[0]):
        grid = labels[i].tolist()
        counts = {}
        for row in grid:
            for v in row:
                counts[v] = counts.get(v, 0) + 1
        norm = sum(1.0 / n for n in counts.values())
        wimg = [[(1.0 / counts[v]) / norm for v in row] for row in grid]
        for la, lb in zip(fa, fb):
            pooled = _pool_loop(wimg, la.shape[-2], la.shape[-1])
            for ch in range(la.shape[1]):
                for y in range(la.shape[-2]):
                    for x in range(la.shape[-1]):
                        total += (pooled[y][x] * (float(lb[i, ch, y, x]) - float(la[i, ch, y, x]))) ** 2
    return total / x0.shape[0]


@pytest.mark.parametrize("seed", range(10))
def test_camse_matches_loop_oracle(seed):
    eps, eps_hat, labels = _instance(seed)
    loss, _, _ = camse_loss(eps, eps_hat, labels, 3)
    assert float(loss) == pytest.approx(camse_oracle(eps, eps_hat, labels), abs=1e-8)


@pytest.mark.parametrize("seed", range(5))
def test_casp_matches_loop_oracle(schedule, seed):
    eps, eps_hat, labels = _instance(seed)
    x0 = torch.tanh(eps)
    x0_hat = torch.tanh(eps_hat)
    t, eps_p = draw_casp_noise(schedule, x0.shape, x0.dtype, seed)
    got = casp_loss(toy_encoder, x0, x0_hat, labels, schedule, t, eps_p, 3)
    assert float(got) == pytest.approx(casp_oracle(x0, x0_hat, labels, t, eps_p), abs=1e-6)


def test_camse_single_class_equals_mse():
    eps, eps_hat, _ = _instance(1)
    labels = torch.full((2, 4, 4), 2)
    loss, _, w = camse_loss(eps, eps_hat, labels, 3)
    assert float(loss) == pytest.approx(float(mse_loss(eps, eps_hat)), abs=1e-10)
    assert w[:, 2].tolist() == [1.0, 1.0]


def test_camse_pixel_weighting_is_plain_mse():
    eps, eps_hat, labels = _instance(2)
    loss, _, _ = camse_loss(eps, eps_hat, labels, 3, weighting="pixel")
    assert float(loss) == pytest.approx(float(mse_loss(eps, eps_hat)), abs=1e-12)
    with pytest.raises(ParameterError):
        camse_loss(eps, eps_hat, labels, 3, weighting="nope")


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 4))
def test_camse_zero_iff_exact_and_nonnegative(seed, k):
    eps, eps_hat, labels = _instance(seed, k=k)
    assert float(camse_loss(eps, eps, labels, k)[0]) == 0.0
    assert float(camse_loss(eps, eps_hat, labels, k)[0]) > 0.0


def test_camse_shape_errors():
    eps, eps_hat, labels = _instance(0)
    with pytest.raises(ShapeError):
        camse_loss(eps, eps_hat[:, :2], labels)
    with pytest.raises(ShapeError):
        camse_loss(eps, eps_hat, labels[:, :3])


def test_casp_zero_for_perfect_reconstruction(schedule):
    eps, _, labels = _instance(4)
    t, eps_p = draw_casp_noise(schedule, eps.shape, eps.dtype, 0)
    assert float(casp_loss(toy_encoder, eps, eps.clone(), labels, schedule, t, eps_p, 3)) == 0.0


def test_casp_target_branch_has_no_gradient(schedule):
    eps, eps_hat, labels = _instance(5)
    x0 = eps.clone().requires_grad_(True)
    x0_hat = eps_hat.clone().requires_grad_(True)
    t, eps_p = draw_casp_noise(schedule, eps.shape, eps.dtype, 1)
    casp_loss(toy_encoder, x0, x0_hat, labels, schedule, t, eps_p, 3).backward()
    assert x0.grad is None
    assert x0_hat.grad is not None and float(x0_hat.grad.abs().sum()) > 0


def test_casp_level_mismatch(schedule):
    eps, eps_hat, labels = _instance(6)
    calls = iter([[eps], [eps, eps]])
    t, eps_p = draw_casp_noise(schedule, eps.shape, eps.dtype, 1)
    with pytest.raises(ConsistencyError):
        casp_loss(lambda x, t: next(calls), eps, eps_hat, labels, schedule, t, eps_p, 3)


def _central_diff(fn, x, h=1e-6):
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        old = float(flat[i])
        flat[i] = old + h
        up = float(fn(x))
        flat[i] = old - h
        down = float(fn(x))
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def _rel_err(a, b):
    return float((a - b).norm() / b.norm().clamp(min=1e-12))


@pytest.mark.parametrize("seed", range(4))
def test_camse_gradient_finite_difference(seed):
    eps, eps_hat, labels = _instance(seed, b=1, c=2)
    x = eps_hat.clone().requires_grad_(True)
    camse_loss(eps, x, labels, 3)[0].backward()
    fd = _central_diff(lambda v: camse_loss(eps, v, labels, 3)[0], eps_hat.clone())
    assert _rel_err(x.grad, fd) < 1e-3


@pytest.mark.parametrize("seed", range(4))
def test_casp_gradient_finite_difference(schedule, seed):
    eps, eps_hat, labels = _instance(seed, b=1, c=2)
    t, eps_p = draw_casp_noise(schedule, eps.shape, eps.dtype, seed)
    x = eps_hat.clone().requires_grad_(True)
    casp_loss(toy_encoder, eps, x, labels, schedule, t, eps_p, 3).backward()
    fd = _central_diff(lambda v: casp_loss(toy_encoder, eps, v, labels, schedule, t, eps_p, 3), eps_hat.clone())
    assert _rel_err(x.grad, fd) < 1e-3


def _tiny_unet():
    cfg = DenoiserConfig(in_channels=3, base_width=8, num_levels=2, num_classes=3, time_embed_dim=16, groups=4, spade_hidden=4)
    return UNet(cfg).double()


def test_frozen_encoder_blocks_parameter_gradients(schedule):
    model = _tiny_unet()
    enc = frozen_encoder(model)
    x = torch.randn(1, 3, 8, 8, dtype=torch.float64, requires_grad=True)
    sum(f.sum() for f in enc(x, torch.tensor([10]))).backward()
    assert x.grad is not None
    assert all(p.grad is None for p in model.parameters())
    direct = model.encode_features(x.detach(), torch.tensor([10]))
    for a, b in zip(enc(x.detach(), torch.tensor([10])), direct):
        assert torch.equal(a, b)


def test_total_loss_lambda_zero_skips_encoder(schedule):
    eps, eps_hat, labels = _instance(3)
    x_t = forward_sample(torch.tanh(eps), 50, eps, schedule)

    def boom(x, t):
        raise AssertionError("encoder called")

    out = total_loss(eps, eps_hat, labels, boom, x_t, 50, schedule, 0.0, rng_seed=1, num_classes=3)
    assert float(out.casp) == 0.0 and torch.equal(out.total, out.camse)


def test_total_loss_combines_terms(schedule):
    eps, eps_hat, labels = _instance(7)
    x0 = torch.tanh(eps)
    x_t = forward_sample(x0, 50, eps, schedule)
    out = total_loss(eps, eps_hat, labels, toy_encoder, x_t, 50, schedule, 0.5, rng_seed=3, num_classes=3)
    t, eps_p = draw_casp_noise(schedule, eps.shape, eps.dtype, 3)
    x0_hat = reconstruct_x0(x_t, eps_hat, 50, schedule)
    casp = casp_loss(toy_encoder, reconstruct_x0(x_t, eps, 50, schedule), x0_hat, labels, schedule, t, eps_p, 3)
    assert float(out.casp) == pytest.approx(float(casp), rel=1e-12)
    assert float(out.total) == pytest.approx(float(out.camse) + 0.5 * float(casp), rel=1e-12)
    assert out.t_prime == t
    rec = out.record(4)
    assert rec["step"] == 4 and set(rec) >= {"camse", "casp", "total", "lambda", "t_prime"}
    assert set(out.per_class_camse) <= {0, 1, 2}


def test_total_loss_is_seeded(schedule):
    eps, eps_hat, labels = _instance(8)
    x_t = forward_sample(torch.tanh(eps), 10, eps, schedule)
    a = total_loss(eps, eps_hat, labels, toy_encoder, x_t, 10, schedule, 1.0, rng_seed=11, num_classes=3)
    b = total_loss(eps, eps_hat, labels, toy_encoder, x_t, 10, schedule, 1.0, rng_seed=11, num_classes=3)
    assert torch.equal(a.total, b.total)
