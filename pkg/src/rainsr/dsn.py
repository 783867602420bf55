"""Stage (b): train the downsampling network that maps translated rainy HR
images into the real-LR domain.

The DSN output is anchored to the bicubic /4 of its input through a
low-frequency content penalty (L1 between box-blurred versions), while a
small least-squares adversarial term pulls its statistics toward real LR
patches.  The same LR discriminator later provides the domain-distance
weight map used by the SR stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DimensionError, TrainingDivergenceError
from .imaging import from_model_range, to_model_range
from .nets import (NetworkSpec, OptimizerState, backward, bicubic_resize_tensor,
                   build_network, forward, opt_step)
from .rng import derive_seed
from .translator import NetBundle, grad_adv_ls, loss_adv_ls

_blur_mats: dict[tuple[int, torch.dtype], torch.Tensor] = {}


def _blur_mat(n: int, dtype: torch.dtype) -> torch.Tensor:
    key = (n, dtype)
    m = _blur_mats.get(key)
    if m is None:
        a = np.zeros((n, n), dtype=np.float64)
        for i in range(n):
            for tap in (i - 1, i, i + 1):
                a[i, min(max(tap, 0), n - 1)] += 1.0 / 3.0
        m = torch.from_numpy(a).to(dtype)
        _blur_mats[key] = m
    return m


def blur3(x: torch.Tensor) -> torch.Tensor:
    """3x3 box filter with edge-clamp padding (preserves constants)."""
    bh = _blur_mat(x.shape[2], x.dtype)
    bw = _blur_mat(x.shape[3], x.dtype)
    return torch.matmul(torch.matmul(bh, x), bw.t())


def _blur3_adjoint(g: torch.Tensor) -> torch.Tensor:
    bh = _blur_mat(g.shape[2], g.dtype)
    bw = _blur_mat(g.shape[3], g.dtype)
    return torch.matmul(torch.matmul(bh.t(), g), bw)


def _check_quarter(dsn_out: torch.Tensor, src_hr: torch.Tensor) -> None:
    if (dsn_out.shape[0] != src_hr.shape[0]
            or dsn_out.shape[2] * 4 != src_hr.shape[2]
            or dsn_out.shape[3] * 4 != src_hr.shape[3]):
        raise DimensionError(
            f"dsn output {tuple(dsn_out.shape)} is not 1/4 of {tuple(src_hr.shape)}"
        )


def loss_content_lowfreq(dsn_out: torch.Tensor, src_hr: torch.Tensor) -> float:
    """L1 between box-blurred DSN output and box-blurred bicubic /4 anchor."""
    _check_quarter(dsn_out, src_hr)
    with torch.no_grad():
        anchor = bicubic_resize_tensor(src_hr, Fraction(1, 4))
        return float((blur3(dsn_out) - blur3(anchor)).abs().mean())


def grad_content_lowfreq(dsn_out: torch.Tensor, src_hr: torch.Tensor) -> torch.Tensor:
    """d/d(dsn_out) of loss_content_lowfreq."""
    _check_quarter(dsn_out, src_hr)
    with torch.no_grad():
        anchor = bicubic_resize_tensor(src_hr, Fraction(1, 4))
        z = blur3(dsn_out) - blur3(anchor)
        return _blur3_adjoint(torch.sign(z)) / z.numel()


@dataclass
class DsnLosses:
    step: int
    loss_content: float
    loss_g_adv: float
    loss_d_lr: float


@dataclass
class DsnState:
    dsn: NetBundle
    d_lr: NetBundle
    lambda_content: float
    lambda_adv: float
    seed: int
    step: int = 0


def init_dsn(seed: int, base_channels: int = 16, disc_channels: int = 16,
             lr: float = 2e-4, beta1: float = 0.5, beta2: float = 0.999,
             lambda_content: float = 1.0, lambda_adv: float = 0.05) -> DsnState:
    if lambda_content <= 0:
        raise ValueError("lambda_content must be positive")
    if lambda_adv < 0:
        raise ValueError("lambda_adv must be non-negative")
    spec = NetworkSpec.for_family("dsn", base_channels, 0)
    net, params = build_network(spec, derive_seed(seed, "net", "dsn"))
    dspec = NetworkSpec.for_family("patch_disc", disc_channels, 0)
    dnet, dparams = build_network(dspec, derive_seed(seed, "net", "d_lr"))
    return DsnState(
        dsn=NetBundle(net, params, OptimizerState.for_params(params, lr, beta1, beta2)),
        d_lr=NetBundle(dnet, dparams, OptimizerState.for_params(dparams, lr, beta1, beta2)),
        lambda_content=lambda_content,
        lambda_adv=lambda_adv,
        seed=seed,
    )


def train_step_dsn(state: DsnState, rainy_hr_batch: torch.Tensor,
                   real_lr_batch: torch.Tensor) -> DsnLosses:
    """One DSN update (content + optional adversarial) then one D_lr update."""
    hr = rainy_hr_batch.detach()
    real_lr = real_lr_batch.detach()
    if hr.shape[2] != 4 * real_lr.shape[2] or hr.shape[3] != 4 * real_lr.shape[3]:
        raise DimensionError(
            f"rainy HR {tuple(hr.shape)} must be 4x the real LR {tuple(real_lr.shape)}"
        )

    state.dsn.params.zero_grads()
    out, tape = forward(state.dsn.net, state.dsn.params, hr, retain=True)
    loss_content = loss_content_lowfreq(out, hr)
    d_out = state.lambda_content * grad_content_lowfreq(out, hr)
    loss_g_adv = 0.0
    if state.lambda_adv > 0.0:
        d_fake, tp_d = forward(state.d_lr.net, state.d_lr.params, out, retain=True)
        loss_g_adv = loss_adv_ls(d_fake, 1.0)
        adv_in = backward(state.d_lr.net, state.d_lr.params, tp_d,
                          grad_adv_ls(d_fake, 1.0), param_grads=False)
        d_out = d_out + state.lambda_adv * adv_in
    if not (math.isfinite(loss_content) and math.isfinite(loss_g_adv)):
        raise TrainingDivergenceError(
            f"dsn loss non-finite (content={loss_content}, adv={loss_g_adv})"
        )
    backward(state.dsn.net, state.dsn.params, tape, d_out, input_grad=False)
    opt_step(state.dsn.params, state.dsn.opt)

    state.d_lr.params.zero_grads()
    d_real, tp1 = forward(state.d_lr.net, state.d_lr.params, real_lr, retain=True)
    d_fake2, tp2 = forward(state.d_lr.net, state.d_lr.params, out.detach(), retain=True)
    loss_d_lr = 0.5 * (loss_adv_ls(d_real, 1.0) + loss_adv_ls(d_fake2, 0.0))
    if not math.isfinite(loss_d_lr):
        raise TrainingDivergenceError(f"loss_d_lr became non-finite ({loss_d_lr})")
    backward(state.d_lr.net, state.d_lr.params, tp1, 0.5 * grad_adv_ls(d_real, 1.0),
             input_grad=False)
    backward(state.d_lr.net, state.d_lr.params, tp2, 0.5 * grad_adv_ls(d_fake2, 0.0),
             input_grad=False)
    opt_step(state.d_lr.params, state.d_lr.opt)

    state.step += 1
    return DsnLosses(state.step, loss_content, loss_g_adv, loss_d_lr)


def degrade_batch(state: DsnState, batch: torch.Tensor) -> torch.Tensor:
    """Frozen /4 inference on a model-range (N, 3, H, W) tensor."""
    out, _ = forward(state.dsn.net, state.dsn.params, batch)
    return out


def degrade(state: DsnState, img: np.ndarray) -> np.ndarray:
    """Learned /4 degradation of an image; dims must be multiples of 4."""
    t = torch.from_numpy(to_model_range(img).astype(np.float32))[None]
    return from_model_range(degrade_batch(state, t)[0].numpy())


def domain_distance_weight(d_lr_forward, lr: torch.Tensor) -> torch.Tensor:
    """Per-pixel [0, 1] map of how real-LR-like each region looks.

    ``d_lr_forward`` maps an (N, 3, h, w) tensor to patch scores; the scores
    are clamped to [0, 1] and bilinearly resized back to (h, w).  Monotone
    in the raw discriminator output.
    """
    with torch.no_grad():
        raw = d_lr_forward(lr)
        w = torch.clamp(raw, 0.0, 1.0)
        if w.shape[2:] != lr.shape[2:]:
            w = F.interpolate(w, size=(lr.shape[2], lr.shape[3]),
                              mode="bilinear", align_corners=False)
        return w
