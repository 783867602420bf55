"""Stage (c): the 4x super-resolution network trained on pseudo-pairs.

A pseudo-pair is (degrade(translate(h)), h) for a clean sunny HR patch h:
the LR side carries the learned rainy degradation while the target stays
clean, so the trained network both upscales and removes the rain signature.
Supervision needs no rainy training images at all; everything flows from
the sunny pool through the frozen stage (a)/(b) networks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .datasets import DatasetIndex
from .errors import DimensionError, TrainingDivergenceError
from .imaging import from_model_range, to_model_range
from .nets import (NetworkSpec, OptimizerState, backward, build_network,
                   forward, opt_step)
from .rng import Stream, derive_seed
from .translator import NetBundle, grad_adv_ls, loss_adv_ls


@dataclass
class PseudoPair:
    """LR rainy input, clean HR target, optional LR-resolution weight map."""

    lr_rainy: np.ndarray
    hr_clean: np.ndarray
    weight_map: np.ndarray | None = None

    def __post_init__(self):
        lh, lw = self.lr_rainy.shape[0], self.lr_rainy.shape[1]
        hh, hw = self.hr_clean.shape[0], self.hr_clean.shape[1]
        if (hh, hw) != (4 * lh, 4 * lw):
            raise DimensionError(f"hr {hh}x{hw} is not 4x lr {lh}x{lw}")
        if self.weight_map is not None and self.weight_map.shape[:2] != (lh, lw):
            raise DimensionError("weight map must be at LR resolution")


def make_pseudo_pairs(translate_fn, degrade_fn, sunny_index: DatasetIndex,
                      count: int, seed: int, patch_size: int = 64,
                      weight_fn=None) -> list[PseudoPair]:
    """Manufacture ``count`` pseudo-pairs from sunny HR patches.

    ``translate_fn`` and ``degrade_fn`` map image -> image (frozen stage (a)
    and (b) checkpoints in production, stubs in tests).  ``weight_fn``, when
    given, maps the LR image to an (h, w) weight map in [0, 1].  Patch draws
    are a pure function of (sunny_index, count, seed).
    """
    pairs: list[PseudoPair] = []
    for i in range(count):
        st = Stream(derive_seed(seed, "pairs", i))
        fi = st.integers(len(sunny_index))
        img = sunny_index.load(fi)
        if img.shape[0] < patch_size or img.shape[1] < patch_size:
            raise DimensionError(
                f"{sunny_index.entries[fi][0]} smaller than patch {patch_size}"
            )
        top = st.integers(img.shape[0] - patch_size + 1)
        left = st.integers(img.shape[1] - patch_size + 1)
        hr = img[top : top + patch_size, left : left + patch_size]
        lr = degrade_fn(translate_fn(hr))
        weight = weight_fn(lr) if weight_fn is not None else None
        pairs.append(PseudoPair(lr, hr, weight))
    return pairs


def _upsample_weights(weight: torch.Tensor, hr_shape: torch.Size) -> torch.Tensor:
    w = weight.repeat_interleave(4, dim=2).repeat_interleave(4, dim=3)
    if w.shape[2:] != hr_shape[2:]:
        raise DimensionError("weight map does not match LR dims of the pair")
    return w


def loss_pix_weighted(sr: torch.Tensor, hr: torch.Tensor,
                      weight_map: torch.Tensor | None = None) -> float:
    """Weighted mean absolute error, normalised by the mean weight.

    The weight map lives at LR resolution (N, 1, h, w) and is nearest-
    upscaled 4x; uniform scaling of the weights cancels out exactly.
    """
    if sr.shape != hr.shape:
        raise DimensionError(f"sr {tuple(sr.shape)} vs hr {tuple(hr.shape)}")
    with torch.no_grad():
        diff = (sr - hr).abs()
        if weight_map is None:
            return float(diff.mean())
        w = _upsample_weights(weight_map, sr.shape)
        return float((w * diff).sum() / (w.sum() * sr.shape[1]))


def grad_pix_weighted(sr: torch.Tensor, hr: torch.Tensor,
                      weight_map: torch.Tensor | None = None) -> torch.Tensor:
    """d/d(sr) of loss_pix_weighted."""
    if sr.shape != hr.shape:
        raise DimensionError(f"sr {tuple(sr.shape)} vs hr {tuple(hr.shape)}")
    with torch.no_grad():
        sign = torch.sign(sr - hr)
        if weight_map is None:
            return sign / sr.numel()
        w = _upsample_weights(weight_map, sr.shape)
        return (w * sign) / (w.sum() * sr.shape[1])


@dataclass
class SrnLosses:
    step: int
    loss_pix: float
    loss_g_adv: float
    loss_d_hr: float
    mean_weight: float


@dataclass
class SrnState:
    srn: NetBundle
    d_hr: NetBundle
    lambda_pix: float
    lambda_adv: float
    use_domain_weights: bool
    seed: int
    step: int = 0


def init_srn(seed: int, base_channels: int = 32, residual_blocks: int = 4,
             disc_channels: int = 16, lr: float = 2e-4, beta1: float = 0.5,
             beta2: float = 0.999, lambda_pix: float = 1.0,
             lambda_adv: float = 0.05,
             use_domain_weights: bool = False) -> SrnState:
    if lambda_pix <= 0:
        raise ValueError("lambda_pix must be positive")
    spec = NetworkSpec.for_family("srn", base_channels, residual_blocks)
    net, params = build_network(spec, derive_seed(seed, "net", "srn"))
    dspec = NetworkSpec.for_family("patch_disc", disc_channels, 0)
    dnet, dparams = build_network(dspec, derive_seed(seed, "net", "d_hr"))
    return SrnState(
        srn=NetBundle(net, params, OptimizerState.for_params(params, lr, beta1, beta2)),
        d_hr=NetBundle(dnet, dparams, OptimizerState.for_params(dparams, lr, beta1, beta2)),
        lambda_pix=lambda_pix,
        lambda_adv=lambda_adv,
        use_domain_weights=use_domain_weights,
        seed=seed,
    )


def pairs_to_tensors(pairs: list[PseudoPair]) -> tuple[torch.Tensor, torch.Tensor,
                                                       torch.Tensor | None]:
    lr = torch.from_numpy(np.stack(
        [to_model_range(p.lr_rainy).astype(np.float32) for p in pairs]))
    hr = torch.from_numpy(np.stack(
        [to_model_range(p.hr_clean).astype(np.float32) for p in pairs]))
    weights = None
    if all(p.weight_map is not None for p in pairs):
        weights = torch.from_numpy(np.stack(
            [p.weight_map.astype(np.float32)[None] for p in pairs]))
    return lr, hr, weights


def train_step_srn(state: SrnState, pairs_batch: list[PseudoPair]) -> SrnLosses:
    """One SRN update (weighted pixel + optional adversarial), one D_hr update."""
    lr, hr, weights = pairs_to_tensors(pairs_batch)
    if not state.use_domain_weights:
        weights = None

    state.srn.params.zero_grads()
    out, tape = forward(state.srn.net, state.srn.params, lr, retain=True)
    loss_pix = loss_pix_weighted(out, hr, weights)
    d_out = state.lambda_pix * grad_pix_weighted(out, hr, weights)
    loss_g_adv = 0.0
    if state.lambda_adv > 0.0:
        d_fake, tp_d = forward(state.d_hr.net, state.d_hr.params, out, retain=True)
        loss_g_adv = loss_adv_ls(d_fake, 1.0)
        adv_in = backward(state.d_hr.net, state.d_hr.params, tp_d,
                          grad_adv_ls(d_fake, 1.0), param_grads=False)
        d_out = d_out + state.lambda_adv * adv_in
    if not (math.isfinite(loss_pix) and math.isfinite(loss_g_adv)):
        raise TrainingDivergenceError(
            f"srn loss non-finite (pix={loss_pix}, adv={loss_g_adv})"
        )
    backward(state.srn.net, state.srn.params, tape, d_out, input_grad=False)
    opt_step(state.srn.params, state.srn.opt)

    state.d_hr.params.zero_grads()
    d_real, tp1 = forward(state.d_hr.net, state.d_hr.params, hr, retain=True)
    d_fake2, tp2 = forward(state.d_hr.net, state.d_hr.params, out.detach(),
                           retain=True)
    loss_d_hr = 0.5 * (loss_adv_ls(d_real, 1.0) + loss_adv_ls(d_fake2, 0.0))
    if not math.isfinite(loss_d_hr):
        raise TrainingDivergenceError(f"loss_d_hr became non-finite ({loss_d_hr})")
    backward(state.d_hr.net, state.d_hr.params, tp1, 0.5 * grad_adv_ls(d_real, 1.0),
             input_grad=False)
    backward(state.d_hr.net, state.d_hr.params, tp2, 0.5 * grad_adv_ls(d_fake2, 0.0),
             input_grad=False)
    opt_step(state.d_hr.params, state.d_hr.opt)

    state.step += 1
    mean_w = 1.0 if weights is None else float(weights.mean())
    return SrnLosses(state.step, loss_pix, loss_g_adv, loss_d_hr, mean_w)


def super_resolve_batch(state: SrnState, batch: torch.Tensor) -> torch.Tensor:
    """Frozen 4x inference on a model-range (N, 3, h, w) tensor."""
    out, _ = forward(state.srn.net, state.srn.params, batch)
    return out


def super_resolve(state: SrnState, lr_img: np.ndarray) -> np.ndarray:
    """4x super-resolve (and derain) an LR image of at least 8x8."""
    if lr_img.shape[0] < 8 or lr_img.shape[1] < 8:
        raise DimensionError(
            f"input {lr_img.shape[0]}x{lr_img.shape[1]} below the 8x8 minimum"
        )
    t = torch.from_numpy(to_model_range(lr_img).astype(np.float32))[None]
    return from_model_range(super_resolve_batch(state, t)[0].numpy())
