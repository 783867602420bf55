"""Stage (a): cycle-consistent sunny<->rainy translation.

Two generators and two patch discriminators train against the least-squares
adversarial objective plus cycle and identity L1 penalties.  Gradients are
chained explicitly between tapes (loss gradient -> discriminator input
gradient -> generator parameters), so each train step is a deterministic
function of (state, batches).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DimensionError, TrainingDivergenceError
from .imaging import from_model_range, to_model_range
from .nets import (NetworkSpec, OptimizerState, ParamStore, Network,
                   backward, build_network, forward, opt_step)
from .rng import Stream, derive_seed


def loss_adv_ls(disc_out: torch.Tensor, target: float) -> float:
    """Least-squares adversarial loss: mean of (disc_out - target)^2."""
    with torch.no_grad():
        return float(((disc_out - target) ** 2).mean())


def grad_adv_ls(disc_out: torch.Tensor, target: float) -> torch.Tensor:
    """d/d(disc_out) of loss_adv_ls."""
    with torch.no_grad():
        return 2.0 * (disc_out - target) / disc_out.numel()


def loss_l1(a: torch.Tensor, b: torch.Tensor) -> float:
    """Mean absolute difference."""
    if a.shape != b.shape:
        raise DimensionError(f"loss_l1 shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    with torch.no_grad():
        return float((a - b).abs().mean())


def grad_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """d/da of loss_l1 (sign of the difference over the element count)."""
    if a.shape != b.shape:
        raise DimensionError(f"grad_l1 shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    with torch.no_grad():
        return torch.sign(a - b) / a.numel()


class ReplayBuffer:
    """Pool of up to ``capacity`` past fakes, queried per incoming image.

    While filling, the incoming image is stored and returned unchanged.
    Once full, each incoming image either (p = 0.5) swaps with a random
    stored one - the stale image is returned - or passes through.  All
    draws come from the caller's stream, so the buffer is a deterministic
    function of the step history.
    """

    def __init__(self, capacity: int = 50):
        self.capacity = capacity
        self.images: list[torch.Tensor] = []

    def query(self, fakes: torch.Tensor, stream: Stream) -> torch.Tensor:
        out = []
        for img in fakes.detach():
            img = img.clone()
            if len(self.images) < self.capacity:
                self.images.append(img)
                out.append(img)
            elif stream.uniform() < 0.5:
                idx = stream.integers(self.capacity)
                out.append(self.images[idx])
                self.images[idx] = img
            else:
                out.append(img)
        return torch.stack(out)


@dataclass
class NetBundle:
    net: Network
    params: ParamStore
    opt: OptimizerState


@dataclass
class TranslatorLosses:
    step: int
    loss_g_adv: float
    loss_cycle: float
    loss_id: float
    loss_d_rainy: float
    loss_d_sunny: float


@dataclass
class TranslatorState:
    g_s2r: NetBundle
    g_r2s: NetBundle
    d_rainy: NetBundle
    d_sunny: NetBundle
    buffer_rainy: ReplayBuffer
    buffer_sunny: ReplayBuffer
    lambda_cyc: float
    lambda_id: float
    seed: int
    step: int = 0


def init_translator(seed: int, base_channels: int = 16, residual_blocks: int = 3,
                    disc_channels: int = 16, lr: float = 2e-4, beta1: float = 0.5,
                    beta2: float = 0.999, lambda_cyc: float = 10.0,
                    lambda_id: float = 5.0, buffer_capacity: int = 50) -> TranslatorState:
    if lambda_cyc <= 0:
        raise ValueError("lambda_cyc must be positive")

    def bundle(family: str, tag: str, bc: int, rb: int) -> NetBundle:
        spec = NetworkSpec.for_family(family, bc, rb)
        net, params = build_network(spec, derive_seed(seed, "net", tag))
        return NetBundle(net, params, OptimizerState.for_params(params, lr, beta1, beta2))

    return TranslatorState(
        g_s2r=bundle("translator_gen", "g_s2r", base_channels, residual_blocks),
        g_r2s=bundle("translator_gen", "g_r2s", base_channels, residual_blocks),
        d_rainy=bundle("patch_disc", "d_rainy", disc_channels, 0),
        d_sunny=bundle("patch_disc", "d_sunny", disc_channels, 0),
        buffer_rainy=ReplayBuffer(buffer_capacity),
        buffer_sunny=ReplayBuffer(buffer_capacity),
        lambda_cyc=lambda_cyc,
        lambda_id=lambda_id,
        seed=seed,
    )


def _check_finite(record: dict[str, float]) -> None:
    for term, value in record.items():
        if not math.isfinite(value):
            raise TrainingDivergenceError(f"{term} became non-finite ({value})")


def train_step_translator(state: TranslatorState, sunny_batch: torch.Tensor,
                          rainy_batch: torch.Tensor) -> TranslatorLosses:
    """One generator update then one update per discriminator, in place."""
    if sunny_batch.shape != rainy_batch.shape:
        raise DimensionError("sunny and rainy batches must share a shape")
    s, r = sunny_batch.detach(), rainy_batch.detach()
    g, g_inv = state.g_s2r, state.g_r2s
    lam_c, lam_i = state.lambda_cyc, state.lambda_id

    # --- generator update ---
    g.params.zero_grads()
    g_inv.params.zero_grads()
    fake_r, tp_a = forward(g.net, g.params, s, retain=True)
    cyc_s, tp_b = forward(g_inv.net, g_inv.params, fake_r, retain=True)
    fake_s, tp_c = forward(g_inv.net, g_inv.params, r, retain=True)
    cyc_r, tp_d = forward(g.net, g.params, fake_s, retain=True)
    id_r, tp_e = forward(g.net, g.params, r, retain=True)
    id_s, tp_f = forward(g_inv.net, g_inv.params, s, retain=True)
    d_fake_r, tp_dr = forward(state.d_rainy.net, state.d_rainy.params, fake_r, retain=True)
    d_fake_s, tp_ds = forward(state.d_sunny.net, state.d_sunny.params, fake_s, retain=True)

    loss_g_adv = loss_adv_ls(d_fake_r, 1.0) + loss_adv_ls(d_fake_s, 1.0)
    loss_cycle = loss_l1(cyc_s, s) + loss_l1(cyc_r, r)
    loss_id = loss_l1(id_r, r) + loss_l1(id_s, s)
    _check_finite({"loss_g_adv": loss_g_adv, "loss_cycle": loss_cycle,
                   "loss_id": loss_id})

    d_fake_r_in = backward(state.d_rainy.net, state.d_rainy.params, tp_dr,
                           grad_adv_ls(d_fake_r, 1.0), param_grads=False)
    d_fake_s_in = backward(state.d_sunny.net, state.d_sunny.params, tp_ds,
                           grad_adv_ls(d_fake_s, 1.0), param_grads=False)
    cyc_to_fake_r = backward(g_inv.net, g_inv.params, tp_b,
                             lam_c * grad_l1(cyc_s, s))
    cyc_to_fake_s = backward(g.net, g.params, tp_d, lam_c * grad_l1(cyc_r, r))
    backward(g.net, g.params, tp_a, cyc_to_fake_r + d_fake_r_in, input_grad=False)
    backward(g_inv.net, g_inv.params, tp_c, cyc_to_fake_s + d_fake_s_in,
             input_grad=False)
    backward(g.net, g.params, tp_e, lam_i * grad_l1(id_r, r), input_grad=False)
    backward(g_inv.net, g_inv.params, tp_f, lam_i * grad_l1(id_s, s),
             input_grad=False)
    opt_step(g.params, g.opt)
    opt_step(g_inv.params, g_inv.opt)

    # --- discriminator updates on buffered fakes ---
    def disc_update(bundle: NetBundle, real: torch.Tensor, fake: torch.Tensor,
                    buffer: ReplayBuffer, tag: str) -> float:
        pool = buffer.query(fake, Stream(derive_seed(state.seed, tag, state.step)))
        bundle.params.zero_grads()
        d_real, tp1 = forward(bundle.net, bundle.params, real, retain=True)
        d_fake, tp2 = forward(bundle.net, bundle.params, pool, retain=True)
        loss = 0.5 * (loss_adv_ls(d_real, 1.0) + loss_adv_ls(d_fake, 0.0))
        _check_finite({f"loss_{tag}": loss})
        backward(bundle.net, bundle.params, tp1, 0.5 * grad_adv_ls(d_real, 1.0),
                 input_grad=False)
        backward(bundle.net, bundle.params, tp2, 0.5 * grad_adv_ls(d_fake, 0.0),
                 input_grad=False)
        opt_step(bundle.params, bundle.opt)
        return loss

    loss_d_rainy = disc_update(state.d_rainy, r, fake_r.detach(),
                               state.buffer_rainy, "buffer_rainy")
    loss_d_sunny = disc_update(state.d_sunny, s, fake_s.detach(),
                               state.buffer_sunny, "buffer_sunny")

    state.step += 1
    return TranslatorLosses(state.step, loss_g_adv, loss_cycle, loss_id,
                            loss_d_rainy, loss_d_sunny)


def translate_batch(state: TranslatorState, batch: torch.Tensor) -> torch.Tensor:
    """Frozen sunny->rainy inference on a model-range (N, 3, H, W) tensor."""
    out, _ = forward(state.g_s2r.net, state.g_s2r.params, batch)
    return out


def translate_sunny_to_rainy(state: TranslatorState, img: np.ndarray) -> np.ndarray:
    """Sunny->rainy inference on an image; dims must be multiples of 4."""
    t = torch.from_numpy(to_model_range(img).astype(np.float32))[None]
    out = translate_batch(state, t)
    return from_model_range(out[0].numpy())
