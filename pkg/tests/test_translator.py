import copy

import numpy as np
import pytest
import torch

from rainsr.datasets import RainParams, synth_rain, synth_scene
from rainsr.errors import DimensionError, TrainingDivergenceError
from rainsr.imaging import to_model_range
from rainsr.nets import Network, NetworkSpec, OptimizerState, ParamStore
from rainsr.rng import Stream
from rainsr.translator import (NetBundle, ReplayBuffer, init_translator,
                               grad_adv_ls, grad_l1, loss_adv_ls, loss_l1,
                               train_step_translator, translate_sunny_to_rainy)


def _batches(n=4, size=64, seed=0):
    sunny = np.stack([to_model_range(synth_scene(size, seed=seed + i))
                      for i in range(n)]).astype(np.float32)
    rainy_imgs = [synth_rain(synth_scene(size, seed=seed + 100 + i),
                             RainParams(seed=seed + 200 + i)) for i in range(n)]
    rainy = np.stack([to_model_range(img) for img in rainy_imgs]).astype(np.float32)
    return torch.from_numpy(sunny), torch.from_numpy(rainy)


class TestLosses:
    def test_adv_ls_values(self):
        ones = torch.ones(2, 1, 4, 4)
        assert loss_adv_ls(ones, 1.0) == 0.0
        assert loss_adv_ls(torch.zeros(2, 1, 4, 4), 1.0) == 1.0
        assert loss_adv_ls(torch.full((3, 1, 2, 2), 0.5), 1.0) == pytest.approx(0.25)

    def test_adv_ls_gradient_is_derivative(self):
        d = torch.from_numpy(np.random.default_rng(0).standard_normal((1, 1, 3, 3)))
        g = grad_adv_ls(d, 1.0)
        eps = 1e-6
        probe = torch.zeros_like(d)
        probe[0, 0, 1, 2] = 1.0
        fd = (loss_adv_ls(d + eps * probe, 1.0)
              - loss_adv_ls(d - eps * probe, 1.0)) / (2 * eps)
        assert float(g[0, 0, 1, 2]) == pytest.approx(fd, rel=1e-6)

    def test_l1_values(self):
        a = torch.zeros(2, 3)
        assert loss_l1(a, a) == 0.0
        assert loss_l1(a, torch.ones(2, 3)) == 1.0
        assert loss_l1(torch.tensor([0.0, 0.5]),
                       torch.tensor([1.0, 0.5])) == pytest.approx(0.5)

    def test_l1_shape_mismatch(self):
        with pytest.raises(DimensionError):
            loss_l1(torch.zeros(2, 3), torch.zeros(3, 2))
        with pytest.raises(DimensionError):
            grad_l1(torch.zeros(2, 3), torch.zeros(3, 2))


class TestReplayBuffer:
    def test_fills_then_swaps_deterministically(self):
        buf_a, buf_b = ReplayBuffer(4), ReplayBuffer(4)
        for step in range(6):
            fakes = torch.full((2, 3, 2, 2), float(step))
            out_a = buf_a.query(fakes, Stream(step))
            out_b = buf_b.query(fakes, Stream(step))
            assert torch.equal(out_a, out_b)
        assert len(buf_a.images) == 4

    def test_below_capacity_passthrough(self):
        buf = ReplayBuffer(50)
        fakes = torch.randn(4, 3, 2, 2)
        out = buf.query(fakes, Stream(0))
        assert torch.equal(out, fakes)
        assert len(buf.images) == 4


@pytest.fixture(scope="module")
def tiny_state():
    return init_translator(seed=0, base_channels=4, residual_blocks=1,
                           disc_channels=4)


class TestTrainStep:
    def test_zero_step_size_keeps_params(self, tiny_state):
        state = copy.deepcopy(tiny_state)
        for b in (state.g_s2r, state.g_r2s, state.d_rainy, state.d_sunny):
            b.opt.lr = 0.0
        before = {n: p.clone() for n, p in state.g_s2r.params.params.items()}
        s, r = _batches(2, 32)
        rec = train_step_translator(state, s, r)
        for n, p in state.g_s2r.params.params.items():
            assert torch.equal(p, before[n])
        assert rec.step == 1
        assert rec.loss_cycle > 0 and rec.loss_id > 0

    def test_identical_states_step_bit_identically(self, tiny_state):
        a = copy.deepcopy(tiny_state)
        b = copy.deepcopy(tiny_state)
        s, r = _batches(2, 32)
        rec_a = train_step_translator(a, s, r)
        rec_b = train_step_translator(b, s.clone(), r.clone())
        assert rec_a == rec_b
        for ba, bb in ((a.g_s2r, b.g_s2r), (a.g_r2s, b.g_r2s),
                       (a.d_rainy, b.d_rainy), (a.d_sunny, b.d_sunny)):
            for n in ba.params.names():
                assert torch.equal(ba.params.params[n], bb.params.params[n])
                assert torch.equal(ba.opt.m[n], bb.opt.m[n])

    def test_batches_not_mutated(self, tiny_state):
        state = copy.deepcopy(tiny_state)
        s, r = _batches(2, 32, seed=5)
        s0, r0 = s.clone(), r.clone()
        train_step_translator(state, s, r)
        assert torch.equal(s, s0) and torch.equal(r, r0)

    def test_identity_generators_zero_the_identity_and_cycle_terms(self):
        # substituting an identity forward makes loss_id (and the cycle
        # terms) vanish: the penalties measure deviation from pass-through
        class IdentityNet(Network):
            def apply(self, p, x):
                return x * p["scale.w"]

        def identity_bundle():
            net = IdentityNet(NetworkSpec.for_family("translator_gen", 2, 0))
            params = ParamStore(seed=0)
            params.add("scale.w", torch.ones(1))
            return NetBundle(net, params, OptimizerState.for_params(params, 0.0))

        state = init_translator(seed=3, base_channels=4, residual_blocks=1,
                                disc_channels=4)
        state.g_s2r = identity_bundle()
        state.g_r2s = identity_bundle()
        s, r = _batches(2, 32, seed=9)
        rec = train_step_translator(state, s, r)
        assert rec.loss_id == 0.0
        assert rec.loss_cycle == 0.0

    def test_shape_mismatch_rejected(self, tiny_state):
        state = copy.deepcopy(tiny_state)
        s, _ = _batches(2, 32)
        _, r = _batches(2, 64)
        with pytest.raises(DimensionError):
            train_step_translator(state, s, r)

    def test_non_finite_loss_names_term(self, tiny_state):
        state = copy.deepcopy(tiny_state)
        with torch.no_grad():
            state.g_s2r.params.params["stem.w"][0, 0, 0, 0] = float("nan")
        s, r = _batches(2, 32)
        with pytest.raises(TrainingDivergenceError, match="loss_"):
            train_step_translator(state, s, r)


class TestInference:
    def test_translate_preserves_dims_and_range(self, tiny_state):
        img = synth_scene(64, seed=21)
        out = translate_sunny_to_rainy(tiny_state, img)
        assert out.shape == img.shape
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_untrained_translator_is_mild_perturbation(self, tiny_state):
        img = synth_scene(64, seed=22)
        out = translate_sunny_to_rainy(tiny_state, img)
        assert np.abs(out - img).mean() <= 0.5

    def test_non_multiple_of_four_rejected(self, tiny_state):
        with pytest.raises(DimensionError):
            translate_sunny_to_rainy(tiny_state, synth_scene(30, seed=1))
