import copy
from fractions import Fraction

import numpy as np
import pytest
import torch

from rainsr.datasets import RainParams, synth_rain, synth_scene
from rainsr.dsn import (blur3, degrade, domain_distance_weight, init_dsn,
                        grad_content_lowfreq, loss_content_lowfreq,
                        train_step_dsn)
from rainsr.errors import DimensionError
from rainsr.imaging import resize_bicubic, to_model_range
from rainsr.nets import bicubic_resize_tensor


def _hr_batch(n=4, size=64, seed=0, rain=True):
    imgs = []
    for i in range(n):
        img = synth_scene(size, seed=seed + i)
        if rain:
            img = synth_rain(img, RainParams(seed=seed + 50 + i))
        imgs.append(to_model_range(img))
    return torch.from_numpy(np.stack(imgs).astype(np.float32))


def _oracle_blur3(x):
    """Independent 3x3 edge-clamped box filter, plain loops."""
    n, c, h, w = x.shape
    out = np.zeros_like(x)
    for b in range(n):
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    acc = 0.0
                    for di in (-1, 0, 1):
                        for dj in (-1, 0, 1):
                            ii = min(max(i + di, 0), h - 1)
                            jj = min(max(j + dj, 0), w - 1)
                            acc += x[b, ch, ii, jj]
                    out[b, ch, i, j] = acc / 9.0
    return out


class TestContentLoss:
    def test_blur3_preserves_constants(self):
        x = torch.full((1, 3, 8, 8), 0.37)
        assert torch.allclose(blur3(x), x, atol=1e-12)

    def test_anchor_itself_scores_zero(self):
        hr = _hr_batch(1, 32)
        anchor = bicubic_resize_tensor(hr, Fraction(1, 4))
        assert loss_content_lowfreq(anchor, hr) == pytest.approx(0.0, abs=1e-9)

    def test_constant_offset_scores_its_magnitude(self):
        hr = _hr_batch(1, 32, seed=3)
        anchor = bicubic_resize_tensor(hr, Fraction(1, 4))
        assert loss_content_lowfreq(anchor + 1.0, hr) == pytest.approx(1.0, abs=1e-6)

    def test_matches_direct_convolution_oracle(self):
        rng = np.random.default_rng(0)
        hr = torch.from_numpy(rng.standard_normal((2, 3, 16, 16)).astype(np.float32))
        out = torch.from_numpy(rng.standard_normal((2, 3, 4, 4)).astype(np.float32))
        got = loss_content_lowfreq(out, hr)
        anchor = bicubic_resize_tensor(hr.double(), Fraction(1, 4)).numpy()
        want = np.abs(_oracle_blur3(out.double().numpy())
                      - _oracle_blur3(anchor)).mean()
        assert got == pytest.approx(want, abs=1e-6)

    def test_gradient_matches_directional_probe(self):
        rng = np.random.default_rng(1)
        hr = torch.from_numpy(rng.standard_normal((1, 3, 16, 16)))
        out = torch.from_numpy(rng.standard_normal((1, 3, 4, 4)))
        g = grad_content_lowfreq(out, hr)
        probe = torch.from_numpy(rng.standard_normal((1, 3, 4, 4)))
        eps = 1e-6
        fd = (loss_content_lowfreq(out + eps * probe, hr)
              - loss_content_lowfreq(out - eps * probe, hr)) / (2 * eps)
        assert float((g * probe).sum()) == pytest.approx(fd, rel=1e-4)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            loss_content_lowfreq(torch.zeros(1, 3, 5, 5), torch.zeros(1, 3, 16, 16))


@pytest.fixture(scope="module")
def tiny_dsn():
    return init_dsn(seed=0, base_channels=4, disc_channels=4)


class TestTrainStep:
    def test_zero_step_size_keeps_params(self, tiny_dsn):
        state = copy.deepcopy(tiny_dsn)
        state.dsn.opt.lr = 0.0
        state.d_lr.opt.lr = 0.0
        before = {n: p.clone() for n, p in state.dsn.params.params.items()}
        rec = train_step_dsn(state, _hr_batch(2, 32), _hr_batch(2, 8, seed=30))
        for n, p in state.dsn.params.params.items():
            assert torch.equal(p, before[n])
        assert rec.step == 1

    def test_determinism_bit_exact(self, tiny_dsn):
        a, b = copy.deepcopy(tiny_dsn), copy.deepcopy(tiny_dsn)
        hr, lr = _hr_batch(2, 32, seed=5), _hr_batch(2, 8, seed=60)
        rec_a = train_step_dsn(a, hr, lr)
        rec_b = train_step_dsn(b, hr.clone(), lr.clone())
        assert rec_a == rec_b
        for n in a.dsn.params.names():
            assert torch.equal(a.dsn.params.params[n], b.dsn.params.params[n])

    def test_mismatched_scale_rejected(self, tiny_dsn):
        state = copy.deepcopy(tiny_dsn)
        with pytest.raises(DimensionError):
            train_step_dsn(state, _hr_batch(2, 32), _hr_batch(2, 16))

    def test_content_regression_falls_without_adversary(self):
        # the full desk-profile version runs in the acceptance suite; this is
        # the same property on fixed batches.  The bicubic residual head
        # starts the trunk near its optimum, so the measurable fall is from
        # the optimizer's initial kick amplitude down to its steady jitter
        # (measured ratio ~0.55); the gate is the acceptance threshold 0.6.
        state = init_dsn(seed=1, base_channels=8, disc_channels=4,
                         lambda_adv=0.0)
        hr, lr = _hr_batch(4, 32, seed=11), _hr_batch(4, 8, seed=90)
        losses = [train_step_dsn(state, hr, lr).loss_content for _ in range(200)]
        assert np.mean(losses[-10:]) <= 0.6 * np.mean(losses[:10])


class TestDegrade:
    def test_output_quarter_size_in_range(self, tiny_dsn):
        img = synth_scene(64, seed=2)
        out = degrade(tiny_dsn, img)
        assert out.shape == (16, 16, 3)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_untrained_dsn_close_to_bicubic(self, tiny_dsn):
        img = synth_scene(64, seed=3)
        out = degrade(tiny_dsn, img)
        want = resize_bicubic(img, 0.25)
        assert np.abs(out - want).mean() <= 0.1

    def test_non_multiple_of_four_rejected(self, tiny_dsn):
        with pytest.raises(DimensionError):
            degrade(tiny_dsn, synth_scene(30, seed=1))


class TestDomainDistanceWeight:
    def _lr(self):
        return torch.from_numpy(np.stack([
            to_model_range(synth_scene(16, seed=4))]).astype(np.float32))

    def test_constant_stubs_clamp_to_unit_interval(self):
        lr = self._lr()
        for value, expect in ((1.0, 1.0), (0.0, 0.0), (1.7, 1.0), (-0.3, 0.0)):
            stub = lambda x, v=value: torch.full(
                (x.shape[0], 1, x.shape[2] // 8, x.shape[3] // 8), v)
            w = domain_distance_weight(stub, lr)
            assert w.shape == (1, 1, 16, 16)
            assert torch.allclose(w, torch.full_like(w, expect))

    def test_monotone_in_raw_scores(self):
        lr = self._lr()
        rng = np.random.default_rng(7)
        raw = torch.from_numpy(rng.uniform(-0.5, 1.5, (1, 1, 2, 2)).astype(np.float32))
        lo = domain_distance_weight(lambda x: raw, lr)
        hi = domain_distance_weight(lambda x: raw + 0.2, lr)
        assert (hi >= lo - 1e-7).all()
