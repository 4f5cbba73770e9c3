import numpy as np
import pytest
import torch

from agekin.tfan_gan import (DISC_MIN_WIDTH, TFAN, TINY_CONFIG, Discriminator,
                             GanConfig, Generator, init_params, load_checkpoint,
                             save_checkpoint)

torch.set_num_threads(1)


def finite_diff_max_rel_error(model, loss_fn, steps=(1e-5, 1e-6),
                              entries_per_param=3, seed=0):
    """Central finite differences against autograd, sampling a few entries of
    every named parameter. Model must be float64.

    Each entry is checked at two step sizes and scored by the better one:
    a leaky-ReLU kink crossed at the larger step resolves at the smaller,
    float64 cancellation noise at the smaller step resolves at the larger,
    and a genuine gradient bug fails at both. The denominator is floored at
    1e-6 because gradients below that cannot be resolved to 1e-4 relative
    by 64-bit differencing at all.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(model.parameters()))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(model.parameters(), grads):
        flat = p.data.view(-1)
        gflat = g.reshape(-1)
        idxs = rng.choice(flat.numel(), size=min(entries_per_param, flat.numel()),
                         replace=False)
        for i in idxs:
            orig = flat[i].item()
            errors = []
            for h in steps:
                flat[i] = orig + h
                plus = loss_fn().item()
                flat[i] = orig - h
                minus = loss_fn().item()
                flat[i] = orig
                fd = (plus - minus) / (2 * h)
                denom = max(abs(fd), abs(gflat[i].item()), 1e-6)
                errors.append(abs(fd - gflat[i].item()) / denom)
            worst = max(worst, min(errors))
    return worst


class TestTFAN:
    def _zero_modulation(self, tfan, gamma=1.0, beta=0.0):
        with torch.no_grad():
            for p in tfan.parameters():
                p.zero_()
            c = tfan.channels
            tfan.conv_mod.bias[:c] = gamma
            tfan.conv_mod.bias[c:] = beta

    def test_reduces_to_instance_norm(self):
        tfan = TFAN(4, 2)
        self._zero_modulation(tfan)
        x = torch.randn(2, 4, 10, 8)
        src = torch.randn(2, 1, 80, 32)
        out = tfan(x, src)
        mu = x.mean(dim=(2, 3), keepdim=True)
        var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
        expected = (x - mu) / torch.sqrt(var + 1e-5)
        assert torch.allclose(out, expected, atol=1e-6)

    def test_constant_features_give_beta(self):
        tfan = TFAN(3, 2)
        self._zero_modulation(tfan, gamma=1.0, beta=0.25)
        x = torch.full((1, 3, 6, 6), 7.0)
        out = tfan(x, torch.randn(1, 1, 80, 24))
        assert torch.allclose(out, torch.full_like(out, 0.25), atol=1e-5)

    def test_per_channel_mean_equals_beta_mean(self):
        torch.manual_seed(0)
        tfan = TFAN(5, 3)
        init_params(tfan, 1)
        with torch.no_grad():  # force gamma to 1, keep learned beta convs
            tfan.conv_mod.weight[:5].zero_()
            tfan.conv_mod.bias[:5] = 1.0
        x = torch.randn(1, 5, 12, 16)
        src = torch.randn(1, 1, 80, 64)
        out = tfan(x, src)
        import torch.nn.functional as F
        cond = F.interpolate(src, size=(12, 16), mode="nearest")
        h = F.leaky_relu(tfan.conv_in(cond), 0.2)
        beta = tfan.conv_mod(h)[:, 5:]
        for c in range(5):
            assert abs(out[0, c].mean() - beta[0, c].mean()) < 1e-4

    def test_shape_mismatch_rejected(self):
        tfan = TFAN(4, 2)
        with pytest.raises(ValueError):
            tfan(torch.randn(1, 3, 8, 8), torch.randn(1, 1, 80, 32))

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        tfan = TFAN(3, 2, dtype=torch.float64)
        init_params(tfan, 2)
        with torch.no_grad():  # move off the zero-bias saddle
            for p in tfan.parameters():
                p.add_(0.05 * torch.randn_like(p))
        x = torch.randn(1, 3, 8, 8, dtype=torch.float64)
        src = torch.randn(1, 1, 80, 32, dtype=torch.float64)

        def loss_fn():
            return (tfan(x, src) ** 2).mean()

        assert finite_diff_max_rel_error(tfan, loss_fn) < 1e-4


class TestGenerator:
    def test_shape_preserved(self):
        gen = init_params(Generator(TINY_CONFIG), 0)
        with torch.no_grad():
            for t in (8, 64, 128, 512):
                x = torch.randn(1, 1, 80, t)
                assert gen(x).shape == x.shape

    def test_indivisible_length_rejected(self):
        gen = Generator(TINY_CONFIG)
        with pytest.raises(ValueError, match="pad"):
            gen(torch.randn(1, 1, 80, 63))

    def test_deterministic_forward(self):
        gen = init_params(Generator(TINY_CONFIG), 3)
        x = torch.randn(1, 1, 80, 64)
        with torch.no_grad():
            a, b = gen(x), gen(x)
        assert torch.equal(a, b)

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        gen = Generator(TINY_CONFIG, dtype=torch.float64)
        init_params(gen, 4)
        with torch.no_grad():
            for p in gen.parameters():
                p.add_(0.05 * torch.randn_like(p))
        x = torch.randn(1, 1, 80, 16, dtype=torch.float64)
        target = torch.randn(1, 1, 80, 16, dtype=torch.float64)

        def loss_fn():
            return ((gen(x) - target) ** 2).mean()

        assert finite_diff_max_rel_error(gen, loss_fn, entries_per_param=2) < 1e-4


class TestDiscriminator:
    def test_logit_grid_shape(self):
        d = Discriminator(GanConfig())
        assert d(torch.randn(1, 1, 80, 64)).shape == (1, 1, 5, 4)
        assert d(torch.randn(1, 1, 80, 128)).shape == (1, 1, 5, 8)

    def test_zero_params_zero_logits(self):
        d = Discriminator(TINY_CONFIG)
        with torch.no_grad():
            for p in d.parameters():
                p.zero_()
        out = d(torch.randn(2, 1, 80, 64))
        assert torch.all(out == 0)

    def test_narrow_input_rejected(self):
        d = Discriminator(TINY_CONFIG)
        with pytest.raises(ValueError, match="receptive"):
            d(torch.randn(1, 1, 80, DISC_MIN_WIDTH - 1))

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        d = Discriminator(TINY_CONFIG, dtype=torch.float64)
        init_params(d, 5)
        with torch.no_grad():
            for p in d.parameters():
                p.add_(0.05 * torch.randn_like(p))
        x = torch.randn(1, 1, 80, 16, dtype=torch.float64)

        def loss_fn():
            return ((d(x) - 1.0) ** 2).mean()

        assert finite_diff_max_rel_error(d, loss_fn) < 1e-4


class TestInitParams:
    def test_same_seed_identical(self):
        a = init_params(Generator(TINY_CONFIG), 9)
        b = init_params(Generator(TINY_CONFIG), 9)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_different_seeds_differ(self):
        a = init_params(Generator(TINY_CONFIG), 9)
        b = init_params(Generator(TINY_CONFIG), 10)
        assert any(not torch.equal(pa, pb)
                   for pa, pb in zip(a.parameters(), b.parameters()))

    def test_biases_zero(self):
        gen = init_params(Generator(TINY_CONFIG), 0)
        for name, p in gen.named_parameters():
            if name.endswith("bias"):
                assert torch.all(p == 0)

    def test_weight_statistics(self):
        d = init_params(Discriminator(GanConfig()), 42)
        w = d.layers[3].weight  # 8c x 4c x 4 x 4 > 1e4 entries
        assert w.numel() >= 10_000
        # sample mean of >= 1e4 draws from N(0, 0.02) is within 0.001 at 3 sigma
        assert abs(w.mean().item()) < 0.001
        assert abs(w.std().item() - 0.02) < 0.002


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        gen = init_params(Generator(TINY_CONFIG), 1)
        save_checkpoint(gen, tmp_path / "ck", TINY_CONFIG, seed=1, step=17)
        back, manifest = load_checkpoint(tmp_path / "ck")
        assert manifest["step"] == 17
        for pa, pb in zip(gen.parameters(), back.parameters()):
            assert torch.equal(pa, pb)
        x = torch.randn(1, 1, 80, 16)
        with torch.no_grad():
            assert torch.equal(gen(x), back(x))
