import math

import numpy as np
import pytest
import torch

from eamnav import completion as cp
from eamnav import worldgen as wg


def tiny_corpus(n, c=8, h=16, w=16, seed=0):
    """Random one-hot tensors shaped like plan rasters."""
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, c, size=(n, h, w))
    out = np.zeros((n, c, h, w), dtype=np.float32)
    for i in range(n):
        for cc in range(c):
            out[i, cc] = idx[i] == cc
    return out


def plan_corpus(n, res=32, seed=0):
    cfg = wg.GenConfig()
    return np.stack([
        wg.rasterize_categories(wg.generate_floor_plan(cfg, seed + i), res)
        for i in range(n)
    ])


class TestSchedule:
    def test_rejects_t1(self):
        with pytest.raises(ValueError):
            cp.make_schedule(T=1)

    def test_rejects_bad_beta_range(self):
        with pytest.raises(ValueError):
            cp.make_schedule(T=10, beta_min=0.5, beta_max=0.1)
        with pytest.raises(ValueError):
            cp.make_schedule(T=10, beta_min=0.0, beta_max=0.1)

    def test_constant_beta_closed_form(self):
        b = 0.01
        s = cp.make_schedule(T=20, beta_min=b, beta_max=b)
        for t in range(1, 21):
            assert s.abar(t) == pytest.approx((1 - b) ** t, rel=1e-12)

    def test_default_schedule_tail(self):
        s = cp.make_schedule()
        assert s.T == 200
        assert s.abar(200) < 0.05
        assert s.abar(200) < s.abar(1)

    def test_strictly_decreasing(self):
        s = cp.make_schedule(T=50)
        assert np.all(np.diff(s.alpha_bar) < 0)


class TestForward:
    def test_identity_at_abar_one(self):
        # beta = 0 limit built directly (make_schedule forbids it)
        T = 5
        beta = np.zeros(T)
        s = cp.NoiseSchedule(T, beta, 1 - beta, np.cumprod(1 - beta), 0.0, 0.0)
        x0 = np.random.default_rng(0).normal(size=(2, 4, 4))
        eps = np.random.default_rng(1).normal(size=(2, 4, 4))
        assert np.allclose(cp.forward_diffuse(x0, 3, eps, s), x0)

    def test_zero_noise_is_scaled_input(self):
        s = cp.make_schedule(T=50)
        x0 = np.random.default_rng(0).normal(size=(3, 5, 5))
        out = cp.forward_diffuse(x0, 20, np.zeros_like(x0), s)
        assert np.allclose(out, math.sqrt(s.abar(20)) * x0)

    def test_t_out_of_range(self):
        s = cp.make_schedule(T=10)
        x = np.zeros((1, 2, 2))
        with pytest.raises(ValueError):
            cp.forward_diffuse(x, 0, x, s)
        with pytest.raises(ValueError):
            cp.forward_diffuse(x, 11, x, s)

    def test_marginal_variance_monte_carlo(self):
        # x0 = 0: per-cell variance of x_t must be (1 - abar_t) within 3 SE
        s = cp.make_schedule(T=50)
        t = 30
        n = 100_000
        rng = np.random.default_rng(42)
        eps = rng.standard_normal((n, 1, 2, 2))
        x_t = cp.forward_diffuse(np.zeros((n, 1, 2, 2)), t, eps, s)
        target = 1.0 - s.abar(t)
        se = target * math.sqrt(2.0 / (n - 1))
        sample_var = x_t.var(axis=0, ddof=1)
        assert np.all(np.abs(sample_var - target) < 3 * se)

    def test_composed_single_steps_match_marginal_moments(self):
        # iterating x_t = sqrt(a_t) x_{t-1} + sqrt(1-a_t) eps_t reproduces the
        # closed-form marginal's first two moments
        s = cp.make_schedule(T=12, beta_min=0.01, beta_max=0.1)
        t_star = 12
        n = 10_000
        rng = np.random.default_rng(7)
        x0 = np.array([[[0.7, -0.4], [1.2, 0.0]]])
        x = np.broadcast_to(x0, (n, 1, 2, 2)).copy()
        for t in range(1, t_star + 1):
            x = cp.forward_step(x, t, rng.standard_normal(x.shape), s)
        ab = s.abar(t_star)
        mean_target = math.sqrt(ab) * x0
        var_target = 1.0 - ab
        se_mean = math.sqrt(var_target / n)
        se_var = var_target * math.sqrt(2.0 / (n - 1))
        assert np.all(np.abs(x.mean(axis=0) - mean_target) < 3 * se_mean)
        assert np.all(np.abs(x.var(axis=0, ddof=1) - var_target) < 3 * se_var)


class TestReverse:
    def test_t1_is_deterministic(self):
        s = cp.make_schedule(T=10)
        x1 = np.random.default_rng(3).normal(size=(2, 4, 4))
        zero = lambda x, t: np.zeros_like(x)
        a = cp.reverse_step(zero, x1, 1, s, np.random.default_rng(1))
        b = cp.reverse_step(zero, x1, 1, s, np.random.default_rng(2))
        assert np.array_equal(a, b)

    def test_zero_eps_hat_reduces_to_rescale(self):
        s = cp.make_schedule(T=10)
        x = np.random.default_rng(0).normal(size=(2, 3, 3))
        out = cp.reverse_step(lambda xx, tt: np.zeros_like(xx), x, 4, s, None)
        _, a, _ = s.at(4)
        assert np.allclose(out, x / math.sqrt(a))

    def test_single_step_implied_noise_closed_form(self):
        # x_t at the exact marginal, oracle predicting the implied noise:
        # x_{t-1} = sqrt(abar_{t-1}) x0 + sqrt(a_t) (1-abar_{t-1})/sqrt(1-abar_t) eps
        s = cp.make_schedule(T=30)
        rng = np.random.default_rng(5)
        x0 = rng.normal(size=(2, 4, 4))
        eps = rng.standard_normal(x0.shape)
        for t in (2, 10, 30):
            x_t = cp.forward_diffuse(x0, t, eps, s)
            out = cp.reverse_step(lambda xx, tt: eps, x_t, t, s, None)
            b, a, ab = s.at(t)
            ab_prev = s.abar(t - 1)
            expected = (
                math.sqrt(ab_prev) * x0
                + math.sqrt(a) * (1 - ab_prev) / math.sqrt(1 - ab) * eps
            )
            assert np.allclose(out, expected, atol=1e-12)

    def test_oracle_denoiser_roundtrip_t50(self):
        s = cp.make_schedule(T=50)
        rng = np.random.default_rng(11)
        x0 = rng.normal(size=(4, 8, 8))

        def oracle(x, t):
            ab = s.abar(t)
            return (x - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)

        x = cp.forward_diffuse(x0, 50, rng.standard_normal(x0.shape), s)
        for t in range(50, 0, -1):
            x = cp.reverse_step(oracle, x, t, s, rng)
        rmse = math.sqrt(float(((x - x0) ** 2).mean()))
        assert rmse < 1e-3

        # and the fully deterministic chain
        x = cp.forward_diffuse(x0, 50, rng.standard_normal(x0.shape), s)
        for t in range(50, 0, -1):
            x = cp.reverse_step(oracle, x, t, s, None)
        assert math.sqrt(float(((x - x0) ** 2).mean())) < 1e-3


class TestTraining:
    def test_untrained_loss_matches_analytic_baseline(self):
        # the output convolution is zero-initialized, so an untrained net
        # predicts exactly zero and the loss is E||eps||^2 = C*H*W
        corpus = tiny_corpus(120)
        s = cp.make_schedule(T=20)
        net = cp.Denoiser(channels=8, width=8, seed=0)
        loss = cp.eval_denoiser_loss(net, corpus, s, seed=1)
        baseline = 8 * 16 * 16
        assert loss == pytest.approx(baseline, rel=0.02)

    def test_trained_loss_improves(self):
        corpus = tiny_corpus(150, seed=3)
        s = cp.make_schedule(T=20)
        hyper = cp.DiffusionHyper(epochs=3, batch_size=16)
        net, curve = cp.train_denoiser(corpus, s, hyper, seed=0,
                                       net=cp.Denoiser(channels=8, width=8, seed=0))
        assert curve[-1][1] < curve[0][1]

    def test_corpus_size_precondition(self):
        s = cp.make_schedule(T=10)
        with pytest.raises(ValueError):
            cp.train_denoiser(tiny_corpus(20), s, cp.DiffusionHyper(epochs=1), seed=0)

    def test_seeded_determinism(self):
        corpus = tiny_corpus(110, seed=5)
        s = cp.make_schedule(T=15)
        hyper = cp.DiffusionHyper(epochs=2, batch_size=16)
        n1, c1 = cp.train_denoiser(corpus, s, hyper, seed=9,
                                   net=cp.Denoiser(channels=8, width=8, seed=9))
        n2, c2 = cp.train_denoiser(corpus, s, hyper, seed=9,
                                   net=cp.Denoiser(channels=8, width=8, seed=9))
        assert c1 == c2
        assert cp.save_denoiser_bytes(n1, s) == cp.save_denoiser_bytes(n2, s)

    def test_gradients_match_finite_differences_toy_net(self):
        # width-4 toy network in float64; autograd vs central differences
        torch.manual_seed(0)
        net = cp.Denoiser(channels=3, width=4, temb=8, seed=0).double()
        x = torch.randn(1, 3, 8, 8, dtype=torch.float64)
        t = torch.tensor([5.0], dtype=torch.float64)
        eps = torch.randn(1, 3, 8, 8, dtype=torch.float64)

        def loss_fn():
            return ((eps - net(x, t)) ** 2).sum()

        loss = loss_fn()
        net.zero_grad()
        loss.backward()
        h = 1e-6
        rng = np.random.default_rng(1)
        worst = 0.0
        for p in net.parameters():
            flat = p.detach().view(-1)
            gflat = p.grad.view(-1)
            k = min(40, flat.numel())
            for j in rng.choice(flat.numel(), size=k, replace=False):
                orig = float(flat[j])
                with torch.no_grad():
                    flat[j] = orig + h
                    lp = float(loss_fn())
                    flat[j] = orig - h
                    lm = float(loss_fn())
                    flat[j] = orig
                fd = (lp - lm) / (2 * h)
                g = float(gflat[j])
                rel = abs(g - fd) / max(abs(g), abs(fd), 1e-8)
                worst = max(worst, rel)
        assert worst < 1e-3, f"worst relative error {worst:.2e}"


class TestRepaint:
    def test_all_known_returns_copies(self):
        known = tiny_corpus(1)[0]
        s = cp.make_schedule(T=10)
        net = cp.Denoiser(channels=8, width=8, seed=0)
        outs = cp.repaint_inpaint(net, known, np.zeros((16, 16)), s, 3, np.random.default_rng(0))
        assert len(outs) == 3
        for o in outs:
            assert np.array_equal(o, known)

    def test_known_region_bit_preserved_100_masks(self):
        known = tiny_corpus(1, seed=2)[0]
        s = cp.make_schedule(T=8, beta_min=1e-3, beta_max=0.1)
        net = cp.Denoiser(channels=8, width=8, seed=1)
        rng = np.random.default_rng(0)
        cats = known.argmax(axis=0)
        for trial in range(100):
            mask = (rng.random((16, 16)) < rng.uniform(0.2, 0.9)).astype(float)
            if not mask.any():
                mask[0, 0] = 1.0
            outs = cp.repaint_inpaint(net, known, mask, s, 1, rng)
            out_cats = outs[0].argmax(axis=0)
            keep = mask == 0
            assert np.array_equal(out_cats[keep], cats[keep]), f"trial {trial}"

    def test_blend_trace_on_4x4_toy(self):
        # replay the generator stream: at every reverse step the cells with
        # m = 0 must equal the forward-sampled known lattice point
        c, hw = 3, 4
        known = tiny_corpus(1, c=c, h=hw, w=hw, seed=4)[0]
        mask = np.zeros((hw, hw))
        mask[:2] = 1.0
        s = cp.make_schedule(T=6, beta_min=1e-3, beta_max=0.2)
        seen = []

        def spy(x, t):
            seen.append((t, x.copy()))
            return np.zeros_like(x)

        cp.repaint_inpaint(spy, known, mask, s, 1, np.random.default_rng(123))

        rng = np.random.default_rng(123)
        k_signed = (2.0 * known - 1.0)[None]
        x = rng.standard_normal((1,) + known.shape)
        m = mask[None, None]
        idx = 0
        for t in range(s.T, 0, -1):
            t_seen, x_seen = seen[idx]
            assert t_seen == t
            assert np.array_equal(x_seen, x)
            idx += 1
            ab_prev = s.abar(t - 1)
            if t - 1 == 0:
                x_known = np.broadcast_to(k_signed, x.shape)
            else:
                z = rng.standard_normal(x.shape)
                x_known = math.sqrt(ab_prev) * k_signed + math.sqrt(1 - ab_prev) * z
            b, a, ab = s.at(t)
            mu = x / math.sqrt(a)  # spy returns zero eps_hat
            if t > 1:
                mu = mu + math.sqrt(cp.posterior_variance(s, t)) * rng.standard_normal(x.shape)
            x = m * mu + (1 - m) * x_known
        assert idx == s.T  # the spy saw every reverse step exactly once

    def test_mask_shape_mismatch(self):
        known = tiny_corpus(1)[0]
        s = cp.make_schedule(T=5)
        net = cp.Denoiser(channels=8, width=8, seed=0)
        with pytest.raises(ValueError):
            cp.repaint_inpaint(net, known, np.zeros((4, 4)), s, 1, np.random.default_rng(0))


class TestLora:
    def test_zero_adapter_is_identity(self):
        net = cp.Denoiser(channels=8, width=8, seed=0)
        adapter = cp.make_lora(net, rank=4, seed=1)
        view = cp.apply_lora(net, adapter)
        x = np.random.default_rng(0).normal(size=(2, 8, 16, 16)).astype(np.float32)
        assert np.array_equal(view.predict(x, 3), net.predict(x, 3))

    def test_trainable_parameter_count(self):
        net = cp.Denoiser(channels=8, width=8, seed=0)
        adapter = cp.make_lora(net, rank=4, seed=0)
        expected = 0
        params = dict(net.named_parameters())
        for name in cp.default_lora_targets(net):
            w = params[name]
            d_out = w.shape[0]
            d_in = int(np.prod(w.shape[1:]))
            expected += 4 * (d_in + d_out)
        assert adapter.n_trainable() == expected

    def test_rank_full_adapter_represents_any_delta(self):
        rng = np.random.default_rng(0)
        target = rng.normal(size=(8, 8))
        a = rng.normal(size=(8, 8))
        b = target @ np.linalg.pinv(a)
        residual = np.abs(b @ a - target).max()
        assert residual < 1e-6

    def test_base_frozen_during_lora_training(self):
        corpus = tiny_corpus(110, seed=1)
        s = cp.make_schedule(T=10)
        net = cp.Denoiser(channels=8, width=8, seed=0)
        before = cp.save_denoiser_bytes(net, s)
        adapter = cp.make_lora(net, rank=4, seed=2)
        cp.train_lora(net, adapter, corpus, s, cp.DiffusionHyper(epochs=1), seed=3)
        assert cp.save_denoiser_bytes(net, s) == before

    def test_zero_init_adapter_reproduces_base_loss(self):
        corpus = tiny_corpus(110, seed=1)
        s = cp.make_schedule(T=10)
        net = cp.Denoiser(channels=8, width=8, seed=0)
        adapter = cp.make_lora(net, rank=4, seed=2)
        base_loss = cp.eval_denoiser_loss(net, corpus, s, seed=5)
        lora_loss = cp.eval_denoiser_loss(cp.apply_lora(net, adapter), corpus, s, seed=5)
        assert lora_loss == pytest.approx(base_loss, rel=1e-6)

    def test_lora_training_reduces_loss_on_shifted_corpus(self):
        # train a small base on one category family, then adapt to a shifted
        # family through the frozen base (an untrained base would pass zero
        # gradients through its zero-initialized output convolution)
        def constant_corpus(cats, n=120):
            out = np.zeros((n, 8, 16, 16), dtype=np.float32)
            for i in range(n):
                out[i, cats[i % len(cats)]] = 1.0
            return out

        s = cp.make_schedule(T=10)
        base, _ = cp.train_denoiser(
            constant_corpus([0, 1, 2]), s, cp.DiffusionHyper(epochs=2, batch_size=16),
            seed=0, net=cp.Denoiser(channels=8, width=8, seed=0),
        )
        shifted = constant_corpus([5, 6, 7])
        adapter = cp.make_lora(base, rank=4, seed=2)
        _, curve = cp.train_lora(base, adapter, shifted, s,
                                 cp.DiffusionHyper(epochs=6, batch_size=16, learning_rate=1e-3),
                                 seed=3)
        assert curve[-1][2] < curve[0][2]  # validation loss on the shifted corpus

    def test_shape_mismatch_rejected(self):
        net = cp.Denoiser(channels=8, width=8, seed=0)
        other = cp.Denoiser(channels=8, width=16, seed=0)
        adapter = cp.make_lora(other, rank=4, seed=0)
        with pytest.raises(ValueError):
            cp.apply_lora(net, adapter)


class TestPersistence:
    def test_denoiser_roundtrip(self):
        net = cp.Denoiser(channels=8, width=8, seed=3)
        s = cp.make_schedule(T=25, beta_min=2e-4, beta_max=0.05)
        data = cp.save_denoiser_bytes(net, s)
        loaded, s2 = cp.load_denoiser_bytes(data)
        assert s2.T == 25 and s2.beta_min == 2e-4
        assert cp.save_denoiser_bytes(loaded, s2) == data
        x = np.random.default_rng(0).normal(size=(8, 16, 16)).astype(np.float32)
        assert np.array_equal(loaded.predict(x, 5), net.predict(x, 5))

    def test_lora_roundtrip(self):
        net = cp.Denoiser(channels=8, width=8, seed=3)
        adapter = cp.make_lora(net, rank=4, seed=1)
        with torch.no_grad():
            for a, b in adapter.matrices.values():
                b += 0.1
        data = cp.save_lora_bytes(adapter)
        again = cp.load_lora_bytes(data)
        assert cp.save_lora_bytes(again) == data
        assert again.rank == 4

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            cp.load_denoiser_bytes(b"nope")
        with pytest.raises(ValueError):
            cp.load_lora_bytes(b"nope")
