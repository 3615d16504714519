"""Noise schedule, fMRI augmentation, diffusion prior, and image decoder."""

import numpy as np
import pytest
import torch

from gradcheck import finite_difference_check
from visdecode.preproc import BoldClip
from visdecode.prior import (Denoiser, DiffusionPrior, ImageDecoder,
                             NoiseSchedule, PriorError,
                             ReconstructionCandidate, augment_fmri,
                             noise_forward, prior_train_step, select_best,
                             train_decoder)


class TestNoiseSchedule:
    def test_linear_endpoints(self):
        s = NoiseSchedule.linear(n_steps=1000, beta_start=1e-4, beta_end=0.02)
        assert len(s) == 1000
        assert s.betas[0] == pytest.approx(1e-4)
        assert s.betas[-1] == pytest.approx(0.02)

    def test_alpha_bar_decreasing_product(self):
        s = NoiseSchedule.linear(n_steps=50)
        assert np.all(np.diff(s.alpha_bar) < 0)
        # frozen oracle: alpha_bar is the running product of (1 - beta)
        np.testing.assert_allclose(s.alpha_bar, np.cumprod(1 - s.betas),
                                   rtol=1e-12)

    def test_rejects_bad_betas(self):
        with pytest.raises(PriorError):
            NoiseSchedule(betas=np.array([0.1, 0.05]))  # decreasing
        with pytest.raises(PriorError):
            NoiseSchedule(betas=np.array([0.0, 0.1]))   # zero


class TestNoiseForward:
    def test_marginal_moments(self):
        # Monte Carlo: mean sqrt(abar) x0, variance 1 - abar
        s = NoiseSchedule.linear(n_steps=100)
        x0 = torch.full((2000, 4), 2.0)
        t = 60
        out = noise_forward(x0, t, s, np.random.default_rng(0)).numpy()
        abar = s.alpha_bar[t]
        assert out.mean() == pytest.approx(np.sqrt(abar) * 2.0, abs=0.02)
        assert out.var() == pytest.approx(1 - abar, rel=0.05)

    def test_t_zero_nearly_clean(self):
        s = NoiseSchedule.linear(n_steps=100)
        x0 = torch.ones(10, 4)
        out = noise_forward(x0, 0, s, np.random.default_rng(1))
        assert (out - x0).abs().mean().item() < 0.1

    def test_out_of_range(self):
        s = NoiseSchedule.linear(n_steps=10)
        with pytest.raises(PriorError):
            noise_forward(torch.ones(1, 2), 10, s, np.random.default_rng(0))


class TestAugmentFmri:
    def make_clip(self, seed=0):
        return BoldClip(data=np.random.default_rng(seed).random((5, 12)),
                        source_trial="t0", start_tr=3)

    def test_all_off_is_identity(self):
        clip = self.make_clip()
        out = augment_fmri(clip, np.random.default_rng(0), p_permute=0.0,
                           p_normalize=0.0, p_sparse=0.0)
        np.testing.assert_array_equal(out.data, clip.data)

    def test_permute_preserves_row_set(self):
        clip = self.make_clip(1)
        out = augment_fmri(clip, np.random.default_rng(2), p_permute=1.0,
                           p_normalize=0.0, p_sparse=0.0)
        got = {tuple(row) for row in out.data}
        want = {tuple(row) for row in clip.data}
        assert got == want

    def test_normalize_zero_mean_rows(self):
        clip = self.make_clip(3)
        out = augment_fmri(clip, np.random.default_rng(4), p_permute=0.0,
                           p_normalize=1.0, p_sparse=0.0)
        assert np.all(np.abs(out.data.mean(axis=1)) < 1e-9)

    def test_sparse_zeroes_whole_parcels(self):
        clip = self.make_clip(5)
        out = augment_fmri(clip, np.random.default_rng(6), p_permute=0.0,
                           p_normalize=0.0, p_sparse=0.6)
        for j in range(clip.data.shape[1]):
            col = out.data[:, j]
            assert np.all(col == 0) or np.array_equal(col, clip.data[:, j])
        assert np.any(np.all(out.data == 0, axis=0))

    def test_original_untouched(self):
        clip = self.make_clip(7)
        before = clip.data.copy()
        augment_fmri(clip, np.random.default_rng(8), p_permute=1.0,
                     p_normalize=1.0, p_sparse=0.5)
        np.testing.assert_array_equal(clip.data, before)

    def test_bad_probability(self):
        with pytest.raises(PriorError):
            augment_fmri(self.make_clip(), np.random.default_rng(0),
                         p_sparse=1.5)


def tiny_prior(**kw):
    defaults = dict(model_dim=8, n_tokens=4,
                    schedule=NoiseSchedule.linear(n_steps=50), seed=42)
    defaults.update(kw)
    return DiffusionPrior(**defaults)


class TestDiffusionPrior:
    def test_project_latent_linear(self):
        prior = tiny_prior()
        a = torch.randn(3, 8, generator=torch.Generator().manual_seed(0))
        b = torch.randn(3, 8, generator=torch.Generator().manual_seed(1))
        with torch.no_grad():
            lhs = prior.project_latent(a + b) + prior.proj.bias.view(1, 4, 8)
            rhs = prior.project_latent(a) + prior.project_latent(b)
        assert torch.allclose(lhs, rhs, atol=1e-5)
        assert prior.project_latent(a).shape == (3, 4, 8)

    def test_project_latent_bad_dim(self):
        with pytest.raises(PriorError):
            tiny_prior().project_latent(torch.zeros(2, 7))

    def test_loss_matches_replay_oracle(self):
        # replay the rng stream and recompute the alpha-scaled objective
        prior = tiny_prior(alpha=0.3)
        h = torch.randn(4, 8, generator=torch.Generator().manual_seed(2))
        target = torch.randn(4, 4, 8, generator=torch.Generator().manual_seed(3))
        got = prior.loss(h, target, np.random.default_rng(9)).item()

        rng = np.random.default_rng(9)
        t = rng.integers(0, 50, size=4)
        eps = torch.as_tensor(rng.standard_normal((4, 4, 8)),
                              dtype=torch.float32)
        abar = torch.as_tensor(prior.schedule.alpha_bar[t], dtype=torch.float32)
        x_t = torch.sqrt(abar)[:, None, None] * target + \
            torch.sqrt(1 - abar)[:, None, None] * eps
        with torch.no_grad():
            pred = prior.denoiser(x_t, prior.project_latent(h),
                                  torch.as_tensor(t / 50, dtype=torch.float32))
        want = 0.3 * torch.mean((target - pred) ** 2).item()
        assert got == pytest.approx(want, rel=1e-6)

    def test_alpha_scales_loss(self):
        h = torch.randn(3, 8, generator=torch.Generator().manual_seed(4))
        target = torch.randn(3, 4, 8, generator=torch.Generator().manual_seed(5))
        a = tiny_prior(alpha=0.3).loss(h, target, np.random.default_rng(1)).item()
        b = tiny_prior(alpha=0.6).loss(h, target, np.random.default_rng(1)).item()
        assert b == pytest.approx(2 * a, rel=1e-6)

    def test_alpha_validated(self):
        with pytest.raises(PriorError):
            tiny_prior(alpha=0.0)

    def test_training_reduces_loss(self):
        prior = tiny_prior()
        rng = np.random.default_rng(10)
        h = torch.as_tensor(rng.standard_normal((16, 8)), dtype=torch.float32)
        target = torch.tanh(h)[:, None, :].repeat(1, 4, 1)
        opt = torch.optim.Adam(prior.parameters(), lr=1e-3)
        train_rng = np.random.default_rng(11)
        losses = [prior_train_step(prior, opt, h, target, train_rng)
                  for _ in range(400)]
        assert np.mean(losses[-20:]) < np.mean(losses[:20]) / 2

    def test_sampling_deterministic(self):
        prior = tiny_prior()
        h = torch.randn(2, 8, generator=torch.Generator().manual_seed(6))
        a = prior.sample(h, n_steps=10, rng=np.random.default_rng(0))
        b = prior.sample(h, n_steps=10, rng=np.random.default_rng(0))
        c = prior.sample(h, n_steps=10, rng=np.random.default_rng(1))
        assert torch.equal(a, b)
        assert not torch.equal(a, c)

    def test_single_step_is_direct_prediction(self):
        # n_steps=1 degenerates to one denoiser call at the last timestep
        prior = tiny_prior()
        h = torch.randn(2, 8, generator=torch.Generator().manual_seed(7))
        got = prior.sample(h, n_steps=1, rng=np.random.default_rng(3))
        noise = torch.as_tensor(
            np.random.default_rng(3).standard_normal((2, 4, 8)),
            dtype=torch.float32)
        with torch.no_grad():
            want = prior.denoiser(noise, prior.project_latent(h),
                                  torch.full((2,), 49 / 50))
        assert torch.allclose(got, want, atol=1e-6)

    def test_sample_shape_and_steps_validated(self):
        prior = tiny_prior()
        h = torch.zeros(3, 8)
        assert prior.sample(h, n_steps=5).shape == (3, 4, 8)
        with pytest.raises(PriorError):
            prior.sample(h, n_steps=0)

    def test_denoiser_gradient_check(self):
        net = Denoiser(n_tokens=2, model_dim=4, hidden=16, t_dim=8).double()
        g = torch.Generator().manual_seed(8)
        x_t = torch.randn(2, 2, 4, generator=g, dtype=torch.float64)
        cond = torch.randn(2, 2, 4, generator=g, dtype=torch.float64)
        t_frac = torch.tensor([0.1, 0.8], dtype=torch.float64)
        target = torch.randn(2, 2, 4, generator=g, dtype=torch.float64)
        finite_difference_check(
            lambda: torch.mean((net(x_t, cond, t_frac) - target) ** 2),
            net.parameters(), n_entries=4)


class TestImageDecoder:
    def test_output_range_and_shape(self):
        dec = ImageDecoder(n_tokens=4, model_dim=8)
        with torch.no_grad():
            out = dec(torch.randn(3, 4, 8) * 10)
        assert out.shape == (3, 32, 32, 3)
        assert out.min().item() >= 0.0 and out.max().item() <= 1.0

    def test_learns_grid_to_image_map(self):
        from visdecode.synthworld import WorldSpec, generate_world
        world = generate_world(WorldSpec(n_parcels=32, n_classes=8,
                                         latent_dim=16,
                                         informative_set=(1, 2), seed=0))
        images = torch.as_tensor(
            np.stack([world.render(k) for k in range(8)]), dtype=torch.float32)
        grids = torch.randn(8, 4, 8, generator=torch.Generator().manual_seed(9))
        dec = ImageDecoder(n_tokens=4, model_dim=8)
        losses = train_decoder(dec, grids, images, steps=800, batch_size=8)
        assert losses[-1] < 0.01
        with torch.no_grad():
            recon = dec(grids)
        # per-image pixel correlation against the true renders
        for k in range(8):
            r = np.corrcoef(recon[k].numpy().ravel(),
                            images[k].numpy().ravel())[0, 1]
            assert r > 0.9


class TestSelectBest:
    def test_picks_highest_cosine(self):
        h = np.array([1.0, 0.0, 0.0, 0.0])
        good = ReconstructionCandidate(
            image=np.zeros((2, 2)), image_latent=np.tile(h, (3, 1)),
            similarity_to_fmri=0.0)
        bad = ReconstructionCandidate(
            image=np.ones((2, 2)), image_latent=np.tile([0, 1.0, 0, 0], (3, 1)),
            similarity_to_fmri=0.0)
        chosen = select_best([bad, good], h)
        assert chosen is good
        assert good.similarity_to_fmri == pytest.approx(1.0)
        assert bad.similarity_to_fmri == pytest.approx(0.0)

    def test_tie_resolves_to_first(self):
        h = np.array([1.0, 0.0])
        a = ReconstructionCandidate(image=np.zeros(1),
                                    image_latent=np.tile(h, (2, 1)),
                                    similarity_to_fmri=0.0)
        b = ReconstructionCandidate(image=np.ones(1),
                                    image_latent=np.tile(h, (2, 1)),
                                    similarity_to_fmri=0.0)
        assert select_best([a, b], h) is a

    def test_empty_rejected(self):
        with pytest.raises(PriorError):
            select_best([], np.ones(4))
