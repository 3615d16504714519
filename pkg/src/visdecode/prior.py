"""Diffusion prior: translates fMRI latents into image-latent token grids.

A linear projection lifts the fMRI latent to a token grid; a skip-connected
encoder-decoder denoiser, conditioned on that grid and a timestep
embedding, predicts the clean image-latent grid from its noised version.
Training minimizes alpha * ||target - prediction||^2; sampling runs a
deterministic 20-step schedule from pure noise.  A small trained decoder
maps grids back to pixels, and best-of-n selection picks the candidate
whose latent best matches the fMRI latent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .preproc import BoldClip
from .synthworld import IMAGE_SHAPE


class PriorError(ValueError):
    pass


@dataclass
class NoiseSchedule:
    """Linear-beta schedule with cached cumulative alpha-bar."""

    betas: np.ndarray

    @classmethod
    def linear(cls, n_steps: int = 1000, beta_start: float = 1e-4,
               beta_end: float = 0.02) -> "NoiseSchedule":
        return cls(betas=np.linspace(beta_start, beta_end, n_steps))

    def __post_init__(self):
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise PriorError("betas must lie in (0, 1)")
        if np.any(np.diff(self.betas) < 0):
            raise PriorError("betas must be non-decreasing")
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.cumprod(self.alphas)

    def __len__(self) -> int:
        return len(self.betas)


def noise_forward(x0: torch.Tensor, t: int, schedule: NoiseSchedule,
                  rng: np.random.Generator) -> torch.Tensor:
    """Forward process sample: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if not 0 <= t < len(schedule):
        raise PriorError(f"step {t} out of range")
    abar = schedule.alpha_bar[t]
    eps = torch.as_tensor(rng.standard_normal(tuple(x0.shape)), dtype=x0.dtype)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def augment_fmri(clip: BoldClip, rng: np.random.Generator,
                 p_permute: float = 0.5, p_normalize: float = 0.5,
                 p_sparse: float = 0.1) -> BoldClip:
    """fMRI augmentations: TR permutation, row renormalization, and sparse
    parcel masking (each parcel zeroed with probability p_sparse)."""
    for p in (p_permute, p_normalize, p_sparse):
        if not 0.0 <= p <= 1.0:
            raise PriorError("augmentation probabilities must be in [0, 1]")
    data = clip.data.copy()
    if rng.random() < p_permute:
        data = data[rng.permutation(data.shape[0])]
    if rng.random() < p_normalize:
        std = data.std(axis=1, keepdims=True)
        data = (data - data.mean(axis=1, keepdims=True)) / np.where(std < 1e-12, 1, std)
    if p_sparse > 0:
        mask = rng.random(data.shape[1]) >= p_sparse
        data = data * mask[None, :]
    return BoldClip(data=data, source_trial=clip.source_trial, start_tr=clip.start_tr)


class Denoiser(nn.Module):
    """Skip-connected encoder-decoder over flattened token grids,
    conditioned on the projected fMRI grid and a sinusoidal timestep."""

    def __init__(self, n_tokens: int, model_dim: int, hidden: int = 256,
                 t_dim: int = 32, seed: int = 42):
        super().__init__()
        torch.manual_seed(seed + 505)
        self.n_tokens = n_tokens
        self.model_dim = model_dim
        self.t_dim = t_dim
        flat = n_tokens * model_dim
        self.enc1 = nn.Linear(2 * flat + t_dim, hidden)
        self.enc2 = nn.Linear(hidden, hidden // 2)
        self.dec1 = nn.Linear(hidden // 2, hidden)
        self.dec2 = nn.Linear(2 * hidden, flat)  # skip from enc1
        self.act = nn.GELU()

    def time_embedding(self, t_frac: torch.Tensor) -> torch.Tensor:
        half = self.t_dim // 2
        freqs = torch.exp(torch.linspace(0, np.log(1000.0), half)).to(t_frac.dtype)
        ang = t_frac[:, None] * freqs[None]
        return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)

    def forward(self, x_t: torch.Tensor, cond_grid: torch.Tensor,
                t_frac: torch.Tensor) -> torch.Tensor:
        """Predict the clean grid from [B, n_tokens, d] noised input."""
        b = x_t.shape[0]
        inp = torch.cat([x_t.reshape(b, -1), cond_grid.reshape(b, -1),
                         self.time_embedding(t_frac)], dim=-1)
        h1 = self.act(self.enc1(inp))
        h2 = self.act(self.enc2(h1))
        h3 = self.act(self.dec1(h2))
        out = self.dec2(torch.cat([h3, h1], dim=-1))
        return out.view(b, self.n_tokens, self.model_dim)


class DiffusionPrior(nn.Module):
    """Projection W plus conditional denoiser plus noise schedule."""

    def __init__(self, model_dim: int = 64, n_tokens: int = 9,
                 alpha: float = 0.3, schedule: NoiseSchedule | None = None,
                 seed: int = 42):
        super().__init__()
        if not 0.0 < alpha <= 1.0:
            raise PriorError("alpha must be in (0, 1]")
        torch.manual_seed(seed + 606)
        self.model_dim = model_dim
        self.n_tokens = n_tokens
        self.alpha = alpha
        self.schedule = schedule or NoiseSchedule.linear()
        self.proj = nn.Linear(model_dim, n_tokens * model_dim)
        self.denoiser = Denoiser(n_tokens, model_dim, seed=seed)

    def project_latent(self, h_fmri: torch.Tensor) -> torch.Tensor:
        """Linear lift [B, d] -> [B, n_tokens, d]."""
        if h_fmri.shape[-1] != self.model_dim:
            raise PriorError(f"latent dim {h_fmri.shape[-1]} != {self.model_dim}")
        return self.proj(h_fmri).view(-1, self.n_tokens, self.model_dim)

    def loss(self, h_fmri: torch.Tensor, target_grid: torch.Tensor,
             rng: np.random.Generator) -> torch.Tensor:
        """alpha-scaled L2 between the target grid and the denoised grid."""
        b = h_fmri.shape[0]
        t = rng.integers(0, len(self.schedule), size=b)
        abar = torch.as_tensor(self.schedule.alpha_bar[t], dtype=target_grid.dtype)
        eps = torch.as_tensor(rng.standard_normal(tuple(target_grid.shape)),
                              dtype=target_grid.dtype)
        x_t = torch.sqrt(abar)[:, None, None] * target_grid + \
            torch.sqrt(1 - abar)[:, None, None] * eps
        cond = self.project_latent(h_fmri)
        t_frac = torch.as_tensor(t / len(self.schedule), dtype=target_grid.dtype)
        pred = self.denoiser(x_t, cond, t_frac)
        return self.alpha * torch.mean((target_grid - pred) ** 2)

    @torch.no_grad()
    def sample(self, h_fmri: torch.Tensor, n_steps: int = 20,
               rng: np.random.Generator | None = None) -> torch.Tensor:
        """Deterministic (DDIM-style) sampling over n_steps evenly spaced
        schedule indices, starting from pure noise."""
        if n_steps < 1:
            raise PriorError("n_steps must be >= 1")
        rng = rng or np.random.default_rng(0)
        b = h_fmri.shape[0]
        cond = self.project_latent(h_fmri)
        x = torch.as_tensor(
            rng.standard_normal((b, self.n_tokens, self.model_dim)),
            dtype=h_fmri.dtype)
        steps = np.linspace(len(self.schedule) - 1, 0, n_steps).round().astype(int)
        for i, t in enumerate(steps):
            t_frac = torch.full((b,), t / len(self.schedule), dtype=h_fmri.dtype)
            x0_pred = self.denoiser(x, cond, t_frac)
            if i + 1 == len(steps):
                x = x0_pred
            else:
                abar_t = self.schedule.alpha_bar[t]
                abar_prev = self.schedule.alpha_bar[steps[i + 1]]
                eps_implied = (x - np.sqrt(abar_t) * x0_pred) / np.sqrt(1 - abar_t)
                x = np.sqrt(abar_prev) * x0_pred + \
                    np.sqrt(1 - abar_prev) * eps_implied
        return x


def prior_train_step(prior: DiffusionPrior, optimizer: torch.optim.Optimizer,
                     h_fmri: torch.Tensor, target_grid: torch.Tensor,
                     rng: np.random.Generator) -> float:
    optimizer.zero_grad()
    loss = prior.loss(h_fmri, target_grid, rng)
    if not torch.isfinite(loss):
        raise PriorError("non-finite diffusion loss")
    loss.backward()
    optimizer.step()
    return float(loss.item())


class ImageDecoder(nn.Module):
    """Small trained decoder closing the loop from latent grids to pixels."""

    def __init__(self, n_tokens: int = 9, model_dim: int = 64, seed: int = 42):
        super().__init__()
        torch.manual_seed(seed + 707)
        n_pixels = int(np.prod(IMAGE_SHAPE))
        flat = n_tokens * model_dim
        self.net = nn.Sequential(
            nn.Linear(flat, 2 * flat), nn.GELU(),
            nn.Linear(2 * flat, n_pixels))

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        """[B, n_tokens, d] -> [B, H, W, C] images clipped to [0, 1]."""
        out = self.net(grid.reshape(grid.shape[0], -1))
        return torch.clamp(out, 0.0, 1.0).view(-1, *IMAGE_SHAPE)


def train_decoder(decoder: ImageDecoder, grids: torch.Tensor,
                  images: torch.Tensor, steps: int = 1500, batch_size: int = 32,
                  lr: float = 1e-3, seed: int = 42) -> list[float]:
    """Supervised grid -> image regression on ground-truth pairs."""
    opt = torch.optim.Adam(decoder.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    losses = []
    n = grids.shape[0]
    for _ in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        pred = decoder.net(grids[idx].reshape(len(idx), -1))
        loss = torch.mean((pred - images[idx].reshape(len(idx), -1)) ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.item()))
    return losses


@dataclass
class ReconstructionCandidate:
    image: np.ndarray
    image_latent: np.ndarray      # [n_tokens, model_dim]
    similarity_to_fmri: float


def select_best(candidates: list[ReconstructionCandidate],
                h_fmri: np.ndarray) -> ReconstructionCandidate:
    """Pick the candidate whose pooled latent has the highest cosine
    similarity to the fMRI latent; ties resolve to the lowest index."""
    if not candidates:
        raise PriorError("no candidates")
    h = np.asarray(h_fmri).ravel()
    h = h / np.linalg.norm(h)
    best_idx, best_sim = 0, -np.inf
    for i, cand in enumerate(candidates):
        v = np.asarray(cand.image_latent).mean(axis=0)
        v = v / max(np.linalg.norm(v), 1e-12)
        sim = float(v @ h)
        cand.similarity_to_fmri = sim
        if sim > best_sim:
            best_idx, best_sim = i, sim
    return candidates[best_idx]
