"""Tri-modal contrastive training.

Symmetric InfoNCE between fMRI and image latents and between fMRI and
text latents, averaged.  The text branch is conditioned on prompt vectors
produced by a small Meta-Net from the concatenated fMRI and image latents;
image and text encoders stay frozen while the fMRI encoder, projector,
Meta-Net and temperature train.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .encoder import EncoderConfig, FmriEncoder, ImageEncoder, TextEncoder


class ContrastError(ValueError):
    pass


N_PROMPTS = 8


def clip_loss(z1: torch.Tensor, z2: torch.Tensor, tau) -> torch.Tensor:
    """Symmetric InfoNCE with the -1/(2|B|) prefactor.

    Rows of z1 and z2 must be unit-norm; tau is the (positive) temperature.
    """
    if not torch.is_tensor(tau):
        tau = torch.tensor(float(tau), dtype=z1.dtype)
    if float(tau.detach()) <= 0:
        raise ContrastError("temperature must be positive")
    logits = (z1 @ z2.T) / tau
    idx = torch.arange(z1.shape[0], device=z1.device)
    log_p12 = torch.log_softmax(logits, dim=1)[idx, idx]
    log_p21 = torch.log_softmax(logits.T, dim=1)[idx, idx]
    return -(log_p12 + log_p21).sum() / (2 * z1.shape[0])


def trimodal_loss(z_fmri, z_image, z_text, tau) -> torch.Tensor:
    """Average of the fMRI-image and fMRI-text CLIP losses."""
    return (clip_loss(z_fmri, z_image, tau) + clip_loss(z_fmri, z_text, tau)) / 2


def retrieval_accuracy(z_fmri: np.ndarray, z_other: np.ndarray) -> float:
    """Top-1 retrieval: fraction of rows whose best match is their pair."""
    z_fmri = np.asarray(z_fmri)
    z_other = np.asarray(z_other)
    if z_fmri.shape[0] < 2:
        raise ContrastError("need at least 2 rows")
    sim = z_fmri @ z_other.T
    return float(np.mean(np.argmax(sim, axis=1) == np.arange(sim.shape[0])))


class MetaNet(nn.Module):
    """Two affine layers with a 16x bottleneck producing K prompt vectors.

    The final layer is zero-initialized so prompts start neutral.
    """

    def __init__(self, model_dim: int, n_prompts: int = N_PROMPTS, seed: int = 42):
        super().__init__()
        torch.manual_seed(seed + 303)
        self.n_prompts = n_prompts
        self.model_dim = model_dim
        in_dim = 2 * model_dim
        hidden = max(4, in_dim // 16)
        self.fc1 = nn.Linear(in_dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, n_prompts * model_dim)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, h_fmri: torch.Tensor, h_image: torch.Tensor) -> torch.Tensor:
        """[B, d] x [B, d] -> [B, K, d] prompt vectors."""
        if h_fmri.shape != h_image.shape:
            raise ContrastError("latent shapes differ")
        feats = torch.cat([h_fmri, h_image], dim=-1)
        out = self.fc2(self.act(self.fc1(feats)))
        return out.view(-1, self.n_prompts, self.model_dim)


class ContrastiveModel(nn.Module):
    """fMRI encoder + projector + Meta-Net + temperature, with frozen
    image/text encoders attached."""

    def __init__(self, config: EncoderConfig, image_encoder: ImageEncoder,
                 text_encoder: TextEncoder):
        super().__init__()
        self.config = config
        self.fmri_encoder = FmriEncoder(config)
        torch.manual_seed(config.seed + 404)
        self.projector = nn.Linear(config.model_dim, config.model_dim)
        self.metanet = MetaNet(config.model_dim, seed=config.seed)
        # logits are divided by tau, so the CLIP-style init is tau = 0.07
        self.log_tau = nn.Parameter(torch.tensor(float(np.log(0.07))))
        self.image_encoder = image_encoder
        self.text_encoder = text_encoder
        for p in self.image_encoder.parameters():
            p.requires_grad_(False)
        for p in self.text_encoder.parameters():
            p.requires_grad_(False)

    @property
    def tau(self) -> torch.Tensor:
        return torch.exp(self.log_tau)

    def encode_fmri(self, clips: torch.Tensor) -> torch.Tensor:
        """Unit-norm contrastive-space fMRI latents for [B, L, P] clips."""
        z = self.projector(self.fmri_encoder(clips))
        return z / z.norm(dim=-1, keepdim=True)

    def batch_latents(self, clips, images, token_batch):
        h_fmri = self.fmri_encoder(clips)
        z_fmri = self.projector(h_fmri)
        z_fmri = z_fmri / z_fmri.norm(dim=-1, keepdim=True)
        z_image = self.image_encoder(images)
        prompts = self.metanet(h_fmri, z_image)
        z_text = self.text_encoder(token_batch, prompts)
        return z_fmri, z_image, z_text

    def loss(self, clips, images, token_batch) -> torch.Tensor:
        z_fmri, z_image, z_text = self.batch_latents(clips, images, token_batch)
        return trimodal_loss(z_fmri, z_image, z_text, self.tau)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


@dataclass
class TrainResult:
    loss_curve: list = field(default_factory=list)   # (step, loss, tau)
    eval_curve: list = field(default_factory=list)   # (step, brain_vision, brain_language)

    def save_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "tau"])
            writer.writerows(self.loss_curve)


def align_clip_encoders(image_encoder: ImageEncoder, text_encoder: TextEncoder,
                        images: np.ndarray, token_batch: list[list[str]],
                        steps: int = 500, batch_size: int = 32, lr: float = 1e-3,
                        seed: int = 42) -> None:
    """Pre-align the toy image and text encoders with a plain CLIP objective,
    mirroring the role of a pre-trained CLIP.  Both are trained here and are
    expected to be frozen afterwards by the caller."""
    params = list(image_encoder.parameters()) + list(text_encoder.parameters())
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    images_t = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    n = images_t.shape[0]
    for _ in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        z_i = image_encoder(images_t[idx])
        z_t = text_encoder([token_batch[i] for i in idx])
        loss = clip_loss(z_i, z_t, 0.07)
        opt.zero_grad()
        loss.backward()
        opt.step()
    for p in params:
        p.requires_grad_(False)
        p.grad = None  # drop stale gradients from the alignment phase


def train_contrastive(
    model: ContrastiveModel,
    clips: np.ndarray,            # [N, L, P]
    images: np.ndarray,           # [N, H, W, C]
    token_batch: list[list[str]],
    steps: int = 2000,
    batch_size: int = 32,
    lr: float = 1e-4,
    weight_decay: float = 0.03,
    seed: int = 42,
    eval_every: int = 0,
    sparse_p: float = 0.0,
    parcel_l1: float = 0.0,
) -> TrainResult:
    """Adam training loop with decoupled weight decay and seeded shuffling.

    With sparse_p > 0 each parcel column is zeroed with that probability per
    batch (sparse-masking augmentation), which discourages the encoder from
    leaning on any individual parcel.  parcel_l1 adds a group-lasso penalty
    over the input-projection columns (one group per parcel), driving the
    readout of uninformative parcels to zero.  Aborts on a non-finite loss.
    The frozen image/text encoders never receive gradient; this is asserted
    once after the first step.
    """
    if not 0.0 <= sparse_p < 1.0:
        raise ContrastError("sparse_p must be in [0, 1)")
    if parcel_l1 < 0:
        raise ContrastError("parcel_l1 must be >= 0")
    if len(clips) == 0:
        raise ContrastError("empty dataset")
    opt = torch.optim.AdamW(model.trainable_parameters(), lr=lr,
                            weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    clips_t = torch.as_tensor(np.asarray(clips), dtype=torch.float32)
    images_t = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    n = clips_t.shape[0]
    result = TrainResult()

    for step in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        batch = clips_t[idx]
        if sparse_p > 0:
            keep = torch.as_tensor(rng.random(batch.shape[2]) >= sparse_p,
                                   dtype=batch.dtype)
            batch = batch * keep
        loss = model.loss(batch, images_t[idx], [token_batch[i] for i in idx])
        if parcel_l1 > 0:
            loss = loss + parcel_l1 * \
                model.fmri_encoder.embed.weight.norm(dim=0).sum()
        if not torch.isfinite(loss):
            raise ContrastError(f"training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        if step == 0:
            frozen_grads = [p.grad for p in model.image_encoder.parameters()] + \
                           [p.grad for p in model.text_encoder.parameters()]
            assert all(g is None for g in frozen_grads), \
                "frozen encoder received gradient"
        opt.step()
        result.loss_curve.append((step, float(loss.item()), float(model.tau.item())))
        if eval_every and (step + 1) % eval_every == 0:
            with torch.no_grad():
                z_f, z_i, z_t = model.batch_latents(clips_t, images_t, token_batch)
            result.eval_curve.append((
                step,
                retrieval_accuracy(z_f.numpy(), z_i.numpy()),
                retrieval_accuracy(z_f.numpy(), z_t.numpy()),
            ))
    return result
