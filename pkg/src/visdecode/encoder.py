"""Sequence encoder for fMRI clips plus the image/text encoder stand-ins.

The fMRI encoder is a small causal transformer over TR tokens with learned
TR embeddings.  A learned query token is appended after the clip; its
output slot is the fMRI latent.  Self-supervised pretraining predicts the
next TR's parcel vector from the sequence so far.

Image and text encoders are lightweight projectors that are aligned once
(toy CLIP pretraining) and then frozen.  Feature extractors used by the
high-level metrics live in a registry keyed by (name, layer_tag).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .synthworld import IMAGE_SHAPE


class EncoderError(ValueError):
    pass


@dataclass
class EncoderConfig:
    input_dim: int = 1024
    model_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    clip_length: int = 5
    max_tr: int = 32
    seed: int = 42

    def __post_init__(self):
        if self.model_dim % self.n_heads != 0:
            raise EncoderError("model_dim must be divisible by n_heads")


class CausalSelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x):
        b, t, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        shape = (b, t, self.n_heads, self.head_dim)
        q = q.view(shape).transpose(1, 2)
        k = k.view(shape).transpose(1, 2)
        v = v.view(shape).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / np.sqrt(self.head_dim)
        mask = torch.triu(torch.ones(t, t, dtype=torch.bool, device=x.device), 1)
        att = att.masked_fill(mask, float("-inf"))
        att = torch.softmax(att, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, t, d)
        return self.out(y)


class Block(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = CausalSelfAttention(dim, n_heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        x = x + self.mlp(self.ln2(x))
        return x


class FmriEncoder(nn.Module):
    """Causal transformer over TR tokens with a learned readout query."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        torch.manual_seed(config.seed)
        d = config.model_dim
        self.embed = nn.Linear(config.input_dim, d)
        self.tr_embed = nn.Embedding(config.max_tr + 1, d)
        self.query = nn.Parameter(0.02 * torch.randn(d))
        self.blocks = nn.ModuleList(
            Block(d, config.n_heads) for _ in range(config.n_layers))
        self.ln_out = nn.LayerNorm(d)
        self.ssl_head = nn.Linear(d, config.input_dim)

    def _trunk(self, x, start_tr: int = 0):
        t = x.shape[1]
        pos = torch.arange(start_tr, start_tr + t, device=x.device) % self.config.max_tr
        h = self.embed(x) + self.tr_embed(pos)[None]
        for block in self.blocks:
            h = block(h)
        return self.ln_out(h)

    def forward(self, clips: torch.Tensor, start_tr: int = 0) -> torch.Tensor:
        """Encode [B, L, P] clips to [B, model_dim] latents (query readout)."""
        if clips.ndim != 3 or clips.shape[1] != self.config.clip_length \
                or clips.shape[2] != self.config.input_dim:
            raise EncoderError(f"expected [B, {self.config.clip_length}, "
                               f"{self.config.input_dim}], got {tuple(clips.shape)}")
        b, t, _ = clips.shape
        pos = torch.arange(start_tr, start_tr + t, device=clips.device) % self.config.max_tr
        tokens = self.embed(clips) + self.tr_embed(pos)[None]
        # query token occupies the position after the clip (the "t+1" slot)
        q = self.query[None, None].expand(b, 1, -1) + \
            self.tr_embed(torch.tensor([self.config.max_tr], device=clips.device))[None]
        h = torch.cat([tokens, q], dim=1)
        for block in self.blocks:
            h = block(h)
        return self.ln_out(h)[:, -1]

    def predict_next(self, windows: torch.Tensor) -> torch.Tensor:
        """Predict the next TR's parcel vector at each position of [B, T, P]."""
        if windows.shape[1] < 2:
            raise EncoderError("SSL window must have length >= 2")
        return self.ssl_head(self._trunk(windows))


def ssl_loss(model: FmriEncoder, windows: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted and actual next-TR vectors."""
    pred = model.predict_next(windows)[:, :-1]
    target = windows[:, 1:]
    return torch.mean((pred - target) ** 2)


def ssl_pretrain_step(model: FmriEncoder, optimizer: torch.optim.Optimizer,
                      windows: torch.Tensor) -> float:
    optimizer.zero_grad()
    loss = ssl_loss(model, windows)
    if not torch.isfinite(loss):
        raise EncoderError(f"non-finite SSL loss: {loss.item()!r}")
    loss.backward()
    optimizer.step()
    return float(loss.item())


class ImageEncoder(nn.Module):
    """Projects an image to a token grid; the pooled grid is the unit-norm
    image latent.  Frozen after toy-CLIP alignment."""

    def __init__(self, model_dim: int = 64, n_tokens: int = 9, seed: int = 42):
        super().__init__()
        torch.manual_seed(seed + 101)
        self.n_tokens = n_tokens
        self.model_dim = model_dim
        n_pixels = int(np.prod(IMAGE_SHAPE))
        hidden = 4 * n_tokens * model_dim
        self.net = nn.Sequential(
            nn.Linear(n_pixels, hidden), nn.GELU(),
            nn.Linear(hidden, n_tokens * model_dim))

    def grid(self, images: torch.Tensor) -> torch.Tensor:
        """[B, H, W, C] -> [B, n_tokens, model_dim]."""
        flat = images.reshape(images.shape[0], -1)
        return self.net(flat).view(-1, self.n_tokens, self.model_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """[B, H, W, C] -> unit-norm [B, model_dim]."""
        pooled = self.grid(images).mean(dim=1)
        return pooled / pooled.norm(dim=-1, keepdim=True)

    def pool_grid(self, grid: torch.Tensor) -> torch.Tensor:
        """Unit-norm latent from an externally produced token grid."""
        pooled = grid.mean(dim=-2)
        return pooled / pooled.norm(dim=-1, keepdim=True)


class TextEncoder(nn.Module):
    """Token-embedding text encoder accepting prepended prompt vectors."""

    VOCAB = 4096

    def __init__(self, model_dim: int = 64, seed: int = 42):
        super().__init__()
        torch.manual_seed(seed + 202)
        self.model_dim = model_dim
        self.table = nn.Embedding(self.VOCAB, model_dim)
        self.net = nn.Sequential(
            nn.Linear(model_dim, 2 * model_dim), nn.GELU(),
            nn.Linear(2 * model_dim, model_dim))

    @classmethod
    def token_ids(cls, tokens: list[str]) -> list[int]:
        return [zlib.crc32(t.encode()) % cls.VOCAB for t in tokens]

    def forward(self, token_batch: list[list[str]],
                prompts: torch.Tensor | None = None) -> torch.Tensor:
        """Encode a batch of token sequences to unit-norm [B, model_dim].

        `prompts` is an optional [B, K, model_dim] (or [K, model_dim]) block
        of prompt vectors prepended to the token embeddings before pooling.
        """
        if any(len(t) == 0 for t in token_batch):
            raise EncoderError("empty token sequence")
        ref = self.table.weight
        pooled = []
        for i, tokens in enumerate(token_batch):
            ids = torch.tensor(self.token_ids(tokens), device=ref.device)
            emb = self.table(ids)
            if prompts is not None:
                p = prompts if prompts.ndim == 2 else prompts[i]
                emb = torch.cat([p.to(ref.dtype), emb], dim=0)
            pooled.append(emb.mean(dim=0))
        out = self.net(torch.stack(pooled))
        return out / out.norm(dim=-1, keepdim=True)


class FeatureExtractorRegistry:
    """Deterministic image -> feature-vector maps keyed by (name, layer_tag)."""

    def __init__(self):
        self._entries: dict[tuple[str, str], tuple[int, object]] = {}

    def register(self, name: str, layer_tag: str, dim: int, fn) -> None:
        self._entries[(name, layer_tag)] = (dim, fn)

    def dim(self, name: str, layer_tag: str) -> int:
        return self._lookup(name, layer_tag)[0]

    def _lookup(self, name: str, layer_tag: str):
        key = (name, layer_tag)
        if key not in self._entries:
            raise EncoderError(f"unknown feature extractor {key}")
        return self._entries[key]

    def extract(self, name: str, layer_tag: str, image: np.ndarray) -> np.ndarray:
        dim, fn = self._lookup(name, layer_tag)
        out = np.asarray(fn(image), dtype=np.float64).ravel()
        if out.shape != (dim,):
            raise EncoderError(f"extractor {(name, layer_tag)} returned "
                               f"shape {out.shape}, expected ({dim},)")
        return out


def _random_projection(dim: int, seed: int):
    n_pixels = int(np.prod(IMAGE_SHAPE))
    mat = np.random.default_rng(seed).standard_normal((dim, n_pixels)) / np.sqrt(n_pixels)

    def fn(image: np.ndarray) -> np.ndarray:
        return np.tanh(mat @ np.asarray(image).ravel())
    return fn


def default_registry(seed: int = 42) -> FeatureExtractorRegistry:
    """Toy stand-ins for the backbones used by the high-level metrics."""
    reg = FeatureExtractorRegistry()
    specs = [("rp", "64", 64), ("alexnet", "2", 96), ("alexnet", "5", 128),
             ("inception", "pool", 128), ("clip", "vision", 64),
             ("eff", "out", 96), ("swav", "out", 96)]
    for i, (name, tag, dim) in enumerate(specs):
        reg.register(name, tag, dim, _random_projection(dim, seed + 1000 + i))
    return reg


# ---------------------------------------------------------------------------
# Checkpoint blob: text header (name, shape, dtype per tensor), blank line,
# then the concatenated little-endian raw tensor bytes.
# ---------------------------------------------------------------------------

def save_state_blob(path, state: dict) -> None:
    header_lines = []
    payload = b""
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        header_lines.append(f"{name} {','.join(map(str, arr.shape))} {arr.dtype.name}")
        payload += np.ascontiguousarray(arr).tobytes()
    header = "\n".join(header_lines) + "\n\n"
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header.encode())
        fh.write(payload)


def load_state_blob(path) -> dict:
    raw = Path(path).read_bytes()
    head, _, payload = raw.partition(b"\n\n")
    state = {}
    offset = 0
    for line in head.decode().splitlines():
        name, shape_s, dtype_s = line.rsplit(" ", 2)
        shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
        dtype = np.dtype(dtype_s)
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype=dtype, count=count,
                            offset=offset).reshape(shape)
        offset += count * dtype.itemsize
        state[name] = torch.from_numpy(arr.copy())
    return state
