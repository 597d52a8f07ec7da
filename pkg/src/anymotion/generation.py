"""Text-conditioned denoiser that maps a noised clip to a clean-clip estimate.

The network is a stack of transformer denoiser blocks over frames. The
conditioning vector (timestep embedding + text embedding) modulates every
block through adaptive layer norm. Each block output accepts an additive
residual so a condition-injection network can steer it without touching the
weights here.

Parameter count for hidden width H, feature dim D, K blocks (all linear
layers carry biases):

    input_proj   D*H + H
    t_mlp        2*H^2 + 2*H
    per block    16*H^2 + 13*H   (two modulation maps, qkv+out attention, 4x ffn)
    out_proj     H*D + D
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ValidationError


@dataclass(frozen=True)
class ModelDims:
    """Width/depth settings shared by the generation and interaction networks."""

    feature_dim: int
    hidden: int = 64
    heads: int = 4
    blocks: int = 4
    max_frames: int = 64
    text_vocab: int = 1024

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValidationError("hidden width must be divisible by head count")

    @property
    def text_dim(self) -> int:
        # conditioning is t_emb + text_emb, so the text embedding is hidden-width
        return self.hidden


class TextEmbedder:
    """Deterministic, frozen text featurizer: hashed bag of tokens x fixed projection.

    Same string always gives the same vector; the empty string gives the
    all-zero vector, which doubles as the unconditional (null) embedding.
    Token counts enter linearly, so repeating a word scales its contribution.
    """

    def __init__(self, vocab: int = 1024, dim: int = 64, seed: int = 7771):
        self.vocab = vocab
        self.dim = dim
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.projection = rng.standard_normal((vocab, dim)) / math.sqrt(dim)

    def _bucket(self, token: str) -> int:
        digest = hashlib.sha256(token.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little") % self.vocab

    def embed(self, text: str) -> np.ndarray:
        out = np.zeros(self.dim)
        for token in text.lower().split():
            out += self.projection[self._bucket(token)]
        return out

    def embed_batch(self, texts: list[str]) -> np.ndarray:
        return np.stack([self.embed(t) for t in texts]) if texts else np.zeros((0, self.dim))

    def null(self) -> np.ndarray:
        return np.zeros(self.dim)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos embedding of (possibly fractional) step indices."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    )
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2 == 1:
        emb = torch.cat([emb, torch.zeros(emb.shape[0], 1, dtype=emb.dtype)], dim=-1)
    return emb


def positional_table(max_frames: int, dim: int) -> torch.Tensor:
    return sinusoidal_embedding(torch.arange(max_frames, dtype=torch.float64), dim)


class AdaLNModulation(nn.Module):
    """Affine-free layer norm followed by (1 + scale) * h + shift from a condition."""

    def __init__(self, hidden: int):
        super().__init__()
        self.norm = nn.LayerNorm(hidden, elementwise_affine=False)
        self.map = nn.Linear(hidden, 2 * hidden)

    def forward(self, h: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        scale, shift = self.map(cond).chunk(2, dim=-1)
        return self.norm(h) * (1.0 + scale[:, None, :]) + shift[:, None, :]


class SelfAttention(nn.Module):
    """Plain multi-head self-attention over the frame axis, no causal mask."""

    def __init__(self, hidden: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.out = nn.Linear(hidden, hidden)

    def forward(self, x: torch.Tensor, key_padding_mask: torch.Tensor | None = None) -> torch.Tensor:
        b, n, h = x.shape
        dh = h // self.heads
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, n, self.heads, dh).transpose(1, 2)
        k = k.view(b, n, self.heads, dh).transpose(1, 2)
        v = v.view(b, n, self.heads, dh).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(dh)
        if key_padding_mask is not None:
            # True marks tokens to exclude as attention targets
            scores = scores.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, n, h)
        return self.out(y)


class DenoiserBlock(nn.Module):
    """Pre-norm attention + feed-forward, both modulated by the condition."""

    def __init__(self, hidden: int, heads: int):
        super().__init__()
        self.mod_attn = AdaLNModulation(hidden)
        self.attn = SelfAttention(hidden, heads)
        self.mod_ffn = AdaLNModulation(hidden)
        self.ffn = nn.Sequential(
            nn.Linear(hidden, 4 * hidden), nn.GELU(), nn.Linear(4 * hidden, hidden)
        )

    def forward(self, h: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        h = h + self.attn(self.mod_attn(h, cond))
        h = h + self.ffn(self.mod_ffn(h, cond))
        return h


class GenerationNet(nn.Module):
    """Denoiser stack mapping (x_t, t, text) -> x0 estimate.

    ``forward`` additionally returns the per-block hidden states (after
    residual injection) so callers can inspect the injection points.
    """

    def __init__(self, dims: ModelDims):
        super().__init__()
        self.dims = dims
        self.input_proj = nn.Linear(dims.feature_dim, dims.hidden)
        self.register_buffer("pos_table", positional_table(dims.max_frames, dims.hidden).float())
        self.t_mlp = nn.Sequential(
            nn.Linear(dims.hidden, dims.hidden), nn.SiLU(), nn.Linear(dims.hidden, dims.hidden)
        )
        self.blocks = nn.ModuleList(
            DenoiserBlock(dims.hidden, dims.heads) for _ in range(dims.blocks)
        )
        self.out_proj = nn.Linear(dims.hidden, dims.feature_dim)

    def cond_vector(self, t, text_emb, batch: int) -> torch.Tensor:
        """Combine timestep and text embeddings into the block condition."""
        p = self.input_proj.weight
        if not torch.is_tensor(t):
            t = torch.full((batch,), float(t), dtype=p.dtype)
        t = t.to(p.dtype)
        if t.ndim == 0:
            t = t.expand(batch)
        t_emb = self.t_mlp(sinusoidal_embedding(t, self.dims.hidden).to(p.dtype))
        if text_emb is None:
            return t_emb
        if not torch.is_tensor(text_emb):
            text_emb = torch.as_tensor(np.asarray(text_emb))
        text_emb = text_emb.to(p.dtype)
        if text_emb.ndim == 1:
            text_emb = text_emb.expand(batch, -1)
        return t_emb + text_emb

    def embed_frames(self, x: torch.Tensor) -> torch.Tensor:
        f = x.shape[1]
        if f > self.dims.max_frames:
            raise ValidationError(f"{f} frames exceeds max_frames={self.dims.max_frames}")
        return self.input_proj(x) + self.pos_table[:f].to(x.dtype)

    def forward(self, x_t, t, text_emb=None, residuals=None):
        squeeze = False
        if not torch.is_tensor(x_t):
            x_t = torch.as_tensor(np.asarray(x_t))
        x_t = x_t.to(self.input_proj.weight.dtype)
        if x_t.ndim == 2:
            x_t, squeeze = x_t[None], True
        b, f, d = x_t.shape
        if d != self.dims.feature_dim:
            raise ValidationError(f"expected feature dim {self.dims.feature_dim}, got {d}")
        if residuals is not None:
            if len(residuals) != len(self.blocks):
                raise ValidationError("one residual per denoiser block required")
            residuals = [r[None] if r.ndim == 2 else r for r in residuals]
            for r in residuals:
                if r.shape != (b, f, self.dims.hidden):
                    raise ValidationError("residual shape must be (batch, frames, hidden)")
        cond = self.cond_vector(t, text_emb, b)
        hidden = self.embed_frames(x_t)
        hiddens = []
        for k, block in enumerate(self.blocks):
            hidden = block(hidden, cond)
            if residuals is not None:
                hidden = hidden + residuals[k]
            hiddens.append(hidden)
        out = self.out_proj(hidden)
        if squeeze:
            return out[0], [h[0] for h in hiddens]
        return out, hiddens


def init_gen_params(seed: int, dims: ModelDims, dtype: torch.dtype = torch.float32) -> GenerationNet:
    """Fresh network with seed-deterministic small-normal weights and zero biases."""
    net = GenerationNet(dims)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in sorted(net.named_parameters()):
            if name.endswith("bias"):
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.02)
    return net.to(dtype)
