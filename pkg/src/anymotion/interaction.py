"""Condition-injection network for multi-person and spatially guided denoising.

Encodes the noised target clip together with any number of clean condition
clips (other people's motions) and an optional spatial target signal. A stack
of interactive blocks mixes them; after each block a zero-initialized
projection of the target stream is emitted as an additive residual for the
corresponding denoiser block of the generation network. Because those
projections (and the spatial input map) start at exactly zero, attaching a
freshly initialized instance leaves the generation network's output
untouched.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .errors import ValidationError
from .generation import (
    AdaLNModulation,
    GenerationNet,
    ModelDims,
    SelfAttention,
    positional_table,
    sinusoidal_embedding,
)
from .motion import SpatialSignal


class InteractiveBlock(nn.Module):
    """Self-attention over the target, then over target + kept condition tokens.

    Role embeddings mark which token group is the noisy target and which are
    clean conditions; they are shared across conditions so the block stays
    invariant to condition order.
    """

    def __init__(self, hidden: int, heads: int):
        super().__init__()
        self.mod_sa1 = AdaLNModulation(hidden)
        self.sa1 = SelfAttention(hidden, heads)
        self.mod_sa2 = AdaLNModulation(hidden)
        self.sa2 = SelfAttention(hidden, heads)
        self.role_target = nn.Parameter(torch.zeros(hidden))
        self.role_condition = nn.Parameter(torch.zeros(hidden))

    def forward(
        self,
        h_target: torch.Tensor,
        h_conds: list[torch.Tensor],
        cond: torch.Tensor,
        keep: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        b, f, _ = h_target.shape
        u = h_target + self.sa1(self.mod_sa1(h_target, cond))
        groups = [u + self.role_target] + [h + self.role_condition for h in h_conds]
        tokens = torch.cat(groups, dim=1)
        pad = None
        if h_conds and keep is not None:
            # dropped conditions contribute no attention targets
            drop = ~keep
            pad = torch.cat(
                [torch.zeros(b, f, dtype=torch.bool)]
                + [drop[:, i : i + 1].expand(b, f) for i in range(len(h_conds))],
                dim=1,
            )
            if not pad.any():
                pad = None
        out = tokens + self.sa2(self.mod_sa2(tokens, cond), key_padding_mask=pad)
        new_target = out[:, :f]
        new_conds = []
        for i, old in enumerate(h_conds):
            new = out[:, (1 + i) * f : (2 + i) * f]
            if keep is not None:
                # dropped conditions bypass the block unchanged
                new = torch.where(keep[:, i, None, None], new, old)
            new_conds.append(new)
        return new_target, new_conds


class InteractionNet(nn.Module):
    """Encoder + interactive blocks + zero-initialized residual projections."""

    def __init__(self, dims: ModelDims, spatial_joints: int | None = None):
        super().__init__()
        self.dims = dims
        self.spatial_joints = spatial_joints
        self.input_proj = nn.Linear(dims.feature_dim, dims.hidden)
        self.register_buffer("pos_table", positional_table(dims.max_frames, dims.hidden).float())
        self.t_mlp = nn.Sequential(
            nn.Linear(dims.hidden, dims.hidden), nn.SiLU(), nn.Linear(dims.hidden, dims.hidden)
        )
        self.blocks = nn.ModuleList(
            InteractiveBlock(dims.hidden, dims.heads) for _ in range(dims.blocks)
        )
        # emitted residuals start at exactly zero
        self.out_projs = nn.ModuleList(
            nn.Linear(dims.hidden, dims.hidden) for _ in range(dims.blocks)
        )
        for proj in self.out_projs:
            nn.init.zeros_(proj.weight)
            nn.init.zeros_(proj.bias)
        if spatial_joints is not None:
            # no bias: an all-zero signal must contribute nothing, and its
            # gradient must vanish so the map stays zero when never observed
            self.spatial_proj = nn.Linear(4 * spatial_joints, dims.hidden, bias=False)
            nn.init.zeros_(self.spatial_proj.weight)
        else:
            self.spatial_proj = None

    # -- input preparation ------------------------------------------------

    def _promote(self, x) -> torch.Tensor:
        if not torch.is_tensor(x):
            x = torch.as_tensor(np.asarray(x))
        x = x.to(self.input_proj.weight.dtype)
        return x[None] if x.ndim == 2 else x

    def spatial_features(self, spatial, batch: int, frames: int) -> torch.Tensor:
        """Flatten a spatial signal into per-frame channels [masked targets, mask]."""
        if self.spatial_joints is None:
            raise ValidationError("network was built without a spatial pathway")
        j = self.spatial_joints
        if isinstance(spatial, SpatialSignal):
            targets = torch.as_tensor(spatial.targets)[None]
            observed = torch.as_tensor(spatial.observed)[None]
        else:
            targets, observed = spatial
            targets = torch.as_tensor(np.asarray(targets))
            observed = torch.as_tensor(np.asarray(observed))
            if targets.ndim == 3:
                targets, observed = targets[None], observed[None]
        dtype = self.input_proj.weight.dtype
        targets = targets.to(dtype)
        observed = observed.to(dtype)
        if targets.shape[1] != frames or targets.shape[2] != j:
            raise ValidationError("spatial signal shape does not match the target clip")
        masked = (targets * observed[..., None]).reshape(-1, frames, 3 * j)
        feats = torch.cat([masked, observed], dim=-1)
        if feats.shape[0] == 1 and batch > 1:
            feats = feats.expand(batch, -1, -1)
        return feats

    def encode_inputs(self, x_t_target, conditions, spatial=None):
        """Shared linear encoding (+ positions) of target and condition clips.

        The spatial pathway only touches the target stream. Returns
        (h_target, list of h_cond).
        """
        x = self._promote(x_t_target)
        b, f, d = x.shape
        if d != self.dims.feature_dim:
            raise ValidationError(f"expected feature dim {self.dims.feature_dim}, got {d}")
        if f > self.dims.max_frames:
            raise ValidationError(f"{f} frames exceeds max_frames={self.dims.max_frames}")
        pos = self.pos_table[:f].to(x.dtype)
        h_target = self.input_proj(x) + pos
        if spatial is not None:
            h_target = h_target + self.spatial_proj(self.spatial_features(spatial, b, f))
        h_conds = []
        for c in conditions:
            c = self._promote(c)
            if c.shape[1] != f:
                raise ValidationError("condition clips must share the target frame count")
            if c.shape[0] == 1 and b > 1:
                c = c.expand(b, -1, -1)
            h_conds.append(self.input_proj(c) + pos)
        return h_target, h_conds

    def cond_vector(self, t, text_emb, batch: int) -> torch.Tensor:
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

    def _normalize_keep(self, keep_mask, batch: int, n_conds: int) -> torch.Tensor | None:
        if keep_mask is None or n_conds == 0:
            return None
        if torch.is_tensor(keep_mask):
            keep = keep_mask.to(torch.bool)
        else:
            keep = torch.as_tensor(np.asarray(keep_mask), dtype=torch.bool)
        if keep.ndim == 1:
            keep = keep[None].expand(batch, -1)
        if keep.shape != (batch, n_conds):
            raise ValidationError("keep mask must have one entry per condition")
        return keep

    def im_residuals(self, x_t_target, conditions, spatial, t, text_emb, keep_mask=None):
        """Per-block residuals for the generation network, plus final condition states.

        Residual k is the zero-initialized projection of the target stream
        after interactive block k, so a fresh instance returns exact zeros.
        """
        squeeze = not torch.is_tensor(x_t_target) or x_t_target.ndim == 2
        h_target, h_conds = self.encode_inputs(x_t_target, conditions, spatial)
        b = h_target.shape[0]
        cond = self.cond_vector(t, text_emb, b)
        keep = self._normalize_keep(keep_mask, b, len(h_conds))
        residuals = []
        for block, proj in zip(self.blocks, self.out_projs):
            h_target, h_conds = block(h_target, h_conds, cond, keep)
            residuals.append(proj(h_target))
        if squeeze and b == 1:
            residuals = [r[0] for r in residuals]
            h_conds = [h[0] for h in h_conds]
        return residuals, h_conds


def init_inter_params(
    seed: int,
    dims: ModelDims,
    spatial_joints: int | None = None,
    dtype: torch.dtype = torch.float32,
) -> InteractionNet:
    """Random interaction network; residual and spatial projections still start at zero."""
    net = InteractionNet(dims, spatial_joints)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in sorted(net.named_parameters()):
            if name.startswith(("out_projs", "spatial_proj")):
                p.zero_()
            elif name.endswith("bias"):
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.02)
    return net.to(dtype)


def init_from_generation(
    gen_net: GenerationNet,
    seed: int,
    spatial_joints: int | None = None,
) -> InteractionNet:
    """Initialize an interaction network from a trained generation network.

    The shared input projection, both attentions of every interactive block,
    their modulation maps, and the timestep MLP are copied from the
    corresponding generation-network pieces; residual and spatial projections
    are exact zeros; role embeddings are small random per seed.
    """
    dims = gen_net.dims
    net = InteractionNet(dims, spatial_joints)
    dtype = gen_net.input_proj.weight.dtype
    net = net.to(dtype)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        net.input_proj.weight.copy_(gen_net.input_proj.weight)
        net.input_proj.bias.copy_(gen_net.input_proj.bias)
        for dst, src in zip(net.t_mlp, gen_net.t_mlp):
            if isinstance(dst, nn.Linear):
                dst.weight.copy_(src.weight)
                dst.bias.copy_(src.bias)
        for blk, gblk in zip(net.blocks, gen_net.blocks):
            for sa in (blk.sa1, blk.sa2):
                sa.qkv.weight.copy_(gblk.attn.qkv.weight)
                sa.qkv.bias.copy_(gblk.attn.qkv.bias)
                sa.out.weight.copy_(gblk.attn.out.weight)
                sa.out.bias.copy_(gblk.attn.out.bias)
            blk.mod_sa1.map.weight.copy_(gblk.mod_attn.map.weight)
            blk.mod_sa1.map.bias.copy_(gblk.mod_attn.map.bias)
            blk.mod_sa2.map.weight.copy_(gblk.mod_ffn.map.weight)
            blk.mod_sa2.map.bias.copy_(gblk.mod_ffn.map.bias)
            blk.role_target.copy_(
                torch.randn(dims.hidden, generator=g, dtype=torch.float64).to(dtype) * 0.02
            )
            blk.role_condition.copy_(
                torch.randn(dims.hidden, generator=g, dtype=torch.float64).to(dtype) * 0.02
            )
        for proj in net.out_projs:
            proj.weight.zero_()
            proj.bias.zero_()
        if net.spatial_proj is not None:
            net.spatial_proj.weight.zero_()
    return net
