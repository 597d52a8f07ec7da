"""Recursive any-count generation and inference-time spatial control.

Person 1 is sampled from text alone; each further person is sampled with all
previously generated clips attached as clean conditions, realizing the
factorization of the joint distribution into a chain of conditionals. A
pair-trained model therefore scales to any person count at inference.

Spatial control combines two mechanisms: the learned pathway feeds the target
signal into the condition network (implicit), and a per-step perturbation
pulls the constrained position channels of x_t toward their targets
(explicit).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .diffusion import NoiseSchedule, SamplerConfig, cfg_combine, make_schedule, sample_loop
from .errors import NumericalError, ValidationError
from .generation import GenerationNet, ModelDims, TextEmbedder
from .interaction import InteractionNet
from .motion import MotionSeq, SkeletonDef, SpatialSignal, compute_velocities
from .synthdata import skeleton_preset

GUIDANCE_EPS = 1e-8


@dataclass
class GenerationRequest:
    """Everything needed to sample motions for N people."""

    texts: list[str]
    frames: int = 32
    seed: int = 0
    guidance_scale: float = 2.0
    num_inference_steps: int = 50
    spatials: list[SpatialSignal | None] | None = None
    guidance_step: float = 0.1
    guidance_reps: int = 1
    attach_interaction: bool = True
    gm_only_first: bool = False

    def __post_init__(self):
        if len(self.texts) < 1:
            raise ValidationError("at least one text is required")
        if self.guidance_step < 0:
            raise ValidationError("guidance step must be >= 0")
        if self.spatials is not None and len(self.spatials) != len(self.texts):
            raise ValidationError("one spatial entry (or null) per person required")


@dataclass
class Pipeline:
    """Trained components bundled for sampling."""

    gen_net: GenerationNet
    inter_net: InteractionNet | None
    embedder: TextEmbedder
    schedule: NoiseSchedule
    skeleton: SkeletonDef | None

    @staticmethod
    def load(path: str | Path, skeleton: SkeletonDef | None = None) -> "Pipeline":
        arrays, meta = ckpt.load_checkpoint(path)
        model = meta["model"]
        dims = ModelDims(
            feature_dim=model["feature_dim"], hidden=model["hidden"],
            heads=model["heads"], blocks=model["blocks"],
            max_frames=model["max_frames"], text_vocab=model["text_vocab"],
        )
        gen_net = GenerationNet(dims)
        ckpt.load_into_module(gen_net, arrays, "gen.")
        inter_net = None
        if any(k.startswith("inter.") for k in arrays):
            inter_net = InteractionNet(dims, spatial_joints=model.get("spatial_joints"))
            ckpt.load_into_module(inter_net, arrays, "inter.")
        embedder = TextEmbedder(
            vocab=model["text_vocab"], dim=dims.text_dim, seed=model["text_seed"]
        )
        diff = meta["diffusion"]
        schedule = make_schedule(diff["steps"], diff["kind"])
        if skeleton is None and meta.get("skeleton") == "toy7":
            skeleton = skeleton_preset()
        return Pipeline(gen_net, inter_net, embedder, schedule, skeleton)


def person_seed(seed: int, person: int) -> int:
    """Stable per-person RNG stream id derived from (seed, person index)."""
    digest = hashlib.sha256(f"{seed}:{person}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


def explicit_guidance_hook(x_t, spatial: SpatialSignal, step: float):
    """Pull observed position channels of x_t one step toward their targets.

    Moves each constrained joint by ``step`` along the unit direction toward
    its target (the gradient of the summed point distances); joints already
    within GUIDANCE_EPS stay put. All non-position channels are untouched.
    """
    squeeze = x_t.ndim == 2
    x = x_t[None] if squeeze else x_t
    b, f, d = x.shape
    j = spatial.joints
    if spatial.frames != f or 3 * j > d:
        raise ValidationError("spatial signal does not match the sampled clip")
    targets = torch.as_tensor(spatial.targets, dtype=x.dtype)
    observed = torch.as_tensor(spatial.observed, dtype=x.dtype)
    pos = x[:, :, : 3 * j].reshape(b, f, j, 3)
    diff = pos - targets[None]
    dist = torch.linalg.vector_norm(diff, dim=-1, keepdim=True)
    gate = (observed[None, :, :, None] > 0) & (dist > GUIDANCE_EPS)
    grad = torch.where(gate, diff / dist.clamp(min=GUIDANCE_EPS), torch.zeros_like(diff))
    new_pos = (pos - step * grad).reshape(b, f, 3 * j)
    out = torch.cat([new_pos, x[:, :, 3 * j :]], dim=-1)
    return out[0] if squeeze else out


def _make_denoiser(pipe: Pipeline, text, conditions: list[torch.Tensor],
                   spatial: SpatialSignal | None, guidance_scale: float,
                   attach_interaction: bool):
    if isinstance(text, str):
        emb = pipe.embedder.embed(text)
    else:
        emb = pipe.embedder.embed_batch(list(text))
    text_emb = torch.as_tensor(emb, dtype=torch.float32)
    null_emb = torch.zeros_like(text_emb)
    use_im = pipe.inter_net is not None and attach_interaction
    spatial_arg = None
    if spatial is not None and use_im and pipe.inter_net.spatial_joints is not None:
        spatial_arg = spatial

    def branch(x_t, t, emb):
        residuals = None
        if use_im:
            residuals, _ = pipe.inter_net.im_residuals(
                x_t, conditions, spatial_arg, t, emb
            )
        out, _ = pipe.gen_net(x_t, t, emb, residuals=residuals)
        return out

    def denoise(x_t, t):
        with torch.no_grad():
            if guidance_scale == 1.0:
                return branch(x_t, t, text_emb)
            uncond = branch(x_t, t, null_emb)
            cond = branch(x_t, t, text_emb)
            return cfg_combine(uncond, cond, guidance_scale)

    return denoise


def sample_person_raw(
    pipe: Pipeline,
    text,
    conditions: list[torch.Tensor],
    frames: int,
    seed: int,
    guidance_scale: float = 2.0,
    num_inference_steps: int = 50,
    spatial: SpatialSignal | None = None,
    guidance_step: float = 0.1,
    guidance_reps: int = 1,
    attach_interaction: bool = True,
    batch: int = 1,
) -> torch.Tensor:
    """Sample one person's raw clip(s) given already-generated conditions.

    ``text`` may be one string for the whole batch or a list holding one
    prompt per batch element. Returns a (batch, frames, D) tensor. Conditions
    are used as-is and never re-noised, matching how the condition network
    was trained (on clean clips).
    """
    if not isinstance(text, str):
        batch = len(text)
    denoise = _make_denoiser(pipe, text, conditions, spatial, guidance_scale,
                             attach_interaction)
    hooks = []
    if spatial is not None and guidance_step > 0:
        def hook(x, t_prev):
            for _ in range(max(guidance_reps, 1)):
                x = explicit_guidance_hook(x, spatial, guidance_step)
            return x

        hooks.append(hook)
    config = SamplerConfig(
        num_inference_steps=num_inference_steps,
        guidance_scale=guidance_scale, guidance_hooks=hooks,
    )
    d = pipe.gen_net.dims.feature_dim
    out = sample_loop(denoise, (batch, frames, d), config, pipe.schedule, seed)
    if not torch.isfinite(out).all():
        raise NumericalError("sampled clip contains NaN/Inf")
    return out


def finalize_motion(raw, skeleton: SkeletonDef) -> MotionSeq:
    """Convert a raw sampled array into a valid MotionSeq.

    Contact channels are clamped to [0, 1] and velocity channels are rewritten
    from the sampled positions, so the result passes full motion validation.
    """
    arr = np.asarray(raw.detach().cpu().numpy() if torch.is_tensor(raw) else raw,
                     dtype=np.float64)
    j = skeleton.joint_count
    arr = arr.copy()
    arr[:, 3 * j : 6 * j] = compute_velocities(arr[:, : 3 * j], skeleton.fps)
    arr[:, 12 * j : 12 * j + 4] = np.clip(np.round(arr[:, 12 * j : 12 * j + 4]), 0.0, 1.0)
    return MotionSeq(arr, skeleton)


def sample_multi_raw(pipe: Pipeline, request: GenerationRequest,
                     batch: int = 1) -> list[torch.Tensor]:
    """Recursive sampling for every person in the request; raw tensors out."""
    if len(request.texts) > 1 and (pipe.inter_net is None or not request.attach_interaction):
        raise ValidationError(
            "multi-person sampling needs the interaction network attached"
        )
    outputs: list[torch.Tensor] = []
    spatials = request.spatials or [None] * len(request.texts)
    for i, text in enumerate(request.texts):
        attach = request.attach_interaction and not (i == 0 and request.gm_only_first)
        try:
            out = sample_person_raw(
                pipe, text, list(outputs), request.frames,
                person_seed(request.seed, i),
                guidance_scale=request.guidance_scale,
                num_inference_steps=request.num_inference_steps,
                spatial=spatials[i],
                guidance_step=request.guidance_step,
                guidance_reps=request.guidance_reps,
                attach_interaction=attach,
                batch=batch,
            )
        except Exception as e:
            raise type(e)(f"person {i + 1}: {e}") from e
        outputs.append(out)
    return outputs


def sample_multi(pipe: Pipeline, request: GenerationRequest) -> list[MotionSeq]:
    """Generate N motions recursively and finalize them for export."""
    if pipe.skeleton is None:
        raise ValidationError("pipeline has no skeleton; use sample_multi_raw")
    raw = sample_multi_raw(pipe, request, batch=1)
    return [finalize_motion(r[0], pipe.skeleton) for r in raw]


def sample_single(
    pipe: Pipeline,
    text: str,
    frames: int,
    seed: int,
    guidance_scale: float = 2.0,
    spatial: SpatialSignal | None = None,
    num_inference_steps: int = 50,
    guidance_step: float = 0.1,
    attach_interaction: bool = True,
) -> MotionSeq:
    """Single-person convenience wrapper over the recursive path."""
    request = GenerationRequest(
        texts=[text], frames=frames, seed=seed, guidance_scale=guidance_scale,
        num_inference_steps=num_inference_steps,
        spatials=[spatial] if spatial is not None else None,
        guidance_step=guidance_step, attach_interaction=attach_interaction,
    )
    return sample_multi(pipe, request)[0]


def export_trajectory_csv(motions: list[MotionSeq], path: str | Path) -> None:
    """Flat (frame, person, joint, x, y, z) rows for external visualization."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "person", "joint", "x", "y", "z"])
        for p, motion in enumerate(motions):
            pos = motion.get_positions()
            for f in range(motion.frames):
                for j in range(motion.skeleton.joint_count):
                    writer.writerow(
                        [f, p, j, f"{pos[f, j, 0]:.9g}", f"{pos[f, j, 1]:.9g}",
                         f"{pos[f, j, 2]:.9g}"]
                    )
