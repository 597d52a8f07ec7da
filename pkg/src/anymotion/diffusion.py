"""Noise schedule, forward noising, guidance combination, and DDIM sampling.

Timesteps are 1-based: t runs over {1..T} with the convention abar(0) = 1.
The denoiser predicts the clean signal x0 directly (not the noise), which the
geometric losses need anyway.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import ValidationError

COSINE_S = 0.008
LINEAR_BETA_START = 1e-4
LINEAR_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule: beta[i] and alpha_bar[i] hold the values for t = i+1."""

    total_steps: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        t = self.total_steps
        if self.beta.shape != (t,) or self.alpha_bar.shape != (t,):
            raise ValidationError("beta/alpha_bar must be length-T arrays")
        if not ((self.beta > 0) & (self.beta < 1)).all():
            raise ValidationError("beta values must lie in (0, 1)")
        full = np.concatenate([[1.0], self.alpha_bar])
        if not (np.diff(full) < 0).all():
            raise ValidationError("alpha_bar must be strictly decreasing from 1")

    def abar(self, t: int) -> float:
        """Cumulative signal fraction at step t, with abar(0) = 1."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])


def make_schedule(total_steps: int, kind: str = "cosine") -> NoiseSchedule:
    """Build a cosine (default) or linear beta schedule over ``total_steps``."""
    if total_steps < 2:
        raise ValidationError(f"schedule needs at least 2 steps, got {total_steps}")
    if kind == "linear":
        beta = np.linspace(LINEAR_BETA_START, LINEAR_BETA_END, total_steps)
    elif kind == "cosine":
        steps = np.arange(total_steps + 1, dtype=np.float64) / total_steps
        f = np.cos((steps + COSINE_S) / (1 + COSINE_S) * math.pi / 2) ** 2
        abar = f[1:] / f[0]
        abar_prev = np.concatenate([[1.0], abar[:-1]])
        beta = np.clip(1.0 - abar / abar_prev, 1e-8, 0.999)
    else:
        raise ValidationError(f"unknown schedule kind {kind!r}")
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(total_steps=total_steps, beta=beta, alpha_bar=alpha_bar)


@dataclass
class SamplerConfig:
    """Inference-time knobs for the DDIM loop."""

    num_inference_steps: int = 50
    guidance_scale: float = 2.0
    eta: float = 0.0
    guidance_hooks: list[Callable] = field(default_factory=list)

    def __post_init__(self):
        if self.num_inference_steps < 1:
            raise ValidationError("num_inference_steps must be >= 1")
        if self.guidance_scale < 0:
            raise ValidationError("guidance scale must be >= 0")
        if not 0.0 <= self.eta <= 1.0:
            raise ValidationError("eta must lie in [0, 1]")


def q_sample(x0, t: int, eps, schedule: NoiseSchedule):
    """Closed-form forward noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if not 1 <= t <= schedule.total_steps:
        raise ValidationError(f"t={t} outside 1..{schedule.total_steps}")
    abar = schedule.abar(t)
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps


def q_sample_batch(x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor,
                   schedule: NoiseSchedule) -> torch.Tensor:
    """Vectorized q_sample for a batch with per-sample timesteps (shape (B,))."""
    if not ((t >= 1) & (t <= schedule.total_steps)).all():
        raise ValidationError("all timesteps must lie in 1..T")
    abar = torch.as_tensor(schedule.alpha_bar, dtype=x0.dtype)[t.long() - 1]
    while abar.ndim < x0.ndim:
        abar = abar[..., None]
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps


def cfg_combine(pred_uncond, pred_cond, guidance_scale: float):
    """Classifier-free combination: uncond + w * (cond - uncond)."""
    return pred_uncond + guidance_scale * (pred_cond - pred_uncond)


def ddim_step(x_t, x0_hat, t: int, t_prev: int, schedule: NoiseSchedule,
              eta: float = 0.0, noise=None):
    """One DDIM update from step t to t_prev given the x0 prediction.

    Recovers the implied noise eps_hat from (x_t, x0_hat) and re-mixes it at
    the lower noise level; eta > 0 trades part of eps_hat for fresh noise.
    """
    if not 0 <= t_prev < t:
        raise ValidationError(f"require t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    if t > schedule.total_steps:
        raise ValidationError(f"t={t} exceeds schedule length {schedule.total_steps}")
    abar_t = schedule.abar(t)
    abar_prev = schedule.abar(t_prev)
    eps_hat = (x_t - math.sqrt(abar_t) * x0_hat) / math.sqrt(1.0 - abar_t)
    if eta == 0.0:
        return math.sqrt(abar_prev) * x0_hat + math.sqrt(1.0 - abar_prev) * eps_hat
    sigma = (
        eta
        * math.sqrt((1.0 - abar_prev) / (1.0 - abar_t))
        * math.sqrt(max(1.0 - abar_t / abar_prev, 0.0))
    )
    if noise is None:
        raise ValidationError("eta > 0 requires an explicit noise tensor")
    dir_coef = math.sqrt(max(1.0 - abar_prev - sigma**2, 0.0))
    return math.sqrt(abar_prev) * x0_hat + dir_coef * eps_hat + sigma * noise


def inference_timesteps(total_steps: int, num_inference_steps: int) -> list[int]:
    """Evenly spaced timesteps T .. 0 inclusive (deduplicated after rounding)."""
    if num_inference_steps > total_steps:
        raise ValidationError("num_inference_steps must not exceed total_steps")
    ts = np.round(np.linspace(total_steps, 0, num_inference_steps + 1)).astype(int)
    out = [int(ts[0])]
    for t in ts[1:]:
        if int(t) < out[-1]:
            out.append(int(t))
    return out


def sample_loop(
    denoise_fn: Callable[[torch.Tensor, int], torch.Tensor],
    shape: Sequence[int],
    config: SamplerConfig,
    schedule: NoiseSchedule,
    seed: int,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Run the full DDIM loop from pure noise down to a clean sample.

    ``denoise_fn(x_t, t)`` must return the x0 prediction for the batch.
    Guidance hooks run on the updated state after every step as
    ``hook(x, t_prev)``. Deterministic for a fixed seed when eta == 0.
    """
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(tuple(shape), generator=gen, dtype=dtype)
    steps = inference_timesteps(schedule.total_steps, config.num_inference_steps)
    for t, t_prev in zip(steps[:-1], steps[1:]):
        x0_hat = denoise_fn(x, t)
        noise = None
        if config.eta > 0.0 and t_prev > 0:
            noise = torch.randn(x.shape, generator=gen, dtype=dtype)
        x = ddim_step(x, x0_hat, t, t_prev, schedule,
                      eta=config.eta if t_prev > 0 else 0.0, noise=noise)
        for hook in config.guidance_hooks:
            x = hook(x, t_prev)
    return x
