"""Generation metrics, the tiny text-motion evaluator, and the analytic oracle.

Metrics follow the usual protocol for text-to-motion work: everything is
computed in the embedding space of a small contrastive evaluator trained on
the synthetic train split. Absolute values are only comparable within this
package; relative comparisons (trained vs untrained, ablation variants) are
the meaningful quantities at desk scale.

The Gaussian oracle provides a quantitative end-to-end check of the recursive
conditional sampler: on a jointly Gaussian two-person task every moment of
the sampled joint distribution is known in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt
from .errors import ValidationError
from .generation import ModelDims, TextEmbedder
from .sampling import (
    GenerationRequest,
    Pipeline,
    finalize_motion,
    person_seed,
    sample_multi_raw,
    sample_person_raw,
)
from .training import TrainConfig, TrainItem, LossWeights, train_stage1, train_stage2


# ---------------------------------------------------------------------------
# evaluator


class EvaluatorEmbed(nn.Module):
    """Motion and text encoders into a shared unit sphere.

    The motion side applies a two-layer map per frame and mean-pools over
    frames (attention-free on purpose: it is an evaluator, not a generator);
    the text side maps the frozen hashed-text features through its own
    two-layer head.
    """

    def __init__(self, feature_dim: int, text_dim: int, hidden: int = 64, out: int = 32):
        super().__init__()
        self.motion_mlp = nn.Sequential(
            nn.Linear(feature_dim, hidden), nn.GELU(), nn.Linear(hidden, out)
        )
        self.text_mlp = nn.Sequential(
            nn.Linear(text_dim, hidden), nn.GELU(), nn.Linear(hidden, out)
        )

    def embed_motion(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 2:
            x = x[None]
        feats = self.motion_mlp(x).mean(dim=1)
        return feats / feats.norm(dim=-1, keepdim=True).clamp(min=1e-12)

    def embed_text(self, e: torch.Tensor) -> torch.Tensor:
        if e.ndim == 1:
            e = e[None]
        feats = self.text_mlp(e)
        return feats / feats.norm(dim=-1, keepdim=True).clamp(min=1e-12)


def evaluator_pairs(records) -> list[tuple[np.ndarray, str]]:
    """(motion, text) training pairs: every person with their own text, plus
    the interactive description paired with each participant's motion."""
    pairs = []
    for rec in records:
        for motion, text in zip(rec.motions, rec.texts_single):
            pairs.append((np.asarray(motion.data, dtype=np.float32), text))
        if rec.n_persons >= 2 and rec.text_interactive:
            for motion in rec.motions:
                pairs.append((np.asarray(motion.data, dtype=np.float32), rec.text_interactive))
    return pairs


def train_evaluator(
    records,
    text_embedder: TextEmbedder,
    seed: int = 0,
    epochs: int = 200,
    batch_size: int = 256,
    lr: float = 1e-3,
    temperature: float = 0.1,
) -> EvaluatorEmbed:
    """Symmetric contrastive training of the evaluator on (motion, text) pairs.

    Pairs sharing the exact same text string are excluded from each other's
    negatives; with templated texts the same class recurs often in a batch
    and would otherwise poison the objective.
    """
    pairs = evaluator_pairs(records)
    if len(pairs) < 2:
        raise ValidationError("need at least 2 pairs to train the evaluator")
    feature_dim = pairs[0][0].shape[-1]
    model = EvaluatorEmbed(feature_dim, text_embedder.dim)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in sorted(model.named_parameters()):
            if name.endswith("bias"):
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64).float() * 0.05)
    motions = torch.as_tensor(np.stack([m for m, _ in pairs]))
    texts = [t for _, t in pairs]
    text_feats = torch.as_tensor(
        text_embedder.embed_batch(texts), dtype=torch.float32
    )
    text_ids = {t: i for i, t in enumerate(sorted(set(texts)))}
    labels = torch.as_tensor([text_ids[t] for t in texts])
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=1e-4)
    order_rng = np.random.default_rng(seed)
    n = len(pairs)
    for _ in range(epochs):
        order = order_rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            if len(idx) < 2:
                continue
            m = model.embed_motion(motions[idx])
            t = model.embed_text(text_feats[idx])
            sims = m @ t.T / temperature
            same = labels[idx][:, None] == labels[idx][None, :]
            off_diag_same = same & ~torch.eye(len(idx), dtype=torch.bool)
            sims = sims.masked_fill(off_diag_same, float("-inf"))
            target = torch.arange(len(idx))
            loss = 0.5 * (
                nn.functional.cross_entropy(sims, target)
                + nn.functional.cross_entropy(sims.T, target)
            )
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def save_evaluator(path: str | Path, model: EvaluatorEmbed, meta: dict) -> None:
    ckpt.save_checkpoint(path, ckpt.module_arrays(model, "eval."), {"stage": "evaluator", **meta})


def load_evaluator(path: str | Path, feature_dim: int, text_dim: int) -> EvaluatorEmbed:
    arrays, _ = ckpt.load_checkpoint(path)
    model = EvaluatorEmbed(feature_dim, text_dim)
    ckpt.load_into_module(model, arrays, "eval.")
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


# ---------------------------------------------------------------------------
# metrics


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def fid(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Frechet distance between Gaussians fitted to two feature sets.

    The covariance-product square root is taken via eigendecomposition of the
    symmetrized product with eigenvalues clamped at zero; tiny negative
    results from numerical error are clamped to zero.
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValidationError("features must be finite")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValidationError("features must be 2-D with a common dimension")
    k = a.shape[1]
    if a.shape[0] <= k or b.shape[0] <= k:
        raise ValidationError("need more samples than feature dimensions")
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a = np.cov(a, rowvar=False)
    cov_b = np.cov(b, rowvar=False)
    sa = _sqrtm_psd(cov_a)
    w = np.clip(np.linalg.eigvalsh((lambda m: (m + m.T) / 2)(sa @ cov_b @ sa)), 0.0, None)
    raw = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.sqrt(w).sum())
    return max(raw, 0.0)


def r_precision(
    motion_feats: np.ndarray,
    text_feats: np.ndarray,
    pool_size: int = 8,
    k: int = 1,
    seed: int = 0,
) -> float:
    """Fraction of motions whose true text ranks in the top k of a random pool.

    Row i of the two arrays is a matched pair; each anchor motion competes
    its true text against pool_size - 1 distractor texts drawn from other
    rows with a fixed RNG.
    """
    m = np.asarray(motion_feats, dtype=np.float64)
    t = np.asarray(text_feats, dtype=np.float64)
    if pool_size < 2:
        raise ValidationError("pool_size must be >= 2")
    n = m.shape[0]
    if n < pool_size:
        raise ValidationError("need at least pool_size pairs")
    rng = np.random.default_rng(seed)
    hits = 0
    for i in range(n):
        others = rng.choice(n - 1, size=pool_size - 1, replace=False)
        others = np.where(others >= i, others + 1, others)
        cand = np.concatenate([[i], others])
        dists = 1.0 - t[cand] @ m[i]
        rank = int((dists < dists[0]).sum())
        hits += rank < k
    return hits / n


def diversity(feats: np.ndarray, n_pairs: int = 100, seed: int = 0) -> float:
    """Mean distance between random feature pairs (latent spread)."""
    f = np.asarray(feats, dtype=np.float64)
    if f.shape[0] < 2:
        raise ValidationError("need at least 2 features")
    rng = np.random.default_rng(seed)
    a = rng.integers(0, f.shape[0], size=n_pairs)
    shift = rng.integers(1, f.shape[0], size=n_pairs)
    b = (a + shift) % f.shape[0]
    return float(np.linalg.norm(f[a] - f[b], axis=1).mean())


def mm_dist(motion_feats: np.ndarray, text_feats: np.ndarray) -> float:
    """Mean distance between matched motion and text embeddings."""
    m = np.asarray(motion_feats, dtype=np.float64)
    t = np.asarray(text_feats, dtype=np.float64)
    if m.shape != t.shape or m.shape[0] < 1:
        raise ValidationError("matched feature arrays required")
    return float(np.linalg.norm(m - t, axis=1).mean())


def mmodality(feats_per_text: np.ndarray) -> float:
    """Mean pairwise distance among repeated generations for the same text.

    ``feats_per_text`` has shape (texts, repeats, dim); repeats come from the
    same prompt with different seeds.
    """
    f = np.asarray(feats_per_text, dtype=np.float64)
    if f.ndim != 3 or f.shape[1] < 2:
        raise ValidationError("need shape (texts, repeats>=2, dim)")
    total, count = 0.0, 0
    r = f.shape[1]
    for i in range(r):
        for j in range(i + 1, r):
            total += np.linalg.norm(f[:, i] - f[:, j], axis=1).sum()
            count += f.shape[0]
    return total / count


def metric_ci(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    ci = 1.96 * arr.std(ddof=1) / np.sqrt(len(arr)) if len(arr) > 1 else 0.0
    return {"mean": float(arr.mean()), "ci95": float(ci)}


# ---------------------------------------------------------------------------
# analytic Gaussian oracle


@dataclass
class GaussianTask:
    """Two-person jointly Gaussian toy task with known conditionals.

    Person 1 owns the first ``dim_per_person`` coordinates of each joint
    draw, person 2 the rest. The "motions" are one-frame clips of width
    dim_per_person and every geometric loss is disabled.
    """

    dim_per_person: int = 2
    mean: np.ndarray = field(default_factory=lambda: np.zeros(4))
    cov: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        d2 = 2 * self.dim_per_person
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.mean.shape != (d2,) or self.cov.shape != (d2, d2):
            raise ValidationError("mean/cov must have size 2 * dim_per_person")
        if not np.allclose(self.cov, self.cov.T):
            raise ValidationError("covariance must be symmetric")
        if np.linalg.eigvalsh(self.cov).min() <= 0:
            raise ValidationError("covariance must be positive definite")

    def sample(self, n: int, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        return rng.multivariate_normal(self.mean, self.cov, size=n)

    def conditional_slope(self) -> np.ndarray:
        d = self.dim_per_person
        s11 = self.cov[:d, :d]
        s21 = self.cov[d:, :d]
        return s21 @ np.linalg.inv(s11)


TASK_TEXT = "point"
TASK_TEXT_PAIR = "two points"


def correlated_pair_task(rho: float = 0.8) -> GaussianTask:
    """Reference 1-D-per-person task with correlation rho."""
    return GaussianTask(
        dim_per_person=1,
        mean=np.zeros(2),
        cov=np.array([[1.0, rho], [rho, 1.0]]),
    )


def gaussian_records(task: GaussianTask, n: int, seed: int) -> list[TrainItem]:
    draws = task.sample(n, seed)
    d = task.dim_per_person
    return [
        TrainItem(
            motions=[row[:d].reshape(1, d), row[d:].reshape(1, d)],
            texts_single=[TASK_TEXT, TASK_TEXT],
            text_interactive=TASK_TEXT_PAIR,
        )
        for row in draws
    ]


ORACLE_RECIPE = dict(
    n_train=4096,
    hidden=32,
    heads=4,
    blocks=2,
    stage1_epochs=120,
    stage2_epochs=120,
    batch_size=256,
    learning_rate=2e-3,
    diffusion_steps=1000,
    num_inference_steps=50,
    guidance_scale=1.0,
)


def train_gaussian_pipeline(task: GaussianTask, seed: int = 0, recipe: dict | None = None) -> Pipeline:
    """Reference desk-scale training of the full two-stage pipeline on the task.

    Guidance scale 1.0 is used at verification time: the prompt is constant,
    and any other scale would distort the moments the oracle checks.
    """
    r = dict(ORACLE_RECIPE)
    if recipe:
        r.update(recipe)
    records = gaussian_records(task, r["n_train"], seed)
    dims = ModelDims(
        feature_dim=task.dim_per_person, hidden=r["hidden"], heads=r["heads"],
        blocks=r["blocks"], max_frames=4, text_vocab=64,
    )
    embedder = TextEmbedder(vocab=64, dim=dims.text_dim, seed=7771)
    off = LossWeights(foot=0.0, velocity=0.0, bone=0.0, distance_map=0.0)
    cfg1 = TrainConfig(
        stage="1", epochs=r["stage1_epochs"], batch_size=r["batch_size"],
        learning_rate=r["learning_rate"], seed=seed,
        diffusion_steps=r["diffusion_steps"], loss_weights=off,
    )
    gen_net, _ = train_stage1(records, cfg1, dims, None, embedder)
    cfg2 = TrainConfig(
        stage="2", epochs=r["stage2_epochs"], batch_size=r["batch_size"],
        learning_rate=r["learning_rate"], seed=seed,
        diffusion_steps=r["diffusion_steps"], loss_weights=off,
    )
    inter_net, _ = train_stage2(records, gen_net, cfg2, None, embedder)
    from .diffusion import make_schedule

    schedule = make_schedule(r["diffusion_steps"], "cosine")
    return Pipeline(gen_net, inter_net, embedder, schedule, None)


def verify_factorization(
    task: GaussianTask,
    pipeline: Pipeline,
    n_samples: int = 10_000,
    seed: int = 0,
    mean_tol: float = 0.05,
    cov_tol: float = 0.15,
    slope_tol: float = 0.1,
    num_inference_steps: int = 50,
    guidance_scale: float = 1.0,
) -> dict:
    """Compare recursive two-person samples against the analytic joint law.

    Reports empirical vs analytic mean, covariance (Frobenius error), and the
    conditional regression slope of person 2 on person 1.
    """
    if pipeline.inter_net is None:
        raise ValidationError("pipeline has no interaction network; train stage 2 first")
    request = GenerationRequest(
        texts=[TASK_TEXT, TASK_TEXT], frames=1, seed=seed,
        guidance_scale=guidance_scale, num_inference_steps=num_inference_steps,
    )
    raw = sample_multi_raw(pipeline, request, batch=n_samples)
    d = task.dim_per_person
    joint = np.concatenate(
        [raw[0].numpy().reshape(n_samples, d), raw[1].numpy().reshape(n_samples, d)],
        axis=1,
    ).astype(np.float64)
    emp_mean = joint.mean(0)
    emp_cov = np.cov(joint, rowvar=False)
    s11 = emp_cov[:d, :d]
    s21 = emp_cov[d:, :d]
    emp_slope = s21 @ np.linalg.inv(s11)
    ana_slope = task.conditional_slope()
    mean_err = float(np.abs(emp_mean - task.mean).max())
    cov_err = float(np.linalg.norm(emp_cov - task.cov, ord="fro"))
    slope_err = float(np.abs(emp_slope - ana_slope).max())
    return {
        "n_samples": n_samples,
        "empirical_mean": emp_mean.tolist(),
        "analytic_mean": task.mean.tolist(),
        "empirical_cov": emp_cov.tolist(),
        "analytic_cov": task.cov.tolist(),
        "empirical_slope": emp_slope.tolist(),
        "analytic_slope": ana_slope.tolist(),
        "mean_err": mean_err,
        "cov_frobenius_err": cov_err,
        "slope_err": slope_err,
        "tolerances": {"mean": mean_tol, "cov_frobenius": cov_tol, "slope": slope_tol},
        "mean_ok": mean_err <= mean_tol,
        "cov_ok": cov_err <= cov_tol,
        "slope_ok": slope_err <= slope_tol,
        "passed": mean_err <= mean_tol and cov_err <= cov_tol and slope_err <= slope_tol,
    }


# ---------------------------------------------------------------------------
# end-to-end generation metrics


def generate_for_records(
    pipe: Pipeline,
    records,
    seed: int = 0,
    use_interactive_text: bool = False,
    num_inference_steps: int = 50,
    guidance_scale: float = 2.0,
) -> tuple[list[np.ndarray], list[str]]:
    """Recursively generate every person of every record, batched per person slot.

    Returns finalized clip arrays and the prompt each clip was conditioned
    on (the per-person text, or the record's interactive description when
    ``use_interactive_text`` is set and the person is not the first).
    """
    records = list(records)
    if not records:
        raise ValidationError("no records to generate for")
    n_persons = records[0].n_persons
    frames = records[0].motions[0].frames
    if any(r.n_persons != n_persons or r.motions[0].frames != frames for r in records):
        raise ValidationError("records must share person count and frame count")
    conditions: list[torch.Tensor] = []
    clips: list[list[np.ndarray]] = [[] for _ in records]
    prompts: list[list[str]] = [[] for _ in records]
    for p in range(n_persons):
        texts = []
        for r in records:
            if use_interactive_text and p > 0 and r.text_interactive:
                texts.append(r.text_interactive)
            else:
                texts.append(r.texts_single[p])
        out = sample_person_raw(
            pipe, texts, conditions, frames, person_seed(seed, p),
            guidance_scale=guidance_scale, num_inference_steps=num_inference_steps,
        )
        conditions.append(out)
        for i in range(len(records)):
            arr = (
                finalize_motion(out[i], pipe.skeleton).data
                if pipe.skeleton is not None
                else out[i].numpy().astype(np.float64)
            )
            clips[i].append(arr)
            prompts[i].append(texts[i])
    flat_clips = [c for per_rec in clips for c in per_rec]
    flat_prompts = [t for per_rec in prompts for t in per_rec]
    return flat_clips, flat_prompts


def _embed_clips(evaluator: EvaluatorEmbed, clips: list[np.ndarray]) -> np.ndarray:
    batch = torch.as_tensor(np.stack(clips).astype(np.float32))
    with torch.no_grad():
        return evaluator.embed_motion(batch).numpy().astype(np.float64)


def _embed_texts(evaluator: EvaluatorEmbed, embedder: TextEmbedder, texts: list[str]) -> np.ndarray:
    feats = torch.as_tensor(embedder.embed_batch(texts), dtype=torch.float32)
    with torch.no_grad():
        return evaluator.embed_text(feats).numpy().astype(np.float64)


def generation_metrics(
    pipe: Pipeline,
    evaluator: EvaluatorEmbed,
    records,
    seed: int = 0,
    reps: int = 10,
    pool_size: int = 8,
    use_interactive_text: bool = False,
    num_inference_steps: int = 50,
    guidance_scale: float = 2.0,
    mm_texts: int = 8,
    mm_repeats: int = 8,
) -> dict:
    """Full metric suite over held-out records.

    Motions are generated recursively for every record, embedded with the
    frozen evaluator, and compared against the records' real clips. Metric
    uncertainty comes from ``reps`` repetitions, each rescoring a 90%
    subsample with fresh distractor draws.
    """
    records = list(records)
    gen_clips, prompts = generate_for_records(
        pipe, records, seed=seed, use_interactive_text=use_interactive_text,
        num_inference_steps=num_inference_steps, guidance_scale=guidance_scale,
    )
    real_clips = [np.asarray(m.data) for r in records for m in r.motions]
    gen_feats = _embed_clips(evaluator, gen_clips)
    real_feats = _embed_clips(evaluator, real_clips)
    text_feats = _embed_texts(evaluator, pipe.embedder, prompts)
    n = len(gen_feats)
    sub = max(int(0.9 * n), min(n, pool_size))
    rng = np.random.default_rng(seed)
    per_rep: dict[str, list[float]] = {
        "fid": [], "r_precision_top1": [], "r_precision_top2": [],
        "r_precision_top3": [], "diversity": [], "diversity_real": [], "mm_dist": [],
    }
    for rep in range(reps):
        idx = rng.choice(n, size=sub, replace=False)
        ridx = rng.choice(len(real_feats), size=min(sub, len(real_feats)), replace=False)
        per_rep["fid"].append(fid(gen_feats[idx], real_feats[ridx]))
        for k in (1, 2, 3):
            per_rep[f"r_precision_top{k}"].append(
                r_precision(gen_feats[idx], text_feats[idx], pool_size, k, seed=seed + rep)
            )
        per_rep["diversity"].append(diversity(gen_feats[idx], seed=seed + rep))
        per_rep["diversity_real"].append(diversity(real_feats[ridx], seed=seed + rep))
        per_rep["mm_dist"].append(mm_dist(gen_feats[idx], text_feats[idx]))
    report = {name: metric_ci(vals) for name, vals in per_rep.items()}
    unique_texts = []
    for t in prompts:
        if t not in unique_texts:
            unique_texts.append(t)
        if len(unique_texts) >= mm_texts:
            break
    frames = records[0].motions[0].frames
    reps_feats = []
    for rep in range(mm_repeats):
        out = sample_person_raw(
            pipe, unique_texts, [], frames, person_seed(seed + 1000 + rep, 0),
            guidance_scale=guidance_scale, num_inference_steps=num_inference_steps,
        )
        clips = [
            finalize_motion(out[i], pipe.skeleton).data
            if pipe.skeleton is not None else out[i].numpy().astype(np.float64)
            for i in range(len(unique_texts))
        ]
        reps_feats.append(_embed_clips(evaluator, clips))
    report["mmodality"] = {
        "mean": mmodality(np.stack(reps_feats, axis=1)), "ci95": 0.0,
    }
    report["n_generated"] = n
    return report
