"""Loss suite and the staged training procedure.

Stage 1 trains the generation network on single-person clips with their
per-person texts. Stage 2 freezes it, initializes the interaction network
from its weights, and trains only the interaction network on multi-person
records (target person permuted per step, the rest acting as clean
conditions). The spatial stage repeats stage 2 while also feeding randomly
masked ground-truth joint targets through the spatial pathway.

All stochastic choices (data order, person permutation, timesteps, noise,
text/condition dropout, spatial masks) are drawn from one seeded generator,
so a (seed, config) pair reproduces training bit-for-bit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .diffusion import NoiseSchedule, make_schedule, q_sample_batch
from .errors import ValidationError
from .generation import GenerationNet, ModelDims, TextEmbedder, init_gen_params
from .interaction import InteractionNet, init_from_generation
from .motion import SkeletonDef

BONE_EPS = 1e-30


@dataclass(frozen=True)
class LossWeights:
    """Multipliers for the geometric regularizers on top of reconstruction."""

    foot: float = 1.0
    velocity: float = 1.0
    bone: float = 1.0
    distance_map: float = 1.0

    def __post_init__(self):
        if min(self.foot, self.velocity, self.bone, self.distance_map) < 0:
            raise ValidationError("loss weights must be >= 0")


@dataclass
class TrainConfig:
    """Hyperparameters for one training stage.

    Full-scale reference values are 2500/1000/1000 epochs at batch 80/30/30;
    the defaults here are desk-scale so a CPU run finishes in minutes. Stage 2
    reads the interactive description for the target person unless
    ``use_single_text`` is set.
    """

    stage: str = "1"
    epochs: int = 40
    batch_size: int = 80
    learning_rate: float = 1e-4
    weight_decay: float = 2e-5
    diffusion_steps: int = 1000
    schedule_kind: str = "cosine"
    seed: int = 0
    text_dropout: float = 0.1
    condition_keep_prob: float = 0.7
    spatial_frame_keep: float = 0.25
    use_single_text: bool = False
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.stage not in {"1", "2", "spatial"}:
            raise ValidationError(f"unknown stage {self.stage!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch size must be positive")
        if self.diffusion_steps < 2:
            raise ValidationError("diffusion_steps must be >= 2")
        if not 0 <= self.text_dropout <= 1 or not 0 <= self.condition_keep_prob <= 1:
            raise ValidationError("dropout probabilities must lie in [0, 1]")

    @staticmethod
    def for_stage(stage: str, **over) -> "TrainConfig":
        base = {
            "1": dict(stage="1", epochs=40, batch_size=80, learning_rate=1e-4),
            "2": dict(stage="2", epochs=20, batch_size=30, learning_rate=1e-4),
            "spatial": dict(stage="spatial", epochs=20, batch_size=30, learning_rate=1e-5),
        }[stage]
        base.update(over)
        return TrainConfig(**base)


@dataclass
class TrainItem:
    """One training record: per-person clips plus their texts."""

    motions: list[np.ndarray]
    texts_single: list[str]
    text_interactive: str = ""

    @property
    def n_persons(self) -> int:
        return len(self.motions)


# ---------------------------------------------------------------------------
# losses


def _positions(x: torch.Tensor, joint_count: int) -> torch.Tensor:
    return x[..., : 3 * joint_count].reshape(*x.shape[:-1], joint_count, 3)


def _pair_dist(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.sqrt(((a - b) ** 2).sum(-1) + BONE_EPS)


def loss_stage1(
    x0: torch.Tensor,
    x0_hat: torch.Tensor,
    skeleton: SkeletonDef | None,
    weights: LossWeights,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Reconstruction + foot-skate + velocity + bone-length losses.

    Foot skate is gated by the ground-truth contact flags (contact at the
    earlier frame of each displacement). With ``skeleton=None`` only the
    reconstruction term is active, which is what the low-dimensional oracle
    mode uses.
    """
    if x0.shape != x0_hat.shape:
        raise ValidationError("prediction and target shapes differ")
    if x0.ndim == 2:
        x0, x0_hat = x0[None], x0_hat[None]
    zero = x0.new_zeros(())
    parts = {"rec": ((x0_hat - x0) ** 2).mean(), "foot": zero, "vel": zero, "bl": zero}
    if skeleton is not None:
        j = skeleton.joint_count
        pos, pos_hat = _positions(x0, j), _positions(x0_hat, j)
        if weights.velocity != 0.0:
            dv = (pos_hat[:, 1:] - pos_hat[:, :-1]) - (pos[:, 1:] - pos[:, :-1])
            parts["vel"] = (dv**2).sum(-1).mean()
        if weights.foot != 0.0:
            contacts = x0[..., 12 * j : 12 * j + 4]
            foot_idx = list(skeleton.foot_joints)
            disp = pos_hat[:, 1:, foot_idx] - pos_hat[:, :-1, foot_idx]
            # a displacement is penalized only when the foot is in contact at
            # both of its endpoint frames
            gate = contacts[:, :-1] * contacts[:, 1:]
            sq = (disp**2).sum(-1)
            parts["foot"] = (gate * sq).sum() / gate.sum().clamp(min=1.0)
        if weights.bone != 0.0:
            bones = skeleton.bones()
            parents = [p for p, _ in bones]
            children = [c for _, c in bones]
            lengths = x0.new_tensor(skeleton.bone_length)
            d = _pair_dist(pos_hat[:, :, parents], pos_hat[:, :, children])
            parts["bl"] = ((d - lengths) ** 2).mean()
    total = (
        parts["rec"]
        + weights.foot * parts["foot"]
        + weights.velocity * parts["vel"]
        + weights.bone * parts["bl"]
    )
    return total, parts


def dm_loss(
    x0_hat_target: torch.Tensor,
    x0_target: torch.Tensor,
    conditions: Sequence[torch.Tensor],
    skeleton: SkeletonDef,
    threshold: float = 1.0,
) -> torch.Tensor:
    """Masked joint distance-map loss against each clean condition clip.

    For condition c the map holds all pairwise joint distances between the
    target and c per frame; only entries whose ground-truth distance is below
    the threshold are penalized. Returns 0 when there are no conditions or no
    entries within range.
    """
    if not conditions:
        return x0_target.new_zeros(())
    if x0_hat_target.ndim == 2:
        x0_hat_target, x0_target = x0_hat_target[None], x0_target[None]
        conditions = [c[None] if c.ndim == 2 else c for c in conditions]
    j = skeleton.joint_count
    pos_hat = _positions(x0_hat_target, j)
    pos_gt = _positions(x0_target, j)
    total = x0_target.new_zeros(())
    for cond in conditions:
        pos_c = _positions(cond, j)
        dm_hat = _pair_dist(pos_hat[:, :, :, None, :], pos_c[:, :, None, :, :])
        dm_gt = _pair_dist(pos_gt[:, :, :, None, :], pos_c[:, :, None, :, :])
        mask = (dm_gt < threshold).to(dm_gt.dtype)
        total = total + (mask * (dm_hat - dm_gt) ** 2).sum() / mask.sum().clamp(min=1.0)
    return total / len(conditions)


def total_stage2_loss(x0, x0_hat, conditions, skeleton, weights, dm_threshold=1.0):
    """Stage-2 objective: stage-1 terms plus the weighted distance-map term."""
    total, parts = loss_stage1(x0, x0_hat, skeleton, weights)
    if weights.distance_map != 0.0 and skeleton is not None and conditions:
        parts = dict(parts)
        parts["dm"] = dm_loss(x0_hat, x0, conditions, skeleton, dm_threshold)
        total = total + weights.distance_map * parts["dm"]
    else:
        parts = dict(parts)
        parts["dm"] = x0.new_zeros(())
    return total, parts


# ---------------------------------------------------------------------------
# training loops


def _as_items(records) -> list[TrainItem]:
    items = []
    for r in records:
        if isinstance(r, TrainItem):
            items.append(r)
        else:
            items.append(
                TrainItem(
                    motions=[np.asarray(m.data, dtype=np.float64) for m in r.motions],
                    texts_single=list(r.texts_single),
                    text_interactive=r.text_interactive,
                )
            )
    if not items:
        raise ValidationError("training dataset is empty")
    return items


def _randint(gen: torch.Generator, low: int, high: int, n: int) -> torch.Tensor:
    return torch.randint(low, high, (n,), generator=gen)


class _LossLog:
    def __init__(self):
        self.rows = []

    def add(self, epoch: int, step: int, parts: dict[str, torch.Tensor], total: torch.Tensor):
        row = {"epoch": epoch, "step": step, "total": float(total.detach())}
        row.update({k: float(v.detach()) for k, v in parts.items()})
        self.rows.append(row)

    def write_csv(self, path: Path):
        if not self.rows:
            return
        keys = list(self.rows[0])
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            writer.writerows(self.rows)

    def epoch_means(self) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        by_epoch.setdefault(0, [])
        for row in self.rows:
            by_epoch.setdefault(row["epoch"], []).append(row["total"])
        return [sum(v) / len(v) for _, v in sorted(by_epoch.items()) if v]


def _save(
    out_dir: Path | str | None,
    stage: str,
    config: TrainConfig,
    gen_net: GenerationNet,
    inter_net: InteractionNet | None,
    log: _LossLog,
    gen_state: torch.Generator,
    embedder: TextEmbedder,
    skeleton: SkeletonDef | None,
    extra_meta: dict | None = None,
):
    if out_dir is None:
        return
    out_dir = Path(out_dir)
    arrays = ckpt.module_arrays(gen_net, "gen.")
    if inter_net is not None:
        arrays.update(ckpt.module_arrays(inter_net, "inter."))
    dims = gen_net.dims
    meta = {
        "stage": stage,
        "config_hash": ckpt.config_hash(asdict(config)),
        "config": asdict(config),
        "rng_state": gen_state.get_state().numpy().tobytes().hex(),
        "model": {
            "feature_dim": dims.feature_dim,
            "hidden": dims.hidden,
            "heads": dims.heads,
            "blocks": dims.blocks,
            "max_frames": dims.max_frames,
            "text_vocab": embedder.vocab,
            "text_seed": embedder.seed,
            "spatial_joints": inter_net.spatial_joints if inter_net else None,
        },
        "diffusion": {"steps": config.diffusion_steps, "kind": config.schedule_kind},
        "skeleton": "toy7" if skeleton is not None else None,
    }
    if extra_meta:
        meta.update(extra_meta)
    ckpt.save_checkpoint(out_dir, arrays, meta)
    log.write_csv(out_dir / "log.csv")


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_stage1(
    records,
    config: TrainConfig,
    dims: ModelDims,
    skeleton: SkeletonDef | None,
    embedder: TextEmbedder,
    out_dir: str | Path | None = None,
    extra_meta: dict | None = None,
) -> tuple[GenerationNet, _LossLog]:
    """Train the generation network on single-person clips and their texts."""
    items = _as_items(records)
    if any(not it.texts_single for it in items):
        raise ValidationError("stage 1 requires per-person texts on every record")
    schedule = make_schedule(config.diffusion_steps, config.schedule_kind)
    net = init_gen_params(config.seed, dims)
    opt = torch.optim.AdamW(
        net.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8,
        weight_decay=config.weight_decay,
    )
    g = torch.Generator().manual_seed(config.seed)
    log = _LossLog()
    order_rng = np.random.default_rng(config.seed)
    step = 0
    for epoch in range(config.epochs):
        order = order_rng.permutation(len(items))
        for batch_ids in _batches(len(items), config.batch_size, order):
            batch = [items[i] for i in batch_ids]
            persons = _randint(g, 0, max(it.n_persons for it in batch), len(batch))
            x0 = torch.stack(
                [
                    torch.as_tensor(
                        it.motions[int(p) % it.n_persons], dtype=torch.float32
                    )
                    for it, p in zip(batch, persons)
                ]
            )
            texts = [
                it.texts_single[int(p) % it.n_persons] for it, p in zip(batch, persons)
            ]
            text_emb = torch.as_tensor(embedder.embed_batch(texts), dtype=torch.float32)
            drop = torch.rand(len(batch), generator=g) < config.text_dropout
            text_emb = torch.where(drop[:, None], torch.zeros_like(text_emb), text_emb)
            t = _randint(g, 1, config.diffusion_steps + 1, len(batch))
            eps = torch.randn(x0.shape, generator=g)
            x_t = q_sample_batch(x0, t, eps, schedule)
            x0_hat, _ = net(x_t, t, text_emb)
            loss, parts = loss_stage1(x0, x0_hat, skeleton, config.loss_weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
            log.add(epoch, step, parts, loss)
            step += 1
    _save(out_dir, "1", config, net, None, log, g, embedder, skeleton, extra_meta)
    return net, log


def _permute_record(item: TrainItem, perm: np.ndarray):
    motions = [item.motions[i] for i in perm]
    texts = [item.texts_single[i] for i in perm]
    return motions, texts


def _stage2_like(
    records,
    gen_net: GenerationNet,
    config: TrainConfig,
    skeleton: SkeletonDef | None,
    embedder: TextEmbedder,
    spatial: bool,
    inter_net: InteractionNet | None = None,
    out_dir: str | Path | None = None,
    dm_threshold: float = 1.0,
    extra_meta: dict | None = None,
) -> tuple[InteractionNet, _LossLog]:
    items = _as_items(records)
    if any(it.n_persons < 2 for it in items):
        raise ValidationError("stage 2 requires records with at least 2 persons")
    schedule = make_schedule(config.diffusion_steps, config.schedule_kind)
    joint_count = skeleton.joint_count if (skeleton and spatial) else None
    if inter_net is None:
        inter_net = init_from_generation(gen_net, config.seed, spatial_joints=joint_count)
    for p in gen_net.parameters():
        p.requires_grad_(False)
    opt = torch.optim.AdamW(
        inter_net.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8,
        weight_decay=config.weight_decay,
    )
    g = torch.Generator().manual_seed(config.seed + 1)
    perm_rng = np.random.default_rng(config.seed + 2)
    order_rng = np.random.default_rng(config.seed)
    log = _LossLog()
    # records with different person counts cannot share a batch; group by N
    by_n: dict[int, list[int]] = {}
    for i, it in enumerate(items):
        by_n.setdefault(it.n_persons, []).append(i)
    step = 0
    for epoch in range(config.epochs):
        for n_persons in sorted(by_n):
            ids = np.asarray(by_n[n_persons])
            order = ids[order_rng.permutation(len(ids))]
            for batch_ids in _batches(len(order), config.batch_size, order):
                batch = [items[i] for i in batch_ids]
                b = len(batch)
                targets, conds, texts = [], [[] for _ in range(n_persons - 1)], []
                for it in batch:
                    perm = perm_rng.permutation(n_persons)
                    motions, single_texts = _permute_record(it, perm)
                    targets.append(torch.as_tensor(motions[0], dtype=torch.float32))
                    for ci in range(n_persons - 1):
                        conds[ci].append(
                            torch.as_tensor(motions[ci + 1], dtype=torch.float32)
                        )
                    texts.append(
                        single_texts[0] if config.use_single_text else it.text_interactive
                    )
                x0 = torch.stack(targets)
                cond_tensors = [torch.stack(c) for c in conds]
                keep = (
                    torch.rand(b, n_persons - 1, generator=g) < config.condition_keep_prob
                )
                text_emb = torch.as_tensor(embedder.embed_batch(texts), dtype=torch.float32)
                drop = torch.rand(b, generator=g) < config.text_dropout
                text_emb = torch.where(drop[:, None], torch.zeros_like(text_emb), text_emb)
                spatial_arg = None
                if spatial and skeleton is not None:
                    f = x0.shape[1]
                    j = skeleton.joint_count
                    pos = x0[..., : 3 * j].reshape(b, f, j, 3)
                    frame_keep = (
                        torch.rand(b, f, generator=g) < config.spatial_frame_keep
                    ).float()
                    joint_mask = torch.zeros(b, j)
                    n_joints = _randint(g, 1, j + 1, b)
                    for bi in range(b):
                        subset = torch.randperm(j, generator=g)[: int(n_joints[bi])]
                        joint_mask[bi, subset] = 1.0
                    observed = frame_keep[:, :, None] * joint_mask[:, None, :]
                    spatial_arg = (pos, observed)
                t = _randint(g, 1, config.diffusion_steps + 1, b)
                eps = torch.randn(x0.shape, generator=g)
                x_t = q_sample_batch(x0, t, eps, schedule)
                residuals, _ = inter_net.im_residuals(
                    x_t, cond_tensors, spatial_arg, t, text_emb, keep_mask=keep
                )
                x0_hat, _ = gen_net(x_t, t, text_emb, residuals=residuals)
                # dm loss applies only to conditions the model actually saw
                loss, parts = loss_stage1(x0, x0_hat, skeleton, config.loss_weights)
                if config.loss_weights.distance_map != 0.0 and skeleton is not None:
                    dm_total = x0.new_zeros(())
                    for i, c in enumerate(cond_tensors):
                        rows = keep[:, i]
                        if rows.any():
                            dm_total = dm_total + dm_loss(
                                x0_hat[rows], x0[rows], [c[rows]], skeleton, dm_threshold
                            )
                    parts = dict(parts)
                    parts["dm"] = dm_total / max(len(cond_tensors), 1)
                    loss = loss + config.loss_weights.distance_map * parts["dm"]
                opt.zero_grad()
                loss.backward()
                opt.step()
                log.add(epoch, step, parts, loss)
                step += 1
    stage = "spatial" if spatial else "2"
    _save(out_dir, stage, config, gen_net, inter_net, log, g, embedder, skeleton, extra_meta)
    return inter_net, log


def train_stage2(
    records,
    gen_net: GenerationNet,
    config: TrainConfig,
    skeleton: SkeletonDef | None,
    embedder: TextEmbedder,
    out_dir: str | Path | None = None,
    dm_threshold: float = 1.0,
    extra_meta: dict | None = None,
) -> tuple[InteractionNet, _LossLog]:
    """Train the interaction network against a frozen generation network."""
    return _stage2_like(
        records, gen_net, config, skeleton, embedder, spatial=False,
        out_dir=out_dir, dm_threshold=dm_threshold, extra_meta=extra_meta,
    )


def train_spatial(
    records,
    gen_net: GenerationNet,
    inter_net: InteractionNet,
    config: TrainConfig,
    skeleton: SkeletonDef,
    embedder: TextEmbedder,
    out_dir: str | Path | None = None,
    dm_threshold: float = 1.0,
    extra_meta: dict | None = None,
) -> tuple[InteractionNet, _LossLog]:
    """Continue stage-2 training with the spatial pathway active.

    ``inter_net`` must come from a stage-2 checkpoint; if it was built without
    a spatial pathway its weights are carried over into a spatially capable
    copy (the new map starts at zero, so behaviour is unchanged).
    """
    if inter_net.spatial_joints is None:
        upgraded = InteractionNet(inter_net.dims, spatial_joints=skeleton.joint_count)
        with torch.no_grad():
            named = dict(upgraded.named_parameters())
            for name, p in inter_net.named_parameters():
                named[name].copy_(p)
            upgraded.spatial_proj.weight.zero_()
        inter_net = upgraded
    return _stage2_like(
        records, gen_net, config, skeleton, embedder, spatial=True,
        inter_net=inter_net, out_dir=out_dir, dm_threshold=dm_threshold,
        extra_meta=extra_meta,
    )
