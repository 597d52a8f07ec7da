"""Command-line entry point: data generation, training, sampling, metrics, oracle.

Configuration precedence is defaults < --config JSON file < explicit flags.
Every command echoes its fully resolved configuration into the run directory
and refuses to overwrite existing outputs unless --overwrite is given.

Exit codes: 0 success, 2 validation or missing prerequisite, 3 I/O error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .errors import NumericalError, ValidationError
from .evaluation import (
    correlated_pair_task,
    generation_metrics,
    load_evaluator,
    save_evaluator,
    train_evaluator,
    train_gaussian_pipeline,
    verify_factorization,
)
from .generation import ModelDims, TextEmbedder
from .motion import SpatialSignal, pose_dim
from .sampling import (
    GenerationRequest,
    Pipeline,
    export_trajectory_csv,
    sample_multi,
)
from .synthdata import (
    GeneratorConfig,
    SampleRecord,
    generate_records,
    load_dataset,
    load_text_overrides,
    record_to_json,
    skeleton_preset,
)
from .training import (
    LossWeights,
    TrainConfig,
    train_spatial,
    train_stage1,
    train_stage2,
)

TEXT_SEED = 7771
TEXT_VOCAB = 1024


def _read_config_file(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config file not found: {p}")
    with open(p) as fh:
        return json.load(fh)


def _resolve(defaults: dict, file_cfg: dict, flags: dict) -> dict:
    cfg = dict(defaults)
    for key, value in file_cfg.items():
        if key not in defaults:
            raise ValidationError(f"unknown config field {key!r}")
        cfg[key] = value
    for key, value in flags.items():
        if value is not None:
            cfg[key] = value
    return cfg


def _prepare_run_dir(out: Path, outputs: list[Path], overwrite: bool) -> None:
    for path in outputs:
        if path.exists() and not overwrite:
            raise ValidationError(
                f"output {path} already exists (pass --overwrite to replace it)"
            )
    out.mkdir(parents=True, exist_ok=True)


def _echo_config(out: Path, cfg: dict) -> None:
    with open(out / "config.resolved.json", "w") as fh:
        json.dump(cfg, fh, indent=1, sort_keys=True, default=str)
        fh.write("\n")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ValidationError(f"missing {what}: {path}")
    return path


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    defaults = dict(
        seed=0, n_samples=2200, frames=32, train_fraction=10.0 / 11.0,
        noise_sigma=0.01, n_persons=2, eval3=50, eval4=50,
    )
    cfg = _resolve(defaults, _read_config_file(args.config), {
        "seed": args.seed, "n_samples": args.n_samples, "frames": args.frames,
        "train_fraction": args.train_fraction, "noise_sigma": args.noise_sigma,
        "n_persons": args.n_persons, "eval3": args.eval3, "eval4": args.eval4,
    })
    out = Path(args.out)
    files = {name: out / f"{name}.jsonl" for name in ("train", "test", "eval_n3", "eval_n4")}
    _prepare_run_dir(out, list(files.values()), args.overwrite)
    _echo_config(out, cfg)

    main_cfg = GeneratorConfig(
        seed=cfg["seed"], n_samples=cfg["n_samples"], frames=cfg["frames"],
        n_persons=cfg["n_persons"], train_fraction=cfg["train_fraction"],
        noise_sigma=cfg["noise_sigma"],
    )
    records = generate_records(main_cfg)
    counts = {"train": 0, "test": 0}
    with open(files["train"], "w") as ftr, open(files["test"], "w") as fte:
        for rec in records:
            fh = ftr if rec.split == "train" else fte
            fh.write(record_to_json(rec))
            fh.write("\n")
            counts[rec.split] += 1
    for n_extra, key in ((3, "eval_n3"), (4, "eval_n4")):
        extra_cfg = GeneratorConfig(
            seed=cfg["seed"] + n_extra, n_samples=cfg[f"eval{n_extra}"],
            frames=cfg["frames"], n_persons=n_extra,
            train_fraction=0.5, noise_sigma=cfg["noise_sigma"],
        )
        extra = generate_records(extra_cfg)
        with open(files[key], "w") as fh:
            for rec in extra:
                rec.split = "test"
                fh.write(record_to_json(rec))
                fh.write("\n")
    print(
        f"wrote {counts['train']} train / {counts['test']} test records, "
        f"{cfg['eval3']} three-person and {cfg['eval4']} four-person eval records to {out}"
    )
    return 0


# ---------------------------------------------------------------------------
# train


def _load_train_records(data_path: Path, text_overrides: str | None, split: str | None):
    _require(data_path, "dataset file")
    overrides = load_text_overrides(text_overrides) if text_overrides else None
    return load_dataset(data_path, skeleton_preset(), overrides, split=split)


def cmd_train(args) -> int:
    defaults = dict(
        stage="1", seed=0, epochs=None, batch_size=None, learning_rate=None,
        weight_decay=2e-5, diffusion_steps=1000, schedule="cosine",
        hidden=64, heads=4, blocks=4, max_frames=64,
        use_single_text=False, dm_threshold=1.0, text_dropout=0.1,
        condition_keep_prob=0.7, spatial_frame_keep=0.25,
    )
    cfg = _resolve(defaults, _read_config_file(args.config), {
        "stage": args.stage, "seed": args.seed, "epochs": args.epochs,
        "batch_size": args.batch_size, "learning_rate": args.lr,
        "weight_decay": args.weight_decay, "diffusion_steps": args.diffusion_steps,
        "schedule": args.schedule, "hidden": args.hidden, "heads": args.heads,
        "blocks": args.blocks, "max_frames": args.max_frames,
        "use_single_text": args.use_single_text or None,
        "dm_threshold": args.dm_threshold,
    })
    stage = str(cfg["stage"])
    out = Path(args.out)
    ckpt_dir = out / "checkpoints" / f"stage{stage}"
    _prepare_run_dir(out, [ckpt_dir / "manifest.json"], args.overwrite)
    _echo_config(out, cfg)

    records = _load_train_records(Path(args.data), args.text_overrides, "train")
    skeleton = skeleton_preset()
    over = {
        k: cfg[k]
        for k in ("seed", "weight_decay", "diffusion_steps", "use_single_text",
                  "text_dropout", "condition_keep_prob", "spatial_frame_keep")
    }
    over["schedule_kind"] = cfg["schedule"]
    if cfg["epochs"] is not None:
        over["epochs"] = cfg["epochs"]
    if cfg["batch_size"] is not None:
        over["batch_size"] = cfg["batch_size"]
    if cfg["learning_rate"] is not None:
        over["learning_rate"] = cfg["learning_rate"]
    train_cfg = TrainConfig.for_stage(stage, **over)

    embedder = TextEmbedder(vocab=TEXT_VOCAB, dim=cfg["hidden"], seed=TEXT_SEED)
    if stage == "1":
        dims = ModelDims(
            feature_dim=pose_dim(skeleton.joint_count), hidden=cfg["hidden"],
            heads=cfg["heads"], blocks=cfg["blocks"], max_frames=cfg["max_frames"],
            text_vocab=TEXT_VOCAB,
        )
        _, log = train_stage1(records, train_cfg, dims, skeleton, embedder, out_dir=ckpt_dir)
    else:
        if not args.init_from:
            raise ValidationError(f"stage {stage} requires --init-from with the previous checkpoint")
        prev = Pipeline.load(_require(Path(args.init_from), "checkpoint"))
        embedder = prev.embedder
        if stage == "2":
            _, log = train_stage2(
                records, prev.gen_net, train_cfg, skeleton, embedder,
                out_dir=ckpt_dir, dm_threshold=cfg["dm_threshold"],
            )
        else:
            if prev.inter_net is None:
                raise ValidationError("spatial stage requires a stage-2 checkpoint")
            _, log = train_spatial(
                records, prev.gen_net, prev.inter_net, train_cfg, skeleton,
                embedder, out_dir=ckpt_dir, dm_threshold=cfg["dm_threshold"],
            )
    log.write_csv(out / "log.csv")
    means = log.epoch_means()
    print(f"stage {stage} done: first-epoch loss {means[0]:.5f}, last-epoch loss {means[-1]:.5f}")
    print(f"checkpoint at {ckpt_dir}")
    return 0


# ---------------------------------------------------------------------------
# sample


def _load_spatials(path: str | None, n_persons: int) -> list[SpatialSignal | None] | None:
    if not path:
        return None
    with open(_require(Path(path), "spatial signal file")) as fh:
        payload = json.load(fh)
    entries = payload if isinstance(payload, list) else [payload] + [None] * (n_persons - 1)
    if len(entries) != n_persons:
        raise ValidationError("spatial file must list one entry (or null) per person")
    out = []
    for entry in entries:
        if entry is None:
            out.append(None)
            continue
        targets = np.asarray(entry["targets"], dtype=np.float64)
        observed = np.asarray(entry["observed"], dtype=np.float64)
        if targets.shape[:2] != (entry["frames"], entry["joints"]):
            raise ValidationError("spatial targets shape does not match frames/joints")
        out.append(SpatialSignal(targets=targets, observed=observed))
    return out


def cmd_sample(args) -> int:
    defaults = dict(
        num_persons=None, frames=32, seed=0, guidance_scale=2.0,
        num_inference_steps=50, eta_explicit=0.1, guidance_reps=1,
        interactive_text=None, gm_only_first=False,
    )
    cfg = _resolve(defaults, _read_config_file(args.config), {
        "num_persons": args.num_persons, "frames": args.frames, "seed": args.seed,
        "guidance_scale": args.guidance_scale, "num_inference_steps": args.steps,
        "eta_explicit": args.eta_explicit, "guidance_reps": args.guidance_reps,
        "interactive_text": args.interactive_text,
        "gm_only_first": args.gm_only_first or None,
    })
    texts = list(args.text or [])
    n = cfg["num_persons"] or len(texts)
    if n < 1 or len(texts) != n:
        raise ValidationError(
            f"--num-persons is {n} but {len(texts)} --text values were given"
        )
    out = Path(args.out)
    outputs_dir = out / "outputs"
    expected = [outputs_dir / f"person_{i + 1}.jsonl" for i in range(n)]
    expected += [outputs_dir / "motions.jsonl", outputs_dir / "trajectory.csv"]
    _prepare_run_dir(out, expected, args.overwrite)
    _echo_config(out, {**cfg, "texts": texts})
    outputs_dir.mkdir(parents=True, exist_ok=True)

    pipe = Pipeline.load(_require(Path(args.ckpt), "checkpoint"))
    cond_texts = list(texts)
    if cfg["interactive_text"]:
        cond_texts = [texts[0]] + [cfg["interactive_text"]] * (n - 1)
    request = GenerationRequest(
        texts=cond_texts, frames=cfg["frames"], seed=cfg["seed"],
        guidance_scale=cfg["guidance_scale"],
        num_inference_steps=cfg["num_inference_steps"],
        spatials=_load_spatials(args.spatial, n),
        guidance_step=cfg["eta_explicit"], guidance_reps=cfg["guidance_reps"],
        gm_only_first=bool(cfg["gm_only_first"]),
    )
    motions = sample_multi(pipe, request)
    if any(not np.isfinite(m.data).all() for m in motions):
        raise NumericalError("sampled motion contains NaN/Inf")
    for i, motion in enumerate(motions):
        rec = SampleRecord(
            id=f"sample-{cfg['seed']}-p{i + 1}", motions=[motion],
            texts_single=[texts[i]], text_interactive="", split="test",
        )
        with open(outputs_dir / f"person_{i + 1}.jsonl", "w") as fh:
            fh.write(record_to_json(rec))
            fh.write("\n")
    combined = SampleRecord(
        id=f"sample-{cfg['seed']}", motions=motions, texts_single=texts,
        text_interactive=cfg["interactive_text"] or "", split="test",
    )
    with open(outputs_dir / "motions.jsonl", "w") as fh:
        fh.write(record_to_json(combined))
        fh.write("\n")
    export_trajectory_csv(motions, outputs_dir / "trajectory.csv")
    print(f"wrote {n} motion file(s) under {outputs_dir}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    defaults = dict(
        seed=0, reps=10, pool_size=8, use_interactive_text=False,
        num_inference_steps=50, guidance_scale=2.0, subset=None,
        evaluator_epochs=200, mm_texts=8, mm_repeats=8,
    )
    cfg = _resolve(defaults, _read_config_file(args.config), {
        "seed": args.seed, "reps": args.reps, "pool_size": args.pool,
        "use_interactive_text": args.use_interactive_text or None,
        "num_inference_steps": args.steps, "guidance_scale": args.guidance_scale,
        "subset": args.subset, "evaluator_epochs": args.evaluator_epochs,
    })
    out = Path(args.out)
    metrics_path = out / "metrics.json"
    _prepare_run_dir(out, [metrics_path], args.overwrite)
    _echo_config(out, cfg)

    pipe = Pipeline.load(_require(Path(args.ckpt), "checkpoint"))
    test_records = load_dataset(_require(Path(args.data), "dataset file"), split="test")
    if cfg["subset"]:
        test_records = test_records[: cfg["subset"]]
    feature_dim = pipe.gen_net.dims.feature_dim
    if args.evaluator_ckpt and Path(args.evaluator_ckpt).exists():
        evaluator = load_evaluator(args.evaluator_ckpt, feature_dim, pipe.embedder.dim)
    else:
        if not args.train_data:
            raise ValidationError("--train-data is required to fit the evaluator")
        train_records = load_dataset(_require(Path(args.train_data), "dataset file"),
                                     split="train")
        evaluator = train_evaluator(
            train_records, pipe.embedder, seed=cfg["seed"],
            epochs=cfg["evaluator_epochs"],
        )
        eval_dir = Path(args.evaluator_ckpt) if args.evaluator_ckpt else out / "checkpoints" / "evaluator"
        save_evaluator(eval_dir, evaluator, {"seed": cfg["seed"]})
        print(f"trained evaluator saved to {eval_dir}")
    report = generation_metrics(
        pipe, evaluator, test_records, seed=cfg["seed"], reps=cfg["reps"],
        pool_size=cfg["pool_size"], use_interactive_text=cfg["use_interactive_text"],
        num_inference_steps=cfg["num_inference_steps"],
        guidance_scale=cfg["guidance_scale"], mm_texts=cfg["mm_texts"],
        mm_repeats=cfg["mm_repeats"],
    )
    with open(metrics_path, "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    for name in ("fid", "r_precision_top1", "diversity", "mm_dist", "mmodality"):
        entry = report[name]
        print(f"{name}: {entry['mean']:.4f} +/- {entry['ci95']:.4f}")
    print(f"metrics written to {metrics_path}")
    return 0


# ---------------------------------------------------------------------------
# oracle


def cmd_oracle(args) -> int:
    defaults = dict(
        rho=0.8, seed=0, n_samples=10000, num_inference_steps=50,
        mean_tol=0.05, cov_tol=0.15, slope_tol=0.1, stage1_epochs=None,
        stage2_epochs=None,
    )
    cfg = _resolve(defaults, _read_config_file(args.config), {
        "rho": args.rho, "seed": args.seed, "n_samples": args.n_samples,
        "num_inference_steps": args.steps, "mean_tol": args.mean_tol,
        "cov_tol": args.cov_tol, "slope_tol": args.slope_tol,
    })
    out = Path(args.out)
    report_path = out / "oracle_report.json"
    _prepare_run_dir(out, [report_path], args.overwrite)
    _echo_config(out, cfg)

    task = correlated_pair_task(cfg["rho"])
    recipe = {}
    if cfg["stage1_epochs"]:
        recipe["stage1_epochs"] = cfg["stage1_epochs"]
    if cfg["stage2_epochs"]:
        recipe["stage2_epochs"] = cfg["stage2_epochs"]
    print("training the reference pipeline on the correlated-pair task ...")
    pipe = train_gaussian_pipeline(task, seed=cfg["seed"], recipe=recipe or None)
    report = verify_factorization(
        task, pipe, n_samples=cfg["n_samples"], seed=cfg["seed"],
        mean_tol=cfg["mean_tol"], cov_tol=cfg["cov_tol"], slope_tol=cfg["slope_tol"],
        num_inference_steps=cfg["num_inference_steps"],
    )
    with open(report_path, "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(
        f"slope {report['empirical_slope'][0][0]:.3f} vs {report['analytic_slope'][0][0]:.3f}, "
        f"mean err {report['mean_err']:.4f}, cov err {report['cov_frobenius_err']:.4f} "
        f"-> passed={report['passed']}"
    )
    print(f"report written to {report_path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anymotion",
        description="Text-to-motion diffusion for any number of people",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset files")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-samples", type=int, dest="n_samples")
    p.add_argument("--frames", type=int)
    p.add_argument("--train-fraction", type=float, dest="train_fraction")
    p.add_argument("--noise-sigma", type=float, dest="noise_sigma")
    p.add_argument("--n-persons", type=int, dest="n_persons")
    p.add_argument("--eval3", type=int)
    p.add_argument("--eval4", type=int)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", choices=["1", "2", "spatial"], required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init-from", dest="init_from")
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--diffusion-steps", type=int, dest="diffusion_steps")
    p.add_argument("--schedule", choices=["cosine", "linear"])
    p.add_argument("--hidden", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--blocks", type=int)
    p.add_argument("--max-frames", type=int, dest="max_frames")
    p.add_argument("--seed", type=int)
    p.add_argument("--use-single-text", action="store_true", dest="use_single_text")
    p.add_argument("--dm-threshold", type=float, dest="dm_threshold")
    p.add_argument("--text-overrides", dest="text_overrides")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate motions from text")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--num-persons", type=int, dest="num_persons")
    p.add_argument("--text", action="append")
    p.add_argument("--frames", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--spatial")
    p.add_argument("--guidance-scale", type=float, dest="guidance_scale")
    p.add_argument("--eta-explicit", type=float, dest="eta_explicit")
    p.add_argument("--guidance-reps", type=int, dest="guidance_reps")
    p.add_argument("--steps", type=int)
    p.add_argument("--interactive-text", dest="interactive_text")
    p.add_argument("--gm-only-first", action="store_true", dest="gm_only_first")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="compute generation metrics on held-out data")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--train-data", dest="train_data")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--evaluator-ckpt", dest="evaluator_ckpt")
    p.add_argument("--evaluator-epochs", type=int, dest="evaluator_epochs")
    p.add_argument("--reps", type=int)
    p.add_argument("--pool", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--subset", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--guidance-scale", type=float, dest="guidance_scale")
    p.add_argument("--use-interactive-text", action="store_true",
                   dest="use_interactive_text")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle", help="train and verify on the analytic Gaussian task")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--rho", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-samples", type=int, dest="n_samples")
    p.add_argument("--steps", type=int)
    p.add_argument("--mean-tol", type=float, dest="mean_tol")
    p.add_argument("--cov-tol", type=float, dest="cov_tol")
    p.add_argument("--slope-tol", type=float, dest="slope_tol")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
