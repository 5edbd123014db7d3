"""Operator surface: synth, train, sample, eval, ablate, gradcheck.

All subcommands validate their full configuration before writing anything,
and hold an exclusive lock file inside the output directory while running.
Exit codes: 0 success, 1 runtime failure, 2 configuration/usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, config_to_dict, load_config
from .flowmatch import grad_check, load_model, sample_euler
from .layout import LayoutMode, TemporalReference, split_joint
from .metrics import alignment_score, soft_alpha_miou
from .model import DenoiserConfig
from .pipeline import (
    ablation_markdown,
    clip_report,
    composed_reference_image,
    load_split,
    mean_report,
    run_ablation,
    train_on_dataset,
)
from .rgba import decode_alpha_clip, read_rgb_png, write_rgb_png, write_rgba_png
from .synth import build_dataset, default_specs, load_manifest, worker_count
from .flowmatch import TrainConfig

GRADCHECK_TOLERANCE = 1e-4


@contextmanager
def output_lock(directory: Path):
    """One writer per output directory, enforced with an exclusive lock file."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(
            f"output directory {directory} is locked by another run; remove {lock} if stale"
        ) from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def cmd_synth(cfg: RunConfig, out: Path) -> int:
    data = cfg.data
    total = data.train_clips + data.val_clips
    specs = default_specs(
        total, data.frames, data.height, data.width, data.seed,
        scale=data.scale, max_text_len=data.max_text_len,
    )
    with output_lock(out):
        manifest = build_dataset(specs, data.train_clips / total, out, seed=data.seed)
    print(
        f"wrote {len(manifest.ids('train'))} train / {len(manifest.ids('val'))} val clips to {out}"
    )
    return 0


def cmd_train(cfg: RunConfig, out: Path) -> int:
    dataset = Path(cfg.paths.dataset_dir)
    if not (dataset / "manifest.json").exists():
        raise ConfigError(f"no dataset manifest under {dataset}; run synth first")
    with output_lock(out):
        model, trainer, _ = train_on_dataset(dataset, cfg.train, cfg.denoiser, run_dir=out)
        # filesystem paths stay out of the checkpoint so identical experiments
        # serialize identically wherever they run
        run_config = {g: v for g, v in config_to_dict(cfg).items() if g != "paths"}
        trainer.save(out / "final.ttxt", extra_config={"run_config": run_config})
    print(f"trained {cfg.train.steps} steps; checkpoint at {out / 'final.ttxt'}")
    return 0


def cmd_sample(cfg: RunConfig, out: Path) -> int:
    ckpt_path = cfg.paths.checkpoint
    if not ckpt_path:
        raise ConfigError("sample needs paths.checkpoint")
    if not Path(ckpt_path).exists():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    dataset = Path(cfg.paths.dataset_dir)
    if not (dataset / "manifest.json").exists():
        raise ConfigError(f"no dataset manifest under {dataset}; the reference clip comes from it")

    model, saved = load_model(ckpt_path)
    saved_train = saved.get("train", {})
    tcfg = TrainConfig(
        layout=LayoutMode(saved["layout"]),
        use_trimap=bool(saved_train.get("use_trimap", True)),
        temporal_reference=TemporalReference(saved_train.get("temporal_reference", "rgb")),
        trimap_beta=int(saved_train.get("trimap_beta", 5)),
        lambda_rec=float(saved_train.get("lambda_rec", 0.3)),
    )

    manifest = load_manifest(dataset)
    clip_id = cfg.sample_sel.clip
    if not clip_id:
        val_ids = manifest.ids("val")
        clip_id = val_ids[0] if val_ids else manifest.entries[0].id
    matches = [c for c in load_split(dataset, manifest, "train") + load_split(dataset, manifest, "val") if c.clip_id == clip_id]
    if not matches:
        raise ConfigError(f"clip {clip_id!r} not found in dataset {dataset}")
    clip = matches[0]

    with output_lock(out):
        from .pipeline import reference_latent

        ref = torch.from_numpy(reference_latent(clip.rgb, tcfg))
        comp = sample_euler(model, ref, clip.effect, cfg.sample, tcfg.layout)
        rgb_half, alpha_half = split_joint(comp, tcfg.layout)
        rgb_half = np.clip(rgb_half, 0.0, 1.0)
        alpha = decode_alpha_clip(alpha_half)
        comp_frames = np.clip(comp.frames, 0.0, 1.0)
        for i in range(comp_frames.shape[0]):
            write_rgb_png(out / f"composite_{i:03d}.png", comp_frames[i])
        for i in range(rgb_half.shape[0]):
            write_rgb_png(out / f"rgb_{i:03d}.png", rgb_half[i])
            write_rgb_png(out / f"alpha_{i:03d}.png", np.repeat(alpha[i], 3, axis=0))
            write_rgba_png(out / f"preview_{i:03d}.png", rgb_half[i], alpha[i])
    print(f"sampled clip {clip_id} ({rgb_half.shape[0]} frames) into {out}")
    return 0


def _load_clip_dir(clip_dir: Path) -> tuple[np.ndarray, np.ndarray]:
    rgb_paths = sorted(clip_dir.glob("rgb_*.png"))
    if not rgb_paths:
        raise ValueError(f"no rgb frames under {clip_dir}")
    rgb = np.stack([read_rgb_png(p) for p in rgb_paths])
    alpha_frames = np.stack(
        [read_rgb_png(clip_dir / f"alpha_{i:03d}.png") for i in range(len(rgb_paths))]
    )
    return rgb, alpha_frames


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    pred_dir = Path(cfg.paths.pred_dir)
    gt_dir = Path(cfg.paths.gt_dir)
    for d, label in ((pred_dir, "paths.pred_dir"), (gt_dir, "paths.gt_dir")):
        if not str(d) or not d.is_dir():
            raise ConfigError(f"{label} must point to a directory of clips, got {d!r}")
    ids = sorted(
        p.name for p in pred_dir.iterdir() if p.is_dir() and (gt_dir / p.name).is_dir()
    )
    if not ids:
        raise ConfigError(f"no clip ids shared by {pred_dir} and {gt_dir}")
    with output_lock(out):
        per_clip = {}
        for clip_id in ids:
            pred_rgb, pred_alpha_frames = _load_clip_dir(pred_dir / clip_id)
            _, gt_alpha_frames = _load_clip_dir(gt_dir / clip_id)
            per_clip[clip_id] = clip_report(
                pred_rgb,
                decode_alpha_clip(pred_alpha_frames),
                decode_alpha_clip(gt_alpha_frames),
                cfg.flow,
                cfg.eval.tau,
            )
        report = {"clips": per_clip, "mean": mean_report(list(per_clip.values()))}
        with open(out / "report.json", "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    mean = report["mean"]
    print(
        f"evaluated {len(ids)} clips: soft alpha-mIoU {mean['soft_alpha_miou']:.2f}, "
        f"RGBA alignment {mean['rgba_alignment']['final_score']:.2f}"
    )
    return 0


def cmd_ablate(cfg: RunConfig, out: Path) -> int:
    data = cfg.data
    total = data.train_clips + data.val_clips
    with output_lock(out):
        dataset_dir = out / "dataset"
        specs = default_specs(
            total, data.frames, data.height, data.width, data.seed,
            scale=data.scale, max_text_len=data.max_text_len,
        )
        build_dataset(specs, data.train_clips / total, dataset_dir, seed=data.seed)
        rows = run_ablation(cfg, dataset_dir, out)
        with open(out / "table.json", "w") as fh:
            json.dump(rows, fh, indent=2, sort_keys=True)
            fh.write("\n")
        (out / "table.md").write_text(ablation_markdown(rows))
    print(ablation_markdown(rows))
    return 0


def gradcheck_batch(cfg: RunConfig, batch_size: int = 2) -> dict:
    """Seeded synthetic batch sized to the configured data geometry."""
    from .pipeline import build_model

    f, h, w = cfg.data.frames, cfg.data.height, cfg.data.width
    layout = cfg.train.layout
    if layout is LayoutMode.WIDTH:
        latent_shape = (f, 3, h // 2, w)
        ref_shape = (3, h // 2, w)
    elif layout is LayoutMode.HEIGHT:
        latent_shape = (f, 3, h, w // 2)
        ref_shape = (3, h, w // 2)
    else:
        latent_shape = (2 * f, 3, h // 2, w // 2)
        ref_shape = (3, h // 2, w // 2)
    model = build_model(cfg.denoiser, latent_shape, ref_shape, layout, cfg.train.seed)
    gen = torch.Generator().manual_seed(cfg.train.seed + 1)
    shape = (batch_size,) + latent_shape
    # modest value scale keeps the loss ~1e-2 so finite-difference cancellation
    # noise stays well below the relative-error floor
    scale = 0.1
    drop = torch.zeros(batch_size, dtype=torch.bool)
    drop[1::2] = True  # exercise the null-condition path
    return {
        "model": model,
        "x0": scale * torch.randn(shape, generator=gen, dtype=torch.float64),
        "x1": scale * torch.randn(shape, generator=gen, dtype=torch.float64),
        "t": torch.rand(batch_size, generator=gen, dtype=torch.float64),
        "effect_ids": torch.randint(0, 4, (batch_size,), generator=gen),
        "ref": scale * torch.randn((batch_size,) + ref_shape, generator=gen, dtype=torch.float64),
        "drop": drop,
        "layout": layout,
        "lambda_rec": cfg.train.lambda_rec,
    }


def cmd_gradcheck(cfg: RunConfig, out: Path) -> int:
    batch = gradcheck_batch(cfg)
    model = batch.pop("model")
    err = grad_check(model, batch, seed=cfg.train.seed)
    print(f"gradcheck max relative error: {err:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})")
    return 0 if err < GRADCHECK_TOLERANCE else 1


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}

# --seed retargets the seed that drives each subcommand
SEED_TARGETS = {
    "synth": "data.seed",
    "train": "train.seed",
    "sample": "sample.seed",
    "ablate": "train.seed",
    "eval": None,
    "gradcheck": "train.seed",
}

DEFAULT_OUT = {
    "synth": "data",
    "train": "run",
    "sample": "samples",
    "eval": "eval",
    "ablate": "ablation",
    "gradcheck": ".",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="transtext",
        description="Transparent glyph-animation toolkit: data synthesis, joint "
        "RGB+alpha flow-matching training, guided sampling, and motion-alignment evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("synth", "render the synthetic RGBA glyph dataset"),
        ("train", "train the velocity model on a dataset"),
        ("sample", "sample a clip from a checkpoint and write PNGs"),
        ("eval", "score predicted clips against ground truth"),
        ("ablate", "run the layout/trimap/lambda ablation grid"),
        ("gradcheck", "verify analytic gradients against finite differences"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument(
            "--set", action="append", default=[], metavar="GROUP.KEY=VALUE",
            help="override one config value (repeatable)",
        )
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed for this subcommand")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    overrides = list(args.set)
    target = SEED_TARGETS[args.command]
    if args.seed is not None and target:
        overrides.append(f"{target}={args.seed}")
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    torch.set_num_threads(worker_count())
    out = Path(args.out) if args.out else Path(DEFAULT_OUT[args.command])
    try:
        return COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure, distinct from bad configuration
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
