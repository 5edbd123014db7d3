"""End-to-end orchestration: dataset preparation, training runs, validation
generation, and metric aggregation. Shared by the CLI and the ablation grid."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .farneback import FlowConfig
from .flowmatch import (
    SampleConfig,
    TrainConfig,
    Trainer,
    decode_latent,
    encode_frames,
    encode_latent,
    encode_reference,
    from_model_space,
    sample_latent,
    to_model_space,
)
from .layout import LayoutMode, compose_reference, concat_joint, duplicate_reference, split_joint
from .metrics import AlignmentReport, alignment_score, soft_alpha_miou
from .model import Denoiser, DenoiserConfig
from .rgba import decode_alpha_clip, encode_alpha_clip
from .synth import (
    EFFECT_ORDER,
    DatasetManifest,
    EffectKind,
    derive_stream,
    load_clip_arrays,
    load_manifest,
)

FVD_REASON = "requires a pretrained video classifier; not computed at desk scale"


@dataclass
class PreparedClip:
    clip_id: str
    rgb: np.ndarray  # premultiplied (f, 3, h, w)
    alpha: np.ndarray  # (f, 1, h, w)
    effect: int


def composed_reference_image(rgb_clip: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    """Conditioning image for a premultiplied clip under the run's layout rules."""
    mid = rgb_clip.shape[0] // 2
    ref = rgb_clip[mid]
    if cfg.use_trimap:
        return compose_reference(
            ref, cfg.trimap_beta, cfg.layout, cfg.temporal_reference
        ).composed
    return duplicate_reference(ref, cfg.layout)


def load_split(dataset_dir: str | Path, manifest: DatasetManifest, split: str) -> list[PreparedClip]:
    clips = []
    for entry in manifest.entries:
        if entry.split != split:
            continue
        rgb, alpha = load_clip_arrays(dataset_dir, entry.id)
        effect = EFFECT_ORDER.index(EffectKind(entry.effect))
        clips.append(PreparedClip(clip_id=entry.id, rgb=rgb, alpha=alpha, effect=effect))
    return clips


def reference_latent(rgb_clip: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    """Model-space conditioning latent for a premultiplied clip."""
    return to_model_space(encode_reference(composed_reference_image(rgb_clip, cfg)))


def training_tensors(
    clips: list[PreparedClip], cfg: TrainConfig
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Encode clips into model-space (x1 latents, reference latents, effect ids)."""
    x1s, refs, effects = [], [], []
    for clip in clips:
        comp = concat_joint(clip.rgb, encode_alpha_clip(clip.alpha), cfg.layout)
        x1s.append(to_model_space(encode_latent(comp)))
        refs.append(reference_latent(clip.rgb, cfg))
        effects.append(clip.effect)
    return (
        torch.from_numpy(np.stack(x1s)),
        torch.from_numpy(np.stack(refs)),
        torch.tensor(effects, dtype=torch.long),
    )


def build_model(
    dcfg: DenoiserConfig,
    latent_shape: tuple[int, int, int, int],
    ref_shape: tuple[int, int, int],
    layout: LayoutMode,
    seed: int,
    num_effects: int = len(EFFECT_ORDER),
) -> Denoiser:
    model = Denoiser(dcfg, latent_shape, ref_shape, layout, num_effects)
    model.init_parameters(torch.Generator().manual_seed(seed))
    return model


def train_on_dataset(
    dataset_dir: str | Path,
    tcfg: TrainConfig,
    dcfg: DenoiserConfig,
    run_dir: str | Path | None = None,
    quiet: bool = False,
) -> tuple[Denoiser, Trainer, list[PreparedClip]]:
    manifest = load_manifest(dataset_dir)
    train_clips = load_split(dataset_dir, manifest, "train")
    if not train_clips:
        raise ValueError(f"dataset {dataset_dir} has no training clips")
    x1, refs, effects = training_tensors(train_clips, tcfg)
    model = build_model(
        dcfg, tuple(x1.shape[1:]), tuple(refs.shape[1:]), tcfg.layout, tcfg.seed
    )
    log_path = Path(run_dir) / "losses.jsonl" if run_dir else None
    if run_dir:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
    trainer = Trainer(model, tcfg, x1, refs, effects, log_path=log_path)
    trainer.run(run_dir=run_dir, quiet=quiet)
    return model, trainer, train_clips


def clip_sample_seed(base_seed: int, index: int) -> int:
    return derive_stream(base_seed, 0xC11F, index).next_u64() & (2**63 - 1)


@dataclass
class GeneratedClip:
    clip_id: str
    rgb: np.ndarray  # (f, 3, h, w), clamped to [0,1]
    alpha: np.ndarray  # (f, 1, h, w)
    alpha_rgb: np.ndarray  # raw generated alpha half, (f, 3, h, w)


def generate_clips(
    model: Denoiser,
    clips: list[PreparedClip],
    tcfg: TrainConfig,
    scfg: SampleConfig,
    batch: int = 8,
) -> list[GeneratedClip]:
    """Sample one generated clip per reference, batched for throughput.

    Per-clip noise depends only on (sample seed, clip index), so results are
    independent of the batch partition.
    """
    model.eval()
    dtype = next(model.parameters()).dtype
    refs = [torch.from_numpy(reference_latent(c.rgb, tcfg)).to(dtype) for c in clips]
    effects = torch.tensor([c.effect for c in clips], dtype=torch.long)
    noises = [
        torch.randn(
            tuple(model.latent_shape),
            generator=torch.Generator().manual_seed(clip_sample_seed(scfg.seed, i)),
            dtype=dtype,
        )
        for i in range(len(clips))
    ]
    s = scfg.cfg_scale
    outputs: list[GeneratedClip] = []
    for start in range(0, len(clips), batch):
        idx = range(start, min(start + batch, len(clips)))
        x = torch.stack([noises[i] for i in idx])
        ref = torch.stack([refs[i] for i in idx])
        eff = effects[list(idx)]
        n = x.shape[0]
        # conditional and null branches ride one batched forward per step
        drop = torch.cat([torch.zeros(n, dtype=torch.bool), torch.ones(n, dtype=torch.bool)])
        with torch.no_grad():
            for k in range(scfg.num_steps):
                t = torch.tensor(k / scfg.num_steps, dtype=dtype)
                if s == 1.0:
                    v = model(x, t, eff, ref)
                else:
                    both = model(
                        torch.cat([x, x]), t, torch.cat([eff, eff]),
                        torch.cat([ref, ref]), drop,
                    )
                    v = both[n:] + s * (both[:n] - both[n:])
                x = x + v / scfg.num_steps
        for row, i in enumerate(idx):
            comp = decode_latent(from_model_space(x[row].to(torch.float64).numpy()), tcfg.layout)
            rgb_half, alpha_half = split_joint(comp, tcfg.layout)
            outputs.append(
                GeneratedClip(
                    clip_id=clips[i].clip_id,
                    rgb=np.clip(rgb_half, 0.0, 1.0),
                    alpha=decode_alpha_clip(alpha_half),
                    alpha_rgb=alpha_half,
                )
            )
    return outputs


def clip_report(
    pred_rgb: np.ndarray,
    pred_alpha: np.ndarray,
    gt_alpha: np.ndarray,
    flow_cfg: FlowConfig,
    tau: float,
) -> dict:
    """Per-clip metric block: matte overlap vs ground truth plus the motion
    alignment between the predicted RGB and alpha streams."""
    miou = soft_alpha_miou(pred_alpha, gt_alpha)
    align = alignment_score(pred_rgb, encode_alpha_clip(pred_alpha), flow_cfg, tau)
    return {
        "fvd": None,
        "fvd_reason": FVD_REASON,
        "soft_alpha_miou": miou,
        "rgba_alignment": align.to_dict(),
    }


def mean_report(per_clip: list[dict]) -> dict:
    mean_block: dict = {
        "fvd": None,
        "soft_alpha_miou": float(np.mean([c["soft_alpha_miou"] for c in per_clip])),
    }
    keys = per_clip[0]["rgba_alignment"].keys()
    mean_block["rgba_alignment"] = {
        k: float(np.mean([c["rgba_alignment"][k] for c in per_clip])) for k in keys
    }
    return mean_block


def evaluate_generated(
    generated: list[GeneratedClip],
    gt_clips: list[PreparedClip],
    flow_cfg: FlowConfig,
    tau: float,
) -> dict:
    gt_by_id = {c.clip_id: c for c in gt_clips}
    per_clip = {}
    for gen in generated:
        gt = gt_by_id[gen.clip_id]
        per_clip[gen.clip_id] = clip_report(gen.rgb, gen.alpha, gt.alpha, flow_cfg, tau)
    report = {"clips": per_clip, "mean": mean_report(list(per_clip.values()))}
    return report


def run_experiment(
    dataset_dir: str | Path,
    tcfg: TrainConfig,
    dcfg: DenoiserConfig,
    scfg: SampleConfig,
    flow_cfg: FlowConfig,
    tau: float = 0.1,
    run_dir: str | Path | None = None,
    quiet: bool = True,
) -> dict:
    """Train on the dataset's train split, generate its val split, score it."""
    model, trainer, _ = train_on_dataset(dataset_dir, tcfg, dcfg, run_dir=run_dir, quiet=quiet)
    manifest = load_manifest(dataset_dir)
    val_clips = load_split(dataset_dir, manifest, "val")
    if not val_clips:
        raise ValueError(f"dataset {dataset_dir} has no validation clips")
    generated = generate_clips(model, val_clips, tcfg, scfg)
    report = evaluate_generated(generated, val_clips, flow_cfg, tau)
    if run_dir:
        trainer.save(Path(run_dir) / "final.ttxt")
        with open(Path(run_dir) / "report.json", "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return report


def ablation_rows(lambdas: tuple[float, ...] = (0.0, 0.1, 0.3, 0.5, 0.8)) -> list[dict]:
    """Axis sweeps around the width-wise baseline, one factor at a time.

    The lambda=0 plain run is the baseline itself, so it appears once.
    """
    rows = [
        {"name": "baseline_width", "layout": LayoutMode.WIDTH, "use_trimap": False, "lambda_rec": 0.0},
        {"name": "height_concat", "layout": LayoutMode.HEIGHT, "use_trimap": False, "lambda_rec": 0.0},
        {"name": "temporal_concat", "layout": LayoutMode.TEMPORAL, "use_trimap": False, "lambda_rec": 0.0},
        {"name": "trimap_reference", "layout": LayoutMode.WIDTH, "use_trimap": True, "lambda_rec": 0.0},
    ]
    for lam in lambdas:
        if lam == 0.0:
            continue  # duplicate of the baseline row
        rows.append(
            {
                "name": f"lambda_{lam:g}",
                "layout": LayoutMode.WIDTH,
                "use_trimap": False,
                "lambda_rec": lam,
            }
        )
    return rows


def run_ablation(cfg: RunConfig, dataset_dir: str | Path, out_dir: str | Path) -> list[dict]:
    """Train and score every ablation row on a shared dataset."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for row in ablation_rows():
        tcfg = TrainConfig(
            lambda_rec=row["lambda_rec"],
            learning_rate=cfg.train.learning_rate,
            weight_decay=cfg.train.weight_decay,
            steps=cfg.train.steps,
            batch_size=cfg.train.batch_size,
            cond_drop_prob=cfg.train.cond_drop_prob,
            seed=cfg.train.seed,
            layout=row["layout"],
            use_trimap=row["use_trimap"],
            temporal_reference=cfg.train.temporal_reference,
            trimap_beta=cfg.train.trimap_beta,
            checkpoint_every=0,
            dtype=cfg.train.dtype,
        )
        run_dir = out / row["name"]
        report = run_experiment(
            dataset_dir, tcfg, cfg.denoiser, cfg.sample, cfg.flow, cfg.eval.tau,
            run_dir=run_dir, quiet=True,
        )
        results.append(
            {
                "name": row["name"],
                "layout": row["layout"].value,
                "use_trimap": row["use_trimap"],
                "lambda_rec": row["lambda_rec"],
                "soft_alpha_miou": report["mean"]["soft_alpha_miou"],
                "rgba_alignment": report["mean"]["rgba_alignment"]["final_score"],
                "fvd": None,
            }
        )
    return results


def ablation_markdown(rows: list[dict]) -> str:
    lines = [
        "| run | layout | trimap ref | lambda | soft alpha-mIoU | RGBA alignment | FVD |",
        "| --- | --- | --- | --- | --- | --- | --- |",
    ]
    for r in rows:
        lines.append(
            f"| {r['name']} | {r['layout']} | {'yes' if r['use_trimap'] else 'no'} "
            f"| {r['lambda_rec']:g} | {r['soft_alpha_miou']:.2f} "
            f"| {r['rgba_alignment']:.2f} | n/a |"
        )
    return "\n".join(lines) + "\n"
