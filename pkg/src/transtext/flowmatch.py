"""Flow-matching core: latent codec, losses, training loop, and guided sampling.

The desk-scale "encoder" is a fixed 2x2 average pool per frame (decode is
nearest-neighbor upsampling), so latents are just pooled pixels and all
layout geometry carries over at half resolution.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .layout import CompositeClip, LayoutMode, TemporalReference
from .model import Denoiser, DenoiserConfig

POOL = 2


def to_model_space(latent):
    """Map [0,1] latents to the [-1,1] range the velocity model trains in."""
    return 2.0 * latent - 1.0


def from_model_space(x):
    """Inverse of to_model_space; sampled states come back to latent range."""
    return (x + 1.0) / 2.0


def encode_frames(frames: np.ndarray) -> np.ndarray:
    """2x2 average pooling per frame: (f, c, h, w) -> (f, c, h/2, w/2)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4:
        raise ValueError(f"expected (f, c, h, w), got {frames.shape}")
    f, c, h, w = frames.shape
    if h % POOL or w % POOL:
        raise ValueError(f"frame size {h}x{w} not divisible by the pooling factor {POOL}")
    return frames.reshape(f, c, h // POOL, POOL, w // POOL, POOL).mean(axis=(3, 5))


def decode_frames(latent: np.ndarray) -> np.ndarray:
    """Nearest-neighbor upsampling, the inverse of encode on pooled grids."""
    latent = np.asarray(latent, dtype=np.float64)
    if latent.ndim != 4:
        raise ValueError(f"expected (f, c, h, w), got {latent.shape}")
    return latent.repeat(POOL, axis=2).repeat(POOL, axis=3)


def encode_latent(comp: CompositeClip) -> np.ndarray:
    return encode_frames(comp.frames)


def decode_latent(latent: np.ndarray, layout: LayoutMode) -> CompositeClip:
    frames = decode_frames(latent)
    if layout is LayoutMode.WIDTH:
        boundary = frames.shape[3] // 2
    elif layout is LayoutMode.HEIGHT:
        boundary = frames.shape[2] // 2
    else:
        boundary = frames.shape[0] // 2
    return CompositeClip(frames=frames, layout=layout, boundary=boundary)


def encode_reference(image: np.ndarray) -> np.ndarray:
    """Pool a single (c, h, w) conditioning image."""
    return encode_frames(image[None])[0]


def interpolate_path(x0, x1, t):
    """Linear path t*x1 + (1-t)*x0; works for numpy or torch, batched or not."""
    if hasattr(x0, "shape") and hasattr(x1, "shape") and tuple(x0.shape) != tuple(x1.shape):
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(x1.shape)}")
    return t * x1 + (1.0 - t) * x0


def target_velocity(x0, x1):
    return x1 - x0


def latent_alpha_mask(layout: LayoutMode, shape: tuple[int, int, int, int]) -> np.ndarray:
    """Boolean mask over (f, c, h, w) latent elements that belong to the alpha half."""
    f, c, h, w = shape
    mask = np.zeros(shape, dtype=bool)
    if layout is LayoutMode.WIDTH:
        mask[:, :, :, w // 2 :] = True
    elif layout is LayoutMode.HEIGHT:
        mask[:, :, h // 2 :, :] = True
    else:
        mask[f // 2 :] = True
    return mask


def compute_losses(v_pred, x0, x1, x_t, t, layout: LayoutMode, lambda_rec: float):
    """Velocity MSE plus the one-step reconstruction penalty on the alpha half.

    Accepts torch tensors shaped (f, c, h, w) or batched (b, f, c, h, w); t is
    a scalar or per-sample vector in [0, 1]. Returns (mse, rec, total) as
    0-dim tensors that stay on the autograd graph.
    """
    if lambda_rec < 0:
        raise ValueError(f"lambda_rec must be >= 0, got {lambda_rec}")
    v_pred, x0, x1, x_t = (torch.as_tensor(a) for a in (v_pred, x0, x1, x_t))
    t = torch.as_tensor(t, dtype=v_pred.dtype)
    if float(t.min()) < 0.0 or float(t.max()) > 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    batched = v_pred.ndim == 5
    grid_shape = tuple(v_pred.shape[1:]) if batched else tuple(v_pred.shape)
    if t.ndim == 1:
        t = t.view(-1, *([1] * (v_pred.ndim - 1)))

    mse = ((v_pred - (x1 - x0)) ** 2).mean()

    mask = torch.from_numpy(latent_alpha_mask(layout, grid_shape))
    if batched:
        mask = mask[None].expand_as(v_pred)
    recon = x_t + (1.0 - t) * v_pred
    rec = (((x1 - recon) ** 2)[mask]).mean()

    total = mse + lambda_rec * rec
    return mse, rec, total


@dataclass
class TrainConfig:
    lambda_rec: float = 0.3
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    steps: int = 3000
    batch_size: int = 4
    cond_drop_prob: float = 0.1
    seed: int = 0
    layout: LayoutMode = LayoutMode.WIDTH
    use_trimap: bool = True
    temporal_reference: TemporalReference = TemporalReference.RGB
    trimap_beta: int = 5
    checkpoint_every: int = 1000
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.lambda_rec < 0:
            raise ValueError(f"lambda_rec must be >= 0, got {self.lambda_rec}")
        if not 0.0 <= self.cond_drop_prob < 1.0:
            raise ValueError(f"cond_drop_prob must be in [0, 1), got {self.cond_drop_prob}")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")
        if not 0 <= self.trimap_beta <= 255:
            raise ValueError(f"trimap_beta must be in [0, 255], got {self.trimap_beta}")


@dataclass
class SampleConfig:
    num_steps: int = 50
    cfg_scale: float = 5.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_steps < 1:
            raise ValueError(f"num_steps must be >= 1, got {self.num_steps}")


def cosine_lr(base: float, step: int, total: int) -> float:
    return base * 0.5 * (1.0 + math.cos(math.pi * step / max(1, total)))


class Trainer:
    """Single-threaded optimizer loop over pre-encoded latents.

    data holds x1 latents (n, f, c, h, w), reference latents (n, c, rh, rw)
    and effect ids (n,), already matching cfg.layout.
    """

    def __init__(
        self,
        model: Denoiser,
        cfg: TrainConfig,
        x1: torch.Tensor,
        refs: torch.Tensor,
        effect_ids: torch.Tensor,
        log_path: str | Path | None = None,
    ):
        self.model = model
        self.cfg = cfg
        dtype = torch.float64 if cfg.dtype == "float64" else torch.float32
        self.model.to(dtype)
        self.x1 = x1.to(dtype)
        self.refs = refs.to(dtype)
        self.effect_ids = effect_ids.to(torch.long)
        self.gen = torch.Generator().manual_seed(cfg.seed)
        self.opt = torch.optim.AdamW(
            model.parameters(),
            lr=cfg.learning_rate,
            betas=(0.9, 0.999),
            eps=1e-8,
            weight_decay=cfg.weight_decay,
        )
        self.step_idx = 0
        self.log_path = Path(log_path) if log_path else None
        if self.log_path:
            self.log_path.write_text("")

    def train_step(self) -> dict:
        cfg = self.cfg
        n = self.x1.shape[0]
        idx = torch.randint(0, n, (cfg.batch_size,), generator=self.gen)
        x1 = self.x1[idx]
        refs = self.refs[idx]
        effects = self.effect_ids[idx]
        x0 = torch.randn(x1.shape, generator=self.gen, dtype=x1.dtype)
        t = torch.rand(cfg.batch_size, generator=self.gen, dtype=x1.dtype)
        drop = torch.rand(cfg.batch_size, generator=self.gen) < cfg.cond_drop_prob
        x_t = interpolate_path(x0, x1, t.view(-1, 1, 1, 1, 1))

        lr = cosine_lr(cfg.learning_rate, self.step_idx, cfg.steps)
        for group in self.opt.param_groups:
            group["lr"] = lr

        v_pred = self.model(x_t, t, effects, refs, drop)
        mse, rec, total = compute_losses(
            v_pred, x0, x1, x_t, t, cfg.layout, cfg.lambda_rec
        )
        if not torch.isfinite(total):
            raise RuntimeError(
                f"non-finite loss at step {self.step_idx}: mse={mse.item()}, rec={rec.item()}"
            )
        self.opt.zero_grad(set_to_none=True)
        total.backward()
        self.opt.step()
        record = {
            "step": self.step_idx,
            "mse": mse.item(),
            "rec": rec.item(),
            "total": total.item(),
            "lr": lr,
        }
        self.step_idx += 1
        return record

    def run(self, run_dir: str | Path | None = None, quiet: bool = False) -> list[dict]:
        records = []
        log_fh = open(self.log_path, "a") if self.log_path else None
        try:
            for _ in range(self.cfg.steps):
                record = self.train_step()
                records.append(record)
                if log_fh:
                    log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                if run_dir and self.cfg.checkpoint_every > 0 and (
                    self.step_idx % self.cfg.checkpoint_every == 0
                    or self.step_idx == self.cfg.steps
                ):
                    self.save(Path(run_dir) / f"ckpt_{self.step_idx:06d}.ttxt")
                if not quiet and (
                    self.step_idx % max(1, self.cfg.steps // 10) == 0 or self.step_idx == 1
                ):
                    print(
                        f"step {self.step_idx}/{self.cfg.steps} "
                        f"total {record['total']:.5f} mse {record['mse']:.5f} rec {record['rec']:.5f}"
                    )
        finally:
            if log_fh:
                log_fh.close()
        return records

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {
            name: p.detach().to(torch.float64).numpy()
            for name, p in self.model.named_parameters()
        }

    def save(self, path: str | Path, extra_config: dict | None = None) -> None:
        config = model_config_dict(self.model)
        config["train"] = {
            "lambda_rec": self.cfg.lambda_rec,
            "layout": self.cfg.layout.value,
            "use_trimap": self.cfg.use_trimap,
            "temporal_reference": self.cfg.temporal_reference.value,
            "trimap_beta": self.cfg.trimap_beta,
            "seed": self.cfg.seed,
            "step": self.step_idx,
        }
        if extra_config:
            config.update(extra_config)
        save_checkpoint(path, config, self.state_tensors())


def model_config_dict(model: Denoiser) -> dict:
    return {
        "denoiser": {
            "patch_size": model.cfg.patch_size,
            "embed_dim": model.cfg.embed_dim,
            "blocks": model.cfg.blocks,
            "heads": model.cfg.heads,
            "mask_mode": model.cfg.mask_mode.value,
        },
        "latent_shape": list(model.latent_shape),
        "ref_shape": list(model.ref_shape),
        "layout": model.layout.value,
        "num_effects": model.effect_emb.num_embeddings,
    }


def model_from_config(config: dict, dtype: torch.dtype = torch.float32) -> Denoiser:
    from .model import MaskMode

    dcfg = DenoiserConfig(
        patch_size=config["denoiser"]["patch_size"],
        embed_dim=config["denoiser"]["embed_dim"],
        blocks=config["denoiser"]["blocks"],
        heads=config["denoiser"]["heads"],
        mask_mode=MaskMode(config["denoiser"]["mask_mode"]),
    )
    model = Denoiser(
        dcfg,
        tuple(config["latent_shape"]),
        tuple(config["ref_shape"]),
        LayoutMode(config["layout"]),
        config["num_effects"],
    )
    return model.to(dtype)


def load_model(path: str | Path, dtype: torch.dtype = torch.float32) -> tuple[Denoiser, dict]:
    from .checkpoint import load_checkpoint

    config, tensors = load_checkpoint(path)
    model = model_from_config(config, dtype=dtype)
    state = {name: torch.from_numpy(arr.copy()).to(dtype) for name, arr in tensors.items()}
    missing = model.load_state_dict(state, strict=False)
    if missing.missing_keys:
        raise ValueError(f"checkpoint missing parameters: {missing.missing_keys}")
    return model, config


def euler_integrate(velocity_fn, x0: torch.Tensor, num_steps: int) -> torch.Tensor:
    """Plain Euler ODE walk from t=0 to t=1 with the given velocity field."""
    x = x0.clone()
    for k in range(num_steps):
        t = torch.tensor(k / num_steps, dtype=x.dtype)
        x = x + velocity_fn(x, t) / num_steps
    return x


def sample_latent(
    model: Denoiser,
    ref_latent: torch.Tensor,
    effect_id: int,
    cfg: SampleConfig,
    x0: torch.Tensor | None = None,
) -> torch.Tensor:
    """Classifier-free-guided Euler sampling of one latent clip."""
    model.eval()
    dtype = next(model.parameters()).dtype
    if x0 is None:
        gen = torch.Generator().manual_seed(cfg.seed)
        x0 = torch.randn((1,) + tuple(model.latent_shape), generator=gen, dtype=dtype)
    ref = ref_latent.to(dtype).view((1,) + tuple(model.ref_shape))
    effects = torch.tensor([effect_id], dtype=torch.long)
    s = cfg.cfg_scale

    def velocity(x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            v_cond = model(x, t, effects.expand(x.shape[0]), ref.expand(x.shape[0], -1, -1, -1))
            if s == 1.0:
                return v_cond
            v_uncond = model(x, t, unconditional=True)
            return v_uncond + s * (v_cond - v_uncond)

    return euler_integrate(velocity, x0, cfg.num_steps)[0]


def sample_euler(
    model: Denoiser,
    ref_latent: torch.Tensor | np.ndarray,
    effect_id: int,
    cfg: SampleConfig,
    layout: LayoutMode,
) -> CompositeClip:
    """Sample a composite clip; fixed seed makes the output bit-deterministic.

    ref_latent is expected in model space (see to_model_space), matching how
    references are fed during training.
    """
    if layout is not model.layout:
        raise ValueError(f"model was trained for layout {model.layout.value}, got {layout.value}")
    ref = torch.as_tensor(np.asarray(ref_latent))
    latent = sample_latent(model, ref, effect_id, cfg)
    return decode_latent(from_model_space(latent.to(torch.float64).numpy()), layout)


def grad_check(
    model: Denoiser,
    batch: dict,
    num_params: int = 220,
    step: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central finite differences.

    Runs in float64; `batch` carries x0, x1, t, effect_ids, ref, drop plus
    layout and lambda_rec.
    """
    model = model.double()
    x0 = batch["x0"].double()
    x1 = batch["x1"].double()
    t = batch["t"].double()
    effect_ids = batch["effect_ids"]
    ref = batch["ref"].double()
    drop = batch.get("drop")
    layout = batch["layout"]
    lambda_rec = batch["lambda_rec"]

    def loss_value() -> torch.Tensor:
        x_t = interpolate_path(x0, x1, t.view(-1, 1, 1, 1, 1))
        v = model(x_t, t, effect_ids, ref, drop)
        _, _, total = compute_losses(v, x0, x1, x_t, t, layout, lambda_rec)
        return total

    model.zero_grad(set_to_none=True)
    loss_value().backward()
    params = list(model.named_parameters())
    # parameters outside this batch's graph (e.g. an unused null token) get zero
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in params
    }

    sizes = [p.numel() for _, p in params]
    total_size = sum(sizes)
    rng = np.random.default_rng(seed)
    picks = sorted(rng.choice(total_size, size=min(num_params, total_size), replace=False))

    offsets = np.cumsum([0] + sizes)
    max_err = 0.0
    with torch.no_grad():
        for flat in picks:
            pi = int(np.searchsorted(offsets, flat, side="right") - 1)
            name, p = params[pi]
            local = flat - offsets[pi]
            orig = p.view(-1)[local].item()
            p.view(-1)[local] = orig + step
            up = loss_value().item()
            p.view(-1)[local] = orig - step
            down = loss_value().item()
            p.view(-1)[local] = orig
            fd = (up - down) / (2 * step)
            ana = grads[name].view(-1)[local].item()
            err = abs(ana - fd) / max(abs(ana), abs(fd), 1e-8)
            max_err = max(max_err, err)
    return max_err
