"""Losses, toy pretraining and the two fine-tuning stages."""
from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint, model_tensors, save_checkpoint
from .config import RunConfig
from .cre_lora import Denoiser
from .dataset import LoadedSplit, gt_box_prompt, noise_box_prompt, render_scene, sample_point_prompt
from .degrade import to_uint8
from .diffusion import DiffusionSchedule, GleConfig, build_schedule, forward_noise, gle_enhance
from .evaluate import images_to_tensor
from .seg_model import SegModel, set_trainability

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


class TrainingError(Exception):
    pass


# --- losses -------------------------------------------------------------------

def loss_rec(z_hat: torch.Tensor, z_H: torch.Tensor) -> torch.Tensor:
    if z_hat.shape != z_H.shape:
        raise ValueError(f"shape mismatch: {tuple(z_hat.shape)} vs {tuple(z_H.shape)}")
    return F.mse_loss(z_hat, z_H)


def dice_loss(logits: torch.Tensor, gt: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    p = torch.sigmoid(logits).flatten(-2)
    g = gt.to(p.dtype).flatten(-2)
    per = 1 - (2 * (p * g).sum(-1) + smooth) / (p.sum(-1) + g.sum(-1) + smooth)
    return per.mean()


def focal_loss(logits: torch.Tensor, gt: torch.Tensor, alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    p = torch.sigmoid(logits)
    g = gt.to(p.dtype)
    p_t = (p * g + (1 - p) * (1 - g)).clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    return (-alpha * (1 - p_t) ** gamma * torch.log(p_t)).mean()


def loss_seg(logits: torch.Tensor, gt: torch.Tensor, focal_alpha: float = 0.25, focal_gamma: float = 2.0,
             dice_smooth: float = 1.0) -> torch.Tensor:
    """Dice plus focal loss; dice is per mask then averaged over the batch."""
    if logits.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(gt.shape)}")
    return dice_loss(logits, gt, dice_smooth) + focal_loss(logits, gt, focal_alpha, focal_gamma)


# --- model construction ---------------------------------------------------------

def _native_models(cfg: RunConfig) -> tuple[SegModel, Denoiser, DiffusionSchedule]:
    m, s = cfg.model, cfg.schedule
    schedule = build_schedule(s.T, s.beta_start, s.beta_end, s.kind)
    torch.manual_seed(cfg.seed)
    seg = SegModel(m.latent_channels, m.prompt_dim)
    den = Denoiser(m.native_channels, tuple(m.denoiser_widths), m.temb_dim,
                   alpha_bar=schedule.alpha_bar if m.precondition else None)
    return seg, den, schedule


def _adapt(den: Denoiser, cfg: RunConfig) -> None:
    m = cfg.model
    den.expand_channels(m.latent_channels)
    den.install_lora(m.lora_rank, m.lora_alpha, m.lora_on_head_tail, seed=cfg.seed,
                     head_tail_rank=m.lora_head_tail_rank)


def build_models(cfg: RunConfig) -> tuple[SegModel, Denoiser, DiffusionSchedule]:
    """Fresh models in their final layout: expanded head/tail and LoRA installed."""
    seg, den, schedule = _native_models(cfg)
    _adapt(den, cfg)
    return seg, den, schedule


def gle_config(cfg: RunConfig) -> GleConfig:
    return GleConfig(cfg.gle.gamma, cfg.gle.timestep)


# --- shared loop machinery --------------------------------------------------------

@dataclass
class LoopState:
    losses: list = field(default_factory=list)
    rows: list = field(default_factory=list)


def _batch_rng(seed: int, stage: str, it: int) -> np.random.Generator:
    return np.random.default_rng([seed, sum(map(ord, stage)), it])


def _optimizer(params, lr: float, weight_decay: float) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=lr, betas=(0.9, 0.999), weight_decay=weight_decay)


def optimizer_tensors(opt: torch.optim.Optimizer, names: dict[int, str]) -> dict:
    out = {}
    for p, st in opt.state.items():
        name = names[id(p)]
        for key, val in st.items():
            out[f"optim.{name}.{key}"] = (torch.as_tensor(val).detach().clone(), False)
    return out


def load_optimizer(opt: torch.optim.Optimizer, ckpt: Checkpoint, named_params: list[tuple[str, torch.nn.Parameter]]) -> None:
    for name, p in named_params:
        keys = {k.rsplit(".", 1)[1]: v for k, v in ckpt.tensors.items() if k.rsplit(".", 1)[0] == f"optim.{name}"}
        if keys:
            opt.state[p] = {k: v.clone().to(p.dtype) if k != "step" else v.clone().to(torch.float32)
                            for k, v in keys.items()}


def _write_trace(path: Path, rows: list) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iteration", "loss", "lr", "wall_time"])
        w.writerows(rows)


def _run_loop(stage: str, cfg: RunConfig, iters: int, lr: float, named_params, step_fn, save_fn,
              out_dir: Path | None, resume: Checkpoint | None = None, ids=None) -> LoopState:
    params = [p for _, p in named_params]
    opt = _optimizer(params, lr, cfg.train.weight_decay)
    start = 1
    state = LoopState()
    if resume is not None:
        load_optimizer(opt, resume, named_params)
        start = int(resume.meta.get("iteration", 0)) + 1
    names = {id(p): n for n, p in named_params}
    t0 = time.perf_counter()
    for it in range(start, iters + 1):
        rng = _batch_rng(cfg.seed, stage, it)
        opt.zero_grad(set_to_none=True)
        loss, batch_ids = step_fn(rng)
        if not torch.isfinite(loss):
            raise TrainingError(f"{stage}: non-finite loss at iteration {it} (samples {batch_ids})")
        loss.backward()
        opt.step()
        val = float(loss.detach())
        state.losses.append(val)
        state.rows.append([it, repr(val), repr(lr), f"{time.perf_counter() - t0:.3f}"])
        if out_dir is not None and cfg.train.ckpt_every and it % cfg.train.ckpt_every == 0 and it != iters:
            save_fn(out_dir / f"checkpoint_{it:06d}.ckpt", optimizer_tensors(opt, names), it)
    if out_dir is not None:
        save_fn(out_dir / "checkpoint.ckpt", optimizer_tensors(opt, names), iters)
        _write_trace(out_dir / "loss.csv", state.rows)
        cfg.dump(out_dir / "config.yaml")
    return state


# --- pretraining (stand-ins for the pretrained segmenter and diffusion U-Net) ---------

def random_prompts(masks: np.ndarray, rng: np.random.Generator, n_points: int = 3):
    """One prompt per mask; the kind is shared across the batch."""
    kind = ("points", "points", "box", "noise_box")[int(rng.integers(4))]
    if kind == "points":
        return [sample_point_prompt(m, n_points, rng) for m in masks]
    if kind == "box":
        return [gt_box_prompt(m) for m in masks]
    return [noise_box_prompt(m, 0.2, rng) for m in masks]


def scene_stream(seed: int, it: int, batch_size: int, size) -> tuple[np.ndarray, np.ndarray]:
    """A fresh batch of rendered clear scenes, quantized like the stored corpus."""
    rng = _batch_rng(seed, "scene_stream", it)
    pairs = [render_scene(rng, tuple(size)) for _ in range(batch_size)]
    imgs = np.stack([to_uint8(img) for img, _ in pairs]).astype(np.float64) / 255.0
    return imgs, np.stack([m for _, m in pairs])


def pretrain_segmenter(seg: SegModel, data: LoadedSplit, cfg: RunConfig) -> list[float]:
    """Train the whole toy segmenter on clear images only.

    With ``pretrain.seg_source == "stream"`` every batch is freshly rendered, so
    the stand-in never sees the fine-tuning images; ``"train"`` reuses the
    clear training split instead.
    """
    p = cfg.pretrain
    if p.seg_source not in ("stream", "train"):
        raise ValueError(f"pretrain.seg_source must be 'stream' or 'train', got {p.seg_source!r}")
    seg.requires_grad_(True)
    params = list(seg.parameters())
    opt = torch.optim.AdamW(params, lr=p.seg_lr, weight_decay=0.0)
    images = images_to_tensor(data.hq)
    all_masks = torch.from_numpy(data.masks).float()
    size = data.masks.shape[1:]
    trace = []
    for it in range(1, p.seg_iters + 1):
        rng = _batch_rng(cfg.seed, "pretrain_seg", it)
        if p.seg_source == "stream":
            imgs, np_masks = scene_stream(cfg.seed, it, p.seg_batch_size, size)
            x, masks = images_to_tensor(imgs), torch.from_numpy(np_masks).float()
        else:
            idx = rng.choice(len(images), size=min(p.seg_batch_size, len(images)), replace=False)
            x, masks, np_masks = images[idx], all_masks[idx], data.masks[idx]
        prompts = random_prompts(np_masks, rng, cfg.train.n_points)
        opt.zero_grad(set_to_none=True)
        logits = seg.decode_mask(seg.encode_image(x), seg.encode_prompts(prompts, size))
        loss = loss_seg(logits, masks, cfg.train.focal_alpha, cfg.train.focal_gamma, cfg.train.dice_smooth)
        loss.backward()
        opt.step()
        trace.append(float(loss.detach()))
        if it % 500 == 0:
            log.info("pretrain segmenter it=%d loss=%.4f", it, trace[-1])
    set_trainability(seg, "freeze_all")
    return trace


def native_latents(images: np.ndarray, channels: int = 4, seed: int = 0) -> torch.Tensor:
    """Generic ``channels``-wide latents for denoiser pretraining.

    8x8 pixel patches are projected onto a fixed random orthonormal basis and
    standardized; the result plays the role of a VAE latent space unrelated to
    the segmenter's.
    """
    x = F.pixel_unshuffle(images_to_tensor(images).double(), 8)
    basis, _ = torch.linalg.qr(torch.randn(x.shape[1], channels, generator=torch.Generator().manual_seed(seed),
                                           dtype=torch.float64))
    z = torch.einsum("nchw,ck->nkhw", x - x.mean(dim=(0, 2, 3), keepdim=True), basis)
    return (z / z.std(dim=(0, 2, 3), keepdim=True)).float()


def pretrain_denoiser(den: Denoiser, latents: torch.Tensor, schedule: DiffusionSchedule, cfg: RunConfig) -> list[float]:
    """Standard noise-prediction training of the native-width U-Net."""
    p = cfg.pretrain
    den.requires_grad_(True)
    opt = torch.optim.AdamW(den.parameters(), lr=p.denoiser_lr, weight_decay=0.0)
    trace = []
    for it in range(1, p.denoiser_iters + 1):
        rng = _batch_rng(cfg.seed, "pretrain_den", it)
        idx = rng.choice(len(latents), size=min(p.denoiser_batch_size, len(latents)), replace=False)
        z = latents[idx]
        t = int(rng.integers(1, schedule.T + 1))
        gen = torch.Generator().manual_seed(int(rng.integers(2 ** 62)))
        eps = torch.randn(z.shape, generator=gen)
        opt.zero_grad(set_to_none=True)
        loss = F.mse_loss(den(forward_noise(z, t, eps, schedule), t), eps)
        loss.backward()
        opt.step()
        trace.append(float(loss.detach()))
        if it % 500 == 0:
            log.info("pretrain denoiser it=%d loss=%.4f", it, trace[-1])
    den.requires_grad_(False)
    return trace


def pretrain(cfg: RunConfig, train: LoadedSplit, out_dir: str | os.PathLike | None = None):
    """Build the frozen starting point: segmenter on clear images, denoiser on native latents."""
    seg, den, schedule = _native_models(cfg)
    seg_trace = pretrain_segmenter(seg, train, cfg)
    den_trace = pretrain_denoiser(den, native_latents(train.hq, cfg.model.native_channels, cfg.seed), schedule, cfg)
    _adapt(den, cfg)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        tensors = model_tensors({"seg": seg, "denoiser": den})
        save_checkpoint(out / "checkpoint.ckpt", tensors, schedule, {"stage": "pretrain", "iteration": 0})
        with open(out / "loss.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["iteration", "segmenter_loss", "denoiser_loss"])
            for i in range(max(len(seg_trace), len(den_trace))):
                w.writerow([i + 1, repr(seg_trace[i]) if i < len(seg_trace) else "",
                            repr(den_trace[i]) if i < len(den_trace) else ""])
        cfg.dump(out / "config.yaml")
    return seg, den, schedule


# --- fine-tuning stages ------------------------------------------------------------

@torch.no_grad()
def encode_all(seg: SegModel, images: np.ndarray, batch_size: int = 64) -> torch.Tensor:
    return torch.cat([seg.encode_image(images_to_tensor(images[i:i + batch_size]))
                      for i in range(0, len(images), batch_size)])


def _stage_tensors(seg, den, trainable: set[str]) -> dict:
    tensors = model_tensors({"seg": seg, "denoiser": den})
    return {k: (v, k in trainable) for k, (v, _) in tensors.items()}


def train_stage1(cfg: RunConfig, seg: SegModel, den: Denoiser, schedule: DiffusionSchedule, data: LoadedSplit,
                 out_dir: str | os.PathLike | None = None, resume: Checkpoint | None = None) -> LoopState:
    """Fit only the LoRA tensors so enhanced LQ latents match HQ latents."""
    t = cfg.train
    set_trainability(seg, "freeze_all")
    den.requires_grad_(False)
    for p in den.lora_parameters():
        p.requires_grad_(True)
    named = [(f"denoiser.{n}", p) for n, p in den.named_parameters() if p.requires_grad]
    if not 0.0 <= t.clear_fraction <= 1.0:
        raise ValueError(f"train.clear_fraction must lie in [0, 1], got {t.clear_fraction}")
    z_H = encode_all(seg, data.hq)
    # "clear" pairs an HQ latent with itself, teaching the enhancer to leave clean inputs alone
    z_L = {lv: z_H if lv == "clear" else encode_all(seg, data.lq[lv]) for lv in t.levels}
    z_L["clear"] = z_H
    gcfg = gle_config(cfg)

    def step(rng):
        idx = rng.choice(len(z_H), size=min(t.batch_size, len(z_H)), replace=False)
        lv = [t.levels[int(i)] for i in rng.integers(len(t.levels), size=len(idx))]
        lv = ["clear" if u < t.clear_fraction else l for u, l in zip(rng.random(len(idx)), lv)]
        zl = torch.stack([z_L[l][i] for l, i in zip(lv, idx)])
        return loss_rec(gle_enhance(zl, den, gcfg, schedule), z_H[idx]), [data.ids[i] for i in idx]

    trainable = {k for k, _ in _names(named)}

    def save(path, optim, it):
        tensors = _stage_tensors(seg, den, trainable)
        tensors.update(optim)
        save_checkpoint(path, tensors, schedule, {"stage": "unet", "iteration": it})

    out = _prepare(out_dir)
    state = _run_loop("unet", cfg, t.unet_iters, t.lr, named, step, save, out, resume)
    den.requires_grad_(False)
    return state


def train_stage2(cfg: RunConfig, seg: SegModel, den: Denoiser, schedule: DiffusionSchedule, data: LoadedSplit,
                 out_dir: str | os.PathLike | None = None, resume: Checkpoint | None = None) -> LoopState:
    """Fit the decoder (or its mask token) on enhanced latents with the segmentation loss."""
    t = cfg.train
    den.requires_grad_(False)
    set_trainability(seg, t.decoder_mode)
    named = [(f"seg.{n}", p) for n, p in seg.named_parameters() if p.requires_grad]
    if not named:
        raise TrainingError(f"decoder mode {t.decoder_mode!r} leaves nothing to train")
    gcfg = gle_config(cfg)
    with torch.no_grad():
        z_hat = {lv: torch.cat([gle_enhance(z, den, gcfg, schedule)
                                for z in encode_all(seg, data.lq[lv]).split(64)]) for lv in t.levels}
    masks = torch.from_numpy(data.masks).float()
    size = data.masks.shape[1:]

    def step(rng):
        idx = rng.choice(len(masks), size=min(t.batch_size, len(masks)), replace=False)
        lv = [t.levels[int(i)] for i in rng.integers(len(t.levels), size=len(idx))]
        z = torch.stack([z_hat[l][i] for l, i in zip(lv, idx)])
        prompts = [sample_point_prompt(data.masks[i], t.n_points, rng) for i in idx]
        logits = seg.decode_mask(z, seg.encode_prompts(prompts, size))
        loss = loss_seg(logits, masks[idx], t.focal_alpha, t.focal_gamma, t.dice_smooth)
        return loss, [data.ids[i] for i in idx]

    trainable = {k for k, _ in _names(named)}

    def save(path, optim, it):
        tensors = _stage_tensors(seg, den, trainable)
        tensors.update(optim)
        save_checkpoint(path, tensors, schedule, {"stage": "decoder", "iteration": it})

    out = _prepare(out_dir)
    state = _run_loop("decoder", cfg, t.decoder_iters, t.decoder_lr, named, step, save, out, resume)
    set_trainability(seg, "freeze_all")
    return state


def _names(named):
    from .checkpoint import archive_name
    return [(archive_name(n), p) for n, p in named]


def _prepare(out_dir) -> Path | None:
    if out_dir is None:
        return None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out
