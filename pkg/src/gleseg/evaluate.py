"""Segmentation metrics, Laplacian quality score and per-level evaluation reports."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import cv2
import numpy as np
import torch

from .dataset import LoadedSplit, make_prompt
from .degrade import derive_seed

EVAL_LEVELS = ("clear", "LQ1", "LQ2", "LQ3")
LAPLACIAN = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)


def _pair(pred, gt):
    pred, gt = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def iou(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def dice(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    total = pred.sum() + gt.sum()
    if total == 0:
        return 1.0
    return float(2 * np.logical_and(pred, gt).sum() / total)


def pixel_accuracy(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float((pred == gt).mean())


def to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img @ np.array([0.299, 0.587, 0.114])
    return img


def quality_score(img: np.ndarray) -> float:
    """Variance of the 4-neighbour Laplacian of the luma plane (reflect-101 borders)."""
    lap = cv2.filter2D(to_gray(img), cv2.CV_64F, LAPLACIAN, borderType=cv2.BORDER_REFLECT_101)
    return float(lap.var())


@dataclass
class EvalRecord:
    sample_id: str
    arm: str
    level: str
    prompt_kind: str
    iou: float
    dice: float
    pa: float
    quality: float


@dataclass
class ModelBundle:
    """What evaluation needs: a segmenter plus an optional latent enhancer."""
    seg: torch.nn.Module
    enhance: Callable[[torch.Tensor], torch.Tensor] | None = None


def images_to_tensor(imgs: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(imgs.transpose(0, 3, 1, 2))).float()


@torch.no_grad()
def predict_masks(bundle: ModelBundle, imgs: np.ndarray, prompts, use_gle: bool, batch_size: int = 32) -> np.ndarray:
    seg = bundle.seg
    H, W = imgs.shape[1:3]
    out = []
    for i in range(0, len(imgs), batch_size):
        z = seg.encode_image(images_to_tensor(imgs[i:i + batch_size]))
        if use_gle and bundle.enhance is not None:
            z = bundle.enhance(z)
        emb = seg.encode_prompts(prompts[i:i + batch_size], (H, W))
        out.append((torch.sigmoid(seg.decode_mask(z, emb)) > 0.5).numpy())
    return np.concatenate(out).astype(np.uint8)


def evaluate_run(bundle: ModelBundle, data: LoadedSplit, levels=EVAL_LEVELS, prompt_kind: str = "points",
                 seed: int = 0, arms=("gle", "baseline"), n_points: int = 3,
                 noise_scale: float = 0.2) -> tuple[list[EvalRecord], dict]:
    """Score every image at every level, with and without enhancement.

    Prompts depend only on ``(seed, image index)`` so every level and arm sees
    the same prompt for a given image.
    """
    prompts = [make_prompt(prompt_kind, m, derive_seed(seed, i, 99), n_points, noise_scale)
               for i, m in enumerate(data.masks)]
    records: list[EvalRecord] = []
    for level in [lv for lv in EVAL_LEVELS if lv in levels]:
        imgs = data.hq if level == "clear" else data.lq[level]
        quality = [quality_score(im) for im in imgs]
        for arm in arms:
            preds = predict_masks(bundle, imgs, prompts, use_gle=(arm == "gle"))
            for sid, p, g, q in zip(data.ids, preds, data.masks, quality):
                records.append(EvalRecord(sid, arm, level, prompt_kind, iou(p, g), dice(p, g),
                                          pixel_accuracy(p, g), q))
    return records, summarize(records)


def summarize(records: list[EvalRecord]) -> dict:
    summary: dict = {}
    for arm in sorted({r.arm for r in records}):
        rows = {}
        for level in EVAL_LEVELS:
            sel = [r for r in records if r.arm == arm and r.level == level]
            if not sel:
                continue
            rows[level] = {
                "n": len(sel),
                "iou": float(np.mean([r.iou for r in sel])),
                "dice": float(np.mean([r.dice for r in sel])),
                "pa": float(np.mean([r.pa for r in sel])),
                "quality": float(np.mean([r.quality for r in sel])),
            }
        summary[arm] = rows
    return summary


def write_report(out_dir: str | os.PathLike, records: list[EvalRecord], summary: dict, plot: bool = True) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    fields = list(EvalRecord.__dataclass_fields__)
    with open(out / "records.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in asdict(r).items()})
    with open(out / "density.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample_id", "arm", "level", "quality", "iou"])
        for r in records:
            w.writerow([r.sample_id, r.arm, r.level, repr(r.quality), repr(r.iou)])
    (out / "summary.md").write_text(summary_table(summary))
    if plot:
        plot_density(records, out / "density.png")


def summary_table(summary: dict) -> str:
    levels = [lv for lv in reversed(EVAL_LEVELS) if any(lv in rows for rows in summary.values())]
    head = "| Arm | " + " | ".join(f"{lv} IoU | {lv} Dice | {lv} PA" for lv in levels) + " |\n"
    sep = "|---|" + "---|" * (3 * len(levels)) + "\n"
    body = ""
    for arm, rows in summary.items():
        cells = []
        for lv in levels:
            m = rows.get(lv)
            cells += [f"{m['iou']:.4f}", f"{m['dice']:.4f}", f"{m['pa']:.4f}"] if m else ["-"] * 3
        body += f"| {arm} | " + " | ".join(cells) + " |\n"
    return head + sep + body


def plot_density(records: list[EvalRecord], path: str | os.PathLike) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 4), sharey=True)
    for ax, arm in zip(axes, ("baseline", "gle")):
        sel = [r for r in records if r.arm == arm]
        if sel:
            ax.scatter([r.quality for r in sel], [r.iou for r in sel], s=8, alpha=0.5)
        ax.set_title(arm)
        ax.set_xlabel("Laplacian variance")
    axes[0].set_ylabel("IoU")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def read_records(path: str | os.PathLike) -> list[EvalRecord]:
    with open(path) as f:
        rows = list(csv.DictReader(f))
    return [EvalRecord(r["sample_id"], r["arm"], r["level"], r["prompt_kind"], float(r["iou"]),
                       float(r["dice"]), float(r["pa"]), float(r["quality"])) for r in rows]
