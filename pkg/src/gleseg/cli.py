"""Command-line entry point: synthesis, pretraining, both fine-tuning stages, evaluation."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import cv2
import numpy as np
import torch

from .checkpoint import Checkpoint, CheckpointError
from .config import RunConfig, load_config
from .dataset import (DataError, Prompt, build_folder_corpus, build_synthetic_corpus, load_split, read_image,
                      read_manifest, read_recipes, write_mask)
from .degrade import replay, to_uint8
from .diffusion import gle_enhance
from .evaluate import ModelBundle, evaluate_run, images_to_tensor, write_report
from .train import TrainingError, build_models, gle_config, pretrain, train_stage1, train_stage2

log = logging.getLogger("gleseg")

STAGE_DIRS = {"pretrain": "pretrain", "unet": "unet", "decoder": "decoder"}


class CliError(Exception):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(args.config, args.set or [])
    if args.seed is not None:
        cfg.seed = args.seed
    if args.jobs is not None:
        cfg.jobs = args.jobs
    if getattr(args, "data", None):
        cfg.data_dir = args.data
    if getattr(args, "run_dir", None):
        cfg.run_dir = args.run_dir
    return cfg


def _stage_ckpt(cfg: RunConfig, stage: str) -> Path:
    return Path(cfg.run_dir) / STAGE_DIRS[stage] / "checkpoint.ckpt"


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise CliError(f"missing prerequisite checkpoint {path} ({hint})")
    return path


def _load_models(cfg: RunConfig, path: Path):
    seg, den, schedule = build_models(cfg)
    ckpt = Checkpoint(path)
    ckpt.check_schedule(schedule)
    ckpt.load_into({"seg": seg, "denoiser": den})
    return seg, den, schedule, ckpt


def _split(cfg: RunConfig, split: str):
    root = Path(cfg.data_dir)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise CliError(f"no manifest at {manifest}; run `gleseg synth` first")
    return load_split(root, read_manifest(manifest), split)


# --- commands -------------------------------------------------------------------------

def cmd_synth(args) -> None:
    cfg = _config(args)
    if args.n is not None:
        cfg.data.n = args.n
    if args.size:
        cfg.data.size = list(args.size)
    out = Path(args.out or cfg.data_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise CliError(f"cannot write to {out}: {e}") from None
    if args.images:
        if not args.masks:
            raise CliError("--images needs --masks")
        recs = build_folder_corpus(out, args.images, args.masks, seed=cfg.seed)
    else:
        recs = build_synthetic_corpus(out, cfg.data.n, tuple(cfg.data.size), seed=cfg.seed, jobs=cfg.jobs)
    # the corpus records its own settings, not where it happens to live
    cfg.data_dir = "."
    cfg.dump(out / "config.yaml")
    print(f"wrote {len(recs)} samples to {out}")


def cmd_pretrain(args) -> None:
    cfg = _config(args)
    _set_iters(cfg, args, "pretrain")
    out = _stage_ckpt(cfg, "pretrain").parent
    pretrain(cfg, _split(cfg, "train"), out)
    print(f"wrote {out / 'checkpoint.ckpt'}")


def _set_iters(cfg: RunConfig, args, stage: str) -> None:
    if args.iters is None:
        return
    if stage == "pretrain":
        cfg.pretrain.seg_iters = cfg.pretrain.denoiser_iters = args.iters
    elif stage == "unet":
        cfg.train.unet_iters = args.iters
    else:
        cfg.train.decoder_iters = args.iters


def _train(args, stage: str) -> None:
    cfg = _config(args)
    _set_iters(cfg, args, stage)
    prev = "pretrain" if stage == "unet" else "unet"
    hint = "run `gleseg pretrain` first" if stage == "unet" else "run `gleseg train-unet` first"
    init = Path(args.init) if args.init else _require(_stage_ckpt(cfg, prev), hint)
    _require(init, hint)
    resume = None
    if args.resume:
        seg, den, schedule, resume = _load_models(cfg, _require(Path(args.resume), "resume target"))
    else:
        seg, den, schedule, _ = _load_models(cfg, init)
    out = _stage_ckpt(cfg, stage).parent
    fn = train_stage1 if stage == "unet" else train_stage2
    state = fn(cfg, seg, den, schedule, _split(cfg, "train"), out, resume=resume)
    last = state.losses[-1] if state.losses else float("nan")
    print(f"wrote {out / 'checkpoint.ckpt'} (final loss {last:.6f})")


def cmd_train_unet(args) -> None:
    _train(args, "unet")


def cmd_train_decoder(args) -> None:
    _train(args, "decoder")


def _latest_ckpt(cfg: RunConfig) -> Path:
    for stage in ("decoder", "unet", "pretrain"):
        p = _stage_ckpt(cfg, stage)
        if p.exists():
            return p
    raise CliError(f"no checkpoint under {cfg.run_dir}; pass --ckpt")


def cmd_eval(args) -> None:
    cfg = _config(args)
    if args.levels:
        cfg.eval.levels = args.levels
    if args.prompt:
        cfg.eval.prompt_kind = args.prompt
    path = Path(args.ckpt) if args.ckpt else _latest_ckpt(cfg)
    seg, den, schedule, _ = _load_models(cfg, _require(path, "pass --ckpt"))
    gcfg = gle_config(cfg)
    bundle = ModelBundle(seg, lambda z: gle_enhance(z, den, gcfg, schedule))
    arms = ("baseline",) if args.no_gle else ("gle", "baseline")
    records, summary = evaluate_run(bundle, _split(cfg, cfg.eval.split), tuple(cfg.eval.levels),
                                    cfg.eval.prompt_kind, cfg.seed, arms, cfg.train.n_points, cfg.eval.noise_scale)
    out = Path(args.out or Path(cfg.run_dir) / "eval")
    write_report(out, records, summary, plot=cfg.eval.plot)
    cfg.dump(out / "config.yaml")
    print((out / "summary.md").read_text(), end="")


def _parse_prompt(args, shape) -> Prompt:
    if args.box:
        prompt = Prompt("box", [], tuple(args.box))
    elif args.point:
        prompt = Prompt("points", [(r, c, True) for r, c in args.point], None)
    else:
        prompt = Prompt("points", [(shape[0] // 2, shape[1] // 2, True)], None)
    prompt.validate(shape)
    return prompt


def cmd_enhance(args) -> None:
    cfg = _config(args)
    path = Path(args.ckpt) if args.ckpt else _latest_ckpt(cfg)
    seg, den, schedule, _ = _load_models(cfg, _require(path, "pass --ckpt"))
    img = read_image(args.image)
    prompt = _parse_prompt(args, img.shape[:2])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        z = seg.encode_image(images_to_tensor(img[None]))
        z_hat = z if args.no_gle else gle_enhance(z, den, gle_config(cfg), schedule)
        logits = seg.decode_mask(z_hat, seg.encode_prompts([prompt], img.shape[:2]))
    mask = (torch.sigmoid(logits[0]) > 0.5).numpy().astype(np.uint8)
    np.save(out / "latent.npy", z[0].numpy())
    np.save(out / "enhanced.npy", z_hat[0].numpy())
    write_mask(out / "mask.png", mask)
    overlay = img.copy()
    overlay[mask.astype(bool)] = 0.5 * overlay[mask.astype(bool)] + 0.5 * np.array([1.0, 0.0, 0.0])
    cv2.imwrite(str(out / "overlay.png"), cv2.cvtColor(to_uint8(overlay), cv2.COLOR_RGB2BGR))
    print(f"mask covers {int(mask.sum())} px; outputs in {out}")


def cmd_replay(args) -> None:
    root = Path(args.data)
    records = read_manifest(root / "manifest.jsonl")
    bad, total = [], 0
    cache: dict = {}
    for r in records:
        if r.recipe_path not in cache:
            cache[r.recipe_path] = read_recipes(root / r.recipe_path)
        hq = read_image(root / r.hq_path)
        for level, p in sorted(r.lq_paths.items()):
            total += 1
            recipe = cache[r.recipe_path][(r.id, level)]
            if not np.array_equal(to_uint8(replay(hq, recipe)), to_uint8(read_image(root / p))):
                bad.append(f"{r.id}/{level}")
    if bad:
        raise CliError(f"{len(bad)} of {total} recipes do not reproduce: {', '.join(bad[:10])}")
    print(f"all {total} recipes reproduce bit-exactly")


# --- parser ----------------------------------------------------------------------------

def _pair(text: str) -> tuple[int, int]:
    r, c = text.split(",")
    return int(r), int(c)


def _box(text: str) -> tuple[int, int, int, int]:
    vals = tuple(int(v) for v in text.split(","))
    if len(vals) != 4:
        raise argparse.ArgumentTypeError("box is r0,c0,r1,c1")
    return vals


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-key override, repeatable")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("--data", help="corpus directory (overrides data_dir)")
    common.add_argument("--run-dir", help="run directory (overrides run_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gleseg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="build a degraded segmentation corpus")
    s.add_argument("--out", help="output directory (default: data_dir)")
    s.add_argument("--n", type=int, help="total samples, split 0.8/0.1/0.1")
    s.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))
    s.add_argument("--images", help="degrade these images instead of rendering scenes")
    s.add_argument("--masks", help="masks named like --images")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("pretrain", parents=[common], help="train the stand-in segmenter and denoiser")
    s.add_argument("--iters", type=int)
    s.set_defaults(fn=cmd_pretrain)

    for name, fn in (("train-unet", cmd_train_unet), ("train-decoder", cmd_train_decoder)):
        s = sub.add_parser(name, parents=[common], help=f"fine-tuning stage {1 if 'unet' in name else 2}")
        s.add_argument("--iters", type=int)
        s.add_argument("--init", help="starting checkpoint (default: previous stage in run dir)")
        s.add_argument("--resume", help="continue from an intermediate checkpoint of this stage")
        s.set_defaults(fn=fn)

    s = sub.add_parser("eval", parents=[common], help="per-level IoU/Dice/PA report")
    s.add_argument("--ckpt")
    s.add_argument("--out")
    s.add_argument("--no-gle", action="store_true", help="baseline arm only")
    s.add_argument("--levels", nargs="+", choices=["clear", "LQ1", "LQ2", "LQ3"])
    s.add_argument("--prompt", choices=["points", "box", "noise_box"])
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("enhance", parents=[common], help="enhance one image and segment it")
    s.add_argument("image")
    s.add_argument("--ckpt")
    s.add_argument("--out", required=True)
    s.add_argument("--point", type=_pair, action="append", metavar="R,C")
    s.add_argument("--box", type=_box, metavar="R0,C0,R1,C1")
    s.add_argument("--no-gle", action="store_true")
    s.set_defaults(fn=cmd_enhance)

    s = sub.add_parser("replay", help="check that every recipe reproduces its LQ image")
    s.add_argument("--data", required=True)
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(fn=cmd_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, getattr(args, "jobs", None) or 1))
    try:
        args.fn(args)
    except (CliError, CheckpointError, DataError, TrainingError, ValueError, TypeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
