"""Synthetic-shapes corpus, HQ/LQ manifests and prompt sampling from masks."""
from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import cv2
import numpy as np

from .degrade import LEVELS, DegradationRecipe, degrade_image, derive_seed, to_uint8
from .seg_model import Prompt

SPLITS = ("train", "val", "test")


class DataError(Exception):
    pass


@dataclass
class SampleRecord:
    id: str
    hq_path: str
    lq_paths: dict
    mask_path: str
    recipe_path: str
    split: str


def read_image(path: str | os.PathLike) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise DataError(f"cannot read image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0


def write_image(path: str | os.PathLike, img: np.ndarray) -> None:
    if not cv2.imwrite(str(path), cv2.cvtColor(to_uint8(img), cv2.COLOR_RGB2BGR)):
        raise OSError(f"cannot write {path}")


def read_mask(path: str | os.PathLike) -> np.ndarray:
    m = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if m is None:
        raise DataError(f"cannot read mask {path}")
    return (m > 127).astype(np.uint8)


def write_mask(path: str | os.PathLike, mask: np.ndarray) -> None:
    if not cv2.imwrite(str(path), (mask > 0).astype(np.uint8) * 255):
        raise OSError(f"cannot write {path}")


# --- rendering -------------------------------------------------------------

SUPERSAMPLE = 4


def _coverage(size: tuple[int, int], inside) -> np.ndarray:
    """Fraction of each pixel covered by the region ``inside(rows, cols)``."""
    H, W = size
    s = SUPERSAMPLE
    rr = (np.arange(H * s) + 0.5) / s
    cc = (np.arange(W * s) + 0.5) / s
    hit = inside(rr[:, None], cc[None, :]).astype(np.float64)
    return hit.reshape(H, s, W, s).mean(axis=(1, 3))


def render_disk(size, center, radius):
    cy, cx = center
    return _coverage(size, lambda r, c: (r - cy) ** 2 + (c - cx) ** 2 <= radius ** 2)


def render_ring(size, center, r_out, r_in):
    cy, cx = center
    return _coverage(size, lambda r, c: ((r - cy) ** 2 + (c - cx) ** 2 <= r_out ** 2)
                     & ((r - cy) ** 2 + (c - cx) ** 2 >= r_in ** 2))


def render_rect(size, top_left, extent):
    (r0, c0), (h, w) = top_left, extent
    return _coverage(size, lambda r, c: (r >= r0) & (r < r0 + h) & (c >= c0) & (c < c0 + w))


def _texture(rng: np.random.Generator, size: tuple[int, int], cell: int, amp: float) -> np.ndarray:
    H, W = size
    coarse = rng.uniform(-amp, amp, size=(-(-H // cell), -(-W // cell)))
    return np.kron(coarse, np.ones((cell, cell)))[:H, :W]


def _random_shape(rng: np.random.Generator, size: tuple[int, int]) -> np.ndarray:
    H, W = size
    m = min(H, W)
    kind = ("disk", "rect", "ring")[int(rng.integers(3))]
    if kind == "disk":
        r = rng.uniform(0.12, 0.25) * m
        return render_disk(size, (rng.uniform(r, H - r), rng.uniform(r, W - r)), r)
    if kind == "ring":
        r = rng.uniform(0.16, 0.28) * m
        return render_ring(size, (rng.uniform(r, H - r), rng.uniform(r, W - r)), r, r * rng.uniform(0.35, 0.6))
    h, w = rng.uniform(0.2, 0.5, size=2) * m
    return render_rect(size, (rng.uniform(0, H - h), rng.uniform(0, W - w)), (h, w))


def render_scene(rng: np.random.Generator, size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Textured background with 1-3 shapes; returns (image, mask of the front shape)."""
    H, W = size
    c1, c2 = rng.uniform(0.15, 0.85, size=(2, 3))
    theta = rng.uniform(0, 2 * np.pi)
    rr, cc = np.meshgrid(np.linspace(0, 1, H), np.linspace(0, 1, W), indexing="ij")
    ramp = 0.5 + 0.5 * np.clip(np.cos(theta) * (rr - 0.5) + np.sin(theta) * (cc - 0.5), -1, 1)
    img = c1 + (c2 - c1) * ramp[..., None]
    img = img + _texture(rng, size, 1, 0.12)[..., None]
    n_shapes = int(rng.integers(1, 4))
    cover = None
    for _ in range(n_shapes):
        cover = _random_shape(rng, size)
        color = rng.uniform(0.05, 0.95, size=3)
        fill = color + _texture(rng, size, int(rng.integers(1, 3)), 0.08)[..., None]
        img = img * (1 - cover[..., None]) + fill * cover[..., None]
    return np.clip(img, 0.0, 1.0), (cover >= 0.5).astype(np.uint8)


# --- corpus ---------------------------------------------------------------

def split_counts(n: int, fractions=(0.8, 0.1, 0.1)) -> dict:
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return {"train": n_train, "val": n_val, "test": n - n_train - n_val}


def _synth_one(args) -> tuple[str, str, dict]:
    index, split, size, seed, out_dir = args
    sid = f"{split}_{index:05d}"
    rng = np.random.default_rng(derive_seed(seed, index))
    img, mask = render_scene(rng, size)
    d = Path(out_dir) / split
    write_image(d / f"{sid}_hq.png", img)
    write_mask(d / f"{sid}_mask.png", mask)
    hq8 = read_image(d / f"{sid}_hq.png")
    recipes = {}
    for li, level in enumerate(LEVELS):
        lq, recipe = degrade_image(hq8, level, derive_seed(seed, index, li + 1))
        write_image(d / f"{sid}_{level.lower()}.png", lq)
        recipes[level] = recipe.to_json()
    return sid, split, recipes


def build_synthetic_corpus(out_dir: str | os.PathLike, n: int, size: tuple[int, int] = (64, 64), seed: int = 0,
                           jobs: int = 1) -> list[SampleRecord]:
    """Render ``n`` scenes, degrade each at every level and write a manifest.

    Degradation runs on the 8-bit HQ PNG so replaying a recipe against the
    stored HQ file reproduces the stored LQ files.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_dir)
    counts = split_counts(n)
    tasks, index = [], 0
    for split in SPLITS:
        (out / split).mkdir(parents=True, exist_ok=True)
        for _ in range(counts[split]):
            tasks.append((index, split, tuple(size), seed, str(out)))
            index += 1
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_synth_one, tasks))
    else:
        results = [_synth_one(t) for t in tasks]
    records = []
    recipe_lines = {s: [] for s in SPLITS}
    for sid, split, recipes in results:
        for level, line in recipes.items():
            recipe_lines[split].append(json.dumps({"id": sid, **json.loads(line)}, sort_keys=True))
        records.append(SampleRecord(
            id=sid,
            hq_path=f"{split}/{sid}_hq.png",
            lq_paths={lv: f"{split}/{sid}_{lv.lower()}.png" for lv in LEVELS},
            mask_path=f"{split}/{sid}_mask.png",
            recipe_path=f"recipes_{split}.jsonl",
            split=split,
        ))
    for split, lines in recipe_lines.items():
        (out / f"recipes_{split}.jsonl").write_text("".join(l + "\n" for l in lines))
    write_manifest(out / "manifest.jsonl", records)
    return records


def build_folder_corpus(out_dir: str | os.PathLike, image_dir: str | os.PathLike, mask_dir: str | os.PathLike,
                        seed: int = 0, split: str = "test") -> list[SampleRecord]:
    """Degrade user images (with same-named masks) into a manifest-backed split."""
    out = Path(out_dir)
    (out / split).mkdir(parents=True, exist_ok=True)
    records, lines = [], []
    for index, path in enumerate(sorted(Path(image_dir).glob("*.png"))):
        sid = path.stem
        mask = read_mask(Path(mask_dir) / path.name)
        img = read_image(path)
        if img.shape[:2] != mask.shape:
            raise DataError(f"{sid}: image and mask sizes differ")
        write_image(out / split / f"{sid}_hq.png", img)
        write_mask(out / split / f"{sid}_mask.png", mask)
        hq8 = read_image(out / split / f"{sid}_hq.png")
        for li, level in enumerate(LEVELS):
            lq, recipe = degrade_image(hq8, level, derive_seed(seed, index, li + 1))
            write_image(out / split / f"{sid}_{level.lower()}.png", lq)
            lines.append(json.dumps({"id": sid, **json.loads(recipe.to_json())}, sort_keys=True))
        records.append(SampleRecord(sid, f"{split}/{sid}_hq.png",
                                    {lv: f"{split}/{sid}_{lv.lower()}.png" for lv in LEVELS},
                                    f"{split}/{sid}_mask.png", f"recipes_{split}.jsonl", split))
    (out / f"recipes_{split}.jsonl").write_text("".join(l + "\n" for l in lines))
    write_manifest(out / "manifest.jsonl", records)
    return records


def write_manifest(path: str | os.PathLike, records: list[SampleRecord]) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def read_manifest(path: str | os.PathLike) -> list[SampleRecord]:
    with open(path) as f:
        return [SampleRecord(**json.loads(line)) for line in f if line.strip()]


def read_recipes(path: str | os.PathLike) -> dict[tuple[str, str], DegradationRecipe]:
    out = {}
    with open(path) as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                out[(d["id"], d["level"])] = DegradationRecipe(d["level"], int(d["seed"]), d["ops"])
    return out


def check_records(root: str | os.PathLike, records: list[SampleRecord]) -> None:
    """Raise :class:`DataError` listing every record with missing files."""
    root = Path(root)
    missing = []
    for r in records:
        paths = [r.hq_path, r.mask_path, r.recipe_path, *r.lq_paths.values()]
        if not all((root / p).exists() for p in paths):
            missing.append(r.id)
    if missing:
        raise DataError(f"missing files for records: {', '.join(missing)}")


# --- prompts ---------------------------------------------------------------

def sample_point_prompt(mask: np.ndarray, k: int = 3, seed: int | np.random.Generator = 0) -> Prompt:
    fg = np.argwhere(mask > 0)
    if len(fg) < k:
        raise DataError(f"mask has {len(fg)} foreground pixels, need {k}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(fg), size=k, replace=False)
    return Prompt("points", points=[(int(fg[i, 0]), int(fg[i, 1]), True) for i in idx])


def gt_box_prompt(mask: np.ndarray) -> Prompt:
    fg = np.argwhere(mask > 0)
    if len(fg) == 0:
        raise DataError("empty mask has no bounding box")
    (r0, c0), (r1, c1) = fg.min(axis=0), fg.max(axis=0)
    return Prompt("box", box=(int(r0), int(c0), int(r1), int(c1)))


def noise_box_prompt(mask: np.ndarray, noise_scale: float = 0.2, seed: int | np.random.Generator = 0) -> Prompt:
    """Jitter the GT box centre by up to ``s`` half-extents and its size by ``1 +- s``."""
    if noise_scale < 0:
        raise ValueError("noise_scale must be >= 0")
    box = gt_box_prompt(mask)
    if noise_scale == 0:
        return box
    H, W = mask.shape
    r0, c0, r1, c1 = box.box
    h, w = r1 - r0 + 1, c1 - c0 + 1
    cy, cx = (r0 + r1) / 2, (c0 + c1) / 2
    rng = np.random.default_rng(seed)
    s = noise_scale
    cx += rng.uniform(-s * w / 2, s * w / 2)
    cy += rng.uniform(-s * h / 2, s * h / 2)
    w *= rng.uniform(1 - s, 1 + s)
    h *= rng.uniform(1 - s, 1 + s)
    nr0 = int(np.clip(round(cy - (h - 1) / 2), 0, H - 1))
    nr1 = int(np.clip(round(cy + (h - 1) / 2), 0, H - 1))
    nc0 = int(np.clip(round(cx - (w - 1) / 2), 0, W - 1))
    nc1 = int(np.clip(round(cx + (w - 1) / 2), 0, W - 1))
    return Prompt("box", box=(min(nr0, nr1), min(nc0, nc1), max(nr0, nr1), max(nc0, nc1)))


PROMPT_KINDS = ("points", "box", "noise_box")


def make_prompt(kind: str, mask: np.ndarray, seed: int, n_points: int = 3, noise_scale: float = 0.2) -> Prompt:
    if kind == "points":
        return sample_point_prompt(mask, n_points, seed)
    if kind == "box":
        return gt_box_prompt(mask)
    if kind == "noise_box":
        return noise_box_prompt(mask, noise_scale, seed)
    raise ValueError(f"unknown prompt kind {kind!r}")


# --- in-memory split ---------------------------------------------------------

@dataclass
class LoadedSplit:
    ids: list[str]
    hq: np.ndarray  # N x H x W x 3
    lq: dict  # level -> N x H x W x 3
    masks: np.ndarray  # N x H x W


def load_split(root: str | os.PathLike, records: list[SampleRecord], split: str) -> LoadedSplit:
    root = Path(root)
    recs = [r for r in records if r.split == split]
    if not recs:
        raise DataError(f"no records in split {split!r}")
    check_records(root, recs)
    hq = np.stack([read_image(root / r.hq_path) for r in recs])
    lq = {lv: np.stack([read_image(root / r.lq_paths[lv]) for r in recs]) for lv in LEVELS}
    masks = np.stack([read_mask(root / r.mask_path) for r in recs])
    return LoadedSplit([r.id for r in recs], hq, lq, masks)
