"""Multi-level second-order degradation synthesis with replayable recipes.

Images are float arrays ``H x W x 3`` (RGB) in ``[0, 1]``. Every random draw
is recorded in a :class:`DegradationRecipe`; noise realizations are tied to
per-op seeds so a recipe replays bit-exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy import special

LEVELS = ("LQ1", "LQ2", "LQ3")
LEVEL_FACTOR = {"LQ1": 1, "LQ2": 2, "LQ3": 4}
KERNEL_SIZES = tuple(range(7, 22, 2))
BLUR_FAMILIES = ("gaussian", "generalized_gaussian", "plateau")
RESIZE_ALGOS = {"area": cv2.INTER_AREA, "bilinear": cv2.INTER_LINEAR, "bicubic": cv2.INTER_CUBIC}

SINC_PROB = 0.1
SECOND_BLUR_SKIP_PROB = 0.2
GAUSSIAN_NOISE_PROB = 0.5
GRAY_NOISE_PROB = 0.4
SIGMA_RANGE = (0.2, 3.0)
GEN_BETA_RANGE = (0.5, 4.0)
PLATEAU_BETA_RANGE = (1.0, 2.0)
NOISE_SIGMA_RANGE = (1.0, 30.0)
POISSON_SCALE_RANGE = (0.05, 3.0)
JPEG_RANGE = (30, 95)
SINC_CUTOFF_RANGE = (np.pi / 3, np.pi)


@dataclass
class BlurKernel:
    kind: str
    size: int
    sigma: float | None
    beta: float | None
    weights: np.ndarray = field(repr=False)


@dataclass
class DegradationRecipe:
    level: str
    seed: int
    ops: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"level": self.level, "seed": self.seed, "ops": self.ops}, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "DegradationRecipe":
        d = json.loads(line)
        return cls(d["level"], int(d["seed"]), d["ops"])

    @property
    def downsample_factor(self) -> int:
        return LEVEL_FACTOR[self.level]


def _radius2(size: int) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - size // 2
    return ax[:, None] ** 2 + ax[None, :] ** 2


def make_blur_kernel(kind: str, size: int, sigma: float | None = None, beta: float | None = None,
                     cutoff: float | None = None) -> BlurKernel:
    if size % 2 == 0 or not 3 <= size <= 21:
        raise ValueError(f"kernel size must be odd and <= 21, got {size}")
    r2 = _radius2(size)
    if kind == "sinc":
        if cutoff is None or not 0 < cutoff <= np.pi:
            raise ValueError("sinc kernel needs a cutoff in (0, pi]")
        r = np.sqrt(r2)
        with np.errstate(divide="ignore", invalid="ignore"):
            w = cutoff * special.j1(cutoff * r) / (2 * np.pi * r)
        w[size // 2, size // 2] = cutoff ** 2 / (4 * np.pi)
    else:
        if sigma is None or not SIGMA_RANGE[0] <= sigma <= SIGMA_RANGE[1]:
            raise ValueError(f"sigma {sigma} outside {SIGMA_RANGE}")
        q = r2 / (2.0 * sigma ** 2)
        if kind == "gaussian":
            w = np.exp(-q)
        elif kind == "generalized_gaussian":
            if beta is None or not GEN_BETA_RANGE[0] <= beta <= GEN_BETA_RANGE[1]:
                raise ValueError(f"beta {beta} outside {GEN_BETA_RANGE}")
            w = np.exp(-q ** beta)
        elif kind == "plateau":
            if beta is None or not PLATEAU_BETA_RANGE[0] <= beta <= PLATEAU_BETA_RANGE[1]:
                raise ValueError(f"beta {beta} outside {PLATEAU_BETA_RANGE}")
            w = 1.0 / (1.0 + q ** beta)
        else:
            raise ValueError(f"unknown kernel kind {kind!r}")
    return BlurKernel(kind, size, sigma, beta, w / w.sum())


def apply_blur(img: np.ndarray, k: BlurKernel | np.ndarray) -> np.ndarray:
    """Correlate each channel with the kernel (reflect-101 borders), clip to [0, 1]."""
    weights = k.weights if isinstance(k, BlurKernel) else np.asarray(k, dtype=np.float64)
    if weights.shape[0] > min(img.shape[:2]):
        raise ValueError(f"kernel {weights.shape[0]} larger than image {img.shape[:2]}")
    out = cv2.filter2D(img.astype(np.float64), cv2.CV_64F, weights, borderType=cv2.BORDER_REFLECT_101)
    return np.clip(out.reshape(img.shape), 0.0, 1.0)


def random_resize(img: np.ndarray, scale: float, algo: str, size: tuple[int, int] | None = None) -> np.ndarray:
    """Resize by ``scale`` (or to an explicit ``(h, w)``), clip to [0, 1]."""
    if algo not in RESIZE_ALGOS:
        raise ValueError(f"unknown resize algorithm {algo!r}")
    if size is None:
        if not scale > 0:
            raise ValueError("scale must be positive")
        size = (int(round(img.shape[0] * scale)), int(round(img.shape[1] * scale)))
    h, w = size
    if h < 1 or w < 1:
        raise ValueError(f"degenerate output size {size}")
    if (h, w) == img.shape[:2]:
        return np.clip(img.astype(np.float64), 0.0, 1.0)
    out = cv2.resize(img.astype(np.float64), (w, h), interpolation=RESIZE_ALGOS[algo])
    return np.clip(out.reshape((h, w) + img.shape[2:]), 0.0, 1.0)


def _luma(img: np.ndarray) -> np.ndarray:
    return img @ np.array([0.299, 0.587, 0.114])


def add_gaussian_noise(img: np.ndarray, sigma_255: float, gray: bool, seed: int | np.random.Generator = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    sigma = sigma_255 / 255.0
    if gray:
        noise = rng.standard_normal(img.shape[:2])[..., None] * sigma
    else:
        noise = rng.standard_normal(img.shape) * sigma
    return np.clip(img + noise, 0.0, 1.0)


def add_poisson_noise(img: np.ndarray, scale: float, gray: bool, seed: int | np.random.Generator = 0) -> np.ndarray:
    """Photon-count noise with ``L = 255 * scale`` counts at full intensity."""
    rng = np.random.default_rng(seed)
    L = 255.0 * scale
    base = _luma(img)[..., None] if gray else img
    base = np.clip(base, 0.0, 1.0)
    vals = rng.poisson(base * L) / L
    return np.clip(img + (vals - base), 0.0, 1.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def jpeg_compress(img: np.ndarray, quality: int) -> np.ndarray:
    if not JPEG_RANGE[0] <= quality <= JPEG_RANGE[1]:
        raise ValueError(f"JPEG quality {quality} outside {JPEG_RANGE}")
    ok, buf = cv2.imencode(".jpg", cv2.cvtColor(to_uint8(img), cv2.COLOR_RGB2BGR),
                           [cv2.IMWRITE_JPEG_QUALITY, int(quality)])
    if not ok:
        raise OSError("JPEG encoding failed")
    dec = cv2.imdecode(buf, cv2.IMREAD_COLOR)
    if dec is None:
        raise OSError("JPEG decoding failed")
    return cv2.cvtColor(dec, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0


def _sample_blur(rng: np.random.Generator, max_size: int) -> dict:
    sizes = [s for s in KERNEL_SIZES if s <= max_size] or [3]
    size = int(rng.choice(sizes))
    if rng.random() < SINC_PROB:
        return {"kind": "sinc", "size": size, "sigma": None, "beta": None,
                "cutoff": float(rng.uniform(*SINC_CUTOFF_RANGE))}
    kind = BLUR_FAMILIES[int(rng.integers(len(BLUR_FAMILIES)))]
    sigma = float(rng.uniform(*SIGMA_RANGE))
    beta = None
    if kind == "generalized_gaussian":
        beta = float(rng.uniform(*GEN_BETA_RANGE))
    elif kind == "plateau":
        beta = float(rng.uniform(*PLATEAU_BETA_RANGE))
    return {"kind": kind, "size": size, "sigma": sigma, "beta": beta, "cutoff": None}


def _sample_noise(rng: np.random.Generator) -> dict:
    gray = bool(rng.random() < GRAY_NOISE_PROB)
    op_seed = int(rng.integers(2 ** 63))
    if rng.random() < GAUSSIAN_NOISE_PROB:
        return {"op": "gaussian_noise", "params": {"sigma_255": float(rng.uniform(*NOISE_SIGMA_RANGE)),
                                                   "gray": gray, "seed": op_seed}}
    return {"op": "poisson_noise", "params": {"scale": float(rng.uniform(*POISSON_SCALE_RANGE)),
                                              "gray": gray, "seed": op_seed}}


def _algo(rng: np.random.Generator) -> str:
    return list(RESIZE_ALGOS)[int(rng.integers(len(RESIZE_ALGOS)))]


def sample_recipe(level: str, seed: int, shape: tuple[int, int]) -> DegradationRecipe:
    """Draw every degradation parameter for one image without touching pixels."""
    if level not in LEVEL_FACTOR:
        raise ValueError(f"unknown level {level!r}")
    d = LEVEL_FACTOR[level]
    rng = np.random.default_rng(seed)
    H, W = shape
    target = (max(1, int(round(H / d))), max(1, int(round(W / d))))
    ops: list[dict] = []
    cur = (H, W)
    for rnd in (1, 2):
        if rnd == 2 and rng.random() < SECOND_BLUR_SKIP_PROB:
            ops.append({"op": "skip", "params": {"stage": "blur", "round": rnd}})
        else:
            ops.append({"op": "blur", "params": _sample_blur(rng, min(cur))})
        if rnd == 1:
            scale = float(rng.uniform(1.0 / d, 1.0))
            size = (max(1, int(round(H * scale))), max(1, int(round(W * scale))))
        else:
            scale = target[0] / cur[0]
            size = target
        ops.append({"op": "resize", "params": {"scale": scale, "size": list(size), "algo": _algo(rng),
                                               "factor": d}})
        cur = size
        ops.append(_sample_noise(rng))
        ops.append({"op": "jpeg", "params": {"quality": int(rng.integers(JPEG_RANGE[0], JPEG_RANGE[1] + 1))}})
    ops.append({"op": "resize", "params": {"scale": H / cur[0], "size": [H, W], "algo": _algo(rng),
                                           "factor": 1}})
    return DegradationRecipe(level, int(seed), ops)


def apply_op(img: np.ndarray, op: dict) -> np.ndarray:
    kind, p = op["op"], op["params"]
    if kind == "skip":
        return img
    if kind == "blur":
        return apply_blur(img, make_blur_kernel(p["kind"], p["size"], p.get("sigma"), p.get("beta"), p.get("cutoff")))
    if kind == "resize":
        return random_resize(img, p["scale"], p["algo"], size=tuple(p["size"]))
    if kind == "gaussian_noise":
        return add_gaussian_noise(img, p["sigma_255"], p["gray"], p["seed"])
    if kind == "poisson_noise":
        return add_poisson_noise(img, p["scale"], p["gray"], p["seed"])
    if kind == "jpeg":
        return jpeg_compress(img, p["quality"])
    raise ValueError(f"unknown op {kind!r}")


def replay(img: np.ndarray, recipe: DegradationRecipe) -> np.ndarray:
    out = np.asarray(img, dtype=np.float64)
    for op in recipe.ops:
        out = apply_op(out, op)
    return out


def degrade_image(img: np.ndarray, level: str, seed: int) -> tuple[np.ndarray, DegradationRecipe]:
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an H x W x 3 image")
    recipe = sample_recipe(level, seed, img.shape[:2])
    return replay(img, recipe), recipe


def derive_seed(global_seed: int, *keys: int) -> int:
    """Stable 63-bit seed for one (image, level) stream."""
    return int(np.random.SeedSequence([global_seed, *keys]).generate_state(1, np.uint64)[0] >> 1)
