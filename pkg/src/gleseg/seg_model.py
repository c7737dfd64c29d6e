"""Toy promptable segmentation model: image encoder, prompt encoder, mask decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class Prompt:
    kind: str  # "points" | "box"
    points: list[tuple[int, int, bool]] = field(default_factory=list)
    box: tuple[int, int, int, int] | None = None

    def validate(self, image_size: tuple[int, int]) -> None:
        H, W = image_size
        if self.kind == "points":
            if not self.points:
                raise ValueError("point prompt has no points")
            for r, c, _ in self.points:
                if not (0 <= r < H and 0 <= c < W):
                    raise ValueError(f"point {(r, c)} outside {H}x{W} image")
        elif self.kind == "box":
            if self.box is None:
                raise ValueError("box prompt has no box")
            r0, c0, r1, c1 = self.box
            if not (0 <= r0 <= r1 < H and 0 <= c0 <= c1 < W):
                raise ValueError(f"box {self.box} invalid for {H}x{W} image")
        else:
            raise ValueError(f"unknown prompt kind {self.kind!r}")

    def to_dict(self) -> dict:
        if self.kind == "box":
            return {"kind": "box", "box": list(self.box)}
        return {"kind": "points", "points": [[r, c, int(bool(p))] for r, c, p in self.points]}

    @classmethod
    def from_dict(cls, d: dict) -> "Prompt":
        if d["kind"] == "box":
            return cls("box", box=tuple(int(v) for v in d["box"]))
        pts = [(int(p[0]), int(p[1]), bool(p[2]) if len(p) > 2 else True) for p in d["points"]]
        return cls("points", points=pts)


def fourier_features(coords: torch.Tensor, n_freqs: int = 8) -> torch.Tensor:
    """Fixed sinusoidal map of ``(..., 2)`` coords in [0, 1] to ``(..., 4 * n_freqs)``."""
    freqs = (2.0 ** torch.arange(n_freqs, dtype=coords.dtype)) * math.pi
    args = coords[..., None] * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1).flatten(-2)


class ImageEncoder(nn.Module):
    stride = 8

    def __init__(self, latent_channels: int = 16, widths: tuple[int, int] = (16, 32)):
        super().__init__()
        w0, w1 = widths
        self.net = nn.Sequential(
            nn.Conv2d(3, w0, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(w0, w0, 3, padding=1), nn.GELU(),
            nn.Conv2d(w0, w1, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(w1, w1, 3, padding=1), nn.GELU(),
            nn.Conv2d(w1, latent_channels, 3, stride=2, padding=1),
        )

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ValueError(f"image size {h}x{w} must be divisible by {self.stride}")
        return self.net(x)


class PromptEncoder(nn.Module):
    def __init__(self, dim: int = 32, n_freqs: int = 8):
        super().__init__()
        self.n_freqs = n_freqs
        self.proj = nn.Linear(4 * n_freqs, dim)
        # 0 negative point, 1 positive point, 2 box top-left, 3 box bottom-right
        self.labels = nn.Parameter(torch.randn(4, dim) * 0.1)

    def forward(self, p: Prompt, image_size: tuple[int, int]) -> torch.Tensor:
        p.validate(image_size)
        H, W = image_size
        if p.kind == "points":
            rc = [(r, c) for r, c, _ in p.points]
            label_ids = [1 if pos else 0 for _, _, pos in p.points]
        else:
            r0, c0, r1, c1 = p.box
            rc = [(r0, c0), (r1, c1)]
            label_ids = [2, 3]
        coords = torch.tensor(rc, dtype=self.proj.weight.dtype)
        coords = (coords + 0.5) / torch.tensor([H, W], dtype=coords.dtype)
        return self.proj(fourier_features(coords, self.n_freqs)) + self.labels[label_ids]


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int = 2):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, q, k, v):
        n, lq, d = q.shape
        split = lambda x: x.view(n, x.shape[1], self.heads, -1).transpose(1, 2)  # noqa: E731
        q, k, v = split(self.q(q)), split(self.k(k)), split(self.v(v))
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
        return self.out((att @ v).transpose(1, 2).reshape(n, lq, d))


class MaskDecoder(nn.Module):
    """One two-way attention block between prompt tokens and latent pixels, then x8 upsampling."""

    def __init__(self, latent_channels: int = 16, dim: int = 32, n_freqs: int = 8):
        super().__init__()
        self.latent_channels = latent_channels
        self.n_freqs = n_freqs
        self.mask_token = nn.Parameter(torch.randn(1, dim) * 0.1)
        self.in_proj = nn.Conv2d(latent_channels, dim, 1)
        self.pos_proj = nn.Linear(4 * n_freqs, dim)
        self.self_attn = Attention(dim)
        self.norm1 = nn.LayerNorm(dim)
        self.t2i = Attention(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))
        self.norm3 = nn.LayerNorm(dim)
        self.i2t = Attention(dim)
        self.norm4 = nn.LayerNorm(dim)
        self.up = nn.Sequential(
            nn.ConvTranspose2d(dim, dim // 2, 4, stride=4), nn.GroupNorm(4, dim // 2), nn.GELU(),
            nn.ConvTranspose2d(dim // 2, dim // 4, 2, stride=2), nn.GELU(),
        )
        self.hyper = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim // 4))

    def _pos(self, h: int, w: int, dtype) -> torch.Tensor:
        rr, cc = torch.meshgrid(torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij")
        grid = torch.stack([(rr + 0.5) / h, (cc + 0.5) / w], dim=-1).reshape(h * w, 2)
        return self.pos_proj(fourier_features(grid, self.n_freqs))

    def forward(self, z: torch.Tensor, prompt_emb: torch.Tensor) -> torch.Tensor:
        """``z``: N x C x h x w latents; ``prompt_emb``: N x P x dim. Returns N x 8h x 8w logits."""
        if z.shape[1] != self.latent_channels:
            raise ValueError(f"expected {self.latent_channels} latent channels, got {z.shape[1]}")
        n, _, h, w = z.shape
        img = self.in_proj(z).flatten(2).transpose(1, 2)
        pos = self._pos(h, w, img.dtype)[None]
        tokens = torch.cat([self.mask_token.expand(n, 1, -1), prompt_emb], dim=1)
        tokens = self.norm1(tokens + self.self_attn(tokens, tokens, tokens))
        tokens = self.norm2(tokens + self.t2i(tokens, img + pos, img))
        tokens = self.norm3(tokens + self.mlp(tokens))
        img = self.norm4(img + self.i2t(img + pos, tokens, tokens))
        feat = self.up(img.transpose(1, 2).reshape(n, -1, h, w))
        weights = self.hyper(tokens[:, 0])
        return torch.einsum("nc,nchw->nhw", weights, feat)


class SegModel(nn.Module):
    def __init__(self, latent_channels: int = 16, dim: int = 32):
        super().__init__()
        self.encoder = ImageEncoder(latent_channels)
        self.prompt_encoder = PromptEncoder(dim)
        self.decoder = MaskDecoder(latent_channels, dim)

    @property
    def latent_channels(self) -> int:
        return self.decoder.latent_channels

    def encode_image(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def encode_prompt(self, p: Prompt, image_size: tuple[int, int]) -> torch.Tensor:
        return self.prompt_encoder(p, image_size)

    def encode_prompts(self, prompts: list[Prompt], image_size: tuple[int, int]) -> torch.Tensor:
        embs = [self.encode_prompt(p, image_size) for p in prompts]
        if len({e.shape[0] for e in embs}) != 1:
            raise ValueError("prompts in a batch must have the same number of embeddings")
        return torch.stack(embs)

    def decode_mask(self, z: torch.Tensor, prompt_emb: torch.Tensor) -> torch.Tensor:
        squeeze = z.dim() == 3
        if squeeze:
            z, prompt_emb = z[None], prompt_emb[None]
        out = self.decoder(z, prompt_emb)
        return out[0] if squeeze else out


TRAIN_MODES = ("freeze_all", "decoder_only", "mask_token_only")


def set_trainability(model: SegModel, mode: str) -> None:
    if mode not in TRAIN_MODES:
        raise ValueError(f"unknown trainability mode {mode!r}")
    model.requires_grad_(False)
    if mode == "decoder_only":
        model.decoder.requires_grad_(True)
    elif mode == "mask_token_only":
        model.decoder.mask_token.requires_grad_(True)
