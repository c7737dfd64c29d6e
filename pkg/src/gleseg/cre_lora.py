"""Channel replicate-and-expand weight surgery, LoRA adapters and the toy denoiser."""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


class ConvWeight(NamedTuple):
    kernel: torch.Tensor  # out x in x k x k
    bias: torch.Tensor | None = None


def _replication_factor(c_pre: int, c_target: int) -> int:
    if c_target <= 0 or c_target % c_pre:
        raise ValueError(f"target channels {c_target} not a positive multiple of {c_pre}")
    return c_target // c_pre


def cre_expand_head(w: ConvWeight, c_target: int) -> ConvWeight:
    """Tile a head conv along its input channels, dividing by the tiling factor.

    On an input made of ``f`` stacked copies of a ``c_pre``-channel tensor the
    expanded conv reproduces the original output.
    """
    f = _replication_factor(w.kernel.shape[1], c_target)
    kernel = w.kernel.repeat(1, f, 1, 1) / f
    bias = None if w.bias is None else w.bias.clone()
    return ConvWeight(kernel, bias)


def cre_expand_tail(w: ConvWeight, c_target: int) -> ConvWeight:
    """Tile a tail conv along its output channels; every output group is a copy."""
    f = _replication_factor(w.kernel.shape[0], c_target)
    kernel = w.kernel.repeat(f, 1, 1, 1)
    bias = None if w.bias is None else w.bias.repeat(f)
    return ConvWeight(kernel, bias)


class LoraAdapter(nn.Module):
    """Low-rank delta ``(alpha / rank) * B @ A`` with ``B`` zero at init."""

    def __init__(self, in_features: int, out_features: int, rank: int = 8, alpha: float | None = None,
                 generator: torch.Generator | None = None):
        super().__init__()
        if rank <= 0:
            raise ValueError("LoRA rank must be positive")
        self.rank = rank
        self.alpha = float(rank if alpha is None else alpha)
        self.A = nn.Parameter(torch.randn(rank, in_features, generator=generator) / math.sqrt(rank))
        self.B = nn.Parameter(torch.zeros(out_features, rank))

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> torch.Tensor:
        return self.scaling * self.B @ self.A


def lora_apply(base_weight: torch.Tensor, adapter: LoraAdapter, x: torch.Tensor) -> torch.Tensor:
    """``x @ (W + delta).T`` evaluated as a base path plus a low-rank path."""
    return x @ base_weight.T + adapter.scaling * ((x @ adapter.A.T) @ adapter.B.T)


class LoraLinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int = 8, alpha: float | None = None,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.base = base
        self.base.requires_grad_(False)
        self.lora = LoraAdapter(base.in_features, base.out_features, rank, alpha, generator)

    def forward(self, x):
        out = self.base(x)
        return out + self.lora.scaling * F.linear(F.linear(x, self.lora.A), self.lora.B)


class LoraConv2d(nn.Module):
    """LoRA on a conv, treating the kernel as an ``out x (in*k*k)`` matrix."""

    def __init__(self, base: nn.Conv2d, rank: int = 8, alpha: float | None = None,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.base = base
        self.base.requires_grad_(False)
        k = base.kernel_size[0]
        self.lora = LoraAdapter(base.in_channels * k * k, base.out_channels, rank, alpha, generator)

    def forward(self, x):
        base = self.base
        a = self.lora.A.view(self.lora.rank, base.in_channels, *base.kernel_size)
        down = F.conv2d(x, a, stride=base.stride, padding=base.padding)
        up = F.conv2d(down, self.lora.B[:, :, None, None])
        return base(x) + self.lora.scaling * up


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(temb_dim, c_out)
        self.norm2 = nn.GroupNorm(8, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(8, channels)
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.out = nn.Linear(channels, channels)

    def forward(self, x):
        n, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        q, k, v = (proj(tokens).view(n, h * w, self.heads, -1).transpose(1, 2)
                   for proj in (self.q, self.k, self.v))
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
        y = (att @ v).transpose(1, 2).reshape(n, h * w, c)
        return x + self.out(y).transpose(1, 2).view(n, c, h, w)


class Denoiser(nn.Module):
    """Small timestep-conditioned noise-prediction U-Net.

    Two stride-2 stages (total factor 4) with a self-attention block at the
    bottleneck. Built for ``native_channels`` inputs; :meth:`expand_channels`
    widens the head/tail by replication.

    Given ``alpha_bar`` the output is preconditioned,
    ``eps_hat = sqrt(1 - abar_t) * x + sqrt(abar_t) * net(x, t)``: the skip term is the
    best linear noise estimate for unit-variance latents and the network fills in
    the rest. The skip is channel-wise, so replicated head/tail equivalence holds.
    """

    ATTN_LAYERS = ("mid_attn.q", "mid_attn.k", "mid_attn.v", "mid_attn.out")

    def __init__(self, native_channels: int = 4, widths: tuple[int, int] = (32, 64), temb_dim: int = 64,
                 alpha_bar=None):
        super().__init__()
        if alpha_bar is not None:
            self.register_buffer("alpha_bar", torch.tensor(np.array(alpha_bar), dtype=torch.float64),
                                 persistent=False)
        else:
            self.alpha_bar = None
        w0, w1 = widths
        self.channels = native_channels
        self.temb_dim = temb_dim
        self.time_mlp = nn.Sequential(nn.Linear(temb_dim, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.head = nn.Conv2d(native_channels, w0, 3, padding=1)
        self.enc0 = ResBlock(w0, w0, temb_dim)
        self.down0 = nn.Conv2d(w0, w1, 3, stride=2, padding=1)
        self.enc1 = ResBlock(w1, w1, temb_dim)
        self.down1 = nn.Conv2d(w1, w1, 3, stride=2, padding=1)
        self.mid0 = ResBlock(w1, w1, temb_dim)
        self.mid_attn = SelfAttention(w1)
        self.mid1 = ResBlock(w1, w1, temb_dim)
        self.up1 = nn.ConvTranspose2d(w1, w1, 2, stride=2)
        self.dec1 = ResBlock(2 * w1, w1, temb_dim)
        self.up0 = nn.ConvTranspose2d(w1, w0, 2, stride=2)
        self.dec0 = ResBlock(2 * w0, w0, temb_dim)
        self.out_norm = nn.GroupNorm(8, w0)
        self.tail = nn.Conv2d(w0, native_channels, 3, padding=1)

    downsample_factor = 4

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x[None]
        n, c, h, w = x.shape
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {c}")
        if h % self.downsample_factor or w % self.downsample_factor:
            raise ValueError(f"spatial size {h}x{w} must be divisible by {self.downsample_factor}")
        t = torch.as_tensor(t, device=x.device).reshape(-1).expand(n)
        temb = self.time_mlp(timestep_embedding(t, self.temb_dim).to(x.dtype))
        h0 = self.enc0(self.head(x), temb)
        h1 = self.enc1(self.down0(h0), temb)
        m = self.mid1(self.mid_attn(self.mid0(self.down1(h1), temb)), temb)
        u1 = self.dec1(torch.cat([self.up1(m), h1], 1), temb)
        u0 = self.dec0(torch.cat([self.up0(u1), h0], 1), temb)
        out = self.tail(F.silu(self.out_norm(u0)))
        if self.alpha_bar is not None:
            if t.min() < 1 or t.max() > len(self.alpha_bar):
                raise ValueError(f"timestep outside [1, {len(self.alpha_bar)}]")
            a = self.alpha_bar[t.long() - 1].to(x.dtype).view(-1, 1, 1, 1)
            out = (1 - a).sqrt() * x + a.sqrt() * out
        return out[0] if squeeze else out

    def expand_channels(self, c_target: int) -> None:
        """Replace head/tail with replicated copies sized for ``c_target`` channels."""
        head = cre_expand_head(ConvWeight(self.head.weight.data, self.head.bias.data), c_target)
        tail = cre_expand_tail(ConvWeight(self.tail.weight.data, self.tail.bias.data), c_target)
        self.head = _conv_from(head)
        self.tail = _conv_from(tail)
        self.channels = c_target

    def install_lora(self, rank: int = 8, alpha: float | None = None, on_head_tail: bool = False,
                     seed: int = 0, head_tail_rank: int | None = None) -> None:
        """Freeze every base weight and wrap the attention projections with adapters.

        head_tail_rank defaults to rank; alpha, when None, follows each adapter's own rank.
        """
        self.requires_grad_(False)
        gen = torch.Generator().manual_seed(seed)
        for name in self.ATTN_LAYERS:
            parent, attr = name.split(".")
            holder = getattr(self, parent)
            setattr(holder, attr, LoraLinear(getattr(holder, attr), rank, alpha, gen))
        if on_head_tail:
            r = head_tail_rank or rank
            self.head = LoraConv2d(self.head, r, alpha, gen)
            self.tail = LoraConv2d(self.tail, r, alpha, gen)

    def lora_parameters(self):
        return [p for n, p in self.named_parameters() if ".lora." in f".{n}"]


def _conv_from(w: ConvWeight) -> nn.Conv2d:
    out_c, in_c, k, _ = w.kernel.shape
    conv = nn.Conv2d(in_c, out_c, k, padding=k // 2, bias=w.bias is not None, dtype=w.kernel.dtype)
    conv.weight.data.copy_(w.kernel)
    if w.bias is not None:
        conv.bias.data.copy_(w.bias)
    conv.requires_grad_(False)
    return conv
