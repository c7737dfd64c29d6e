from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from gleseg.cre_lora import (ConvWeight, Denoiser, LoraAdapter, LoraConv2d, LoraLinear, cre_expand_head,
                             cre_expand_tail, lora_apply)

FIXTURE = np.load(Path(__file__).parent / "fixtures" / "pretrained_head_tail.npz")


def naive_conv(x, kernel, bias=None):
    """Zero-padded 'same' correlation by explicit summation (C x H x W input)."""
    x, kernel = np.asarray(x, dtype=np.float64), np.asarray(kernel, dtype=np.float64)
    c_out, c_in, k, _ = kernel.shape
    p = k // 2
    _, H, W = x.shape
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    out = np.zeros((c_out, H, W))
    for o in range(c_out):
        for i in range(H):
            for j in range(W):
                out[o, i, j] = np.sum(xp[:, i:i + k, j:j + k] * kernel[o])
        if bias is not None:
            out[o] += bias[o]
    return out


def fixture_weight(part, k):
    return ConvWeight(torch.from_numpy(FIXTURE[f"{part}_k{k}"]), torch.from_numpy(FIXTURE[f"{part}_b"]))


def test_head_factor_and_rejects_indivisible():
    w = fixture_weight("head", 3)
    assert cre_expand_head(w, 256).kernel.shape == (32, 256, 3, 3)
    with pytest.raises(ValueError):
        cre_expand_head(w, 18)
    with pytest.raises(ValueError):
        cre_expand_tail(fixture_weight("tail", 3), 10)


@pytest.mark.parametrize("k", [1, 3])
@pytest.mark.parametrize("f", [2, 4, 64])
def test_head_tiled_input_equivalence(k, f):
    w = fixture_weight("head", k)
    big = cre_expand_head(w, 4 * f)
    x = np.random.default_rng(f + k).normal(size=(4, 6, 6))
    tiled = np.tile(x, (f, 1, 1))
    ref = naive_conv(x, w.kernel.numpy(), w.bias.numpy())
    out = F.conv2d(torch.from_numpy(tiled)[None], big.kernel, big.bias, padding=k // 2)[0].numpy()
    assert np.allclose(out, ref, atol=1e-6)
    # the oracle itself agrees on the expanded weights
    assert np.allclose(naive_conv(tiled, big.kernel.numpy(), big.bias.numpy()), ref, atol=1e-6)


def test_head_toy_sixteen_channels_random_input_oracle():
    w = fixture_weight("head", 3)
    big = cre_expand_head(w, 16)
    x = np.random.default_rng(7).normal(size=(16, 5, 5))
    out = F.conv2d(torch.from_numpy(x)[None], big.kernel, big.bias, padding=1)[0].numpy()
    assert np.allclose(out, naive_conv(x, big.kernel.numpy(), big.bias.numpy()), atol=1e-6)


@pytest.mark.parametrize("k", [1, 3])
@pytest.mark.parametrize("f", [2, 4, 64])
def test_tail_group_identity(k, f):
    w = fixture_weight("tail", k)
    big = cre_expand_tail(w, 4 * f)
    x = np.random.default_rng(f).normal(size=(32, 5, 5))
    ref = naive_conv(x, w.kernel.numpy(), w.bias.numpy())
    out = F.conv2d(torch.from_numpy(x)[None], big.kernel, big.bias, padding=k // 2)[0].numpy()
    for g in range(f):
        assert np.allclose(out[4 * g:4 * g + 4], ref, atol=1e-6)
        assert np.array_equal(out[4 * g:4 * g + 4], out[0:4])


def test_lora_init_and_rank_errors():
    a = LoraAdapter(10, 6)
    assert a.rank == 8 and a.scaling == 1.0
    assert torch.count_nonzero(a.B) == 0
    assert a.delta().shape == (6, 10)
    with pytest.raises(ValueError):
        LoraAdapter(10, 6, rank=0)


def test_lora_apply_zero_b_is_base_only():
    g = torch.Generator().manual_seed(0)
    W = torch.randn(6, 10, generator=g, dtype=torch.float64)
    x = torch.randn(5, 10, generator=g, dtype=torch.float64)
    a = LoraAdapter(10, 6, rank=4).double()
    assert torch.equal(lora_apply(W, a, x), x @ W.T)


@pytest.mark.parametrize("rank", [1, 4, 8, 16])
def test_lora_apply_matches_merged_weight(rank):
    g = torch.Generator().manual_seed(rank)
    W = torch.randn(12, 20, generator=g, dtype=torch.float64)
    x = torch.randn(7, 20, generator=g, dtype=torch.float64)
    a = LoraAdapter(20, 12, rank=rank, alpha=2.0 * rank).double()
    with torch.no_grad():
        a.B.normal_(generator=g)
    merged = x @ (W + a.delta()).T
    assert torch.allclose(lora_apply(W, a, x), merged, atol=1e-6)


def test_lora_linear_and_conv_match_merged():
    g = torch.Generator().manual_seed(1)
    lin = torch.nn.Linear(8, 6).double()
    ll = LoraLinear(lin, rank=3).double()
    conv = torch.nn.Conv2d(4, 5, 3, padding=1).double()
    lc = LoraConv2d(conv, rank=2).double()
    with torch.no_grad():
        ll.lora.B.normal_(generator=g)
        lc.lora.B.normal_(generator=g)
    x = torch.randn(3, 8, generator=g, dtype=torch.float64)
    assert torch.allclose(ll(x), x @ (lin.weight + ll.lora.delta()).T + lin.bias, atol=1e-10)
    xi = torch.randn(2, 4, 6, 6, generator=g, dtype=torch.float64)
    merged = conv.weight + lc.lora.delta().view_as(conv.weight)
    assert torch.allclose(lc(xi), F.conv2d(xi, merged, conv.bias, padding=1), atol=1e-10)
    assert not any(p.requires_grad for p in lin.parameters())


def make_denoiser(channels=16, native=4, lora=False, head_tail=False):
    torch.manual_seed(0)
    d = Denoiser(native, (32, 64), 64)
    if channels != native:
        d.expand_channels(channels)
    if lora:
        d.install_lora(8, on_head_tail=head_tail)
    return d


def test_denoiser_shape_and_divisibility():
    d = make_denoiser()
    x = torch.randn(16, 32, 32)
    assert d(x, 500).shape == x.shape
    with pytest.raises(ValueError, match="divisible by 4"):
        d(torch.randn(16, 10, 12), 1)
    with pytest.raises(ValueError):
        d(torch.randn(8, 8, 8), 1)


@pytest.mark.parametrize("head_tail", [False, True])
def test_denoiser_lora_transparent_until_trained(head_tail):
    d = make_denoiser()
    # CPU conv kernels differ between grad and no-grad parameters, so compare frozen to frozen
    d.requires_grad_(False)
    x = torch.randn(2, 16, 8, 8)
    before = d(x, 1000)
    d.install_lora(8, on_head_tail=head_tail)
    assert torch.equal(d(x, 1000), before)
    with torch.no_grad():
        d.mid_attn.v.lora.B.add_(0.1)
    assert not torch.equal(d(x, 1000), before)


def test_denoiser_timestep_is_live():
    d = make_denoiser()
    x = torch.randn(16, 8, 8)
    assert (d(x, 1) - d(x, 1000)).abs().max() > 0


def test_denoiser_deterministic():
    d = make_denoiser(lora=True)
    x = torch.randn(16, 8, 8)
    assert torch.equal(d(x, 10), d(x, 10))


def test_expanded_denoiser_reproduces_native_on_tiled_input():
    d = make_denoiser(channels=4)
    x = torch.randn(1, 4, 8, 8, dtype=torch.float64)
    d = d.double()
    native = d(x, 700)
    d.expand_channels(16)
    out = d(x.repeat(1, 4, 1, 1), 700)
    for g in range(4):
        assert torch.allclose(out[:, 4 * g:4 * g + 4], native, atol=1e-10)


@pytest.mark.parametrize("head_tail", [False, True])
def test_lora_gradients_match_finite_differences(head_tail):
    torch.manual_seed(5)
    d = Denoiser(4, (32, 64), 64)
    d.install_lora(4, on_head_tail=head_tail)
    d = d.double()
    g = torch.Generator().manual_seed(9)
    with torch.no_grad():
        for p in d.lora_parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * 0.1)
    x = torch.randn(2, 4, 8, 8, generator=g, dtype=torch.float64)
    target = torch.randn(2, 4, 8, 8, generator=g, dtype=torch.float64)

    def loss_fn():
        return ((d(x, 300) - target) ** 2).mean()

    loss_fn().backward()
    h = 1e-3
    checked = 0
    for name, p in d.named_parameters():
        if not p.requires_grad:
            continue
        assert name.endswith(("lora.A", "lora.B"))
        flat = p.data.view(-1)
        for idx in torch.randperm(flat.numel(), generator=g)[:3]:
            orig = flat[idx].item()
            flat[idx] = orig + h
            lp = loss_fn().item()
            flat[idx] = orig - h
            lm = loss_fn().item()
            flat[idx] = orig
            fd = (lp - lm) / (2 * h)
            an = p.grad.view(-1)[idx].item()
            assert abs(an - fd) <= 1e-3 * max(abs(fd), 1e-6), (name, an, fd)
            checked += 1
    assert checked >= 24


def test_frozen_base_after_lora_step():
    d = make_denoiser(lora=True, head_tail=True)
    base = {n: p.detach().clone() for n, p in d.named_parameters() if not p.requires_grad}
    opt = torch.optim.AdamW(d.lora_parameters(), lr=1e-2, weight_decay=0.01)
    for _ in range(3):
        opt.zero_grad()
        (d(torch.randn(2, 16, 8, 8), 1000) ** 2).mean().backward()
        opt.step()
    for n, p in d.named_parameters():
        if n in base:
            assert torch.equal(p, base[n]), n
    assert any(torch.count_nonzero(p) for n, p in d.named_parameters() if n.endswith("lora.B"))


# --- preconditioned output -------------------------------------------------------------

def precond_pair():
    from gleseg.diffusion import build_schedule
    sch = build_schedule()
    torch.manual_seed(3)
    plain = Denoiser(4, (32, 64), 64).double()
    torch.manual_seed(3)
    pre = Denoiser(4, (32, 64), 64, alpha_bar=sch.alpha_bar).double()
    return sch, plain, pre


@pytest.mark.parametrize("t", [1, 250, 1000])
def test_preconditioning_formula(t):
    sch, plain, pre = precond_pair()
    x = torch.randn(2, 4, 8, 8, dtype=torch.float64)
    a = sch.abar(t)
    want = np.sqrt(1 - a) * x + np.sqrt(a) * plain(x, t)
    assert torch.allclose(pre(x, t), want, atol=1e-12)


def test_preconditioning_per_sample_timesteps():
    sch, _, pre = precond_pair()
    x = torch.randn(2, 4, 8, 8, dtype=torch.float64)
    both = pre(x, torch.tensor([5, 900]))
    assert torch.allclose(both[0], pre(x[:1], 5)[0], atol=1e-12)
    assert torch.allclose(both[1], pre(x[1:], 900)[0], atol=1e-12)
    with pytest.raises(ValueError):
        pre(x, 0)


@pytest.mark.parametrize("f", [2, 4])
def test_preconditioned_expansion_keeps_group_identity(f):
    _, _, pre = precond_pair()
    x = torch.randn(1, 4, 8, 8, dtype=torch.float64)
    native = pre(x, 1000)
    pre.expand_channels(4 * f)
    out = pre(x.repeat(1, f, 1, 1), 1000)
    for g in range(f):
        assert torch.allclose(out[:, 4 * g:4 * g + 4], native, atol=1e-10)


def test_preconditioning_is_not_a_parameter():
    _, plain, pre = precond_pair()
    assert [n for n, _ in pre.named_parameters()] == [n for n, _ in plain.named_parameters()]
    assert "alpha_bar" not in pre.state_dict()
