"""Building blocks of the multimodal transformer.

Tensors are laid out (batch, length, channels) unless noted otherwise.
"""
from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

LN_EPS = 1e-6


def layer_norm(x: torch.Tensor) -> torch.Tensor:
    # no affine parameters: scale and bias come from the condition
    return F.layer_norm(x, x.shape[-1:], eps=LN_EPS)


def modulate(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    return layer_norm(x) * gamma + beta


def ada_ln_global(y: torch.Tensor, c_g: torch.Tensor, w_gamma, w_beta) -> torch.Tensor:
    """LayerNorm(y) scaled and shifted by one (B, h) condition shared by all tokens."""
    return modulate(y, w_gamma(c_g).unsqueeze(-2), w_beta(c_g).unsqueeze(-2))


def gating_global(y: torch.Tensor, c_g: torch.Tensor, w_g) -> torch.Tensor:
    return y * w_g(c_g).unsqueeze(-2)


def conv1d_same(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None) -> torch.Tensor:
    """Length-preserving 1D convolution of (B, L, C_in) with replicate padding."""
    pad = weight.shape[-1] // 2
    x = x.transpose(1, 2)
    if pad:
        x = F.pad(x, (pad, pad), mode="replicate")
    return F.conv1d(x, weight, bias).transpose(1, 2)


class ConvMLP(nn.Module):
    """conv(k) -> SiLU -> conv(k), length preserving.

    Edges use replicate padding so a constant sequence maps to a constant
    sequence. Each conv reaches ``kernel // 2`` tokens to either side.
    """

    def __init__(self, dim: int, hidden: int, kernel: int = 3, out_dim: int | None = None):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError("ConvMLP kernel must be odd")
        self.kernel = kernel
        self.fc1 = nn.Conv1d(dim, hidden, kernel)
        self.fc2 = nn.Conv1d(hidden, out_dim or dim, kernel)

    def _conv(self, conv: nn.Conv1d, x: torch.Tensor) -> torch.Tensor:
        pad = self.kernel // 2
        if pad:
            x = F.pad(x, (pad, pad), mode="replicate")
        return conv(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x.transpose(1, 2)
        x = self._conv(self.fc2, F.silu(self._conv(self.fc1, x)))
        return x.transpose(1, 2)


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int, out_dim: int | None = None):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim or dim)

    def forward(self, x):
        return self.fc2(F.silu(self.fc1(x)))


class SameConv1d(nn.Conv1d):
    """Conv1d on (B, L, C) input with replicate padding of ``kernel // 2``."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return conv1d_same(x, self.weight, self.bias)


class Modulation(nn.Module):
    """Produces ``n`` (gamma, beta or gate) vectors of width h from a condition.

    Weights start at zero; ``gamma_slots`` mark chunks whose bias starts at
    one so that the modulated LayerNorm initially passes its input through.
    """

    def __init__(self, dim: int, n: int, gamma_slots: Sequence[int] = ()):
        super().__init__()
        self.n = n
        self.gamma_slots = tuple(gamma_slots)
        self.linear = nn.Linear(dim, n * dim)
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)
        dim = self.linear.in_features
        with torch.no_grad():
            for slot in self.gamma_slots:
                self.linear.bias[slot * dim:(slot + 1) * dim] = 1.0

    def forward(self, c: torch.Tensor) -> list[torch.Tensor]:
        return list(self.linear(F.silu(c)).chunk(self.n, dim=-1))


def fourier_time_embed(t: torch.Tensor, dim: int, max_period: float = 10000.0,
                       scale: float = 1000.0) -> torch.Tensor:
    """Sinusoidal features of ``t`` at geometrically spaced frequencies.

    Output layout is ``[cos(...), sin(...)]``, each half ``dim // 2`` wide.
    ``t`` in [0, 1] is multiplied by ``scale`` before encoding.
    """
    t = torch.as_tensor(t)
    if not t.is_floating_point():
        t = t.double()
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = (t * scale).unsqueeze(-1) * freqs
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def rope_angles(positions: torch.Tensor, head_dim: int, rate_scale: float = 1.0,
                base: float = 10000.0) -> torch.Tensor:
    """Rotation angle table (L, head_dim // 2) for the given token positions."""
    if head_dim % 2:
        raise ValueError(f"rotary embeddings need an even head dimension, got {head_dim}")
    positions = torch.as_tensor(positions, dtype=torch.float64)
    theta = base ** (-torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    return (positions * rate_scale).unsqueeze(-1) * theta


def rope_rotate(x: torch.Tensor, angles: torch.Tensor) -> torch.Tensor:
    cos = torch.cos(angles).to(x.dtype)
    sin = torch.sin(angles).to(x.dtype)
    x_even, x_odd = x[..., 0::2], x[..., 1::2]
    out = torch.stack((x_even * cos - x_odd * sin, x_even * sin + x_odd * cos), dim=-1)
    return out.flatten(-2)


def rope_apply(x: torch.Tensor, positions, rate_scale: float = 1.0,
               base: float = 10000.0) -> torch.Tensor:
    """Rotate dimension pairs (2k, 2k+1) of token p by theta_k * p * rate_scale."""
    if x.shape[-1] % 2:
        raise ValueError(f"rotary embeddings need an even head dimension, got {x.shape[-1]}")
    return rope_rotate(x, rope_angles(positions, x.shape[-1], rate_scale, base))


def joint_attention(qs: Sequence[torch.Tensor], ks: Sequence[torch.Tensor],
                    vs: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Scaled dot-product attention over the concatenation of several streams.

    Inputs are (B, heads, L_i, d) per stream; the output is split back
    into the same partition.
    """
    widths = {q.shape[-1] for q in qs} | {k.shape[-1] for k in ks}
    if len(widths) != 1:
        raise ValueError(f"attention width mismatch across streams: {sorted(widths)}")
    lengths = [q.shape[-2] for q in qs]
    q = torch.cat(list(qs), dim=-2)
    k = torch.cat(list(ks), dim=-2)
    v = torch.cat(list(vs), dim=-2)
    out = F.scaled_dot_product_attention(q, k, v)
    return list(out.split(lengths, dim=-2))


def split_heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    b, l, c = x.shape
    return x.view(b, l, n_heads, c // n_heads).transpose(1, 2)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, l, d = x.shape
    return x.transpose(1, 2).reshape(b, l, h * d)
