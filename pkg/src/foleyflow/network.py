"""Multimodal flow-prediction transformer.

Audio latents, visual tokens and text tokens are projected to a shared width,
mixed by ``n_mm_blocks`` joint-attention blocks and refined by
``n_single_blocks`` audio-only blocks. A global condition (timestep plus
pooled visual/text tokens) modulates the visual and text streams; the audio
stream is modulated per token by the frame-aligned sync condition.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .layers import (MLP, ConvMLP, Modulation, SameConv1d, fourier_time_embed,
                     joint_attention, merge_heads, modulate, rope_angles, rope_rotate,
                     split_heads)
from .syncmod import (Conditions, EmptyTokens, SyncProjection, compute_frame_condition,
                      substitute_missing)


class Stream(nn.Module):
    """Per-modality weights of one transformer block.

    A ``pre_only`` stream only contributes queries, keys and values; it is
    used for the visual and text streams of the last joint block, whose
    outputs nothing downstream reads.
    """

    def __init__(self, cfg: ModelConfig, ffn: str, pre_only: bool = False):
        super().__init__()
        h = cfg.hidden_dim
        self.pre_only = pre_only
        if pre_only:
            self.mod = Modulation(h, 2, gamma_slots=(0,))  # gamma1, beta1
        else:
            # gamma1, beta1, gate1, gamma2, beta2, gate2
            self.mod = Modulation(h, 6, gamma_slots=(0, 3))
        self.qkv = nn.Linear(h, 3 * h)
        if not pre_only:
            self.proj = nn.Linear(h, h)
            self.ffn = MLP(h, cfg.mlp_dim) if ffn == "mlp" else ConvMLP(h, cfg.mlp_dim, kernel=3)

    def pre_attention(self, x, cond, n_heads, angles=None):
        g1, b1, *rest = self.mod(cond)
        q, k, v = self.qkv(modulate(x, g1, b1)).chunk(3, dim=-1)
        q, k, v = (split_heads(z, n_heads) for z in (q, k, v))
        if angles is not None:
            q, k = rope_rotate(q, angles), rope_rotate(k, angles)
        return (q, k, v), tuple(rest)

    def post_attention(self, x, attn_out, mods):
        if self.pre_only:
            return x
        gate1, g2, b2, gate2 = mods
        x = x + gate1 * self.proj(merge_heads(attn_out))
        return x + gate2 * self.ffn(modulate(x, g2, b2))


class MMBlock(nn.Module):
    """Joint attention over audio, visual and text streams."""

    def __init__(self, cfg: ModelConfig, last: bool = False):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.audio = Stream(cfg, "conv")
        self.visual = Stream(cfg, "conv", pre_only=last)
        self.text = Stream(cfg, "mlp", pre_only=last)
        self.attention = joint_attention

    def forward(self, audio, visual, text, c_g, c_f, rope_audio, rope_visual):
        c_g = c_g.unsqueeze(-2)
        qkv_a, mod_a = self.audio.pre_attention(audio, c_f, self.n_heads, rope_audio)
        qkv_v, mod_v = self.visual.pre_attention(visual, c_g, self.n_heads, rope_visual)
        qkv_t, mod_t = self.text.pre_attention(text, c_g, self.n_heads)
        qs, ks, vs = zip(qkv_a, qkv_v, qkv_t)
        out_a, out_v, out_t = self.attention(qs, ks, vs)
        return (self.audio.post_attention(audio, out_a, mod_a),
                self.visual.post_attention(visual, out_v, mod_v),
                self.text.post_attention(text, out_t, mod_t))


class SingleBlock(nn.Module):
    """Audio-only block: the joint attention reduces to self-attention."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.audio = Stream(cfg, "conv")
        self.attention = joint_attention

    def forward(self, audio, c_f, rope_audio):
        qkv, mods = self.audio.pre_attention(audio, c_f, self.n_heads, rope_audio)
        (out,) = self.attention(*([z] for z in qkv))
        return self.audio.post_attention(audio, out, mods)


class AudioProjection(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.conv = SameConv1d(cfg.latent_dim, cfg.hidden_dim, 7)
        self.mlp = ConvMLP(cfg.hidden_dim, cfg.mlp_dim, kernel=7)

    def forward(self, x):
        return self.mlp(F.selu(self.conv(x)))


class VisualProjection(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.linear = nn.Linear(cfg.visual_feat_dim, cfg.hidden_dim)
        self.mlp = ConvMLP(cfg.hidden_dim, cfg.mlp_dim, kernel=3)

    def forward(self, x):
        return self.mlp(self.linear(x))


class TextProjection(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.linear = nn.Linear(cfg.text_feat_dim, cfg.hidden_dim)
        self.mlp = MLP(cfg.hidden_dim, cfg.mlp_dim)

    def forward(self, x):
        return self.mlp(self.linear(x))


class GlobalCondition(nn.Module):
    """c_g = MLP([fourier(t), mean(visual tokens), mean(text tokens)])."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.time_dim = cfg.time_embed_dim
        self.mlp = MLP(cfg.time_embed_dim + 2 * cfg.hidden_dim, cfg.hidden_dim,
                       out_dim=cfg.hidden_dim)

    def forward(self, t, visual, text):
        emb = fourier_time_embed(t, self.time_dim).to(visual.dtype)
        return self.mlp(torch.cat([emb, visual.mean(dim=-2), text.mean(dim=-2)], dim=-1))


class FlowNetwork(nn.Module):
    """Velocity field v(t, conditions, x_t) over audio latents of shape (B, L, latent_dim)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, use_sync: bool = True):
        super().__init__()
        self.cfg = cfg
        self.use_sync = use_sync
        h = cfg.hidden_dim
        self.empty = EmptyTokens(cfg)
        self.audio_proj = AudioProjection(cfg)
        self.visual_proj = VisualProjection(cfg)
        self.text_proj = TextProjection(cfg)
        self.sync_proj = SyncProjection(cfg) if use_sync else None
        self.global_cond = GlobalCondition(cfg)
        self.mm_blocks = nn.ModuleList(MMBlock(cfg, last=i == cfg.n_mm_blocks - 1)
                                       for i in range(cfg.n_mm_blocks))
        self.single_blocks = nn.ModuleList(SingleBlock(cfg) for _ in range(cfg.n_single_blocks))
        self.final_mod = Modulation(h, 2, gamma_slots=(0,))
        self.head = nn.Linear(h, cfg.latent_dim)
        if not any(p.is_meta for p in self.parameters()):
            self.init_weights(seed)

    @torch.no_grad()
    def init_weights(self, seed: int) -> None:
        """Fan-in scaled uniform weights from ``seed``; modulation and head start at zero."""
        gen = torch.Generator().manual_seed(seed)

        def fill(p, fan_in):
            bound = fan_in ** -0.5
            p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)

        for module in self.modules():
            if isinstance(module, Modulation):
                module.reset_parameters()
            elif isinstance(module, (nn.Linear, nn.Conv1d)):
                fan_in = module.weight[0].numel()
                fill(module.weight, fan_in)
                if module.bias is not None:
                    fill(module.bias, fan_in)
        fill(self.empty.empty_visual, self.cfg.visual_feat_dim)
        fill(self.empty.empty_sync, self.cfg.sync_feat_dim)
        if self.sync_proj is not None:
            fill(self.sync_proj.clip_pos, self.cfg.sync_feat_dim)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def _check_inputs(self, cond: Conditions, x: torch.Tensor) -> None:
        cfg = self.cfg
        if x.ndim != 3 or x.shape[-1] != cfg.latent_dim:
            raise ValueError(f"audio projection: expected (B, L, {cfg.latent_dim}) latents, "
                             f"got {tuple(x.shape)}")
        b = x.shape[0]
        if cond.text.shape[1:] != (cfg.text_len, cfg.text_feat_dim):
            raise ValueError(f"text projection: expected ({cfg.text_len}, {cfg.text_feat_dim}) "
                             f"per item, got {tuple(cond.text.shape[1:])}")
        if cond.visual.shape[-1] != cfg.visual_feat_dim or cond.visual.shape[1] < 1:
            raise ValueError(f"visual projection: bad visual features {tuple(cond.visual.shape)}")
        if cond.sync.shape[-1] != cfg.sync_feat_dim or cond.sync.shape[1] < 1:
            raise ValueError(f"sync projection: bad sync features {tuple(cond.sync.shape)}")
        for name in ("visual", "sync", "text", "has_video", "has_text"):
            if getattr(cond, name).shape[0] != b:
                raise ValueError(f"conditions: {name} batch size differs from latents ({b})")

    def rope_tables(self, audio_len: int, visual_len: int):
        cfg = self.cfg
        rope_a = rope_angles(torch.arange(audio_len), cfg.head_dim, 1.0, cfg.rope_base)
        rope_v = rope_angles(torch.arange(visual_len), cfg.head_dim,
                             cfg.latent_fps / cfg.visual_fps, cfg.rope_base)
        return rope_a, rope_v

    def forward(self, t, conditions: Conditions, x: torch.Tensor) -> torch.Tensor:
        self._check_inputs(conditions, x)
        b, audio_len, _ = x.shape
        t = torch.as_tensor(t, dtype=x.dtype).expand(b)
        cond = substitute_missing(conditions, self.empty)

        text = self.text_proj(cond.text)
        visual = self.visual_proj(cond.visual)
        audio = self.audio_proj(x)
        c_g = self.global_cond(t, visual, text)
        if self.sync_proj is not None:
            sync = self.sync_proj(cond.sync, cond.has_video)
            c_f = compute_frame_condition(sync, c_g, audio_len)
        else:
            c_f = c_g.unsqueeze(-2).expand(b, audio_len, -1)

        rope_a, rope_v = self.rope_tables(audio_len, visual.shape[-2])
        for block in self.mm_blocks:
            audio, visual, text = block(audio, visual, text, c_g, c_f, rope_a, rope_v)
        for block in self.single_blocks:
            audio = block(audio, c_f, rope_a)
        gamma, beta = self.final_mod(c_f)
        return self.head(modulate(audio, gamma, beta))


def count_params(cfg: ModelConfig, use_sync: bool = True) -> int:
    """Trainable parameter count of FlowNetwork(cfg), built without allocating memory."""
    with torch.device("meta"):
        net = FlowNetwork(cfg, use_sync=use_sync)
    return sum(p.numel() for p in net.parameters())
