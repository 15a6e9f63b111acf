"""Frame-aligned conditioning from high frame-rate synchronization features.

Also holds the condition container and the empty-token substitution used for
missing modalities.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .layers import ConvMLP, SameConv1d, modulate

SYNC_CLIP = 8  # features per Synchformer-style clip
EMPTY_TEXT_SEED = 0x5EED_E7


def sync_seq_len(duration_sec: float) -> int:
    """Sync feature count for a clip: 25 fps frames cut into 16-frame clips, stride 8."""
    frames = 25 * duration_sec
    if duration_sec <= 0 or frames < 16 - 1e-9:
        raise ValueError(
            f"duration {duration_sec}s is too short: need at least 16 frames at 25 fps (0.64 s)")
    return 8 * (math.floor((frames - 16) / 8 + 1e-9) + 1)


def upsample_index(src_len: int, dst_len: int) -> np.ndarray:
    """Center-aligned nearest-neighbour source row for each destination row."""
    if src_len < 1 or dst_len < 1:
        raise ValueError("upsample lengths must be >= 1")
    j = np.arange(dst_len)
    # integer form of floor((j + 0.5) * src / dst), exact for all sizes
    idx = ((2 * j + 1) * src_len) // (2 * dst_len)
    return np.clip(idx, 0, src_len - 1)


def upsample_nearest(src: torch.Tensor, dst_len: int) -> torch.Tensor:
    """Resample (..., L_src, d) to (..., dst_len, d) by nearest neighbour."""
    idx = torch.from_numpy(upsample_index(src.shape[-2], dst_len)).to(src.device)
    return src.index_select(-2, idx)


def empty_text_features(text_len: int, dim: int) -> torch.Tensor:
    """Fixed token sequence standing for the encoding of the empty caption."""
    rng = np.random.default_rng(EMPTY_TEXT_SEED)
    return torch.from_numpy(rng.standard_normal((text_len, dim)).astype(np.float32))


@dataclass(frozen=True)
class Conditions:
    """Raw (pre-projection) condition features for a batch.

    visual: (B, L_v, visual_feat_dim); sync: (B, L_sync, sync_feat_dim);
    text: (B, text_len, text_feat_dim); has_video/has_text: (B,) bool.
    """
    visual: torch.Tensor
    sync: torch.Tensor
    text: torch.Tensor
    has_video: torch.Tensor
    has_text: torch.Tensor

    @property
    def batch_size(self) -> int:
        return self.visual.shape[0]

    def with_flags(self, video: bool | None = None, text: bool | None = None) -> "Conditions":
        """Mark modalities absent for the whole batch (None keeps the current flags)."""
        hv, ht = self.has_video, self.has_text
        if video is not None:
            hv = hv & torch.tensor(bool(video))
        if text is not None:
            ht = ht & torch.tensor(bool(text))
        return replace(self, has_video=hv, has_text=ht)

    def drop_all(self) -> "Conditions":
        return self.with_flags(video=False, text=False)

    def to(self, dtype: torch.dtype) -> "Conditions":
        return replace(self, visual=self.visual.to(dtype), sync=self.sync.to(dtype),
                       text=self.text.to(dtype))

    def index(self, idx) -> "Conditions":
        return Conditions(self.visual[idx], self.sync[idx], self.text[idx],
                          self.has_video[idx], self.has_text[idx])


class EmptyTokens(nn.Module):
    """Learned stand-ins for missing video, plus the fixed empty-caption sequence."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.empty_visual = nn.Parameter(torch.zeros(cfg.visual_feat_dim))
        self.empty_sync = nn.Parameter(torch.zeros(cfg.sync_feat_dim))
        self.register_buffer("empty_text", empty_text_features(cfg.text_len, cfg.text_feat_dim),
                             persistent=False)


def substitute_missing(conditions: Conditions, empty: EmptyTokens,
                       present_video: bool | None = None,
                       present_text: bool | None = None) -> Conditions:
    """Swap absent modalities for empty tokens at the raw-feature stage.

    Items whose flags are already false are substituted as well, so the
    result is consistent with its own flags.
    """
    c = conditions.with_flags(present_video, present_text)
    hv = c.has_video.view(-1, 1, 1)
    ht = c.has_text.view(-1, 1, 1)
    dtype = c.visual.dtype
    visual = torch.where(hv, c.visual, empty.empty_visual.to(dtype))
    sync = torch.where(hv, c.sync, empty.empty_sync.to(dtype))
    text = torch.where(ht, c.text, empty.empty_text.to(dtype))
    return replace(c, visual=visual, sync=sync, text=text)


class SyncProjection(nn.Module):
    """conv-7 -> SELU -> ConvMLP-3 from sync features to width h.

    A learned 8-periodic embedding (one entry per position inside a clip)
    is added to real sync features before projection.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        h = cfg.hidden_dim
        self.clip_pos = nn.Parameter(torch.zeros(SYNC_CLIP, cfg.sync_feat_dim))
        self.conv = SameConv1d(cfg.sync_feat_dim, h, 7)
        self.mlp = ConvMLP(h, cfg.mlp_dim, kernel=3)

    def forward(self, sync: torch.Tensor, has_video: torch.Tensor | None = None) -> torch.Tensor:
        length = sync.shape[-2]
        pos = self.clip_pos[torch.arange(length) % SYNC_CLIP].to(sync.dtype)
        if has_video is None:
            sync = sync + pos
        else:
            sync = sync + pos * has_video.view(-1, 1, 1).to(sync.dtype)
        return self.mlp(F.selu(self.conv(sync)))


def compute_frame_condition(sync_tokens: torch.Tensor, c_g: torch.Tensor,
                            audio_len: int) -> torch.Tensor:
    """c_f = Upsample(projected sync tokens) + c_g broadcast to every audio frame."""
    return upsample_nearest(sync_tokens, audio_len) + c_g.unsqueeze(-2)


def ada_ln_frame(x: torch.Tensor, c_f: torch.Tensor, a_gamma, a_beta) -> torch.Tensor:
    """Per-token adaLN: every audio token gets its own scale and bias from c_f."""
    if x.shape[-2] != c_f.shape[-2]:
        raise ValueError(f"ada_ln_frame: {x.shape[-2]} tokens but {c_f.shape[-2]} condition rows")
    return modulate(x, a_gamma(c_f), a_beta(c_f))


def gating_frame(x: torch.Tensor, c_f: torch.Tensor, w_f) -> torch.Tensor:
    if x.shape[-2] != c_f.shape[-2]:
        raise ValueError(f"gating_frame: {x.shape[-2]} tokens but {c_f.shape[-2]} condition rows")
    return x * w_f(c_f)
