"""Procedural audio-visual-text scenes with known event timing.

A scene is a class label plus a list of event times. Rendering turns it into
the raw inputs the network sees (visual, sync and text features) and a
ground-truth latent whose channel 0 carries one decaying impulse per event.
Visual features mark events only with wide bumps at 8 fps, while sync
features mark them with one-frame bumps at 24 fps, so precise timing is only
recoverable through the sync path.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .config import ModelConfig
from .syncmod import SYNC_CLIP, Conditions, sync_seq_len

WORLD_SEED = 20240101
N_CLASSES = 16
MIN_EVENT_GAP = 0.2
EDGE_MARGIN = 0.25
VISUAL_BUMP_SIGMA = 0.25  # seconds
SYNC_BUMP_SIGMA = 1.0  # sync frames
IMPULSE_DECAY = 0.1  # seconds
IMPULSE_HEIGHT = 3.0
ENVELOPE_BASE = -1.0


@dataclass(frozen=True)
class SyntheticScene:
    duration_sec: float
    class_id: int
    event_times: tuple[float, ...]
    seed: int

    def __post_init__(self):
        times = self.event_times
        if any(not 0 <= t < self.duration_sec for t in times):
            raise ValueError("event times must lie in [0, duration)")
        if any(b - a < MIN_EVENT_GAP - 1e-12 for a, b in zip(times, times[1:])):
            raise ValueError(f"events must be increasing with gaps >= {MIN_EVENT_GAP}s")


@dataclass
class TrainingSample:
    visual_raw: np.ndarray  # (L_v, visual_feat_dim)
    text_raw: np.ndarray  # (text_len, text_feat_dim)
    sync_raw: np.ndarray  # (L_sync, sync_feat_dim)
    x1: np.ndarray  # (L_audio, latent_dim)
    has_video: bool = True
    has_text: bool = True
    scene: SyntheticScene | None = None


def generate_scene(rng: np.random.Generator, n_classes: int = N_CLASSES,
                   duration: float = 8.0, seed: int = -1) -> SyntheticScene:
    """Draw a class and 1-8 well-separated event times."""
    class_id = int(rng.integers(n_classes))
    n_events = int(np.clip(rng.poisson(4.0), 1, 8))
    lo, hi = EDGE_MARGIN, duration - EDGE_MARGIN
    while True:
        times = np.sort(rng.uniform(lo, hi, n_events))
        if n_events == 1 or np.diff(times).min() >= MIN_EVENT_GAP:
            break
    return SyntheticScene(float(duration), class_id, tuple(float(t) for t in times), seed)


def scene_from_seed(seed: int, n_classes: int = N_CLASSES, duration: float = 8.0) -> SyntheticScene:
    return generate_scene(np.random.default_rng(seed), n_classes, duration, seed)


@dataclass(frozen=True)
class _World:
    """Fixed random vectors shared by every scene (the 'encoders' of the toy world)."""
    class_visual: np.ndarray
    visual_event: np.ndarray
    sync_base: np.ndarray
    sync_event: np.ndarray
    sync_clip: np.ndarray
    class_text: np.ndarray
    tex_level: np.ndarray
    tex_amp: np.ndarray
    tex_freq: np.ndarray
    tex_phase: np.ndarray


@lru_cache(maxsize=8)
def _world(cfg_key: tuple, n_classes: int) -> _World:
    visual_dim, sync_dim, text_dim, text_len, latent_dim = cfg_key
    rng = np.random.default_rng(WORLD_SEED)
    tex_shape = (n_classes, latent_dim - 1)
    return _World(
        class_visual=rng.standard_normal((n_classes, visual_dim)),
        visual_event=rng.standard_normal(visual_dim) * 2.0,
        sync_base=rng.standard_normal(sync_dim) * 0.5,
        sync_event=rng.standard_normal(sync_dim) * 2.0,
        sync_clip=rng.standard_normal((SYNC_CLIP, sync_dim)) * 0.25,
        class_text=rng.standard_normal((n_classes, text_len, text_dim)).astype(np.float32),
        tex_level=rng.uniform(-1.0, 1.0, tex_shape),
        tex_amp=rng.uniform(0.1, 0.5, tex_shape),
        tex_freq=rng.uniform(0.25, 1.0, tex_shape),
        tex_phase=rng.uniform(0, 2 * np.pi, tex_shape),
    )


def world_for(cfg: ModelConfig, n_classes: int = N_CLASSES) -> _World:
    key = (cfg.visual_feat_dim, cfg.sync_feat_dim, cfg.text_feat_dim, cfg.text_len,
           cfg.latent_dim)
    return _world(key, n_classes)


def event_envelope(event_times: Sequence[float], n_frames: int, fps: float) -> np.ndarray:
    """Channel-0 latent envelope: a decaying impulse starting at each event frame."""
    t = np.arange(n_frames) / fps
    env = np.full(n_frames, ENVELOPE_BASE)
    for te in event_times:
        start = int(round(te * fps))
        if start >= n_frames:
            continue
        rel = t[start:] - start / fps
        env[start:] += IMPULSE_HEIGHT * np.exp(-rel / IMPULSE_DECAY)
    return env


def render_latent(scene: SyntheticScene, cfg: ModelConfig,
                  n_classes: int = N_CLASSES) -> np.ndarray:
    w = world_for(cfg, n_classes)
    n = cfg.audio_len(scene.duration_sec)
    t = np.arange(n) / cfg.latent_fps
    c = scene.class_id
    x1 = np.empty((n, cfg.latent_dim))
    x1[:, 0] = event_envelope(scene.event_times, n, cfg.latent_fps)
    x1[:, 1:] = w.tex_level[c] + w.tex_amp[c] * np.sin(
        2 * np.pi * w.tex_freq[c] * t[:, None] + w.tex_phase[c])
    return x1


def render_sample(scene: SyntheticScene, cfg: ModelConfig,
                  n_classes: int = N_CLASSES) -> TrainingSample:
    """Render raw condition features and the target latent for ``scene``."""
    w = world_for(cfg, n_classes)
    dur = scene.duration_sec
    events = np.asarray(scene.event_times)

    tv = np.arange(cfg.visual_len(dur)) / cfg.visual_fps
    vis_bumps = np.exp(-0.5 * ((tv[:, None] - events) / VISUAL_BUMP_SIGMA) ** 2).sum(axis=1)
    visual = w.class_visual[scene.class_id] + vis_bumps[:, None] * w.visual_event

    n_sync = sync_seq_len(dur)
    js = np.arange(n_sync)
    sync_fps = n_sync / dur
    sync_bumps = np.exp(
        -0.5 * ((js[:, None] - events * sync_fps) / SYNC_BUMP_SIGMA) ** 2).sum(axis=1)
    sync = w.sync_base + w.sync_clip[js % SYNC_CLIP] + sync_bumps[:, None] * w.sync_event

    return TrainingSample(
        visual_raw=visual.astype(np.float32),
        text_raw=w.class_text[scene.class_id],
        sync_raw=sync.astype(np.float32),
        x1=render_latent(scene, cfg, n_classes).astype(np.float32),
        scene=scene,
    )


def mask_modalities(sample: TrainingSample, p: float, rng: np.random.Generator) -> TrainingSample:
    """Independently drop video (visual + sync) and text, each with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("mask probability must lie in [0, 1]")
    drop_video = rng.random() < p
    drop_text = rng.random() < p
    return replace(sample, has_video=sample.has_video and not drop_video,
                   has_text=sample.has_text and not drop_text)


def balance_interleave(av_set: Sequence, at_set: Sequence, dup_factor: int,
                       epoch_seed: int) -> list:
    """Duplicate audio-visual items ``dup_factor`` times, append audio-text items, shuffle."""
    if dup_factor < 1:
        raise ValueError("dup_factor must be >= 1")
    items = [x for x in av_set for _ in range(dup_factor)] + list(at_set)
    order = np.random.default_rng(epoch_seed).permutation(len(items))
    return [items[i] for i in order]


def collate(samples: Sequence[TrainingSample], dtype=torch.float32):
    """Stack rendered samples into (x1, Conditions) tensors."""
    def stack(name):
        return torch.from_numpy(np.stack([getattr(s, name) for s in samples])).to(dtype)
    cond = Conditions(
        visual=stack("visual_raw"), sync=stack("sync_raw"), text=stack("text_raw"),
        has_video=torch.tensor([s.has_video for s in samples]),
        has_text=torch.tensor([s.has_text for s in samples]),
    )
    return stack("x1"), cond


# ---------------------------------------------------------------------------
# dataset manifests

@dataclass(frozen=True)
class ManifestRecord:
    seed: int
    class_id: int
    duration_sec: float
    has_video: bool = True
    has_text: bool = True
    event_times: tuple[float, ...] = field(default=())

    def scene(self) -> SyntheticScene:
        return SyntheticScene(self.duration_sec, self.class_id, tuple(self.event_times), self.seed)


def build_manifest(n: int, seed: int, duration: float = 8.0, n_classes: int = N_CLASSES,
                   audio_text_fraction: float = 0.0) -> list[ManifestRecord]:
    """``n`` scene records; scene seeds derive from ``seed`` deterministically.

    The last ``round(n * audio_text_fraction)`` records have no video.
    """
    seeds = np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32)
    n_at = int(round(n * audio_text_fraction))
    out = []
    for i, s in enumerate(seeds):
        sc = scene_from_seed(int(s), n_classes, duration)
        out.append(ManifestRecord(int(s), sc.class_id, duration, has_video=i < n - n_at,
                                  has_text=True, event_times=sc.event_times))
    return out


def write_manifest(records: Iterable[ManifestRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            d = asdict(r)
            d["event_times"] = list(r.event_times)
            fh.write(json.dumps(d, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                d["event_times"] = tuple(d.get("event_times", ()))
                out.append(ManifestRecord(**d))
    return out
