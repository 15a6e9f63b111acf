import numpy as np
import pytest
import torch

from foleyflow.config import preset
from foleyflow.metrics import OnsetSeries, detect_envelope_onsets, onset_scores
from foleyflow.synthdata import (MIN_EVENT_GAP, N_CLASSES, SyntheticScene, balance_interleave,
                                 build_manifest, collate, generate_scene, mask_modalities,
                                 read_manifest, render_latent, render_sample, scene_from_seed,
                                 write_manifest)


def test_scene_deterministic():
    assert scene_from_seed(42) == scene_from_seed(42)


def test_scene_constraints_and_class_coverage():
    rng = np.random.default_rng(0)
    seen = set()
    for _ in range(10_000):
        s = generate_scene(rng, N_CLASSES, 8.0)
        seen.add(s.class_id)
        assert 1 <= len(s.event_times) <= 8
        assert all(0 <= t < 8.0 for t in s.event_times)
        assert all(b - a >= MIN_EVENT_GAP for a, b in zip(s.event_times, s.event_times[1:]))
    assert seen == set(range(N_CLASSES))


def test_scene_validation():
    with pytest.raises(ValueError):
        SyntheticScene(8.0, 0, (1.0, 1.1), 0)
    with pytest.raises(ValueError):
        SyntheticScene(8.0, 0, (9.0,), 0)


def test_render_shapes(tiny_cfg):
    s = render_sample(scene_from_seed(3), tiny_cfg)
    assert s.visual_raw.shape == (64, 1024)
    assert s.sync_raw.shape == (192, 768)
    assert s.text_raw.shape == (77, 1024)
    assert s.x1.shape == (250, 8)
    s10 = render_sample(scene_from_seed(3, duration=10.0), tiny_cfg)
    assert s10.x1.shape == (round(10 * 31.25), 8) and s10.sync_raw.shape == (240, 768)


def test_render_event_frames(tiny_cfg):
    x1 = render_latent(SyntheticScene(8.0, 2, (1.0, 3.0), 0), tiny_cfg)
    env = x1[:, 0]
    first = int(np.argmax(env[:60]))
    second = 60 + int(np.argmax(env[60:]))
    assert abs(first - 31) <= 1 and abs(second - 94) <= 1


def test_render_class_changes_texture_only(tiny_cfg):
    a = render_latent(SyntheticScene(8.0, 1, (2.0,), 0), tiny_cfg)
    b = render_latent(SyntheticScene(8.0, 5, (2.0,), 0), tiny_cfg)
    assert np.array_equal(a[:, 0], b[:, 0])
    assert not np.allclose(a[:, 1:], b[:, 1:])


def test_render_pure(tiny_cfg):
    a = render_sample(scene_from_seed(9), tiny_cfg)
    b = render_sample(scene_from_seed(9), tiny_cfg)
    for name in ("visual_raw", "sync_raw", "text_raw", "x1"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


def test_sync_bumps_sharper_than_visual(tiny_cfg):
    sc = SyntheticScene(8.0, 0, (4.0,), 0)
    s = render_sample(sc, tiny_cfg)
    base = render_sample(SyntheticScene(8.0, 0, (), 0), tiny_cfg)
    vis = np.linalg.norm(s.visual_raw - base.visual_raw, axis=1)
    syn = np.linalg.norm(s.sync_raw - base.sync_raw, axis=1)
    vis_width = (vis > vis.max() / 2).sum() / 8.0
    syn_width = (syn > syn.max() / 2).sum() / 24.0
    assert syn_width < vis_width / 3
    assert int(np.argmax(syn)) == 96


def test_event_recoverability_oracle(tiny_cfg):
    """A threshold detector on ground-truth channel 0 recovers every event (±1 frame)."""
    fps = tiny_cfg.latent_fps
    f1s = []
    for seed in range(200):
        sc = scene_from_seed(seed)
        env = render_latent(sc, tiny_cfg)[:, 0]
        pred = detect_envelope_onsets(env, fps)
        f1s.append(onset_scores(pred, OnsetSeries(sc.event_times, 8.0), tol=1.0 / fps)[2])
    assert min(f1s) == 1.0


def test_mask_modalities(tiny_cfg):
    s = render_sample(scene_from_seed(1), tiny_cfg)
    rng = np.random.default_rng(0)
    u = mask_modalities(s, 0.0, rng)
    assert u.has_video and u.has_text
    m = mask_modalities(s, 1.0, rng)
    assert not m.has_video and not m.has_text
    with pytest.raises(ValueError):
        mask_modalities(s, 1.2, rng)


def test_mask_rate():
    from foleyflow.synthdata import TrainingSample
    s = TrainingSample(np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1))
    rng = np.random.default_rng(7)
    draws = [mask_modalities(s, 0.1, rng) for _ in range(100_000)]
    fv = np.mean([not d.has_video for d in draws])
    ft = np.mean([not d.has_text for d in draws])
    assert 0.094 <= fv <= 0.106 and 0.094 <= ft <= 0.106


def test_balance_interleave():
    av, at = ["a", "b"], list(range(10))
    order = balance_interleave(av, at, 5, epoch_seed=3)
    assert len(order) == 20 and order.count("a") == 5 and order.count("b") == 5
    assert order == balance_interleave(av, at, 5, epoch_seed=3)
    assert sorted(map(str, balance_interleave(av, at, 1, 0))) == sorted(map(str, av + at))
    with pytest.raises(ValueError):
        balance_interleave(av, at, 0, 0)


def test_collate(tiny_cfg):
    samples = [render_sample(scene_from_seed(i), tiny_cfg) for i in range(3)]
    samples[1].has_text = False
    x1, cond = collate(samples)
    assert x1.shape == (3, 250, 8) and x1.dtype == torch.float32
    assert cond.has_text.tolist() == [True, False, True]


def test_manifest_roundtrip(tmp_path):
    recs = build_manifest(20, seed=7, audio_text_fraction=0.25)
    assert sum(not r.has_video for r in recs) == 5
    write_manifest(recs, tmp_path / "m.jsonl")
    assert read_manifest(tmp_path / "m.jsonl") == recs
    assert build_manifest(20, seed=7, audio_text_fraction=0.25) == recs
    for r in recs:
        assert r.scene().event_times == scene_from_seed(r.seed).event_times
