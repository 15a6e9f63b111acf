import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from foleyflow.audiofe import (STFT_16K, STFT_44K, ToyLatentCodec, hann, hz_to_mel,
                               mel_filterbank, mel_project, mel_spectrogram, mel_to_hz, read_wav,
                               stft_magnitude, write_wav)

PRESETS = [STFT_16K, STFT_44K]


def direct_dft_magnitude(x, p):
    """Naive per-frame DFT oracle (explicit complex exponentials)."""
    n = p.n_fft
    win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)
    k = np.arange(n // 2 + 1)[:, None]
    basis = np.exp(-2j * np.pi * k * np.arange(n)[None, :] / n)
    n_frames = 1 + (len(x) - p.win_len) // p.hop
    frames = np.stack([x[i * p.hop:i * p.hop + n] for i in range(n_frames)])
    return np.abs((frames * win) @ basis.T)


def test_preset_values():
    assert (STFT_16K.n_fft, STFT_16K.hop, STFT_16K.win_len, STFT_16K.n_mels) == (1024, 256, 1024, 80)
    assert (STFT_44K.n_fft, STFT_44K.hop, STFT_44K.win_len, STFT_44K.n_mels) == (2048, 512, 2048, 128)
    assert STFT_16K.latent_fps == 31.25
    assert round(STFT_44K.latent_fps, 2) == 43.07


def test_hann_periodic():
    w = hann(8)
    assert w[0] == 0 and np.isclose(w[4], 1.0)


@pytest.mark.parametrize("p", PRESETS)
@pytest.mark.parametrize("k", [17, 64, 300])
def test_sine_at_bin_center(p, k):
    sr = p.sample_rate
    t = np.arange(p.win_len * 4) / sr
    x = np.sin(2 * np.pi * (k * sr / p.n_fft) * t)
    mag = stft_magnitude(x, p)
    assert np.all(mag.argmax(axis=1) == k)
    assert np.allclose(mag, direct_dft_magnitude(x, p), atol=1e-8)


def test_zero_signal():
    assert np.all(stft_magnitude(np.zeros(4000), STFT_16K) == 0)


def test_frame_count_8s():
    assert stft_magnitude(np.zeros(128000), STFT_16K).shape == (497, 513)


@settings(max_examples=20, deadline=None)
@given(n=st.integers(2048, 30000))
def test_frame_count_formula(n):
    for p in PRESETS:
        if n >= p.win_len:
            expect = 1 + (n - p.win_len) // p.hop
            assert stft_magnitude(np.zeros(n), p).shape[0] == expect == p.n_frames(n)


def test_too_short():
    with pytest.raises(ValueError):
        stft_magnitude(np.zeros(100), STFT_16K)


@pytest.mark.parametrize("p", PRESETS)
def test_filterbank_tiles_band(p):
    fb = mel_filterbank(p)
    assert fb.shape == (p.n_mels, p.n_bins)
    assert np.all(fb.sum(axis=1) > 0)
    # the 0 Hz and Nyquist bins are triangle endpoints; every bin strictly between is covered
    assert np.all(fb[:, 1:-1].sum(axis=0) > 0)


def test_mel_scale_roundtrip():
    f = np.array([0.0, 440.0, 8000.0, 22050.0])
    assert np.allclose(mel_to_hz(hz_to_mel(f)), f)
    assert np.isclose(hz_to_mel(700.0), 2595 * np.log10(2))


@pytest.mark.parametrize("p", PRESETS)
def test_440hz_band(p):
    x = np.sin(2 * np.pi * 440 * np.arange(p.sample_rate) / p.sample_rate)
    mel = mel_spectrogram(x, p)
    # band whose centre is nearest 440 Hz on the mel axis (centres are uniformly spaced in mel)
    edges_mel = np.linspace(0, hz_to_mel(p.sample_rate / 2), p.n_mels + 2)
    expect = int(np.argmin(np.abs(edges_mel[1:-1] - hz_to_mel(440.0))))
    assert abs(int(np.median(mel.data.argmax(axis=1))) - expect) <= 1


def test_white_noise_above_floor(rng):
    mel = mel_spectrogram(rng.standard_normal(16000), STFT_16K)
    assert np.all(mel.data > np.log(1e-5))


def test_mel_project_dimension_mismatch():
    with pytest.raises(ValueError):
        mel_project(np.zeros((3, 100)), STFT_16K)


@pytest.mark.parametrize("p", PRESETS)
def test_windowed_energy_bound(p, rng):
    x = rng.standard_normal(p.win_len * 3)
    mag = stft_magnitude(x, p)
    win = hann(p.win_len)
    for i, row in enumerate(mag):
        frame = x[i * p.hop:i * p.hop + p.win_len]
        # Parseval on the one-sided spectrum: sum |X|^2 <= n * sum (w x)^2
        assert (row ** 2).sum() <= p.n_fft * ((win * frame) ** 2).sum() * (1 + 1e-12)


def test_codec_roundtrip_full_rank(rng):
    codec = ToyLatentCodec(80, 160, seed=3)
    mel = rng.standard_normal((10, 80))
    assert np.allclose(codec.decode(codec.encode(mel)), mel, atol=1e-6)


def test_codec_halves_frames_and_pads(rng):
    codec = ToyLatentCodec(80, 20)
    assert codec.encode(rng.standard_normal((10, 80))).shape == (5, 20)
    odd = rng.standard_normal((7, 80))
    z = codec.encode(odd)
    assert z.shape == (4, 20)
    padded = np.concatenate([odd, odd[-1:]])
    assert np.allclose(z, codec.encode(padded))


def test_codec_projection_orthonormal_and_seeded():
    a, b = ToyLatentCodec(80, 20, seed=5), ToyLatentCodec(80, 20, seed=5)
    assert np.array_equal(a.proj, b.proj)
    assert np.allclose(a.proj.T @ a.proj, np.eye(20), atol=1e-12)


def test_frame_rate_chain():
    assert STFT_16K.sample_rate / STFT_16K.hop / 2 == 31.25
    assert abs(STFT_44K.sample_rate / STFT_44K.hop / 2 - 43.07) < 0.005


def test_wav_roundtrip(tmp_path, rng):
    x = rng.uniform(-0.9, 0.9, 1000)
    write_wav(tmp_path / "a.wav", x, 16000)
    y, sr = read_wav(tmp_path / "a.wav")
    assert sr == 16000 and np.allclose(x, y, atol=1 / 16000)
