"""STFT / mel front-end and a toy invertible latent codec.

The codec stands in for a learned VAE: it stacks pairs of mel frames and
projects them with a fixed orthonormal matrix, halving the frame rate.
"""
from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LOG_FLOOR = 1e-5


@dataclass(frozen=True)
class StftParams:
    n_fft: int
    hop: int
    win_len: int
    n_mels: int
    sample_rate: int
    window: str = "hann"

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    @property
    def latent_fps(self) -> float:
        return self.frame_rate / 2

    def n_frames(self, n_samples: int) -> int:
        return 1 + (n_samples - self.win_len) // self.hop

    def frame_times(self, n_frames: int) -> np.ndarray:
        """Center time (seconds) of each analysis frame."""
        return (np.arange(n_frames) * self.hop + self.win_len / 2) / self.sample_rate


STFT_16K = StftParams(n_fft=1024, hop=256, win_len=1024, n_mels=80, sample_rate=16000)
STFT_44K = StftParams(n_fft=2048, hop=512, win_len=2048, n_mels=128, sample_rate=44100)
STFT_PRESETS = {"16k": STFT_16K, "44.1k": STFT_44K}


def stft_preset_for(model_preset: str) -> StftParams:
    return STFT_44K if "44.1" in model_preset else STFT_16K


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def stft_magnitude(samples: np.ndarray, p: StftParams) -> np.ndarray:
    """Magnitude spectra (n_frames, n_fft // 2 + 1); no edge padding."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1 or len(x) < p.win_len:
        raise ValueError(f"need a mono signal of at least {p.win_len} samples, got {x.shape}")
    frames = np.lib.stride_tricks.sliding_window_view(x, p.win_len)[::p.hop]
    win = hann(p.win_len)
    if p.win_len < p.n_fft:
        lpad = (p.n_fft - p.win_len) // 2
        win = np.pad(win, (lpad, p.n_fft - p.win_len - lpad))
        frames = np.pad(frames, ((0, 0), (lpad, p.n_fft - p.win_len - lpad)))
    return np.abs(np.fft.rfft(frames * win, n=p.n_fft, axis=-1))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(p: StftParams) -> np.ndarray:
    """Triangular HTK-mel filters (n_mels, n_bins) spanning 0 .. sr/2."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(p.sample_rate / 2), p.n_mels + 2))
    freqs = np.arange(p.n_bins) * p.sample_rate / p.n_fft
    lo, ctr, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (ctr - lo)
    falling = (hi - freqs) / (hi - ctr)
    return np.maximum(0.0, np.minimum(rising, falling))


@dataclass
class MelSpectrogram:
    data: np.ndarray  # (n_frames, n_mels), log(LOG_FLOOR + magnitude)
    params: StftParams

    @property
    def linear(self) -> np.ndarray:
        return np.maximum(np.exp(self.data) - LOG_FLOOR, 0.0)

    @property
    def frame_times(self) -> np.ndarray:
        return self.params.frame_times(self.data.shape[0])


def mel_project(spec: np.ndarray, p: StftParams) -> MelSpectrogram:
    if spec.ndim != 2 or spec.shape[1] != p.n_bins:
        raise ValueError(f"expected (frames, {p.n_bins}) magnitudes, got {spec.shape}")
    return MelSpectrogram(np.log(LOG_FLOOR + spec @ mel_filterbank(p).T), p)


def mel_spectrogram(samples: np.ndarray, p: StftParams) -> MelSpectrogram:
    return mel_project(stft_magnitude(samples, p), p)


class ToyLatentCodec:
    """Pairs of mel frames -> ``latent_dim`` channels through a fixed orthonormal map."""

    def __init__(self, n_mels: int, latent_dim: int, seed: int = 0):
        if latent_dim > 2 * n_mels:
            raise ValueError("latent_dim cannot exceed 2 * n_mels")
        rng = np.random.default_rng(seed)
        q, r = np.linalg.qr(rng.standard_normal((2 * n_mels, latent_dim)))
        self.proj = q * np.sign(np.diag(r))  # (2 n_mels, latent_dim), orthonormal columns
        self.n_mels = n_mels
        self.latent_dim = latent_dim

    def encode(self, mel: np.ndarray) -> np.ndarray:
        mel = np.asarray(mel, dtype=np.float64)
        if mel.shape[0] % 2:
            mel = np.concatenate([mel, mel[-1:]], axis=0)
        return mel.reshape(mel.shape[0] // 2, 2 * self.n_mels) @ self.proj

    def decode(self, z: np.ndarray) -> np.ndarray:
        stacked = np.asarray(z, dtype=np.float64) @ self.proj.T
        return stacked.reshape(stacked.shape[0] * 2, self.n_mels)


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Mono 16-bit PCM WAV -> float samples in [-1, 1], sample rate."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected mono 16-bit PCM")
        sr = w.getframerate()
        raw = w.readframes(w.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, sr


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())
