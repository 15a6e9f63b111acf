"""Model-free evaluation metrics.

Distribution metrics (Frechet distance, Inception Score, paired KL) work on
embedding or logit matrices. Timing metrics work on onset lists and event
envelopes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax

from .audiofe import MelSpectrogram

COV_SHRINKAGE = 1e-6
ABS_FLUX_FLOOR = 1e-9  # below this the clip is treated as silent (log-floor round-off)


def _finite(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError(f"{what} contains non-finite values")
    return x


def _sym_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def gaussian_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.atleast_2d(x)
    n, d = x.shape
    mu = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False)) if n > 1 else np.zeros((d, d))
    if n <= d:
        cov = cov + COV_SHRINKAGE * np.eye(d)
    return mu, cov


def sqrtm_product(cov_a: np.ndarray, cov_b: np.ndarray) -> np.ndarray:
    """A square root S of cov_a @ cov_b (S @ S == cov_a @ cov_b for full-rank cov_a).

    S = A^(1/2) (A^(1/2) B A^(1/2))^(1/2) A^(-1/2); its trace equals the
    trace of the symmetric middle factor's square root.
    """
    ra = _sym_sqrt(cov_a)
    mid = _sym_sqrt(ra @ cov_b @ ra)
    return ra @ mid @ np.linalg.pinv(ra)


def frechet_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two (N, D) embedding sets."""
    a = _finite(a, "embedding set a")
    b = _finite(b, "embedding set b")
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"embedding dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    mu_a, cov_a = gaussian_stats(a)
    mu_b, cov_b = gaussian_stats(b)
    ra = _sym_sqrt(cov_a)
    tr_cross = np.trace(_sym_sqrt(ra @ cov_b @ ra))
    fd = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_cross)
    return max(fd, 0.0)


def inception_score(logits: np.ndarray) -> float:
    """exp(mean_i KL(p_i || mean_j p_j)) with p_i = softmax(logits_i)."""
    logits = _finite(logits, "logits")
    logp = log_softmax(logits, axis=1)
    p = np.exp(logp)
    log_marginal = np.log(p.mean(axis=0))
    kl = np.sum(p * (logp - log_marginal), axis=1)
    return float(np.exp(kl.mean()))


def paired_kl(gt_logits: np.ndarray, gen_logits: np.ndarray, direction: str = "gt||gen") -> float:
    """Mean over items of KL(softmax(gt_i) || softmax(gen_i)) (or the reverse direction)."""
    gt = _finite(gt_logits, "ground-truth logits")
    gen = _finite(gen_logits, "generated logits")
    if gt.shape != gen.shape:
        raise ValueError(f"paired KL needs paired sets of equal shape: {gt.shape} vs {gen.shape}")
    if direction == "gen||gt":
        gt, gen = gen, gt
    elif direction != "gt||gen":
        raise ValueError(f"unknown KL direction {direction!r}")
    lp, lq = log_softmax(gt, axis=1), log_softmax(gen, axis=1)
    return float(np.mean(np.sum(np.exp(lp) * (lp - lq), axis=1)))


# ---------------------------------------------------------------------------
# onsets

@dataclass
class OnsetSeries:
    times: np.ndarray
    duration: float
    strengths: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        order = np.argsort(self.times, kind="stable")
        self.times = self.times[order]
        if self.strengths is not None:
            self.strengths = np.asarray(self.strengths, dtype=np.float64)[order]

    def __len__(self):
        return len(self.times)


def spectral_flux(mag: np.ndarray) -> np.ndarray:
    """Half-wave rectified frame-to-frame increase summed over bands (first frame 0)."""
    mag = np.asarray(mag, dtype=np.float64)
    if mag.ndim == 1:
        mag = mag[:, None]
    flux = np.zeros(mag.shape[0])
    flux[1:] = np.maximum(np.diff(mag, axis=0), 0.0).sum(axis=1)
    return flux


def pick_peaks(flux: np.ndarray, fps: float, window_sec: float = 1.0, mad_k: float = 1.5,
               min_gap_sec: float = 0.1, rel_floor: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Peak frames of ``flux`` above a sliding median + k * MAD threshold.

    Peaks must also reach ``rel_floor`` times the clip maximum; survivors
    closer than ``min_gap_sec`` are thinned keeping the stronger one.
    Returns (frame indices, peak heights).
    """
    flux = np.asarray(flux, dtype=np.float64)
    n = len(flux)
    peak = flux.max(initial=0.0)
    if n == 0 or peak <= ABS_FLUX_FLOOR:
        return np.zeros(0, dtype=int), np.zeros(0)
    half = max(1, int(round(window_sec * fps / 2)))
    padded = np.pad(flux, half, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, 2 * half + 1)
    med = np.median(windows, axis=1)
    mad = np.median(np.abs(windows - med[:, None]), axis=1)
    thresh = np.maximum(med + mad_k * mad, rel_floor * peak)

    left = np.concatenate([[-np.inf], flux[:-1]])
    right = np.concatenate([flux[1:], [-np.inf]])
    cand = np.flatnonzero((flux > thresh) & (flux >= left) & (flux > right))
    min_gap = min_gap_sec * fps
    kept: list[int] = []
    for i in cand[np.argsort(-flux[cand], kind="stable")]:
        if all(abs(i - j) >= min_gap for j in kept):
            kept.append(int(i))
    kept.sort()
    idx = np.asarray(kept, dtype=int)
    return idx, flux[idx]


def detect_onsets(mel: MelSpectrogram, **kw) -> OnsetSeries:
    """Onsets of a (log) mel spectrogram from spectral flux of its linear magnitudes."""
    if mel.data.size == 0:
        raise ValueError("empty spectrogram")
    flux = spectral_flux(mel.linear)
    idx, strength = pick_peaks(flux, mel.params.frame_rate, **kw)
    times = mel.frame_times
    duration = float(times[-1] + mel.params.win_len / 2 / mel.params.sample_rate)
    return OnsetSeries(times[idx], duration, strength)


def detect_envelope_onsets(envelope: np.ndarray, fps: float, **kw) -> OnsetSeries:
    """Onsets of a single event envelope sampled at ``fps`` (frame k at time k / fps)."""
    env = np.asarray(envelope, dtype=np.float64)
    idx, strength = pick_peaks(spectral_flux(env), fps, **kw)
    return OnsetSeries(idx / fps, len(env) / fps, strength)


def match_onsets(pred: np.ndarray, gt: np.ndarray, tol: float) -> int:
    """Greedy one-to-one matching in time order; each prediction takes the nearest free target."""
    pred = np.sort(np.asarray(pred, dtype=np.float64))
    gt = np.sort(np.asarray(gt, dtype=np.float64))
    used = np.zeros(len(gt), dtype=bool)
    matches = 0
    for p in pred:
        dist = np.where(used, np.inf, np.abs(gt - p))
        if len(dist) and dist.min() <= tol + 1e-12:
            used[int(np.argmin(dist))] = True
            matches += 1
    return matches


def _prf(m: int, n_pred: int, n_gt: int) -> tuple[float, float, float]:
    if n_pred == 0 and n_gt == 0:
        return 1.0, 1.0, 1.0
    p = m / n_pred if n_pred else 0.0
    r = m / n_gt if n_gt else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def average_precision(pred: OnsetSeries, gt: OnsetSeries, tol: float) -> float:
    """Interpolated area under the precision-recall curve of a detector-threshold sweep."""
    n_gt = len(gt)
    if n_gt == 0:
        return 1.0 if len(pred) == 0 else 0.0
    if len(pred) == 0:
        return 0.0
    strengths = pred.strengths if pred.strengths is not None else np.ones(len(pred))
    levels = np.unique(strengths)[::-1]
    precisions, recalls = [], []
    for level in levels:
        chosen = pred.times[strengths >= level]
        m = match_onsets(chosen, gt.times, tol)
        precisions.append(m / len(chosen))
        recalls.append(m / n_gt)
    precisions = np.maximum.accumulate(np.asarray(precisions)[::-1])[::-1]
    ap, prev_r = 0.0, 0.0
    for p, r in zip(precisions, recalls):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def onset_scores(pred: OnsetSeries, gt: OnsetSeries, tol: float = 0.1) -> tuple[float, float, float]:
    """(accuracy, average precision, F1) of predicted vs reference onsets."""
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    n_pred, n_gt = len(pred), len(gt)
    if n_pred == 0 and n_gt == 0:
        return 1.0, 1.0, 1.0
    m = match_onsets(pred.times, gt.times, tol)
    _, _, f1 = _prf(m, n_pred, n_gt)
    accuracy = m / max(n_pred, n_gt)
    return accuracy, average_precision(pred, gt, tol), f1


def lag_metric(gen_env: np.ndarray, gt_env: np.ndarray, fps: float,
               max_lag_sec: float = 1.0) -> float:
    """Lag (seconds) maximising normalised cross-correlation; positive = generated is late."""
    g = np.asarray(gen_env, dtype=np.float64)
    r = np.asarray(gt_env, dtype=np.float64)
    if g.shape != r.shape or g.ndim != 1:
        raise ValueError("envelopes must be 1-D and of equal length")
    g = g - g.mean()
    r = r - r.mean()
    ng, nr = np.linalg.norm(g), np.linalg.norm(r)
    if ng < 1e-12 or nr < 1e-12:
        raise ValueError("zero-energy envelope: lag is undefined")
    n = len(g)
    max_lag = min(int(round(max_lag_sec * fps)), n - 1)
    lags = np.arange(-max_lag, max_lag + 1)
    # corr[l] = sum_n g[n] r[n - l]
    full = np.correlate(g, r, mode="full")  # index k <-> lag k - (n - 1)
    corr = full[lags + n - 1] / (ng * nr)
    best = np.flatnonzero(corr >= corr.max() - 1e-12)
    lag = lags[best[np.argmin(np.abs(lags[best]))]]
    return float(lag / fps)
