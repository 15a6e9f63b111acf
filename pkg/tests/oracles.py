"""Independent reference computations shared by the test modules."""
from __future__ import annotations

import numpy as np
import torch

from foleyflow.flow import cfm_loss
from foleyflow.network import FlowNetwork
from foleyflow.syncmod import Conditions


def gradient_check(cfg, duration=1.0, batch=3, eps=1e-5, entries_per_tensor=2, seed=0,
                   scale=0.05):
    """Central differences of cfm_loss against autograd for every parameter tensor.

    Each tensor is probed along one random unit direction, at its
    ``entries_per_tensor`` largest-gradient entries and at one random entry.
    The relative error denominator is floored at 1e-6: below that, the
    difference quotient is dominated by round-off (about 1e-16 |L| / eps).
    Returns {name: worst relative error}.
    """
    from conftest import perturb_all, random_conditions

    net = perturb_all(FlowNetwork(cfg, seed=seed).double(), scale=scale, seed=seed + 1)
    cond = random_conditions(cfg, batch, duration=duration, seed=seed, dtype=torch.float64)
    # item 1 lacks video and item 2 lacks text so the empty tokens receive gradient
    cond = Conditions(cond.visual, cond.sync, cond.text,
                      torch.tensor([True, False, True][:batch]),
                      torch.tensor([True, True, False][:batch]))
    x1 = torch.randn(batch, cfg.audio_len(duration), cfg.latent_dim,
                     generator=torch.Generator().manual_seed(seed), dtype=torch.float64)

    def loss():
        return cfm_loss(net, x1, cond, torch.Generator().manual_seed(1234))

    net.zero_grad()
    loss().backward()
    rng = torch.Generator().manual_seed(seed + 2)
    worst = {}
    for name, p in net.named_parameters():
        grad = p.grad.detach().clone()
        flat = p.data.view(-1)
        probes = []
        d = torch.randn(p.shape, generator=rng, dtype=torch.float64)
        probes.append(d / d.norm())
        picks = torch.argsort(grad.view(-1).abs(), descending=True)[:entries_per_tensor].tolist()
        picks.append(int(torch.randint(flat.numel(), (1,), generator=rng)))
        for i in picks:
            e = torch.zeros(flat.numel(), dtype=torch.float64)
            e[i] = 1.0
            probes.append(e.view(p.shape))
        errs = []
        for d in probes:
            with torch.no_grad():
                orig = p.data.clone()
                p.data.add_(eps * d)
                lp = loss().item()
                p.data.copy_(orig - eps * d)
                lm = loss().item()
                p.data.copy_(orig)
            num = (lp - lm) / (2 * eps)
            ana = float((grad * d).sum())
            errs.append(abs(num - ana) / max(abs(num), abs(ana), 1e-6))
        worst[name] = max(errs)
    return worst


def affinity_argmax(aligned: bool, head_dim: int = 64, audio_len: int = 250,
                    visual_len: int = 64, latent_fps: float = 31.25, visual_fps: float = 8.0):
    """Row argmax of the rotary affinity between all-ones visual and audio sequences."""
    from foleyflow.layers import rope_apply
    scale = latent_fps / visual_fps if aligned else 1.0
    qa = rope_apply(torch.ones(audio_len, head_dim, dtype=torch.float64), torch.arange(audio_len))
    kv = rope_apply(torch.ones(visual_len, head_dim, dtype=torch.float64),
                    torch.arange(visual_len), scale)
    return (kv @ qa.T).argmax(dim=1).numpy()


def dft_magnitude(x: np.ndarray, n_fft: int, hop: int, win_len: int) -> np.ndarray:
    win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n_fft) / n_fft)
    k = np.arange(n_fft // 2 + 1)[:, None]
    basis = np.exp(-2j * np.pi * k * np.arange(n_fft)[None, :] / n_fft)
    n_frames = 1 + (len(x) - win_len) // hop
    frames = np.stack([x[i * hop:i * hop + n_fft] for i in range(n_frames)])
    return np.abs((frames * win) @ basis.T)
