"""Training loop: AdamW with warmup/step schedule, EMA weights, checkpoints.

Every random draw in a step (batch composition, modality masking, flow
timesteps and noise) derives from ``(seed, step)``, so a run resumed from a
checkpoint replays exactly the same batches as an uninterrupted one.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import ModelConfig, TrainConfig, lr_at_step
from .flow import NumericError, cfm_loss
from .network import FlowNetwork
from .synthdata import (ManifestRecord, balance_interleave, collate, mask_modalities,
                        render_sample)
from .tensorio import (CheckpointShapeError, load_checkpoint_file, save_checkpoint_file)


def ema_decay(rel_width: float, total_steps: int) -> float:
    """Per-step decay whose exponential averaging profile has std rel_width * total_steps.

    Weights of past steps are (1 - b) b^k with std sqrt(b) / (1 - b); solving
    sqrt(b) / (1 - b) = s for u = sqrt(b) gives u = (sqrt(1 + 4 s^2) - 1) / (2 s).
    """
    s = rel_width * total_steps
    u = (math.sqrt(1.0 + 4.0 * s * s) - 1.0) / (2.0 * s)
    return u * u


class EMA:
    """Running exponential moving average of model parameters."""

    def __init__(self, model: torch.nn.Module, decay: float):
        self.decay = decay
        self.shadow = {k: p.detach().clone() for k, p in model.named_parameters()}

    @torch.no_grad()
    def update(self, model: torch.nn.Module, step: int, decay: float | None = None) -> None:
        if step < 1:
            raise ValueError("EMA step must be >= 1")
        d = self.decay if decay is None else decay
        for k, p in model.named_parameters():
            self.shadow[k].mul_(d).add_(p.detach(), alpha=1.0 - d)

    @torch.no_grad()
    def copy_to(self, model: torch.nn.Module) -> None:
        for k, p in model.named_parameters():
            p.copy_(self.shadow[k])


def ema_update(ema: EMA, model: torch.nn.Module, step: int, decay: float | None = None) -> EMA:
    ema.update(model, step, decay)
    return ema


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=0.0, betas=(cfg.beta1, cfg.beta2),
                             weight_decay=cfg.weight_decay, eps=1e-8)


def step_seed(seed: int, step: int, stream: int = 0) -> int:
    return int(np.random.SeedSequence([seed, step, stream]).generate_state(1, np.uint64)[0]
               >> np.uint64(1))


def train_step(model: torch.nn.Module, optimizer: torch.optim.Optimizer, batch, cfg: TrainConfig,
               step: int, generator: torch.Generator) -> tuple[float, float]:
    """One AdamW update on ``batch = (x1, conditions)``. Returns (loss, grad_norm)."""
    x1, cond = batch
    lr = lr_at_step(step, cfg)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    loss = cfm_loss(model, x1, cond, generator)
    if not torch.isfinite(loss):
        raise NumericError(f"step {step}: non-finite loss")
    loss.backward()
    for name, p in model.named_parameters():
        if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
            raise NumericError(f"step {step}: non-finite gradient in {name}")
    grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return float(loss.detach()), float(grad_norm)


class Trainer:
    """Owns the model, optimizer, EMA and the deterministic data stream."""

    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 records: Sequence[ManifestRecord], use_sync: bool = True,
                 log_path: str | Path | None = None, dtype=torch.float32):
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.use_sync = use_sync
        self.dtype = dtype
        self.records = list(records)
        if not self.records:
            raise ValueError("no training records")
        self.av = [r for r in self.records if r.has_video]
        self.at = [r for r in self.records if not r.has_video]
        self.model = FlowNetwork(model_cfg, seed=train_cfg.seed, use_sync=use_sync).to(dtype)
        self.optimizer = make_optimizer(self.model, train_cfg)
        self.ema = EMA(self.model, ema_decay(train_cfg.ema_rel_width, train_cfg.total_steps))
        self.step = 0
        self.log_path = Path(log_path) if log_path else None
        self.history: list[dict] = []
        self._epoch_cache: dict[int, list] = {}

    # -- data -------------------------------------------------------------
    @property
    def epoch_len(self) -> int:
        return len(self.av) * self.cfg.dup_factor + len(self.at)

    def _epoch(self, epoch: int) -> list:
        if epoch not in self._epoch_cache:
            self._epoch_cache = {epoch: balance_interleave(
                self.av, self.at, self.cfg.dup_factor, step_seed(self.cfg.seed, epoch, 1))}
        return self._epoch_cache[epoch]

    def batch_records(self, step: int) -> list[ManifestRecord]:
        out = []
        for i in range(self.cfg.batch_size):
            g = step * self.cfg.batch_size + i
            out.append(self._epoch(g // self.epoch_len)[g % self.epoch_len])
        return out

    def make_batch(self, step: int):
        rng = np.random.default_rng(step_seed(self.cfg.seed, step, 2))
        samples = []
        for rec in self.batch_records(step):
            s = render_sample(rec.scene(), self.model_cfg)
            s.has_video, s.has_text = rec.has_video, rec.has_text
            samples.append(mask_modalities(s, self.cfg.mask_prob, rng))
        return collate(samples, self.dtype)

    # -- optimisation -----------------------------------------------------
    def train_step(self) -> dict:
        t0 = time.perf_counter()
        step = self.step
        gen = torch.Generator().manual_seed(step_seed(self.cfg.seed, step, 3))
        self.model.train()
        loss, gnorm = train_step(self.model, self.optimizer, self.make_batch(step), self.cfg,
                                 step, gen)
        self.step += 1
        self.ema.update(self.model, self.step)
        rec = {"step": step, "lr": lr_at_step(step, self.cfg), "loss": loss,
               "grad_norm": gnorm, "wall_ms": (time.perf_counter() - t0) * 1000.0}
        self.history.append(rec)
        if self.log_path:
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")
        return rec

    def run(self, n_steps: int | None = None, callback=None) -> list[dict]:
        end = self.cfg.total_steps if n_steps is None else min(self.step + n_steps,
                                                              self.cfg.total_steps)
        out = []
        while self.step < end:
            rec = self.train_step()
            out.append(rec)
            if callback:
                callback(rec)
        return out

    def ema_model(self) -> FlowNetwork:
        net = FlowNetwork(self.model_cfg, seed=self.cfg.seed, use_sync=self.use_sync).to(self.dtype)
        self.ema.copy_to(net)
        net.eval()
        return net

    # -- checkpoints ------------------------------------------------------
    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.model, self.ema, self.optimizer, self.step, self.model_cfg,
                        self.cfg, use_sync=self.use_sync)

    @classmethod
    def resume(cls, path: str | Path, records: Sequence[ManifestRecord],
               log_path: str | Path | None = None) -> "Trainer":
        ckpt = load_checkpoint(path)
        tr = cls(ckpt["model_config"], ckpt["train_config"], records,
                 use_sync=ckpt["use_sync"], log_path=log_path)
        ckpt.apply(tr.model, tr.ema, tr.optimizer)
        tr.step = ckpt["step"]
        return tr


# ---------------------------------------------------------------------------

def save_checkpoint(path, model: torch.nn.Module, ema: EMA | None,
                    optimizer: torch.optim.Optimizer | None, step: int,
                    model_cfg: ModelConfig, train_cfg: TrainConfig | None = None,
                    use_sync: bool = True) -> None:
    tensors: dict[str, np.ndarray] = {}
    names = [k for k, _ in model.named_parameters()]
    for k, p in model.named_parameters():
        tensors[f"model/{k}"] = p.detach().float().numpy()
    if ema is not None:
        for k in names:
            tensors[f"ema/{k}"] = ema.shadow[k].float().numpy()
    opt_steps = {}
    if optimizer is not None:
        state = optimizer.state_dict()["state"]
        for i, k in enumerate(names):
            if i in state:
                tensors[f"optim/{k}/exp_avg"] = state[i]["exp_avg"].float().numpy()
                tensors[f"optim/{k}/exp_avg_sq"] = state[i]["exp_avg_sq"].float().numpy()
                opt_steps[k] = float(state[i]["step"])
    meta = {
        "model_config": asdict(model_cfg),
        "train_config": asdict(train_cfg) if train_cfg else None,
        "seed": train_cfg.seed if train_cfg else None,
        "step": int(step),
        "use_sync": bool(use_sync),
        "optim_steps": opt_steps,
        "ema_decay": ema.decay if ema is not None else None,
    }
    save_checkpoint_file(path, tensors, meta)


class Checkpoint(dict):
    """Loaded checkpoint: metadata keys plus ``tensors``; ``apply`` restores state."""

    def params(self, prefix: str = "model/") -> dict[str, torch.Tensor]:
        n = len(prefix)
        return {k[n:]: torch.from_numpy(v) for k, v in self["tensors"].items()
                if k.startswith(prefix)}

    def build_model(self, use_ema: bool = True) -> FlowNetwork:
        net = FlowNetwork(self["model_config"], use_sync=self["use_sync"])
        prefix = "ema/" if use_ema and any(k.startswith("ema/") for k in self["tensors"]) \
            else "model/"
        net.load_state_dict(self.params(prefix), strict=False)
        net.eval()
        return net

    @torch.no_grad()
    def apply(self, model, ema: EMA | None = None, optimizer=None) -> None:
        current = dict(model.named_parameters())
        model.load_state_dict({k: v.to(current[k].dtype) for k, v in self.params("model/").items()},
                              strict=True)
        if ema is not None:
            for k, v in self.params("ema/").items():
                ema.shadow[k].copy_(v)
            if self.get("ema_decay") is not None:
                ema.decay = self["ema_decay"]
        if optimizer is not None and self["optim_steps"]:
            names = [k for k, _ in model.named_parameters()]
            sd = optimizer.state_dict()
            state = {}
            for i, k in enumerate(names):
                if k in self["optim_steps"]:
                    state[i] = {
                        "step": torch.tensor(self["optim_steps"][k]),
                        "exp_avg": torch.from_numpy(self["tensors"][f"optim/{k}/exp_avg"]),
                        "exp_avg_sq": torch.from_numpy(self["tensors"][f"optim/{k}/exp_avg_sq"]),
                    }
            sd["state"] = state
            optimizer.load_state_dict(sd)


def load_checkpoint(path, expect_cfg: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expect_cfg``, verify every model tensor's shape against it."""
    tensors, meta = load_checkpoint_file(path)
    ckpt = Checkpoint(meta)
    ckpt["tensors"] = tensors
    ckpt["model_config"] = ModelConfig(**meta["model_config"])
    ckpt["train_config"] = TrainConfig(**meta["train_config"]) if meta.get("train_config") else None
    if expect_cfg is not None:
        with torch.device("meta"):
            ref = FlowNetwork(expect_cfg, use_sync=meta["use_sync"])
        for k, p in ref.named_parameters():
            got = tensors.get(f"model/{k}")
            if got is None or tuple(got.shape) != tuple(p.shape):
                have = None if got is None else tuple(got.shape)
                raise CheckpointShapeError(
                    f"tensor model/{k}: checkpoint has shape {have}, config expects {tuple(p.shape)}")
    return ckpt
