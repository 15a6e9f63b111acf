"""Conditional flow matching: interpolation path, training loss, Euler sampler.

A velocity evaluator is any callable ``field(t, conditions, x) -> v`` where
``v`` has the shape of ``x``. ``t`` is a float or a tensor broadcastable to
the batch dimension.
"""
from __future__ import annotations

from typing import Any, Callable

import torch

VelocityEvaluator = Callable[[Any, Any, torch.Tensor], torch.Tensor]


class NumericError(ArithmeticError):
    """A non-finite value appeared in a loss, state or gradient."""


def _check_shapes(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _expand_t(t, x: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=x.dtype, device=x.device)
    if t.ndim == 0:
        return t
    return t.reshape(-1, *([1] * (x.ndim - 1)))


def interpolate(x0: torch.Tensor, x1: torch.Tensor, t) -> torch.Tensor:
    """Point on the straight path from noise ``x0`` (t=0) to data ``x1`` (t=1)."""
    _check_shapes(x0, x1, "interpolate")
    t = _expand_t(t, x0)
    return t * x1 + (1 - t) * x0


def target_velocity(x0: torch.Tensor, x1: torch.Tensor) -> torch.Tensor:
    _check_shapes(x0, x1, "target_velocity")
    return x1 - x0


def cfg_velocity(v_cond: torch.Tensor, v_uncond: torch.Tensor, w: float) -> torch.Tensor:
    """Classifier-free guidance: extrapolate from the unconditional prediction."""
    _check_shapes(v_cond, v_uncond, "cfg_velocity")
    return v_uncond + w * (v_cond - v_uncond)


def cfm_loss(model: VelocityEvaluator, x1: torch.Tensor, conditions,
             generator: torch.Generator) -> torch.Tensor:
    """Flow matching regression loss for a batch ``x1`` of shape (B, L, D).

    One timestep per item is drawn uniformly from [0, 1] and one noise
    sample from the standard normal, both from ``generator``. The loss is
    the mean squared velocity error, averaged over elements and items.
    """
    if x1.ndim < 1 or x1.shape[0] == 0:
        raise ValueError("cfm_loss needs a non-empty batch")
    b = x1.shape[0]
    t = torch.rand(b, generator=generator, dtype=x1.dtype, device=x1.device)
    x0 = torch.randn(x1.shape, generator=generator, dtype=x1.dtype, device=x1.device)
    xt = interpolate(x0, x1, t)
    v = model(t, conditions, xt)
    _check_shapes(v, x1, "model output")
    finite = torch.isfinite(v.detach()).reshape(b, -1).all(dim=1)
    if not bool(finite.all()):
        bad = int(torch.nonzero(~finite)[0])
        raise NumericError(f"non-finite velocity prediction for batch item {bad}")
    err = (v - target_velocity(x0, x1)) ** 2
    return err.reshape(b, -1).mean(dim=1).mean()


@torch.no_grad()
def euler_integrate(field: VelocityEvaluator, x0: torch.Tensor, conditions,
                    n_steps: int) -> torch.Tensor:
    """Integrate dx/dt = field(t, C, x) from t=0 to t=1 with forward Euler."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    x = x0
    dt = 1.0 / n_steps
    for k in range(n_steps):
        x = x + dt * field(k / n_steps, conditions, x)
        if not bool(torch.isfinite(x).all()):
            raise NumericError(f"non-finite state after Euler step {k}")
    return x


def guided_field(model: VelocityEvaluator, strength: float) -> VelocityEvaluator:
    """Wrap ``model`` so each call combines a conditional and an unconditional pass.

    The unconditional pass swaps video and text for their empty tokens via
    ``conditions.drop_all()``.
    """
    def field(t, conditions, x):
        v_cond = model(t, conditions, x)
        if strength == 1.0:
            return v_cond
        v_uncond = model(t, conditions.drop_all(), x)
        return cfg_velocity(v_cond, v_uncond, strength)
    return field
