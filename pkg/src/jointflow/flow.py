"""Flow-matching core on the linear path.

Time runs from ``t = 0`` (pure noise) to ``t = 1`` (clean data). The path is
``x_t = (1 - t) x0 + t x1`` with the constant velocity ``x1 - x0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch


@dataclass(frozen=True)
class TimestepPair:
    t_x: float
    t_y: float

    def __post_init__(self):
        for name, v in (("t_x", self.t_x), ("t_y", self.t_y)):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass
class VelocityPair:
    v_x: torch.Tensor
    v_y: torch.Tensor


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _bcast_t(t, ref: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=ref.dtype)
    if t.ndim == 0:
        return t
    # per-sample times broadcast over the trailing grid axes
    return t.reshape(t.shape + (1,) * (ref.ndim - t.ndim))


def interpolate(x0: torch.Tensor, x1: torch.Tensor, t) -> torch.Tensor:
    _same_shape(x0, x1, "interpolate")
    t = _bcast_t(t, x0)
    return (1 - t) * x0 + t * x1


def target_velocity(x0: torch.Tensor, x1: torch.Tensor) -> torch.Tensor:
    _same_shape(x0, x1, "target_velocity")
    return x1 - x0


def jcfm_loss(pred: VelocityPair, target: VelocityPair) -> torch.Tensor:
    """Joint CFM loss: each branch's mean squared error, weighted one half each."""
    _same_shape(pred.v_x, target.v_x, "jcfm_loss (x branch)")
    _same_shape(pred.v_y, target.v_y, "jcfm_loss (y branch)")
    mse_x = (pred.v_x - target.v_x).square().mean()
    mse_y = (pred.v_y - target.v_y).square().mean()
    return 0.5 * mse_x + 0.5 * mse_y


def cfg_combine(v_uncond: VelocityPair, v_cond: VelocityPair, scale: float) -> VelocityPair:
    _same_shape(v_uncond.v_x, v_cond.v_x, "cfg_combine (x branch)")
    _same_shape(v_uncond.v_y, v_cond.v_y, "cfg_combine (y branch)")
    if scale == 1.0:
        return VelocityPair(v_cond.v_x, v_cond.v_y)
    if scale == 0.0:
        return VelocityPair(v_uncond.v_x, v_uncond.v_y)
    return VelocityPair(
        v_uncond.v_x + scale * (v_cond.v_x - v_uncond.v_x),
        v_uncond.v_y + scale * (v_cond.v_y - v_uncond.v_y),
    )


def uniform_trajectory(start: TimestepPair, steps: int) -> list[TimestepPair]:
    """Advance every coordinate below 1 uniformly to 1 in ``steps`` Euler steps.

    A coordinate that starts at 1 stays at 1 (the clamped branch).
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    out = []
    for k in range(steps + 1):
        frac = k / steps
        tx = 1.0 if start.t_x == 1.0 else start.t_x + (1.0 - start.t_x) * frac
        ty = 1.0 if start.t_y == 1.0 else start.t_y + (1.0 - start.t_y) * frac
        out.append(TimestepPair(tx, ty))
    return out


def check_trajectory(trajectory: Sequence[TimestepPair]) -> None:
    if len(trajectory) < 2:
        raise ValueError("trajectory needs at least two pairs")
    for a, b in zip(trajectory, trajectory[1:]):
        if b.t_x < a.t_x or b.t_y < a.t_y:
            raise ValueError(f"non-monotone trajectory step {a} -> {b}")
    end = trajectory[-1]
    if end.t_x != 1.0 or end.t_y != 1.0:
        raise ValueError(f"trajectory must end at (1, 1), ends at {end}")


# (x, y, pair) -> VelocityPair; class conditioning and guidance are bound by the caller
VelocityFn = Callable[[torch.Tensor, torch.Tensor, TimestepPair], VelocityPair]


def guided_velocity(
    model,
    condition: Optional[torch.Tensor],
    guidance: float,
) -> VelocityFn:
    """Bind a joint model, a class condition and a guidance scale into a velocity function.

    Guidance is applied only when a condition is given and the scale differs
    from 1; otherwise the model is queried once per step.
    """

    def fn(x, y, pair):
        if condition is None:
            null = torch.full((x.shape[0],), model.null_class, dtype=torch.long)
            return model.forward_joint(x, y, pair, null)
        cond = model.forward_joint(x, y, pair, condition)
        if guidance == 1.0:
            return cond
        null = torch.full_like(condition, model.null_class)
        uncond = model.forward_joint(x, y, pair, null)
        return cfg_combine(uncond, cond, guidance)

    return fn


@torch.no_grad()
def euler_sample(
    velocity: VelocityFn,
    x_init: torch.Tensor,
    y_init: torch.Tensor,
    trajectory: Sequence[TimestepPair],
) -> tuple[torch.Tensor, torch.Tensor]:
    """Integrate the joint velocity field along ``trajectory`` with explicit Euler.

    A branch whose time does not move in a step receives no increment at all,
    so a branch clamped at t = 1 is returned bit-identical to its input.
    """
    check_trajectory(trajectory)
    x, y = x_init, y_init
    for cur, nxt in zip(trajectory, trajectory[1:]):
        dx, dy = nxt.t_x - cur.t_x, nxt.t_y - cur.t_y
        if dx == 0.0 and dy == 0.0:
            continue
        v = velocity(x, y, cur)
        if v.v_x.shape != x.shape or v.v_y.shape != y.shape:
            raise ValueError("velocity shape does not match the state")
        if dx != 0.0:
            x = x + dx * v.v_x
        if dy != 0.0:
            y = y + dy * v.v_y
    return x, y
