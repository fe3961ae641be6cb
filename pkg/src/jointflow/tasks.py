"""Tasks driven purely by the two branch timesteps.

=================  =============  ==============================
mode               start (tx, ty)  inputs
=================  =============  ==============================
Joint              (0, 0)         none (optional class ids)
DepthEstimation    (1, 0)         clean rgb; null class
DepthConditioned   (0, 1)         clean disparity (optional class)
=================  =============  ==============================

Inputs and outputs are data-space tensors: rgb (B, 3, H, W) and disparity
(B, H, W), both in [0, 1].
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .flow import (
    TimestepPair,
    VelocityPair,
    euler_sample,
    guided_velocity,
    interpolate,
    uniform_trajectory,
)
from .model import JointModel, decode_depth, encode_depth, from_latent, to_latent


class Task(enum.Enum):
    Joint = "joint"
    DepthEstimation = "depth"
    DepthConditioned = "rgb"


START = {
    Task.Joint: TimestepPair(0.0, 0.0),
    Task.DepthEstimation: TimestepPair(1.0, 0.0),
    Task.DepthConditioned: TimestepPair(0.0, 1.0),
}


@dataclass
class TaskMode:
    tag: Task
    steps: int = 20
    guidance: float = 2.0

    def __post_init__(self):
        if isinstance(self.tag, str):
            self.tag = Task(self.tag)
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")

    def trajectory(self) -> list[TimestepPair]:
        return uniform_trajectory(START[self.tag], self.steps)


@dataclass
class SampleBatch:
    rgb: torch.Tensor
    disparity: torch.Tensor
    class_id: Optional[torch.Tensor] = None


def _prepare(model: JointModel, mode: TaskMode, rgb, disparity, class_id, n, shape, gen):
    """Initial latents for both branches and the class condition to use."""
    h, w = shape
    if mode.tag is Task.DepthEstimation:
        if rgb is None:
            raise ValueError("depth estimation needs a clean rgb input")
        n = rgb.shape[0]
        class_id = None  # empty prompt
    elif mode.tag is Task.DepthConditioned:
        if disparity is None:
            raise ValueError("depth-conditioned generation needs a clean disparity input")
        n = disparity.shape[0]
    elif n is None:
        n = class_id.shape[0] if class_id is not None else 1

    # noise for the moving branches, x first, then y
    x0 = torch.randn(n, 3, h, w, generator=gen) if mode.tag is not Task.DepthEstimation else None
    y0 = torch.randn(n, 3, h, w, generator=gen) if mode.tag is not Task.DepthConditioned else None
    x_init = to_latent(rgb) if x0 is None else x0
    y_init = to_latent(encode_depth(disparity)) if y0 is None else y0
    for g, what in ((x_init, "rgb"), (y_init, "disparity")):
        if g.shape != (n, 3, h, w):
            raise ValueError(f"{what} input has shape {tuple(g.shape)}, expected {(n, 3, h, w)}")
    return x_init, y_init, class_id


def _finish(mode: TaskMode, x, y, rgb, disparity, class_id) -> SampleBatch:
    out_rgb = rgb if mode.tag is Task.DepthEstimation else from_latent(x).clamp(0.0, 1.0)
    out_d = disparity if mode.tag is Task.DepthConditioned else decode_depth(from_latent(y)).clamp(0.0, 1.0)
    return SampleBatch(out_rgb, out_d, class_id)


def _grid_shape(model: JointModel, rgb, disparity, canvas=None):
    if canvas is not None:
        return canvas
    if rgb is not None:
        return tuple(rgb.shape[-2:])
    if disparity is not None:
        return tuple(disparity.shape[-2:])
    s = model.cfg.image_size
    return (s, s)


@torch.no_grad()
def run_task(model: JointModel, mode: TaskMode, *, rgb: Optional[torch.Tensor] = None,
             disparity: Optional[torch.Tensor] = None, class_id: Optional[torch.Tensor] = None,
             n: Optional[int] = None, generator: torch.Generator) -> SampleBatch:
    shape = _grid_shape(model, rgb, disparity)
    x_init, y_init, cond = _prepare(model, mode, rgb, disparity, class_id, n, shape, generator)
    velocity = guided_velocity(model, cond, mode.guidance)
    x, y = euler_sample(velocity, x_init, y_init, mode.trajectory())
    return _finish(mode, x, y, rgb, disparity, cond)


# ---------------------------------------------------------------------------
# tiled sampling


def tile_starts(size: int, tile: int, overlap: int) -> list[int]:
    """Start offsets at stride ``tile - overlap``, with a final tile flush to the edge."""
    if not 0 < tile <= size:
        raise ValueError(f"tile size {tile} must lie in (0, {size}]")
    if not 0 <= overlap < tile:
        raise ValueError(f"overlap {overlap} must lie in [0, {tile})")
    stride = tile - overlap
    starts = list(range(0, size - tile + 1, stride))
    if starts[-1] != size - tile:
        starts.append(size - tile)
    return starts


def tile_weights(tile: int, feather: bool) -> torch.Tensor:
    if not feather:
        return torch.ones(tile, tile)
    c = (tile - 1) / 2.0
    r = torch.arange(tile, dtype=torch.float64) - c
    g = torch.exp(-(r ** 2) / (2 * (0.5 * tile) ** 2))
    return (g[:, None] * g[None]).float()


def coverage(canvas: tuple[int, int], tile: int, overlap: int, whole: bool) -> torch.Tensor:
    """Per-pixel number of estimates (uniform weighting) at one step."""
    h, w = canvas
    cnt = torch.zeros(h, w)
    for r in tile_starts(h, tile, overlap):
        for c in tile_starts(w, tile, overlap):
            cnt[r : r + tile, c : c + tile] += 1
    if whole:
        cnt += 1
    return cnt


def aggregate_velocity(velocity, x, y, pair, tile: int, overlap: int, whole: bool,
                       feather: bool = False) -> VelocityPair:
    """Average per-pixel velocity estimates from every tile and, optionally, the whole canvas."""
    h, w = x.shape[-2:]
    acc_x = torch.zeros_like(x)
    acc_y = torch.zeros_like(y)
    wsum = torch.zeros(h, w, dtype=x.dtype)
    tw = tile_weights(tile, feather).to(x.dtype)
    for r in tile_starts(h, tile, overlap):
        for c in tile_starts(w, tile, overlap):
            sl = (..., slice(r, r + tile), slice(c, c + tile))
            v = velocity(x[sl], y[sl], pair)
            acc_x[sl] += tw * v.v_x
            acc_y[sl] += tw * v.v_y
            wsum[r : r + tile, c : c + tile] += tw
    if whole:
        v = velocity(x, y, pair)
        one = torch.ones(h, w, dtype=x.dtype) if not feather else tw.mean()
        acc_x += one * v.v_x
        acc_y += one * v.v_y
        wsum += one
    return VelocityPair(acc_x / wsum, acc_y / wsum)


@torch.no_grad()
def tiled_sample(model: JointModel, mode: TaskMode, canvas_size: tuple[int, int], tile_size: int,
                 overlap: int, early_whole_fraction: float = 0.3, *, generator: torch.Generator,
                 rgb: Optional[torch.Tensor] = None, disparity: Optional[torch.Tensor] = None,
                 class_id: Optional[torch.Tensor] = None, n: Optional[int] = None,
                 feather: bool = False) -> SampleBatch:
    """Sample a canvas larger than the training size.

    Each Euler step averages velocity estimates from overlapping tiles and,
    during the first ``early_whole_fraction`` of the steps, one extra estimate
    from the whole canvas; then a single update is applied.
    """
    if not 0.0 <= early_whole_fraction <= 1.0:
        raise ValueError("early_whole_fraction must lie in [0, 1]")
    h, w = canvas_size
    if tile_size > min(h, w):
        raise ValueError(f"tile {tile_size} larger than canvas {canvas_size}")
    tile_starts(h, tile_size, overlap)
    shape = (h, w)
    x, y, cond = _prepare(model, mode, rgb, disparity, class_id, n, shape, generator)
    velocity = guided_velocity(model, cond, mode.guidance)
    traj = mode.trajectory()
    n_whole = int(round(early_whole_fraction * mode.steps))
    for k, (cur, nxt) in enumerate(zip(traj, traj[1:])):
        dx, dy = nxt.t_x - cur.t_x, nxt.t_y - cur.t_y
        v = aggregate_velocity(velocity, x, y, cur, tile_size, overlap, k < n_whole, feather)
        if dx != 0.0:
            x = x + dx * v.v_x
        if dy != 0.0:
            y = y + dy * v.v_y
    return _finish(mode, x, y, rgb, disparity, cond)


# ---------------------------------------------------------------------------
# feature PCA


@dataclass
class FeatureMaps:
    tokens_x: np.ndarray  # (B, N, D)
    tokens_y: np.ndarray
    maps_x: np.ndarray  # (B, rows, cols, 3) projections on the top-3 components
    maps_y: np.ndarray
    components_x: np.ndarray  # (3, D), orthonormal rows
    components_y: np.ndarray
    layout: tuple[int, int]


def pca(tokens: np.ndarray, k: int = 3):
    """Top-``k`` principal directions of (M, D) rows; returns (components, projections, mean)."""
    mean = tokens.mean(axis=0)
    centered = tokens - mean
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:k]
    return comps, centered @ comps.T, mean


@torch.no_grad()
def extract_features(model: JointModel, rgb: torch.Tensor, disparity: torch.Tensor,
                     pair: TimestepPair, block_index: int, *, generator: torch.Generator,
                     class_id: Optional[torch.Tensor] = None) -> FeatureMaps:
    """Noise clean inputs to ``pair``, capture both branches' image tokens after a block,
    and project each branch's tokens (pooled over the batch) on its top-3 principal components."""
    b = rgb.shape[0]
    x1 = to_latent(rgb)
    y1 = to_latent(encode_depth(disparity))
    x0 = torch.randn(x1.shape, generator=generator)
    y0 = torch.randn(y1.shape, generator=generator)
    xt = interpolate(x0, x1, pair.t_x)
    yt = interpolate(y0, y1, pair.t_y)
    if class_id is None:
        class_id = torch.full((b,), model.null_class, dtype=torch.long)
    tx, ty, layout = model.block_tokens(xt, yt, pair, class_id, block_index)
    tx, ty = tx.double().numpy(), ty.double().numpy()
    d = tx.shape[-1]
    cx, px, _ = pca(tx.reshape(-1, d))
    cy, py, _ = pca(ty.reshape(-1, d))
    rows, cols = layout
    return FeatureMaps(tx, ty, px.reshape(b, rows, cols, 3), py.reshape(b, rows, cols, 3), cx, cy, layout)


def minmax_channels(maps: np.ndarray) -> np.ndarray:
    """Per-channel min-max normalization to [0, 1] over all leading axes."""
    lo = maps.reshape(-1, maps.shape[-1]).min(axis=0)
    hi = maps.reshape(-1, maps.shape[-1]).max(axis=0)
    return (maps - lo) / np.where(hi > lo, hi - lo, 1.0)
