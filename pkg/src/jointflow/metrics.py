"""Depth accuracy, joint consistency and MMD.

All depth quantities are disparities in [0, 1]. Ratio metrics only look at
pixels whose reference value is at least ``floor`` (the disks; background is 0).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .world import decode_disparity_oracle

log = logging.getLogger(__name__)

FLOOR = 1e-3


@dataclass
class DepthEvalReport:
    absrel: float
    delta1: float
    n_pixels: int
    scale: float
    shift: float
    background_rate: float = float("nan")


def align_affine(pred, gt, mask=None) -> tuple[float, float]:
    """Least-squares ``(s, b)`` minimizing ``sum (s*pred + b - gt)^2`` over ``mask``.

    A constant prediction has no defined scale; then ``s = 1`` and only the
    shift is fitted.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if mask is None:
        mask = np.ones(gt.shape, dtype=bool)
    p, g = pred[mask], gt[mask]
    if p.size < 2:
        raise ValueError("align_affine needs at least two valid pixels")
    pc = p - p.mean()
    var = float(pc @ pc)
    if var <= 1e-12 * max(1.0, float(p @ p)):
        log.warning("align_affine: constant prediction, falling back to shift-only")
        return 1.0, float(g.mean() - p.mean())
    s = float(pc @ (g - g.mean())) / var
    return s, float(g.mean() - s * p.mean())


def _ratio_mask(gt, mask, floor):
    gt = np.asarray(gt, dtype=np.float64)
    m = gt >= floor
    if mask is not None:
        m &= mask
    if not m.any():
        raise ValueError("empty evaluation mask")
    return m


def absrel(pred, gt, mask=None, floor: float = FLOOR) -> float:
    m = _ratio_mask(gt, mask, floor)
    p = np.asarray(pred, dtype=np.float64)[m]
    g = np.asarray(gt, dtype=np.float64)[m]
    return float(np.mean(np.abs(p - g) / g))


def delta1(pred, gt, mask=None, floor: float = FLOOR) -> float:
    m = _ratio_mask(gt, mask, floor)
    # non-positive predictions are clamped so they count as misses, not hits
    p = np.maximum(np.asarray(pred, dtype=np.float64)[m], floor)
    g = np.asarray(gt, dtype=np.float64)[m]
    return float(np.mean(np.maximum(p / g, g / p) < 1.25))


def evaluate_depth(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray],
                   floor: float = FLOOR) -> DepthEvalReport:
    """Per-image affine alignment fitted on the foreground, metrics on the same pixels.

    Background is scored separately: ``background_rate`` is the share of
    background pixels whose aligned value stays below 0.05.

    Returns the mean over images; ``scale`` / ``shift`` are the mean fitted values.
    """
    rows = []
    bg_hits = bg_total = 0
    for pred, gt in zip(preds, gts):
        fg = np.asarray(gt) >= floor
        n = int(fg.sum())
        if n < 2:
            continue
        s, b = align_affine(pred, gt, fg)
        aligned = s * np.asarray(pred, dtype=np.float64) + b
        rows.append((absrel(aligned, gt, None, floor), delta1(aligned, gt, None, floor), n, s, b))
        bg = ~fg
        bg_hits += int((aligned[bg] < 0.05).sum())
        bg_total += int(bg.sum())
    if not rows:
        raise ValueError("no image has foreground pixels")
    a = np.array(rows)
    return DepthEvalReport(
        absrel=float(a[:, 0].mean()), delta1=float(a[:, 1].mean()), n_pixels=int(a[:, 2].sum()),
        scale=float(a[:, 3].mean()), shift=float(a[:, 4].mean()),
        background_rate=bg_hits / bg_total if bg_total else float("nan"),
    )


def joint_consistency(rgb: np.ndarray, disparity: np.ndarray, floor: float = FLOOR) -> Optional[float]:
    """AbsRel of the generated disparity against the colour oracle's reading of the image.

    ``rgb`` is H x W x 3. Returns ``None`` when the oracle finds no foreground.
    """
    oracle = decode_disparity_oracle(rgb)
    if not (oracle >= floor).any():
        return None
    return absrel(disparity, oracle, None, floor)


def oracle_absrel(rgb: np.ndarray, reference_disparity: np.ndarray, floor: float = FLOOR) -> float:
    """AbsRel of the oracle's reading of ``rgb`` against a reference disparity map."""
    return absrel(decode_disparity_oracle(rgb), reference_disparity, None, floor)


def pool4(grid: np.ndarray) -> np.ndarray:
    """4x average pooling over the two spatial axes of (H, W) or (H, W, C)."""
    g = np.asarray(grid, dtype=np.float64)
    h, w = g.shape[:2]
    g = g[: h - h % 4, : w - w % 4]
    return g.reshape(h // 4, 4, w // 4, 4, *g.shape[2:]).mean(axis=(1, 3))


def flatten_pooled(grids) -> np.ndarray:
    return np.stack([pool4(g).ravel() for g in grids])


def median_bandwidth(*sets: np.ndarray) -> float:
    """Median pairwise Euclidean distance over the union of the (M, D) row sets."""
    z = np.concatenate(sets)
    d = cdist(z, z)
    iu = np.triu_indices(len(z), 1)
    med = float(np.median(d[iu]))
    return med if med > 0 else 1.0


def mmd_rbf(set_a, set_b, bandwidth: Optional[float] = None) -> float:
    """Unbiased MMD^2 with ``k(a, b) = exp(-|a - b|^2 / (2 bw^2))`` on 4x pooled grids."""
    if len(set_a) == 0 or len(set_b) == 0:
        raise ValueError("mmd_rbf needs two nonempty sets")
    if len(set_a) < 2 or len(set_b) < 2:
        raise ValueError("unbiased MMD needs at least two samples per set")
    a = flatten_pooled(set_a)
    b = flatten_pooled(set_b)
    bw = median_bandwidth(a, b) if bandwidth is None else float(bandwidth)

    def k(u, v):
        return np.exp(-cdist(u, v, "sqeuclidean") / (2.0 * bw * bw))

    m, n = len(a), len(b)
    kaa, kbb, kab = k(a, a), k(b, b), k(a, b)
    term_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    return float(term_a + term_b - 2.0 * kab.mean())


REPORT_HEADER = ["metric", "value", "n", "notes"]


def write_report(path, rows: Sequence[tuple]) -> None:
    """Write ``metric,value,n,notes`` rows as UTF-8 CSV."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for metric, value, n, notes in rows:
            w.writerow([metric, f"{value:.6g}" if isinstance(value, float) else value, n, notes])
