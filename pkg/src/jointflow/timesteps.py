"""Training-time timestep distributions and the unbalanced pair sampler.

Both distributions push a standard normal draw through the logistic function
and then through the shift map ``t = 1 - s*sig / (1 + (s - 1)*sig)``:

* ``f`` uses ``s = 3.1582`` and leans toward noise (small t);
* ``g`` uses ``s = 0.25`` and leans toward clean data (t near 1).
"""

from __future__ import annotations

import enum

import numpy as np
from scipy.special import expit, logit
from scipy.stats import norm

F_SHIFT = 3.1582
G_SHIFT = 0.25


class PairSampleKind(enum.Enum):
    Shared = "shared"
    FxGy = "fx_gy"
    GxFy = "gx_fy"


def shift_map(z, s: float):
    """Map standard-normal ``z`` to a time in (0, 1); decreasing in ``z``."""
    sig = expit(np.asarray(z, dtype=np.float64))
    return 1.0 - sig * s / (1.0 + (s - 1.0) * sig)


def shift_cdf(t, s: float):
    """Closed-form CDF of ``shift_map(Z, s)`` for ``Z ~ N(0, 1)``."""
    p = 1.0 - np.asarray(t, dtype=np.float64)
    sig = p / (s - (s - 1.0) * p)
    with np.errstate(divide="ignore"):
        return norm.sf(logit(sig))


def sample_f(rng: np.random.Generator, size=None):
    return shift_map(rng.standard_normal(size), F_SHIFT)


def sample_g(rng: np.random.Generator, size=None):
    return shift_map(rng.standard_normal(size), G_SHIFT)


def sample_pair(rng: np.random.Generator) -> tuple[tuple[float, float], PairSampleKind]:
    """One (t_x, t_y) draw: 1/2 shared from f, 1/4 (f, g), 1/4 (g, f)."""
    u = rng.random()
    if u < 0.5:
        t = float(sample_f(rng))
        return (t, t), PairSampleKind.Shared
    a, b = float(sample_f(rng)), float(sample_g(rng))
    if u < 0.75:
        return (a, b), PairSampleKind.FxGy
    return (b, a), PairSampleKind.GxFy


_KIND_CODES = (PairSampleKind.Shared, PairSampleKind.FxGy, PairSampleKind.GxFy)


def sample_pairs(rng: np.random.Generator, n: int, unbalanced: bool = True):
    """Vectorized ``sample_pair``.

    Returns ``(t_x, t_y, kind)`` arrays where ``kind`` holds 0 (Shared),
    1 (FxGy) or 2 (GxFy). With ``unbalanced=False`` every pair is Shared.
    """
    u = rng.random(n)
    zf = rng.standard_normal(n)
    zg = rng.standard_normal(n)
    tf = shift_map(zf, F_SHIFT)
    tg = shift_map(zg, G_SHIFT)
    if not unbalanced:
        return tf.copy(), tf.copy(), np.zeros(n, dtype=np.int8)
    kind = np.where(u < 0.5, 0, np.where(u < 0.75, 1, 2)).astype(np.int8)
    t_x = np.where(kind == 2, tg, tf)
    t_y = np.where(kind == 0, tf, np.where(kind == 1, tg, tf))
    return t_x, t_y, kind


def kind_of(code: int) -> PairSampleKind:
    return _KIND_CODES[int(code)]
