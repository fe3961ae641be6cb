"""DiskWorld: procedural RGB / disparity pairs with an exact depth-from-colour oracle.

A scene is a handful of flat disks over a black background. Each disk's
colour is a fully saturated hue that encodes its disparity, so the disparity
map can be read back from the image alone. Larger disparity means nearer,
so it occludes.

Rendered values are quantized the way they are stored on disk (8-bit RGB,
16-bit disparity), which keeps in-memory scenes and files identical.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import io
from .rng import substream

D_MIN, D_MAX = 0.1, 1.0
HUE_SPAN = 300.0  # degrees; red (d=0.1) .. magenta (d=1.0), leaving a gap before wrap-around
BLACK_VALUE = 0.5  # pixels whose brightest channel is below this decode as background
MIN_GAP = 0.05
MAX_DISKS = 6
MIN_RADIUS, MAX_RADIUS = 3.0, 8.0


@dataclass(frozen=True)
class Disk:
    cx: float
    cy: float
    radius: float
    disparity: float


@dataclass
class SceneSpec:
    disks: list[Disk]
    image_size: int = 32

    def validate(self, allow_empty: bool = False):
        if not allow_empty and not 1 <= len(self.disks) <= MAX_DISKS:
            raise ValueError(f"scene needs 1..{MAX_DISKS} disks, has {len(self.disks)}")
        if len(self.disks) > MAX_DISKS:
            raise ValueError(f"scene has {len(self.disks)} disks, max {MAX_DISKS}")
        for d in self.disks:
            if d.radius < 2.0:
                raise ValueError(f"disk radius {d.radius} < 2 px")
            if not D_MIN <= d.disparity <= D_MAX:
                raise ValueError(f"disparity {d.disparity} outside [{D_MIN}, {D_MAX}]")
        ds = sorted(d.disparity for d in self.disks)
        if any(b - a < MIN_GAP - 1e-9 for a, b in zip(ds, ds[1:])):
            raise ValueError(f"disparities closer than {MIN_GAP}: {ds}")


@dataclass
class ModalityPair:
    """``rgb`` is H x W x 3 in [0, 1]; ``disparity`` is H x W in [0, 1]."""

    rgb: np.ndarray
    disparity: np.ndarray
    class_id: int = 0


# ---------------------------------------------------------------------------
# hue codec


def disparity_to_hue(d):
    return (np.asarray(d, dtype=np.float64) - D_MIN) / (D_MAX - D_MIN) * HUE_SPAN


def hue_to_rgb(h):
    """Fully saturated, full-value HSV colour for hue in degrees; (..., 3)."""
    h = np.asarray(h, dtype=np.float64) / 60.0
    # standard HSV->RGB with S = V = 1: channel n peaks around hue sector n
    def ch(n):
        k = (n + h) % 6.0
        return 1.0 - np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)

    return np.stack([ch(5.0), ch(3.0), ch(1.0)], axis=-1)


def rgb_to_hue(rgb):
    """Hue in degrees [0, 360) of (..., 3) colours; greys get hue 0."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    c = mx - mn
    safe = np.where(c > 0, c, 1.0)
    h = np.where(
        mx == r, ((g - b) / safe) % 6.0,
        np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    )
    return np.where(c > 0, 60.0 * h, 0.0)


def encode_disparity(d) -> np.ndarray:
    return hue_to_rgb(disparity_to_hue(d))


def decode_disparity_oracle(rgb) -> np.ndarray:
    """Invert the hue codec per pixel; near-black pixels decode to 0.

    Hues in the unused (300, 360) gap snap to the nearer end of the code range.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    h = rgb_to_hue(rgb)
    h = np.where(h > HUE_SPAN, np.where(h > (HUE_SPAN + 360.0) / 2, 0.0, HUE_SPAN), h)
    d = D_MIN + h / HUE_SPAN * (D_MAX - D_MIN)
    return np.where(rgb.max(axis=-1) < BLACK_VALUE, 0.0, d)


# ---------------------------------------------------------------------------
# rendering


def quantize_disparity(d):
    return np.round(np.asarray(d, dtype=np.float64) * 65535.0) / 65535.0


def render_scene(spec: SceneSpec) -> ModalityPair:
    spec.validate(allow_empty=True)
    n = spec.image_size
    ys, xs = np.mgrid[0:n, 0:n] + 0.5
    disparity = np.zeros((n, n))
    # far to near: nearer disks overwrite
    for disk in sorted(spec.disks, key=lambda d: d.disparity):
        inside = (xs - disk.cx) ** 2 + (ys - disk.cy) ** 2 <= disk.radius ** 2
        disparity[inside] = disk.disparity
    disparity = quantize_disparity(disparity)
    rgb = np.where(disparity[..., None] > 0, encode_disparity(np.maximum(disparity, D_MIN)), 0.0)
    rgb = np.round(rgb * 255.0) / 255.0
    return ModalityPair(rgb, disparity, len(spec.disks))


def sample_scene(rng: np.random.Generator, image_size: int = 32) -> SceneSpec:
    k = int(rng.integers(1, MAX_DISKS + 1))
    while True:
        ds = rng.uniform(D_MIN, D_MAX, size=k)
        s = np.sort(ds)
        if k == 1 or np.min(np.diff(s)) >= MIN_GAP:
            break
    disks = [
        Disk(float(rng.uniform(0, image_size)), float(rng.uniform(0, image_size)),
             float(rng.uniform(MIN_RADIUS, MAX_RADIUS)), float(d))
        for d in ds
    ]
    return SceneSpec(disks, image_size)


def scene_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return substream(seed, f"data/{split}", index)


def generate_scenes(n: int, seed: int, split: str = "train", image_size: int = 32):
    """Render ``n`` scenes as stacked arrays: rgb (n, H, W, 3), disparity (n, H, W), class ids."""
    rgb = np.zeros((n, image_size, image_size, 3))
    disp = np.zeros((n, image_size, image_size))
    cls = np.zeros(n, dtype=np.int64)
    for i in range(n):
        pair = render_scene(sample_scene(scene_rng(seed, split, i), image_size))
        rgb[i], disp[i], cls[i] = pair.rgb, pair.disparity, pair.class_id
    return rgb, disp, cls


MANIFEST_HEADER = ["id", "rgb_path", "depth_path", "class_id", "n_disks"]


@dataclass
class Manifest:
    root: Path
    rows: list[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)


def generate_dataset(n: int, seed: int, out_dir, split: str = "train",
                     image_size: int = 32) -> Manifest:
    """Write ``n`` scenes as PPM/PGM files plus ``manifest.csv`` under ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {out}: {e}") from e
    rows = []
    if n:
        (out / "rgb").mkdir(exist_ok=True)
        (out / "depth").mkdir(exist_ok=True)
    for i in range(n):
        pair = render_scene(sample_scene(scene_rng(seed, split, i), image_size))
        sid = f"{i:06d}"
        rgb_rel, depth_rel = f"rgb/{sid}.ppm", f"depth/{sid}.pgm"
        io.write_ppm(out / rgb_rel, io.to_u8(pair.rgb))
        io.write_pgm16(out / depth_rel, io.to_u16(pair.disparity))
        rows.append({"id": sid, "rgb_path": rgb_rel, "depth_path": depth_rel,
                     "class_id": pair.class_id, "n_disks": pair.class_id})
    path = out / "manifest.csv"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_HEADER, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return Manifest(out, rows)


def read_manifest(root) -> Manifest:
    root = Path(root)
    path = root / "manifest.csv"
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != MANIFEST_HEADER:
                raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
            rows = list(reader)
    except OSError as e:
        raise OSError(f"cannot read manifest {path}: {e}") from e
    for r in rows:
        r["class_id"] = int(r["class_id"])
        r["n_disks"] = int(r["n_disks"])
    return Manifest(root, rows)


def load_dataset(root, limit: Optional[int] = None):
    """Load a written dataset back into arrays (same layout as :func:`generate_scenes`)."""
    m = read_manifest(root)
    rows = m.rows if limit is None else m.rows[:limit]
    rgb, disp, cls = [], [], []
    for r in rows:
        rgb.append(io.from_u8(io.read_ppm(os.path.join(m.root, r["rgb_path"]))))
        disp.append(io.from_u16(io.read_pgm16(os.path.join(m.root, r["depth_path"]))))
        cls.append(r["class_id"])
    if not rows:
        return np.zeros((0, 0, 0, 3)), np.zeros((0, 0, 0)), np.zeros(0, dtype=np.int64)
    return np.stack(rgb), np.stack(disp), np.asarray(cls, dtype=np.int64)
