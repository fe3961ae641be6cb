"""File formats: binary Netpbm images and the tensor checkpoint container.

Netpbm: P6 (RGB, maxval 255) and P5 (grey, maxval 65535, big-endian samples).
Headers are whitespace-separated tokens; a ``#`` comment running to the end of
its line is tolerated between tokens.

Checkpoint layout (all integers little-endian)::

    b"JFLOW1\\0"  u32 record_count
    per record:  u16 name_len, name (UTF-8), u8 dtype (0 = f32), u8 rank,
                 rank x u32 dims, row-major f32 payload
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

CKPT_MAGIC = b"JFLOW1\0"
DTYPE_F32 = 0


class FormatError(ValueError):
    """Malformed or truncated file content; the message carries the byte offset."""


# ---------------------------------------------------------------------------
# Netpbm


def to_u8(rgb: np.ndarray) -> np.ndarray:
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_u8(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float64) / 255.0


def to_u16(d: np.ndarray) -> np.ndarray:
    return np.round(np.clip(d, 0.0, 1.0) * 65535.0).astype(np.uint16)


def from_u16(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float64) / 65535.0


def _header(kind: bytes, width: int, height: int, maxval: int) -> bytes:
    return b"%s\n%d %d\n%d\n" % (kind, width, height, maxval)


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"write_ppm wants an H x W x 3 uint8 array, got {rgb.dtype} {rgb.shape}")
    h, w, _ = rgb.shape
    Path(path).write_bytes(_header(b"P6", w, h, 255) + np.ascontiguousarray(rgb).tobytes())


def write_pgm16(path, grey: np.ndarray) -> None:
    grey = np.asarray(grey)
    if grey.dtype != np.uint16 or grey.ndim != 2:
        raise ValueError(f"write_pgm16 wants an H x W uint16 array, got {grey.dtype} {grey.shape}")
    h, w = grey.shape
    Path(path).write_bytes(_header(b"P5", w, h, 65535) + grey.astype(">u2").tobytes())


def _parse_header(data: bytes, where: str):
    """Return (magic, width, height, maxval, payload_offset)."""
    tokens = []
    pos = 0
    comments = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FormatError(f"{where}: header truncated at byte {pos}")
        if data[pos : pos + 1] == b"#":
            comments += 1
            if comments > 1:
                raise FormatError(f"{where}: more than one comment line at byte {pos}")
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise FormatError(f"{where}: unterminated comment at byte {pos}")
            pos = nl + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        tokens.append((data[start:pos], start))
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError(f"{where}: missing whitespace after maxval at byte {pos}")
    magic = tokens[0][0]
    nums = []
    for tok, off in tokens[1:]:
        if not tok.isdigit():
            raise FormatError(f"{where}: expected a decimal integer at byte {off}, got {tok!r}")
        nums.append(int(tok))
    width, height, maxval = nums
    if width <= 0 or height <= 0:
        raise FormatError(f"{where}: bad dimensions {width}x{height} at byte {tokens[1][1]}")
    return magic, width, height, maxval, pos + 1, tokens[3][1]


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise OSError(f"cannot read {path}: {e}") from e


def read_ppm(path) -> np.ndarray:
    """Read a P6 file with maxval 255 into an H x W x 3 uint8 array."""
    data = _read(path)
    magic, w, h, maxval, off, max_off = _parse_header(data, str(path))
    if magic != b"P6":
        raise FormatError(f"{path}: expected P6 at byte 0, got {magic!r}")
    if maxval != 255:
        raise FormatError(f"{path}: P6 maxval must be 255, got {maxval} at byte {max_off}")
    need = w * h * 3
    if len(data) - off < need:
        raise FormatError(f"{path}: payload truncated at byte {len(data)}, "
                          f"expected {need} bytes from byte {off}")
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=off).reshape(h, w, 3).copy()


def read_pgm16(path) -> np.ndarray:
    """Read a P5 file with maxval 65535 into an H x W uint16 array."""
    data = _read(path)
    magic, w, h, maxval, off, max_off = _parse_header(data, str(path))
    if magic != b"P5":
        raise FormatError(f"{path}: expected P5 at byte 0, got {magic!r}")
    if maxval != 65535:
        raise FormatError(f"{path}: 16-bit P5 maxval must be 65535, got {maxval} at byte {max_off}")
    need = w * h * 2
    if len(data) - off < need:
        raise FormatError(f"{path}: payload truncated at byte {len(data)}, "
                          f"expected {need} bytes from byte {off}")
    a = np.frombuffer(data, dtype=">u2", count=w * h, offset=off).reshape(h, w)
    return a.astype(np.uint16)


# ---------------------------------------------------------------------------
# checkpoints


def write_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named arrays; every array is stored as f32 in the given order."""
    parts = [CKPT_MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f4")
        a = np.ascontiguousarray(a).reshape(a.shape)  # ascontiguousarray promotes 0-d to 1-d
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or a.ndim > 0xFF:
            raise ValueError(f"record {name!r} does not fit the format")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", DTYPE_F32, a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_checkpoint(path) -> dict[str, np.ndarray]:
    data = _read(path)
    n_magic = len(CKPT_MAGIC)
    if data[:n_magic] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0")
    pos = n_magic

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise FormatError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    (count,) = take("<I")
    out = {}
    for _ in range(count):
        (n,) = take("<H")
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated record name at byte {pos}")
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        dtype, rank = take("<BB")
        if dtype != DTYPE_F32:
            raise FormatError(f"{path}: unknown dtype tag {dtype} at byte {pos - 2}")
        dims = take(f"<{rank}I") if rank else ()
        size = int(np.prod(dims, dtype=np.int64)) * 4
        if pos + size > len(data):
            raise FormatError(f"{path}: payload of {name!r} truncated at byte {len(data)}")
        out[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos).reshape(dims).copy()
        pos += size
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes at byte {pos}")
    return out
