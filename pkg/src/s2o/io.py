"""S2OT tensor files and PGM/CSV heatmap export.

S2OT layout (all little-endian)::

    b"S2OT"  u32 version (=1)  u32 Z  u32 H  u32 L  u32 D  float32[Z*H*L*D]
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import as_tensor4

MAGIC = b"S2OT"
VERSION = 1
_HEADER = struct.Struct("<4s5I")

HEATMAP_MODES = ("original", "kv", "qkv")
MAX_HEATMAP_SIDE = 2048


class TensorFileError(ValueError):
    pass


def save_tensor_file(t, path) -> None:
    t = as_tensor4(t)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, *t.shape))
        f.write(t.astype("<f4", copy=False).tobytes(order="C"))


def load_tensor_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise TensorFileError("not an S2OT file")
    if len(raw) < _HEADER.size:
        raise TensorFileError("size mismatch")
    _, version, *dims = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise TensorFileError("unsupported version")
    if min(dims) < 1:
        raise TensorFileError(f"invalid dims {dims}")
    expected = _HEADER.size + 4 * int(np.prod(dims))
    if len(raw) != expected:
        raise TensorFileError("size mismatch")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    return data.astype(np.float32).reshape(dims)


def permuted_heatmap(weights: np.ndarray, plan=None, mode: str = "original", z: int = 0, h: int = 0) -> np.ndarray:
    """Reorder an [L, L] attention map the way the kernel visits it.

    ``kv``: each row lists its segment's prefix keys in ``kv_perm`` order,
    then the in-segment keys in place. ``qkv``: additionally lists each
    segment's rows in ``q_perm`` order.
    """
    if mode not in HEATMAP_MODES:
        raise ValueError(f"mode must be one of {HEATMAP_MODES}")
    w = np.asarray(weights, dtype=np.float64)
    if mode == "original":
        return w.copy()
    if plan is None:
        raise ValueError(f"mode {mode!r} needs a permutation plan")
    seg = plan.segment
    L = w.shape[0]
    out = np.empty_like(w)
    for n in range(seg.n_segments):
        start, stop = seg.bounds(n)
        cols = np.concatenate([plan.kv_perm[n][z, h], np.arange(start, L)])
        rows = np.arange(start, stop)
        if mode == "qkv":
            rows = start + plan.q_perm[n][z, h]
        out[start:stop] = w[rows][:, cols]
    return out


def pool_mass(weights, pool: int) -> np.ndarray:
    """Sum mass over ``pool`` x ``pool`` blocks (edges zero-padded)."""
    w = np.asarray(weights, dtype=np.float64)
    if pool < 1:
        raise ValueError("pool factor must be >= 1")
    rows, cols = -(-w.shape[0] // pool), -(-w.shape[1] // pool)
    if max(rows, cols) > MAX_HEATMAP_SIDE:
        raise ValueError(
            f"{w.shape[0]}x{w.shape[1]} map is too large for {pool}x pooling; pass a larger pool factor"
        )
    if pool == 1:
        return w
    padded = np.zeros((rows * pool, cols * pool))
    padded[: w.shape[0], : w.shape[1]] = w
    return padded.reshape(rows, pool, cols, pool).sum(axis=(1, 3))


def heatmap_pixels(weights: np.ndarray, pool: int = 1, floor: float = 1e-8) -> np.ndarray:
    """Log-scaled 8-bit image; one pixel per ``pool`` x ``pool`` block of summed mass."""
    w = pool_mass(weights, pool)
    # Pooled blocks can hold more than unit mass.
    top = max(float(w.max()), 1.0)
    lo, hi = np.log10(floor), np.log10(top)
    scaled = (np.log10(np.clip(w, floor, top)) - lo) / (hi - lo)
    return np.round(255 * scaled).astype(np.uint8)


def write_pgm(pixels: np.ndarray, path) -> None:
    img = np.asarray(pixels, dtype=np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(img.tobytes(order="C"))


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def export_heatmap(weights, path, pool: int = 1, csv_path=None) -> np.ndarray:
    """Write the log-scaled PGM, and optionally the raw (pooled) mass as CSV."""
    pixels = heatmap_pixels(weights, pool)
    write_pgm(pixels, path)
    if csv_path is not None:
        np.savetxt(csv_path, pool_mass(weights, pool), delimiter=",", fmt="%.9g")
    return pixels
