"""Gaussian Q/K/V with planted vertical, horizontal and slash stripes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PATTERNS = ("gaussian", "vertical-stripes", "horizontal-stripes", "slash-stripes", "mixed")


@dataclass(frozen=True)
class SyntheticSpec:
    """How to plant stripes.

    vertical-stripes
        ``stripe_count`` key rows get ``stripe_gain * u`` and every query gets
        ``stripe_gain * u`` for a per-head unit direction ``u``; those keys
        become columns that every query attends to.
    horizontal-stripes
        All keys share a component ``key_bias * w``; ``stripe_count`` query
        rows get ``stripe_gain * w``. Those rows score high against the shared
        key direction and attend more sharply.
    slash-stripes
        Query ``i`` and key ``i - delta`` for each of ``stripe_count`` offsets
        receive matching rotating (RoPE-like) directions, so score peaks run
        along diagonals.
    mixed
        All three at once.
    """

    pattern: str = "mixed"
    stripe_count: int = 16
    stripe_gain: float = 4.0
    seed: int = 0
    key_bias: float = 1.0

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}; expected one of {PATTERNS}")
        if self.stripe_count < 0:
            raise ValueError("stripe_count must be non-negative")
        if not np.isfinite(self.stripe_gain):
            raise ValueError("stripe_gain must be finite")


def _unit(rng: np.random.Generator, d: int) -> np.ndarray:
    u = rng.standard_normal(d)
    return u / np.linalg.norm(u)


def _plant_vertical(rng, q, k, count, gain):
    L, D = q.shape
    u = _unit(rng, D)
    cols = rng.choice(L, size=count, replace=False)
    k[cols] += gain * u
    q += gain * u
    return cols


def _plant_horizontal(rng, q, k, count, gain, key_bias):
    L, D = q.shape
    w = _unit(rng, D)
    rows = rng.choice(L, size=count, replace=False)
    k += key_bias * w
    q[rows] += gain * w
    return rows


def _plant_slash(rng, q, k, count, gain):
    L, D = q.shape
    n_freq = max(1, D // 4)
    basis, _ = np.linalg.qr(rng.standard_normal((D, 2 * n_freq)))
    freqs = np.pi * rng.uniform(0.05, 1.0, size=n_freq)
    pos = np.arange(L)

    def rotating(p):
        ang = np.outer(p, freqs)
        coords = np.concatenate([np.cos(ang), np.sin(ang)], axis=1) / np.sqrt(n_freq)
        return coords @ basis.T

    offsets = rng.choice(np.arange(1, L), size=count, replace=False)
    q += gain * rotating(pos)
    for delta in offsets:
        k += (gain / np.sqrt(count)) * rotating(pos + delta)
    return offsets


def generate_synthetic(spec: SyntheticSpec, dims) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return float32 (Q, K, V) of shape ``dims`` = (Z, H, L, D). Deterministic in ``spec.seed``."""
    Z, H, L, D = (int(x) for x in dims)
    if min(Z, H, L, D) < 1:
        raise ValueError(f"all dims must be >= 1, got {dims}")
    if spec.pattern != "gaussian" and spec.stripe_count >= L:
        raise ValueError(f"stripe_count={spec.stripe_count} must be smaller than L={L}")
    rng = np.random.default_rng(spec.seed)
    Q = rng.standard_normal((Z, H, L, D))
    K = rng.standard_normal((Z, H, L, D))
    V = rng.standard_normal((Z, H, L, D))
    if spec.pattern == "gaussian" or spec.stripe_count == 0 or spec.stripe_gain == 0:
        return Q.astype(np.float32), K.astype(np.float32), V.astype(np.float32)

    kinds = {
        "vertical-stripes": ("v",),
        "horizontal-stripes": ("h",),
        "slash-stripes": ("s",),
        "mixed": ("v", "h", "s"),
    }[spec.pattern]
    for z in range(Z):
        for h in range(H):
            q, k = Q[z, h], K[z, h]
            if "v" in kinds:
                _plant_vertical(rng, q, k, spec.stripe_count, spec.stripe_gain)
            if "h" in kinds:
                _plant_horizontal(rng, q, k, spec.stripe_count, spec.stripe_gain, spec.key_bias)
            if "s" in kinds:
                _plant_slash(rng, q, k, spec.stripe_count, spec.stripe_gain)
    return Q.astype(np.float32), K.astype(np.float32), V.astype(np.float32)
