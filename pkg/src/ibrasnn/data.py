"""Deterministic synthetic datasets and IBRT dataset files."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from . import container

GENERATORS = ("blobs", "moons", "digits")

# 3x5 stroke glyphs for 0-9, scaled into an 8x8 frame
_GLYPHS = [
    "111101101101111", "010110010010111", "111001111100111", "111001111001111", "101101111001001",
    "111100111001111", "111100111101111", "111001001001001", "111101111101111", "111101111001111",
]


def blobs(n: int, k: int = 2, seed: int = 0, dim: int = 2, spread: float = 0.6):
    """``k`` isotropic Gaussian clusters with centres on a circle of radius 3."""
    rng = np.random.default_rng(seed)
    ang = 2 * np.pi * np.arange(k) / max(k, 1)
    centres = np.zeros((k, dim))
    centres[:, 0], centres[:, 1 % dim] = 3 * np.cos(ang), 3 * np.sin(ang)
    y = (np.arange(n) % k).astype(np.int32)
    rng.shuffle(y)
    x = centres[y] + spread * rng.standard_normal((n, dim))
    return x.astype(np.float32), y


def moons(n: int, seed: int = 0, noise: float = 0.1):
    rng = np.random.default_rng(seed)
    y = (np.arange(n) % 2).astype(np.int32)
    rng.shuffle(y)
    t = rng.uniform(0, np.pi, n)
    x = np.where(y[:, None] == 0,
                 np.stack([np.cos(t), np.sin(t)], 1),
                 np.stack([1 - np.cos(t), 0.5 - np.sin(t)], 1))
    x = x + noise * rng.standard_normal((n, 2))
    return x.astype(np.float32), y


def _glyph_image(d: int) -> np.ndarray:
    g = np.array([int(c) for c in _GLYPHS[d]], dtype=np.float32).reshape(5, 3)
    img = np.zeros((8, 8), dtype=np.float32)
    # each glyph cell becomes a 1-pixel-high, 2-pixel-wide block in rows 1..5, cols 1..6
    img[1:6, 1:7] = np.repeat(g, 2, axis=1)
    return img


def digits(n: int, seed: int = 0, noise: float = 0.15):
    """8x8 procedural digit images, shape [n, 1, 8, 8], labels balanced within one."""
    rng = np.random.default_rng(seed)
    y = (np.arange(n) % 10).astype(np.int32)
    rng.shuffle(y)
    x = np.zeros((n, 1, 8, 8), dtype=np.float32)
    for i, d in enumerate(y):
        img = _glyph_image(int(d)) * rng.uniform(0.7, 1.0)
        dy, dx = rng.integers(-1, 2, size=2)
        img = np.roll(img, (dy, dx), axis=(0, 1))
        x[i, 0] = img + noise * rng.standard_normal((8, 8))
    return x, y


def generate(name: str, n: int, seed: int = 0, **kw):
    if name == "blobs":
        return blobs(n, seed=seed, **kw)
    if name == "moons":
        return moons(n, seed=seed, **kw)
    if name == "digits":
        return digits(n, seed=seed, **kw)
    raise ValueError(f"unknown generator {name!r}; expected one of {GENERATORS}")


def split(x, y, test_fraction: float = 0.25, seed: int = 0):
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(x))
    n_test = int(round(len(x) * test_fraction))
    te, tr = order[:n_test], order[n_test:]
    return x[tr], y[tr], x[te], y[te]


def save_dataset(directory, x, y) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    container.save(d / "features.ibrt", np.asarray(x, dtype=np.float32), "real32")
    container.save(d / "labels.ibrt", np.asarray(y, dtype=np.int32), "int32")


def load_dataset(directory):
    d = Path(directory)
    x = container.load(d / "features.ibrt").data
    y = container.load(d / "labels.ibrt").data
    if len(x) != len(y):
        raise ValueError(f"dataset {d}: {len(x)} features but {len(y)} labels")
    return np.array(x), np.array(y)
