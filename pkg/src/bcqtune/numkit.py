"""Dense numerical substrate.

Matrices are plain 2-D ``float64`` numpy arrays in C (row-major) order. The
random source is numpy's Philox generator, which is counter-based, so a seed
reproduces the same stream on every platform.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

Rng = np.random.Generator


def make_rng(seed: int) -> Rng:
    return np.random.Generator(np.random.Philox(int(seed)))


def spawn(rng: Rng, n: int) -> list[Rng]:
    """Independent child streams, e.g. one per layer."""
    return [np.random.Generator(bg) for bg in rng.bit_generator.spawn(n)]


def as_matrix(a) -> np.ndarray:
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    return a @ b


def transpose(a) -> np.ndarray:
    return np.ascontiguousarray(as_matrix(a).T)


def randn(rng: Rng, rows: int, cols: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    if std < 0:
        raise ValueError("std must be non-negative")
    return mean + std * rng.standard_normal((rows, cols))


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "operands") -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what} differ in shape: {a.shape} vs {b.shape}")
