"""Synthetic sequence-reversal language-modeling task.

A sample is ``x_1 .. x_k SEP x_k .. x_1`` over an alphabet of ``n_symbols``
symbols, with ``SEP = n_symbols``. The model reads the sequence minus its last
token and is scored only on the reversed half.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError, ShapeError
from .numkit import make_rng

IGNORE = -1


@dataclass
class Dataset:
    tokens: np.ndarray   # (n, T) int64
    targets: np.ndarray  # (n, T) int64, IGNORE where unscored

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if self.tokens.ndim != 2 or self.tokens.shape != self.targets.shape:
            raise ShapeError(f"tokens {self.tokens.shape} and targets {self.targets.shape} must match")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def subset(self, index) -> "Dataset":
        return Dataset(self.tokens[index], self.targets[index])


def reversal_vocab(n_symbols: int = 16) -> int:
    return n_symbols + 1


def make_reversal(n: int, k: int = 6, n_symbols: int = 16, seed: int = 0) -> Dataset:
    if n < 1 or k < 1 or n_symbols < 2:
        raise ConfigError("need n >= 1, k >= 1 and at least two symbols")
    rng = make_rng(seed)
    x = rng.integers(0, n_symbols, size=(n, k))
    sep = np.full((n, 1), n_symbols)
    seq = np.concatenate([x, sep, x[:, ::-1]], axis=1)  # length 2k + 1
    tokens = seq[:, :-1]
    targets = seq[:, 1:].copy()
    targets[:, :k] = IGNORE
    return Dataset(tokens, targets)


def load_npz(path) -> Dataset:
    with np.load(path) as z:
        missing = {"tokens", "targets"} - set(z.files)
        if missing:
            raise InputError(f"{path}: missing arrays {sorted(missing)}")
        return Dataset(z["tokens"], z["targets"])


def save_npz(path, data: Dataset) -> None:
    np.savez(path, tokens=data.tokens, targets=data.targets)


def parse_data_spec(spec: str) -> Dataset:
    """``reversal:n=2000,k=6,symbols=16,seed=1`` or a path to an ``.npz`` file."""
    if not spec.startswith("reversal"):
        return load_npz(spec)
    params = {"n": 1000, "k": 6, "symbols": 16, "seed": 0}
    _, _, rest = spec.partition(":")
    for item in filter(None, rest.split(",")):
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in params:
            raise ConfigError(f"unknown reversal parameter {key!r}")
        try:
            params[key] = int(value)
        except ValueError:
            raise ConfigError(f"reversal parameter {key}: cannot parse {value!r} as int") from None
    return make_reversal(params["n"], params["k"], params["symbols"], params["seed"])
