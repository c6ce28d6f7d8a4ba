"""Binary-coding quantization (BCQ) of weight matrices.

A row of ``W`` is cut into groups of ``g`` consecutive weights; each group is
approximated as ``sum_i alpha_i * b_i`` with ``b_i`` in {-1, +1}^g. The binary
codes are stored bit-packed, one :class:`BitPlane` per bit, and the scales as
one :class:`GroupedScales` per bit.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConfigError, ShapeError
from .numkit import as_matrix, check_same_shape

#: Group-size sentinel meaning "one group per row" (g = h_in).
ROW = 0

WORD_BITS = 64
RIDGE = 1e-12


class Method(str, enum.Enum):
    GREEDY = "greedy"
    ALTERNATING = "alternating"


@dataclass(frozen=True)
class QuantConfig:
    q: int = 3
    g: int = ROW
    method: Method = Method.GREEDY
    alt_iterations: int = 15

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if not 1 <= self.q <= 8:
            raise ConfigError(f"q must be in 1..8, got {self.q}")
        if self.g < 0:
            raise ConfigError(f"group size must be positive or ROW, got {self.g}")
        if self.method is Method.ALTERNATING and self.alt_iterations < 1:
            raise ConfigError("alt_iterations must be >= 1 for the alternating method")

    def group_size(self, h_in: int) -> int:
        """Resolve ``g`` against a concrete row length."""
        if self.g == ROW:
            return h_in
        if h_in % self.g != 0:
            raise ConfigError(f"group size {self.g} does not divide h_in={h_in}")
        return self.g


def words_per_row(cols: int) -> int:
    return -(-cols // WORD_BITS)


@dataclass(frozen=True)
class BitPlane:
    """One bit of the code for every weight, packed LSB-first into uint64 words.

    Bit ``k`` of word ``j`` in row ``r`` is set iff ``B[r, 64*j + k] == +1``.
    Padding bits past ``cols`` are zero.
    """

    rows: int
    cols: int
    words: np.ndarray

    def __post_init__(self):
        if self.words.shape != (self.rows, words_per_row(self.cols)) or self.words.dtype != np.uint64:
            raise ShapeError(f"bit plane words have shape {self.words.shape}, dtype {self.words.dtype}")
        self.words.setflags(write=False)

    @classmethod
    def from_signs(cls, signs) -> "BitPlane":
        signs = np.asarray(signs)
        if signs.ndim != 2:
            raise ShapeError("sign matrix must be 2-D")
        rows, cols = signs.shape
        bits = np.zeros((rows, words_per_row(cols) * WORD_BITS), dtype=np.uint8)
        bits[:, :cols] = signs > 0
        packed = np.packbits(bits, axis=1, bitorder="little")
        words = np.ascontiguousarray(packed).view("<u8").astype(np.uint64)
        return cls(rows, cols, words.reshape(rows, -1))

    @cached_property
    def signs(self) -> np.ndarray:
        """Decoded ±1 matrix as int8 (read-only)."""
        as_bytes = np.ascontiguousarray(self.words.astype("<u8")).view(np.uint8)
        bits = np.unpackbits(as_bytes.reshape(self.rows, -1), axis=1, bitorder="little")
        out = bits[:, : self.cols].astype(np.int8) * 2 - 1
        out.setflags(write=False)
        return out

    def padding_is_zero(self) -> bool:
        pad = words_per_row(self.cols) * WORD_BITS - self.cols
        if pad == 0:
            return True
        last = self.words[:, -1]
        keep = WORD_BITS - pad
        return bool(np.all((last >> np.uint64(keep)) == 0))


@dataclass
class GroupedScales:
    """One scale per (row, group). ``values`` is mutable: AlphaTuning trains it."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError("scales must be a (rows, groups_per_row) array")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def groups_per_row(self) -> int:
        return self.values.shape[1]


@dataclass
class BCQMatrix:
    h_out: int
    h_in: int
    config: QuantConfig
    planes: list[BitPlane]
    scales: list[GroupedScales]
    _stack: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        g = self.config.group_size(self.h_in)
        if len(self.planes) != self.config.q or len(self.scales) != self.config.q:
            raise ShapeError(f"expected {self.config.q} planes and scales")
        for p, s in zip(self.planes, self.scales):
            if (p.rows, p.cols) != (self.h_out, self.h_in):
                raise ShapeError(f"plane shape {(p.rows, p.cols)} != {(self.h_out, self.h_in)}")
            if s.values.shape != (self.h_out, self.h_in // g):
                raise ShapeError(f"scale shape {s.values.shape} != {(self.h_out, self.h_in // g)}")

    @property
    def q(self) -> int:
        return self.config.q

    @property
    def group_size(self) -> int:
        return self.config.group_size(self.h_in)

    @property
    def groups_per_row(self) -> int:
        return self.h_in // self.group_size

    @property
    def n_scale_values(self) -> int:
        return self.q * self.h_out * self.groups_per_row

    def sign_stack(self) -> np.ndarray:
        """All planes decoded as float64, shape (q, h_out, h_in). Cached, read-only."""
        if self._stack is None:
            stack = np.stack([p.signs for p in self.planes]).astype(np.float64)
            stack.setflags(write=False)
            self._stack = stack
        return self._stack

    def scale_stack(self) -> np.ndarray:
        """Current scales, shape (q, h_out, groups_per_row). A fresh copy."""
        return np.stack([s.values for s in self.scales])

    def copy(self) -> "BCQMatrix":
        """Shares the (immutable) planes, copies the scales."""
        out = BCQMatrix(self.h_out, self.h_in, self.config, list(self.planes),
                        [GroupedScales(s.values.copy()) for s in self.scales])
        out._stack = self._stack
        return out


# -- helpers over the grouped view -------------------------------------------

def _groups(w: np.ndarray, g: int) -> np.ndarray:
    """(h_out, h_in) -> (h_out * groups, g) view of contiguous groups."""
    return w.reshape(-1, g)


def _codes_from(bcq: BCQMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Codes as (N, g, q) float and scales as (N, q), N = h_out * groups."""
    g = bcq.group_size
    codes = np.stack([p.signs.reshape(-1, g) for p in bcq.planes], axis=-1).astype(np.float64)
    alphas = np.stack([s.values.reshape(-1) for s in bcq.scales], axis=-1)
    return codes, alphas


def _assemble(h_out: int, h_in: int, config: QuantConfig, codes: np.ndarray,
              alphas: np.ndarray) -> BCQMatrix:
    g = config.group_size(h_in)
    planes = [BitPlane.from_signs(codes[..., i].reshape(h_out, h_in)) for i in range(config.q)]
    scales = [GroupedScales(alphas[:, i].reshape(h_out, h_in // g)) for i in range(config.q)]
    return BCQMatrix(h_out, h_in, config, planes, scales)


def _sign(x: np.ndarray) -> np.ndarray:
    # sign(0) = +1
    return np.where(x >= 0, 1.0, -1.0)


def _group_sse(w: np.ndarray, codes: np.ndarray, alphas: np.ndarray) -> np.ndarray:
    return np.sum((w - np.einsum("ngq,nq->ng", codes, alphas)) ** 2, axis=1)


def _group_mse(w: np.ndarray, codes: np.ndarray, alphas: np.ndarray) -> float:
    # summed per group so it can only fall when no group's error rises
    return float(np.sum(_group_sse(w, codes, alphas)) / w.size)


# -- public operations ---------------------------------------------------------

def quantize_group_onebit(w) -> tuple[float, np.ndarray]:
    """Closed-form 1-bit fit: ``b = sign(w)``, ``alpha = w.b / g``."""
    w = np.asarray(w, dtype=np.float64).ravel()
    if w.size == 0:
        raise ShapeError("cannot quantize an empty group")
    b = _sign(w)
    return float(w @ b) / w.size, b


def quantize_greedy(w, config: QuantConfig) -> BCQMatrix:
    """Greedy residual BCQ: each plane is the 1-bit fit of what is left over."""
    w = as_matrix(w)
    h_out, h_in = w.shape
    g = config.group_size(h_in)
    residual = _groups(w, g).copy()
    codes = np.empty(residual.shape + (config.q,))
    alphas = np.empty((residual.shape[0], config.q))
    for i in range(config.q):
        b = _sign(residual)
        a = np.mean(residual * b, axis=1)
        codes[..., i] = b
        alphas[:, i] = a
        residual -= a[:, None] * b
    return _assemble(h_out, h_in, config, codes, alphas)


def _refit_scales(w: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Least-squares scales for fixed codes, batched over groups."""
    q = codes.shape[-1]
    gram = np.einsum("ngi,ngj->nij", codes, codes)
    rhs = np.einsum("ngi,ng->ni", codes, w)
    # Gram entries are integers, so its determinant is an integer: |det| < 0.5 means singular.
    singular = np.abs(np.linalg.det(gram)) < 0.5
    if np.any(singular):
        gram = gram.copy()
        gram[singular] += RIDGE * np.eye(q)
    return np.linalg.solve(gram, rhs[..., None])[..., 0]


def _level_table(alphas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sorted representable values per group and the code behind each.

    Returns ``levels`` (N, 2^q) ascending and ``level_codes`` (N, 2^q, q).
    Equal values keep enumeration order, so ties resolve deterministically.
    """
    q = alphas.shape[-1]
    combos = np.array(list(itertools.product((-1.0, 1.0), repeat=q)))  # (2^q, q)
    values = alphas @ combos.T  # (N, 2^q)
    order = np.argsort(values, axis=1, kind="stable")
    levels = np.take_along_axis(values, order, axis=1)
    return levels, combos[order]


def _reselect_codes(w: np.ndarray, alphas: np.ndarray) -> np.ndarray:
    """Nearest representable value for every weight, found by binary search.

    Midpoint ties go to the smaller level.
    """
    levels, level_codes = _level_table(alphas)
    n_levels = levels.shape[1]
    mids = 0.5 * (levels[:, :-1] + levels[:, 1:])  # (N, 2^q - 1)
    lo = np.zeros(w.shape, dtype=np.int64)
    hi = np.full(w.shape, n_levels - 1, dtype=np.int64)
    rows = np.arange(w.shape[0])[:, None]
    # invariant: the answer (first k with w <= mids[k], else the top level) is in [lo, hi]
    while np.any(lo < hi):
        active = lo < hi
        mid = np.minimum((lo + hi) // 2, n_levels - 2)
        right = w > mids[rows, mid]
        lo = np.where(active & right, mid + 1, lo)
        hi = np.where(active & ~right, mid, hi)
    return level_codes[rows, lo]


def refine_alternating(bcq: BCQMatrix, original, iterations: int = 15,
                       history: list[float] | None = None) -> BCQMatrix:
    """Alternate least-squares scale refits and binary code re-selection.

    If ``history`` is given, the MSE before the first step and after every
    half-step is appended to it (``1 + 2 * iterations`` entries).
    """
    original = as_matrix(original)
    if original.shape != (bcq.h_out, bcq.h_in):
        raise ShapeError(f"original {original.shape} does not match {(bcq.h_out, bcq.h_in)}")
    if iterations < 1:
        raise ConfigError("iterations must be >= 1")
    w = _groups(original, bcq.group_size)
    codes, alphas = _codes_from(bcq)
    if history is not None:
        history.append(_group_mse(w, codes, alphas))
    for _ in range(iterations):
        # Both half-steps are optimal in exact arithmetic. Rounding (the ridge fallback,
        # or equal levels reached through different codes) can still cost ~1 ulp, so a
        # group only moves when its error strictly drops.
        new_alphas = _refit_scales(w, codes)
        keep = _group_sse(w, codes, new_alphas) < _group_sse(w, codes, alphas)
        alphas = np.where(keep[:, None], new_alphas, alphas)
        if history is not None:
            history.append(_group_mse(w, codes, alphas))
        new_codes = _reselect_codes(w, alphas)
        keep = _group_sse(w, new_codes, alphas) < _group_sse(w, codes, alphas)
        codes = np.where(keep[:, None, None], new_codes, codes)
        if history is not None:
            history.append(_group_mse(w, codes, alphas))
    refined = _assemble(bcq.h_out, bcq.h_in, bcq.config, codes, alphas)
    # the summation order of mse() differs from the per-group guard; keep the promise there too
    if mse(dequantize(refined), original) > mse(dequantize(bcq), original):
        return bcq.copy()
    return refined


def quantize(w, config: QuantConfig) -> BCQMatrix:
    """Greedy initialization, refined when ``config.method`` is alternating."""
    bcq = quantize_greedy(w, config)
    if config.method is Method.ALTERNATING:
        bcq = refine_alternating(bcq, w, config.alt_iterations)
    return bcq


def dequantize(bcq: BCQMatrix) -> np.ndarray:
    g = bcq.group_size
    out = np.zeros((bcq.h_out, bcq.h_in))
    for plane, scale in zip(bcq.planes, bcq.scales):
        out += np.repeat(scale.values, g, axis=1) * plane.signs
    return out


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    check_same_shape(a, b)
    return float(np.mean((a - b) ** 2))
