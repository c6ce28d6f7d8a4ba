"""Linear layer whose weight is held in BCQ form.

Forward and backward never materialize the dense weight: every product is
``X`` against a ±1 plane, followed by a per-(row, group) scale. Plane indices
in this module are 1-based, matching alpha_1 ... alpha_q.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bcq import BCQMatrix, WORD_BITS, dequantize
from .errors import ConfigError, ShapeError
from .numkit import as_matrix


def _check_plane(i: int, q: int) -> None:
    if not 1 <= i <= q:
        raise IndexError(f"plane index {i} out of range 1..{q}")


@dataclass
class QuantLinear:
    weights: BCQMatrix
    bias: np.ndarray

    def __post_init__(self):
        self.bias = np.array(self.bias, dtype=np.float64).ravel()
        if self.bias.shape != (self.weights.h_out,):
            raise ShapeError(f"bias length {self.bias.size} != h_out {self.weights.h_out}")
        self.bias.setflags(write=False)

    @property
    def h_in(self) -> int:
        return self.weights.h_in

    @property
    def h_out(self) -> int:
        return self.weights.h_out

    @property
    def g_L(self) -> int:
        return self.weights.group_size

    def _check_input(self, x) -> np.ndarray:
        x = as_matrix(x)
        if x.shape[1] != self.h_in:
            raise ShapeError(f"input has {x.shape[1]} columns, layer expects {self.h_in}")
        return x

    def _plane_products(self, x: np.ndarray) -> np.ndarray:
        """X against every plane, per group: shape (q, n, h_out, groups)."""
        w = self.weights
        g = w.group_size
        xg = x.reshape(x.shape[0], w.groups_per_row, g)
        signs = w.sign_stack().reshape(w.q, w.h_out, w.groups_per_row, g)
        return np.einsum("nck,qock->qnoc", xg, signs, optimize=True)

    def forward(self, x) -> np.ndarray:
        """Y = sum_i (X B_i^T) scaled by alpha_i per group, plus bias."""
        x = self._check_input(x)
        partial = self._plane_products(x)
        return np.einsum("qnoc,qoc->no", partial, self.weights.scale_stack()) + self.bias

    def forward_lut(self, x, mu: int = 8) -> np.ndarray:
        """Same value as :meth:`forward`, computed with lookup tables.

        Every ``mu``-long slice of each input row is expanded once into the
        2**mu signed partial sums it can produce; the packed plane bits then
        index those tables directly.
        """
        x = self._check_input(x)
        w = self.weights
        if mu not in (4, 8):
            raise ConfigError(f"mu must be 4 or 8, got {mu}")
        if w.group_size % mu != 0:
            raise ConfigError(f"mu={mu} does not tile group segments of length {w.group_size}")
        tables = build_lut(x, mu)  # (n, n_blocks, 2**mu)
        n_blocks = self.h_in // mu
        blocks_per_group = w.group_size // mu
        block_ids = np.arange(n_blocks)
        out = np.zeros((x.shape[0], self.h_out))
        for plane, scale in zip(w.planes, w.scales):
            idx = lut_indices(plane.words, n_blocks, mu)  # (h_out, n_blocks)
            looked_up = tables[:, block_ids[None, :], idx]  # (n, h_out, n_blocks)
            per_group = looked_up.reshape(x.shape[0], self.h_out, -1, blocks_per_group).sum(axis=-1)
            out += np.einsum("noc,oc->no", per_group, scale.values)
        return out + self.bias

    def backward_input(self, grad_y) -> np.ndarray:
        """dX = dY (sum_i diag(alpha_i) B_i), with alpha_i applied per group."""
        grad_y = as_matrix(grad_y)
        if grad_y.shape[1] != self.h_out:
            raise ShapeError(f"grad has {grad_y.shape[1]} columns, layer has h_out {self.h_out}")
        w = self.weights
        g = w.group_size
        signs = w.sign_stack().reshape(w.q, w.h_out, w.groups_per_row, g)
        dx = np.einsum("no,qoc,qock->nck", grad_y, w.scale_stack(), signs, optimize=True)
        return dx.reshape(grad_y.shape[0], self.h_in)

    def grad_alpha(self, x, grad_y, i: int) -> np.ndarray:
        """Gradient of the loss w.r.t. alpha_i, divided by the group size g_L."""
        _check_plane(i, self.weights.q)
        return self.grad_alphas(x, grad_y, [i])[i]

    def grad_alphas(self, x, grad_y, planes) -> dict[int, np.ndarray]:
        x = self._check_input(x)
        grad_y = as_matrix(grad_y)
        if grad_y.shape != (x.shape[0], self.h_out):
            raise ShapeError(f"grad shape {grad_y.shape} vs expected {(x.shape[0], self.h_out)}")
        w = self.weights
        g = w.group_size
        xg = x.reshape(x.shape[0], w.groups_per_row, g)
        out = {}
        for i in planes:
            _check_plane(i, w.q)
            signs = w.planes[i - 1].signs.reshape(w.h_out, w.groups_per_row, g).astype(np.float64)
            xb = np.einsum("nck,ock->noc", xg, signs, optimize=True)
            out[i] = np.einsum("no,noc->oc", grad_y, xb) / g
        return out

    def dense_weight(self) -> np.ndarray:
        return dequantize(self.weights)


def lut_patterns(mu: int) -> np.ndarray:
    """(2**mu, mu) matrix of ±1; bit t of the row index gives element t."""
    k = np.arange(1 << mu)[:, None]
    bits = (k >> np.arange(mu)[None, :]) & 1
    return (2.0 * bits - 1.0)


def build_lut(x: np.ndarray, mu: int) -> np.ndarray:
    """Tables of shape (n, h_in // mu, 2**mu); entry k = dot(x_block, pattern(k))."""
    n, h_in = x.shape
    blocks = x.reshape(n, h_in // mu, mu)
    return blocks @ lut_patterns(mu).T


def lut_indices(words: np.ndarray, n_blocks: int, mu: int) -> np.ndarray:
    """Extract the mu-bit table index of every block from packed plane words."""
    per_word = WORD_BITS // mu
    block = np.arange(n_blocks)
    word_idx = block // per_word
    shift = (mu * (block % per_word)).astype(np.uint64)
    mask = np.uint64((1 << mu) - 1)
    return ((words[:, word_idx] >> shift[None, :]) & mask).astype(np.intp)


@dataclass
class DenseLinear:
    """Full-precision layer with the same interface, used for dense twins."""

    weight: np.ndarray
    bias: np.ndarray

    @property
    def h_in(self) -> int:
        return self.weight.shape[1]

    @property
    def h_out(self) -> int:
        return self.weight.shape[0]

    def forward(self, x) -> np.ndarray:
        return as_matrix(x) @ self.weight.T + self.bias

    def backward_input(self, grad_y) -> np.ndarray:
        return as_matrix(grad_y) @ self.weight

    def dense_weight(self) -> np.ndarray:
        return self.weight
