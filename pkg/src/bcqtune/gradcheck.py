"""Central finite-difference checks for the hand-written gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .qlinear import QuantLinear
from .toymodel import ToyTransformer, loss_and_grads

STEP = 1e-5


@dataclass
class Probe:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return relative_error(self.analytic, self.numeric)


def relative_error(a: float, b: float, floor: float = 1e-7) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def central_difference(f, arr: np.ndarray, index, step: float = STEP) -> float:
    """d f() / d arr[index], perturbing ``arr`` in place and restoring it."""
    old = arr[index]
    arr[index] = old + step
    up = f()
    arr[index] = old - step
    down = f()
    arr[index] = old
    return (up - down) / (2 * step)


def check_layer(layer: QuantLinear, rng, n_rows: int = 3, step: float = STEP) -> list[Probe]:
    """Every input coordinate and every alpha entry of one layer.

    The loss is ``sum(R * Y)`` for a random weighting ``R``, so ``dY = R``.
    Alpha gradients are compared after multiplying back by ``g_L``.
    """
    x = rng.standard_normal((n_rows, layer.h_in))
    r = rng.standard_normal((n_rows, layer.h_out))

    def loss():
        return float(np.sum(r * layer.forward(x)))

    probes = []
    dx = layer.backward_input(r)
    for idx in np.ndindex(x.shape):
        probes.append(Probe("input", idx, dx[idx], central_difference(loss, x, idx, step)))
    for i in range(1, layer.weights.q + 1):
        da = layer.grad_alpha(x, r, i) * layer.g_L
        scales = layer.weights.scales[i - 1].values
        for idx in np.ndindex(scales.shape):
            probes.append(Probe(f"alpha{i}", idx, da[idx], central_difference(loss, scales, idx, step)))
    return probes


def check_model_alphas(model: ToyTransformer, tokens, targets, rng, samples: int | None = None,
                       planes=None, step: float = STEP, fault: float | None = None) -> list[Probe]:
    """Compare ``g_L * dloss/dalpha`` against finite differences of the LM loss.

    ``samples`` limits the number of probed entries per (layer, plane);
    ``fault`` multiplies the analytic gradient, for testing the harness itself.
    """
    planes = tuple(model.trainable_planes if planes is None else planes)
    _, grads = loss_and_grads(model, tokens, targets, planes)

    def loss():
        return loss_and_grads(model, tokens, targets, ())[0]

    probes = []
    for name, layer in model.linear_layers():
        for i in planes:
            scales = layer.weights.scales[i - 1].values
            entries = list(np.ndindex(scales.shape))
            if samples is not None and samples < len(entries):
                entries = [entries[k] for k in sorted(rng.choice(len(entries), samples, replace=False))]
            for idx in entries:
                analytic = grads[name][i][idx] * layer.g_L
                if fault is not None:
                    analytic *= fault
                probes.append(Probe(f"{name}.alpha{i}", idx, analytic,
                                    central_difference(loss, scales, idx, step)))
    return probes


def worst(probes: list[Probe], n: int = 5) -> list[Probe]:
    return sorted(probes, key=lambda p: p.rel_error, reverse=True)[:n]
