"""Deterministic forward-pass engine and sampled functional-equivalence checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .ir import (
    Conv2D,
    Flatten,
    FullyConnected,
    Model,
    Norm,
    ReLU,
    ResidualAdd,
    StructuralError,
    require_valid,
)

ActivationTrace = dict[int, np.ndarray]


def _apply(layer, x: np.ndarray, trace: ActivationTrace) -> np.ndarray:
    if isinstance(layer, Conv2D):
        return kernels.conv2d_forward(x, layer.weight, layer.bias, layer.stride, layer.pad)
    if isinstance(layer, FullyConnected):
        y = layer.weight.astype(np.float64) @ x.astype(np.float64)
        if layer.bias is not None:
            y += layer.bias.astype(np.float64)
        return y.astype(np.float32)
    if isinstance(layer, Norm):
        shape = (-1,) + (1,) * (x.ndim - 1)
        g = layer.gamma.reshape(shape)
        return (g * (x - layer.mu.reshape(shape)) / layer.sigma.reshape(shape)
                + layer.beta.reshape(shape)).astype(np.float32)
    if isinstance(layer, ReLU):
        return np.maximum(x, np.float32(0.0))
    if isinstance(layer, Flatten):
        return x.reshape(-1)
    if isinstance(layer, ResidualAdd):
        return x + trace[layer.source]
    raise TypeError(f"unknown layer {layer!r}")


def forward_with_trace(model: Model, x: np.ndarray) -> tuple[np.ndarray, ActivationTrace]:
    """Forward pass recording every layer's output keyed by layer id."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    if tuple(x.shape) != model.input_shape:
        raise StructuralError(f"input shape {x.shape} != model input {model.input_shape}")
    trace: ActivationTrace = {}
    for layer in model.layers:
        x = _apply(layer, x, trace)
        trace[layer.id] = x
    return x, trace


def forward(model: Model, x: np.ndarray) -> np.ndarray:
    return forward_with_trace(model, x)[0]


@dataclass(frozen=True)
class EquivalenceReport:
    max_abs_dev: float
    passed: bool
    tol: float
    n_samples: int


def sample_inputs(shape: tuple[int, ...], n: int, seed: int) -> np.ndarray:
    """Standard-normal probe inputs; the threat model assumes no dataset access."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n,) + tuple(shape)).astype(np.float32)


def equivalence_check(
    a: Model,
    b: Model,
    n_samples: int = 100,
    seed: int = 0,
    tol: float = 1e-4,
) -> EquivalenceReport:
    """Sampled check that two models compute the same function.

    Draws n_samples standard-normal inputs from the seed and compares outputs;
    passes iff the max absolute deviation is <= tol.
    """
    if a.input_shape != b.input_shape:
        raise StructuralError(
            f"input shapes differ: {a.input_shape} vs {b.input_shape}"
        )
    require_valid(a)
    require_valid(b)
    worst = 0.0
    for x in sample_inputs(a.input_shape, n_samples, seed):
        dev = np.max(np.abs(forward(a, x).astype(np.float64) - forward(b, x).astype(np.float64)))
        worst = max(worst, float(dev))
    return EquivalenceReport(max_abs_dev=worst, passed=worst <= tol, tol=tol, n_samples=n_samples)
