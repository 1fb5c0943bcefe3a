"""Shared fixtures: seeded toy models and an independent reference forward pass.

`reference_forward` is a deliberately naive re-implementation (straight Python
loops) kept independent of the engine so the two can cross-check each other.
"""

import numpy as np

from neurofuscate.ir import (
    Conv2D,
    Flatten,
    FullyConnected,
    Model,
    Norm,
    ReLU,
    ResidualAdd,
)


def _w(rng, *shape):
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape).astype(np.float32)


def small_mlp(seed=0, widths=(8, 16, 16, 12, 4), bias=False):
    """4 fully-connected layers with ReLUs between them."""
    rng = np.random.default_rng(seed)
    layers = []
    lid = 0
    for i in range(len(widths) - 1):
        b = _w(rng, widths[i + 1]) * 0.1 if bias else None
        layers.append(FullyConnected(id=lid, weight=_w(rng, widths[i + 1], widths[i]), bias=b))
        lid += 1
        if i < len(widths) - 2:
            layers.append(ReLU(id=lid))
            lid += 1
    return Model(layers=tuple(layers), input_shape=(widths[0],))


def small_cnn(seed=0, with_norm=False, channels=(8, 8), input_hw=16, n_classes=4):
    """conv3x3 -> [norm] -> relu -> conv3x3 -> relu -> flatten -> fc."""
    rng = np.random.default_rng(seed)
    c1, c2 = channels
    layers = [Conv2D(id=0, weight=_w(rng, c1, 1, 3, 3), stride=1, pad=1)]
    lid = 1
    if with_norm:
        layers.append(
            Norm(
                id=lid,
                gamma=rng.uniform(0.5, 1.5, c1).astype(np.float32),
                beta=rng.normal(0.0, 0.1, c1).astype(np.float32),
                mu=rng.normal(0.0, 0.1, c1).astype(np.float32),
                sigma=rng.uniform(0.8, 1.2, c1).astype(np.float32),
            )
        )
        lid += 1
    layers.append(ReLU(id=lid)); lid += 1
    layers.append(Conv2D(id=lid, weight=_w(rng, c2, c1, 3, 3), stride=1, pad=1)); lid += 1
    layers.append(ReLU(id=lid)); lid += 1
    layers.append(Flatten(id=lid)); lid += 1
    layers.append(
        FullyConnected(id=lid, weight=_w(rng, n_classes, c2 * input_hw * input_hw))
    )
    return Model(layers=tuple(layers), input_shape=(1, input_hw, input_hw))


def residual_cnn(seed=0, channels=6, input_hw=8, n_classes=3):
    """Two-conv residual block: x -> conv -> relu -> conv -> relu -> conv -> add(skip) -> relu -> fc."""
    rng = np.random.default_rng(seed)
    c = channels
    layers = (
        Conv2D(id=0, weight=_w(rng, c, 1, 3, 3), stride=1, pad=1),
        ReLU(id=1),
        Conv2D(id=2, weight=_w(rng, c, c, 3, 3), stride=1, pad=1),
        ReLU(id=3),
        Conv2D(id=4, weight=_w(rng, c, c, 3, 3), stride=1, pad=1),
        ResidualAdd(id=5, source=1),
        ReLU(id=6),
        Flatten(id=7),
        FullyConnected(id=8, weight=_w(rng, n_classes, c * input_hw * input_hw)),
    )
    return Model(layers=layers, input_shape=(1, input_hw, input_hw))


def _structured_rows(rng, dout, din, mean_frac=0.75, mean_cv=0.5):
    """Rows sharing a positive mean direction of varied magnitudes, plus iid noise.

    Trained layers look like this (filters correlate around a common per-input
    structure); i.i.d. Gaussian toys do not, and with them zero/clique/split
    dummies are indistinguishable from real neurons by construction. A scalar
    Gaussian fit to these weights misses the per-component mean variation, so
    freshly sampled rows are mild outliers while copied rows are not.
    """
    u = np.abs(rng.normal(1.0, mean_cv, size=din)) + 0.1
    m = mean_frac * u / np.linalg.norm(u)
    z = rng.standard_normal((dout, din)) * (1.0 - mean_frac) / np.sqrt(din)
    return (m + z).astype(np.float32)


def structured_mlp(seed=0, widths=(8, 24, 16), mean_frac=0.75, mean_cvs=None):
    """MLP whose weights carry realistic mean structure; detection bench.

    Hidden layers get strongly varied mean components (what a fitted scalar
    Gaussian cannot mimic); the head gets a near-uniform mean so its columns
    stay comparable and do not drown the feature geometry.
    """
    rng = np.random.default_rng(seed)
    if mean_cvs is None:
        mean_cvs = [0.5] * (len(widths) - 2) + [0.1]
    layers = []
    lid = 0
    for i in range(len(widths) - 1):
        layers.append(
            FullyConnected(
                id=lid,
                weight=_structured_rows(rng, widths[i + 1], widths[i], mean_frac, mean_cvs[i]),
            )
        )
        lid += 1
        if i < len(widths) - 2:
            layers.append(ReLU(id=lid))
            lid += 1
    return Model(layers=tuple(layers), input_shape=(widths[0],))


def norm_mlp(seed=0, b=64):
    """fc -> norm(b) -> relu -> fc -> relu -> fc head; scale-vector watermark bench."""
    rng = np.random.default_rng(seed)
    layers = (
        FullyConnected(id=0, weight=_w(rng, b, 8)),
        Norm(
            id=1,
            gamma=rng.normal(0.0, 0.6, b).astype(np.float32),
            beta=rng.normal(0.0, 0.1, b).astype(np.float32),
            mu=rng.normal(0.0, 0.1, b).astype(np.float32),
            sigma=rng.uniform(0.8, 1.2, b).astype(np.float32),
        ),
        ReLU(id=2),
        FullyConnected(id=3, weight=_w(rng, 32, b)),
        ReLU(id=4),
        FullyConnected(id=5, weight=_w(rng, 4, 32)),
    )
    return Model(layers=layers, input_shape=(8,))


def wide_mlp(seed=0, width=72):
    """fc(width) -> relu -> fc -> relu -> fc head; activation watermark bench."""
    rng = np.random.default_rng(seed)
    layers = (
        FullyConnected(id=0, weight=_w(rng, width, 8)),
        ReLU(id=1),
        FullyConnected(id=2, weight=_w(rng, 32, width)),
        ReLU(id=3),
        FullyConnected(id=4, weight=_w(rng, 4, 32)),
    )
    return Model(layers=layers, input_shape=(8,))


def passport_cnn(seed=0, filters=64, input_hw=8):
    """conv -> relu -> conv(filters) -> relu -> flatten -> fc head; passport bench."""
    rng = np.random.default_rng(seed)
    layers = (
        Conv2D(id=0, weight=_w(rng, 8, 1, 3, 3), stride=1, pad=1),
        ReLU(id=1),
        Conv2D(id=2, weight=_w(rng, filters, 8, 3, 3), stride=1, pad=1),
        ReLU(id=3),
        Flatten(id=4),
        FullyConnected(id=5, weight=_w(rng, 4, filters * input_hw * input_hw)),
    )
    return Model(layers=layers, input_shape=(1, input_hw, input_hw))


def reference_forward(model, x):
    """Straight-loop forward pass, independent of the inference engine."""
    x = np.asarray(x, dtype=np.float64)
    traces = {}
    for layer in model.layers:
        kind = layer.kind
        if kind == "conv2d":
            f, c, kh, kw = layer.weight.shape
            _, h, w = x.shape
            s, p = layer.stride, layer.pad
            oh = (h + 2 * p - kh) // s + 1
            ow = (w + 2 * p - kw) // s + 1
            out = np.zeros((f, oh, ow))
            for fi in range(f):
                for oi in range(oh):
                    for oj in range(ow):
                        acc = 0.0 if layer.bias is None else float(layer.bias[fi])
                        for ci in range(c):
                            for u in range(kh):
                                ih = oi * s - p + u
                                if ih < 0 or ih >= h:
                                    continue
                                for v in range(kw):
                                    iw = oj * s - p + v
                                    if iw < 0 or iw >= w:
                                        continue
                                    acc += x[ci, ih, iw] * float(layer.weight[fi, ci, u, v])
                        out[fi, oi, oj] = acc
            x = out
        elif kind == "fully_connected":
            out = np.zeros(layer.weight.shape[0])
            for i in range(layer.weight.shape[0]):
                acc = 0.0 if layer.bias is None else float(layer.bias[i])
                for j in range(layer.weight.shape[1]):
                    acc += float(layer.weight[i, j]) * x[j]
                out[i] = acc
            x = out
        elif kind == "norm":
            out = np.array(x)
            for ci in range(layer.channels):
                out[ci] = (
                    float(layer.gamma[ci]) * (x[ci] - float(layer.mu[ci])) / float(layer.sigma[ci])
                    + float(layer.beta[ci])
                )
            x = out
        elif kind == "relu":
            x = np.where(x > 0, x, 0.0)
        elif kind == "flatten":
            x = x.reshape(-1)
        elif kind == "residual_add":
            x = x + traces[layer.source]
        else:
            raise AssertionError(kind)
        traces[layer.id] = x
    return x
