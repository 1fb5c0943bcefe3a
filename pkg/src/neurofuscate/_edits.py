"""Channel-level structural edits on the model chain.

These are the low-level building blocks for injection, camouflage, error
handling, and elimination: inserting, deleting, permuting, and rescaling the
output channels of one linear (conv/fc) layer together with the bookkeeping
that keeps the rest of the chain consistent (trailing Norm entries and the
next linear layer's input columns, through an optional Flatten).

Semantic safety around residual streams is the caller's responsibility: a
model stays output-preserving only when partner layers of a residual add
receive identical edits at identical positions. `alignment_classes` computes
which layers are partners.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .ir import (
    Conv2D,
    Flatten,
    FullyConnected,
    Model,
    Norm,
    ReLU,
    ResidualAdd,
    StructuralError,
    as_param,
    layer_width,
    output_shapes,
)

LINEAR = (Conv2D, FullyConnected)


def linear_chain(model: Model) -> list[int]:
    """Chain indices of conv/fc layers, in order."""
    return [i for i, lyr in enumerate(model.layers) if isinstance(lyr, LINEAR)]


def hidden_linear_chain(model: Model) -> list[int]:
    """Linear layers that feed a later linear layer (their width is internal)."""
    chain = linear_chain(model)
    return chain[:-1]


@dataclass(frozen=True)
class Segment:
    """The stretch of chain a width edit at one linear layer must touch."""

    lin_idx: int
    norm_idxs: tuple[int, ...]
    consumer_idx: int | None
    flatten_block: int | None  # spatial block size when the consumer is FC-after-Flatten
    has_relu: bool


def segment(model: Model, lin_idx: int) -> Segment:
    layer = model.layers[lin_idx]
    if not isinstance(layer, LINEAR):
        raise StructuralError(f"layer {layer.id} is not conv2d/fc")
    norms: list[int] = []
    consumer = None
    has_relu = False
    seen_flatten = False
    for j in range(lin_idx + 1, len(model.layers)):
        nxt = model.layers[j]
        if isinstance(nxt, LINEAR):
            consumer = j
            break
        if isinstance(nxt, Norm):
            if seen_flatten:
                raise StructuralError(f"layer {nxt.id}: norm after flatten is unsupported")
            norms.append(j)
        elif isinstance(nxt, ReLU):
            has_relu = True
        elif isinstance(nxt, Flatten):
            seen_flatten = True
    block = None
    if consumer is not None and seen_flatten:
        shape = output_shapes(model)[layer.id]
        block = int(np.prod(shape[1:])) if len(shape) > 1 else 1
    return Segment(
        lin_idx=lin_idx,
        norm_idxs=tuple(norms),
        consumer_idx=consumer,
        flatten_block=block,
        has_relu=has_relu,
    )


def producing_linear(model: Model, chain_idx: int) -> int:
    """Nearest conv/fc at or before chain_idx along the elementwise chain."""
    for i in range(chain_idx, -1, -1):
        lyr = model.layers[i]
        if isinstance(lyr, LINEAR):
            return i
        if isinstance(lyr, (Norm, ReLU, ResidualAdd)):
            continue
        raise StructuralError(f"no linear producer behind layer {lyr.id}")
    raise StructuralError("activation produced directly by the model input")


def alignment_classes(model: Model) -> list[list[int]]:
    """Partition linear layers into residual-width-coupled classes.

    Partner layers of every ResidualAdd (the producer of the skip source and
    the producer of the main branch) land in one class and must receive
    identical structural edits.
    """
    chain = linear_chain(model)
    parent = {i: i for i in chain}

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    for idx, lyr in enumerate(model.layers):
        if isinstance(lyr, ResidualAdd):
            main = producing_linear(model, idx - 1)
            skip = producing_linear(model, model.index_of(lyr.source))
            union(main, skip)
    classes: dict[int, list[int]] = {}
    for i in chain:
        classes.setdefault(find(i), []).append(i)
    return [sorted(v) for _, v in sorted(classes.items())]


# --- consumer-column access ---------------------------------------------------


def block_shape(model: Model, seg: Segment) -> tuple[int, ...]:
    """Shape of one channel's outgoing-weight block in the consumer layer."""
    if seg.consumer_idx is None:
        raise StructuralError("layer has no downstream linear consumer")
    q = model.layers[seg.consumer_idx]
    if isinstance(q, Conv2D):
        return (q.out_channels,) + q.kernel
    if seg.flatten_block is not None:
        return (q.out_features, seg.flatten_block)
    return (q.out_features,)


def get_cols(model: Model, seg: Segment) -> np.ndarray:
    """Channel-major view of the consumer's input columns: (width, *block)."""
    q = model.layers[seg.consumer_idx]
    if isinstance(q, Conv2D):
        return q.weight.transpose(1, 0, 2, 3).copy()
    w = q.weight
    if seg.flatten_block is not None:
        c = w.shape[1] // seg.flatten_block
        return w.reshape(w.shape[0], c, seg.flatten_block).transpose(1, 0, 2).copy()
    return w.T.copy()


def set_cols(model: Model, seg: Segment, cols: np.ndarray) -> Model:
    q = model.layers[seg.consumer_idx]
    if isinstance(q, Conv2D):
        new_w = cols.transpose(1, 0, 2, 3)
    elif seg.flatten_block is not None:
        new_w = cols.transpose(1, 0, 2).reshape(q.weight.shape[0], -1)
    else:
        new_w = cols.T
    layers = list(model.layers)
    layers[seg.consumer_idx] = replace(q, weight=as_param(new_w))
    return model.with_layers(layers)


# --- width edits ---------------------------------------------------------------


def _check_positions(positions, new_n: int) -> np.ndarray:
    pos = np.asarray(sorted(positions), dtype=int)
    if len(pos) != len(set(pos.tolist())) or (pos < 0).any() or (pos >= new_n).any():
        raise StructuralError(f"bad insertion positions {positions} for width {new_n}")
    return pos


def _place(old: np.ndarray, positions: np.ndarray, values: np.ndarray) -> np.ndarray:
    """New array along axis 0 where `values` sit at `positions` and old rows fill the rest."""
    new_n = old.shape[0] + len(positions)
    out = np.empty((new_n,) + old.shape[1:], dtype=old.dtype)
    keep = np.setdiff1d(np.arange(new_n), positions)
    out[keep] = old
    out[positions] = values
    return out


def insert_channels(
    model: Model,
    lin_idx: int,
    positions,
    rows: np.ndarray,
    biases: np.ndarray | None,
    norm_entries: list[dict[str, np.ndarray]] | None,
    cols: np.ndarray,
) -> Model:
    """Grow one linear layer by new output channels at the given final positions.

    `rows` are the new incoming-weight rows, `cols` the new outgoing blocks in
    the consumer, `norm_entries` one dict of (gamma, beta, mu, sigma) vectors
    per trailing Norm in the segment.
    """
    seg = segment(model, lin_idx)
    if seg.consumer_idx is None:
        raise StructuralError("cannot grow the output layer: model I/O is fixed")
    layer = model.layers[lin_idx]
    k = len(positions)
    new_n = layer_width(layer) + k
    pos = _check_positions(positions, new_n)

    rows = np.asarray(rows, dtype=np.float32).reshape((k,) + layer.weight.shape[1:])
    new_weight = _place(layer.weight, pos, rows)
    new_bias = None
    if layer.bias is not None:
        vals = np.zeros(k, dtype=np.float32) if biases is None else np.asarray(biases, np.float32)
        new_bias = _place(layer.bias, pos, vals)
    elif biases is not None and np.any(np.asarray(biases)):
        raise StructuralError("cannot assign biases: layer has no bias term")

    layers = list(model.layers)
    layers[lin_idx] = replace(layer, weight=as_param(new_weight),
                              bias=None if new_bias is None else as_param(new_bias))

    for slot, n_idx in enumerate(seg.norm_idxs):
        norm = layers[n_idx]
        entry = norm_entries[slot] if norm_entries else None
        if entry is None:
            raise StructuralError(f"norm layer {norm.id} requires entries for new channels")
        layers[n_idx] = Norm(
            id=norm.id,
            gamma=_place(norm.gamma, pos, np.asarray(entry["gamma"], np.float32)),
            beta=_place(norm.beta, pos, np.asarray(entry["beta"], np.float32)),
            mu=_place(norm.mu, pos, np.asarray(entry["mu"], np.float32)),
            sigma=_place(norm.sigma, pos, np.asarray(entry["sigma"], np.float32)),
        )

    grown = model.with_layers(layers)
    old_cols = get_cols(model, seg)
    cols = np.asarray(cols, dtype=np.float32).reshape((k,) + old_cols.shape[1:])
    return set_cols(grown, seg, _place(old_cols, pos, cols))


def delete_channels(model: Model, lin_idx: int, positions) -> Model:
    """Remove output channels of one linear layer plus their norm entries and columns."""
    seg = segment(model, lin_idx)
    if seg.consumer_idx is None:
        raise StructuralError("cannot shrink the output layer: model I/O is fixed")
    layer = model.layers[lin_idx]
    width = layer_width(layer)
    pos = np.asarray(sorted(set(int(p) for p in positions)), dtype=int)
    if len(pos) and (pos[0] < 0 or pos[-1] >= width):
        raise StructuralError(f"deletion positions {positions} out of range for width {width}")
    if len(pos) >= width:
        raise StructuralError("cannot delete every channel of a layer")

    layers = list(model.layers)
    layers[lin_idx] = replace(
        layer,
        weight=as_param(np.delete(layer.weight, pos, axis=0)),
        bias=None if layer.bias is None else as_param(np.delete(layer.bias, pos)),
    )
    for n_idx in seg.norm_idxs:
        norm = layers[n_idx]
        layers[n_idx] = Norm(
            id=norm.id,
            gamma=np.delete(norm.gamma, pos),
            beta=np.delete(norm.beta, pos),
            mu=np.delete(norm.mu, pos),
            sigma=np.delete(norm.sigma, pos),
        )
    shrunk = model.with_layers(layers)
    return set_cols(shrunk, seg, np.delete(get_cols(model, seg), pos, axis=0))


def permute_channels(model: Model, lin_idx: int, perm) -> Model:
    """Reorder one layer's output channels; position i of the result takes old channel perm[i]."""
    layer = model.layers[lin_idx]
    width = layer_width(layer)
    perm = np.asarray(perm, dtype=int)
    if perm.shape != (width,) or not np.array_equal(np.sort(perm), np.arange(width)):
        raise StructuralError(f"not a permutation of {width} channels")
    seg = segment(model, lin_idx)

    layers = list(model.layers)
    layers[lin_idx] = replace(
        layer,
        weight=as_param(layer.weight[perm]),
        bias=None if layer.bias is None else as_param(layer.bias[perm]),
    )
    for n_idx in seg.norm_idxs:
        norm = layers[n_idx]
        layers[n_idx] = Norm(id=norm.id, gamma=norm.gamma[perm], beta=norm.beta[perm],
                             mu=norm.mu[perm], sigma=norm.sigma[perm])
    permuted = model.with_layers(layers)
    if seg.consumer_idx is not None:
        permuted = set_cols(permuted, seg, get_cols(model, seg)[perm])
    return permuted


def scale_channels(model: Model, lin_idx: int, scales: np.ndarray) -> Model:
    """Multiply each channel's incoming side by scales[c] and divide its outgoing side.

    Norm entries in the segment track the incoming side: mu and beta scale with
    the channel so the normalized activation scales linearly.
    """
    layer = model.layers[lin_idx]
    width = layer_width(layer)
    scales = np.asarray(scales, dtype=np.float32)
    if scales.shape != (width,):
        raise StructuralError(f"need one scale per channel ({width})")
    if not (scales > 0).all():
        raise StructuralError("scales must be strictly positive")
    seg = segment(model, lin_idx)
    if seg.consumer_idx is None:
        raise StructuralError("cannot rescale the output layer")

    shape = (width,) + (1,) * (layer.weight.ndim - 1)
    layers = list(model.layers)
    layers[lin_idx] = replace(
        layer,
        weight=as_param(layer.weight * scales.reshape(shape)),
        bias=None if layer.bias is None else as_param(layer.bias * scales),
    )
    for n_idx in seg.norm_idxs:
        norm = layers[n_idx]
        layers[n_idx] = Norm(id=norm.id, gamma=norm.gamma, beta=norm.beta * scales,
                             mu=norm.mu * scales, sigma=norm.sigma)
    scaled = model.with_layers(layers)
    cols = get_cols(model, seg)
    cols = cols / scales.reshape((width,) + (1,) * (cols.ndim - 1))
    return set_cols(scaled, seg, cols.astype(np.float32))
