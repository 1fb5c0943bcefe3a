"""Dummy-neuron generation primitives, the injection campaign, and camouflage.

Three generation primitives:

* zero    — new channels with one side (incoming or outgoing) all zero.
* clique  — a group sharing one incoming row whose outgoing blocks sum to the
            zero tensor, bit-exactly when accumulated in member order.
* split   — one existing channel replaced by d+1 substitutes sharing its
            incoming row; their outgoing blocks sum to the original outgoing
            block, bit-exactly in member order.

The campaign walks hidden layers back to front, so channels added earlier
(nearer the output) get their incoming rows extended with freshly sampled
values once the preceding layer grows — after a full campaign no group still
shares raw incoming rows, which is the attack's stealth mechanism. Camouflage
then rescales members (incoming * lambda, outgoing / lambda), permutes every
expanded layer, and optionally pads conv kernels.

Residual-coupled layers (partners of a skip add) always receive identical
edits at identical positions; the single-layer primitives refuse such layers
and point at inject_campaign.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import _edits
from ._edits import (
    alignment_classes,
    get_cols,
    hidden_linear_chain,
    segment,
    set_cols,
)
from .ir import (
    Conv2D,
    FullyConnected,
    Model,
    NeuronRef,
    Norm,
    StructuralError,
    as_param,
    layer_width,
    require_valid,
)

KINDS = ("zero", "clique", "split")
ZERO_SIDES = ("incoming", "outgoing")


def ordered_sum(parts: Sequence[np.ndarray]) -> np.ndarray:
    """Sequential float32 accumulation in the given order."""
    acc = np.zeros_like(np.asarray(parts[0], np.float32))
    for p in parts:
        acc = acc + np.asarray(p, np.float32)
    return acc


def exact_deficit(
    target: np.ndarray, parts: Sequence[np.ndarray]
) -> tuple[list[np.ndarray], np.ndarray]:
    """Deficit summand making the sequential float32 sum of parts + [deficit] hit target bit-exactly.

    A freely-chosen closing summand cannot always reach the target: when the
    running sum cancels against it from a coarser binade, the rounded sum can
    only land on the coarser grid. Where that happens the last sampled part is
    adjusted so the running sum falls in [target/2, 2*target], where float32
    subtraction is exact (Sterbenz), which makes the closing step exact too.
    Returns (parts, deficit) with the possibly-adjusted parts.
    """
    target = np.asarray(target, np.float32)
    parts = [np.array(p, np.float32) for p in parts]
    if not parts:
        return parts, target.copy()
    s_prev = ordered_sum(parts[:-1]) if len(parts) > 1 else np.zeros_like(target)
    p = parts[-1]
    s = s_prev + p
    v = (target - s).astype(np.float32)
    bad = (s + v) != target
    if bad.any():
        idx = np.flatnonzero(bad.ravel())
        pf, sf, tf, vf = p.ravel(), s_prev.ravel(), target.ravel(), v.ravel()
        pf[idx] = (np.float32(0.75) * tf[idx] - sf[idx]).astype(np.float32)
        s_i = sf[idx] + pf[idx]
        vf[idx] = (tf[idx] - s_i).astype(np.float32)
        if np.any((s_i + vf[idx]) != tf[idx]):
            raise StructuralError(
                "cannot realize exact outgoing-weight conservation in float32"
            )
    parts[-1] = p
    return parts, v


def _fit(arr: np.ndarray) -> tuple[float, float]:
    return float(arr.mean()), float(max(arr.std(), 1e-3))


def _sample(rng, fit, shape):
    return rng.normal(fit[0], fit[1], size=shape).astype(np.float32)


def _log_uniform(rng, lo, hi, size=None):
    return np.exp(rng.uniform(np.log(lo), np.log(hi), size=size)).astype(np.float32)


# --- plan records ---------------------------------------------------------------


@dataclass(frozen=True)
class DummyGroup:
    """One injected group; indices are positions in the final (obfuscated) layer."""

    layer_id: int
    kind: str
    member_indices: tuple[int, ...]
    d: int
    replaced_neuron: NeuronRef | None = None  # pre-injection index (split only)
    scales: tuple[float, ...] = ()
    zero_side: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive {self.kind!r}")
        if self.kind == "clique" and self.d < 2:
            raise ValueError("clique groups need d >= 2")
        if self.kind == "split" and (self.d < 1 or self.replaced_neuron is None):
            raise ValueError("split groups need d >= 1 dummies plus a replaced neuron")
        expect = self.d + 1 if self.kind == "split" else self.d
        if len(self.member_indices) != expect:
            raise ValueError("member_indices inconsistent with group size")
        scales = self.scales or (1.0,) * expect
        if len(scales) != expect or any(s <= 0 for s in scales):
            raise ValueError("need one positive scale per member")
        object.__setattr__(self, "scales", tuple(float(s) for s in scales))
        object.__setattr__(self, "member_indices", tuple(int(i) for i in self.member_indices))


@dataclass(frozen=True)
class ObfuscationConfig:
    """Campaign knobs; mix weights are (zero, clique, split) and must sum to 1."""

    alpha: float
    mix: tuple[float, float, float] = (0.0, 0.5, 0.5)
    clique_sizes: tuple[int, ...] = (2, 3, 4)
    split_sizes: tuple[int, ...] = (1, 2, 3)
    zero_sizes: tuple[int, ...] = (1, 2, 3)
    scale_range: tuple[float, float] = (0.5, 2.0)
    enable_permutation: bool = True
    enable_rescaling: bool = True
    enable_kernel_expansion: bool = False
    kernel_growth: int = 2
    zero_side: str = "mixed"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("attack strength alpha must lie in (0, 1]")
        if len(self.mix) != 3 or min(self.mix) < 0 or abs(sum(self.mix) - 1.0) > 1e-9:
            raise ValueError("mix weights (zero, clique, split) must be >= 0 and sum to 1")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale range must satisfy 0 < lo <= hi")
        if self.zero_side not in ZERO_SIDES + ("mixed",):
            raise ValueError(f"zero_side must be one of {ZERO_SIDES + ('mixed',)}")

    def to_json_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "mix": list(self.mix),
            "clique_sizes": list(self.clique_sizes),
            "split_sizes": list(self.split_sizes),
            "zero_sizes": list(self.zero_sizes),
            "scale_range": list(self.scale_range),
            "enable_permutation": self.enable_permutation,
            "enable_rescaling": self.enable_rescaling,
            "enable_kernel_expansion": self.enable_kernel_expansion,
            "kernel_growth": self.kernel_growth,
            "zero_side": self.zero_side,
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ObfuscationConfig":
        return cls(
            alpha=float(d["alpha"]),
            mix=tuple(d["mix"]),
            clique_sizes=tuple(d["clique_sizes"]),
            split_sizes=tuple(d["split_sizes"]),
            zero_sizes=tuple(d["zero_sizes"]),
            scale_range=tuple(d["scale_range"]),
            enable_permutation=bool(d["enable_permutation"]),
            enable_rescaling=bool(d["enable_rescaling"]),
            enable_kernel_expansion=bool(d["enable_kernel_expansion"]),
            kernel_growth=int(d["kernel_growth"]),
            zero_side=str(d["zero_side"]),
            seed=int(d["seed"]),
        )


@dataclass(frozen=True)
class ObfuscationPlan:
    """The attacker's private ledger: everything needed to replay or invert the attack."""

    config: ObfuscationConfig
    groups: tuple[DummyGroup, ...] = ()
    permutations: dict[int, tuple[int, ...]] = field(default_factory=dict)
    kernel_paddings: dict[int, tuple[int, int, int]] = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def alpha(self) -> float:
        return self.config.alpha

    def groups_for_layer(self, layer_id: int) -> list[DummyGroup]:
        return [g for g in self.groups if g.layer_id == layer_id]

    def dummy_positions(self, layer_id: int) -> set[int]:
        out: set[int] = set()
        for g in self.groups_for_layer(layer_id):
            out.update(g.member_indices)
        return out

    def to_json(self) -> str:
        payload = {
            "config": self.config.to_json_dict(),
            "groups": [
                {
                    "layer_id": g.layer_id,
                    "kind": g.kind,
                    "member_indices": list(g.member_indices),
                    "d": g.d,
                    "replaced_neuron": (
                        None
                        if g.replaced_neuron is None
                        else [g.replaced_neuron.layer_id, g.replaced_neuron.index]
                    ),
                    "scales": list(g.scales),
                    "zero_side": g.zero_side,
                }
                for g in self.groups
            ],
            "permutations": {str(k): list(v) for k, v in sorted(self.permutations.items())},
            "kernel_paddings": {str(k): list(v) for k, v in sorted(self.kernel_paddings.items())},
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ObfuscationPlan":
        d = json.loads(text)
        groups = tuple(
            DummyGroup(
                layer_id=int(g["layer_id"]),
                kind=g["kind"],
                member_indices=tuple(g["member_indices"]),
                d=int(g["d"]),
                replaced_neuron=(
                    None
                    if g["replaced_neuron"] is None
                    else NeuronRef(int(g["replaced_neuron"][0]), int(g["replaced_neuron"][1]))
                ),
                scales=tuple(g["scales"]),
                zero_side=g["zero_side"],
            )
            for g in d["groups"]
        )
        return cls(
            config=ObfuscationConfig.from_json_dict(d["config"]),
            groups=groups,
            permutations={int(k): tuple(v) for k, v in d["permutations"].items()},
            kernel_paddings={int(k): tuple(v) for k, v in d["kernel_paddings"].items()},
        )


# --- shared injection machinery -------------------------------------------------


@dataclass
class _GroupSpec:
    kind: str
    d: int
    zero_side: str | None = None
    replaced: int | None = None  # pre-injection channel index (split)


def _hidden_lin_idx(model: Model, layer_id: int) -> int:
    idx = model.index_of(layer_id)
    layer = model.layers[idx]
    if not isinstance(layer, (Conv2D, FullyConnected)):
        raise StructuralError(f"layer {layer_id} is not conv2d/fc")
    if segment(model, idx).consumer_idx is None:
        raise StructuralError(
            f"layer {layer_id} determines the model output width; growing it would change the API"
        )
    return idx


def _reject_residual_coupled(model: Model, lin_idx: int, op: str) -> None:
    for cls in alignment_classes(model):
        if lin_idx in cls and len(cls) > 1:
            raise StructuralError(
                f"{op}: layer is residual-coupled; inject_campaign handles paired layers"
            )


def _norm_fits(norm: Norm) -> dict[str, tuple[float, float]]:
    return {name: _fit(getattr(norm, name)) for name in ("gamma", "beta", "mu", "sigma")}


def _sample_norm_entry(rng, fits, k: int) -> dict[str, np.ndarray]:
    sigma = np.abs(_sample(rng, fits["sigma"], k)) + np.float32(1e-3)
    return {
        "gamma": _sample(rng, fits["gamma"], k),
        "beta": _sample(rng, fits["beta"], k),
        "mu": _sample(rng, fits["mu"], k),
        "sigma": sigma,
    }


def _zero_norm_entry(rng, fits, k: int) -> dict[str, np.ndarray]:
    # beta = mu = 0 keeps a zero pre-activation at exactly zero through the norm
    sigma = np.abs(_sample(rng, fits["sigma"], k)) + np.float32(1e-3)
    return {
        "gamma": _sample(rng, fits["gamma"], k),
        "beta": np.zeros(k, np.float32),
        "mu": np.zeros(k, np.float32),
        "sigma": sigma,
    }


def _inject_groups(model: Model, lin_idx: int, specs: list[_GroupSpec],
                   chunks: list[list[int]], rng) -> tuple[Model, list[DummyGroup]]:
    """Grow one layer by all groups at once; chunk g holds group g's final dummy positions."""
    layer = model.layers[lin_idx]
    seg = segment(model, lin_idx)
    width = layer_width(layer)
    k_total = sum(len(c) for c in chunks)
    if k_total == 0:
        return model, []
    new_n = width + k_total
    all_pos = sorted(p for c in chunks for p in c)
    keep = np.setdiff1d(np.arange(new_n), all_pos)  # old channel c sits at keep[c]

    row_shape = layer.weight.shape[1:]
    in_fit = _fit(layer.weight)
    cols_now = get_cols(model, seg)
    block = cols_now.shape[1:]
    out_fit = _fit(model.layers[seg.consumer_idx].weight)
    norms = [model.layers[i] for i in seg.norm_idxs]
    norm_fits = [_norm_fits(n) for n in norms]
    bias_fit = _fit(layer.bias) if layer.bias is not None else None

    entries: list[tuple[int, np.ndarray, np.ndarray, float, list[dict[str, float]]]] = []
    records: list[DummyGroup] = []
    col_replacements: dict[int, np.ndarray] = {}

    def norm_vals(kind: str, side: str | None, count: int, copy_from: int | None):
        out = []
        for norm, fits in zip(norms, norm_fits):
            if kind == "split":
                out.append(
                    {
                        name: np.repeat(getattr(norm, name)[copy_from], count).astype(np.float32)
                        for name in ("gamma", "beta", "mu", "sigma")
                    }
                )
            elif kind == "clique":
                one = _sample_norm_entry(rng, fits, 1)
                out.append({name: np.repeat(one[name], count) for name in one})
            elif side == "incoming":
                out.append(_zero_norm_entry(rng, fits, count))
            else:
                out.append(_sample_norm_entry(rng, fits, count))
        return out

    for spec, chunk in zip(specs, chunks):
        d = spec.d
        if spec.kind == "zero":
            side = spec.zero_side
            if side == "incoming":
                rows = np.zeros((d,) + row_shape, np.float32)
                cols = _sample(rng, out_fit, (d,) + block)
                biases = np.zeros(d, np.float32)
            else:
                rows = _sample(rng, in_fit, (d,) + row_shape)
                cols = np.zeros((d,) + block, np.float32)
                biases = _sample(rng, bias_fit, d) if bias_fit else np.zeros(d, np.float32)
            nvals = norm_vals("zero", side, d, None)
            for j, p in enumerate(chunk):
                entries.append((p, rows[j], cols[j], float(biases[j]), [
                    {name: v[name][j] for name in v} for v in nvals
                ]))
            records.append(DummyGroup(layer.id, "zero", tuple(chunk), d, zero_side=side))
        elif spec.kind == "clique":
            shared = _sample(rng, in_fit, row_shape)
            outs = [_sample(rng, out_fit, block) for _ in range(d - 1)]
            outs.append((-ordered_sum(outs)).astype(np.float32))
            shared_bias = float(_sample(rng, bias_fit, 1)[0]) if bias_fit else 0.0
            nvals = norm_vals("clique", None, d, None)
            for j, p in enumerate(chunk):
                entries.append((p, shared, outs[j], shared_bias, [
                    {name: v[name][j] for name in v} for v in nvals
                ]))
            records.append(DummyGroup(layer.id, "clique", tuple(chunk), d))
        else:  # split
            c = spec.replaced
            row_c = np.array(layer.weight[c])
            bias_c = float(layer.bias[c]) if layer.bias is not None else 0.0
            orig_out = np.array(cols_now[c])
            sampled, deficit = exact_deficit(
                orig_out, [_sample(rng, out_fit, block) for _ in range(d)]
            )
            col_replacements[c] = sampled[0]
            member_cols = sampled[1:] + [deficit]
            nvals = norm_vals("split", None, d, c)
            for j, p in enumerate(chunk):
                entries.append((p, row_c, member_cols[j], bias_c, [
                    {name: v[name][j] for name in v} for v in nvals
                ]))
            records.append(
                DummyGroup(
                    layer.id,
                    "split",
                    (int(keep[c]),) + tuple(chunk),
                    d,
                    replaced_neuron=NeuronRef(layer.id, int(c)),
                )
            )

    if col_replacements:
        cols_new = cols_now.copy()
        for c, v in col_replacements.items():
            cols_new[c] = v
        model = set_cols(model, seg, cols_new)

    entries.sort(key=lambda e: e[0])
    positions = [e[0] for e in entries]
    rows = np.stack([e[1] for e in entries])
    cols = np.stack([e[2] for e in entries])
    biases = np.array([e[3] for e in entries], np.float32) if layer.bias is not None else None
    norm_entries = None
    if norms:
        norm_entries = []
        for n_i in range(len(norms)):
            norm_entries.append(
                {
                    name: np.array([e[4][n_i][name] for e in entries], np.float32)
                    for name in ("gamma", "beta", "mu", "sigma")
                }
            )
    model = _edits.insert_channels(model, lin_idx, positions, rows, biases, norm_entries, cols)
    return model, records


# --- single-layer primitives -----------------------------------------------------


def neuron_zero_inject(
    model: Model, layer_id: int, count: int, zero_side: str = "outgoing", seed: int = 0
) -> tuple[Model, DummyGroup]:
    """Add `count` channels with the chosen side all zero; the other side is
    sampled from the layer's fitted weight distribution."""
    require_valid(model)
    if zero_side not in ZERO_SIDES:
        raise ValueError(f"zero_side must be one of {ZERO_SIDES}")
    if count < 0:
        raise ValueError("count must be >= 0")
    lin_idx = _hidden_lin_idx(model, layer_id)
    group = DummyGroup(layer_id, "zero", (), 0, zero_side=zero_side)
    if count == 0:
        return model, group
    _reject_residual_coupled(model, lin_idx, "neuron_zero_inject")
    rng = np.random.default_rng(seed)
    width = layer_width(model.layers[lin_idx])
    chunk = [int(p) for p in rng.choice(width + count, size=count, replace=False)]
    out, records = _inject_groups(
        model, lin_idx, [_GroupSpec("zero", count, zero_side=zero_side)], [chunk], rng
    )
    return out, records[0]


@dataclass(frozen=True)
class CliqueWeights:
    """Generated clique weights before injection."""

    layer_id: int
    incoming: np.ndarray  # one shared row
    outgoing: np.ndarray  # (d, *block); accumulating members in order gives exactly zero

    @property
    def d(self) -> int:
        return self.outgoing.shape[0]


def neuron_clique_generate(model: Model, layer_id: int, d: int, seed: int = 0) -> CliqueWeights:
    """Sample a cancelling group: one shared incoming row, d outgoing blocks summing to zero."""
    require_valid(model)
    if d < 2:
        raise ValueError("clique groups need d >= 2")
    lin_idx = _hidden_lin_idx(model, layer_id)
    layer = model.layers[lin_idx]
    seg = segment(model, lin_idx)
    rng = np.random.default_rng(seed)
    shared = _sample(rng, _fit(layer.weight), layer.weight.shape[1:])
    block = get_cols(model, seg).shape[1:]
    out_fit = _fit(model.layers[seg.consumer_idx].weight)
    outs = [_sample(rng, out_fit, block) for _ in range(d - 1)]
    outs.append((-ordered_sum(outs)).astype(np.float32))
    return CliqueWeights(layer_id=layer_id, incoming=as_param(shared), outgoing=as_param(np.stack(outs)))


def inject_clique(model: Model, layer_id: int, d: int, seed: int = 0) -> tuple[Model, DummyGroup]:
    """Generate and inject one clique into a hidden layer at sampled positions."""
    require_valid(model)
    if d < 2:
        raise ValueError("clique groups need d >= 2")
    lin_idx = _hidden_lin_idx(model, layer_id)
    _reject_residual_coupled(model, lin_idx, "inject_clique")
    rng = np.random.default_rng(seed)
    width = layer_width(model.layers[lin_idx])
    chunk = [int(p) for p in rng.choice(width + d, size=d, replace=False)]
    out, records = _inject_groups(model, lin_idx, [_GroupSpec("clique", d)], [chunk], rng)
    return out, records[0]


def neuron_split(model: Model, neuron: NeuronRef, d: int, seed: int = 0) -> tuple[Model, DummyGroup]:
    """Replace one hidden channel by d+1 substitutes sharing its incoming weights."""
    require_valid(model)
    if d < 1:
        raise ValueError("split needs d >= 1 added substitutes")
    lin_idx = _hidden_lin_idx(model, neuron.layer_id)
    _reject_residual_coupled(model, lin_idx, "neuron_split")
    width = layer_width(model.layers[lin_idx])
    if not 0 <= neuron.index < width:
        raise StructuralError(f"neuron index {neuron.index} out of range for width {width}")
    rng = np.random.default_rng(seed)
    chunk = [int(p) for p in rng.choice(width + d, size=d, replace=False)]
    out, records = _inject_groups(
        model, lin_idx, [_GroupSpec("split", d, replaced=neuron.index)], [chunk], rng
    )
    return out, records[0]


# --- camouflage -------------------------------------------------------------------


def _class_of(model: Model, lin_idx: int) -> list[int]:
    for cls in alignment_classes(model):
        if lin_idx in cls:
            return cls
    return [lin_idx]


def rescale_neuron(model: Model, neuron: NeuronRef, lam: float) -> Model:
    """Scale one channel's incoming side by lam and its outgoing side by 1/lam.

    Residual-aligned channels scale together (the skip add is only coherent
    when both partners carry the same per-channel scale).
    """
    require_valid(model)
    if lam <= 0:
        raise ValueError("scale must be strictly positive")
    lin_idx = _hidden_lin_idx(model, neuron.layer_id)
    for idx in _class_of(model, lin_idx):
        seg = segment(model, idx)
        if not seg.has_relu:
            raise StructuralError(
                "rescale requires a positively-homogeneous activation after the layer"
            )
        width = layer_width(model.layers[idx])
        if not 0 <= neuron.index < width:
            raise StructuralError(f"neuron index {neuron.index} out of range for width {width}")
    for idx in _class_of(model, lin_idx):
        scales = np.ones(layer_width(model.layers[idx]), np.float32)
        scales[neuron.index] = lam
        model = _edits.scale_channels(model, idx, scales)
    return model


def permute_layer(model: Model, layer_id: int, perm) -> Model:
    """Reorder a hidden layer's channels; partner layers of a skip add get the same order."""
    require_valid(model)
    lin_idx = _hidden_lin_idx(model, layer_id)
    for idx in _class_of(model, lin_idx):
        model = _edits.permute_channels(model, idx, perm)
    return model


def kernel_expand(
    model: Model, layer_id: int, new_kh: int, new_kw: int, mode: str = "zero_pad"
) -> Model:
    """Grow a conv layer's kernels while preserving the function.

    zero_pad rings are all zero. paired_nonzero samples rings that cancel
    across input channels with identical activations (a previously fully-split
    producer layer), so the rings carry arbitrary-looking values.
    """
    require_valid(model)
    idx = model.index_of(layer_id)
    layer = model.layers[idx]
    if not isinstance(layer, Conv2D):
        raise StructuralError("kernel expansion applies to conv2d layers")
    kh, kw = layer.kernel
    if new_kh < kh or new_kw < kw:
        raise StructuralError("kernel can only grow")
    dh, dw = new_kh - kh, new_kw - kw
    if dh % 2 or dw % 2:
        raise StructuralError("kernel growth must keep parity (grow by an even amount)")
    if dh != dw:
        raise StructuralError("padding is isotropic; grow kh and kw by the same amount")
    if dh == 0:
        return model
    ring = dh // 2
    new_w = np.pad(layer.weight, ((0, 0), (0, 0), (ring, ring), (ring, ring)))

    if mode == "paired_nonzero":
        groups = _identical_input_channel_groups(model, idx)
        if not any(len(g) > 1 for g in groups):
            raise StructuralError(
                "paired_nonzero requires input channels with cancellation partners "
                "(split the producer layer first)"
            )
        rng = np.random.default_rng(0xC0FFEE ^ layer_id)
        fit = _fit(layer.weight)
        mask = np.zeros((new_kh, new_kw), bool)
        mask[ring:ring + kh, ring:ring + kw] = True
        f = layer.out_channels
        for group in groups:
            if len(group) < 2:
                continue
            rings = []
            for _ in range(len(group) - 1):
                r = _sample(rng, fit, (f, new_kh, new_kw))
                r[:, mask] = 0.0
                rings.append(r)
            rings.append((-ordered_sum(rings)).astype(np.float32))
            for c, r in zip(group, rings):
                new_w[:, c] += r
    elif mode != "zero_pad":
        raise ValueError("mode must be zero_pad or paired_nonzero")

    layers = list(model.layers)
    layers[idx] = replace(layer, weight=as_param(new_w), pad=layer.pad + ring)
    return model.with_layers(layers)


def _identical_input_channel_groups(model: Model, conv_idx: int) -> list[list[int]]:
    """Input channels of a conv whose activations are provably identical.

    Channels produced by one linear layer with bit-identical rows (and bias
    and norm entries) always carry the same value.
    """
    prev_lin = None
    for i in range(conv_idx - 1, -1, -1):
        if isinstance(model.layers[i], (Conv2D, FullyConnected)):
            prev_lin = i
            break
        if isinstance(model.layers[i], Norm) or model.layers[i].kind in ("relu", "residual_add"):
            continue
        break
    if prev_lin is None:
        return []
    producer = model.layers[prev_lin]
    seg = segment(model, prev_lin)
    norms = [model.layers[i] for i in seg.norm_idxs]
    buckets: dict[bytes, list[int]] = {}
    for c in range(layer_width(producer)):
        key = producer.weight[c].tobytes()
        if producer.bias is not None:
            key += producer.bias[c].tobytes()
        for n in norms:
            key += n.gamma[c].tobytes() + n.beta[c].tobytes() + n.mu[c].tobytes() + n.sigma[c].tobytes()
        buckets.setdefault(key, []).append(c)
    return sorted(buckets.values())


def split_all_neurons(model: Model, layer_id: int, seed: int = 0) -> tuple[Model, list[DummyGroup]]:
    """Split every channel of one hidden layer once (d=1), giving each a partner.

    This is the precondition transform for paired_nonzero kernel expansion of
    the consumer layer.
    """
    require_valid(model)
    lin_idx = _hidden_lin_idx(model, layer_id)
    _reject_residual_coupled(model, lin_idx, "split_all_neurons")
    rng = np.random.default_rng(seed)
    width = layer_width(model.layers[lin_idx])
    positions = [int(p) for p in rng.choice(2 * width, size=width, replace=False)]
    specs = [_GroupSpec("split", 1, replaced=c) for c in range(width)]
    chunks = [[positions[c]] for c in range(width)]
    return _inject_groups(model, lin_idx, specs, chunks, rng)


# --- the campaign -----------------------------------------------------------------


def _allocate_groups(rng, width: int, config: ObfuscationConfig) -> list[_GroupSpec]:
    """Groups whose added-channel counts sum exactly to ceil(alpha * width)."""
    target = int(np.ceil(config.alpha * width))
    remaining = target
    free_originals = list(range(width))
    specs: list[_GroupSpec] = []
    sizes = {"zero": config.zero_sizes, "clique": config.clique_sizes, "split": config.split_sizes}
    while remaining > 0:
        kind = str(rng.choice(KINDS, p=config.mix))
        if kind == "clique" and remaining < 2:
            # exact growth requirement: fall back to the stealthiest compatible primitive
            kind = "zero" if config.mix[2] == 0 and config.mix[0] > 0 else "split"
        d = int(min(rng.choice(sizes[kind]), remaining))
        if kind == "clique":
            d = max(d, 2)
        spec = _GroupSpec(kind, d)
        if kind == "zero":
            spec.zero_side = (
                config.zero_side if config.zero_side != "mixed" else str(rng.choice(ZERO_SIDES))
            )
        elif kind == "split":
            spec.replaced = int(free_originals.pop(int(rng.integers(len(free_originals)))))
        specs.append(spec)
        remaining -= d
    return specs


def inject_campaign(model: Model, config: ObfuscationConfig) -> tuple[Model, ObfuscationPlan]:
    """Run the full attack: back-to-front injection, then rescale / permute /
    kernel-pad camouflage, recording everything in an ObfuscationPlan."""
    require_valid(model)
    rng = np.random.default_rng(config.seed)
    hidden = hidden_linear_chain(model)
    if not hidden:
        raise StructuralError("model has no hidden linear layers to grow")
    classes = {tuple(cls): cls for cls in alignment_classes(model)}
    cls_by_member = {idx: key for key, cls in classes.items() for idx in cls}

    for key, cls in classes.items():
        widths = {layer_width(model.layers[i]) for i in cls}
        if len(widths) > 1:
            raise StructuralError("residual-coupled layers disagree on width")

    decided: dict[tuple, tuple[list[_GroupSpec], list[list[int]]]] = {}
    work = model
    all_groups: list[DummyGroup] = []
    for lin in reversed(hidden):
        key = cls_by_member[lin]
        if key not in decided:
            width = layer_width(work.layers[lin])
            specs = _allocate_groups(rng, width, config)
            k = sum(s.d for s in specs)
            flat = [int(p) for p in rng.choice(width + k, size=k, replace=False)]
            chunks, at = [], 0
            for s in specs:
                chunks.append(flat[at:at + s.d])
                at += s.d
            decided[key] = (specs, chunks)
        specs, chunks = decided[key]
        work, records = _inject_groups(work, lin, specs, chunks, rng)
        all_groups.extend(records)

    groups_by_layer: dict[int, list[int]] = {}
    for i, g in enumerate(all_groups):
        groups_by_layer.setdefault(g.layer_id, []).append(i)

    # rescale camouflage: one lambda per dummy slot, shared across residual partners
    if config.enable_rescaling:
        for key in decided:
            cls = classes[key]
            if not all(segment(work, idx).has_relu for idx in cls):
                continue
            width = layer_width(work.layers[cls[0]])
            sample_layer_id = work.layers[cls[0]].id
            slots = sorted(
                {p for gi in groups_by_layer.get(sample_layer_id, []) for p in all_groups[gi].member_indices}
            )
            if not slots:
                continue
            lams = _log_uniform(rng, config.scale_range[0], config.scale_range[1], len(slots))
            lam_at = dict(zip(slots, lams))
            vec = np.ones(width, np.float32)
            for p, lam in lam_at.items():
                vec[p] = lam
            for idx in cls:
                work = _edits.scale_channels(work, idx, vec)
                lid = work.layers[idx].id
                for gi in groups_by_layer.get(lid, []):
                    g = all_groups[gi]
                    all_groups[gi] = replace(
                        g, scales=tuple(float(lam_at[p]) for p in g.member_indices)
                    )

    # permutation camouflage: every expanded layer, partners share the order
    permutations: dict[int, tuple[int, ...]] = {}
    if config.enable_permutation:
        for key in decided:
            cls = classes[key]
            width = layer_width(work.layers[cls[0]])
            perm = rng.permutation(width)
            inv = np.argsort(perm)
            for idx in cls:
                work = _edits.permute_channels(work, idx, perm)
                lid = work.layers[idx].id
                permutations[lid] = tuple(int(p) for p in perm)
                for gi in groups_by_layer.get(lid, []):
                    g = all_groups[gi]
                    all_groups[gi] = replace(
                        g, member_indices=tuple(int(inv[p]) for p in g.member_indices)
                    )

    kernel_paddings: dict[int, tuple[int, int, int]] = {}
    if config.enable_kernel_expansion:
        for layer in work.layers:
            if isinstance(layer, Conv2D):
                kh, kw = layer.kernel
                work = kernel_expand(
                    work, layer.id, kh + config.kernel_growth, kw + config.kernel_growth, "zero_pad"
                )
                grown = work.layer(layer.id)
                kernel_paddings[layer.id] = (grown.kernel[0], grown.kernel[1], grown.pad)

    plan = ObfuscationPlan(
        config=config,
        groups=tuple(all_groups),
        permutations=permutations,
        kernel_paddings=kernel_paddings,
    )
    return work, plan


def apply_plan(model: Model, plan: ObfuscationPlan) -> Model:
    """Replay a recorded campaign on a fresh copy of the original model.

    The campaign is rerun from the plan's config (all sampling is seeded); the
    regenerated plan must match the recorded one exactly.
    """
    out, regenerated = inject_campaign(model, plan.config)
    if regenerated != plan:
        raise StructuralError("plan does not replay on this model (wrong base model?)")
    return out
