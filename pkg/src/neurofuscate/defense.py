"""Defender-side tooling: anomaly detection, elimination, reference-based recovery.

The elimination pass walks hidden layers front to back. At each layer it
buckets neurons by their L2-normalized incoming weights (quantized hash as the
fast path, cosine >= 1 - 1e-6 as the match test), merges every bucket of two
or more into its first member (incoming = unit direction, outgoing = sum of
norm-weighted outgoing blocks), then deletes neurons whose incoming or
outgoing weights vanish. Because earlier-layer deletions strip the freshly
sampled columns that camouflaged deeper groups, proportionality reappears
layer by layer and the pass unwinds a full back-to-front campaign.

Merging destroys per-neuron scales (incoming rows leave normalized), which is
exactly why elimination alone does not restore a watermark; recovery with the
original model re-matches neuron order and scale and does.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace as dc_replace

import numpy as np

from ._edits import (
    delete_channels,
    get_cols,
    hidden_linear_chain,
    permute_channels,
    scale_channels,
    segment,
    set_cols,
)
from .ir import (
    Conv2D,
    Model,
    NeuronRef,
    Norm,
    as_param,
    layer_width,
    require_valid,
)
from .obfuscate import ObfuscationPlan

ZERO_TOL = 1e-6  # vanished-weight test; sits far below any real weight magnitude
COSINE_MATCH = 1.0 - 1e-6
HASH_DECIMALS = 6


@dataclass(frozen=True)
class NeuronFeature:
    neuron: NeuronRef
    vector: np.ndarray


def neuron_features(model: Model, layer_id: int) -> list[NeuronFeature]:
    """Concatenated flattened incoming and outgoing weights per neuron."""
    lin_idx = model.index_of(layer_id)
    layer = model.layers[lin_idx]
    seg = segment(model, lin_idx)
    width = layer_width(layer)
    rows = layer.weight.astype(np.float64).reshape(width, -1)
    cols = get_cols(model, seg).astype(np.float64).reshape(width, -1)
    feats = np.concatenate([rows, cols], axis=1)
    return [NeuronFeature(NeuronRef(layer_id, i), feats[i]) for i in range(width)]


# --- anomaly detectors ------------------------------------------------------------


def _kmeans_two(feats: np.ndarray, seed: int, restarts: int = 50) -> np.ndarray:
    """2-means with k-means++ init and restarts; returns the best assignment."""
    n = feats.shape[0]
    rng = np.random.default_rng(seed)
    best_assign, best_inertia = None, np.inf
    for _ in range(restarts):
        first = int(rng.integers(n))
        d2 = np.sum((feats - feats[first]) ** 2, axis=1)
        total = d2.sum()
        if total <= 0:
            return np.zeros(n, dtype=int)
        second = int(rng.choice(n, p=d2 / total))
        centers = feats[[first, second]].copy()
        assign = None
        for _ in range(100):
            dists = ((feats[:, None, :] - centers[None]) ** 2).sum(axis=2)
            new_assign = dists.argmin(axis=1)
            if assign is not None and np.array_equal(new_assign, assign):
                break
            assign = new_assign
            for c in range(2):
                mask = assign == c
                if mask.any():
                    centers[c] = feats[mask].mean(axis=0)
        inertia = float(((feats - centers[assign]) ** 2).sum())
        if inertia < best_inertia:
            best_inertia, best_assign = inertia, assign.copy()
    return best_assign


def detect_cluster(model: Model, layer_id: int, seed: int = 0) -> list[NeuronRef]:
    """Flag the smaller of two k-means clusters over the neuron features."""
    feats_list = neuron_features(model, layer_id)
    if len(feats_list) < 4:
        raise ValueError("layer too narrow for clustering (width >= 4 required)")
    feats = np.stack([f.vector for f in feats_list])
    if np.allclose(feats, feats[0]):
        return []
    assign = _kmeans_two(feats, seed)
    sizes = [int((assign == c).sum()) for c in (0, 1)]
    if sizes[0] == sizes[1]:
        norms = [np.linalg.norm(feats[assign == c], axis=1).mean() for c in (0, 1)]
        flagged = int(np.argmin(norms))
    else:
        flagged = int(np.argmin(sizes))
    return [f.neuron for f, a in zip(feats_list, assign) if a == flagged]


def detect_svd(model: Model, layer_id: int) -> list[NeuronRef]:
    """Flag neurons with outlying squared projection on the top singular direction."""
    feats_list = neuron_features(model, layer_id)
    if len(feats_list) < 4:
        raise ValueError("layer too narrow for spectral scoring (width >= 4 required)")
    feats = np.stack([f.vector for f in feats_list])
    centered = feats - feats.mean(axis=0)
    if np.allclose(centered, 0):
        return []
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    scores = (centered @ vt[0]) ** 2
    cut = scores.mean() + 2.0 * scores.std()
    return [f.neuron for f, s in zip(feats_list, scores) if s > cut]


@dataclass(frozen=True)
class DetectionReport:
    method: str
    flagged: dict[int, tuple[NeuronRef, ...]]
    rates: dict[str, float] | None = None

    def to_json_dict(self) -> dict:
        return {
            "method": self.method,
            "flagged": {
                str(lid): [n.index for n in refs] for lid, refs in sorted(self.flagged.items())
            },
            "rates": self.rates,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)


def detection_report(
    model: Model, method: str, plan: ObfuscationPlan | None = None, seed: int = 0
) -> DetectionReport:
    """Run one detector over every hidden layer; with the ground-truth plan,
    also report per-primitive detection rates (all group members count)."""
    require_valid(model)
    flagged: dict[int, tuple[NeuronRef, ...]] = {}
    for lin_idx in hidden_linear_chain(model):
        lid = model.layers[lin_idx].id
        if layer_width(model.layers[lin_idx]) < 4:
            continue
        if method == "cluster":
            refs = detect_cluster(model, lid, seed=seed)
        elif method == "svd":
            refs = detect_svd(model, lid)
        else:
            raise ValueError("method must be cluster or svd")
        flagged[lid] = tuple(refs)
    rates = None
    if plan is not None:
        rates = {}
        for kind in ("zero", "clique", "split"):
            hit = total = 0
            for group in plan.groups:
                if group.kind != kind:
                    continue
                marked = {n.index for n in flagged.get(group.layer_id, ())}
                total += len(group.member_indices)
                hit += sum(1 for p in group.member_indices if p in marked)
            # None (not NaN) when the plan holds no groups of this kind: the
            # report must stay strict JSON
            rates[kind] = hit / total if total else None
    return DetectionReport(method=method, flagged=flagged, rates=rates)


# --- elimination ----------------------------------------------------------------------


def _group_by_direction(rows: np.ndarray, skip: set[int]) -> list[list[int]]:
    """Group channel indices whose incoming rows are positively proportional.

    Quantized-direction hashing is the fast path; candidates are confirmed
    (and straddled hash cells recovered) by cosine similarity against group
    representatives.
    """
    width = rows.shape[0]
    dirs = np.zeros_like(rows)
    for i in range(width):
        if i in skip:
            continue
        dirs[i] = rows[i] / np.linalg.norm(rows[i])
    groups: list[list[int]] = []
    rep_dirs: list[np.ndarray] = []
    by_hash: dict[bytes, int] = {}
    for i in range(width):
        if i in skip:
            continue
        key = np.round(dirs[i], HASH_DECIMALS).tobytes()
        g = by_hash.get(key)
        if g is not None and float(dirs[i] @ rep_dirs[g]) >= COSINE_MATCH:
            groups[g].append(i)
            continue
        for g, rep in enumerate(rep_dirs):
            if float(dirs[i] @ rep) >= COSINE_MATCH:
                groups[g].append(i)
                break
        else:
            by_hash[key] = len(groups)
            rep_dirs.append(dirs[i])
            groups.append([i])
    return [g for g in groups if len(g) > 1]


def eliminate_dummy(model: Model) -> tuple[Model, list[dict]]:
    """Merge proportional-incoming neurons and delete vanished ones, front to back.

    No-op on models without proportional groups or zero-weight neurons.
    Preserves forward outputs on attack-generated structures (positive scales).
    """
    require_valid(model)
    work = model
    log: list[dict] = []
    for lin_idx in hidden_linear_chain(model):
        layer = work.layers[lin_idx]
        lid = layer.id
        width = layer_width(layer)
        seg = segment(work, lin_idx)
        rows = layer.weight.astype(np.float64).reshape(width, -1)
        norms = np.linalg.norm(rows, axis=1)
        zero_in = {i for i in range(width) if norms[i] < ZERO_TOL}

        groups = _group_by_direction(rows, skip=zero_in)
        cols = get_cols(work, seg).astype(np.float64)
        new_weight = layer.weight.astype(np.float64).copy()
        new_bias = layer.bias.astype(np.float64).copy() if layer.bias is not None else None
        norm_layers = {i: work.layers[i] for i in seg.norm_idxs}
        norm_arrays = {
            i: {name: getattr(n, name).astype(np.float64).copy() for name in
                ("gamma", "beta", "mu", "sigma")}
            for i, n in norm_layers.items()
        }

        merged_away: list[int] = []
        for group in groups:
            rep = group[0]
            coeffs = norms[group]  # positive by construction
            merged_out = np.tensordot(coeffs, cols[group], axes=1)
            cols[rep] = merged_out
            new_weight[rep] = (rows[rep] / norms[rep]).reshape(layer.weight.shape[1:])
            c_rep = norms[rep]
            if new_bias is not None:
                new_bias[rep] = new_bias[rep] / c_rep
            for arrs in norm_arrays.values():
                arrs["beta"][rep] /= c_rep
                arrs["mu"][rep] /= c_rep
            merged_away.extend(group[1:])

        zero_out = {
            i
            for i in range(width)
            if i not in merged_away and np.abs(cols[i]).max() < ZERO_TOL
        }
        to_delete = sorted(set(merged_away) | zero_in | zero_out)

        if not to_delete and not groups:
            continue

        layers = list(work.layers)
        layers[lin_idx] = dc_replace(
            layer,
            weight=as_param(new_weight),
            bias=None if new_bias is None else as_param(new_bias),
        )
        for n_idx, arrs in norm_arrays.items():
            layers[n_idx] = Norm(id=norm_layers[n_idx].id, **{k: as_param(v) for k, v in arrs.items()})
        work = set_cols(work.with_layers(layers), seg, cols.astype(np.float32))
        if to_delete:
            work = delete_channels(work, lin_idx, to_delete)
        log.append(
            {
                "layer_id": lid,
                "merged_groups": [list(map(int, g)) for g in groups],
                "removed": list(map(int, to_delete)),
            }
        )
    return work, log


# --- reference-based recovery -----------------------------------------------------------


@dataclass(frozen=True)
class RecoveryResult:
    model: Model
    recovered: bool
    ambiguities: tuple[str, ...] = ()
    note: str = ""


def _crop_kernel_rings(model: Model, reference: Model) -> Model:
    """Strip all-zero kernel rings (and implicit padding) down to the reference geometry."""
    layers = list(model.layers)
    for i, layer in enumerate(layers):
        if not isinstance(layer, Conv2D):
            continue
        try:
            ref = reference.layer(layer.id)
        except KeyError:
            continue
        if not isinstance(ref, Conv2D):
            continue
        w, pad = layer.weight, layer.pad
        while w.shape[2] > ref.kernel[0] and w.shape[3] > ref.kernel[1] and pad > ref.pad:
            ring = np.abs(w.copy())
            ring[:, :, 1:-1, 1:-1] = 0.0
            if ring.max() >= ZERO_TOL:
                break
            w = w[:, :, 1:-1, 1:-1]
            pad -= 1
        if w is not layer.weight:
            layers[i] = dc_replace(layer, weight=as_param(w), pad=pad)
    return model.with_layers(layers)


def _max_param_deviation(a: Model, b: Model) -> float:
    from .ir import iter_params

    worst = 0.0
    for la, lb in zip(a.layers, b.layers):
        if isinstance(la, Conv2D) and (la.stride, la.pad) != (lb.stride, lb.pad):
            return float("inf")
        pa, pb = dict(iter_params(la)), dict(iter_params(lb))
        if pa.keys() != pb.keys():
            return float("inf")
        for name in pa:
            if pa[name].shape != pb[name].shape:
                return float("inf")
            worst = max(
                worst,
                float(np.max(np.abs(pa[name].astype(np.float64) - pb[name].astype(np.float64))))
                if pa[name].size
                else 0.0,
            )
    return worst


def recover_with_reference(obfuscated: Model, original: Model) -> tuple[RecoveryResult, list[dict]]:
    """Eliminate dummies, then recover neuron order and scale against the original.

    Greedy cosine matching of normalized incoming rows, front to back;
    recovered is True iff every parameter lands within 1e-5 of the original.
    """
    require_valid(obfuscated)
    require_valid(original)
    work, log = eliminate_dummy(obfuscated)
    work = _crop_kernel_rings(work, original)

    if [type(l) for l in work.layers] != [type(l) for l in original.layers]:
        return RecoveryResult(work, False, note="layer chains differ"), log

    ambiguities: list[str] = []
    for lin_idx in hidden_linear_chain(original):
        cur, ref = work.layers[lin_idx], original.layers[lin_idx]
        width = layer_width(ref)
        if layer_width(cur) != width:
            return (
                RecoveryResult(work, False, tuple(ambiguities),
                               note=f"layer {ref.id}: width {layer_width(cur)} != {width}"),
                log,
            )
        rows_c = cur.weight.astype(np.float64).reshape(width, -1)
        rows_r = ref.weight.astype(np.float64).reshape(width, -1)
        nc = np.linalg.norm(rows_c, axis=1)
        nr = np.linalg.norm(rows_r, axis=1)
        if nc.min() <= 0 or nr.min() <= 0:
            return RecoveryResult(work, False, tuple(ambiguities), note="zero rows"), log
        sim = (rows_c / nc[:, None]) @ (rows_r / nr[:, None]).T

        perm = np.full(width, -1, dtype=int)
        used_c: set[int] = set()
        order = np.dstack(np.unravel_index(np.argsort(-sim, axis=None), sim.shape))[0]
        for ci, ri in order:
            if perm[ri] >= 0 or ci in used_c:
                continue
            runner_up = max(
                (sim[c2, ri] for c2 in range(width) if c2 != ci and c2 not in used_c),
                default=-np.inf,
            )
            if abs(sim[ci, ri] - runner_up) < 1e-9:
                ambiguities.append(
                    f"layer {ref.id}: original neuron {ri} matches {ci} and a runner-up equally"
                )
            perm[ri] = ci
            used_c.add(int(ci))
            if len(used_c) == width:
                break
        work = permute_channels(work, lin_idx, perm)

        cur = work.layers[lin_idx]
        rows_now = cur.weight.astype(np.float64).reshape(width, -1)
        scales = (nr / np.linalg.norm(rows_now, axis=1)).astype(np.float32)
        work = scale_channels(work, lin_idx, scales)

    dev = _max_param_deviation(work, original)
    return RecoveryResult(work, bool(dev <= 1e-5), tuple(ambiguities)), log
