"""Verification harness: BER, threshold decisions, and Max-First error handling.

Max-First makes blocked extractions executable again: when a suspect model's
layer sizes no longer match the key, each oversized layer is shrunk by
greedily deleting the neurons with the smallest mean absolute incoming plus
outgoing weight until the recorded size is restored, then extraction is
retried. verify() never raises; every (model, key) pair yields a report.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ._edits import delete_channels, get_cols, hidden_linear_chain, segment
from .inference import equivalence_check
from .ir import Model, StructuralError, layer_width, require_valid
from .watermark import BitString, WatermarkError, WatermarkKey, extract

THETA_PRIME = 0.5

# decision thresholds shipped as named presets, keyed by scheme
THETA_PRESETS = {
    "uchida_weight": 0.4386,
    "sign_of_scale": 0.4196,
    "greedy_residual": 0.4377,
    "activation_mean": 0.4268,
    "passport_sign": 0.4626,
}


def ber(s: BitString, s_prime: BitString) -> float:
    """Fraction of differing bits between two equal-length messages."""
    if len(s) != len(s_prime):
        raise ValueError(f"bit lengths differ: {len(s)} vs {len(s_prime)}")
    diff = sum(a != b for a, b in zip(s.bits, s_prime.bits))
    return diff / len(s)


def scaled_ber(raw: float, theta: float) -> float:
    """min(1, theta'/theta * raw) with theta' = 0.5; equals 0.5 exactly at raw == theta."""
    if not 0.0 < theta < 1.0:
        raise ValueError("decision threshold must lie in (0, 1)")
    if not 0.0 <= raw <= 1.0:
        raise ValueError("raw BER must lie in [0, 1]")
    return min(1.0, (THETA_PRIME * raw) / theta)


def max_first_resize(
    model: Model, target_sizes: dict[int, int]
) -> tuple[Model, dict[int, tuple[int, ...]]]:
    """Shrink layers to the recorded sizes by deleting lowest-score neurons.

    Score = mean(|incoming|) + mean(|outgoing|); ties resolve to the lowest
    index. Runs front to back so upstream deletions shape downstream scores.
    """
    require_valid(model)
    removed: dict[int, tuple[int, ...]] = {}
    work = model
    for lin_idx in hidden_linear_chain(model):
        layer = work.layers[lin_idx]
        if layer.id not in target_sizes:
            continue
        target = int(target_sizes[layer.id])
        width = layer_width(layer)
        if target > width:
            raise StructuralError(
                f"layer {layer.id}: target size {target} exceeds current width {width}"
            )
        if target == width:
            continue
        seg = segment(work, lin_idx)
        rows = np.abs(layer.weight.astype(np.float64).reshape(width, -1)).mean(axis=1)
        cols = get_cols(work, seg)
        cols = np.abs(cols.astype(np.float64).reshape(width, -1)).mean(axis=1)
        scores = rows + cols
        order = np.lexsort((np.arange(width), scores))
        drop = tuple(sorted(int(i) for i in order[: width - target]))
        work = delete_channels(work, lin_idx, drop)
        removed[layer.id] = drop
    return work, removed


@dataclass(frozen=True)
class VerdictReport:
    scheme: str
    theta: float
    raw_ber: float | None
    scaled_ber: float | None
    decision: str  # retained | removed | inexecutable
    error_handling: str  # none | max_first
    neurons_removed_by_handling: int
    utility_delta: float | None
    extracted: str | None  # the extracted bits as a 0/1 string
    note: str = ""

    def to_json_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "theta": self.theta,
            "raw_ber": self.raw_ber,
            "scaled_ber": self.scaled_ber,
            "decision": self.decision,
            "error_handling": self.error_handling,
            "neurons_removed_by_handling": self.neurons_removed_by_handling,
            "utility_delta": self.utility_delta,
            "extracted": self.extracted,
            "note": self.note,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)


def verify(
    model: Model,
    key: WatermarkKey,
    message: BitString,
    theta: float | None = None,
    reference: Model | None = None,
    n_utility_samples: int = 100,
    utility_seed: int = 0,
) -> VerdictReport:
    """Attempt extraction; on a structural mismatch apply Max-First and retry.

    `reference` (the pre-attack model, when the verifier has it) feeds the
    utility delta: max absolute output deviation on seeded Gaussian probes.
    """
    theta = THETA_PRESETS[key.scheme] if theta is None else float(theta)
    utility_delta = None
    note = ""
    if reference is not None:
        try:
            utility_delta = equivalence_check(
                reference, model, n_samples=n_utility_samples, seed=utility_seed, tol=np.inf
            ).max_abs_dev
        except (StructuralError, KeyError) as err:
            note = f"utility delta unavailable: {err}; "

    handling = "none"
    n_removed = 0
    suspect = model
    try:
        bits = extract(suspect, key)
    except (WatermarkError, StructuralError, KeyError) as first_err:
        handling = "max_first"
        bits = None
        if key.expected_widths is None:
            note += f"no recorded layer sizes to restore: {first_err}"
        else:
            try:
                suspect, removed = max_first_resize(model, key.expected_widths)
                n_removed = sum(len(v) for v in removed.values())
                bits = extract(suspect, key)
            except (WatermarkError, StructuralError, KeyError) as second_err:
                note += f"extraction failed after Max-First: {second_err}"
    if bits is not None and len(bits) != len(message):
        note += f"extracted {len(bits)} bits vs message of {len(message)}"
        bits = None
    if bits is None:
        return VerdictReport(
            scheme=key.scheme,
            theta=theta,
            raw_ber=None,
            scaled_ber=None,
            decision="inexecutable",
            error_handling=handling,
            neurons_removed_by_handling=n_removed,
            utility_delta=utility_delta,
            extracted=None,
            note=note,
        )
    raw = ber(message, bits)
    scaled = scaled_ber(raw, theta)
    return VerdictReport(
        scheme=key.scheme,
        theta=theta,
        raw_ber=raw,
        scaled_ber=scaled,
        decision="removed" if scaled > 0.5 else "retained",
        error_handling=handling,
        neurons_removed_by_handling=n_removed,
        utility_delta=utility_delta,
        extracted=bits.to01(),
        note=note,
    )
