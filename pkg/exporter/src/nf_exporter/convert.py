"""Walk a torch module tree and write the toolkit's manifest+blob model format.

Supported leaves: Conv2d (symmetric int padding, dilation 1, groups 1),
Linear, BatchNorm1d/2d (affine, tracked running stats, eval semantics),
ReLU, Flatten, and the Residual wrapper from .blocks. Anything else is
rejected by name. The exporter only writes toolkit models; it never reads
them back.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .blocks import Residual

FORMAT = "nf-model"
FORMAT_VERSION = 1


class ExportError(Exception):
    """Source model cannot be represented in the toolkit IR."""


@dataclass
class ExportManifest:
    framework: str
    layer_map: list[dict] = field(default_factory=list)
    cast_notes: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "framework": self.framework,
            "layer_map": self.layer_map,
            "cast_notes": self.cast_notes,
        }


def _tensor(t: torch.Tensor, note_sink: list[str], what: str) -> np.ndarray:
    arr = t.detach().cpu().numpy()
    if arr.dtype != np.float32:
        note_sink.append(f"{what}: cast {arr.dtype} -> float32")
        arr = arr.astype(np.float32)
    if not np.isfinite(arr).all():
        raise ExportError(f"{what}: non-finite values")
    return np.ascontiguousarray(arr)


def _sym_int_pair(value, what: str) -> int:
    if isinstance(value, int):
        return value
    pair = tuple(value)
    if len(pair) == 2 and pair[0] == pair[1]:
        return int(pair[0])
    raise ExportError(f"{what}: only symmetric int geometry is supported, got {value}")


class _Emitter:
    def __init__(self):
        self.entries: list[dict] = []
        self.blobs: dict[str, np.ndarray] = {}
        self.manifest = ExportManifest(framework="pytorch")

    def _blob(self, layer_id: int, param: str, arr: np.ndarray) -> dict:
        name = f"layer{layer_id}.{param}.bin"
        self.blobs[name] = arr
        return {"file": name, "shape": list(arr.shape)}

    def emit(self, source_name: str, module: nn.Module) -> None:
        lid = len(self.entries)
        notes = self.manifest.cast_notes
        what = f"{source_name} ({type(module).__name__})"

        if isinstance(module, nn.Conv2d):
            if module.groups != 1:
                raise ExportError(f"{what}: grouped convolution unsupported")
            if _sym_int_pair(module.dilation, what) != 1:
                raise ExportError(f"{what}: dilation unsupported")
            stride = _sym_int_pair(module.stride, what)
            pad = _sym_int_pair(module.padding, what)
            entry = {
                "id": lid,
                "kind": "conv2d",
                "out_channels": module.out_channels,
                "in_channels": module.in_channels,
                "kh": module.kernel_size[0],
                "kw": module.kernel_size[1],
                "stride": stride,
                "pad": pad,
                "weight": self._blob(lid, "weight", _tensor(module.weight, notes, what)),
                "bias": (
                    self._blob(lid, "bias", _tensor(module.bias, notes, what))
                    if module.bias is not None
                    else None
                ),
            }
        elif isinstance(module, nn.Linear):
            entry = {
                "id": lid,
                "kind": "fully_connected",
                "out_features": module.out_features,
                "in_features": module.in_features,
                "weight": self._blob(lid, "weight", _tensor(module.weight, notes, what)),
                "bias": (
                    self._blob(lid, "bias", _tensor(module.bias, notes, what))
                    if module.bias is not None
                    else None
                ),
            }
        elif isinstance(module, (nn.BatchNorm1d, nn.BatchNorm2d)):
            if not module.affine or not module.track_running_stats:
                raise ExportError(f"{what}: needs affine params and running stats")
            var = module.running_var.detach().cpu().numpy().astype(np.float64)
            sigma = np.sqrt(var + module.eps).astype(np.float32)
            notes.append(f"{what}: folded eps={module.eps} into sigma")
            entry = {
                "id": lid,
                "kind": "norm",
                "channels": module.num_features,
                "gamma": self._blob(lid, "gamma", _tensor(module.weight, notes, what)),
                "beta": self._blob(lid, "beta", _tensor(module.bias, notes, what)),
                "mu": self._blob(lid, "mu", _tensor(module.running_mean, notes, what)),
                "sigma": self._blob(lid, "sigma", np.ascontiguousarray(sigma)),
            }
        elif isinstance(module, nn.ReLU):
            entry = {"id": lid, "kind": "relu"}
        elif isinstance(module, nn.Flatten):
            if module.start_dim not in (0, 1):
                raise ExportError(f"{what}: flatten must start at the batch or feature dim")
            entry = {"id": lid, "kind": "flatten"}
        else:
            raise ExportError(f"unsupported layer kind: {what}")

        self.manifest.layer_map.append(
            {"source": source_name, "layer_id": lid, "kind": entry["kind"]}
        )
        self.entries.append(entry)

    def emit_residual_add(self, source_name: str, source_layer_id: int) -> None:
        lid = len(self.entries)
        self.entries.append({"id": lid, "kind": "residual_add", "source": source_layer_id})
        self.manifest.layer_map.append(
            {"source": source_name, "layer_id": lid, "kind": "residual_add"}
        )


def _walk(emitter: _Emitter, module: nn.Module, prefix: str) -> None:
    if isinstance(module, Residual):
        if not emitter.entries:
            raise ExportError(
                f"{prefix} (Residual): a residual block fed by the raw model input "
                "cannot be represented"
            )
        skip_source = emitter.entries[-1]["id"]
        _walk(emitter, module.inner, f"{prefix}.inner")
        emitter.emit_residual_add(prefix, skip_source)
        return
    if isinstance(module, nn.Sequential):
        for name, child in module.named_children():
            _walk(emitter, child, f"{prefix}.{name}" if prefix else name)
        return
    emitter.emit(prefix or type(module).__name__, module)


def export(
    source: nn.Module | str | Path,
    out_dir: str | Path,
    input_shape: tuple[int, ...],
) -> ExportManifest:
    """Write `source` (a module or a pickled-module checkpoint path) as a
    toolkit model directory; returns the export manifest."""
    if not isinstance(source, nn.Module):
        source = torch.load(source, map_location="cpu", weights_only=False)
        if not isinstance(source, nn.Module):
            raise ExportError("checkpoint does not hold an nn.Module")
    source = source.eval()

    emitter = _Emitter()
    _walk(emitter, source, "")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, arr in emitter.blobs.items():
        (out_dir / name).write_bytes(arr.astype("<f4").tobytes())
    manifest = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "dtype": "f32",
        "endianness": "little",
        "input_shape": [int(d) for d in input_shape],
        "metadata": {"source_framework": "pytorch", "exporter": "nf-exporter"},
        "layers": emitter.entries,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out_dir / "export_manifest.json").write_text(
        json.dumps(emitter.manifest.to_json_dict(), indent=2, sort_keys=True) + "\n"
    )
    return emitter.manifest
