"""Model intermediate representation: layers, tensors, validation, norm folding, disk format.

Tensors are contiguous float32 numpy arrays, frozen (read-only) after
construction. Models are immutable; every transform in this package returns a
new Model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Union

import numpy as np

FLOAT = np.float32

MODEL_FORMAT = "nf-model"
MODEL_FORMAT_VERSION = 1


class ModelError(Exception):
    """Base class for model IR failures."""


class StructuralError(ModelError):
    """Model structure does not admit the requested operation."""


class LoadError(ModelError):
    """Model directory is corrupt or inconsistent."""


def as_param(values, shape=None) -> np.ndarray:
    """Coerce to a frozen, contiguous float32 array."""
    arr = np.ascontiguousarray(values, dtype=FLOAT)
    if shape is not None:
        arr = arr.reshape(shape)
    arr.flags.writeable = False
    return arr


def _freeze(layer, **arrays):
    for name, value in arrays.items():
        if value is not None:
            object.__setattr__(layer, name, as_param(value))


@dataclass(frozen=True)
class Conv2D:
    """2-D cross-correlation layer; weight shape (out_ch, in_ch, kh, kw)."""

    id: int
    weight: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    pad: int = 0

    kind = "conv2d"

    def __post_init__(self):
        _freeze(self, weight=self.weight, bias=self.bias)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]


@dataclass(frozen=True)
class FullyConnected:
    """Affine layer; weight shape (out_features, in_features)."""

    id: int
    weight: np.ndarray
    bias: np.ndarray | None = None

    kind = "fully_connected"

    def __post_init__(self):
        _freeze(self, weight=self.weight, bias=self.bias)

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True)
class Norm:
    """Per-channel affine normalization: gamma * (x - mu) / sigma + beta."""

    id: int
    gamma: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    kind = "norm"

    def __post_init__(self):
        _freeze(self, gamma=self.gamma, beta=self.beta, mu=self.mu, sigma=self.sigma)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass(frozen=True)
class ReLU:
    id: int

    kind = "relu"


@dataclass(frozen=True)
class Flatten:
    id: int

    kind = "flatten"


@dataclass(frozen=True)
class ResidualAdd:
    """Adds the recorded output of an earlier layer to the running activation."""

    id: int
    source: int

    kind = "residual_add"


Layer = Union[Conv2D, FullyConnected, Norm, ReLU, Flatten, ResidualAdd]

LINEAR_KINDS = (Conv2D, FullyConnected)


@dataclass(frozen=True)
class Model:
    layers: tuple[Layer, ...]
    input_shape: tuple[int, ...]
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))

    def layer(self, layer_id: int) -> Layer:
        for lyr in self.layers:
            if lyr.id == layer_id:
                return lyr
        raise KeyError(f"no layer with id {layer_id}")

    def index_of(self, layer_id: int) -> int:
        for i, lyr in enumerate(self.layers):
            if lyr.id == layer_id:
                return i
        raise KeyError(f"no layer with id {layer_id}")

    def with_layers(self, layers) -> "Model":
        return replace(self, layers=tuple(layers))


@dataclass(frozen=True)
class NeuronRef:
    """One output channel / unit of a linear layer."""

    layer_id: int
    index: int


@dataclass(frozen=True)
class Violation:
    layer_id: int | None
    rule: str
    detail: str

    def __str__(self):
        where = "model" if self.layer_id is None else f"layer {self.layer_id}"
        return f"[{where}] {self.rule}: {self.detail}"


def layer_width(layer: Layer) -> int:
    """Output width (channels/units) of a parameterized layer."""
    if isinstance(layer, Conv2D):
        return layer.out_channels
    if isinstance(layer, FullyConnected):
        return layer.out_features
    if isinstance(layer, Norm):
        return layer.channels
    raise TypeError(f"{layer.kind} layer has no width")


def iter_params(layer: Layer) -> Iterator[tuple[str, np.ndarray]]:
    for name in ("weight", "bias", "gamma", "beta", "mu", "sigma"):
        value = getattr(layer, name, None)
        if value is not None:
            yield name, value


def _shape_after(layer: Layer, shape: tuple[int, ...], traces: dict[int, tuple[int, ...]]):
    """Output shape of `layer` on input `shape`; raises StructuralError on mismatch."""
    if isinstance(layer, Conv2D):
        if len(shape) != 3:
            raise StructuralError(f"layer {layer.id}: conv2d expects (C,H,W) input, got {shape}")
        c, h, w = shape
        if c != layer.in_channels:
            raise StructuralError(
                f"layer {layer.id}: conv2d expects {layer.in_channels} input channels, got {c}"
            )
        kh, kw = layer.kernel
        oh = (h + 2 * layer.pad - kh) // layer.stride + 1
        ow = (w + 2 * layer.pad - kw) // layer.stride + 1
        if oh < 1 or ow < 1:
            raise StructuralError(f"layer {layer.id}: kernel {kh}x{kw} larger than padded input")
        return (layer.out_channels, oh, ow)
    if isinstance(layer, FullyConnected):
        if len(shape) != 1:
            raise StructuralError(f"layer {layer.id}: fully-connected expects flat input, got {shape}")
        if shape[0] != layer.in_features:
            raise StructuralError(
                f"layer {layer.id}: expects {layer.in_features} input features, got {shape[0]}"
            )
        return (layer.out_features,)
    if isinstance(layer, Norm):
        if shape[0] != layer.channels:
            raise StructuralError(
                f"layer {layer.id}: norm over {layer.channels} channels fed {shape[0]}"
            )
        return shape
    if isinstance(layer, ReLU):
        return shape
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, ResidualAdd):
        if layer.source not in traces:
            raise StructuralError(f"layer {layer.id}: residual source {layer.source} not upstream")
        if traces[layer.source] != shape:
            raise StructuralError(
                f"layer {layer.id}: residual source shape {traces[layer.source]} != {shape}"
            )
        return shape
    raise TypeError(f"unknown layer kind {layer!r}")


def output_shapes(model: Model) -> dict[int, tuple[int, ...]]:
    """Per-layer output shapes keyed by layer id. Raises StructuralError when dims conflict."""
    shapes: dict[int, tuple[int, ...]] = {}
    shape = model.input_shape
    for layer in model.layers:
        shape = _shape_after(layer, shape, shapes)
        shapes[layer.id] = shape
    return shapes


def validate(model: Model) -> list[Violation]:
    """Check every IR invariant; returns violations as data (empty list == valid)."""
    out: list[Violation] = []
    if not model.layers:
        out.append(Violation(None, "empty", "model has no layers"))
        return out

    seen_ids = set()
    for layer in model.layers:
        if layer.id in seen_ids:
            out.append(Violation(layer.id, "duplicate-id", "layer id reused"))
        seen_ids.add(layer.id)
        for name, arr in iter_params(layer):
            if not np.isfinite(arr).all():
                out.append(Violation(layer.id, "non-finite", f"{name} contains NaN/Inf"))
            if arr.dtype != FLOAT:
                out.append(Violation(layer.id, "dtype", f"{name} is {arr.dtype}, expected float32"))
        if isinstance(layer, Conv2D):
            if layer.weight.ndim != 4:
                out.append(Violation(layer.id, "weight-rank", "conv2d weight must be 4-D"))
            if layer.bias is not None and layer.bias.shape != (layer.out_channels,):
                out.append(Violation(layer.id, "bias-shape", "bias length != out channels"))
            if layer.stride < 1 or layer.pad < 0:
                out.append(Violation(layer.id, "conv-geometry", "stride >= 1 and pad >= 0 required"))
        elif isinstance(layer, FullyConnected):
            if layer.weight.ndim != 2:
                out.append(Violation(layer.id, "weight-rank", "fc weight must be 2-D"))
            if layer.bias is not None and layer.bias.shape != (layer.out_features,):
                out.append(Violation(layer.id, "bias-shape", "bias length != out features"))
        elif isinstance(layer, Norm):
            n = layer.channels
            for name in ("beta", "mu", "sigma"):
                if getattr(layer, name).shape != (n,):
                    out.append(Violation(layer.id, "norm-shape", f"{name} length != channels"))
            if not (layer.sigma > 0).all():
                out.append(Violation(layer.id, "sigma-positive", "sigma must be strictly positive"))

    try:
        output_shapes(model)
    except StructuralError as err:
        out.append(Violation(None, "shape-mismatch", str(err)))
    return out


def require_valid(model: Model) -> None:
    """Precondition helper used by the other modules on entry."""
    violations = validate(model)
    if violations:
        summary = "; ".join(str(v) for v in violations[:3])
        raise StructuralError(f"invalid model: {summary}")


def fold_norm(model: Model) -> Model:
    """Fold each Norm into the preceding Conv2D/FC layer.

    W' = (gamma / sigma) * W per output channel and
    b' = beta + gamma * (b - mu) / sigma, which keeps forward outputs equal.
    Residual references to a folded Norm are remapped to the absorbing layer.
    """
    require_valid(model)
    folded: list[Layer] = []
    remap: dict[int, int] = {}
    for layer in model.layers:
        if isinstance(layer, Norm):
            if not folded or not isinstance(folded[-1], LINEAR_KINDS):
                raise StructuralError(
                    f"layer {layer.id}: norm not immediately preceded by conv2d/fc"
                )
            host = folded[-1]
            scale = (layer.gamma.astype(np.float64) / layer.sigma.astype(np.float64))
            w = host.weight.astype(np.float64)
            w = w * scale.reshape((-1,) + (1,) * (w.ndim - 1))
            b = host.bias.astype(np.float64) if host.bias is not None else np.zeros(layer.channels)
            b = layer.beta.astype(np.float64) + scale * (b - layer.mu.astype(np.float64))
            folded[-1] = replace(host, weight=as_param(w), bias=as_param(b))
            remap[layer.id] = host.id
        else:
            folded.append(layer)
    out = []
    for layer in folded:
        if isinstance(layer, ResidualAdd) and layer.source in remap:
            layer = replace(layer, source=remap[layer.source])
        out.append(layer)
    return model.with_layers(out)


def models_identical(a: Model, b: Model) -> bool:
    """Bit-exact structural and numerical equality."""
    if a.input_shape != b.input_shape or a.metadata != b.metadata:
        return False
    if len(a.layers) != len(b.layers):
        return False
    for la, lb in zip(a.layers, b.layers):
        if type(la) is not type(lb) or la.id != lb.id:
            return False
        if isinstance(la, Conv2D) and (la.stride != lb.stride or la.pad != lb.pad):
            return False
        if isinstance(la, ResidualAdd) and la.source != lb.source:
            return False
        pa, pb = dict(iter_params(la)), dict(iter_params(lb))
        if pa.keys() != pb.keys():
            return False
        for name in pa:
            if pa[name].shape != pb[name].shape:
                return False
            if not np.array_equal(pa[name].view(np.uint32), pb[name].view(np.uint32)):
                return False
    return True


# --- disk format ------------------------------------------------------------
#
# A model on disk is a directory holding manifest.json plus one raw .bin blob
# per tensor: row-major little-endian float32. This layout is the exchange
# contract for external producers.


def _blob_name(layer_id: int, param: str) -> str:
    return f"layer{layer_id}.{param}.bin"


def _layer_manifest(layer: Layer) -> dict:
    entry: dict = {"id": layer.id, "kind": layer.kind}
    if isinstance(layer, Conv2D):
        entry.update(
            out_channels=layer.out_channels,
            in_channels=layer.in_channels,
            kh=layer.kernel[0],
            kw=layer.kernel[1],
            stride=layer.stride,
            pad=layer.pad,
        )
    elif isinstance(layer, FullyConnected):
        entry.update(out_features=layer.out_features, in_features=layer.in_features)
    elif isinstance(layer, Norm):
        entry.update(channels=layer.channels)
    elif isinstance(layer, ResidualAdd):
        entry.update(source=layer.source)
    for name, arr in iter_params(layer):
        entry[name] = {"file": _blob_name(layer.id, name), "shape": list(arr.shape)}
    if isinstance(layer, (Conv2D, FullyConnected)) and layer.bias is None:
        entry["bias"] = None
    return entry


def save(model: Model, path: str | Path) -> None:
    """Write manifest.json + per-tensor .bin blobs; byte-exact round trip with load()."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": MODEL_FORMAT,
        "version": MODEL_FORMAT_VERSION,
        "dtype": "f32",
        "endianness": "little",
        "input_shape": list(model.input_shape),
        "metadata": dict(model.metadata),
        "layers": [_layer_manifest(layer) for layer in model.layers],
    }
    for layer in model.layers:
        for name, arr in iter_params(layer):
            (path / _blob_name(layer.id, name)).write_bytes(
                np.ascontiguousarray(arr, dtype="<f4").tobytes()
            )
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _read_blob(path: Path, ref: dict, what: str) -> np.ndarray:
    blob = path / ref["file"]
    if not blob.exists():
        raise LoadError(f"{what}: missing blob {ref['file']}")
    raw = blob.read_bytes()
    shape = tuple(int(d) for d in ref["shape"])
    expected = 4 * int(np.prod(shape)) if shape else 4
    if len(raw) != expected:
        raise LoadError(f"{what}: blob {ref['file']} holds {len(raw)} bytes, expected {expected}")
    arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
    if not np.isfinite(arr).all():
        raise LoadError(f"{what}: blob {ref['file']} contains non-finite values")
    return as_param(arr)


def load(path: str | Path) -> Model:
    """Load a model directory; raises LoadError on any inconsistency."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise LoadError(f"no manifest.json under {path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as err:
        raise LoadError(f"corrupt manifest: {err}") from err
    if manifest.get("format") != MODEL_FORMAT:
        raise LoadError(f"unrecognized format {manifest.get('format')!r}")
    if manifest.get("dtype") != "f32" or manifest.get("endianness") != "little":
        raise LoadError("unsupported dtype/endianness")

    layers: list[Layer] = []
    for entry in manifest["layers"]:
        lid = int(entry["id"])
        kind = entry["kind"]
        what = f"layer {lid} ({kind})"
        try:
            if kind == "conv2d":
                bias = entry.get("bias")
                layers.append(
                    Conv2D(
                        id=lid,
                        weight=_read_blob(path, entry["weight"], what),
                        bias=_read_blob(path, bias, what) if bias else None,
                        stride=int(entry["stride"]),
                        pad=int(entry["pad"]),
                    )
                )
            elif kind == "fully_connected":
                bias = entry.get("bias")
                layers.append(
                    FullyConnected(
                        id=lid,
                        weight=_read_blob(path, entry["weight"], what),
                        bias=_read_blob(path, bias, what) if bias else None,
                    )
                )
            elif kind == "norm":
                layers.append(
                    Norm(
                        id=lid,
                        gamma=_read_blob(path, entry["gamma"], what),
                        beta=_read_blob(path, entry["beta"], what),
                        mu=_read_blob(path, entry["mu"], what),
                        sigma=_read_blob(path, entry["sigma"], what),
                    )
                )
            elif kind == "relu":
                layers.append(ReLU(id=lid))
            elif kind == "flatten":
                layers.append(Flatten(id=lid))
            elif kind == "residual_add":
                layers.append(ResidualAdd(id=lid, source=int(entry["source"])))
            else:
                raise LoadError(f"{what}: unknown layer kind")
        except KeyError as err:
            raise LoadError(f"{what}: manifest missing field {err}") from err

    model = Model(
        layers=tuple(layers),
        input_shape=tuple(int(d) for d in manifest["input_shape"]),
        metadata={str(k): str(v) for k, v in manifest.get("metadata", {}).items()},
    )
    violations = validate(model)
    if violations:
        raise LoadError(f"loaded model invalid: {violations[0]}")
    return model
