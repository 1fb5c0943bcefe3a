"""Structural obfuscation attacks and defenses for white-box DNN watermarks.

The package operates on a small feed-forward model IR (conv2d / fc / norm /
relu / flatten / residual-add) and provides:

* `ir`        — the model representation, validation, norm folding, disk format
* `inference` — deterministic forward pass and sampled equivalence checks
* `obfuscate` — dummy-neuron primitives, the injection campaign, camouflage
* `watermark` — five white-box watermark schemes (embed + extract)
* `verify`    — BER, scaled BER, Max-First error handling, verdict reports
* `defense`   — anomaly detection, dummy elimination, reference-based recovery
* `cli`       — the `neurofuscate` command-line pipeline
"""

from .defense import (
    DetectionReport,
    RecoveryResult,
    detect_cluster,
    detect_svd,
    detection_report,
    eliminate_dummy,
    recover_with_reference,
)
from .inference import EquivalenceReport, equivalence_check, forward, forward_with_trace
from .ir import (
    Conv2D,
    Flatten,
    FullyConnected,
    LoadError,
    Model,
    ModelError,
    NeuronRef,
    Norm,
    ReLU,
    ResidualAdd,
    StructuralError,
    fold_norm,
    load,
    models_identical,
    save,
    validate,
)
from .obfuscate import (
    DummyGroup,
    ObfuscationConfig,
    ObfuscationPlan,
    apply_plan,
    inject_campaign,
    inject_clique,
    kernel_expand,
    neuron_clique_generate,
    neuron_split,
    neuron_zero_inject,
    permute_layer,
    rescale_neuron,
)
from .verify import VerdictReport, ber, max_first_resize, scaled_ber, verify
from .watermark import (
    SCHEMES,
    BitString,
    CapacityError,
    DimensionMismatch,
    EmbedConfig,
    EmbedError,
    WatermarkError,
    WatermarkKey,
    embed,
    extract,
    make_key,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
