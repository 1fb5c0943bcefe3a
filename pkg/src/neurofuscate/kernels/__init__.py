"""Conv kernel backend selection.

The compiled extension is used when it has been built; otherwise the numpy
im2col path. NEUROFUSCATE_BACKEND={auto,compiled,numpy} overrides. Both
backends accumulate in float64, so outputs agree to float32 resolution.
"""

from __future__ import annotations

import os

from . import numpy_backend

_choice = os.environ.get("NEUROFUSCATE_BACKEND", "auto").lower()

compiled_backend = None
try:
    from . import _convext as compiled_backend  # type: ignore[no-redef]
except ImportError:
    compiled_backend = None

if _choice == "numpy":
    _impl = numpy_backend
elif _choice == "compiled":
    if compiled_backend is None:
        raise ImportError(
            "NEUROFUSCATE_BACKEND=compiled but the extension is not built; "
            "run `python setup.py build_ext --inplace`"
        )
    _impl = compiled_backend
else:
    _impl = compiled_backend if compiled_backend is not None else numpy_backend

BACKEND = "compiled" if _impl is compiled_backend and compiled_backend is not None else "numpy"

conv2d_forward = _impl.conv2d_forward
