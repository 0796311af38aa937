"""Hot-loop dispatch: the compiled extension when importable, the numpy fallback otherwise.

Set ``FWL_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("FWL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

detect_peaks_batch = _impl.detect_peaks_batch
expand_labels = _impl.expand_labels
