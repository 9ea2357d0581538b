"""Backend selection for the convolution hot loops.

The compiled extension is used when it imports; setting ``MBDIFF_PURE_PYTHON=1``
forces the NumPy fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
conv1d = _pykernels.conv1d
conv1d_grad = _pykernels.conv1d_grad

if os.environ.get("MBDIFF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        pass
    else:
        conv1d = _ckernels.conv1d
        conv1d_grad = _ckernels.conv1d_grad
        BACKEND = "cython"


def available_backends() -> dict:
    out = {"python": _pykernels}
    try:
        from . import _ckernels as ck
    except ImportError:
        return out
    out["cython"] = ck
    return out
