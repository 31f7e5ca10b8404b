"""Backend selection for the image-filtering hot loops.

The compiled extension is used when it was built and importable; otherwise
the NumPy implementation is used. Set ``THERMOLOC_PURE_PYTHON=1`` to force
the fallback.
"""

import os

from thermoloc import _convolve_py

BACKEND = "python"
_impl = _convolve_py

if not os.environ.get("THERMOLOC_PURE_PYTHON"):
    try:
        from thermoloc import _convolve as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def backends():
    """Return the available backend modules keyed by name."""
    found = {"python": _convolve_py}
    try:
        from thermoloc import _convolve as compiled
    except ImportError:
        return found
    found["cython"] = compiled
    return found


def convolve_reflect(image, kernel):
    return _impl.convolve_reflect(image, kernel)


def unsharp_reflect(image, kernel, amount):
    return _impl.unsharp_reflect(image, kernel, float(amount))
