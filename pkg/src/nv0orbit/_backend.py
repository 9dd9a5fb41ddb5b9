"""Select the compiled kernels when importable, else the numpy fallback.

Set ``NV0ORBIT_PURE_PYTHON=1`` to force the fallback.
"""

import os

if os.environ.get("NV0ORBIT_PURE_PYTHON"):
    from . import _pykernels as kernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as kernels
        BACKEND = "cython"
    except ImportError:
        from . import _pykernels as kernels
        BACKEND = "python"

__all__ = ["kernels", "BACKEND"]
