"""Kernel dispatch: compiled Cython extension if built, numpy fallback otherwise.

Set PCDISTILL_PURE_PYTHON=1 to force the fallback (used by the benchmark
and to test both paths).
"""

import os

if os.environ.get("PCDISTILL_PURE_PYTHON", "") == "1":
    from . import _kernels_py as _impl
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
    except ImportError:
        from . import _kernels_py as _impl  # type: ignore[no-redef]

COMPILED = _impl.COMPILED
nn1 = _impl.nn1
knn = _impl.knn
chamfer_sums = _impl.chamfer_sums
