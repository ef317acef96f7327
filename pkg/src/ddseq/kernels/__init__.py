"""Kernel backend selection.

The hot loops (CSR matvec, banded Cholesky factor and solve) exist twice:
as a compiled Cython extension and as a NumPy/LAPACK fallback.  The compiled
backend is picked when it imported cleanly; set DDSEQ_PURE_PYTHON=1 to force
the fallback.  ``ddseq bench`` compares the two.
"""

import os

from . import pykernels

_impl = pykernels
if not os.environ.get("DDSEQ_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = pykernels

backend_name = _impl.BACKEND_NAME
csr_matvec = _impl.csr_matvec
band_cholesky = _impl.band_cholesky
band_solve = _impl.band_solve


def compiled_available():
    try:
        from . import _ckernels  # noqa: F401
    except ImportError:
        return False
    return True
