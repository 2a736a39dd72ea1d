"""Dynamic-programming kernels with a compiled backend and a pure-Python fallback.

The Cython extension is used when it was built at install time. Set
``SPEECHLLM_PURE_PYTHON=1`` to force the fallback.
"""

import os

from speechllm.kernels import _pykernels as python_backend

compiled_backend = None
if not os.environ.get("SPEECHLLM_PURE_PYTHON"):
    try:
        from speechllm.kernels import _ckernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

if compiled_backend is not None:
    BACKEND = "cython"
    ctc_forward_backward = compiled_backend.ctc_forward_backward
    edit_ops = compiled_backend.edit_ops
else:
    BACKEND = "python"
    ctc_forward_backward = python_backend.ctc_forward_backward
    edit_ops = python_backend.edit_ops


def available_backends():
    out = {"python": python_backend}
    if compiled_backend is not None:
        out["cython"] = compiled_backend
    return out
