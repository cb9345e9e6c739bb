"""Hot-path kernels: compiled core with a pure-Python fallback.

The per-packet dataplane loop dominates replay runtime, so it is implemented
twice with identical semantics: ``innetsim.kernels._core`` (Cython) and
``innetsim.kernels.pyref`` (plain Python over the same numpy state). The
backend is picked at import time; set ``INNETSIM_BACKEND=py`` to force the
fallback (e.g. for benchmarking), ``INNETSIM_BACKEND=ext`` to require the
compiled core.

Both backends must produce bit-identical results; tests/test_kernels_parity.py
holds them to that.
"""

import os

from . import pyref

_choice = os.environ.get("INNETSIM_BACKEND", "auto").lower()

if _choice == "py":
    _impl = pyref
elif _choice in ("auto", "ext"):
    try:
        from . import _core as _impl  # type: ignore[no-redef]
    except ImportError:
        if _choice == "ext":
            raise ImportError(
                "INNETSIM_BACKEND=ext but the compiled kernel is not built; "
                "run `pip install -e . --no-build-isolation`"
            )
        _impl = pyref
else:
    raise ValueError(f"INNETSIM_BACKEND must be auto|py|ext, got {_choice!r}")


def backend_name() -> str:
    """Name of the active kernel backend: 'ext' (compiled) or 'py'."""
    return "py" if _impl is pyref else "ext"


def make_kernel(plane):
    """Build a dataplane stepper for ``plane`` on the active backend."""
    return _impl.Kernel(plane)


def make_infer(qm):
    """Classifier callable over wire-form feature arrays, active backend."""
    return _impl.make_infer(qm)


def make_infer_on(backend: str, qm):
    if backend == "py":
        return pyref.make_infer(qm)
    if backend == "ext":
        from . import _core

        return _core.make_infer(qm)
    raise ValueError(f"unknown backend {backend!r}")


def make_kernel_on(backend: str, plane):
    """Build a kernel on an explicit backend ('py' or 'ext')."""
    if backend == "py":
        return pyref.Kernel(plane)
    if backend == "ext":
        from . import _core

        return _core.Kernel(plane)
    raise ValueError(f"unknown backend {backend!r}")


def available_backends():
    out = ["py"]
    try:
        from . import _core  # noqa: F401

        out.append("ext")
    except ImportError:
        pass
    return out
