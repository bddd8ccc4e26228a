"""Solver kernel selection: compiled extension when built, numpy otherwise.

Set COUNTFORGE_BACKEND=python to force the pure-Python kernel, or
COUNTFORGE_BACKEND=cython to require the compiled one (raising if it was
never built).  Both expose the same ``solve`` contract and agree to
floating-point noise; ``benchmarks/bench_gl.py`` times them side by side.
"""

from __future__ import annotations

import os

from . import _gl_numpy

try:
    from . import _gl_cy
except ImportError:
    _gl_cy = None

_forced = os.environ.get("COUNTFORGE_BACKEND", "").strip().lower()
if _forced in ("", "auto"):
    _impl = _gl_cy if _gl_cy is not None else _gl_numpy
elif _forced in ("python", "numpy", "pure"):
    _impl = _gl_numpy
elif _forced in ("cython", "compiled", "c"):
    if _gl_cy is None:
        raise ImportError(
            "COUNTFORGE_BACKEND=cython but the compiled kernel is not built; "
            "run `python setup.py build_ext --inplace` or reinstall"
        )
    _impl = _gl_cy
else:
    raise ImportError(f"unknown COUNTFORGE_BACKEND value {_forced!r}")


def backend_name() -> str:
    return "cython" if _impl is _gl_cy else "python"


def gl_solve(C, a, eps, tau, max_iters, tol):
    return _impl.solve(C, a, eps, tau, max_iters, tol)
