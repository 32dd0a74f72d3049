"""Hot-kernel dispatch: the compiled extension when built, numpy otherwise.

Set ``KNAPSPEC_PURE_PYTHON=1`` to force the numpy fallback.
"""

import importlib
import os

import numpy as np

from .errors import NumericError

EXECUTE = 1
SKIP = 2
EMPTY = 0


def load_backend(name: str):
    if name == "cython":
        return importlib.import_module("knapspec._ckernels")
    if name == "python":
        return importlib.import_module("knapspec._pykernels")
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends() -> list[str]:
    out = ["python"]
    try:
        load_backend("cython")
        out.insert(0, "cython")
    except ImportError:
        pass
    return out


if os.environ.get("KNAPSPEC_PURE_PYTHON", "") not in ("", "0"):
    BACKEND = "python"
else:
    BACKEND = available_backends()[0]
_impl = load_backend(BACKEND)


def cos_rows_batch(A, B, impl=None) -> np.ndarray:
    """Row-mean cosine of each candidate ``A[k]`` (r, d) against ``B`` (r, d)."""
    impl = impl or _impl
    A = np.ascontiguousarray(A, dtype=np.float32)
    B = np.ascontiguousarray(B, dtype=np.float32)
    if A.ndim != 3 or B.ndim != 2:
        raise ValueError(f"expected (c, r, d) and (r, d), got {A.shape} and {B.shape}")
    try:
        return impl.cos_rows_batch(A, B)
    except ValueError as exc:
        if "zero-norm" in str(exc):
            raise NumericError(str(exc)) from None
        raise


def argmax_rows(S, impl=None) -> np.ndarray:
    return (impl or _impl).argmax_rows(np.ascontiguousarray(S, dtype=np.float32))


def relax_row(exec_score, skip_score, w: int, tau: float, cap: int, impl=None):
    """Choose execute/skip per target cell; returns (choice int8, score float64)."""
    return (impl or _impl).relax_row(
        np.ascontiguousarray(exec_score, dtype=np.float64),
        np.ascontiguousarray(skip_score, dtype=np.float64),
        int(w), float(tau), int(cap),
    )
