"""Hot-path kernels: compiled extension when available, numpy otherwise.

The environment variable GNSSLAB_PURE_PYTHON forces the numpy fallback,
which is also the semantics of record (_ref). BACKEND reports which one
was selected at import time.
"""
import os

from . import _ref
from ._ref import (  # noqa: F401  (layout constants shared by both backends)
    MODE_ALFA,
    MODE_CPG,
    MODE_KF,
    MODE_STL,
    O_DFD,
    O_DISC_FD,
    O_DISC_PHI,
    O_DISC_TAU,
    O_DPHI,
    O_DTAU,
    O_FDLL,
    O_FPLL,
    O_IP,
    O_QP,
    OUT_COLS,
    S_ACC,
    S_DPHI,
    S_DTAU,
    S_FDLL,
    S_FPLL,
    S_P,
    S_PIP,
    S_PQP,
    S_PVALID,
    S_X,
    STATE_SIZE,
)

_SYMBOLS = ("synth_add", "correlate_epl", "track_chunk")

BACKEND = "python"
_impl = _ref

if os.environ.get("GNSSLAB_PURE_PYTHON", "").strip() in ("", "0"):
    try:
        from .. import _fastkern  # type: ignore[attr-defined]
    except ImportError:
        pass
    else:
        # a stale extension missing newer kernels is ignored wholesale
        if all(hasattr(_fastkern, s) for s in _SYMBOLS):
            _impl = _fastkern
            BACKEND = "compiled"

synth_add = _impl.synth_add
correlate_epl = _impl.correlate_epl
track_chunk = _impl.track_chunk

__all__ = ["BACKEND", "synth_add", "correlate_epl", "track_chunk"]
