"""Hot numeric kernels, dispatched to numba or numpy at import time.

The backend is fixed per process by ``ADQSIM_NO_NUMBA`` (see ``_accel``).
Both implementations stay importable so tests and the benchmark can compare
them directly.
"""
from . import _numpy_kernels
from ._accel import USE_NUMBA, backend_name

if USE_NUMBA:
    from . import _numba_kernels as _impl
else:
    _impl = _numpy_kernels

writhe_sum = _impl.writhe
close_pairs = _impl.segment_distance_matrix_pairs
pbd_substep = _impl.pbd_substep

BACKEND = backend_name()


def implementations():
    """Mapping of backend name to kernel module for every available backend."""
    out = {"numpy": _numpy_kernels}
    try:
        from . import _numba_kernels

        out["numba"] = _numba_kernels
    except ImportError:  # pragma: no cover
        pass
    return out


chord_march = _impl.chord_march
