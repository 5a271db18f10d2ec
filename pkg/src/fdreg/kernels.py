"""Backend selection for the hot kernels.

The compiled extension is used when it imports; set ``FDREG_BACKEND=python``
to force the numpy fallback.
"""
import os

from fdreg import _pykernels

python_backend = _pykernels

try:
    from fdreg import _ckernels as cython_backend
except ImportError:  # extension not built
    cython_backend = None

if cython_backend is not None and os.environ.get("FDREG_BACKEND", "").lower() != "python":
    _impl = cython_backend
else:
    _impl = python_backend

BACKEND = _impl.BACKEND


def available_backends():
    return [m for m in (cython_backend, python_backend) if m is not None]


def trilinear_sample(data, coords, border=False):
    return _impl.trilinear_sample(data, coords, border)


def trilinear_adjoint(data, coords, grad, border=False, want_data=True, want_coords=True):
    return _impl.trilinear_adjoint(data, coords, grad, border, want_data, want_coords)


def strided_correlate(x, taps, axis, stride, shift):
    return _impl.strided_correlate(x, taps, axis, stride, shift)


def strided_correlate_adjoint(g, taps, axis, stride, shift, length):
    return _impl.strided_correlate_adjoint(g, taps, axis, stride, shift, length)
