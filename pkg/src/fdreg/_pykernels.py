"""Pure numpy/scipy implementations of the hot kernels.

Reference backend; ``_ckernels`` must agree with these to rounding error.
All functions take C-contiguous arrays of a single floating dtype.
"""
import numpy as np
from scipy.ndimage import correlate1d

BACKEND = "python"


def _setup(coords, shape, border):
    """Corner indices, fractional offsets and masks for trilinear lookup."""
    n = coords.shape[1]
    inside = np.ones(n, dtype=bool)
    lo = np.empty((3, n), dtype=np.intp)
    frac = np.empty_like(coords)
    clamped = np.zeros((3, n), dtype=bool)
    for a in range(3):
        size = shape[a]
        c = coords[a]
        out = (c < 0) | (c > size - 1)
        inside &= ~out
        clamped[a] = out
        c = np.clip(c, 0, size - 1)
        i0 = np.clip(np.floor(c).astype(np.intp), 0, max(size - 2, 0))
        lo[a] = i0
        frac[a] = c - i0
    hi = np.minimum(lo + 1, np.asarray(shape, dtype=np.intp)[:, None] - 1)
    if not border:
        clamped[:] = ~inside
    return lo, hi, frac, inside, clamped


def _corners(lo, hi, frac, shape):
    _, h, w = shape
    fx, fy, fz = frac
    gx, gy, gz = 1 - fx, 1 - fy, 1 - fz
    for cx, ix, wx, sx in ((0, lo[0], gx, -1.0), (1, hi[0], fx, 1.0)):
        for cy, iy, wy, sy in ((0, lo[1], gy, -1.0), (1, hi[1], fy, 1.0)):
            for cz, iz, wz, sz in ((0, lo[2], gz, -1.0), (1, hi[2], fz, 1.0)):
                idx = (ix * h + iy) * w + iz
                yield idx, (wx, wy, wz), (sx, sy, sz)


def trilinear_sample(data, coords, border=False):
    """Sample ``data`` (C, D, H, W) at voxel ``coords`` (3, N).

    Returns ``(values, inside)`` with values of shape (C, N). Out-of-grid
    points give 0 unless ``border``, in which case coordinates are clamped.
    """
    shape = data.shape[1:]
    flat = data.reshape(data.shape[0], -1)
    lo, hi, frac, inside, _ = _setup(coords, shape, border)
    out = np.zeros((data.shape[0], coords.shape[1]), dtype=data.dtype)
    for idx, (wx, wy, wz), _ in _corners(lo, hi, frac, shape):
        out += flat[:, idx] * (wx * wy * wz)
    if not border:
        out *= inside
    return out, inside


def trilinear_adjoint(data, coords, grad, border=False, want_data=True, want_coords=True):
    """Vector-Jacobian product of :func:`trilinear_sample`.

    Returns ``(grad_data, grad_coords)``; either is ``None`` when not wanted.
    """
    shape = data.shape[1:]
    nvox = int(np.prod(shape))
    nch = data.shape[0]
    flat = data.reshape(nch, -1)
    lo, hi, frac, inside, clamped = _setup(coords, shape, border)
    g = grad if border else grad * inside
    gdata = np.zeros((nch, nvox), dtype=data.dtype) if want_data else None
    gcoords = np.zeros_like(coords) if want_coords else None
    for idx, (wx, wy, wz), (sx, sy, sz) in _corners(lo, hi, frac, shape):
        if want_data:
            wgt = wx * wy * wz
            for c in range(nch):
                gdata[c] += np.bincount(idx, weights=g[c] * wgt, minlength=nvox)
        if want_coords:
            proj = np.einsum("cn,cn->n", flat[:, idx], g)
            gcoords[0] += sx * wy * wz * proj
            gcoords[1] += wx * sy * wz * proj
            gcoords[2] += wx * wy * sz * proj
    if want_coords:
        gcoords[clamped] = 0.0
    if want_data:
        gdata = gdata.reshape(data.shape)
    return gdata, gcoords


def strided_correlate(x, taps, axis, stride, shift):
    """Correlate ``x`` with odd-length ``taps`` along ``axis`` (zero padded)
    and keep outputs at ``shift, shift + stride, ...``."""
    full = correlate1d(x, taps, axis=axis, mode="constant", cval=0.0)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(shift, None, stride)
    return np.ascontiguousarray(full[tuple(sl)])


def strided_correlate_adjoint(g, taps, axis, stride, shift, length):
    """Adjoint of :func:`strided_correlate` for an input of size ``length``."""
    shape = list(g.shape)
    shape[axis] = length
    up = np.zeros(shape, dtype=g.dtype)
    sl = [slice(None)] * g.ndim
    sl[axis] = slice(shift, None, stride)
    up[tuple(sl)] = g
    return correlate1d(up, taps[::-1], axis=axis, mode="constant", cval=0.0)
