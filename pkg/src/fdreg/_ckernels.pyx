# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: trilinear sampling (+ adjoint) and strided
separable correlation (+ adjoint).

Same contracts as ``fdreg._pykernels``.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport floor

cnp.import_array()

BACKEND = "cython"


cdef inline Py_ssize_t _lower(floating c, Py_ssize_t size) noexcept nogil:
    cdef Py_ssize_t i = <Py_ssize_t>floor(c)
    if i > size - 2:
        i = size - 2
    if i < 0:
        i = 0
    return i


cdef inline floating _clip(floating c, Py_ssize_t size) noexcept nogil:
    if c < 0:
        return 0
    if c > size - 1:
        return size - 1
    return c


def _sample(const floating[:, :, :, ::1] data, const floating[:, ::1] coords,
            floating[:, ::1] out, cnp.uint8_t[::1] inside, bint border):
    cdef Py_ssize_t nch = data.shape[0]
    cdef Py_ssize_t D = data.shape[1], H = data.shape[2], W = data.shape[3]
    cdef Py_ssize_t n = coords.shape[1]
    cdef Py_ssize_t p, c, x0, y0, z0, x1, y1, z1
    cdef floating cx, cy, cz, fx, fy, fz, gx, gy, gz
    cdef bint ok
    with nogil:
        for p in range(n):
            cx = coords[0, p]
            cy = coords[1, p]
            cz = coords[2, p]
            ok = (cx >= 0 and cx <= D - 1 and cy >= 0 and cy <= H - 1
                  and cz >= 0 and cz <= W - 1)
            inside[p] = ok
            if not ok and not border:
                for c in range(nch):
                    out[c, p] = 0
                continue
            cx = _clip(cx, D)
            cy = _clip(cy, H)
            cz = _clip(cz, W)
            x0 = _lower(cx, D)
            y0 = _lower(cy, H)
            z0 = _lower(cz, W)
            x1 = x0 + 1 if x0 + 1 < D else D - 1
            y1 = y0 + 1 if y0 + 1 < H else H - 1
            z1 = z0 + 1 if z0 + 1 < W else W - 1
            fx = cx - x0
            fy = cy - y0
            fz = cz - z0
            gx = 1 - fx
            gy = 1 - fy
            gz = 1 - fz
            for c in range(nch):
                out[c, p] = (
                    gx * (gy * (gz * data[c, x0, y0, z0] + fz * data[c, x0, y0, z1])
                          + fy * (gz * data[c, x0, y1, z0] + fz * data[c, x0, y1, z1]))
                    + fx * (gy * (gz * data[c, x1, y0, z0] + fz * data[c, x1, y0, z1])
                            + fy * (gz * data[c, x1, y1, z0] + fz * data[c, x1, y1, z1])))


def trilinear_sample(data, coords, border=False):
    out = np.empty((data.shape[0], coords.shape[1]), dtype=data.dtype)
    inside = np.empty(coords.shape[1], dtype=np.uint8)
    _sample(data, coords, out, inside, border)
    return out, inside.view(bool)


def _adjoint(const floating[:, :, :, ::1] data, const floating[:, ::1] coords,
             const floating[:, ::1] grad, floating[:, :, :, ::1] gdata,
             floating[:, ::1] gcoords, bint border, bint want_data,
             bint want_coords):
    cdef Py_ssize_t nch = data.shape[0]
    cdef Py_ssize_t D = data.shape[1], H = data.shape[2], W = data.shape[3]
    cdef Py_ssize_t n = coords.shape[1]
    cdef Py_ssize_t p, c, x0, y0, z0, x1, y1, z1
    cdef floating cx, cy, cz, fx, fy, fz, gx, gy, gz, g
    cdef floating v000, v001, v010, v011, v100, v101, v110, v111
    cdef floating dx, dy, dz
    cdef bint ok, clx, cly, clz
    with nogil:
        for p in range(n):
            cx = coords[0, p]
            cy = coords[1, p]
            cz = coords[2, p]
            clx = cx < 0 or cx > D - 1
            cly = cy < 0 or cy > H - 1
            clz = cz < 0 or cz > W - 1
            ok = not (clx or cly or clz)
            if not ok and not border:
                continue
            cx = _clip(cx, D)
            cy = _clip(cy, H)
            cz = _clip(cz, W)
            x0 = _lower(cx, D)
            y0 = _lower(cy, H)
            z0 = _lower(cz, W)
            x1 = x0 + 1 if x0 + 1 < D else D - 1
            y1 = y0 + 1 if y0 + 1 < H else H - 1
            z1 = z0 + 1 if z0 + 1 < W else W - 1
            fx = cx - x0
            fy = cy - y0
            fz = cz - z0
            gx = 1 - fx
            gy = 1 - fy
            gz = 1 - fz
            dx = 0
            dy = 0
            dz = 0
            for c in range(nch):
                g = grad[c, p]
                if g == 0:
                    continue
                if want_data:
                    gdata[c, x0, y0, z0] += g * gx * gy * gz
                    gdata[c, x0, y0, z1] += g * gx * gy * fz
                    gdata[c, x0, y1, z0] += g * gx * fy * gz
                    gdata[c, x0, y1, z1] += g * gx * fy * fz
                    gdata[c, x1, y0, z0] += g * fx * gy * gz
                    gdata[c, x1, y0, z1] += g * fx * gy * fz
                    gdata[c, x1, y1, z0] += g * fx * fy * gz
                    gdata[c, x1, y1, z1] += g * fx * fy * fz
                if want_coords:
                    v000 = data[c, x0, y0, z0]
                    v001 = data[c, x0, y0, z1]
                    v010 = data[c, x0, y1, z0]
                    v011 = data[c, x0, y1, z1]
                    v100 = data[c, x1, y0, z0]
                    v101 = data[c, x1, y0, z1]
                    v110 = data[c, x1, y1, z0]
                    v111 = data[c, x1, y1, z1]
                    dx += g * (gy * (gz * (v100 - v000) + fz * (v101 - v001))
                               + fy * (gz * (v110 - v010) + fz * (v111 - v011)))
                    dy += g * (gx * (gz * (v010 - v000) + fz * (v011 - v001))
                               + fx * (gz * (v110 - v100) + fz * (v111 - v101)))
                    dz += g * (gx * (gy * (v001 - v000) + fy * (v011 - v010))
                               + fx * (gy * (v101 - v100) + fy * (v111 - v110)))
            if want_coords:
                gcoords[0, p] = 0 if clx else dx
                gcoords[1, p] = 0 if cly else dy
                gcoords[2, p] = 0 if clz else dz


def trilinear_adjoint(data, coords, grad, border=False, want_data=True, want_coords=True):
    gdata = np.zeros_like(data)
    gcoords = np.zeros_like(coords)
    _adjoint(data, coords, np.ascontiguousarray(grad, dtype=data.dtype), gdata, gcoords,
             border, want_data, want_coords)
    return (gdata if want_data else None), (gcoords if want_coords else None)


def _correlate(const floating[:, :, ::1] x, const floating[::1] taps, floating[:, :, ::1] out,
               Py_ssize_t stride, Py_ssize_t shift):
    # x: (outer, L, inner); out: (outer, n_out, inner)
    cdef Py_ssize_t outer = x.shape[0], L = x.shape[1], inner = x.shape[2]
    cdef Py_ssize_t nout = out.shape[1], ntap = taps.shape[0]
    cdef Py_ssize_t R = ntap // 2
    cdef Py_ssize_t o, i, t, k, src
    cdef floating w
    with nogil:
        for o in range(outer):
            for i in range(nout):
                for k in range(inner):
                    out[o, i, k] = 0
                for t in range(ntap):
                    src = shift + i * stride + t - R
                    if src < 0 or src >= L:
                        continue
                    w = taps[t]
                    for k in range(inner):
                        out[o, i, k] += w * x[o, src, k]


def _correlate_adjoint(const floating[:, :, ::1] g, const floating[::1] taps, floating[:, :, ::1] out,
                       Py_ssize_t stride, Py_ssize_t shift):
    cdef Py_ssize_t outer = g.shape[0], nout = g.shape[1], inner = g.shape[2]
    cdef Py_ssize_t L = out.shape[1], ntap = taps.shape[0]
    cdef Py_ssize_t R = ntap // 2
    cdef Py_ssize_t o, i, t, k, dst
    cdef floating w
    with nogil:
        for o in range(outer):
            for i in range(nout):
                for t in range(ntap):
                    dst = shift + i * stride + t - R
                    if dst < 0 or dst >= L:
                        continue
                    w = taps[t]
                    for k in range(inner):
                        out[o, dst, k] += w * g[o, i, k]


def _as3(shape, axis):
    outer = 1
    for s in shape[:axis]:
        outer *= s
    inner = 1
    for s in shape[axis + 1:]:
        inner *= s
    return outer, shape[axis], inner


def strided_correlate(x, taps, axis, stride, shift):
    x = np.ascontiguousarray(x)
    outer, L, inner = _as3(x.shape, axis)
    nout = len(range(shift, L, stride))
    out = np.empty((outer, nout, inner), dtype=x.dtype)
    _correlate(x.reshape(outer, L, inner), np.ascontiguousarray(taps, dtype=x.dtype),
               out, stride, shift)
    shape = list(x.shape)
    shape[axis] = nout
    return out.reshape(shape)


def strided_correlate_adjoint(g, taps, axis, stride, shift, length):
    g = np.ascontiguousarray(g)
    outer, nout, inner = _as3(g.shape, axis)
    out = np.zeros((outer, length, inner), dtype=g.dtype)
    _correlate_adjoint(g.reshape(outer, nout, inner), np.ascontiguousarray(taps, dtype=g.dtype),
                       out, stride, shift)
    shape = list(g.shape)
    shape[axis] = length
    return out.reshape(shape)
