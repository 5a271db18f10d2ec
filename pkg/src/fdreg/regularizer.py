"""Bending energy of a vector field."""
import numpy as np

from fdreg import autodiff as ad


class RegularizerError(ValueError):
    pass


_C = slice(1, -1)
_P = slice(2, None)
_M = slice(None, -2)


def _second(u, a, b, h):
    """Central second difference d^2 u / (dx_a dx_b) on interior voxels of (3, D, H, W)."""
    if a == b:
        hi = [slice(None), _C, _C, _C]
        lo = [slice(None), _C, _C, _C]
        hi[a + 1], lo[a + 1] = _P, _M
        mid = u[(slice(None), _C, _C, _C)]
        return (u[tuple(hi)] - mid * 2.0 + u[tuple(lo)]) * (1.0 / h[a] ** 2)
    terms = []
    for sa, sb, sign in ((_P, _P, 1.0), (_P, _M, -1.0), (_M, _P, -1.0), (_M, _M, 1.0)):
        sl = [slice(None), _C, _C, _C]
        sl[a + 1], sl[b + 1] = sa, sb
        terms.append((u[tuple(sl)], sign))
    out = terms[0][0] - terms[1][0] - terms[2][0] + terms[3][0]
    return out * (1.0 / (4.0 * h[a] * h[b]))


def bending_energy_tensor(v, spacing=(1.0, 1.0, 1.0)):
    """Mean over interior voxels of the summed squared second derivatives.

    ``v`` is a (3, D, H, W) tensor in voxel units; it is converted to mm and
    differentiated per mm. Mixed terms count twice. Channels are summed.
    """
    v = ad.as_tensor(v)
    if min(v.shape[1:]) < 3:
        raise RegularizerError(f"bending energy needs extents >= 3, got {v.shape[1:]}")
    h = np.asarray(spacing, dtype=np.float64)
    u = v * ad.Tensor(h.reshape(3, 1, 1, 1).astype(v.dtype))
    total = None
    for a in range(3):
        for b in range(a, 3):
            d = _second(u, a, b, h)
            term = ad.tsum(ad.square(d)) * (1.0 if a == b else 2.0)
            total = term if total is None else total + term
    n_interior = int(np.prod([s - 2 for s in v.shape[1:]]))
    return total * (1.0 / n_interior)


def bending_energy(field, spacing=None):
    """Bending energy of a velocity field (``VelocityField`` or (3, D, H, W) array)."""
    if hasattr(field, "v"):
        spacing = field.geometry.spacing if spacing is None else spacing
        field = field.v
    spacing = (1.0, 1.0, 1.0) if spacing is None else spacing
    return float(bending_energy_tensor(ad.Tensor(np.asarray(field)), spacing).value)
