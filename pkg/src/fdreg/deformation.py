"""Stationary velocity fields, their exponentials, and warping.

Displacements are stored in voxel units of their own grid: a deformation
maps voxel ``x`` to ``x + u(x)``.
"""
from dataclasses import dataclass

import numpy as np

from fdreg import autodiff as ad
from fdreg.volume import GridGeometry, Volume, identity_grid, sample_trilinear

DEFAULT_STEPS = 7
MAX_FIRST_STEP = 0.5


class DeformationError(ValueError):
    pass


@dataclass(frozen=True)
class VelocityField:
    v: np.ndarray
    geometry: GridGeometry

    def __post_init__(self):
        if self.v.shape != (3,) + self.geometry.shape:
            raise DeformationError(f"velocity shape {self.v.shape} does not match grid {self.geometry.shape}")
        if not np.all(np.isfinite(self.v)):
            raise DeformationError("velocity field is not finite")


@dataclass(frozen=True)
class DeformationField:
    displacement: np.ndarray
    geometry: GridGeometry

    def __post_init__(self):
        if self.displacement.shape != (3,) + self.geometry.shape:
            raise DeformationError(
                f"displacement shape {self.displacement.shape} does not match grid {self.geometry.shape}"
            )

    @classmethod
    def identity(cls, geometry):
        return cls(np.zeros((3,) + geometry.shape), geometry)

    def points(self):
        """Voxel coordinates each grid point is mapped to."""
        return identity_grid(self.geometry.shape) + self.displacement

    def to_world_mm(self):
        """Displacement vectors expressed in world millimetres."""
        lin = self.geometry.affine[:3, :3]
        return np.einsum("ij,j...->i...", lin, self.displacement)

    @classmethod
    def from_world_mm(cls, disp_mm, geometry):
        inv = np.linalg.inv(geometry.affine[:3, :3])
        return cls(np.einsum("ij,j...->i...", inv, np.asarray(disp_mm, dtype=np.float64)), geometry)


def adaptive_steps(vmax, steps=DEFAULT_STEPS):
    """Raise ``steps`` until the first scaled step is below half a voxel."""
    if steps < 1:
        raise DeformationError(f"steps must be >= 1, got {steps}")
    while vmax / 2.0 ** steps >= MAX_FIRST_STEP:
        steps += 1
    return steps


def _integrate(v, steps, grid):
    shape = v.shape[1:]
    n = int(np.prod(shape))
    u = v * (1.0 / 2.0 ** steps)
    for _ in range(steps):
        coords = ad.add(grid, ad.reshape(u, (3, n)))
        moved, _ = ad.trilinear(u, coords, border=True)
        u = u + ad.reshape(moved, u.shape)
        if not np.all(np.isfinite(u.value)):
            raise DeformationError("non-finite displacement during scaling and squaring")
    return u


def exponentiate_tensor(v, steps=DEFAULT_STEPS):
    """Scaling and squaring on the tape.

    Returns ``(forward, inverse)`` displacement tensors; the inverse is the
    exponential of ``-v`` through the same code path.
    """
    v = ad.as_tensor(v)
    steps = adaptive_steps(float(np.max(np.abs(v.value), initial=0.0)), steps)
    grid = ad.Tensor(identity_grid(v.shape[1:], dtype=v.dtype).reshape(3, -1))
    return _integrate(v, steps, grid), _integrate(-v, steps, grid)


def exponentiate(field, steps=DEFAULT_STEPS):
    """Forward and inverse deformations of a stationary velocity field."""
    fwd, inv = exponentiate_tensor(ad.Tensor(np.asarray(field.v)), steps)
    return DeformationField(fwd.value, field.geometry), DeformationField(inv.value, field.geometry)


def voxel_map(src, dst):
    """4x4 matrix taking voxel coordinates of ``src`` to voxel coordinates of ``dst``."""
    return np.linalg.inv(dst.affine) @ src.affine


def warp_tensor(data, valid_mask, displacement, vox_map=None):
    """Resample a (C, D, H, W) tensor through a displacement tensor.

    ``vox_map`` (4x4) maps the displacement grid's voxels into the data's
    voxel space when the two grids differ. Returns ``(warped, mask)`` where
    ``mask`` is the warped validity mask intersected with the in-domain mask.
    """
    shape = displacement.shape[1:]
    n = int(np.prod(shape))
    data = ad.as_tensor(data)
    grid = identity_grid(shape, dtype=data.dtype).reshape(3, -1)
    coords = ad.add(grid, ad.reshape(displacement, (3, n)))
    if vox_map is not None and not np.allclose(vox_map, np.eye(4)):
        lin = ad.Tensor(vox_map[:3, :3].astype(data.dtype))
        coords = ad.matmul(lin, coords) + ad.Tensor(vox_map[:3, 3:4].astype(data.dtype))
    values, inside = ad.trilinear(data, coords)
    mask = inside
    if valid_mask is not None and not np.all(valid_mask):
        mvals, _ = sample_trilinear(np.asarray(valid_mask, dtype=data.dtype)[None], coords.value)
        mask = inside & (mvals[0] >= 0.5)
    return ad.reshape(values, (data.shape[0],) + tuple(shape)), mask.reshape(shape)


def warp(vol, d):
    """``vol`` resampled at ``d(x)`` for every voxel ``x`` of the deformation grid."""
    vmap = voxel_map(d.geometry, vol.geometry)
    values, mask = warp_tensor(
        ad.Tensor(vol.data), vol.valid_mask, ad.Tensor(d.displacement.astype(vol.data.dtype)), vmap
    )
    return Volume(values.value, d.geometry.affine, mask, dtype=vol.data.dtype)


def compose(outer, inner):
    """``outer o inner``: apply ``inner`` first, then ``outer`` (same grid)."""
    if outer.geometry != inner.geometry:
        raise DeformationError("compose needs deformations on the same grid")
    pts = inner.points()
    moved, _ = sample_trilinear(outer.displacement, pts, border=True)
    return DeformationField(inner.displacement + moved, inner.geometry)


def jacobian_determinant(d):
    """Determinant of the Jacobian of ``x -> x + u(x)`` by central differences."""
    if min(d.geometry.shape) < 3:
        raise DeformationError("jacobian needs extents >= 3")
    jac = np.empty((3, 3) + d.geometry.shape)
    for i in range(3):
        grads = np.gradient(d.displacement[i])
        for j in range(3):
            jac[i, j] = grads[j] + (1.0 if i == j else 0.0)
    return np.linalg.det(np.moveaxis(jac, (0, 1), (-2, -1)))


def _resample_vectors(vec, src, target):
    pts = voxel_map(target, src)
    grid = identity_grid(target.shape).reshape(3, -1)
    coords = pts[:3, :3] @ grid + pts[:3, 3:4]
    values, _ = sample_trilinear(vec, coords, border=True)
    conv = np.linalg.inv(target.affine[:3, :3]) @ src.affine[:3, :3]
    return (conv @ values).reshape((3,) + tuple(target.shape))


def upsample_velocity(field, target):
    """Trilinearly resample ``field`` onto the finer grid ``target``.

    Displacement vectors are converted to the target's voxel units so the
    world-space action is preserved.
    """
    src = field.geometry
    lo = np.min(src.world_corners(), axis=1)
    hi = np.max(src.world_corners(), axis=1)
    tlo = np.min(target.world_corners(), axis=1)
    thi = np.max(target.world_corners(), axis=1)
    tol = np.max(src.spacing) + 1e-6
    if np.any(np.abs(lo - tlo) > tol) or np.any(np.abs(hi - thi) > tol):
        raise DeformationError("source and target grids cover different world extents")
    if np.prod(target.shape) < np.prod(src.shape):
        raise DeformationError("upsample_velocity target must be finer than the source")
    v = _resample_vectors(field.v, src, target)
    return VelocityField(v.astype(field.v.dtype), target)


def resample_deformation(d, target):
    """Resample a displacement field onto another grid (world-consistent)."""
    return DeformationField(_resample_vectors(d.displacement, d.geometry, target), target)

