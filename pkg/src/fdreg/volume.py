"""Regular-grid multichannel volumes and the grid operations registration needs."""
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from fdreg import kernels


class VolumeError(ValueError):
    pass


@dataclass(frozen=True)
class GridGeometry:
    """Spatial shape (D, H, W) plus a 4x4 voxel-to-world affine (mm)."""

    shape: tuple
    affine: np.ndarray

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if len(shape) != 3 or min(shape) < 1:
            raise VolumeError(f"invalid grid shape {self.shape}")
        affine = np.array(self.affine, dtype=np.float64)
        if affine.shape != (4, 4):
            raise VolumeError("affine must be 4x4")
        if abs(np.linalg.det(affine[:3, :3])) == 0:
            raise VolumeError("affine is singular")
        affine.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "affine", affine)

    @property
    def spacing(self):
        return np.linalg.norm(self.affine[:3, :3], axis=0)

    def voxel_to_world(self, points):
        """Map voxel coordinates of shape (3, ...) to world mm."""
        pts = np.asarray(points, dtype=np.float64)
        flat = pts.reshape(3, -1)
        out = self.affine[:3, :3] @ flat + self.affine[:3, 3:4]
        return out.reshape(pts.shape)

    def world_to_voxel(self, points):
        pts = np.asarray(points, dtype=np.float64)
        flat = pts.reshape(3, -1)
        inv = np.linalg.inv(self.affine)
        out = inv[:3, :3] @ flat + inv[:3, 3:4]
        return out.reshape(pts.shape)

    def world_corners(self):
        idx = np.array(np.meshgrid(*[[0, s - 1] for s in self.shape], indexing="ij"))
        return self.voxel_to_world(idx.reshape(3, -1))

    def __eq__(self, other):
        if not isinstance(other, GridGeometry):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.affine, other.affine)

    def __hash__(self):
        return hash((self.shape, self.affine.tobytes()))


def identity_grid(shape, dtype=np.float64):
    """Voxel coordinates of every grid point, shape (3, D, H, W)."""
    return np.stack(np.meshgrid(*[np.arange(s, dtype=dtype) for s in shape], indexing="ij"))


class Volume:
    """Immutable C-channel scalar field of shape (C, D, H, W).

    ``valid_mask`` marks voxels holding a valid image; comparisons are made
    over the overlap of valid regions only.
    """

    __slots__ = ("data", "affine", "valid_mask")

    def __init__(self, data, affine=None, valid_mask=None, dtype=np.float64):
        data = np.array(data, dtype=dtype)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or data.shape[0] < 1:
            raise VolumeError(f"volume data must have shape (C, D, H, W), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise VolumeError("volume data contains NaN or Inf")
        geometry = GridGeometry(data.shape[1:], np.eye(4) if affine is None else affine)
        if valid_mask is None:
            valid_mask = np.ones(data.shape[1:], dtype=bool)
        valid_mask = np.array(valid_mask, dtype=bool)
        if valid_mask.shape != data.shape[1:]:
            raise VolumeError(
                f"valid_mask shape {valid_mask.shape} does not match spatial shape {data.shape[1:]}"
            )
        data.setflags(write=False)
        valid_mask.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", geometry.affine)
        object.__setattr__(self, "valid_mask", valid_mask)

    def __setattr__(self, name, value):
        raise AttributeError("Volume is immutable")

    @property
    def shape(self):
        return self.data.shape[1:]

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def geometry(self):
        return GridGeometry(self.shape, self.affine)

    @property
    def spacing(self):
        return self.geometry.spacing

    def replace(self, data=None, affine=None, valid_mask=None):
        return Volume(
            self.data if data is None else data,
            self.affine if affine is None else affine,
            self.valid_mask if valid_mask is None else valid_mask,
            dtype=self.data.dtype,
        )

    def astype(self, dtype):
        return Volume(self.data, self.affine, self.valid_mask, dtype=dtype)

    def __repr__(self):
        return f"Volume(channels={self.channels}, shape={self.shape}, spacing={self.spacing.round(4)})"


def sample_trilinear(vol, points, border=False):
    """Trilinearly sample ``vol`` at continuous voxel ``points`` of shape (3, ...).

    Returns ``(values, inside)``: values of shape (C, ...) and a boolean mask
    of points that fall inside the grid. Outside points sample 0 (or the
    clamped border value when ``border`` is set).
    """
    pts = np.asarray(points)
    if not np.all(np.isfinite(pts)):
        raise VolumeError("sample points must be finite")
    data = vol.data if isinstance(vol, Volume) else np.asarray(vol)
    coords = np.ascontiguousarray(pts.reshape(3, -1), dtype=data.dtype)
    values, inside = kernels.trilinear_sample(np.ascontiguousarray(data), coords, border)
    return values.reshape((data.shape[0],) + pts.shape[1:]), inside.reshape(pts.shape[1:])


def gaussian_taps(sigma, truncate=4.0, normalize=True):
    """Odd-length sampled Gaussian; radius ``floor(truncate * sigma)``."""
    radius = int(np.floor(truncate * sigma + 1e-9))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (x / sigma) ** 2) if sigma > 0 else (x == 0).astype(np.float64)
    return taps / taps.sum() if normalize else taps


def smooth(data, sigma, mode="nearest"):
    """Separable Gaussian smoothing of the spatial axes of a (C, D, H, W) array."""
    out = np.asarray(data, dtype=np.float64)
    sigmas = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (3,))
    for axis, s in enumerate(sigmas, start=out.ndim - 3):
        if s > 0:
            out = correlate1d(out, gaussian_taps(s), axis=axis, mode=mode)
    return out


def downsample(vol, factor):
    """Smooth with std ``factor / 2`` voxels and subsample by ``factor``."""
    if factor == 1:
        return vol
    if factor > min(vol.shape):
        raise VolumeError(f"downsample factor {factor} exceeds spatial extent {vol.shape}")
    mask = vol.valid_mask.astype(np.float64)
    sigma = factor / 2.0
    num = smooth(vol.data * mask, sigma)
    den = smooth(mask[None], sigma)
    sl = (slice(None),) + (slice(None, None, factor),) * 3
    num, den = num[sl], den[sl]
    data = np.where(den > 1e-12, num / np.maximum(den, 1e-12), 0.0)
    valid = den[0] > 0.5
    affine = vol.affine @ np.diag([factor, factor, factor, 1.0])
    return Volume(data, affine, valid, dtype=vol.data.dtype)


def gaussian_pyramid(vol, factors):
    """One smoothed, subsampled copy of ``vol`` per integer factor.

    World coordinates are preserved: coarse voxel ``i`` sits on fine voxel
    ``i * factor``.
    """
    factors = [int(f) for f in factors]
    if not factors or factors[-1] != 1 or any(f < 1 for f in factors):
        raise VolumeError(f"factors must be >= 1 and end with 1, got {factors}")
    if any(a < b for a, b in zip(factors, factors[1:])):
        raise VolumeError(f"factors must be sorted descending, got {factors}")
    return [downsample(vol, f) for f in factors]


def derivative_magnitude_channel(vol):
    """Append ``|grad I|`` (central differences, per mm) for every channel."""
    if min(vol.shape) < 3:
        raise VolumeError(f"central differences need extents >= 3, got {vol.shape}")
    spacing = vol.spacing
    mags = []
    for c in range(vol.channels):
        grads = np.gradient(vol.data[c], *spacing)
        mags.append(np.sqrt(sum(g * g for g in grads)))
    return vol.replace(data=np.concatenate([vol.data, np.stack(mags)], axis=0))


def resample(vol, geometry, border=False):
    """Resample ``vol`` onto another grid through the world coordinates."""
    pts = geometry.voxel_to_world(identity_grid(geometry.shape))
    vox = vol.geometry.world_to_voxel(pts)
    values, inside = sample_trilinear(vol, vox, border=border)
    mvals, _ = sample_trilinear(vol.valid_mask[None].astype(np.float64), vox)
    return Volume(values, geometry.affine, inside & (mvals[0] >= 0.5), dtype=vol.data.dtype)
