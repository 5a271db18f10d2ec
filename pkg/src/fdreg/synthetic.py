"""Semi-synthetic multimodal cases with known deformations.

A procedural head-like phantom is deformed by a rigid motion composed with
the exponential of a smoothed-noise velocity field, then passed through a
nonlinear intensity map to imitate a second contrast.
"""
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from fdreg.deformation import DeformationField, VelocityField, exponentiate, warp
from fdreg.volume import GridGeometry, Volume, identity_grid

MAPPINGS = ("identity", "monotone", "nonmonotone")


class SyntheticError(ValueError):
    pass


@dataclass
class SyntheticCase:
    """``moving = remap(warp(fixed_source, ground_truth)) + noise``.

    ``ground_truth`` lives on the moving grid and maps it into the fixed
    image, so a registration of (fixed, moving) should return an inverse
    deformation close to it. ``foreground`` marks the moving image's object.
    """

    fixed: Volume
    moving: Volume
    ground_truth: DeformationField
    foreground: np.ndarray
    seed: int


def _as_geometry(geometry):
    if isinstance(geometry, GridGeometry):
        return geometry
    shape = (geometry,) * 3 if np.isscalar(geometry) else tuple(geometry)
    return GridGeometry(shape, np.eye(4))


def phantom(geometry=64, seed=0, n_blobs=40, texture=0.2):
    """Blob/shell phantom in [0, 1] with textured interior.

    Returns ``(volume, foreground_mask)``.
    """
    geometry = _as_geometry(geometry)
    rng = np.random.default_rng(seed)
    shape = np.array(geometry.shape, dtype=float)
    pts = identity_grid(geometry.shape)
    center = (shape - 1) / 2
    rel = (pts - center[:, None, None, None]) / shape[:, None, None, None]

    def ellipsoid(c, axes):
        return sum(((rel[i] - c[i]) / axes[i]) ** 2 for i in range(3))

    # irregular outline: the ellipsoid radius is modulated by smooth noise so
    # that rotations are observable from the boundary, not only inside
    bumps = gaussian_filter(rng.standard_normal(geometry.shape), 6.0, mode="wrap")
    bumps *= 0.12 / np.abs(bumps).max()
    head_axes = np.array([0.42, 0.36, 0.39])
    head = ellipsoid(np.zeros(3), head_axes) * (1.0 + bumps) ** -2
    fg = head <= 1.0
    img = np.zeros(geometry.shape)
    shell_tex = gaussian_filter(rng.standard_normal(geometry.shape), 1.0)
    shell_tex /= np.abs(shell_tex).max()
    img[fg] = 0.9 + 0.1 * shell_tex[fg]
    brain = head <= (1.0 - 0.16) ** 2
    img[brain] = 0.55
    for _ in range(n_blobs):
        c = rng.uniform(-0.28, 0.28, 3)
        axes = rng.uniform(0.03, 0.1, 3)
        img[(ellipsoid(c, axes) <= 1.0) & brain] = rng.choice([0.15, 0.3, 0.4, 0.7, 0.8])
    vent = (ellipsoid(np.array([0.0, -0.05, 0.05]), [0.12, 0.05, 0.08]) <= 1.0) | (
        ellipsoid(np.array([0.0, 0.05, 0.05]), [0.12, 0.05, 0.08]) <= 1.0
    )
    img[vent & brain] = 0.08
    tex = gaussian_filter(rng.standard_normal(geometry.shape), 1.5)
    tex /= np.abs(tex).max()
    img[brain] += texture * tex[brain]
    img = gaussian_filter(img, 0.6)
    img = np.clip(img, 0.0, 1.0)
    return Volume(img, geometry.affine), fg


def random_svf(geometry, amplitude, smooth_sigma, seed):
    """Gaussian-smoothed white noise scaled to ``max |v| = amplitude`` voxels."""
    if not amplitude > 0:
        raise SyntheticError("amplitude must be positive")
    if smooth_sigma < 1:
        raise SyntheticError("smooth_sigma must be >= 1")
    geometry = _as_geometry(geometry)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((3,) + geometry.shape)
    v = np.stack([gaussian_filter(n, smooth_sigma, mode="reflect") for n in noise])
    v *= amplitude / np.abs(v).max()
    return VelocityField(v, geometry)


def euler_rotation(angles_deg):
    ax, ay, az = np.deg2rad(angles_deg)
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def rigid_matrix(geometry, angles_deg, translation_mm):
    """Voxel-space 4x4 matrix of a rotation about the grid center plus translation."""
    geometry = _as_geometry(geometry)
    center = geometry.voxel_to_world((np.array(geometry.shape, dtype=float) - 1) / 2)
    world = np.eye(4)
    rot = euler_rotation(angles_deg)
    world[:3, :3] = rot
    world[:3, 3] = center - rot @ center + np.asarray(translation_mm, dtype=float)
    return np.linalg.inv(geometry.affine) @ world @ geometry.affine


def random_rigid(geometry, max_rotation_deg, max_translation_mm, seed):
    """Dense displacement of a random rigid motion within the given bounds."""
    if max_rotation_deg < 0 or max_translation_mm < 0:
        raise SyntheticError("rigid bounds must be >= 0")
    geometry = _as_geometry(geometry)
    rng = np.random.default_rng(seed)
    angles = rng.uniform(-max_rotation_deg, max_rotation_deg, 3)
    trans = rng.uniform(-max_translation_mm, max_translation_mm, 3)
    return rigid_displacement(geometry, rigid_matrix(geometry, angles, trans))


def rigid_displacement(geometry, matrix, points=None):
    """Displacement ``M p - x`` where ``p`` defaults to the grid points."""
    grid = identity_grid(geometry.shape)
    p = grid if points is None else points
    flat = p.reshape(3, -1)
    moved = matrix[:3, :3] @ flat + matrix[:3, 3:4]
    return DeformationField(moved.reshape(grid.shape) - grid, geometry)


def intensity_map(x, mapping):
    """The fixed nonlinear contrast maps (inputs in [0, 1])."""
    x = np.asarray(x, dtype=np.float64)
    if mapping == "identity":
        return x.copy()
    if mapping == "monotone":
        return np.sqrt(np.clip(x, 0.0, None))
    if mapping == "nonmonotone":
        bump = np.exp(-(((x - 0.35) / 0.1) ** 2))
        return (x + 0.8 * bump) / 1.5
    raise SyntheticError(f"unknown mapping {mapping!r}; expected one of {MAPPINGS}")


def make_pseudo_modality(vol, mapping="nonmonotone", noise_sigma=0.0, seed=0):
    """Apply an intensity map plus Gaussian noise (channel 0 of ``vol``)."""
    rng = np.random.default_rng(seed)
    out = intensity_map(vol.data, mapping)
    if noise_sigma > 0:
        out = out + rng.normal(0.0, noise_sigma, size=out.shape)
    return vol.replace(data=out)


def make_case(geometry=64, seed=0, amplitude=3.0, smooth_sigma=8.0, max_rotation_deg=4.0,
              max_translation_mm=3.0, mapping="nonmonotone", noise_sigma=0.01, phantom_seed=None):
    """Generate one reproducible synthetic registration case.

    Ground truth is ``rigid o exp(v)`` (the rigid part is applied last).
    """
    geometry = _as_geometry(geometry)
    ss = np.random.SeedSequence(seed).spawn(5)
    source, fg = phantom(geometry, seed if phantom_seed is None else phantom_seed)
    velocity = random_svf(geometry, amplitude, smooth_sigma, ss[0])
    elastic, _ = exponentiate(velocity)
    rng = np.random.default_rng(ss[1])
    angles = rng.uniform(-max_rotation_deg, max_rotation_deg, 3)
    trans = rng.uniform(-max_translation_mm, max_translation_mm, 3)
    gt = rigid_displacement(geometry, rigid_matrix(geometry, angles, trans), elastic.points())
    warped = warp(source, gt)
    fg_warped = warp(Volume(fg.astype(float), geometry.affine), gt).data[0] >= 0.5
    moving = make_pseudo_modality(warped, mapping, noise_sigma, ss[2])
    fixed = make_pseudo_modality(source, "identity", noise_sigma, ss[3])
    return SyntheticCase(fixed=fixed, moving=moving, ground_truth=gt, foreground=fg_warped, seed=seed)
