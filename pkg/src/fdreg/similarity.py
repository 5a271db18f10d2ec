"""Local functional-dependence similarity.

Around every sampling center ``r`` the target intensities are regressed on
the basis features of the source intensities by Gaussian-weighted least
squares, solved in closed form. The loss averages the log of the weighted
residual over centers. All weighted sums are separable correlations of
voxelwise products, evaluated only at the strided centers.
"""
from dataclasses import dataclass

import numpy as np

from fdreg import autodiff as ad
from fdreg.basis import features as basis_features
from fdreg.deformation import exponentiate_tensor, warp_tensor

DEFAULT_SIGMA = 2.0
DEFAULT_STRIDE = 3
DEFAULT_RIDGE = 1e-6
RESIDUAL_FLOOR = 1e-8
VARIANCE_FLOOR = 1e-12
VARIANTS = ("log", "normalized")


class SimilarityError(ValueError):
    pass


@dataclass(frozen=True)
class WeightKernel:
    """Separable Gaussian weights ``exp(-x^2 / 2 sigma^2)`` cut at 3 sigma.

    The center tap is exactly 1.
    """

    sigma: tuple = (DEFAULT_SIGMA,) * 3
    truncate: float = 3.0

    def __post_init__(self):
        sigma = tuple(float(s) for s in np.broadcast_to(np.asarray(self.sigma, dtype=float), (3,)))
        if min(sigma) <= 0:
            raise SimilarityError(f"kernel sigma must be positive, got {sigma}")
        object.__setattr__(self, "sigma", sigma)

    @property
    def radius(self):
        return tuple(int(np.floor(self.truncate * s + 1e-9)) for s in self.sigma)

    @property
    def taps(self):
        out = []
        for s, r in zip(self.sigma, self.radius):
            x = np.arange(-r, r + 1, dtype=np.float64)
            out.append(np.exp(-0.5 * (x / s) ** 2))
        return tuple(out)

    def dense(self):
        """Full 3D weight array, for reference computations."""
        tx, ty, tz = self.taps
        return tx[:, None, None] * ty[None, :, None] * tz[None, None, :]


@dataclass(frozen=True)
class SamplingGrid:
    """Strided sampling centers, offset by ``shift`` along each axis."""

    stride: tuple = (DEFAULT_STRIDE,) * 3
    shift: tuple = (0, 0, 0)

    def __post_init__(self):
        stride = tuple(int(s) for s in np.broadcast_to(self.stride, (3,)))
        shift = tuple(int(s) for s in np.broadcast_to(self.shift, (3,)))
        if min(stride) < 1 or any(not 0 <= h < s for h, s in zip(shift, stride)):
            raise SimilarityError(f"invalid sampling grid stride={stride} shift={shift}")
        object.__setattr__(self, "stride", stride)
        object.__setattr__(self, "shift", shift)

    @classmethod
    def random(cls, stride, rng):
        stride = tuple(int(s) for s in np.broadcast_to(stride, (3,)))
        return cls(stride, tuple(int(rng.integers(0, s)) for s in stride))

    def _slices(self):
        return tuple(slice(h, None, s) for h, s in zip(self.shift, self.stride))

    def site_mask(self, mask):
        return np.asarray(mask)[self._slices()]

    def site_coords(self, shape):
        axes = [np.arange(h, n, s) for h, n, s in zip(self.shift, shape, self.stride)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


@dataclass
class MomentFields:
    """Weighted moments at the active centers (n of them).

    ``gram`` (n, J, J), ``cross`` (n, J, T), ``target_sq`` (T, n),
    ``weight_norm`` (n,), ``target_sum`` (T, n) and ``centers`` (n, 3).
    """

    gram: np.ndarray
    cross: np.ndarray
    target_sq: np.ndarray
    weight_norm: np.ndarray
    target_sum: np.ndarray
    centers: np.ndarray


@dataclass
class LocalCoefficients:
    theta: np.ndarray
    solved: np.ndarray

    @property
    def n_dropped(self):
        return int(np.count_nonzero(~self.solved))


@dataclass
class LossValue:
    value: float
    per_center: np.ndarray
    centers: np.ndarray
    n_dropped: int = 0
    variant: str = "log"


def _sym_index(J):
    iu, ju = np.triu_indices(J)
    sym = np.empty((J, J), dtype=np.intp)
    sym[iu, ju] = np.arange(iu.size)
    sym[ju, iu] = np.arange(iu.size)
    return iu, ju, sym


def moment_tensors(feats, target, mask, shape, kernel, grid):
    """Tape computation of the weighted moments.

    ``feats`` is a (J, N) tensor, ``target`` a (T, N) tensor and ``mask`` a
    boolean array over the N voxels of grid ``shape``. Returns a dict of
    tensors restricted to the active centers plus their voxel indices.
    """
    J, T = feats.shape[0], target.shape[0]
    n_vox = int(np.prod(shape))
    mask = np.asarray(mask, dtype=bool).reshape(shape)
    active = np.flatnonzero(grid.site_mask(mask))
    if active.size == 0:
        raise SimilarityError("no overlap between valid regions at the sampling centers")
    m = ad.Tensor(mask.reshape(1, n_vox).astype(feats.dtype))
    iu, ju, sym = _sym_index(J)
    fm = feats * m
    prod = ad.take(fm, iu, 0) * ad.take(feats, ju, 0)
    cross = ad.reshape(ad.reshape(fm, (J, 1, n_vox)) * ad.reshape(target, (1, T, n_vox)), (J * T, n_vox))
    ym = target * m
    ysq = ym * target
    stacked = ad.concat([prod, cross, ysq, ym, m], axis=0)
    K = stacked.shape[0]
    conv = ad.sep_conv(ad.reshape(stacked, (K,) + tuple(shape)), kernel.taps, grid.stride, grid.shift)
    flat = ad.take(ad.reshape(conv, (K, -1)), active, 1)
    n = active.size
    P = iu.size
    gram = ad.transpose(ad.reshape(ad.take(flat[:P], sym.ravel(), 0), (J, J, n)), (2, 0, 1))
    crs = ad.transpose(ad.reshape(flat[P:P + J * T], (J, T, n)), (2, 0, 1))
    o = P + J * T
    centers = grid.site_coords(shape)[active]
    return {
        "gram": gram,
        "cross": crs,
        "target_sq": flat[o:o + T],
        "target_sum": flat[o + T:o + 2 * T],
        "weight_norm": flat[o + 2 * T],
        "centers": centers,
    }


def _solvable(gram, ridge):
    tr = np.trace(gram, axis1=-2, axis2=-1)
    ok = np.isfinite(gram).all(axis=(-2, -1)) & (tr > 0)
    if ridge <= 0 and ok.any():
        cond = np.full(ok.shape, np.inf)
        cond[ok] = np.linalg.cond(gram[ok])
        ok &= cond < 1e13
    return ok


def residual_floor(target, mask):
    """Scale-aware floor: a tiny fraction of the mean target second moment."""
    t = np.asarray(target).reshape(target.shape[0], -1)
    m = np.asarray(mask, dtype=bool).ravel()
    if not m.any():
        raise SimilarityError("no overlap between valid regions")
    return float(np.sum(np.mean(t[:, m] ** 2, axis=1)))


def loss_from_moments(mt, variant="log", ridge=DEFAULT_RIDGE, detach=True, floor_scale=1.0):
    """Per-center residuals and the averaged loss from moment tensors.

    ``floor_scale`` is the mean target second moment used to scale the
    residual floor. Returns ``(loss, per_center, solved_mask)``.
    """
    if variant not in VARIANTS:
        raise SimilarityError(f"unknown variant {variant!r}")
    # the residual is a difference of nearly equal sums, so this small
    # per-center stage always runs in 64-bit
    gram, cross, ysq, ysum, wn = (ad.astype(mt[k], np.float64) for k in
                                  ("gram", "cross", "target_sq", "target_sum", "weight_norm"))
    ok = _solvable(gram.value, ridge)
    if not ok.any():
        raise SimilarityError("all sampling centers were dropped (singular local systems)")
    if not ok.all():
        keep = np.flatnonzero(ok)
        gram, cross = ad.take(gram, keep, 0), ad.take(cross, keep, 0)
        ysq, ysum, wn = ad.take(ysq, keep, 1), ad.take(ysum, keep, 1), ad.take(wn, keep, 0)
    theta = ad.solve(gram, cross, ridge)
    if detach:
        theta = ad.stop_gradient(theta)
    quad = ad.tsum(theta * ad.matmul(gram, theta), axis=(1, 2))
    if ridge:
        # penalized objective: theta is its exact minimizer, so the detached
        # gradient is exact rather than approximate
        J = gram.shape[-1]
        kappa = ad.tsum(gram * np.eye(J), axis=(1, 2)) * (ridge / J)
        quad = quad + kappa * ad.tsum(theta * theta, axis=(1, 2))
    lin = ad.tsum(theta * cross, axis=(1, 2))
    resid = ad.clamp_min(quad - 2.0 * lin + ad.tsum(ysq, axis=0), 0.0) / wn
    if variant == "log":
        per = ad.log(resid + RESIDUAL_FLOOR * floor_scale)
    else:
        mean_t = ysum / wn
        var = ad.tsum(ysq / wn - mean_t * mean_t, axis=0)
        per = resid / (var + VARIANCE_FLOOR * floor_scale)
    return ad.mean(per), per, ok


def locor_loss_tensor(target, source, mask, shape, basis, omega=None, kernel=None, grid=None,
                      variant="log", ridge=DEFAULT_RIDGE, detach=True):
    """Loss for regressing ``target`` (T, N) on basis features of ``source`` (C, N).

    Returns ``(loss_tensor, info)`` with per-center diagnostics in ``info``.
    """
    kernel = kernel or WeightKernel()
    grid = grid or SamplingGrid()
    target, source = ad.as_tensor(target), ad.as_tensor(source)
    feats = basis_features(basis, source, omega)
    mt = moment_tensors(feats, target, mask, shape, kernel, grid)
    scale = residual_floor(target.value, mask)
    loss, per, ok = loss_from_moments(mt, variant, ridge, detach, scale)
    return loss, {"per_center": per.value, "centers": mt["centers"][ok], "n_dropped": int((~ok).sum())}


def _flat(vol):
    return vol.data.reshape(vol.channels, -1)


def _check_same_grid(a, b):
    if a.shape != b.shape or not np.allclose(a.affine, b.affine):
        raise SimilarityError("volumes must share one grid")


def compute_moments(target, features, kernel=None, grid=None, mask=None):
    """Weighted moments of ``target`` (Volume) against ``features`` (J, D, H, W)."""
    kernel = kernel or WeightKernel()
    grid = grid or SamplingGrid()
    feats = np.asarray(features, dtype=target.data.dtype)
    if feats.shape[1:] != target.shape:
        raise SimilarityError("features and target must be on the same grid")
    mask = target.valid_mask if mask is None else np.asarray(mask, dtype=bool) & target.valid_mask
    mt = moment_tensors(ad.Tensor(feats.reshape(feats.shape[0], -1)), ad.Tensor(_flat(target)),
                        mask, target.shape, kernel, grid)
    return MomentFields(
        gram=mt["gram"].value,
        cross=mt["cross"].value,
        target_sq=mt["target_sq"].value,
        weight_norm=mt["weight_norm"].value,
        target_sum=mt["target_sum"].value,
        centers=mt["centers"],
    )


def solve_local_wls(moments, ridge=DEFAULT_RIDGE):
    """Per-center coefficients solving ``(G + ridge tr(G)/J I) theta = c``.

    Centers whose system cannot be solved are flagged in ``solved`` and
    their coefficients set to NaN.
    """
    gram = np.asarray(moments.gram)
    ok = _solvable(gram, ridge)
    theta = np.full(np.asarray(moments.cross).shape, np.nan)
    if ok.any():
        theta[ok] = ad.solve(gram[ok], np.asarray(moments.cross)[ok], ridge).value
    return LocalCoefficients(theta, ok)


def locor_loss(I_A, I_B_warped, basis, kernel=None, grid=None, variant="log", ridge=DEFAULT_RIDGE,
               mask=None):
    """Similarity of ``I_A`` (regression target) and ``I_B_warped`` (basis input).

    Both volumes must be on the same grid; the comparison is restricted to
    the intersection of their valid masks (and ``mask`` if given).
    """
    _check_same_grid(I_A, I_B_warped)
    joint = I_A.valid_mask & I_B_warped.valid_mask
    if mask is not None:
        joint = joint & np.asarray(mask, dtype=bool)
    loss, info = locor_loss_tensor(_flat(I_A), _flat(I_B_warped), joint, I_A.shape, basis,
                                   None, kernel, grid, variant, ridge)
    return LossValue(float(loss.value), info["per_center"], info["centers"], info["n_dropped"], variant)


def bidirectional_loss_tensor(I_A, I_B, v, basis_ab, basis_ba, omega_ab=None, omega_ba=None,
                              kernel=None, grid=None, variant="log", ridge=DEFAULT_RIDGE,
                              steps=7, detach=True):
    """Average of the two directional losses under ``exp(v)`` and ``exp(-v)``.

    ``basis_ab`` regresses ``I_A`` on warped ``I_B``; ``basis_ba`` the
    reverse. Returns ``(loss_tensor, info)``.
    """
    _check_same_grid(I_A, I_B)
    v = ad.as_tensor(v)
    fwd, inv = exponentiate_tensor(v, steps)
    b_warp, b_mask = warp_tensor(ad.Tensor(I_B.data), I_B.valid_mask, fwd)
    a_warp, a_mask = warp_tensor(ad.Tensor(I_A.data), I_A.valid_mask, inv)
    n = int(np.prod(I_A.shape))
    mask_ab = I_A.valid_mask & b_mask
    mask_ba = I_B.valid_mask & a_mask
    l_ab, info_ab = locor_loss_tensor(_flat(I_A), ad.reshape(b_warp, (I_B.channels, n)), mask_ab, I_A.shape,
                                      basis_ab, omega_ab, kernel, grid, variant, ridge, detach)
    l_ba, info_ba = locor_loss_tensor(_flat(I_B), ad.reshape(a_warp, (I_A.channels, n)), mask_ba, I_B.shape,
                                      basis_ba, omega_ba, kernel, grid, variant, ridge, detach)
    loss = (l_ab + l_ba) * 0.5
    return loss, {"ab": info_ab, "ba": info_ba, "forward": fwd, "inverse": inv}


def bidirectional_loss(I_A, I_B, v, basis_ab, basis_ba, kernel=None, grid=None, variant="log",
                       ridge=DEFAULT_RIDGE, steps=7):
    """Scalar value of :func:`bidirectional_loss_tensor` for a velocity array."""
    vel = v.v if hasattr(v, "v") else np.asarray(v)
    loss, _ = bidirectional_loss_tensor(I_A, I_B, ad.Tensor(vel.astype(I_A.data.dtype)), basis_ab, basis_ba,
                                        kernel=kernel, grid=grid, variant=variant, ridge=ridge, steps=steps)
    return float(loss.value)


def correlation_ratio_oracle(I_A, I_B, max_levels=64):
    """``1 - CR``: variance of ``I_B`` within the isosets of ``I_A``, over its total variance.

    ``I_A`` must be quantized (at most ``max_levels`` distinct values).
    Only the overlap of the valid masks is used.
    """
    mask = I_A.valid_mask & I_B.valid_mask
    a = I_A.data[0][mask]
    b = I_B.data[0][mask]
    levels, inverse = np.unique(a, return_inverse=True)
    if levels.size > max_levels:
        raise SimilarityError(f"I_A has {levels.size} intensity levels; quantize to <= {max_levels}")
    var_b = b.var()
    if var_b == 0:
        raise SimilarityError("I_B has zero variance")
    counts = np.bincount(inverse)
    means = np.bincount(inverse, weights=b) / counts
    within = np.sum((b - means[inverse]) ** 2)
    return float(within / (b.size * var_b))
