"""Coarse-to-fine registration driver."""
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from fdreg import autodiff as ad
from fdreg.basis import BasisModel, init_learned, polynomial
from fdreg.deformation import (
    DeformationField,
    VelocityField,
    exponentiate,
    upsample_velocity,
)
from fdreg.optim import Adam
from fdreg.regularizer import bending_energy_tensor
from fdreg.similarity import (
    DEFAULT_RIDGE,
    VARIANTS,
    SamplingGrid,
    WeightKernel,
    bidirectional_loss_tensor,
)
from fdreg.volume import Volume, derivative_magnitude_channel, gaussian_pyramid, resample

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class RegistrationError(RuntimeError):
    pass


@dataclass
class LevelConfig:
    factor: int
    iterations: int
    learning_rate_v: float = 1e-2
    learning_rate_omega: float = 1e-3
    kernel_sigma: float = None
    learning_rate_linear: float = 2e-2


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def _default_levels():
    return [LevelConfig(4, 500), LevelConfig(2, 750), LevelConfig(1, 150)]


@dataclass
class RegistrationConfig:
    levels: list = field(default_factory=_default_levels)
    J: int = 4
    basis: str = "learned"
    degree: int = None
    kernel_sigma: float = 2.0
    stride: int = 3
    variant: str = "log"
    derivative_channel: bool = False
    linear_component: bool = True
    lambda_regularization: float = 1000.0
    ridge: float = DEFAULT_RIDGE
    seed: int = 0
    steps: int = 7
    adam: AdamConfig = field(default_factory=AdamConfig)
    dtype: str = "float32"

    def validate(self):
        if not self.levels:
            raise ConfigError("at least one level is required")
        factors = [lv.factor for lv in self.levels]
        if factors[-1] != 1 or any(a < b for a, b in zip(factors, factors[1:])) or min(factors) < 1:
            raise ConfigError(f"level factors must descend to 1, got {factors}")
        for lv in self.levels:
            if lv.iterations < 1:
                raise ConfigError("iterations must be >= 1")
            if min(lv.learning_rate_v, lv.learning_rate_omega, lv.learning_rate_linear) <= 0:
                raise ConfigError("learning rates must be positive")
            if lv.kernel_sigma is not None and lv.kernel_sigma <= 0:
                raise ConfigError("kernel_sigma must be positive")
        if self.lambda_regularization < 0:
            raise ConfigError("lambda_regularization must be >= 0")
        if self.basis not in ("learned", "polynomial"):
            raise ConfigError(f"basis must be 'learned' or 'polynomial', got {self.basis!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.J < 2:
            raise ConfigError("J must be >= 2")
        if self.kernel_sigma <= 0 or self.stride < 1 or self.steps < 1 or self.ridge < 0:
            raise ConfigError("kernel_sigma, stride and steps must be positive; ridge >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        """Build from nested dicts; unknown keys raise :class:`ConfigError`."""
        data = dict(data or {})
        _reject_unknown(data, cls, "config")
        kwargs = {}
        for key, value in data.items():
            if key == "levels":
                levels = []
                for i, lv in enumerate(value):
                    _reject_unknown(lv, LevelConfig, f"levels[{i}]")
                    levels.append(LevelConfig(**lv))
                kwargs["levels"] = levels
            elif key == "adam":
                _reject_unknown(value, AdamConfig, "adam")
                kwargs["adam"] = AdamConfig(**value)
            else:
                kwargs[key] = value
        return cls(**kwargs).validate()


def _reject_unknown(data, cls, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


@dataclass
class RegistrationResult:
    forward: DeformationField
    inverse: DeformationField
    velocity: VelocityField
    loss_trace: list
    level_trace: list
    basis_ab: BasisModel
    basis_ba: BasisModel
    config: RegistrationConfig
    wall_time: float
    residuals: dict = None


def normalize_intensities(vol, lower=1.0, upper=99.0):
    """Map the [1st, 99th] percentile of valid intensities to [0, 1], clamped."""
    out = np.zeros(vol.data.shape, dtype=np.float64)
    for c in range(vol.channels):
        vals = vol.data[c][vol.valid_mask]
        if vals.size == 0:
            raise ConfigError("volume has no valid voxels")
        lo, hi = np.percentile(vals, [lower, upper])
        if not hi > lo:
            raise ConfigError(f"channel {c} is constant over its valid region")
        out[c] = np.clip((vol.data[c] - lo) / (hi - lo), 0.0, 1.0)
    out[:, ~vol.valid_mask] = 0.0
    return vol.replace(data=out)


def _with_derivative(vol):
    """Append normalized derivative-magnitude channels to a normalized volume."""
    n = vol.channels
    aug = derivative_magnitude_channel(vol)
    deriv = normalize_intensities(Volume(aug.data[n:], aug.affine, aug.valid_mask))
    return aug.replace(data=np.concatenate([vol.data, deriv.data], axis=0))


def make_basis(config, channels, seed):
    """Initial basis for ``channels`` input channels (polynomial degree defaults to J - 1)."""
    if config.basis == "learned":
        return init_learned(config.J, channels, seed)
    return polynomial(config.degree if config.degree is not None else config.J - 1, channels)


def prepare(I_A, I_B, config):
    """Normalized inputs on I_A's grid and their pyramids."""
    A = normalize_intensities(I_A)
    B = normalize_intensities(I_B)
    if B.geometry != A.geometry:
        B = resample(B, A.geometry)
    factors = [lv.factor for lv in config.levels]
    pyr_a = gaussian_pyramid(A, factors)
    pyr_b = gaussian_pyramid(B, factors)
    if config.derivative_channel:
        pyr_a = [_with_derivative(v) for v in pyr_a]
        pyr_b = [_with_derivative(v) for v in pyr_b]
    dtype = np.dtype(config.dtype)
    return [v.astype(dtype) for v in pyr_a], [v.astype(dtype) for v in pyr_b]


class LinearVelocity:
    """Global linear velocity ``p -> M (p - c) / r + t`` in world mm.

    ``c`` is the grid center and ``r`` its half diagonal, so the 3x4 parameter
    matrix ``[M | t]`` holds displacements in mm at the rim and at the center.
    Linear fields carry no bending energy; this component lets Adam move
    global rotation, scaling and translation through 12 coupled coordinates
    instead of one voxel at a time.
    """

    def __init__(self, geometry):
        corners = geometry.world_corners()
        self.center = corners.mean(axis=1)
        self.radius = 0.5 * float(np.linalg.norm(corners.max(axis=1) - corners.min(axis=1)))

    def _frame(self, geom):
        idx = np.indices(geom.shape, dtype=np.float64).reshape(3, -1)
        pts = geom.affine[:3, :3] @ idx + geom.affine[:3, 3:4]
        q = np.vstack([(pts - self.center[:, None]) / self.radius, np.ones((1, idx.shape[1]))])
        return q, np.linalg.inv(geom.affine[:3, :3])

    def field(self, params, geom, frame=None):
        """Velocity in voxels of ``geom``, shape (3, *geom.shape)."""
        q, to_vox = frame or self._frame(geom)
        return (to_vox @ (params @ q)).reshape((3,) + tuple(geom.shape))

    def gradient(self, grad_v, geom, frame=None):
        """Pull back a gradient w.r.t. the voxel-unit field onto the 3x4 parameters."""
        q, to_vox = frame or self._frame(geom)
        return (to_vox.T @ grad_v.reshape(3, -1).astype(np.float64)) @ q.T


def register(I_A, I_B, config=None, callback=None):
    """Estimate ``d`` such that ``I_B o d`` is locally a function of ``I_A``.

    ``callback(level, iteration, loss)`` is invoked after every iteration.
    Deterministic for a fixed ``config.seed``.
    """
    t0 = time.perf_counter()
    config = (config or RegistrationConfig()).validate()
    dtype = np.dtype(config.dtype)
    pyr_a, pyr_b = prepare(I_A, I_B, config)
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    rng = np.random.default_rng(seeds[0])
    basis_ab = make_basis(config, pyr_b[0].channels, seeds[1])
    basis_ba = make_basis(config, pyr_a[0].channels, seeds[2])
    learned = config.basis == "learned"
    params = {}
    if learned:
        params["omega_ab"] = basis_ab.omega.astype(dtype)
        params["omega_ba"] = basis_ba.omega.astype(dtype)
    adam = Adam(beta1=config.adam.beta1, beta2=config.adam.beta2, eps=config.adam.eps)
    linear = LinearVelocity(pyr_a[-1].geometry) if config.linear_component else None
    if linear is not None:
        params["linear"] = np.zeros((3, 4))
    loss_trace, level_trace = [], []
    v, prev_geom = None, None
    residuals = None
    for li, (level, a, b) in enumerate(zip(config.levels, pyr_a, pyr_b)):
        geom = a.geometry
        if v is None:
            v = np.zeros((3,) + geom.shape, dtype=dtype)
        else:
            v = upsample_velocity(VelocityField(v, prev_geom), geom).v.astype(dtype)
        params["v"] = v
        adam.reset("v")
        kernel = WeightKernel(level.kernel_sigma or config.kernel_sigma)
        rates = {"v": level.learning_rate_v, "omega_ab": level.learning_rate_omega,
                 "omega_ba": level.learning_rate_omega, "linear": level.learning_rate_linear}
        frame = linear._frame(geom) if linear is not None else None
        logger.info("level %d: factor %d, shape %s", li, level.factor, geom.shape)
        for it in range(level.iterations):
            grid = SamplingGrid.random(config.stride, rng)
            leaves = {k: ad.Tensor(p, requires_grad=True) for k, p in params.items() if k != "linear"}
            if linear is not None:
                # the dense part and the linear part share one leaf; their sum is the SVF
                lin = linear.field(params["linear"], geom, frame).astype(dtype)
                leaves["v"] = ad.Tensor(params["v"] + lin, requires_grad=True)
            loss, info = bidirectional_loss_tensor(
                a, b, leaves["v"], basis_ab, basis_ba, leaves.get("omega_ab"), leaves.get("omega_ba"),
                kernel, grid, config.variant, config.ridge, config.steps,
            )
            total = loss
            if config.lambda_regularization > 0:
                total = total + bending_energy_tensor(leaves["v"], geom.spacing) * config.lambda_regularization
            value = float(total.value)
            if not np.isfinite(value):
                raise RegistrationError(f"non-finite loss at level {li}, iteration {it}")
            grads = ad.backward(total)
            step = {k: grads.get(t, np.zeros_like(t.value)) for k, t in leaves.items()}
            if linear is not None:
                step["linear"] = linear.gradient(step["v"], geom, frame)
            adam.step(params, step, lr=rates)
            loss_trace.append(value)
            level_trace.append(li)
            if callback is not None:
                callback(li, it, value)
            if li == len(config.levels) - 1 and it == level.iterations - 1:
                residuals = {"per_center": info["ab"]["per_center"], "centers": info["ab"]["centers"],
                             "stride": grid.stride, "shift": grid.shift}
        prev_geom = geom
    v = params["v"]
    if linear is not None:
        v = v + linear.field(params["linear"], prev_geom)
    velocity = VelocityField(v.astype(np.float64), prev_geom)
    forward, inverse = exponentiate(velocity, config.steps)
    if learned:
        basis_ab = basis_ab.with_omega(params["omega_ab"].astype(np.float64))
        basis_ba = basis_ba.with_omega(params["omega_ba"].astype(np.float64))
    return RegistrationResult(
        forward=forward,
        inverse=inverse,
        velocity=velocity,
        loss_trace=loss_trace,
        level_trace=level_trace,
        basis_ab=basis_ab,
        basis_ba=basis_ba,
        config=config,
        wall_time=time.perf_counter() - t0,
        residuals=residuals,
    )
