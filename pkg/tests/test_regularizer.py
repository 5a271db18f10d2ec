import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import smooth_velocity
from fdreg import autodiff as ad
from fdreg.regularizer import RegularizerError, bending_energy, bending_energy_tensor
from fdreg.volume import GridGeometry


def test_zero_and_affine_fields(rng):
    assert bending_energy(np.zeros((3, 5, 5, 5))) == 0.0
    x = np.indices((6, 7, 5)).astype(float)
    A = rng.standard_normal((3, 3))
    v = np.einsum("ij,j...->i...", A, x) + rng.standard_normal(3)[:, None, None, None]
    assert bending_energy(v) == pytest.approx(0.0, abs=1e-20)


def test_quadratic_field_density():
    sp = np.array([0.5, 1.0, 2.0])
    x = np.indices((7, 7, 7)).astype(float) * sp[:, None, None, None]
    world = np.stack([x[0] ** 2, np.zeros_like(x[0]), np.zeros_like(x[0])])
    # stored in voxel units; the regularizer converts back to mm
    v = world / sp[:, None, None, None]
    assert bending_energy(v, spacing=sp) == pytest.approx(4.0, rel=1e-12)
    from fdreg.deformation import VelocityField
    field = VelocityField(v, GridGeometry((7, 7, 7), np.diag([*sp, 1.0])))
    assert bending_energy(field) == pytest.approx(4.0, rel=1e-12)


def test_mixed_term_counts_twice():
    x = np.indices((5, 5, 5)).astype(float)
    v = np.stack([x[0] * x[1], np.zeros_like(x[0]), np.zeros_like(x[0])])
    assert bending_energy(v) == pytest.approx(2.0, rel=1e-12)


@given(st.integers(0, 10_000), st.floats(-5, 5))
def test_quadratic_scaling(seed, c):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((3, 5, 6, 5))
    assert bending_energy(c * v) == pytest.approx(c * c * bending_energy(v), rel=1e-12, abs=1e-300)


def test_gradient_finite_differences(rng):
    v = smooth_velocity(rng, (6, 6, 6), 1.0, sigma=1.0)
    sp = (1.0, 1.5, 0.8)
    leaf = ad.Tensor(v, requires_grad=True)
    g = ad.backward(bending_energy_tensor(leaf, sp))[leaf]
    h = 1e-5
    for idx in [(0, 2, 3, 1), (1, 0, 0, 0), (2, 3, 3, 3), (1, 5, 2, 4)]:
        vp, vm = v.copy(), v.copy()
        vp[idx] += h
        vm[idx] -= h
        fd = (bending_energy(vp, sp) - bending_energy(vm, sp)) / (2 * h)
        assert g[idx] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_extent_error():
    with pytest.raises(RegularizerError):
        bending_energy(np.zeros((3, 2, 5, 5)))
