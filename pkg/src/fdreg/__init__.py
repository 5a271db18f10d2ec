"""Multimodal deformable registration by local functional dependence.

A moving image is aligned to a fixed one by making the fixed intensities
locally a (learned or polynomial) function of the warped moving intensities,
under a diffeomorphic stationary-velocity-field deformation.
"""
from fdreg.basis import BasisModel, eval_basis, init_learned, polynomial
from fdreg.deformation import (
    DeformationField,
    VelocityField,
    compose,
    exponentiate,
    jacobian_determinant,
    warp,
)
from fdreg.evaluation import dice, mae, tre
from fdreg.pipeline import LevelConfig, RegistrationConfig, RegistrationResult, register
from fdreg.regularizer import bending_energy
from fdreg.similarity import (
    SamplingGrid,
    WeightKernel,
    bidirectional_loss,
    compute_moments,
    correlation_ratio_oracle,
    locor_loss,
    solve_local_wls,
)
from fdreg.synthetic import SyntheticCase, make_case
from fdreg.volume import GridGeometry, Volume, gaussian_pyramid, sample_trilinear

__version__ = "0.1.0"
