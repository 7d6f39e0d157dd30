"""Gaussian rough differential equations: KL drivers, rough paths, solvers and density positivity."""

__version__ = "0.1.0"

from .errors import (DivergenceError, EstimationFailed, GaussRDEError, InvalidArgument,
                     NotElliptic, NumericalDegeneracy)
from .gaussian_driver import (CameronMartinElement, GridPath, HurstModel, KLBasis, TimeGrid,
                              build_kl_basis, cm_norm, fbm_covariance, project, sample_paths)
from .rough_path import (GeometricRoughPath, chen_compose, chen_inverse, levelwise_distance, lift,
                         p_variation, young_translate)
from .vector_fields import VectorFieldSystem, catalog, hormander_rank, lie_bracket, polynomial_system
from .solvers import (jacobian_flow, solve_rde, solve_variation, solve_young, write_solution_csv)
from .malliavin import MalliavinMatrix, sampled_malliavin_spectrum, skeleton_malliavin
from .positivity import CertifyOptions, PositivityCertificate, certify, elliptic_reach, verify
from .density import DensityEstimate, cross_check, estimate_density, kl_convergence_report
