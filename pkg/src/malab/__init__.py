"""Numerical laboratory for the complex Monge-Ampere equation on flat tori."""

from .grids import (ComplexMatrixField, GridMismatchError, GridSpec, ScalarField,
                    complex_hessian, integrate, load_field, lp_norm, partial_z,
                    partial_zbar, point_eval, save_field, smooth_distance_sq)
from .geometry import (BackgroundMetric, MetricField, MetricPositivityError,
                       bisectional_lower_bound, covariant_hessian_holo,
                       grad_norm_sq, hermitian_grad_pairing, laplacian,
                       make_flat_background, make_perturbed_background,
                       metric_of_potential, trace_w_w0)

__version__ = "0.1.0"
