"""Gradient-estimate machinery: Bochner residual, the exponential test
function H, the cutoff/ABP inequality chain, and the integral bounds.

All estimate-side quantities use the normalization phi - inf phi >= 0.
Wedge products of (1,1)-forms are evaluated as polarized mixed determinants
against the package volume convention (mean of density * det g0), under
which omega^n integrates to det g.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .grids import (GridSpec, ScalarField, holo_gradient, integrate, lp_norm,
                    point_eval, smooth_distance_sq)
from .geometry import (BackgroundMetric, covariant_hessian_holo, grad_norm_sq,
                       hermitian_grad_pairing, laplacian, trace_w_w0)
from .solver import MASolution

__all__ = [
    "EstimateReport",
    "CutoffSpec",
    "ABPReport",
    "lambda_of",
    "H_field",
    "argmax_of_H",
    "bochner_residual",
    "bochner_relative_residual",
    "curvature_gradient_contraction",
    "diff_inequality_slack",
    "build_cutoff",
    "abp_check",
    "ibp_identity_residual",
    "l1_H_bound",
    "estimate_report",
]


def lambda_of(K: float) -> float:
    """Exponent rate of the test function: 2K + 10 for the clamped K >= 0."""
    if K < 0:
        raise ValueError(f"K must be clamped nonnegative, got {K}")
    return 2.0 * K + 10.0


def H_field(sol: MASolution, lam: float) -> ScalarField:
    """H = exp(-lam (phi - inf phi)) |grad phi|^2 measured in omega_0."""
    gn = grad_norm_sq(sol.phi, sol.problem.bg)
    phi_t = sol.phi.values - sol.inf_phi
    return ScalarField(sol.phi.grid, np.exp(-lam * phi_t) * gn.values)


def argmax_of_H(sol: MASolution, lam: float) -> tuple:
    """Grid coordinates of the maximum of H."""
    H = H_field(sol, lam)
    idx = np.unravel_index(int(np.argmax(H.values)), H.grid.shape)
    return tuple(i / H.grid.points_per_axis for i in idx)


def _bochner_terms(sol: MASolution):
    bg = sol.problem.bg
    metric = sol.metric
    u = grad_norm_sq(sol.phi, bg)
    lhs = laplacian(u, metric)

    gradient_term = hermitian_grad_pairing(sol.problem.F, sol.phi, bg).values

    Ginv = metric.inverse_entries
    G0inv = bg.inverse_entries
    P = covariant_hessian_holo(sol.phi, bg).entries
    M = sol.hess_phi
    quad_holo = np.einsum("...ji,...lk,...ki,...jl->...", Ginv, G0inv,
                          P, np.conj(P), optimize=True).real
    quad_mixed = np.einsum("...ji,...lk,...kj,...il->...", Ginv, G0inv,
                           M, M, optimize=True).real

    if bg.curvature is None:
        curv_term = np.zeros(bg.grid.shape)
    else:
        dphi = sol.grad_phi
        curv_term = np.einsum("...ji,...ijkl,...p,...q,...qk,...lp->...",
                              Ginv, bg.curvature, dphi, np.conj(dphi),
                              G0inv, G0inv, optimize=True).real
    return lhs.values, gradient_term + quad_holo + quad_mixed + curv_term


def bochner_residual(sol: MASolution) -> ScalarField:
    """Pointwise defect of the second-order identity for Delta_omega |grad phi|^2.

    Both sides are assembled independently from spectral primitives; for an
    exactly solved smooth instance the defect decays spectrally.
    """
    lhs, rhs = _bochner_terms(sol)
    return ScalarField(sol.phi.grid, lhs - rhs)


def bochner_relative_residual(sol: MASolution) -> float:
    """max |defect| / max |LHS| (0 when both sides vanish identically)."""
    lhs, rhs = _bochner_terms(sol)
    scale = float(np.max(np.abs(lhs)))
    if scale == 0.0:
        return float(np.max(np.abs(rhs)))
    return float(np.max(np.abs(lhs - rhs)) / scale)


def curvature_gradient_contraction(sol: MASolution) -> ScalarField:
    """The curvature term g^{i jbar} R_{i jbar k lbar} contracted with the
    gradient vectors; bounded below by -K tr_omega omega0 |grad phi|^2."""
    bg = sol.problem.bg
    if bg.curvature is None:
        return ScalarField.constant(bg.grid, 0.0)
    dphi = sol.grad_phi
    vals = np.einsum("...ji,...ijkl,...p,...q,...qk,...lp->...",
                     sol.metric.inverse_entries, bg.curvature, dphi,
                     np.conj(dphi), bg.inverse_entries, bg.inverse_entries,
                     optimize=True).real
    return ScalarField(bg.grid, vals)


def diff_inequality_slack(sol: MASolution, lam: float) -> ScalarField:
    """Pointwise slack of the differential inequality satisfied by H.

    slack = Delta_omega H - [2 e^{-lam phi} Re<grad F, gradbar phi>
            + (lam - 2K) H tr_omega omega0 - lam (n+2) H],
    nonnegative in the continuum for every solved instance.
    """
    bg = sol.problem.bg
    n = bg.grid.complex_dim
    K = bg.K
    H = H_field(sol, lam)
    lhs = laplacian(H, sol.metric)
    phi_t = sol.phi.values - sol.inf_phi
    pairing = hermitian_grad_pairing(sol.problem.F, sol.phi, bg)
    rhs = (np.exp(-lam * phi_t) * pairing.values
           + (lam - 2.0 * K) * H.values * trace_w_w0(sol.metric, bg).values
           - lam * (n + 2.0) * H.values)
    return ScalarField(bg.grid, lhs.values - rhs)


# --- cutoff -----------------------------------------------------------------

def _smoothstep(tau: np.ndarray) -> np.ndarray:
    t = np.clip(tau, 0.0, 1.0)
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


@dataclass(frozen=True)
class CutoffSpec:
    """Localizing function eta in [1 - theta, 1] with certified derivatives.

    theta = min(1/(10 n C0), r^2/(10 n C0)) exactly; eta = 1 inside the
    r/2 ball of the smooth surrogate distance, 1 - theta outside 3r/4,
    extended by that constant to the whole torus.
    """

    x0: tuple
    r: float
    C0: float
    theta: float
    eta: ScalarField
    alpha: float = 2.0
    grad_bound_ratio: float = 0.0   # measured sup / allowed bound
    hess_bound_ratio: float = 0.0


def _eta_derivative_maxima(eta: ScalarField, bg: BackgroundMetric | None):
    grid = eta.grid
    n = grid.complex_dim
    if bg is None:
        deta = holo_gradient(eta)
        grad_sq = np.sum(np.abs(deta) ** 2, axis=-1)
        from .grids import complex_hessian, holo_hessian_plain
        mixed = complex_hessian(eta).entries
        holo = holo_hessian_plain(eta)
        hess_sq = (np.sum(np.abs(holo) ** 2, axis=(-2, -1))
                   + np.sum(np.abs(mixed) ** 2, axis=(-2, -1)))
    else:
        grad_sq = grad_norm_sq(eta, bg).values
        from .grids import complex_hessian
        G0inv = bg.inverse_entries
        holo = covariant_hessian_holo(eta, bg).entries
        mixed = complex_hessian(eta).entries
        hess_sq = (np.einsum("...ji,...lk,...ki,...jl->...", G0inv, G0inv,
                             holo, np.conj(holo), optimize=True).real
                   + np.einsum("...ji,...lk,...kj,...il->...", G0inv, G0inv,
                               mixed, mixed, optimize=True).real)
    return float(np.max(grad_sq)), float(np.sqrt(np.max(hess_sq)))


def build_cutoff(x0, r: float, C0: float, grid: GridSpec,
                 bg: BackgroundMetric | None = None,
                 alpha: float = 2.0) -> CutoffSpec:
    """Construct the localizing eta; C0 doubles until the derivative bounds
    certify on the grid (theta is recomputed from the final C0)."""
    if r > 0.25:
        raise ValueError(f"radius {r} too large: the ball must fit in the "
                         "unit fundamental domain (r <= 0.25)")
    if C0 < 1:
        raise ValueError("C0 must be >= 1")
    x0 = tuple(float(c) for c in x0)
    if len(x0) != grid.real_dim:
        raise ValueError(f"x0 needs {grid.real_dim} coordinates")
    n = grid.complex_dim
    d0sq = smooth_distance_sq(grid.meshes(), x0)
    tau = (d0sq / r ** 2 - 0.25) / 0.3125  # ramp from d0 = r/2 to 3r/4
    ramp = _smoothstep(tau)
    for _ in range(30):
        theta = min(1.0 / (10 * n * C0), r ** 2 / (10 * n * C0))
        eta = ScalarField(grid, 1.0 - theta * ramp)
        grad_max, hess_max = _eta_derivative_maxima(eta, bg)
        grad_ok = grad_max <= C0 * theta ** 2 / r ** 2
        hess_ok = hess_max <= C0 * theta / r ** 2
        if grad_ok and hess_ok:
            return CutoffSpec(
                x0=x0, r=float(r), C0=float(C0), theta=float(theta), eta=eta,
                alpha=float(alpha),
                grad_bound_ratio=grad_max / (C0 * theta ** 2 / r ** 2),
                hess_bound_ratio=hess_max / (C0 * theta / r ** 2))
        C0 *= 2
    raise RuntimeError("cutoff derivative bounds failed to certify for any C0")


# --- ABP chain ---------------------------------------------------------------

@dataclass(frozen=True)
class ABPReport:
    """Measured quantities of the maximum-principle inequality chain."""

    sup_inner: float
    sup_boundary: float
    integral_term: float
    implied_constant: float
    sup_H: float = 0.0
    theta: float = 0.0
    r: float = 0.0
    alpha: float = 2.0
    bootstrap_constant: float = 0.0
    bootstrap_bound: float = 0.0

    def to_record(self) -> dict:
        return {k: float(v) if not isinstance(v, tuple) else v
                for k, v in self.__dict__.items()}


def _sphere_directions(count: int, real_dim: int) -> np.ndarray:
    """Deterministic low-discrepancy directions on the unit sphere."""
    alphas = np.sqrt(np.array([2.0, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0, 19.0]))
    m = np.arange(1, count + 1)[:, None]
    u = np.mod(m * alphas[None, :real_dim], 1.0)
    from scipy.special import erfinv
    gauss = np.sqrt(2.0) * erfinv(2.0 * np.clip(u, 1e-12, 1 - 1e-12) - 1.0)
    return gauss / np.linalg.norm(gauss, axis=1, keepdims=True)


def _boundary_points(x0, r: float, grid: GridSpec, count: int = 256) -> np.ndarray:
    """Points with surrogate distance exactly r from x0, radially sampled."""
    dirs = _sphere_directions(count, grid.real_dim)
    pts = np.empty((count, grid.real_dim))
    x0 = np.asarray(x0)
    for m, e in enumerate(dirs):
        s_cap = 0.5 / np.max(np.abs(e))

        def excess(s):
            return float(smooth_distance_sq(x0 + s * e, x0)) - r ** 2

        s_star = brentq(excess, 0.0, s_cap, xtol=1e-13)
        pts[m] = np.mod(x0 + s_star * e, 1.0)
    return pts


def abp_check(sol: MASolution, cutoff: CutoffSpec, lam: float) -> ABPReport:
    """Evaluate the maximum-principle chain for eta H^alpha on the ball.

    Computes the interior sup, the boundary sup (trigonometric interpolation
    on a 256-direction sampling of the surrogate sphere), the weighted
    L^{2n} integral term, the implied constant making the chain tight, and
    the finite bootstrap bound recorded alongside the measured sup H.
    """
    bg = sol.problem.bg
    grid = bg.grid
    n = grid.complex_dim
    alpha = cutoff.alpha
    H = H_field(sol, lam)
    sup_H = float(np.max(H.values))
    if sup_H == 0.0:
        return ABPReport(0.0, 0.0, 0.0, 0.0, theta=cutoff.theta, r=cutoff.r,
                         alpha=alpha)

    idx = np.unravel_index(int(np.argmax(H.values)), grid.shape)
    xmax = tuple(i / grid.points_per_axis for i in idx)
    if any(abs(a - b) > 0.5 / grid.points_per_axis + 1e-12
           for a, b in zip(xmax, cutoff.x0)):
        raise ValueError(f"cutoff centered at {cutoff.x0} but H attains its "
                         f"max at {xmax}")

    # the interior sup needs the interpolant's max (the grid sample under-
    # estimates it by more than the theta-thin inner/boundary gap)
    x_star, H_star = refine_max(H, start=xmax)
    sup_H = max(sup_H, H_star)

    d0sq = smooth_distance_sq(grid.meshes(), cutoff.x0)
    ball = d0sq < cutoff.r ** 2
    eta_H_alpha = ScalarField(grid, cutoff.eta.values * H.values ** alpha)
    sup_inner = float(np.max(np.where(ball, eta_H_alpha.values, -np.inf)))
    eta_star = float(point_eval(cutoff.eta, np.asarray(x_star)))
    sup_inner = max(sup_inner, eta_star * H_star ** alpha)

    boundary = _boundary_points(cutoff.x0, cutoff.r, grid)
    sup_boundary = float(np.max(point_eval(eta_H_alpha, boundary)))

    phi_t = sol.phi.values - sol.inf_phi
    grad_F = np.sqrt(grad_norm_sq(sol.problem.F, bg).values)
    integrand = (alpha * cutoff.eta.values * H.values ** (alpha - 0.5)
                 * np.exp(-lam * phi_t / 2.0) * grad_F
                 + lam * alpha * (n + 2.0) * H.values ** alpha)
    weight = np.exp(2.0 * sol.problem.F.values) * bg.det_g0.values
    ball_int = integrate(np.where(ball, integrand ** (2 * n), 0.0), weight)
    integral_term = cutoff.r * ball_int ** (1.0 / (2 * n))

    gap = max(0.0, sup_inner - sup_boundary)
    implied = gap / integral_term if integral_term > 0 else 0.0

    # bootstrap: c0 M^alpha <= C r (M^{alpha - 1/2} + M^{alpha(1 - 1/(2n))})
    wgrad_ball = integrate(np.where(ball, grad_F ** (2 * n), 0.0), weight)
    wgrad_ball = wgrad_ball ** (1.0 / (2 * n))
    h_alpha_ball = integrate(np.where(ball, H.values ** alpha, 0.0),
                             bg.det_g0) ** (1.0 / (2 * n))
    sup_F = float(np.max(sol.problem.F.values))
    c_boot = implied * max(alpha * wgrad_ball,
                           lam * alpha * (n + 2.0) * np.exp(sup_F / n)
                           * h_alpha_ball)
    power = max(2.0, 2.0 * n)
    bound = (c_boot * cutoff.r / cutoff.theta) ** power if c_boot > 0 else 0.0

    return ABPReport(sup_inner=sup_inner, sup_boundary=sup_boundary,
                     integral_term=integral_term, implied_constant=implied,
                     sup_H=sup_H, theta=cutoff.theta, r=cutoff.r, alpha=alpha,
                     bootstrap_constant=c_boot, bootstrap_bound=bound)


# --- integral identities -----------------------------------------------------

def _mixed_det(matrices: list) -> np.ndarray:
    """Polarized mixed determinant D(A_1, ..., A_n), real for Hermitian args.

    D(A, ..., A) = det A; for n = 2,
    D(A, B) = (A00 B11 + B00 A11 - A01 B10 - B01 A10) / 2.
    """
    n = len(matrices)
    if n == 1:
        return matrices[0][..., 0, 0].real
    A, B = matrices
    val = (A[..., 0, 0] * B[..., 1, 1] + B[..., 0, 0] * A[..., 1, 1]
           - A[..., 0, 1] * B[..., 1, 0] - B[..., 0, 1] * A[..., 1, 0])
    return 0.5 * val.real


def ibp_identity_residual(sol: MASolution, lam: float) -> float:
    """Closed-torus integration-by-parts identity behind the L^1 bound on H.

    Checks integral (e^{-lam phi} - 1)(omega^n - omega_0^n) against
    lam * integral e^{-lam phi} i dphi ^ dbar phi ^ sum_k omega^{n-1-k}
    omega_0^k, all wedges evaluated as pointwise mixed determinants.
    Returns |LHS - RHS| / (|LHS| + |RHS| + 1).
    """
    bg = sol.problem.bg
    n = bg.grid.complex_dim
    phi_t = sol.phi.values - sol.inf_phi
    e_term = np.exp(-lam * phi_t)
    det_g = sol.metric.det_ratio.values * bg.det_g0.values
    lhs = integrate((e_term - 1.0) * (det_g - bg.det_g0.values))

    dphi = sol.grad_phi
    P = dphi[..., :, None] * np.conj(dphi)[..., None, :]
    total = np.zeros(bg.grid.shape)
    for k in range(n):
        args = [sol.metric.g.entries] * (n - 1 - k) + [bg.g0.entries] * k + [P]
        total += _mixed_det(args)
    rhs = lam * integrate(e_term * total)
    return abs(lhs - rhs) / (abs(lhs) + abs(rhs) + 1.0)


def l1_H_bound(sol: MASolution, lam: float) -> tuple:
    """Measured integral of H against omega_0^n and its closed-case bound.

    The bound assembles the integration-by-parts chain with boundary datum
    zero: n * integral (e^F + 1) omega_0^n / lam, using the exact trace
    identity i dphi ^ dbar phi ^ omega_0^{n-1} = (1/n)|grad phi|^2 omega_0^n.
    """
    bg = sol.problem.bg
    n = bg.grid.complex_dim
    H = H_field(sol, lam)
    value = integrate(H, bg.det_g0)
    bound = n * integrate(np.exp(sol.problem.F.values) + 1.0, bg.det_g0) / lam
    if value > bound:
        raise ValueError(f"L1 bound violated: {value!r} > {bound!r}")
    return value, bound


# --- assembled report --------------------------------------------------------

@dataclass(frozen=True)
class EstimateReport:
    """All controlling quantities of the gradient estimate for one instance.

    bochner_residual_max is the relative max defect of the second-order
    identity; diff_ineq_min_slack is the min slack normalized by
    max |Delta_omega H|.  c_emp = sup H certifies
    |grad phi|^2 <= c_emp e^{lam (phi - inf phi)} pointwise.
    """

    lambda_: float
    K: float
    sup_F: float
    wgrad_F_norm: float
    sup_H: float
    inf_phi: float
    c_emp: float
    bochner_residual_max: float
    diff_ineq_min_slack: float

    def to_record(self) -> dict:
        rec = {k: float(v) for k, v in self.__dict__.items()}
        rec["lambda"] = rec.pop("lambda_")
        return rec


def estimate_report(sol: MASolution) -> EstimateReport:
    """Assemble the Theorem-level quantities and re-check the pointwise
    certificate |grad phi|^2 <= c_emp e^{lam (phi - inf phi)}."""
    bg = sol.problem.bg
    n = bg.grid.complex_dim
    K = bg.K
    lam = lambda_of(K)
    F = sol.problem.F
    sup_F = float(np.max(F.values))
    grad_F = np.sqrt(grad_norm_sq(F, bg).values)
    weight = np.exp(2.0 * F.values) * bg.det_g0.values
    wgrad = lp_norm(grad_F, 2 * n, weight)

    H = H_field(sol, lam)
    sup_H = float(np.max(H.values))
    c_emp = sup_H

    res_rel = bochner_relative_residual(sol)
    slack = diff_inequality_slack(sol, lam)
    lap_H = laplacian(H, sol.metric)
    scale = float(np.max(np.abs(lap_H.values)))
    slack_min = float(np.min(slack.values)) / scale if scale > 0 else 0.0

    phi_t = sol.phi.values - sol.inf_phi
    gn = grad_norm_sq(sol.phi, bg).values
    certificate = c_emp * np.exp(lam * phi_t) - gn
    if float(np.min(certificate)) < -1e-12 * max(1.0, c_emp):
        raise ValueError("pointwise gradient certificate violated")

    return EstimateReport(lambda_=lam, K=K, sup_F=sup_F, wgrad_F_norm=wgrad,
                          sup_H=sup_H, inf_phi=sol.inf_phi, c_emp=c_emp,
                          bochner_residual_max=res_rel,
                          diff_ineq_min_slack=slack_min)
