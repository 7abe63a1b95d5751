"""Solvers for (omega_0 + i ddbar phi)^n = e^F omega_0^n on the closed torus.

n = 1 on a flat background is linear in phi and solved exactly in Fourier
space; the general case runs a damped inexact Newton iteration with
continuation in the density and a flat-Laplacian spectral preconditioner.
The solving gauge is the mean-zero one (integral of phi against omega_0^n
vanishes); estimate-side quantities renormalize to inf phi = 0 downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from .grids import GridSpec, ScalarField, _dz_multiplier, complex_hessian, holo_gradient, integrate
from .geometry import (BackgroundMetric, MetricField, _hermitian_inv_det,
                       _hermitian_mineig, metric_of_potential,
                       min_eigen_of_potential)

__all__ = [
    "MAProblem",
    "MASolution",
    "SolverError",
    "PositivityLoss",
    "MaxIterations",
    "LinearSolveStagnation",
    "normalize_density",
    "solve_linear_n1",
    "solve_newton",
    "manufactured",
]

_POSITIVITY_FLOOR = 1e-8


class SolverError(RuntimeError):
    """Base solver failure; carries the iterate diagnostics collected so far."""

    def __init__(self, message: str, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


class PositivityLoss(SolverError):
    """Line search could not keep omega positive (floor 1e-8 reached)."""


class MaxIterations(SolverError):
    """Newton iteration budget exhausted without meeting the tolerance."""


class LinearSolveStagnation(SolverError):
    """The inner preconditioned solve made no usable progress."""


def normalize_density(F_raw: ScalarField, bg: BackgroundMetric) -> ScalarField:
    """Shift F by a constant so that integral(e^F omega_0^n) = vol(omega_0^n)."""
    vol = integrate(1.0 + 0.0 * bg.det_g0.values, bg.det_g0)
    mass = integrate(np.exp(F_raw.values), bg.det_g0)
    return F_raw.shifted(float(np.log(vol / mass)))


@dataclass
class MAProblem:
    """A Monge-Ampere instance: background, compatible density, solver knobs."""

    bg: BackgroundMetric
    F: ScalarField
    newton_tol: float = 1e-10
    max_newton_iters: int = 50
    continuation_steps: int = 8

    def __post_init__(self):
        if self.F.grid != self.bg.grid:
            raise ValueError("density sampled on a different grid")
        vol = integrate(np.ones(self.bg.grid.shape), self.bg.det_g0)
        mass = integrate(np.exp(self.F.values), self.bg.det_g0)
        if abs(mass - vol) > 1e-12 * vol:
            raise ValueError(
                f"incompatible density: integral e^F omega_0^n = {mass!r} but "
                f"vol = {vol!r}; call normalize_density first")

    @property
    def grid(self) -> GridSpec:
        return self.bg.grid


@dataclass
class MASolution:
    """Solved instance: mean-zero potential, residual and iterate log."""

    problem: MAProblem
    phi: ScalarField
    residual_sup: float
    iterations: int
    min_eigen_omega: float
    inf_phi: float
    log: list = field(default_factory=list)

    @cached_property
    def metric(self) -> MetricField:
        return metric_of_potential(self.problem.bg, self.phi)

    @cached_property
    def grad_phi(self) -> np.ndarray:
        return holo_gradient(self.phi)

    @cached_property
    def hess_phi(self) -> np.ndarray:
        return complex_hessian(self.phi).entries

    @property
    def phi_normalized(self) -> ScalarField:
        """phi - inf phi, the normalization used by all estimate quantities."""
        return self.phi.shifted(-self.inf_phi)


def _logdet_ratio(bg: BackgroundMetric, phi_vals: np.ndarray) -> np.ndarray:
    grid = bg.grid
    G = bg.g0.entries + complex_hessian(ScalarField(grid, phi_vals)).entries
    if np.min(_hermitian_mineig(G, grid.complex_dim)) <= 0.0:
        raise FloatingPointError("nonpositive candidate metric")
    _, det = _hermitian_inv_det(G, grid.complex_dim)
    return np.log(det / bg.det_g0.values)


def solve_linear_n1(problem: MAProblem) -> MASolution:
    """Exact Fourier solve of 1 + phi_{z zbar} = e^F (n = 1, flat background)."""
    bg = problem.bg
    grid = problem.grid
    if grid.complex_dim != 1 or not bg.is_flat:
        raise ValueError("solve_linear_n1 requires n = 1 on a flat background")
    rhs = np.exp(problem.F.values) - 1.0
    mean = abs(float(np.mean(rhs)))
    if mean > 1e-12 * max(1.0, float(np.max(np.abs(rhs)))):
        raise ValueError(f"e^F - 1 is not mean-zero (got {mean:.3e}); "
                         "density normalization bug")
    mz = _dz_multiplier(grid, 0, conjugate=False)
    mzb = _dz_multiplier(grid, 0, conjugate=True)
    symbol = mz * mzb  # d/dz d/dzbar, Nyquist already zeroed
    hat = np.fft.fftn(rhs)
    with np.errstate(divide="ignore", invalid="ignore"):
        phi_hat = np.where(np.abs(symbol) > 0, hat / symbol, 0.0)
    phi_vals = np.real(np.fft.ifftn(phi_hat))
    phi_vals -= np.mean(phi_vals)
    phi = ScalarField(grid, phi_vals)
    m = metric_of_potential(bg, phi)
    residual = float(np.max(np.abs(np.log(m.det_ratio.values) - problem.F.values)))
    mineig = float(np.min(_hermitian_mineig(m.g.entries, 1)))
    record = {"s": 1.0, "iter": 1, "residual_sup": residual,
              "step_length": 1.0, "min_eigen_omega": mineig}
    return MASolution(problem=problem, phi=phi, residual_sup=residual,
                      iterations=1, min_eigen_omega=mineig,
                      inf_phi=float(np.min(phi_vals)), log=[record])


def _flat_inverse_laplacian(grid: GridSpec, scale: float):
    """Spectral inverse of the constant-coefficient metric Laplacian."""
    symbol = np.zeros(grid.shape)
    for j in range(grid.complex_dim):
        mz = _dz_multiplier(grid, j, conjugate=False)
        mzb = _dz_multiplier(grid, j, conjugate=True)
        symbol = symbol + (mz * mzb).real
    symbol = symbol * scale

    def apply(vec):
        hat = np.fft.fftn(vec.reshape(grid.shape))
        with np.errstate(divide="ignore", invalid="ignore"):
            hat = np.where(np.abs(symbol) > 0, hat / symbol, 0.0)
        return np.real(np.fft.ifftn(hat)).ravel()

    return apply


def _metric_laplacian_apply(grid: GridSpec, Ginv: np.ndarray):
    """Delta_omega as a callable on flattened real vectors, mean projected."""
    n = grid.complex_dim
    multipliers = {}
    for i in range(n):
        mi = _dz_multiplier(grid, i, conjugate=False)
        for j in range(i, n):
            multipliers[(i, j)] = mi * _dz_multiplier(grid, j, conjugate=True)

    def apply(vec):
        v = vec.reshape(grid.shape)
        hat = np.fft.fftn(v)
        out = np.zeros(grid.shape)
        for i in range(n):
            for j in range(i, n):
                h_ij = np.fft.ifftn(hat * multipliers[(i, j)])
                if i == j:
                    out += (Ginv[..., i, i].real * h_ij.real
                            - Ginv[..., i, i].imag * h_ij.imag)
                else:
                    out += 2.0 * (Ginv[..., j, i] * h_ij).real
        out -= np.mean(out)
        return out.ravel()

    return apply


def solve_newton(problem: MAProblem, initial: ScalarField | None = None) -> MASolution:
    """Damped inexact Newton with continuation in the density.

    Mild densities (oscillation <= 1.5) are attempted in a single stage;
    otherwise `continuation_steps` uniform stages are used, and any solver
    failure doubles the stage count (capped) and restarts from zero.
    """
    osc = float(np.max(problem.F.values) - np.min(problem.F.values))
    stages = 1 if osc <= 1.5 else max(1, problem.continuation_steps)
    cap = 4 * max(8, problem.continuation_steps)
    last_error = None
    while stages <= cap:
        try:
            return _solve_with_schedule(problem, stages, initial)
        except SolverError as err:
            last_error = err
            stages *= 2
            initial = None
    raise last_error


def _solve_with_schedule(problem: MAProblem, stages: int,
                         initial: ScalarField | None) -> MASolution:
    bg = problem.bg
    grid = problem.grid
    npts = grid.num_points
    vol = integrate(np.ones(grid.shape), bg.det_g0)

    phi_vals = np.zeros(grid.shape) if initial is None else initial.values.copy()
    phi_vals = phi_vals - np.mean(phi_vals)
    records = []
    total_iters = 0

    for stage in range(1, stages + 1):
        s = stage / stages
        F_s = normalize_density(ScalarField(grid, s * problem.F.values), bg).values

        for it in range(problem.max_newton_iters + 1):
            metric = metric_of_potential(bg, ScalarField(grid, phi_vals))
            G = np.log(metric.det_ratio.values) - F_s
            res = float(np.max(np.abs(G)))
            mineig_old = float(np.min(_hermitian_mineig(metric.g.entries,
                                                        grid.complex_dim)))
            if res <= problem.newton_tol:
                break
            if it == problem.max_newton_iters:
                raise MaxIterations(
                    f"stage s={s:g}: residual {res:.3e} after "
                    f"{problem.max_newton_iters} Newton iterations", records)

            rhs = -(G - np.mean(G))
            scale = float(np.mean(np.einsum("...ii->...", metric.inverse_entries).real)
                          / grid.complex_dim)
            apply_lap = _metric_laplacian_apply(grid, metric.inverse_entries)
            op = LinearOperator((npts, npts), matvec=apply_lap, dtype=np.float64)
            precond = LinearOperator(
                (npts, npts), matvec=_flat_inverse_laplacian(grid, scale),
                dtype=np.float64)
            b = rhs.ravel()
            delta, info = gmres(op, b, rtol=1e-3, atol=0.0, restart=40,
                                maxiter=5, M=precond)
            if info != 0:
                achieved = np.linalg.norm(apply_lap(delta) - b) / np.linalg.norm(b)
                if achieved > 0.9:
                    raise LinearSolveStagnation(
                        f"stage s={s:g}: inner solve stalled "
                        f"(relative residual {achieved:.3e})", records)
            delta = delta.reshape(grid.shape)
            delta -= np.mean(delta)

            t = 1.0
            accepted = False
            positivity_only = True
            while t >= 2.0 ** -24:
                cand = phi_vals + t * delta
                me = min_eigen_of_potential(bg, ScalarField(grid, cand))
                if me >= max(0.5 * mineig_old, _POSITIVITY_FLOOR):
                    positivity_only = False
                    res_new = float(np.max(np.abs(_logdet_ratio(bg, cand) - F_s)))
                    if res_new <= (1.0 - 1e-4 * t) * res:
                        phi_vals = cand - np.mean(cand)
                        total_iters += 1
                        records.append({"s": s, "iter": total_iters,
                                        "residual_sup": res_new,
                                        "step_length": t,
                                        "min_eigen_omega": me})
                        accepted = True
                        break
                t *= 0.5
            if not accepted:
                if positivity_only:
                    raise PositivityLoss(
                        f"stage s={s:g}: no step keeps omega positive above "
                        f"the 1e-8 floor (min eigen {mineig_old:.3e})", records)
                raise LinearSolveStagnation(
                    f"stage s={s:g}: residual {res:.3e} not reducible along "
                    "the Newton direction", records)

    # exact mean-zero gauge against the omega_0^n volume
    phi_vals = phi_vals - integrate(phi_vals, bg.det_g0) / vol
    phi = ScalarField(grid, phi_vals)
    metric = metric_of_potential(bg, phi)
    residual = float(np.max(np.abs(np.log(metric.det_ratio.values)
                                   - problem.F.values)))
    mineig = float(np.min(_hermitian_mineig(metric.g.entries, grid.complex_dim)))
    if not records:
        records.append({"s": 1.0, "iter": 0, "residual_sup": residual,
                        "step_length": 0.0, "min_eigen_omega": mineig})
    sol = MASolution(problem=problem, phi=phi, residual_sup=residual,
                     iterations=max(total_iters, 1), min_eigen_omega=mineig,
                     inf_phi=float(np.min(phi_vals)), log=records)
    sol.__dict__["metric"] = metric
    return sol


def manufactured(bg: BackgroundMetric, phi_star: ScalarField) -> MAProblem:
    """Build the problem whose exact solution is (mean-zero gauged) phi_star."""
    shift = integrate(phi_star.values, bg.det_g0) / integrate(
        np.ones(bg.grid.shape), bg.det_g0)
    phi0 = phi_star.shifted(-shift)
    m = metric_of_potential(bg, phi0)  # raises on positivity failure
    F = ScalarField(bg.grid, np.log(m.det_ratio.values))
    return MAProblem(bg=bg, F=normalize_density(F, bg))
