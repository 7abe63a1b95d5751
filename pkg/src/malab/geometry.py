"""Background metrics on the torus, curvature, and metric contractions.

Index conventions: a Hermitian matrix field G stores G[..., i, j] = g_{i jbar}.
The raised metric g^{i jbar} (as used in traces like tr_omega omega0 =
g^{i jbar} g0_{i jbar}) equals Ginv[..., j, i] where Ginv is the plain matrix
inverse, so every contraction below is an einsum against Ginv with the two
matrix indices swapped.

The curvature tensor of a background g0 is stored as R[..., i, j, k, l]
meaning R_{i jbar k lbar} = -d_k d_lbar g0_{i jbar}
+ g0^{p qbar} (d_k g0_{i qbar})(d_lbar g0_{p jbar}); with this sign the
Fubini-Study-like positively curved examples give positive diagonal values
and the flat torus gives zero.  K >= 0 always denotes the clamped lower
bisectional bound: R(xi, xibar, zeta, zetabar) >= -K |xi|^2 |zeta|^2.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .grids import (
    ComplexMatrixField,
    GridSpec,
    ScalarField,
    _dz_multiplier,
    complex_hessian,
    holo_gradient,
    holo_hessian_plain,
)

__all__ = [
    "BackgroundMetric",
    "MetricField",
    "MetricPositivityError",
    "make_flat_background",
    "make_perturbed_background",
    "bisectional_lower_bound",
    "bisectional_pointwise_min",
    "metric_of_potential",
    "min_eigen_of_potential",
    "trace_w_w0",
    "grad_norm_sq",
    "hermitian_grad_pairing",
    "laplacian",
    "covariant_hessian_holo",
]


class MetricPositivityError(ValueError):
    """A (candidate) metric failed pointwise positive definiteness."""

    def __init__(self, message: str, point=None, eigenvalue=None):
        super().__init__(message)
        self.point = point
        self.eigenvalue = eigenvalue


@dataclass(frozen=True)
class BackgroundMetric:
    """Kahler background g0 on the torus with curvature data.

    christoffel has layout [..., p, k, i] = Gamma^p_{ki}; curvature has
    layout [..., i, j, k, l] = R_{i jbar k lbar}.  Both are None for the
    flat background (identically zero).
    """

    grid: GridSpec
    g0: ComplexMatrixField
    inverse_g0: ComplexMatrixField
    christoffel: np.ndarray | None
    curvature: np.ndarray | None
    K: float
    det_g0: ScalarField

    @property
    def is_flat(self) -> bool:
        return self.christoffel is None

    @property
    def inverse_entries(self) -> np.ndarray:
        return self.inverse_g0.entries


@dataclass(frozen=True)
class MetricField:
    """Solution metric g = g0 + complex_hessian(phi), positive definite."""

    grid: GridSpec
    g: ComplexMatrixField
    inverse_g: ComplexMatrixField
    det_ratio: ScalarField

    @property
    def inverse_entries(self) -> np.ndarray:
        return self.inverse_g.entries


def _hermitian_mineig(G: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return G[..., 0, 0].real
    a = G[..., 0, 0].real
    d = G[..., 1, 1].real
    b = G[..., 0, 1]
    half = 0.5 * (a - d)
    disc = np.sqrt(half * half + np.abs(b) ** 2)
    return 0.5 * (a + d) - disc


def _hermitian_inv_det(G: np.ndarray, n: int):
    """Pointwise inverse and (real) determinant of a Hermitian matrix field."""
    if n == 1:
        det = G[..., 0, 0].real
        inv = np.empty_like(G)
        inv[..., 0, 0] = 1.0 / det
        return inv, det
    a = G[..., 0, 0]
    b = G[..., 0, 1]
    c = G[..., 1, 0]
    d = G[..., 1, 1]
    det = (a * d - b * c).real
    inv = np.empty_like(G)
    inv[..., 0, 0] = d / det
    inv[..., 0, 1] = -b / det
    inv[..., 1, 0] = -c / det
    inv[..., 1, 1] = a / det
    return inv, det


def _worst_point(grid: GridSpec, mineig: np.ndarray):
    flat = int(np.argmin(mineig))
    idx = np.unravel_index(flat, grid.shape)
    coords = tuple(i / grid.points_per_axis for i in idx)
    return coords, float(mineig[idx])


def _identity_matrix_field(grid: GridSpec) -> np.ndarray:
    n = grid.complex_dim
    ent = np.zeros(grid.shape + (n, n), dtype=np.complex128)
    for i in range(n):
        ent[..., i, i] = 1.0
    return ent


def make_flat_background(grid: GridSpec) -> BackgroundMetric:
    """Flat torus: g0 = identity, curvature 0, K = 0."""
    ident = _identity_matrix_field(grid)
    return BackgroundMetric(
        grid=grid,
        g0=ComplexMatrixField(grid, ident),
        inverse_g0=ComplexMatrixField(grid, ident),
        christoffel=None,
        curvature=None,
        K=0.0,
        det_g0=ScalarField.constant(grid, 1.0),
    )


def make_perturbed_background(grid: GridSpec, psi: ScalarField) -> BackgroundMetric:
    """Background g0 = identity + complex_hessian(psi), with curvature.

    Requires min eigenvalue of g0 >= 0.1 everywhere.  Christoffels are
    Gamma^p_{ki} = g0^{p qbar} d_k g0_{i qbar} and the curvature follows the
    module-level sign convention; K is the clamped bisectional lower bound.
    """
    if psi.grid != grid:
        raise ValueError("psi is sampled on a different grid")
    n = grid.complex_dim
    G0 = _identity_matrix_field(grid) + complex_hessian(psi).entries
    mineig = _hermitian_mineig(G0, n)
    if np.min(mineig) < 0.1:
        coords, ev = _worst_point(grid, mineig)
        raise MetricPositivityError(
            f"perturbed background not positive enough: min eigenvalue {ev:.6g} "
            f"at grid point {coords}", point=coords, eigenvalue=ev)
    inv, det = _hermitian_inv_det(G0, n)

    # third derivatives of psi: T[..., k, i, q] = d_k g0_{i qbar}
    psi_hat = np.fft.fftn(psi.values)
    mz = [_dz_multiplier(grid, a, conjugate=False) for a in range(n)]
    mzb = [_dz_multiplier(grid, a, conjugate=True) for a in range(n)]
    T = np.empty(grid.shape + (n, n, n), dtype=np.complex128)
    for k in range(n):
        for i in range(k, n):
            for q in range(n):
                ent = np.fft.ifftn(psi_hat * (mz[k] * mz[i] * mzb[q]))
                T[..., k, i, q] = ent
                if i != k:
                    T[..., i, k, q] = ent
    christoffel = np.einsum("...qp,...kiq->...pki", inv, T, optimize=True)

    curv = np.empty(grid.shape + (n, n, n, n), dtype=np.complex128)
    for i in range(n):
        for j in range(n):
            for k in range(n):
                for el in range(n):
                    d4 = np.fft.ifftn(psi_hat * (mz[i] * mzb[j] * mz[k] * mzb[el]))
                    curv[..., i, j, k, el] = -d4
    curv += np.einsum("...qp,...kiq,...ljp->...ijkl", inv, T, np.conj(T),
                      optimize=True)
    del T, psi_hat

    bg = BackgroundMetric(
        grid=grid,
        g0=ComplexMatrixField(grid, G0),
        inverse_g0=ComplexMatrixField(grid, inv),
        christoffel=christoffel,
        curvature=curv,
        K=0.0,
        det_g0=ScalarField(grid, det),
    )
    return replace(bg, K=bisectional_lower_bound(bg))


# --- bisectional curvature bound ------------------------------------------

_WEYL_ALPHAS = np.sqrt(np.array([2.0, 3.0, 5.0, 7.0, 11.0, 13.0]))


def _pair_set(count: int) -> tuple:
    """Deterministic low-discrepancy unit-vector pairs (xi, zeta) in C^2."""
    m = np.arange(1, count + 1)[:, None]
    u = np.mod(m * _WEYL_ALPHAS[None, :], 1.0)

    def sphere(u0, u1, u2):
        theta = np.arcsin(np.sqrt(u0))
        return np.stack([np.cos(theta) * np.exp(2j * np.pi * u1),
                         np.sin(theta) * np.exp(2j * np.pi * u2)], axis=-1)

    return sphere(u[:, 0], u[:, 1], u[:, 2]), sphere(u[:, 3], u[:, 4], u[:, 5])


def _zeta_set(count: int) -> np.ndarray:
    """Deterministic low-discrepancy unit zeta directions in C^2."""
    m = np.arange(1, count + 1)[:, None]
    u = np.mod(m * _WEYL_ALPHAS[None, :3], 1.0)
    theta = np.arcsin(np.sqrt(u[:, 0]))
    return np.stack([np.cos(theta) * np.exp(2j * np.pi * u[:, 1]),
                     np.sin(theta) * np.exp(2j * np.pi * u[:, 2])], axis=-1)


def _min_over_xi(framed_flat: np.ndarray, W_zeta: np.ndarray) -> tuple:
    """Exact min over unit xi of the framed form, per point and zeta sample.

    framed_flat: (c, n^4) framed curvature; W_zeta: (n_zeta*n*n, n^4)-style
    weight built so a matmul yields M(zeta)[i,j] per point and sample.
    Returns (per-point min over samples, argmin sample index).
    For the quadratic form sum M[i,j] xi_i conj(xi_j) the matrix in the
    xi^dag A xi sense is conj(M); its eigenvalues equal those of M.
    """
    c = framed_flat.shape[0]
    n_zeta = W_zeta.shape[0] // 4
    M = (framed_flat @ W_zeta.T).reshape(c, n_zeta, 2, 2)
    a = M[..., 0, 0].real
    d = M[..., 1, 1].real
    b = M[..., 0, 1]
    half = 0.5 * (a - d)
    lam_min = 0.5 * (a + d) - np.sqrt(half * half + np.abs(b) ** 2)
    arg = np.argmin(lam_min, axis=1)
    return lam_min[np.arange(c), arg], arg


def _frame_transform(G0_chunk: np.ndarray) -> np.ndarray:
    """Frame map A making the geometric pairing orthonormal.

    The norm of a (1,0)-vector is sum_ij G[i,j] v_i conj(v_j), i.e.
    v^dag conj(G) v, so A must satisfy A^dag conj(G) A = I; with
    L = cholesky(G) that is A = inv(L^T) (no conjugate).
    """
    L = np.linalg.cholesky(G0_chunk)
    return np.linalg.inv(np.swapaxes(L, -1, -2))


def _framed_curvature(curv_chunk: np.ndarray, A: np.ndarray) -> np.ndarray:
    return np.einsum("...ijkl,...ia,...jb,...kc,...ld->...abcd",
                     curv_chunk, A, np.conj(A), A, np.conj(A), optimize=True)


def _min_eigvec_2x2(Q: np.ndarray) -> np.ndarray:
    """Closed-form unit eigenvector of the smallest eigenvalue, Q Hermitian 2x2."""
    a = Q[..., 0, 0].real
    d = Q[..., 1, 1].real
    b = Q[..., 0, 1]
    half = 0.5 * (a - d)
    lam = 0.5 * (a + d) - np.sqrt(half * half + np.abs(b) ** 2)
    v = np.stack([b, lam - a], axis=-1)
    nrm = np.linalg.norm(v, axis=-1)
    degenerate = nrm < 1e-14 * (np.abs(a) + np.abs(d) + 1e-300)
    fallback = np.where(a[..., None] <= d[..., None],
                        np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    v = np.where(degenerate[..., None], fallback, v / np.maximum(nrm, 1e-300)[..., None])
    return v


def _alternating_min(R_framed: np.ndarray, xi0: np.ndarray, zeta0: np.ndarray,
                     sweeps: int = 10):
    """Exact alternating eigen-minimization of the bisectional form.

    R_framed: (m, n, n, n, n) in an orthonormal frame; xi0/zeta0 (m, n)
    starting directions.  Returns the per-point minimized values.
    """
    xi, zeta = xi0, zeta0
    for _ in range(sweeps):
        # B = sum M[i,j] xi_i conj(xi_j) = xi^dag conj(M) xi, so minimize
        # over the conjugated (still Hermitian) matrix.
        M = np.einsum("mijkl,mk,ml->mij", R_framed, zeta, np.conj(zeta),
                      optimize=True)
        xi = _min_eigvec_2x2(np.conj(0.5 * (M + np.conj(np.swapaxes(M, -1, -2)))))
        M = np.einsum("mijkl,mi,mj->mkl", R_framed, xi, np.conj(xi),
                      optimize=True)
        zeta = _min_eigvec_2x2(np.conj(0.5 * (M + np.conj(np.swapaxes(M, -1, -2)))))
    return np.einsum("mijkl,mi,mj,mk,ml->m", R_framed, xi, np.conj(xi),
                     zeta, np.conj(zeta), optimize=True).real


def _zeta_weights(n_zeta: int) -> tuple:
    zeta = _zeta_set(n_zeta)
    # W rows such that framed_flat @ W.T gives M(zeta)[i,j] = R[i,j,k,l] z_k z_l^bar
    W = np.einsum("mk,ml->mkl", zeta, np.conj(zeta))  # (m, 2, 2) over (k,l)
    full = np.zeros((n_zeta, 2, 2, 2, 2, 2, 2), dtype=np.complex128)
    for i in range(2):
        for j in range(2):
            full[:, i, j, i, j, :, :] = W
    return zeta, full.reshape(n_zeta * 4, 16)


def _refine_from_zeta(framed: np.ndarray, zeta0: np.ndarray) -> np.ndarray:
    M = np.einsum("mijkl,mk,ml->mij", framed, zeta0, np.conj(zeta0), optimize=True)
    xi = _min_eigvec_2x2(np.conj(0.5 * (M + np.conj(np.swapaxes(M, -1, -2)))))
    return _alternating_min(framed, xi, zeta0)


def bisectional_pointwise_min(bg: BackgroundMetric, flat_indices: np.ndarray,
                              n_zeta: int = 512, refine: bool = True) -> np.ndarray:
    """Estimated pointwise min of R(xi,xibar,zeta,zetabar)/(|xi|^2 |zeta|^2).

    Works in a g0-orthonormal frame; for each zeta of a deterministic
    low-discrepancy direction set the minimization over xi is an exact 2x2
    eigenvalue, and an alternating eigen-minimization polishes the best
    sample.  n = 1 is the exact pointwise scalar.
    """
    if bg.curvature is None:
        return np.zeros(len(flat_indices))
    n = bg.grid.complex_dim
    if n == 1:
        R = bg.curvature.reshape(-1)[flat_indices]
        g = bg.g0.entries.reshape(-1)[flat_indices]
        return (R / g ** 2).real
    zeta, W = _zeta_weights(n_zeta)
    curv = bg.curvature.reshape(-1, n, n, n, n)[flat_indices]
    G0 = bg.g0.entries.reshape(-1, n, n)[flat_indices]
    A = _frame_transform(G0)
    framed = _framed_curvature(curv, A)
    best, arg = _min_over_xi(framed.reshape(len(flat_indices), -1), W)
    if not refine:
        return best
    refined = _refine_from_zeta(framed, zeta[arg])
    return np.minimum(best, refined)


def bisectional_lower_bound(bg: BackgroundMetric, n_zeta: int = 128,
                            refine_fraction: float = 1 / 64) -> float:
    """Clamped lower bisectional bound K >= 0 over the whole grid.

    n = 1 reduces to the exact pointwise scalar R/g0^2.  For n = 2 a coarse
    xi-exact pass over the deterministic zeta set ranks the grid points and
    an alternating eigen-minimization polishes the worst fraction.
    """
    if bg.curvature is None:
        return 0.0
    grid = bg.grid
    n = grid.complex_dim
    if n == 1:
        vals = (bg.curvature[..., 0, 0, 0, 0] / bg.g0.entries[..., 0, 0] ** 2).real
        return max(0.0, -float(np.min(vals)))
    zeta, W = _zeta_weights(n_zeta)
    npts = grid.num_points
    curv_flat = bg.curvature.reshape(npts, -1)
    G0_flat = bg.g0.entries.reshape(npts, n, n)
    min_b = np.empty(npts)
    chunk = 1 << 15
    for lo in range(0, npts, chunk):
        hi = min(lo + chunk, npts)
        A = _frame_transform(G0_flat[lo:hi])
        framed = _framed_curvature(curv_flat[lo:hi].reshape(-1, n, n, n, n), A)
        min_b[lo:hi], _ = _min_over_xi(framed.reshape(hi - lo, -1), W)
    refine_count = min(npts, max(1024, int(npts * refine_fraction)))
    worst = np.argpartition(min_b, refine_count - 1)[:refine_count]
    refined = bisectional_pointwise_min(bg, worst, n_zeta=n_zeta, refine=True)
    overall = min(float(np.min(min_b)), float(np.min(refined)))
    return max(0.0, -overall)


# --- solution metrics -------------------------------------------------------

def metric_of_potential(bg: BackgroundMetric, phi: ScalarField) -> MetricField:
    """Assemble g = g0 + complex_hessian(phi), verifying positivity."""
    if phi.grid != bg.grid:
        raise ValueError("phi is sampled on a different grid")
    n = bg.grid.complex_dim
    G = bg.g0.entries + complex_hessian(phi).entries
    mineig = _hermitian_mineig(G, n)
    worst = float(np.min(mineig))
    if worst <= 0.0:
        coords, ev = _worst_point(bg.grid, mineig)
        raise MetricPositivityError(
            f"omega_0 + i ddbar phi not positive: min eigenvalue {ev:.6g} at "
            f"grid point {coords}", point=coords, eigenvalue=ev)
    inv, det = _hermitian_inv_det(G, n)
    det_ratio = det / bg.det_g0.values
    return MetricField(grid=bg.grid, g=ComplexMatrixField(bg.grid, G),
                       inverse_g=ComplexMatrixField(bg.grid, inv),
                       det_ratio=ScalarField(bg.grid, det_ratio))


def min_eigen_of_potential(bg: BackgroundMetric, phi: ScalarField) -> float:
    """Min eigenvalue of g0 + complex_hessian(phi); cheap line-search probe."""
    G = bg.g0.entries + complex_hessian(phi).entries
    return float(np.min(_hermitian_mineig(G, bg.grid.complex_dim)))


def trace_w_w0(m: MetricField, bg: BackgroundMetric) -> ScalarField:
    """tr_omega omega0 = g^{i jbar} g0_{i jbar}, a positive scalar field."""
    vals = np.einsum("...ji,...ij->...", m.inverse_entries, bg.g0.entries,
                     optimize=True).real
    return ScalarField(m.grid, vals)


def grad_norm_sq(u: ScalarField, metric) -> ScalarField:
    """|grad u|^2 = g^{i jbar} u_i u_jbar against the given metric object."""
    du = holo_gradient(u)
    vals = np.einsum("...ji,...i,...j->...", metric.inverse_entries, du,
                     np.conj(du), optimize=True).real
    return ScalarField(u.grid, np.maximum(vals, 0.0))


def hermitian_grad_pairing(u: ScalarField, v: ScalarField, metric) -> ScalarField:
    """2 Re <grad u, gradbar v> = 2 Re(g^{i jbar} u_i v_jbar)."""
    du = holo_gradient(u)
    dv = holo_gradient(v)
    vals = np.einsum("...ji,...i,...j->...", metric.inverse_entries, du,
                     np.conj(dv), optimize=True)
    return ScalarField(u.grid, 2.0 * vals.real)


def laplacian(u: ScalarField, m) -> ScalarField:
    """Metric Laplacian g^{i jbar} u_{i jbar} (pass a MetricField, or a
    BackgroundMetric for the omega_0 Laplacian)."""
    hess = complex_hessian(u)
    vals = np.einsum("...ji,...ij->...", m.inverse_entries, hess.entries,
                     optimize=True).real
    return ScalarField(u.grid, vals)


def covariant_hessian_holo(u: ScalarField, bg: BackgroundMetric) -> ComplexMatrixField:
    """Covariant holomorphic Hessian u_{ki} = d_k d_i u - Gamma^p_{ki} u_p."""
    out = holo_hessian_plain(u)
    if bg.christoffel is not None:
        du = holo_gradient(u)
        out = out - np.einsum("...pki,...p->...ki", bg.christoffel, du,
                              optimize=True)
    return ComplexMatrixField(u.grid, out)
