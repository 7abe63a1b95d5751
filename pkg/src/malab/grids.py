"""Uniform periodic grids on the torus C^n/Z^{2n} with FFT-spectral calculus.

Conventions used throughout the package:

* complex coordinates z^j = x^j + i y^j, real axes ordered
  (x^1, y^1, ..., x^n, y^n); array axis 2j samples x^{j+1}, axis 2j+1
  samples y^{j+1};
* Wirtinger derivatives d/dz = (d/dx - i d/dy)/2 and
  d/dzbar = (d/dx + i d/dy)/2, so for the flat metric the complex
  Laplacian sum_j u_{z^j zbar^j} equals a quarter of the Euclidean one;
* the volume of a density w is mean(u*w) over the grid, i.e. the
  combinatorial n! wedge factor and the 2^n Lebesgue factor are dropped
  uniformly (every identity checked here is homogeneous in them);
* derivatives are discrete Fourier multipliers with the Nyquist mode
  zeroed (N is required to be even).
"""

from __future__ import annotations

import functools
import os
from dataclasses import dataclass

import numpy as np

__all__ = [
    "GridSpec",
    "ScalarField",
    "ComplexMatrixField",
    "GridMismatchError",
    "partial_z",
    "partial_zbar",
    "complex_hessian",
    "integrate",
    "lp_norm",
    "point_eval",
    "smooth_distance_sq",
    "save_field",
    "load_field",
]


class GridMismatchError(ValueError):
    """Raised when two fields on different grids are combined."""


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid on the torus C^n/Z^{2n} with N points per real axis."""

    complex_dim: int
    points_per_axis: int

    def __post_init__(self):
        if self.complex_dim not in (1, 2):
            raise ValueError(f"complex_dim must be 1 or 2, got {self.complex_dim}")
        n_pts = self.points_per_axis
        if n_pts < 8 or n_pts % 2 != 0:
            raise ValueError(f"points_per_axis must be even and >= 8, got {n_pts}")

    @property
    def real_dim(self) -> int:
        return 2 * self.complex_dim

    @property
    def shape(self) -> tuple:
        return (self.points_per_axis,) * self.real_dim

    @property
    def num_points(self) -> int:
        return self.points_per_axis ** self.real_dim

    def axis_coordinates(self) -> np.ndarray:
        """Sample coordinates a/N along one real axis."""
        n_pts = self.points_per_axis
        return np.arange(n_pts) / n_pts

    def meshes(self) -> list:
        """Meshgrid arrays (ij indexing), one per real axis."""
        c = self.axis_coordinates()
        return list(np.meshgrid(*([c] * self.real_dim), indexing="ij"))


def _as_values(u) -> np.ndarray:
    return u.values if isinstance(u, ScalarField) else np.asarray(u)


def _same_grid(a, b):
    if isinstance(a, ScalarField) and isinstance(b, ScalarField) and a.grid != b.grid:
        raise GridMismatchError(f"grid mismatch: {a.grid} vs {b.grid}")


@dataclass(frozen=True)
class ScalarField:
    """Real scalar samples on a GridSpec, immutable after construction."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != self.grid.shape:
            raise ValueError(f"values shape {vals.shape} != grid shape {self.grid.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("non-finite samples in ScalarField")
        vals = vals.copy()
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_function(cls, grid: GridSpec, fn) -> "ScalarField":
        """Sample ``fn(*mesh_axes)`` on the grid."""
        return cls(grid, np.asarray(fn(*grid.meshes()), dtype=np.float64))

    @classmethod
    def constant(cls, grid: GridSpec, value: float) -> "ScalarField":
        return cls(grid, np.full(grid.shape, float(value)))

    def shifted(self, c: float) -> "ScalarField":
        return ScalarField(self.grid, self.values + c)


@dataclass(frozen=True)
class ComplexMatrixField:
    """An n-by-n complex matrix at every grid point, immutable."""

    grid: GridSpec
    entries: np.ndarray

    def __post_init__(self):
        n = self.grid.complex_dim
        ent = np.asarray(self.entries, dtype=np.complex128)
        if ent.shape != self.grid.shape + (n, n):
            raise ValueError(f"entries shape {ent.shape} incompatible with grid")
        ent = ent.copy()
        ent.flags.writeable = False
        object.__setattr__(self, "entries", ent)

    def hermitian_defect(self) -> float:
        swapped = np.conj(np.swapaxes(self.entries, -1, -2))
        return float(np.max(np.abs(self.entries - swapped)))


@functools.lru_cache(maxsize=32)
def _wavenumbers(n_pts: int) -> np.ndarray:
    """Integer FFT frequencies with the Nyquist mode zeroed."""
    k = np.fft.fftfreq(n_pts, d=1.0 / n_pts)
    k[n_pts // 2] = 0.0
    k.flags.writeable = False
    return k


@functools.lru_cache(maxsize=16)
def _dz_symbol(n_pts: int, conjugate: bool) -> tuple:
    """1-D multiplier pieces (for x and y axes) of d/dz or d/dzbar."""
    k = _wavenumbers(n_pts)
    # d/dz   -> i*pi*k_x + pi*k_y
    # d/dzbar-> i*pi*k_x - pi*k_y
    sx = 1j * np.pi * k
    sy = (-np.pi if conjugate else np.pi) * k
    sx.flags.writeable = False
    sy.flags.writeable = False
    return sx, sy


def _axis_reshape(vec: np.ndarray, axis: int, ndim: int) -> np.ndarray:
    shape = [1] * ndim
    shape[axis] = vec.size
    return vec.reshape(shape)


def _dz_multiplier(grid: GridSpec, axis: int, conjugate: bool) -> np.ndarray:
    """Broadcastable Fourier multiplier of d/dz^axis (or its conjugate)."""
    sx, sy = _dz_symbol(grid.points_per_axis, conjugate)
    ndim = grid.real_dim
    return _axis_reshape(sx, 2 * axis, ndim) + _axis_reshape(sy, 2 * axis + 1, ndim)


def _spectral_apply(values: np.ndarray, grid: GridSpec, multiplier: np.ndarray,
                    axes: tuple) -> np.ndarray:
    hat = np.fft.fftn(values, axes=axes)
    hat *= multiplier
    return np.fft.ifftn(hat, axes=axes)


def partial_z(u, axis: int, grid: GridSpec | None = None) -> np.ndarray:
    """Spectral Wirtinger derivative d/dz^axis of a (real or complex) field.

    Exact for band-limited inputs; the Nyquist mode is zeroed.  Accepts a
    ScalarField or a raw array (then ``grid`` is required).
    """
    if isinstance(u, ScalarField):
        grid = u.grid
    if grid is None:
        raise ValueError("grid required when passing a raw array")
    if not 0 <= axis < grid.complex_dim:
        raise ValueError(f"axis {axis} out of range for complex_dim {grid.complex_dim}")
    vals = _as_values(u)
    return _spectral_apply(vals, grid, _dz_multiplier(grid, axis, conjugate=False),
                           axes=(2 * axis, 2 * axis + 1))


def partial_zbar(u, axis: int, grid: GridSpec | None = None) -> np.ndarray:
    """Spectral derivative d/dzbar^axis; see partial_z."""
    if isinstance(u, ScalarField):
        grid = u.grid
    if grid is None:
        raise ValueError("grid required when passing a raw array")
    if not 0 <= axis < grid.complex_dim:
        raise ValueError(f"axis {axis} out of range for complex_dim {grid.complex_dim}")
    vals = _as_values(u)
    return _spectral_apply(vals, grid, _dz_multiplier(grid, axis, conjugate=True),
                           axes=(2 * axis, 2 * axis + 1))


def holo_gradient(u) -> np.ndarray:
    """All holomorphic derivatives of a ScalarField, stacked in a trailing axis.

    Returns shape grid.shape + (n,), entry j = du/dz^j.
    """
    grid = u.grid
    return np.stack([partial_z(u, j) for j in range(grid.complex_dim)], axis=-1)


def complex_hessian(u: ScalarField) -> ComplexMatrixField:
    """Mixed complex Hessian u_{i jbar} = d^2 u / dz^i dzbar^j, Hermitian."""
    grid = u.grid
    n = grid.complex_dim
    hat = np.fft.fftn(u.values)
    out = np.empty(grid.shape + (n, n), dtype=np.complex128)
    for i in range(n):
        mi = _dz_multiplier(grid, i, conjugate=False)
        for j in range(i, n):
            mj = _dz_multiplier(grid, j, conjugate=True)
            ent = np.fft.ifftn(hat * (mi * mj))
            out[..., i, j] = ent
            if j != i:
                out[..., j, i] = np.conj(ent)  # real input: Hermitian exactly
    return ComplexMatrixField(grid, out)


def holo_hessian_plain(u: ScalarField) -> np.ndarray:
    """Plain holomorphic second partials d^2 u / dz^k dz^i (no connection)."""
    grid = u.grid
    n = grid.complex_dim
    hat = np.fft.fftn(u.values)
    out = np.empty(grid.shape + (n, n), dtype=np.complex128)
    for k in range(n):
        mk = _dz_multiplier(grid, k, conjugate=False)
        for i in range(k, n):
            mi = _dz_multiplier(grid, i, conjugate=False)
            ent = np.fft.ifftn(hat * (mk * mi))
            out[..., k, i] = ent
            if i != k:
                out[..., i, k] = ent
    return out


def integrate(u, weight=None) -> float:
    """Torus integral of u against a volume density: mean(u * weight).

    Spectrally accurate (trapezoidal on the torus).  ``weight`` is the full
    volume density (e.g. det g0, or exp(2F)*det g0); None means 1.
    """
    vals = _as_values(u)
    if weight is None:
        return float(np.mean(np.real(vals)))
    _same_grid(u, weight)
    w = _as_values(weight)
    if w.shape != vals.shape:
        raise GridMismatchError(f"shape mismatch: {vals.shape} vs {w.shape}")
    return float(np.mean(np.real(vals) * w))


def lp_norm(u, p: float, weight=None) -> float:
    """Weighted L^p norm (integral of |u|^p against weight) ** (1/p)."""
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    if weight is not None:
        w = _as_values(weight)
        if np.min(w) < 0:
            raise ValueError("negative weight in lp_norm")
    vals = np.abs(_as_values(u))
    return float(integrate(vals ** p, weight) ** (1.0 / p))


def point_eval(u: ScalarField, x) -> np.ndarray | float:
    """Trigonometric interpolation of a field at off-grid points.

    ``x`` has shape (2n,) for a single point or (m, 2n) for a batch;
    coordinates are taken mod 1.  Exact at grid points and for
    band-limited fields.
    """
    grid = u.grid
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if pts.shape[1] != grid.real_dim:
        raise ValueError(f"points must have {grid.real_dim} coordinates")
    coeff = np.fft.fftn(u.values) / grid.num_points
    k = _wavenumbers(grid.points_per_axis).copy()
    k[grid.points_per_axis // 2] = -grid.points_per_axis // 2  # plain DFT basis
    out = np.empty(pts.shape[0])
    chunk = 64
    letters = "abcd"[: grid.real_dim]
    spec = ",".join("m" + c for c in letters)
    for lo in range(0, pts.shape[0], chunk):
        sub = pts[lo:lo + chunk]
        phases = [np.exp(2j * np.pi * np.outer(sub[:, a], k)) for a in range(grid.real_dim)]
        vals = np.einsum(letters + "," + spec + "->m", coeff, *phases, optimize=True)
        out[lo:lo + chunk] = np.real(vals)
    if np.ndim(x) == 1:
        return float(out[0])
    return out


def refine_max(u: ScalarField, start=None, levels: int = 4, factor: int = 4,
               half_width: int = 2) -> tuple:
    """Locate the maximum of the trigonometric interpolant of ``u``.

    Starting from the grid argmax (or ``start`` coordinates), evaluates the
    interpolant on successively finer local lattices (spacing shrinks by
    ``factor`` per level).  Returns (coordinates, value); the value is at
    least the starting grid sample.
    """
    grid = u.grid
    if start is None:
        idx = np.unravel_index(int(np.argmax(u.values)), grid.shape)
        start = tuple(i / grid.points_per_axis for i in idx)
        best_val = float(u.values[idx])
    else:
        start = tuple(float(c) for c in start)
        best_val = float(point_eval(u, np.asarray(start)))
    best = np.asarray(start, dtype=np.float64)
    h = 1.0 / grid.points_per_axis
    offsets = np.arange(-half_width, half_width + 1)
    mesh = np.stack([g.ravel() for g in np.meshgrid(
        *([offsets] * grid.real_dim), indexing="ij")], axis=1)
    for level in range(1, levels + 1):
        spacing = h * factor ** (-level)
        pts = np.mod(best[None, :] + spacing * mesh, 1.0)
        vals = point_eval(u, pts)
        k = int(np.argmax(vals))
        if vals[k] > best_val:
            best_val = float(vals[k])
            best = pts[k]
    return tuple(best), best_val


def smooth_distance_sq(x, center) -> np.ndarray:
    """Smooth periodic surrogate of squared distance to ``center``.

    sum over real axes of sin^2(pi (x_a - c_a)) / pi^2: analytic and
    periodic, agrees with the Euclidean square to second order near the
    center.  ``x`` is a list of mesh arrays (or scalars), ``center`` the
    coordinates.
    """
    total = 0.0
    for xa, ca in zip(x, center):
        total = total + np.sin(np.pi * (np.asarray(xa) - ca)) ** 2 / np.pi ** 2
    return total


def save_field(field: ScalarField, directory: str, name: str) -> None:
    """Write a snapshot: raw little-endian float64 plus a text sidecar."""
    os.makedirs(directory, exist_ok=True)
    raw = np.ascontiguousarray(field.values).astype("<f8")
    with open(os.path.join(directory, name + ".f64"), "wb") as fh:
        fh.write(raw.tobytes())
    meta = (f"n={field.grid.complex_dim}\n"
            f"N={field.grid.points_per_axis}\n"
            f"name={name}\n")
    with open(os.path.join(directory, name + ".meta"), "w") as fh:
        fh.write(meta)


def load_field(directory: str, name: str) -> ScalarField:
    """Read a snapshot written by save_field (bit-exact round trip)."""
    meta = {}
    with open(os.path.join(directory, name + ".meta")) as fh:
        for line in fh:
            line = line.strip()
            if line:
                key, _, val = line.partition("=")
                meta[key] = val
    grid = GridSpec(int(meta["n"]), int(meta["N"]))
    with open(os.path.join(directory, name + ".f64"), "rb") as fh:
        raw = fh.read()
    vals = np.frombuffer(raw, dtype="<f8").reshape(grid.shape)
    return ScalarField(grid, vals.astype(np.float64))
