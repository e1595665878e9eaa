"""Fractional Laplacian engines.

Three backends share one normalization:

* ``fraclap_spectral``: Fourier multiplier |xi|^{2s} on a periodic grid.
* ``fraclap_pointwise``: symmetrized singular integral at scattered points.
* ``fraclap_grid``: translation-invariant convolution weights on a uniform grid.

Plus the constant-coefficient solver ``solve_symbol`` and ``decay_bound``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from scipy import fft as sfft
from scipy import special

TAIL_POLICIES = ("zero_extension", "constant_limits", "callable_exterior")
GRID_POLICIES = TAIL_POLICIES + ("periodic",)


def _check_order(s: float) -> None:
    if not np.isfinite(s) or not (0.0 < s < 1.0):
        raise ValueError(f"order s must lie in (0, 1), got {s}")


def normalization_constant(n: int, s: float) -> float:
    """C_{n,s} = 2^{2s} s Gamma(n/2+s) / (Gamma(1-s) pi^{n/2})."""
    _check_order(s)
    if n < 1:
        raise ValueError("dimension must be positive")
    return float(
        4.0**s * s * special.gamma(0.5 * n + s) / (special.gamma(1.0 - s) * np.pi ** (0.5 * n))
    )


def beta_ratio(n: int, s: float) -> float:
    """C_{n,s}/C_{n+1,s} = sqrt(pi) Gamma(n/2+s) / Gamma((n+1)/2+s)."""
    _check_order(s)
    if n < 1:
        raise ValueError("dimension must be positive")
    return float(np.sqrt(np.pi) * np.exp(special.gammaln(0.5 * n + s) - special.gammaln(0.5 * (n + 1) + s)))


def sphere_area(n: int) -> float:
    """Surface measure of the unit sphere in R^n (2 for n = 1)."""
    return float(2.0 * np.pi ** (0.5 * n) / special.gamma(0.5 * n))


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class OperatorConfig:
    """Quadrature settings for the pointwise and grid operators.

    ``resolution`` is the Gauss-Legendre node count per unit length of the
    shell [r, R]. ``allow_half`` admits s = 1/2 for oracle checks only.
    """

    s: float
    n: int = 1
    r: float = 1.0
    R: float = 50.0
    resolution: int = 8
    tail_policy: str = "zero_extension"
    inner_nodes: int = 16
    tail_nodes: int = 16
    n_polar: int = 8
    polar_levels: int = 6
    n_azimuth: int = 48
    allow_half: bool = False

    def __post_init__(self):
        half_ok = self.allow_half and self.s == 0.5
        if not (0.5 < self.s < 1.0) and not half_ok:
            raise ValueError(f"order s must lie in (1/2, 1), got {self.s}")
        if self.n not in (1, 2, 3):
            raise ValueError("dimension must be 1, 2 or 3")
        if not (0.0 < self.r < self.R):
            raise ValueError("radii must satisfy 0 < r < R")
        if self.resolution < 4:
            raise ValueError("resolution must be at least 4")
        if self.tail_policy not in GRID_POLICIES:
            raise ValueError(f"unknown tail policy {self.tail_policy!r}")

    @property
    def constant(self) -> float:
        return normalization_constant(self.n, self.s)


# ---------------------------------------------------------------------------
# grids and fields


@dataclass(frozen=True)
class SpectralGrid:
    """Periodic box [-L, L)^d sampled with ``points`` nodes per axis.

    Node counts must be powers of two unless ``any_size`` is set; even
    counts with small prime factors (48, 96) are still fast under FFT.
    """

    half_length: tuple
    points: tuple
    any_size: bool = False

    def __post_init__(self):
        hl = tuple(float(v) for v in np.atleast_1d(self.half_length))
        pts = tuple(int(v) for v in np.atleast_1d(self.points))
        if len(pts) == 1 and len(hl) > 1:
            pts = pts * len(hl)
        if len(hl) == 1 and len(pts) > 1:
            hl = hl * len(pts)
        if len(hl) != len(pts) or not (1 <= len(pts) <= 3):
            raise ValueError("grid must have 1 to 3 axes")
        if self.any_size:
            if any(p < 2 or p % 2 for p in pts):
                raise ValueError("points per axis must be even")
        elif any(p < 2 or p & (p - 1) for p in pts):
            raise ValueError("points per axis must be a power of two")
        if any(not (v > 0) for v in hl):
            raise ValueError("half lengths must be positive")
        object.__setattr__(self, "half_length", hl)
        object.__setattr__(self, "points", pts)

    @classmethod
    def cube(cls, dims: int, L: float, n: int, any_size: bool = False) -> "SpectralGrid":
        return cls((L,) * dims, (n,) * dims, any_size)

    @property
    def dims(self) -> int:
        return len(self.points)

    @property
    def shape(self) -> tuple:
        return self.points

    @property
    def spacing(self) -> tuple:
        return tuple(2.0 * L / n for L, n in zip(self.half_length, self.points))

    def axes(self) -> list:
        return [-L + h * np.arange(n) for L, h, n in zip(self.half_length, self.spacing, self.points)]

    def mesh(self) -> list:
        return np.meshgrid(*self.axes(), indexing="ij")

    def coordinates(self) -> np.ndarray:
        """Node coordinates as an array of shape (prod(points), dims)."""
        return np.stack([m.ravel() for m in self.mesh()], axis=-1)

    def wavenumbers(self) -> list:
        return [2.0 * np.pi * np.fft.fftfreq(n, d=h) for n, h in zip(self.points, self.spacing)]

    def wavenumber_mesh(self) -> list:
        return np.meshgrid(*self.wavenumbers(), indexing="ij")


@dataclass(frozen=True)
class Field3D:
    """Values on a uniform box grid plus the rule that extends them outside.

    ``limit`` is the constant used by ``constant_limits`` (and as the far
    value beyond the padded ring for ``callable_exterior``).
    """

    grid: SpectralGrid
    values: np.ndarray
    policy: str = "zero_extension"
    exterior: Optional[Callable] = None
    limit: float = 0.0

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            raise ValueError(f"values shape {vals.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("field values must be finite")
        if self.policy not in GRID_POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}")
        if self.policy == "callable_exterior" and self.exterior is None:
            raise ValueError("callable_exterior policy needs an exterior callable")
        object.__setattr__(self, "values", vals)

    def with_values(self, values) -> "Field3D":
        return replace(self, values=np.asarray(values, dtype=float))


# ---------------------------------------------------------------------------
# spectral backend


def _grid_values(field, grid):
    if isinstance(field, Field3D):
        return field.values, field.grid
    if grid is None:
        raise ValueError("a SpectralGrid is required for raw arrays")
    vals = np.asarray(field, dtype=float)
    if vals.shape != grid.shape:
        raise ValueError("values do not match grid shape")
    return vals, grid


def _symbol_abs(grid: SpectralGrid, s: float) -> np.ndarray:
    k2 = sum(k**2 for k in grid.wavenumber_mesh())
    return k2**s


def _drift_wavenumber(grid: SpectralGrid) -> np.ndarray:
    """xi_z with the self-conjugate Nyquist mode zeroed so real fields stay real."""
    kz = grid.wavenumbers()[-1].copy()
    if grid.points[-1] % 2 == 0:
        kz[grid.points[-1] // 2] = 0.0
    shape = [1] * grid.dims
    shape[-1] = -1
    return kz.reshape(shape)


def fraclap_spectral(field, s: float, grid: Optional[SpectralGrid] = None):
    """Multiply every Fourier mode by |xi|^{2s}.

    Accepts a ``Field3D`` (returns one) or a raw array with ``grid``.
    """
    vals, grid = _grid_values(field, grid)
    if not np.all(np.isfinite(vals)):
        raise ValueError("non-finite input")
    out = np.real(sfft.ifftn(sfft.fftn(vals) * _symbol_abs(grid, s)))
    if isinstance(field, Field3D):
        return field.with_values(out)
    return out


def solve_symbol(g, c: float, K: float, s: float, grid: Optional[SpectralGrid] = None):
    """Solve (-Delta)^s u - c d_z u + K u = g on a periodic box.

    The drift acts on the last axis. Each mode is divided by
    |xi|^{2s} - i c xi_z + K.
    """
    if not K > 0:
        raise ValueError("shift K must be positive")
    vals, grid = _grid_values(g, grid)
    sym = _symbol_abs(grid, s) - 1j * c * _drift_wavenumber(grid) + K
    out = np.real(sfft.ifftn(sfft.fftn(vals) / sym))
    if isinstance(g, Field3D):
        return g.with_values(out)
    return out


def apply_symbol(u, c: float, K: float, s: float, grid: Optional[SpectralGrid] = None):
    """Forward periodic operator (-Delta)^s - c d_z + K."""
    vals, grid = _grid_values(u, grid)
    sym = _symbol_abs(grid, s) - 1j * c * _drift_wavenumber(grid) + K
    out = np.real(sfft.ifftn(sfft.fftn(vals) * sym))
    if isinstance(u, Field3D):
        return u.with_values(out)
    return out


# ---------------------------------------------------------------------------
# pointwise backend


def _graded_unit(nodes: int, levels: int):
    """Gauss panels on [0, 1] refined geometrically toward 0."""
    edges = np.concatenate([[0.0], 2.0 ** -np.arange(levels, -1, -1.0)])
    return _gauss_panels(edges, nodes)


@lru_cache(maxsize=32)
def _half_sphere(n: int, n_polar: int, n_azimuth: int, levels: int):
    """Directions covering half the sphere; weights sum to |S^{n-1}|/2.

    The symmetrized integrand is even in the direction, so half the sphere
    paired with +/- evaluations covers everything. The polar variable is
    refined toward the equator of the last axis, where functions of that
    coordinate alone develop a band of width ~1/rho.
    """
    if n == 1:
        return np.ones((1, 1)), np.ones(1)
    if n == 2:
        u, w = _graded_unit(n_polar, levels)
        psi = np.concatenate([0.5 * np.pi * (1.0 - u), 0.5 * np.pi * (1.0 + u)])
        wp = np.concatenate([w, w]) * 0.5 * np.pi
        dirs = np.stack([np.sin(psi), np.cos(psi)], axis=-1)
        return dirs, wp
    ct, wt = _graded_unit(n_polar, levels)
    phi = 2.0 * np.pi * np.arange(n_azimuth) / n_azimuth
    st = np.sqrt(1.0 - ct**2)
    dirs = np.stack(
        [np.outer(st, np.cos(phi)), np.outer(st, np.sin(phi)), np.outer(ct, np.ones_like(phi))],
        axis=-1,
    ).reshape(-1, 3)
    w = np.outer(wt, np.full(n_azimuth, 2.0 * np.pi / n_azimuth)).ravel()
    return dirs, w


def _rotation_to(axis: np.ndarray) -> np.ndarray:
    """Orthogonal matrix whose last row is the unit vector ``axis``."""
    a = np.asarray(axis, float)
    a = a / np.linalg.norm(a)
    n = a.size
    basis = np.eye(n)[np.argsort(np.abs(a))]
    Q, _ = np.linalg.qr(np.column_stack([a, basis[:-1].T]))
    Q = Q * np.sign(Q[:, 0] @ a)
    return np.column_stack([Q[:, 1:], Q[:, 0]]).T


def _gauss_panels(edges: np.ndarray, nodes: int):
    t, w = np.polynomial.legendre.leggauss(nodes)
    a, b = edges[:-1, None], edges[1:, None]
    x = 0.5 * (b - a) * t + 0.5 * (a + b)
    return x.ravel(), (0.5 * (b - a) * w).ravel()


@lru_cache(maxsize=64)
def _radial_rule(s: float, r: float, R: float, resolution: int, inner_nodes: int):
    """Nodes and weights for int_0^R rho^{-1-2s} g(rho) d rho, g ~ rho^2 at 0.

    The inner ball uses Gauss-Jacobi with weight rho^{1-2s} applied to
    g/rho^2; the shell uses Gauss-Legendre panels of length at most one.
    """
    beta = 1.0 - 2.0 * s
    xj, wj = special.roots_jacobi(inner_nodes, 0.0, beta)
    rho_in = 0.5 * r * (1.0 + xj)
    w_in = (0.5 * r) ** (beta + 1.0) * wj / rho_in**2
    edges = [r]
    while edges[-1] < min(1.0, R):
        edges.append(min(2.0 * edges[-1], 1.0, R))
    if edges[-1] < R:
        edges.extend(np.arange(edges[-1] + 1.0, R, 1.0).tolist())
        if R - edges[-1] > 1e-12:
            edges.append(R)
    rho_sh, w_sh = _gauss_panels(np.asarray(edges), resolution)
    w_sh = w_sh * rho_sh ** (-1.0 - 2.0 * s)
    return np.concatenate([rho_in, rho_sh]), np.concatenate([w_in, w_sh])


@lru_cache(maxsize=32)
def _tail_rule(s: float, R: float, nodes: int, levels: int = 10):
    """int_R^inf rho^{-1-2s} g d rho = (1/2s) int_0^{R^{-2s}} g(t^{-1/2s}) dt.

    The t-interval is split geometrically toward 0, where g is least smooth.
    """
    T = R ** (-2.0 * s)
    edges = np.concatenate([[0.0], T * 4.0 ** -np.arange(levels, -1, -1.0)])
    t, w = _gauss_panels(edges, nodes)
    return t ** (-0.5 / s), w / (2.0 * s)


def _limit_values(limits, dirs, n):
    if limits is None:
        z = np.zeros(len(dirs))
        return z, z
    if callable(limits):
        return np.asarray(limits(dirs), float), np.asarray(limits(-dirs), float)
    arr = np.atleast_1d(np.asarray(limits, float))
    if arr.size == 1:
        z = np.full(len(dirs), float(arr[0]))
        return z, z
    if n == 1 and arr.size == 2:
        return np.array([arr[1]]), np.array([arr[0]])
    raise ValueError("limits must be a scalar, a (minus, plus) pair in 1D, or a callable")


def _pointwise_single(u, x, cfg: OperatorConfig, limits, axis=None):
    n, s = cfg.n, cfg.s
    dirs, wd = _half_sphere(n, cfg.n_polar, cfg.n_azimuth, cfg.polar_levels)
    if axis is not None and n > 1:
        dirs = dirs @ _rotation_to(axis)
    rho, wr = _radial_rule(s, cfg.r, cfg.R, cfg.resolution, cfg.inner_nodes)
    policy = cfg.tail_policy
    if policy == "periodic":
        raise ValueError("periodic policy is only available for grid fields")
    if policy == "callable_exterior":
        rt, wt = _tail_rule(s, cfg.R, cfg.tail_nodes)
        rho = np.concatenate([rho, rt])
        wr = np.concatenate([wr, wt])

    def ev(p):
        return np.asarray(u(p[..., 0] if n == 1 else p), dtype=float)

    u0 = float(ev(x[None, :])[0])
    total = 0.0
    chunk = max(1, 400_000 // (2 * len(dirs)))
    for i in range(0, len(rho), chunk):
        rr = rho[i : i + chunk]
        step = rr[:, None, None] * dirs[None, :, :]
        up = ev(x + step)
        um = ev(x - step)
        A = (2.0 * u0 - up - um) @ wd
        total += float(A @ wr[i : i + chunk])
    if policy != "callable_exterior":
        if policy == "zero_extension":
            lp = lm = np.zeros(len(dirs))
        else:
            lp, lm = _limit_values(limits, dirs, n)
        a_inf = float((2.0 * u0 - lp - lm) @ wd)
        total += a_inf * cfg.R ** (-2.0 * s) / (2.0 * s)
    return cfg.constant * total


def fraclap_pointwise(u: Callable, x, cfg: OperatorConfig, limits=None, return_error: bool = False, axis=None):
    """(-Delta)^s u at the point(s) ``x`` by symmetrized spherical quadrature.

    ``u`` maps an array of points to values: for n = 1 it receives plain
    coordinates, otherwise arrays of shape (..., n). The exterior beyond
    radius ``cfg.R`` follows ``cfg.tail_policy``:

    * ``zero_extension``: u is taken as 0 there (analytic tail).
    * ``constant_limits``: u is replaced by its directional limits
      (``limits``: scalar, (u(-inf), u(+inf)) in 1D, or a callable of
      unit directions); the tail is analytic.
    * ``callable_exterior``: ``u`` itself is integrated to infinity after
      the substitution t = rho^{-2s}.

    With ``return_error`` the result is paired with the difference from a
    run at roughly half the quadrature orders. ``axis`` orients the polar
    refinement of the direction rule (useful for functions that vary mainly
    along one direction).
    """
    pts = np.asarray(x, dtype=float)
    if cfg.n == 1:
        pts = pts.reshape(-1, 1) if pts.ndim <= 1 else pts
    scalar = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[-1] != cfg.n:
        raise ValueError(f"points must have {cfg.n} coordinates")
    vals = np.array([_pointwise_single(u, p, cfg, limits, axis) for p in pts])
    out = vals[0] if (scalar or (cfg.n == 1 and np.ndim(x) == 0)) else vals
    if not return_error:
        return out
    coarse = replace(
        cfg,
        inner_nodes=max(4, cfg.inner_nodes // 2),
        resolution=max(4, cfg.resolution // 2),
        tail_nodes=max(4, cfg.tail_nodes // 2),
    )
    err = np.abs(vals - np.array([_pointwise_single(u, p, coarse, limits, axis) for p in pts]))
    return out, (err[0] if np.ndim(out) == 0 else err)


def decay_bound(d2: float, d1: float, d0: float, cfg: OperatorConfig, sphere_factor: bool = True) -> float:
    """Three-term bound on |(-Delta)^s u(x)| from local derivative sizes.

    ``d2`` bounds the Hessian on B_r(x), ``d1`` the gradient on the shell
    B_R \\ B_r(x), ``d0`` the sup of |u|. With ``sphere_factor`` the polar
    integrals keep the sphere area |S^{n-1}|; without it the bare
    three-term form is returned (smaller by that factor).
    """
    s, r, R = cfg.s, cfg.r, cfg.R
    if s == 0.5:
        raise ValueError("bound is singular at s = 1/2")
    for v in (d2, d1, d0):
        if not np.isfinite(v) or v < 0:
            raise ValueError("norms must be finite and non-negative")
    t2 = r ** (2 - 2 * s) / (4 * (1 - s)) * d2
    t1 = (r ** (1 - 2 * s) - R ** (1 - 2 * s)) / (2 * s - 1) * d1
    t0 = d0 / (s * R ** (2 * s))
    fac = sphere_area(cfg.n) if sphere_factor else 1.0
    return float(normalization_constant(cfg.n, s) * fac * (t2 + t1 + t0))


# ---------------------------------------------------------------------------
# grid backend


def _face_integral(d: int, p: float, nodes: int = 96) -> float:
    """2d * int_{[-1,1]^{d-1}} (1+|q|^2)^{-p/2} dq, the cube-shell angular factor."""
    if d == 1:
        return 2.0
    t, w = np.polynomial.legendre.leggauss(nodes)
    if d == 2:
        return 4.0 * float(w @ (1.0 + t**2) ** (-0.5 * p))
    Q1, Q2 = np.meshgrid(t, t, indexing="ij")
    return 6.0 * float(w @ ((1.0 + Q1**2 + Q2**2) ** (-0.5 * p)) @ w)


def _cell_average_octant(d: int, s: float, size: int) -> np.ndarray:
    """int over unit cells j + [-1/2,1/2]^d of |xi|^{-d-2s}, for j in [0, size)^d.

    Cells touching the origin's neighbourhood are subdivided; the rest use a
    tensor Gauss rule. Entry 0 is left at zero (singular cell).
    """
    p = d + 2.0 * s
    out = np.zeros((size,) * d)
    t4, w4 = np.polynomial.legendre.leggauss(4)
    t4, w4 = 0.5 * t4, 0.5 * w4
    # far cells: 4-point tensor Gauss per axis
    grids = np.meshgrid(*([t4] * d), indexing="ij")
    offs = np.stack([g.ravel() for g in grids], axis=-1)
    wts = np.ones(1)
    for _ in range(d):
        wts = np.multiply.outer(wts, w4).ravel()
    idx = np.arange(size, dtype=float)
    if d == 1:
        pts = idx[:, None] + offs[None, :, 0]
        out[:] = (np.abs(pts) ** -p) @ wts
    else:
        for i in range(size):
            sub = np.stack(np.meshgrid(*([np.array([float(i)])] + [idx] * (d - 1)), indexing="ij"), -1)
            sub = sub.reshape(-1, d)
            r2 = np.sum((sub[:, None, :] + offs[None, :, :]) ** 2, axis=-1)
            out[i] = (r2 ** (-0.5 * p) @ wts).reshape((size,) * (d - 1))
    # near cells: subdivide each axis into m pieces
    m = 8
    ts = (np.arange(m)[:, None] + 0.5 + t4[None, :]) / m - 0.5
    ts = ts.ravel()
    ws = np.tile(w4, m) / m
    grids = np.meshgrid(*([ts] * d), indexing="ij")
    offs_f = np.stack([g.ravel() for g in grids], axis=-1)
    wts_f = np.ones(1)
    for _ in range(d):
        wts_f = np.multiply.outer(wts_f, ws).ravel()
    near = min(size, 3)
    for j in np.ndindex(*((near,) * d)):
        if not any(j):
            continue
        r2 = np.sum((np.asarray(j, float)[None, :] + offs_f) ** 2, axis=-1)
        out[j] = r2 ** (-0.5 * p) @ wts_f
    out[(0,) * d] = 0.0
    return out


@lru_cache(maxsize=16)
def grid_weights(d: int, s: float, size: int):
    """Unit-spacing kernel data for a grid with ``size`` nodes per axis.

    Returns (W, gamma, total): W holds C * cell averages of |xi|^{-d-2s}
    over offsets [-(size-1), size-1]^d (zero at the centre), gamma the
    nearest-neighbour weight that makes the scheme exact for quadratics over
    the whole offset cube (this cancels the O(h^{2-2s}) error of cell
    averaging, leaving second order), total the kernel mass outside the centre cell. At
    spacing h all three scale by h^{-2s}.
    """
    C = normalization_constant(d, s)
    octant = _cell_average_octant(d, s, size)
    full = octant
    for ax in range(d):
        full = np.concatenate([np.flip(np.delete(full, 0, axis=ax), axis=ax), full], axis=ax)
    W = C * full
    J0 = size - 1
    b = J0 + 0.5
    second = b ** (2.0 - 2.0 * s) * _face_integral(d, d + 2.0 * s - 2.0) / (2.0 - 2.0 * s) / d
    c = size - 1
    block = W[tuple(slice(c - J0, c + J0 + 1) for _ in range(d))]
    j1 = np.arange(-J0, J0 + 1, dtype=float)
    j1 = j1.reshape((-1,) + (1,) * (d - 1))
    discrete = float(np.sum(block * j1**2))
    gamma = (C * second - discrete) / 2.0
    total = C * 0.5 ** (-2.0 * s) * _face_integral(d, d + 2.0 * s) / (2.0 * s)
    return W, float(gamma), float(total)


def _spacing(grid: SpectralGrid) -> float:
    h = np.asarray(grid.spacing)
    if not np.allclose(h, h[0], rtol=1e-12, atol=0.0):
        raise ValueError("fraclap_grid needs equal spacing on every axis")
    return float(h[0])


_PERIODIC_IMAGES = {1: 16, 2: 4, 3: 1}


class GridOperator:
    """Reusable discrete (-Delta)^s on a fixed box grid.

    Kernel transforms are computed once; ``apply`` costs a few FFTs on the
    doubled grid.
    """

    def __init__(self, grid: SpectralGrid, s: float, policy: str = "zero_extension"):
        if not (0.5 < s < 1.0):
            raise ValueError("order s must lie in (1/2, 1)")
        if policy not in GRID_POLICIES:
            raise ValueError(f"unknown policy {policy!r}")
        self.grid, self.s, self.policy = grid, s, policy
        self.h = _spacing(grid)
        n = grid.points[0]
        if any(p != n for p in grid.points):
            raise ValueError("fraclap_grid needs the same node count on every axis")
        self.n, self.d = n, grid.dims
        # periodic fields fold several image cells before the mean-field remainder
        size = n * (_PERIODIC_IMAGES[self.d] if policy == "periodic" else 1)
        W, gamma, total = grid_weights(self.d, s, size)
        scale = self.h ** (-2.0 * s)
        self.gamma, self.total = gamma * scale, total * scale
        W = W * scale
        if policy == "periodic":
            self._setup_periodic(W)
        else:
            self._setup_box(W)

    def _setup_box(self, W):
        n, d = self.n, self.d
        P = 2 * n
        kern = np.zeros((P,) * d)
        kern[tuple(slice(0, 2 * n - 1) for _ in range(d))] = W
        kern = np.roll(kern, -(n - 1), axis=tuple(range(d)))
        self._kfft = sfft.rfftn(kern)
        self._P = P
        self.inside_mass = self._conv(np.ones((n,) * d))

    def _setup_periodic(self, W):
        n, d = self.n, self.d
        # fold offsets -(n-1)..(n-1) onto residues mod n, axis by axis
        m = W.shape[0]
        M = np.zeros((n, m))
        M[np.arange(-(m // 2), m // 2 + 1) % n, np.arange(m)] = 1.0
        fold = W
        for ax in range(d):
            fold = np.moveaxis(np.tensordot(M, fold, axes=([1], [ax])), 0, ax)
        rem = self.total - float(np.sum(W))
        sym = float(np.sum(fold)) - np.real(sfft.fftn(fold))
        waves = np.meshgrid(*[2.0 * np.pi * np.fft.fftfreq(n) for _ in range(d)], indexing="ij")
        sym = sym + self.gamma * sum(2.0 - 2.0 * np.cos(w) for w in waves) + rem
        sym[(0,) * d] = 0.0
        self.symbol = sym

    def _conv(self, u):
        n, d, P = self.n, self.d, self._P
        out = sfft.irfftn(sfft.rfftn(u, s=(P,) * d) * self._kfft, s=(P,) * d)
        return out[tuple(slice(0, n) for _ in range(d))]

    def _neighbour_sum(self, u, outside):
        acc = np.zeros_like(u)
        for ax in range(self.d):
            pad = [(0, 0)] * self.d
            pad[ax] = (1, 1)
            up = np.pad(u, pad, mode="constant", constant_values=outside)
            sl_m = [slice(None)] * self.d
            sl_p = [slice(None)] * self.d
            sl_m[ax] = slice(0, -2)
            sl_p[ax] = slice(2, None)
            acc += 2.0 * u - up[tuple(sl_m)] - up[tuple(sl_p)]
        return acc

    def apply(self, u: np.ndarray, outside: float = 0.0) -> np.ndarray:
        """Discrete operator on values ``u`` with constant exterior ``outside``."""
        if self.policy == "periodic":
            return np.real(sfft.ifftn(sfft.fftn(u) * self.symbol))
        S1 = self._conv(u)
        out = self.total * u - S1 - outside * (self.total - self.inside_mass)
        return out + self.gamma * self._neighbour_sum(u, outside)

    def diagonal(self) -> float:
        return self.total + 2.0 * self.d * self.gamma


def fraclap_grid(field: Field3D, cfg: Optional[OperatorConfig] = None, s: Optional[float] = None, pad: Optional[int] = None) -> Field3D:
    """Grid fractional Laplacian of ``field`` under its exterior policy.

    ``callable_exterior`` pads the box by ``pad`` nodes per side (default
    half the node count rounded to a power of two) filled from the exterior
    callable, with ``field.limit`` beyond.
    """
    order = cfg.s if cfg is not None else s
    if order is None:
        raise ValueError("order s required")
    grid = field.grid
    policy = field.policy
    if policy == "callable_exterior":
        n = grid.points[0]
        h = _spacing(grid)
        pad = n // 2 if pad is None else pad
        big_n = n + 2 * pad
        if big_n & (big_n - 1):
            big_n = 1 << int(np.ceil(np.log2(big_n)))
        lo = (big_n - n) // 2
        L_big = big_n * h / 2.0
        shift = -grid.half_length[0] - lo * h + L_big
        big = SpectralGrid.cube(grid.dims, L_big, big_n)
        pts = big.coordinates() + shift
        vals = np.asarray(field.exterior(pts if grid.dims > 1 else pts[:, 0]), float).reshape(big.shape)
        core = tuple(slice(lo, lo + n) for _ in range(grid.dims))
        vals[core] = field.values
        op = _operator(big, order, "zero_extension")
        out = op.apply(vals, field.limit)[core]
        return field.with_values(out)
    op = _operator(grid, order, "periodic" if policy == "periodic" else "zero_extension")
    outside = field.limit if policy == "constant_limits" else 0.0
    return field.with_values(op.apply(field.values, outside))


@lru_cache(maxsize=8)
def _operator(grid: SpectralGrid, s: float, policy: str) -> GridOperator:
    return GridOperator(grid, s, policy)


# ---------------------------------------------------------------------------
# 1D lattice operator (band-limited interpolation)


def _omega_asymptotic(j: np.ndarray, a: float, terms: int = 10) -> np.ndarray:
    """(1/pi) int_0^pi eta^a cos(j eta) d eta for large integer j.

    Endpoint expansion: the origin contributes Gamma(a+1) e^{i pi (a+1)/2}
    j^{-a-1}; the endpoint pi contributes an alternating series in 1/j.
    """
    j = np.asarray(j, dtype=float)
    origin = special.gamma(a + 1.0) * np.cos(0.5 * np.pi * (a + 1.0)) * j ** (-a - 1.0)
    sign = np.where(np.asarray(j, dtype=np.int64) % 2 == 0, 1.0, -1.0)
    acc = np.zeros_like(j)
    coef = 1.0  # falling factorial a(a-1)...(a-m+1)
    for m in range(terms):
        deriv = coef * np.pi ** (a - m)
        # Re[(-1)^m g^(m)(pi) / (i j)^{m+1}] is nonzero only for odd m
        if m % 2 == 1:
            acc += (-1.0) ** m * deriv * np.real(1.0 / (1j) ** (m + 1)) * j ** (-(m + 1.0))
        coef *= a - m
    return (origin + sign * acc) / np.pi


@lru_cache(maxsize=16)
def _omega_table(a: float, J: int, switch: int = 64) -> tuple:
    from scipy import integrate

    om = np.empty(J + 1)
    om[0] = np.pi**a / (a + 1.0)
    small = min(J, switch)
    for j in range(1, small + 1):
        om[j] = integrate.quad(lambda e: e**a, 0.0, np.pi, weight="cos", wvar=j, epsabs=1e-15, limit=200)[0] / np.pi
    if J > switch:
        om[switch + 1 :] = _omega_asymptotic(np.arange(switch + 1, J + 1), a)
    # tail beyond J: sum the expansion to a large cutoff, then the smooth part by Hurwitz zeta
    big = 1 << 22
    jj = np.arange(J + 1, max(J + 2, big), dtype=float)
    tail = float(np.sum(_omega_asymptotic(jj, a)))
    lead = special.gamma(a + 1.0) * np.cos(0.5 * np.pi * (a + 1.0)) / np.pi
    tail += lead * float(special.zeta(a + 1.0, jj[-1] + 1.0))
    return om, tail


def lattice_weights(s: float, h: float, J: int):
    """Weights of the band-limited lattice fractional Laplacian in 1D.

    (L u)_i = sum_j c_j u_{i-j}, with c_j = h^{-2s} (1/pi) int_0^pi
    eta^{2s} cos(j eta) d eta. Returns (c_0..c_J, sum_{j>J} c_j); the full
    weight sequence sums to zero.
    """
    om, tail = _omega_table(2.0 * s, int(J))
    scale = h ** (-2.0 * s)
    return om * scale, tail * scale
