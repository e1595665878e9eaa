"""Sub- and super-solutions for pyramidal fronts and the monotone iteration.

v = max_j Phi((k/c)(z - h_j)) is built from planar fronts; the
super-solution is V = Phi(mu_hat) + eps S(alpha x, alpha y) with mu_hat the
normalised height above the rescaled mollified pyramid
z = alpha^{-1} phi(alpha x, alpha y).
"""
from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import optimize
from scipy.interpolate import RegularGridInterpolator

from .fracop import (
    Field3D,
    GridOperator,
    OperatorConfig,
    SpectralGrid,
    fraclap_pointwise,
    solve_symbol,
)
from .mollify import MollifiedSurface
from .profile import Nonlinearity, ProfileSolution
from .pyramid import PyramidSpec, edge_distance, gamma_R_mask, height, region_index


class QuadratureError(RuntimeError):
    """A quadrature error estimate exceeded its allowed fraction of the value."""


def _check_speeds(profile: ProfileSolution, pyramid: PyramidSpec) -> None:
    if abs(profile.k - pyramid.k) > 1e-9 * max(1.0, abs(profile.k)):
        raise ValueError(f"pyramid speed k={pyramid.k} differs from the profile speed {profile.k}")


# ---------------------------------------------------------------------------
# sub-solution


@dataclass(frozen=True, eq=False)
class SubSolution:
    """v = max_j Phi((k/c)(z - a_j x - b_j y)), equal to Phi((k/c)(z - h))."""

    profile: ProfileSolution
    pyramid: PyramidSpec

    def __post_init__(self):
        _check_speeds(self.profile, self.pyramid)

    @property
    def scale(self) -> float:
        return self.pyramid.k / self.pyramid.c

    def facet(self, j: int, x, y, z):
        """v_j, the planar front attached to facet j."""
        a, b = self.pyramid.normals[j]
        return self.profile(self.scale * (np.asarray(z) - a * np.asarray(x) - b * np.asarray(y)))

    def facet_normal(self, j: int) -> np.ndarray:
        """Unit vector (k/c)(-a_j, -b_j, 1) along which v_j varies."""
        a, b = self.pyramid.normals[j]
        return self.scale * np.array([-a, -b, 1.0])

    def __call__(self, x, y, z):
        return self.profile(self.scale * (np.asarray(z) - height(self.pyramid, x, y)))

    def maximizing_facet(self, x, y, z):
        vals = np.stack([self.facet(j, x, y, z) for j in range(self.pyramid.N)], axis=-1)
        return np.argmax(vals, axis=-1)


def eval_sub(sub: SubSolution, x, y, z):
    return sub(x, y, z)


def residual_sub(sub: SubSolution, f: Nonlinearity, points, facet_index=None, cfg: Optional[OperatorConfig] = None,
                 max_error: float = 1e-5) -> dict:
    """L[v_j] = (-Delta)^s v_j - c d_z v_j - f(v_j) at ``points`` (M, 3).

    ``facet_index`` picks j per point (default: the sector of (x, y)). The
    operator is the 3D spherical quadrature oriented along the facet normal;
    the profile tail model is the exterior. Raises ``QuadratureError`` when
    the half-order error estimate exceeds ``max_error``.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    pyr = sub.pyramid
    idx = region_index(pyr, pts[:, 0], pts[:, 1]) if facet_index is None else np.broadcast_to(facet_index, len(pts))
    cfg = cfg or OperatorConfig(s=sub.profile.s, n=3, r=0.5, R=200.0, resolution=8, tail_policy="callable_exterior",
                                n_polar=12, polar_levels=6, n_azimuth=8)
    lap = np.empty(len(pts))
    err = np.empty(len(pts))
    for i, (p, j) in enumerate(zip(pts, idx)):
        u = lambda P, j=j: sub.facet(j, P[..., 0], P[..., 1], P[..., 2])
        lap[i], err[i] = fraclap_pointwise(u, p, cfg, return_error=True, axis=sub.facet_normal(j))
    if np.max(err) > max_error:
        raise QuadratureError(f"pointwise quadrature error {np.max(err):.2e} exceeds {max_error:.1e}")
    a, b = pyr.normals[idx].T
    mu = sub.scale * (pts[:, 2] - a * pts[:, 0] - b * pts[:, 1])
    vals = sub.profile(mu)
    res = lap - pyr.c * sub.scale * sub.profile(mu, 1) - f.f(vals)
    return {"residual": res, "max_abs": float(np.max(np.abs(res))), "operator": lap, "error": err, "mu": mu}


# ---------------------------------------------------------------------------
# super-solution


def tangent_frame(px, py) -> np.ndarray:
    """Orthonormal T acting on (zeta, xi, eta) with first row (1, -px, -py) / sqrt(1 + px^2 + py^2).

    The second row is (0, grad / |grad|) orthogonalised against the first,
    the third their cross product; the shape of the result is (..., 3, 3).
    """
    px, py = np.broadcast_arrays(np.asarray(px, dtype=float), np.asarray(py, dtype=float))
    q = np.sqrt(1.0 + px**2 + py**2)
    g = np.hypot(px, py)
    # unit horizontal direction of the gradient, (1, 0) when it vanishes
    ex = np.where(g > 0, px / np.where(g > 0, g, 1.0), 1.0)
    ey = np.where(g > 0, py / np.where(g > 0, g, 1.0), 0.0)
    zero = np.zeros_like(px)
    t1 = np.stack([1.0 / q, -px / q, -py / q], axis=-1)
    # Gram-Schmidt of (0, ex, ey) against t1, written in closed form to avoid cancellation
    t2 = np.stack([g / q, ex / q, ey / q], axis=-1)
    t3 = np.stack([zero, -ey, ex], axis=-1)
    return np.stack([t1, t2, t3], axis=-2)


@dataclass(frozen=True, eq=False)
class SuperSolution:
    """V = Phi(mu_hat) + eps S(alpha x, alpha y)."""

    profile: ProfileSolution
    surface: MollifiedSurface
    eps: float
    alpha: float

    def __post_init__(self):
        _check_speeds(self.profile, self.surface.pyramid)
        if not (0 < self.eps < 1 and 0 < self.alpha < 1):
            raise ValueError("eps and alpha must lie in (0, 1)")

    @property
    def pyramid(self) -> PyramidSpec:
        return self.surface.pyramid

    def mu_hat(self, x, y, z):
        """(z - phi(alpha x, alpha y) / alpha) / sqrt(1 + |grad phi|^2) and that root."""
        a = self.alpha
        d = self.surface.derivatives(a * np.asarray(x, float), a * np.asarray(y, float), 1)
        sq = np.sqrt(1.0 + np.sum(d.grad**2, axis=-1))
        return (np.asarray(z, float) - d.phi / a) / sq, sq

    def base(self, x, y, z):
        """Phi(mu_hat), the front part of V."""
        return self.profile(self.mu_hat(x, y, z)[0])

    def S(self, x, y):
        a = self.alpha
        return self.surface.S(a * np.asarray(x, float), a * np.asarray(y, float))

    def __call__(self, x, y, z):
        return self.base(x, y, z) + self.eps * self.S(x, y)


def eval_super(sup: SuperSolution, x, y, z):
    return sup(x, y, z)


def _remainder_config(s: float) -> OperatorConfig:
    return OperatorConfig(s=s, n=3, r=1.0, R=60.0, resolution=6, tail_policy="callable_exterior",
                          n_polar=10, polar_levels=6, n_azimuth=24, tail_nodes=16)


def normal_remainder(profile: ProfileSolution, surface: MollifiedSurface, alpha: float, points,
                     cfg: Optional[OperatorConfig] = None, return_error: bool = False):
    """(-Delta)^s [Phi(mu_hat)] - ((-Delta)^s_1 Phi)(mu_hat) at ``points`` (M, 3).

    Both operators come from one quadrature: at p the integrand is
    Phi(mu_hat) - Phi(mu_hat(p) + n . (. - p)) with n the unit normal of the
    rescaled surface at p, because the 3D operator of a planar profile is
    the 1D operator of the profile. The unscaled remainder is
    R1(alpha p; alpha) = alpha^{-2s} times this value.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    cfg = cfg or _remainder_config(profile.s)
    a = alpha
    out = np.empty(len(pts))
    err = np.empty(len(pts))
    for i, p in enumerate(pts):
        d0 = surface.derivatives(np.array([a * p[0]]), np.array([a * p[1]]), 1)
        gx, gy = d0.grad[0]
        sq0 = np.sqrt(1.0 + gx * gx + gy * gy)
        mu0 = (p[2] - d0.phi[0] / a) / sq0
        nrm = np.array([-gx, -gy, 1.0]) / sq0

        def g(P):
            d = surface.derivatives(a * P[..., 0], a * P[..., 1], 1)
            sq = np.sqrt(1.0 + np.sum(d.grad**2, axis=-1))
            mu = (P[..., 2] - d.phi / a) / sq
            lin = mu0 + (P - p) @ nrm
            return profile(mu) - profile(lin)

        if return_error:
            out[i], err[i] = fraclap_pointwise(g, p, cfg, return_error=True, axis=nrm)
        else:
            out[i] = fraclap_pointwise(g, p, cfg, axis=nrm)
    return (out, err) if return_error else out


# ---------------------------------------------------------------------------
# remainder scaling


def _fit(x, y):
    lx, ly = np.log(np.asarray(x, float)), np.log(np.abs(np.asarray(y, float)))
    A = np.column_stack([lx, np.ones_like(lx)])
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    rms = float(np.sqrt(np.mean((A @ coef - ly) ** 2)))
    return {"exponent": float(coef[0]), "constant": float(np.exp(coef[1])), "rms": rms}


def r1_samples(pyramid: PyramidSpec, lam=(0.25, 1.0, 4.0, 16.0), offsets=(-4.0, -1.0, 0.0, 1.0, 4.0),
               sector_fractions=(0.5, 0.25), apex: bool = True) -> dict:
    """Sample columns (x, y) in sector 0 and normal offsets for the R1 audit.

    Columns sit at edge distances ``lam`` (unscaled) along rays through
    the given fractions of the sector opening; ``offsets`` are values of
    mu_bar in units of alpha, so the same physical layer is probed for every
    alpha.
    """
    e = pyramid.edge_directions
    a0 = np.arctan2(e[-1, 1], e[-1, 0])
    a1 = np.arctan2(e[0, 1], e[0, 0])
    if a1 <= a0:
        a1 += 2 * np.pi
    cols = [(0.0, 0.0)] if apex else []
    ray = [-1] if apex else []
    for i, frac in enumerate(sector_fractions):
        ang = a0 + frac * (a1 - a0)
        d = np.array([np.cos(ang), np.sin(ang)])
        unit = float(edge_distance(pyramid, *d))
        cols += [tuple(d * l / unit) for l in lam]
        ray += [i] * len(lam)
    cols = np.array(cols)
    return {"columns": cols, "lambda": edge_distance(pyramid, cols[:, 0], cols[:, 1]), "ray": np.array(ray),
            "offsets": np.asarray(offsets, float)}


def estimate_R1(profile: ProfileSolution, surface: MollifiedSurface, alphas=(0.4, 0.2, 0.1, 0.05), samples=None,
                cfg: Optional[OperatorConfig] = None, max_rel_error: float = 0.1, strict: bool = False) -> dict:
    """R1(x, y, z; alpha) on sample columns and offsets for each alpha, with scaling fits.

    R1 = alpha^{-2s} times ``normal_remainder`` at the point scaled by
    1/alpha. Fits: the alpha-slope of max over samples of
    |R1| (1 + lambda)^{2s}, per-column alpha-slopes, lambda-slopes of
    max-over-z |R1| for each alpha (columns with lambda >= 1 on the central
    ray), and max/median over z per column.
    """
    s = profile.s
    samples = samples or r1_samples(surface.pyramid)
    cols, lam, offs = samples["columns"], samples["lambda"], samples["offsets"]
    alphas = np.asarray(alphas, float)
    R1 = np.zeros((len(alphas), len(cols), len(offs)))
    err = np.zeros_like(R1)
    for ia, a in enumerate(alphas):
        d = surface.derivatives(cols[:, 0], cols[:, 1], 1)
        sq = np.sqrt(1.0 + np.sum(d.grad**2, axis=-1))
        for ic, (x, y) in enumerate(cols):
            z = d.phi[ic] + sq[ic] * a * offs
            pts = np.column_stack([np.full_like(z, x), np.full_like(z, y), z]) / a
            val, e = normal_remainder(profile, surface, a, pts, cfg, return_error=True)
            R1[ia, ic], err[ia, ic] = val * a ** (-2 * s), e * a ** (-2 * s)
    rel = err / np.maximum(np.abs(R1), 1e-300)
    bad = (rel > max_rel_error) & (err > 1e-12)
    if strict and np.any(bad):
        raise QuadratureError(f"{int(bad.sum())} R1 samples have quadrature error above {max_rel_error:.0%}")
    zmax = np.max(np.abs(R1), axis=2)
    weighted = np.max(zmax * (1 + lam) ** (2 * s), axis=1)
    idx = np.flatnonzero((samples["ray"] == 0) & (lam >= 1.0))
    lam_fits = [_fit(1 + lam[idx], zmax[ia, idx]) for ia in range(len(alphas))]
    med = np.median(np.abs(R1), axis=2)
    band = np.max(np.abs(R1), axis=2) / np.maximum(med, 1e-300)
    return {
        "alphas": alphas,
        "columns": cols,
        "lambda": lam,
        "offsets": offs,
        "R1": R1,
        "error": err,
        "unresolved": int(bad.sum()),
        "alpha_fit": _fit(alphas, weighted),
        "column_alpha_fits": [_fit(alphas, zmax[:, ic]) for ic in range(len(cols))],
        "lambda_fits": lam_fits,
        "z_band": band,
    }


# ---------------------------------------------------------------------------
# parameter selection


@dataclass(frozen=True)
class SuperSolutionParams:
    """Constants entering the choice of eps and alpha, with the chosen values.

    ``eps_terms`` and ``alpha_terms`` hold every entry of the two minimum
    lists before the 0.9 safety factor.
    """

    delta_star: float
    kappa1: float
    kappa2: float
    phi_star: float
    omega: float
    r4: float
    C_tilde: float
    C_R: float
    eps: float
    alpha: float
    eps_terms: dict = field(default_factory=dict)
    alpha_terms: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("delta_star", "kappa1", "kappa2", "phi_star", "omega", "r4", "C_tilde", "C_R", "eps", "alpha"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")


def mid_range(profile: ProfileSolution, delta: float):
    """Interval of mu on which |Phi(mu)| <= 1 - delta."""
    g = lambda m, t: profile(m) - t
    lo = optimize.brentq(g, profile.mu[0], 0.0, args=(1 - delta,), xtol=1e-13)
    hi = optimize.brentq(g, 0.0, profile.mu[-1], args=(-1 + delta,), xtol=1e-13)
    return lo, hi


def phi_star(profile: ProfileSolution, delta: float, n: int = 20001) -> float:
    """min of -Phi' over the mid-range {|Phi| <= 1 - delta}."""
    lo, hi = mid_range(profile, delta)
    return float(np.min(-profile(np.linspace(lo, hi, n), 1)))


def tail_constant(profile: ProfileSolution, r4: float) -> float:
    """Smallest C with |Phi'(mu)| <= C |mu|^{-1-2s} for |mu| >= r4 (tail model beyond M)."""
    s = profile.s
    m = profile.mu[np.abs(profile.mu) >= r4]
    if r4 < profile.M:
        g = np.geomspace(r4, profile.M, 4001)
        m = np.concatenate([m, g, -g])
    inner = np.max(np.abs(profile(m, 1)) * np.abs(m) ** (1 + 2 * s)) if m.size else 0.0
    return float(max(inner, profile.B_plus, profile.B_minus))


def omega_min(surface: MollifiedSurface, n_angle: int = 360, lam_max: float = 400.0, n_lam: int = 60) -> dict:
    """min over the plane of (phi - h) / S from a lambda-stratified sample, refined locally.

    The sample runs over rays at ``n_angle`` angles with edge distances
    geometric up to ``lam_max`` (plus the apex). The three best samples
    seed Nelder-Mead in the plane.
    """
    pyr = surface.pyramid
    ang = 2 * np.pi * (np.arange(n_angle) + 0.5) / n_angle
    dirs = np.column_stack([np.cos(ang), np.sin(ang)])
    unit = edge_distance(pyr, dirs[:, 0], dirs[:, 1])
    lam = np.concatenate([[0.0], np.geomspace(1e-2, lam_max, n_lam)])
    t = lam[None, :] / np.maximum(unit[:, None], 1e-3)
    X, Y = dirs[:, 0, None] * t, dirs[:, 1, None] * t

    def ratio(x, y):
        d = surface.derivatives(x, y, 1)
        return d.excess / surface._S_from(d, 0)

    R = ratio(X, Y)
    order = np.argsort(R.ravel())[:3]
    best = (float(R.ravel()[order[0]]), (float(X.ravel()[order[0]]), float(Y.ravel()[order[0]])))
    for i in order:
        x0 = np.array([X.ravel()[i], Y.ravel()[i]])
        res = optimize.minimize(lambda p: float(ratio(np.array([p[0]]), np.array([p[1]]))[0]), x0, method="Nelder-Mead",
                                options={"xatol": 1e-8, "fatol": 1e-12})
        if res.fun < best[0]:
            best = (float(res.fun), (float(res.x[0]), float(res.x[1])))
    return {"omega": best[0], "argmin": best[1], "sampled_min": float(R.min()),
            "lambda_at_min": float(edge_distance(pyr, *best[1]))}


def select_parameters(profile: ProfileSolution, surface: MollifiedSurface, f: Nonlinearity, r1_report: Optional[dict] = None,
                      r4: float = 10.0, safety: float = 2.0, factor: float = 0.9, fraclap_cfg=None) -> SuperSolutionParams:
    """Constants of the super-solution and the resulting (eps, alpha).

    C_R = ``safety`` * max over the alpha grid and samples of
    alpha^s |R1 + eps (-Delta)^s S| / S, using ``r1_report`` from
    ``estimate_R1`` (computed when omitted).
    """
    s = profile.s
    pyr = surface.pyramid
    c, k = pyr.c, pyr.k
    ds, k1, k2 = f.delta_star, f.kappa1, f.kappa2
    ps = phi_star(profile, ds)
    om = omega_min(surface)["omega"]
    Ct = tail_constant(profile, r4)
    eps_terms = {"half": 0.5, "delta": ds / (c - k), "phi_star": ps / (3 * k2)}
    eps = factor * min(eps_terms.values())
    rep = r1_report if r1_report is not None else estimate_R1(profile, surface)
    cols = rep["columns"]
    LS = surface.fraclap_S(cols, fraclap_cfg)
    S = surface.S(cols[:, 0], cols[:, 1])
    Rbar = rep["R1"] + eps * LS[None, :, None]
    C_R = safety * float(np.max(rep["alphas"][:, None, None] ** s * np.abs(Rbar) / S[None, :, None]))
    alpha_terms = {
        "half": 0.5,
        "case1": (eps * k1 / (2 * C_R)) ** (1 / s),
        "case2": (ps / (3 * C_R)) ** (1 / s),
        "tail": k * om / (2 * r4),
        "ordering": 0.5 * k * om * (k * eps / (2 * Ct)) ** (1 / (2 * s)),
    }
    alpha = factor * min(alpha_terms.values())
    return SuperSolutionParams(ds, k1, k2, ps, om, r4, Ct, C_R, eps, alpha, eps_terms, alpha_terms)


# ---------------------------------------------------------------------------
# super-solution check


def _verify_config(s: float) -> OperatorConfig:
    return OperatorConfig(s=s, n=3, r=1.0, R=40.0, resolution=4, tail_policy="callable_exterior",
                          n_polar=8, polar_levels=4, n_azimuth=16, tail_nodes=12)


def stratified_samples(sup: SuperSolution, delta: float, n: int = 1000, columns: int = 100, box: float = 50.0,
                       seed: int = 0, reach: float = 30.0) -> dict:
    """Points split evenly between the mid-range layer and the two near-saturated sides.

    ``columns`` (x, y) pairs are uniform in [-box, box]^2; on each column
    half the points have mu_hat in the mid-range (case 2) and half lie
    outside it, up to ``reach`` beyond either end (case 1). z follows from
    mu_hat, which is affine in z.
    """
    rng = np.random.default_rng(seed)
    lo, hi = mid_range(sup.profile, delta)
    per = n // columns
    xy = rng.uniform(-box, box, size=(columns, 2))
    mu = np.empty((columns, per))
    half = per // 2
    mu[:, :half] = rng.uniform(lo, hi, size=(columns, half))
    out = rng.uniform(0.0, reach, size=(columns, per - half))
    side = rng.random((columns, per - half)) < 0.5
    mu[:, half:] = np.where(side, lo - out, hi + out)
    a = sup.alpha
    d = sup.surface.derivatives(a * xy[:, 0], a * xy[:, 1], 1)
    sq = np.sqrt(1.0 + np.sum(d.grad**2, axis=-1))
    z = d.phi[:, None] / a + sq[:, None] * mu
    pts = np.column_stack([np.repeat(xy, per, axis=0), z.ravel()])
    case = np.where(np.abs(sup.profile(mu.ravel())) <= 1 - delta, 2, 1)
    return {"points": pts, "case": case, "column": np.repeat(np.arange(columns), per), "xy": xy}


def super_operator(sup: SuperSolution, f: Nonlinearity, points, columns_xy=None, column=None,
                   cfg: Optional[OperatorConfig] = None, fraclap_cfg=None) -> dict:
    """L[V] at ``points`` with its parts.

    (-Delta)^s Phi(mu_hat) = k Phi'(mu_hat) + f(Phi(mu_hat)) + (normal
    remainder, by quadrature); the S term is the 2D operator of S at
    (alpha x, alpha y) times eps alpha^{2s}. ``columns_xy``/``column`` let
    points share one S evaluation per (x, y).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    prof, a, eps = sup.profile, sup.alpha, sup.eps
    s, c, k = prof.s, sup.pyramid.c, sup.pyramid.k
    if columns_xy is None:
        columns_xy, column = np.unique(pts[:, :2], axis=0, return_inverse=True)
    rem = normal_remainder(prof, sup.surface, a, pts, cfg or _verify_config(s))
    LS = sup.surface.fraclap_S(a * np.asarray(columns_xy), fraclap_cfg)[np.ravel(column)]
    mu, sq = sup.mu_hat(pts[:, 0], pts[:, 1], pts[:, 2])
    P, dP = prof(mu), prof(mu, 1)
    S = sup.S(pts[:, 0], pts[:, 1])
    V = P + eps * S
    LV = k * dP + f.f(P) + rem + eps * a ** (2 * s) * LS - c * dP / sq - f.f(V)
    return {"LV": LV, "S": S, "mu_hat": mu, "V": V, "remainder": rem, "fraclap_S": LS}


def verify_super(sup: SuperSolution, params: SuperSolutionParams, f: Nonlinearity, sub: Optional[SubSolution] = None,
                 n: int = 1000, columns: int = 100, seed: int = 0, cfg: Optional[OperatorConfig] = None,
                 max_retries: int = 3) -> dict:
    """min L[V] and the ordering v < V on stratified samples, halving alpha on failure.

    Returns the accepted super-solution, the per-case margins
    L[V] / (eps kappa1 S / 2) and L[V] / (Phi* S / 3), and the attempt log.
    """
    sub = sub or SubSolution(sup.profile, sup.pyramid)
    attempts = []
    for attempt in range(max_retries + 1):
        smp = stratified_samples(sup, params.delta_star, n, columns, seed=seed)
        pts = smp["points"]
        out = super_operator(sup, f, pts, smp["xy"], smp["column"], cfg)
        gap = out["V"] - sub(pts[:, 0], pts[:, 1], pts[:, 2])
        c1, c2 = smp["case"] == 1, smp["case"] == 2
        m1 = out["LV"][c1] / (0.5 * sup.eps * params.kappa1 * out["S"][c1])
        m2 = out["LV"][c2] / (params.phi_star * out["S"][c2] / 3)
        rec = {"alpha": sup.alpha, "min_LV": float(out["LV"].min()), "min_gap": float(gap.min()),
               "case1_margin": float(m1.min()) if m1.size else np.inf,
               "case2_margin": float(m2.min()) if m2.size else np.inf}
        attempts.append(rec)
        if rec["min_LV"] > 0 and rec["min_gap"] > 0:
            return {"super": sup, "accepted": True, "attempts": attempts, "points": pts, "case": smp["case"], **out,
                    "gap": gap, **rec}
        if attempt < max_retries:
            warnings.warn(f"super-solution check failed at alpha={sup.alpha:.3g}; halving alpha")
            sup = replace(sup, alpha=sup.alpha / 2)
    return {"super": sup, "accepted": False, "attempts": attempts, "points": pts, "case": smp["case"], **out,
            "gap": gap, **rec}


def ordering_check(sub: SubSolution, sup: SuperSolution, n: int = 10000, box: float = 50.0, seed: int = 1) -> float:
    """min of V - v at ``n`` uniform points of [-box, box]^3."""
    pts = np.random.default_rng(seed).uniform(-box, box, size=(n, 3))
    return float(np.min(sup(*pts.T) - sub(*pts.T)))


# ---------------------------------------------------------------------------
# monotone iteration


@dataclass(frozen=True)
class IterationConfig:
    """Box [-L, L]^3 with n nodes per axis; w = u - B vanishes outside.

    ``base_alpha`` is the scale of the base front B = Phi(mu_hat); the
    remainder of its operator is either dropped (``r1_mode='drop'``) or
    interpolated from a table on ``r1_xy`` x ``r1_mu`` nodes in
    (x, y, mu_hat). Ordering and convergence are judged on the core
    [-core L, core L]^3.
    """

    L: float = 24.0
    n: int = 48
    K_factor: float = 1.1
    tol: float = 1e-5
    max_m: int = 50
    base_alpha: float = 0.5
    r1_mode: str = "table"
    r1_xy: int = 7
    r1_mu: tuple = (-24.0, -12.0, -6.0, -3.0, -1.0, 0.0, 1.0, 3.0, 6.0, 12.0, 24.0)
    inner_tol: float = 1e-10
    inner_max: int = 300
    core: float = 0.5

    def __post_init__(self):
        if self.r1_mode not in ("drop", "table"):
            raise ValueError("r1_mode must be 'drop' or 'table'")
        if not (self.L > 0 and self.n >= 8 and self.n % 2 == 0):
            raise ValueError("need L > 0 and an even node count n >= 8")
        if not self.K_factor > 1:
            raise ValueError("K_factor must exceed 1")
        if not (0 < self.core <= 1 and 0 < self.base_alpha <= 1):
            raise ValueError("core and base_alpha must lie in (0, 1]")


@dataclass
class IterationState:
    m: int
    w: Field3D
    K: float
    residuals: list = field(default_factory=list)
    ordering: list = field(default_factory=list)


@dataclass(eq=False)
class IterationResult:
    """Converged u = B + w on the grid, with the pieces needed to evaluate it anywhere."""

    u: Field3D
    base: np.ndarray
    state: IterationState
    history: list
    config: IterationConfig
    sub: SubSolution
    sup: SuperSolution
    base_front: "BaseFront"
    converged: bool

    @property
    def grid(self) -> SpectralGrid:
        return self.u.grid

    def core_mask(self) -> np.ndarray:
        lim = self.config.core * self.config.L + 1e-12
        return np.all(np.abs(np.stack(self.grid.mesh(), axis=-1)) <= lim, axis=-1)

    def w_function(self):
        """Cubic spline of w on the grid, zero outside the box."""
        from scipy import ndimage

        g = self.grid
        h = g.spacing[0]
        L = g.half_length[0]
        coef = ndimage.spline_filter(self.state.w.values, order=3, mode="nearest")
        top = L - h

        def w(P):
            P = np.asarray(P, float)
            idx = (P + L) / h
            inside = np.all((P >= -L) & (P <= top), axis=-1)
            flat = idx.reshape(-1, 3).T
            vals = ndimage.map_coordinates(coef, flat, order=3, mode="nearest", prefilter=False).reshape(P.shape[:-1])
            return np.where(inside, vals, 0.0)

        return w

    def u_function(self):
        w = self.w_function()
        return lambda P: self.base_front.value(P[..., 0], P[..., 1], P[..., 2]) + w(P)


@dataclass(eq=False)
class BaseFront:
    """B = Phi(mu_hat) at scale alpha with a model of (-Delta)^s B."""

    profile: ProfileSolution
    surface: MollifiedSurface
    alpha: float
    table: Optional[RegularGridInterpolator] = None

    def frame(self, x, y, z):
        a = self.alpha
        d = self.surface.derivatives(a * np.asarray(x, float), a * np.asarray(y, float), 1)
        sq = np.sqrt(1.0 + np.sum(d.grad**2, axis=-1))
        return (np.asarray(z, float) - d.phi / a) / sq, sq

    def value(self, x, y, z):
        return self.profile(self.frame(x, y, z)[0])

    def remainder(self, x, y, mu):
        if self.table is None:
            return np.zeros(np.shape(mu))
        mus = self.table.grid[2]
        pts = np.stack(np.broadcast_arrays(x, y, np.clip(mu, mus[0], mus[-1])), axis=-1)
        return self.table(pts)

    def operator(self, f: Nonlinearity, x, y, z):
        """(-Delta)^s B and d_z B."""
        mu, sq = self.frame(x, y, z)
        dP = self.profile(mu, 1)
        lap = self.profile.k * dP + f.f(self.profile(mu)) + self.remainder(x, y, mu)
        return lap, dP / sq


def remainder_table(profile: ProfileSolution, surface: MollifiedSurface, alpha: float, L: float, n_xy: int, mus,
                    cfg: Optional[OperatorConfig] = None) -> RegularGridInterpolator:
    """Normal remainder on an (x, y, mu_hat) grid over [-L, L]^2, linearly interpolated."""
    xs = np.linspace(-L, L, n_xy)
    mus = np.asarray(mus, float)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    d = surface.derivatives(alpha * X, alpha * Y, 1)
    sq = np.sqrt(1.0 + np.sum(d.grad**2, axis=-1))
    Z = d.phi[..., None] / alpha + sq[..., None] * mus
    pts = np.stack([np.broadcast_to(X[..., None], Z.shape), np.broadcast_to(Y[..., None], Z.shape), Z], axis=-1)
    vals = normal_remainder(profile, surface, alpha, pts.reshape(-1, 3), cfg or _verify_config(profile.s))
    return RegularGridInterpolator((xs, xs, mus), vals.reshape(Z.shape), bounds_error=False, fill_value=None)


def _drift(w: np.ndarray, h: float, theta: float) -> np.ndarray:
    """d_z with w = 0 outside: theta * central + (1 - theta) * forward difference."""
    p = np.pad(w, [(0, 0), (0, 0), (1, 1)])
    central = (p[..., 2:] - p[..., :-2]) / (2 * h)
    forward = (p[..., 2:] - w) / h
    return theta * central + (1 - theta) * forward


def monotone_iterate(sub: SubSolution, sup: SuperSolution, f: Nonlinearity, config: Optional[IterationConfig] = None,
                     diagnostics=None, base: Optional[BaseFront] = None, cfg: Optional[OperatorConfig] = None) -> IterationResult:
    """Iterate L(w_m) = f(w_{m-1}) + K w_{m-1} from w_0 = v on a truncated box.

    u_m = B + w_m with w_m = 0 outside the box. Each linear step solves
    A w = rhs, A = (-Delta)^s_grid - c D_z + K, by the fixed point
    w <- w + omega P^{-1}(rhs - A w) with P the periodic symbol; omega drops
    to 0.5 if the inner residual grows. D_z blends central and forward
    differences just enough to keep every off-diagonal entry of A
    non-positive. ``diagnostics`` (path or file object) receives one JSON
    line per step.
    """
    config = config or IterationConfig()
    prof = sub.profile
    s, c = prof.s, sub.pyramid.c
    K = config.K_factor * f.sup_df()
    grid = SpectralGrid.cube(3, config.L, config.n, any_size=True)
    h = grid.spacing[0]
    X, Y, Z = grid.mesh()
    if base is None:
        table = None
        if config.r1_mode == "table":
            table = remainder_table(prof, sup.surface, config.base_alpha, config.L, config.r1_xy, config.r1_mu, cfg)
        base = BaseFront(prof, sup.surface, config.base_alpha, table)
    B = base.value(X, Y, Z)
    lapB, dzB = base.operator(f, X, Y, Z)
    LB = lapB - c * dzB + K * B
    op = GridOperator(grid, s, "zero_extension")
    probe = np.zeros(grid.shape)
    mid = config.n // 2
    probe[mid, mid, mid] = 1.0
    w_nn = -op.apply(probe)[mid, mid, mid + 1]
    theta = min(1.0, 2 * h * w_nn / c)

    def A(w):
        return op.apply(w) - c * _drift(w, h, theta) + K * w

    v = sub(X, Y, Z)
    V = sup(X, Y, Z)
    core = np.all(np.abs(np.stack([X, Y, Z], axis=-1)) <= config.core * config.L + 1e-12, axis=-1)
    w = v - B
    state = IterationState(0, Field3D(grid, w), K)
    history = []
    out = open(diagnostics, "w") if isinstance(diagnostics, (str, bytes)) or hasattr(diagnostics, "__fspath__") else diagnostics
    converged = False
    try:
        for m in range(1, config.max_m + 1):
            t0 = time.perf_counter()
            u_prev = B + w
            rhs = f.f(u_prev) + K * u_prev - LB
            w_new = w.copy()
            omega, last = 1.0, np.inf
            for inner in range(config.inner_max):
                r = rhs - A(w_new)
                rn = float(np.max(np.abs(r)))
                if rn < config.inner_tol:
                    break
                if rn > last and omega == 1.0:
                    omega = 0.5
                last = rn
                w_new = w_new + omega * solve_symbol(r, c, K, s, grid)
            else:
                raise RuntimeError(f"linear solve stagnated at residual {rn:.2e} in step {m}")
            diff = w_new - w
            w = w_new
            u = B + w
            rec = {
                "m": m,
                "residual": float(np.max(np.abs(diff))),
                "monotone_margin": float(np.min(diff[core])),
                "ordering_margin": float(min(np.min(u[core] - v[core]), np.min(V[core] - u[core]))),
                "sub_margin": float(np.min(u[core] - v[core])),
                "super_margin": float(np.min(V[core] - u[core])),
                "inner_steps": inner + 1,
                "relaxation": omega,
                "r1_mode": config.r1_mode,
                "wall_time": time.perf_counter() - t0,
            }
            history.append(rec)
            state.residuals.append(rec["residual"])
            state.ordering.append(rec["ordering_margin"])
            if out is not None:
                out.write(json.dumps(rec) + "\n")
                out.flush()
            if rec["residual"] < config.tol:
                converged = True
                break
    finally:
        if out is not None and out is not diagnostics:
            out.close()
    state.m = len(history)
    state.w = Field3D(grid, w)
    return IterationResult(Field3D(grid, B + w), B, state, history, config, sub, sup, base, converged)


def iteration_residual(result: IterationResult, f: Nonlinearity, n: int = 50, seed: int = 0,
                       cfg: Optional[OperatorConfig] = None, dz: float = 1e-3) -> dict:
    """L[u] by the pointwise 3D quadrature at ``n`` random core nodes.

    u is B plus the cubic spline of w (zero outside the box); u_z is a
    centred difference of that function.
    """
    prof = result.sub.profile
    c = result.sub.pyramid.c
    grid = result.grid
    rng = np.random.default_rng(seed)
    idx = np.flatnonzero(result.core_mask().ravel())
    pick = rng.choice(idx, size=min(n, idx.size), replace=False)
    pts = grid.coordinates()[pick]
    u = result.u_function()
    cfg = cfg or OperatorConfig(s=prof.s, n=3, r=1.0, R=60.0, resolution=6, tail_policy="callable_exterior",
                                n_polar=8, polar_levels=4, n_azimuth=24, tail_nodes=16)
    lap = np.array([fraclap_pointwise(u, p, cfg) for p in pts])
    e = np.array([0.0, 0.0, dz])
    uz = (u(pts + e) - u(pts - e)) / (2 * dz)
    val = u(pts)
    res = lap - c * uz - f.f(val)
    return {"points": pts, "residual": res, "max_abs": float(np.max(np.abs(res)))}


def edge_convergence(result: IterationResult, R_list=(0.0, 2.0, 4.0, 8.0, 16.0)) -> list:
    """sup |u - v| and sup (V - v) over grid nodes of Gamma_R inside the core, per R."""
    grid = result.grid
    pts = grid.coordinates()
    core = result.core_mask().ravel()
    u = result.u.values.ravel()
    v = result.sub(*pts.T)
    V = result.sup(*pts.T)
    rows = []
    for R in R_list:
        m = core & gamma_R_mask(result.sub.pyramid, pts, R)
        rows.append({"R": float(R), "count": int(m.sum()),
                     "sup_u_minus_v": float(np.max(np.abs(u[m] - v[m]))) if m.any() else float("nan"),
                     "sup_V_minus_v": float(np.max(V[m] - v[m])) if m.any() else float("nan")})
    return rows
