"""Radial mollifier with algebraic tail, the profile function P, the mollified
pyramid phi = rho * h and the speed-gap function S."""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import optimize, special
from scipy.interpolate import BPoly, CubicSpline

from ._horner import HornerPoly
from .fracop import OperatorConfig, fraclap_pointwise
from .pyramid import PyramidSpec, edge_distance, region_index


# ---------------------------------------------------------------------------
# smooth transition


def _step(xi, order: int = 0):
    """C-infinity step from 0 (xi <= 0) to 1 (xi >= 1) and its derivatives.

    w = sigma(u) with u = 1/(1-xi) - 1/xi and sigma the logistic function;
    every derivative vanishes at both ends.
    """
    xi = np.asarray(xi, dtype=float)
    shape = xi.shape
    xi = xi.reshape(-1)
    w = (xi >= 1).astype(float)
    d1 = np.zeros_like(w)
    d2 = np.zeros_like(w)
    m = (xi > 0) & (xi < 1)
    if np.any(m):
        x = xi[m]
        u = 1.0 / (1.0 - x) - 1.0 / x
        sg = 0.5 * (1.0 + np.tanh(0.5 * u))
        g = sg * (1.0 - sg)
        u1 = 1.0 / (1.0 - x) ** 2 + 1.0 / x**2
        u2 = 2.0 / (1.0 - x) ** 3 - 2.0 / x**3
        w[m] = sg
        d1[m] = g * u1
        d2[m] = g * (1.0 - 2.0 * sg) * u1**2 + g * u2
    w, d1, d2 = (v.reshape(shape) for v in (w, d1, d2))
    return (w, d1, d2)[: order + 1] if order else w


def _gauss(a, b, panels: int, nodes: int, grade: bool = False):
    """Composite Gauss-Legendre on [a, b]; with ``grade`` panels shrink geometrically toward a."""
    if b <= a:
        return np.zeros(0), np.zeros(0)
    if grade:
        edges = a + (b - a) * np.concatenate([[0.0], 2.0 ** -np.arange(panels - 1, -1, -1.0)])
    else:
        edges = np.linspace(a, b, panels + 1)
    t, w = np.polynomial.legendre.leggauss(nodes)
    lo, hi = edges[:-1, None], edges[1:, None]
    return (0.5 * (hi - lo) * t + 0.5 * (hi + lo)).ravel(), (0.5 * (hi - lo) * w).ravel()


def _jacobi01(n: int, beta: float):
    """Nodes and weights for int_0^1 t^beta f(t) dt."""
    x, w = special.roots_jacobi(n, 0.0, beta)
    return 0.5 * (1.0 + x), w / 2.0 ** (beta + 1.0)


# ---------------------------------------------------------------------------
# mollifier


@dataclass(frozen=True)
class MollifierSpec:
    """rho(x, y) = rho~(r): plateau, C-infinity drop, shelf, C-infinity join, algebraic tail.

    rho~ = 1 on [0, r_plateau]; it falls to the shelf height ``theta`` by
    ``r_drop``, stays there until the tail curve rho0 r^{-2s-2} comes down to
    ``theta`` at r_w, then bends onto that curve, which it follows exactly
    from ``r0`` on. The drop and the bend are C-infinity steps in log r.
    """

    s: float
    r_plateau: float
    r_drop: float
    r0: float
    rho0: float
    theta: float

    @property
    def r_shelf(self) -> float:
        return float((self.rho0 / self.theta) ** (1.0 / (2 * self.s + 2)))

    @property
    def breakpoints(self) -> tuple:
        return (self.r_plateau, self.r_drop, self.r_shelf, self.r0)

    def tail(self, r):
        return self.rho0 * np.asarray(r, dtype=float) ** (-2 * self.s - 2)

    def _log_profile(self, r):
        """G = log rho~ and its first two derivatives with respect to log r."""
        r = np.asarray(r, dtype=float)
        p = 2 * self.s + 2
        ell = np.log(np.maximum(r, 1e-300))
        l_pl, l_dr, l_sh, l_0 = np.log(self.breakpoints)
        L = np.log(self.theta)
        G = np.zeros_like(ell)
        G1 = np.zeros_like(ell)
        G2 = np.zeros_like(ell)
        m = (ell > l_pl) & (ell < l_dr)
        if np.any(m):
            d = l_dr - l_pl
            w, w1, w2 = _step((ell[m] - l_pl) / d, 2)
            G[m], G1[m], G2[m] = L * w, L * w1 / d, L * w2 / d**2
        m = (ell >= l_dr) & (ell <= l_sh)
        G[m] = L
        m = (ell > l_sh) & (ell < l_0)
        if np.any(m):
            d = l_0 - l_sh
            w, w1, w2 = _step((ell[m] - l_sh) / d, 2)
            D = np.log(self.rho0) - p * ell[m] - L
            G[m] = L + w * D
            G1[m] = w1 / d * D - p * w
            G2[m] = w2 / d**2 * D - 2 * p * w1 / d
        m = ell >= l_0
        G[m] = np.log(self.rho0) - p * ell[m]
        G1[m] = -p
        return G, G1, G2

    def rho(self, r, order: int = 0):
        """rho~(r) and, for order 1 or 2, its radial derivative."""
        r = np.asarray(r, dtype=float)
        G, G1, G2 = self._log_profile(r)
        v = np.exp(G)
        if order == 0:
            out = v
        elif order == 1:
            out = np.where(r > 0, v * G1 / np.where(r > 0, r, 1.0), 0.0)
        elif order == 2:
            rr = np.where(r > 0, r, 1.0)
            out = np.where(r > 0, v * (G2 + G1 * G1 - G1) / rr**2, 0.0)
        else:
            raise ValueError("order must be 0, 1 or 2")
        return out if out.ndim else float(out)

    def radial_rule(self, panels: int = 12, nodes: int = 24):
        """Nodes and weights on [0, r0] split at every breakpoint of rho~."""
        edges = (0.0,) + self.breakpoints
        xs, ws = [], []
        for a, b in zip(edges[:-1], edges[1:]):
            x, w = _gauss(a, b, panels, nodes)
            xs.append(x)
            ws.append(w)
        return np.concatenate(xs), np.concatenate(ws)

    def moment(self, k: int) -> float:
        """int_0^inf r^k rho~(r) dr for k < 2s + 1."""
        r, w = self.radial_rule()
        body = float(np.sum(w * r**k * self.rho(r)))
        return body + self.rho0 * self.r0 ** (k - 2 * self.s - 1) / (2 * self.s + 1 - k)

    @property
    def mass(self) -> float:
        return 2 * np.pi * self.moment(1)

    @property
    def second_moment(self) -> float:
        """int_0^inf r^2 rho~(r) dr."""
        return self.moment(2)


def rho_constant(s: float) -> float:
    """rho0 with (rho0 / 2s) B(1/2, 1/2 + s) = 1, the marginal tail normalization."""
    return 2 * s / special.beta(0.5, 0.5 + s)


def r0_requirement(s: float, m_star: float) -> float:
    """Smallest r0 with 2s (m*^2 + 2)(2 r0)^{-2s} < 1."""
    return 0.5 * (2 * s * (m_star**2 + 2)) ** (1.0 / (2 * s))


def build_mollifier(s: float, m_star: float, r_plateau: float = 0.1, r0: float = None, tol: float = 1e-13,
                    max_grow: int = 40) -> MollifierSpec:
    """Unit-mass mollifier; the shelf height is root-found, r0 grows until that is possible."""
    if not 0.5 < s < 1:
        raise ValueError("s must lie in (1/2, 1)")
    if not m_star > 0:
        raise ValueError("m* must be positive")
    rho0 = rho_constant(s)
    r0 = max(2.5, 1.05 * r0_requirement(s, m_star)) if r0 is None else float(r0)
    r_drop = 2.0 * r_plateau
    p = 2 * s + 2

    def make(log_theta, r0_):
        return MollifierSpec(s, r_plateau, r_drop, r0_, rho0, float(np.exp(log_theta)))

    for _ in range(max_grow):
        # the bend onto the tail spans at least a quarter unit of log r
        lo = np.log(rho0) - p * (np.log(r0) - 0.25)
        hi = min(0.0, np.log(rho0) - p * (np.log(r_drop) + 0.25))
        if lo < hi and make(lo, r0).mass < 1.0 < make(hi, r0).mass:
            lt = optimize.brentq(lambda L: make(L, r0).mass - 1.0, lo, hi, xtol=1e-15, rtol=1e-15, maxiter=200)
            spec = make(lt, r0)
            if abs(spec.mass - 1.0) > tol:
                raise RuntimeError("mollifier normalization failed")
            return spec
        r0 *= 1.2
    raise RuntimeError("no feasible mollifier found")


def save_mollifier(spec: MollifierSpec, path, r_max: float = None, n: int = 2001) -> None:
    r = np.linspace(0.0, r_max or 4 * spec.r0, n)
    np.savetxt(path, np.column_stack([r, spec.rho(r)]), delimiter=",", header="r,rho", comments="", fmt="%.17g")


# ---------------------------------------------------------------------------
# profile function P


def _tail_P(spec: MollifierSpec, x, order: int):
    """Contribution of the algebraic tail r >= r0 to P^{(order)}(x).

    With v = x^2 / r^2 the tail integrals are incomplete beta functions;
    for x >= r0 they reduce to the closed forms.
    """
    s, r0, c = spec.s, spec.r0, spec.rho0
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    z = x == 0
    if order == 0:
        out[z] = 2 * c * r0 ** (1 - 2 * s) / (2 * s - 1)
    elif order == 1:
        out[z] = -np.pi * c * r0 ** (-2 * s) / (2 * s)
    elif order == 2:
        out[z] = 2 * c * r0 ** (-2 * s - 1) / (2 * s + 1)
    else:
        out[z] = 0.0
    xp = x[~z]
    V = np.minimum(xp / r0, 1.0) ** 2
    B = special.beta(s + 0.5, 0.5)
    if order in (0, 1):
        J = V**s * np.arccos(np.sqrt(V)) / s + B * special.betainc(s + 0.5, 0.5, V) / (2 * s)
        if order == 0:
            I = special.beta(s - 0.5, 1.5) * special.betainc(s - 0.5, 1.5, V)
            out[~z] = c * xp ** (1 - 2 * s) * (I - J)
        else:
            out[~z] = -c * xp ** (-2 * s) * J
    elif order == 2:
        out[~z] = c * xp ** (-2 * s - 1) * B * special.betainc(s + 0.5, 0.5, V)
    else:
        out[~z] = -(2 * s + 2) * c * xp ** (-2 * s - 2) * special.beta(s + 1.5, 0.5) * special.betainc(s + 1.5, 0.5, V)
    return out


def _inner_P(spec: MollifierSpec, x, panels: int = 14, nodes: int = 24) -> np.ndarray:
    """Contributions of x <= r <= r0 to (P, -P', P'', P''') at each x; shape (len(x), 4).

    Written in u = sqrt(r^2 - x^2), where the half-plane integrals are
    smooth; the plateau is done in closed form.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.zeros(x.shape + (4,))
    rp = spec.r_plateau
    m = x < rp
    if np.any(m):
        xi = x[m]
        U = np.sqrt(rp * rp - xi * xi)
        at = np.arctan2(U, xi)
        out[m, 0] = 2 * (U**3 / 3 - 0.5 * xi * (rp * rp * at - xi * U))
        out[m, 1] = rp * rp * at - xi * U
        out[m, 2] = 2 * U
    tu, wu = _gauss(0.0, 1.0, panels, nodes)
    tg, wg = _gauss(0.0, 1.0, panels, nodes, grade=True)
    edges = spec.breakpoints
    for a, b in zip(edges[:-1], edges[1:]):
        m = x < b
        if not np.any(m):
            continue
        xi = x[m][:, None]
        ua = np.sqrt(np.maximum(a * a - xi * xi, 0.0))
        ub = np.sqrt(b * b - xi * xi)
        # grade toward u = 0 when the piece starts at r = x
        inside = xi >= a
        t = np.where(inside, tg, tu)
        w = np.where(inside, wg, wu) * (ub - ua)
        u = ua + (ub - ua) * t
        r = np.sqrt(xi * xi + u * u)
        rho = spec.rho(r)
        at = np.arctan2(u, xi)
        out[m, 0] += 2 * np.sum(w * rho * (u - xi * at) * u, axis=1)
        out[m, 1] += 2 * np.sum(w * rho * at * u, axis=1)
        out[m, 2] += 2 * np.sum(w * rho, axis=1)
        out[m, 3] += 2 * xi[:, 0] * np.sum(w * spec.rho(r, 1) / r, axis=1)
    return out


def _P_near(spec, x, order):
    return _tail_P(spec, x, order) + (-1.0 if order == 1 else 1.0) * _inner_P(spec, x)[:, order]


def P_eval(spec: MollifierSpec, x, order: int = 0, closed_form: bool = True):
    """P^{(order)}(x) for x >= 0, order 0..3.

    P(x) = int_x^inf m(x')(x' - x) dx' with m the marginal of rho, so that
    P'' = m, -P'(0) = 1/2 and P(x) = x^{1-2s}/(2s-1) once x >= r0. With
    ``closed_form=False`` that region is also computed from the integrals.
    """
    if order not in (0, 1, 2, 3):
        raise ValueError("order must be 0..3")
    xa = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(xa < 0):
        raise ValueError("x must be non-negative")
    s = spec.s
    if not closed_form:
        out = _P_near(spec, xa, order)
        return out if np.ndim(x) else float(out[0])
    out = np.empty_like(xa)
    far = xa >= spec.r0
    xf = xa[far]
    out[far] = (
        xf ** (1 - 2 * s) / (2 * s - 1),
        -xf ** (-2 * s),
        2 * s * xf ** (-2 * s - 1),
        -2 * s * (2 * s + 1) * xf ** (-2 * s - 2),
    )[order]
    out[~far] = _P_near(spec, xa[~far], order)
    return out if np.ndim(x) else float(out[0])


class PTable:
    """P and its first three derivatives: Hermite table on [0, r0], closed form beyond.

    Nodes are packed where rho~ bends (the drop after the plateau and the
    join onto the tail), since P''' = m' inherits those scales.
    """

    def __init__(self, spec: MollifierSpec, spacing: float = 4e-3):
        self.spec = spec
        x0 = 4 * spec.r_drop
        x1 = max(spec.r_shelf - 0.3, x0)
        self.x = np.unique(np.concatenate([
            np.linspace(0.0, x0, int(np.ceil(x0 / (spacing / 40))) + 1),
            np.linspace(x0, x1, int(np.ceil((x1 - x0) / spacing)) + 1),
            np.linspace(x1, spec.r0, int(np.ceil((spec.r0 - x1) / (spacing / 4))) + 1),
        ]))
        inner = _inner_P(spec, self.x)
        inner[:, 1] *= -1.0
        tail = np.stack([_tail_P(spec, self.x, i) for i in range(4)], axis=-1)
        self.values = inner + tail
        # one interpolant per order: differentiating a Hermite piece on a
        # fine grid amplifies roundoff by h^-k
        polys = [BPoly.from_derivatives(self.x, self.values[:, k:]) for k in range(3)]
        polys.append(CubicSpline(self.x, self.values[:, 3]))
        self._poly = [HornerPoly(q) for q in polys]

    def __call__(self, x, order: int = 0):
        x = np.asarray(x, dtype=float)
        s = self.spec.s
        xc = np.minimum(x, self.spec.r0)
        xf = np.maximum(x, self.spec.r0)
        far = (
            xf ** (1 - 2 * s) / (2 * s - 1),
            -xf ** (-2 * s),
            2 * s * xf ** (-2 * s - 1),
            -2 * s * (2 * s + 1) * xf ** (-2 * s - 2),
        )[order]
        return np.where(x >= self.spec.r0, far, self._poly[order](xc))

    def save(self, path, x_max: float = None, n: int = 2001) -> None:
        x = np.linspace(0.0, x_max or 4 * self.spec.r0, n)
        cols = [x] + [self(x, i) for i in range(4)]
        np.savetxt(path, np.column_stack(cols), delimiter=",", header="x,P,P1,P2,P3", comments="", fmt="%.17g")


# ---------------------------------------------------------------------------
# mollified pyramid


def _separable_axes(pyr: PyramidSpec):
    """(u, v) with h = |u.p| + |v.p| when the four normals come in opposite pairs."""
    if pyr.N != 4:
        return None
    n = pyr.normals
    scale = pyr.m_star
    if np.max(np.abs(n[0] + n[2])) > 1e-12 * scale or np.max(np.abs(n[1] + n[3])) > 1e-12 * scale:
        return None
    return 0.5 * (n[0] - n[1]), 0.5 * (n[0] + n[1])


@dataclass
class SurfaceDerivatives:
    """phi and its derivatives at a batch of points (leading shape ``shape``)."""

    phi: np.ndarray
    grad: np.ndarray
    hess: np.ndarray
    third: np.ndarray
    excess: np.ndarray  # phi - h, computed without cancellation
    gap: np.ndarray  # m*^2 - |grad phi|^2, computed without cancellation


@dataclass(eq=False)
class MollifiedSurface:
    """phi = rho * h with S = c / sqrt(1 + |grad phi|^2) - k.

    Pyramids whose normals come in opposite pairs (N = 4) split into two
    ridge functions |u.p| + |v.p|, and rho * |t| = |t| + 2 P(|t|) gives
    phi and all its derivatives from the P table. Every other pyramid is
    handled by the polar quadrature in ``polar_derivatives``, which is
    also the cross-check for the split form.
    """

    mollifier: MollifierSpec
    pyramid: PyramidSpec
    table: PTable = None
    force_polar: bool = False
    _axes: tuple = field(init=False, default=None)

    def __post_init__(self):
        if self.table is None:
            self.table = PTable(self.mollifier)
        self._axes = None if self.force_polar else _separable_axes(self.pyramid)

    @property
    def separable(self) -> bool:
        return self._axes is not None

    @cached_property
    def excess_bound(self) -> float:
        """2 pi m* int r^2 rho~ dr, the upper bound on phi - h."""
        return 2 * np.pi * self.pyramid.m_star * self.mollifier.second_moment

    def derivatives(self, x, y, order: int = 3) -> SurfaceDerivatives:
        """phi with derivatives up to ``order``; higher ones are left as zeros.

        ``order`` only trims work on the split form; the polar rule always
        returns everything.
        """
        x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        if self.separable:
            return self._split_derivatives(x, y, order)
        return self.polar_derivatives(x, y)

    def _split_derivatives(self, x, y, order: int = 3) -> SurfaceDerivatives:
        P = self.table
        shape = x.shape
        phi = np.zeros(shape)
        excess = np.zeros(shape)
        gap = np.zeros(shape)
        grad = np.zeros(shape + (2,))
        hess = np.zeros(shape + (2, 2))
        third = np.zeros(shape + (2, 2, 2))
        for ax in self._axes:
            a = float(np.hypot(*ax))
            e = ax / a
            t = x * e[0] + y * e[1]
            at = np.abs(t)
            sg = np.sign(t)
            p0 = P(at, 0)
            phi += a * (at + 2 * p0)
            excess += 2 * a * p0
            if order < 1:
                continue
            p1 = P(at, 1)
            g1 = sg * (1 + 2 * p1)
            # 1 - g1^2 = (1 - |g1|)(1 + |g1|) with 1 - |g1| = -2 P'
            gap += a * a * (-2 * p1) * (2 + 2 * p1)
            grad += (a * g1)[..., None] * e
            if order >= 2:
                hess += (2 * a * P(at, 2))[..., None, None] * np.outer(e, e)
            if order >= 3:
                third += (2 * a * sg * P(at, 3))[..., None, None, None] * np.einsum("i,j,k->ijk", e, e, e)
        return SurfaceDerivatives(phi, grad, hess, third, excess, gap)

    def polar_derivatives(self, x, y, panels: int = 10, nodes: int = 16, tail_nodes: int = 24) -> SurfaceDerivatives:
        """phi and derivatives by polar quadrature around each point.

        For a circle of radius r about p the arcs lying in each sector of
        the pyramid are found exactly; on an arc h is linear so every
        angular integral is closed form. Derivatives fall on rho: one
        derivative lands on h (piecewise constant gradient), the rest on rho.
        """
        x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        shape = x.shape
        pts = np.stack([x.ravel(), y.ravel()], axis=-1)
        res = [self._polar_point(p, panels, nodes, tail_nodes) for p in pts]
        stack = lambda i, extra: np.array([r[i] for r in res]).reshape(shape + extra)
        return SurfaceDerivatives(stack(0, ()), stack(1, (2,)), stack(2, (2, 2)), stack(3, (2, 2, 2)),
                                  stack(4, ()), stack(5, ()))

    def _radial_nodes(self, p, panels, nodes, tail_nodes):
        spec, pyr = self.mollifier, self.pyramid
        rp = float(np.hypot(*p))
        R_T = max(spec.r0, 4.0 * rp, 1.0)
        brk = {0.0, R_T, *spec.breakpoints, rp}
        for e in pyr.edge_directions:
            if p @ e > 0:
                brk.add(float(abs(p[0] * e[1] - p[1] * e[0])))
        brk = np.array(sorted(b for b in brk if 0.0 <= b <= R_T))
        rs, ws = [], []
        for a, b in zip(brk[:-1], brk[1:]):
            if b - a < 1e-14:
                continue
            m = 0.5 * (a + b)
            for lo, hi, flip in ((a, m, False), (m, b, True)):
                r, w = _gauss(0.0, hi - lo, panels, nodes, grade=True)
                rs.append(hi - r if flip else lo + r)
                ws.append(w)
        t, wt = _jacobi01(tail_nodes, 2 * spec.s - 2)
        rs.append(R_T / t)
        ws.append(wt * R_T * t ** (-2 * spec.s))
        return np.concatenate(rs), np.concatenate(ws)

    def _polar_point(self, p, panels, nodes, tail_nodes):
        spec, pyr = self.mollifier, self.pyramid
        n = pyr.normals
        N = pyr.N
        r, wr = self._radial_nodes(p, panels, nodes, tail_nodes)
        K = r.size
        # crossings of each circle with each edge ray
        E = pyr.edge_directions
        ep = E @ p
        disc = ep[None, :] ** 2 - p @ p + r[:, None] ** 2
        sq = np.sqrt(np.maximum(disc, 0.0))
        ang = np.full((K, 2 * N), np.inf)
        for sgn, off in ((1.0, 0), (-1.0, N)):
            t = ep[None, :] + sgn * sq
            ok = (disc > 0) & (t > 0)
            zx = t * E[:, 0] - p[0]
            zy = t * E[:, 1] - p[1]
            a = np.arctan2(zy, zx)
            ang[:, off : off + N] = np.where(ok, a, np.inf)
        ang.sort(axis=1)
        cnt = np.sum(np.isfinite(ang), axis=1)
        none = cnt == 0
        ang[none, 0] = 0.0
        cnt = np.maximum(cnt, 1)
        idx = np.arange(2 * N)[None, :]
        start = np.where(idx < cnt[:, None], ang, 0.0)
        nxt = np.roll(start, -1, axis=1)
        end = np.where(idx == (cnt[:, None] - 1), start[:, :1] + 2 * np.pi, nxt)
        end = np.where(idx < cnt[:, None], end, 0.0)
        mid = 0.5 * (start + end)
        zx = p[0] + r[:, None] * np.cos(mid)
        zy = p[1] + r[:, None] * np.sin(mid)
        fac = region_index(pyr, zx, zy)
        # closed-form arc integrals
        d = end - start
        c1 = np.sin(end) - np.sin(start)
        s1 = np.cos(start) - np.cos(end)
        cc = 0.5 * d + 0.25 * (np.sin(2 * end) - np.sin(2 * start))
        ss = 0.5 * d - 0.25 * (np.sin(2 * end) - np.sin(2 * start))
        cs = 0.5 * (np.sin(end) ** 2 - np.sin(start) ** 2)
        onehot = (fac[..., None] == np.arange(N)).astype(float)
        agg = lambda v: np.einsum("ka,kaj->kj", v, onehot)
        A, C, S_, CC, SS, CS = (agg(v) for v in (d, c1, s1, cc, ss, cs))
        rho, rho1, rho2 = spec.rho(r), spec.rho(r, 1), spec.rho(r, 2)
        J = int(region_index(pyr, *p))
        hp = n @ p
        # phi and the excess over h_J
        M = A @ hp + r * (C @ n[:, 0] + S_ @ n[:, 1])
        Mx = A @ (hp - hp[J]) + r * (C @ (n[:, 0] - n[J, 0]) + S_ @ (n[:, 1] - n[J, 1]))
        base = wr * r * rho
        phi = float(base @ M)
        excess = float(base @ Mx)
        W = base @ A  # sector weights of grad h
        grad = W @ n
        diff = n[:, None, :] - n[None, :, :]
        gap = 0.5 * float(W @ np.sum(diff**2, axis=-1) @ W)
        # hessian: int r rho' (-e_a) (grad h)_b
        E1 = np.stack([C, S_], axis=-1)  # (K, N, 2)
        hess = -np.einsum("k,kja,jb->ab", wr * r * rho1, E1, n)
        # third derivatives: Hess rho(-r e) = rho'' e e^T + rho'/r (I - e e^T)
        E2 = np.stack([np.stack([CC, CS], -1), np.stack([CS, SS], -1)], -1)  # (K, N, 2, 2)
        I2 = np.eye(2)
        kern = rho2[:, None, None, None] * E2 + (rho1 / np.where(r > 0, r, 1.0))[:, None, None, None] * (
            A[..., None, None] * I2 - E2
        )
        third = np.einsum("k,kjab,jc->abc", wr * r, kern, n)
        return phi, grad, hess, third, excess, gap

    # -- speed gap S ---------------------------------------------------------

    def S(self, x, y, order: int = 0):
        """S and, for order >= 1, its gradient, for order 2 also its hessian."""
        d = self.derivatives(x, y, order + 1)
        return self._S_from(d, order)

    def _S_from(self, d: SurfaceDerivatives, order: int):
        c, k = self.pyramid.c, self.pyramid.k
        G = np.sum(d.grad**2, axis=-1)
        q = 1.0 + G
        sq = np.sqrt(q)
        S = k * k * d.gap / (sq * (c + k * sq))
        if order == 0:
            return S
        v = np.einsum("...l,...li->...i", d.grad, d.hess)
        dS = -c * q[..., None] ** -1.5 * v
        if order == 1:
            return S, dS
        hh = np.einsum("...li,...lj->...ij", d.hess, d.hess) + np.einsum("...l,...lij->...ij", d.grad, d.third)
        d2S = -c * (q[..., None, None] ** -1.5 * hh - 3 * q[..., None, None] ** -2.5 * v[..., :, None] * v[..., None, :])
        return S, dS, d2S

    def S_callable(self):
        """S as a function of points with trailing dimension 2."""
        return lambda pts: self.S(pts[..., 0], pts[..., 1])

    def fraclap_S(self, points, cfg: OperatorConfig = None):
        """(-Delta)^s S at points (..., 2) by the pointwise quadrature."""
        cfg = cfg or OperatorConfig(s=self.mollifier.s, n=2, r=0.5, R=60.0, resolution=6,
                                    tail_policy="callable_exterior", n_polar=12, polar_levels=4)
        return fraclap_pointwise(self.S_callable(), np.asarray(points, dtype=float), cfg)


def mollify_pyramid(mollifier: MollifierSpec, pyramid: PyramidSpec, table_spacing: float = 4e-3,
                    force_polar: bool = False) -> MollifiedSurface:
    return MollifiedSurface(mollifier, pyramid, PTable(mollifier, table_spacing), force_polar)


def convolve_radial(mollifier: MollifierSpec, F, points, n_angle: int = 256, panels: int = 12, nodes: int = 24,
                    tail_nodes: int = 40):
    """(rho * F)(p) for a callable F of (x, y) by radial Gauss times angular trapezoid.

    Exact in angle for trigonometric polynomials of degree below ``n_angle``;
    used as an independent check of the sector-exact quadrature.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    phis = 2 * np.pi * np.arange(n_angle) / n_angle
    out = []
    for p in pts:
        R_T = max(mollifier.r0, 4 * float(np.hypot(*p)), 1.0)
        r, w = mollifier.radial_rule(panels, nodes)
        r2, w2 = _gauss(mollifier.r0, R_T, 8 * panels, nodes)
        t, wt = _jacobi01(tail_nodes, 2 * mollifier.s - 2)
        r = np.concatenate([r, r2, R_T / t])
        w = np.concatenate([w, w2, wt * R_T * t ** (-2 * mollifier.s)])
        zx = p[0] + r[:, None] * np.cos(phis)
        zy = p[1] + r[:, None] * np.sin(phis)
        M = np.mean(F(zx, zy), axis=1) * 2 * np.pi
        out.append(float(np.sum(w * r * mollifier.rho(r) * M)))
    out = np.array(out)
    return out if np.ndim(points) > 1 else float(out[0])


# ---------------------------------------------------------------------------
# decay audit


def _fit(x, y):
    X = np.column_stack([np.log(x), np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(X, np.log(y), rcond=None)
    rms = float(np.sqrt(np.mean((X @ coef - np.log(y)) ** 2)))
    return float(coef[0]), float(np.exp(coef[1])), rms


def bisector_rays(pyr: PyramidSpec, lam):
    """Points on the sector bisectors whose distance to E equals ``lam``; shape (N, len(lam), 2)."""
    lam = np.asarray(lam, dtype=float)
    out = []
    for n in pyr.normals:
        d = n / np.linalg.norm(n)
        unit = float(edge_distance(pyr, *d))
        out.append((lam / unit)[:, None] * d)
    return np.array(out)


def decay_audit(surface: MollifiedSurface, lam=None, fraclap_points: int = 6, cfg: OperatorConfig = None,
                threshold: float = 0.05) -> dict:
    """Log-log decay fits in lambda along the sector bisectors.

    Fits phi - h (target 1 - 2s), |grad(phi - h)| (-2s), |D^2 phi| (-2s-1),
    S (-2s) and |(-Delta)^s S| (target -2s) over a decade of lambda; also
    reports the ratio (phi - h) / P(lambda) and S / |P'(lambda)|.
    """
    s = surface.mollifier.s
    pyr = surface.pyramid
    lam = np.geomspace(5.0, 50.0, 24) if lam is None else np.asarray(lam, dtype=float)
    pts = bisector_rays(pyr, lam)
    d = surface.derivatives(pts[..., 0], pts[..., 1])
    J = region_index(pyr, pts[..., 0], pts[..., 1])
    dgrad = d.grad - pyr.normals[J]
    S = surface._S_from(d, 0)
    quantities = {
        "excess": d.excess,
        "grad_excess": np.linalg.norm(dgrad, axis=-1),
        "hess": np.linalg.norm(d.hess, axis=(-2, -1)),
        "S": S,
    }
    targets = {"excess": 1 - 2 * s, "grad_excess": -2 * s, "hess": -2 * s - 1, "S": -2 * s, "fraclap_S": -2 * s}
    fits = {}
    for q, vals in quantities.items():
        per_ray = [_fit(lam, np.abs(v)) for v in vals]
        fits[q] = {"exponent": float(np.mean([f[0] for f in per_ray])),
                   "rms": float(max(f[2] for f in per_ray)),
                   "target": targets[q]}
    lam_f = np.geomspace(lam[0], lam[-1], fraclap_points)
    pf = bisector_rays(pyr, lam_f)[0]
    fl = surface.fraclap_S(pf, cfg)
    e, C, rms = _fit(lam_f, np.abs(fl))
    fits["fraclap_S"] = {"exponent": e, "rms": rms, "target": targets["fraclap_S"], "lam": lam_f.tolist(),
                         "values": fl.tolist()}
    P = surface.table
    ratios = {
        "excess_over_P": (float(np.min(d.excess / P(lam))), float(np.max(d.excess / P(lam)))),
        "S_over_dP": (float(np.min(S / np.abs(P(lam, 1)))), float(np.max(S / np.abs(P(lam, 1))))),
    }
    resolved = all(f["rms"] < threshold for f in fits.values())
    return {"lam": lam.tolist(), "fits": fits, "ratios": ratios, "resolved": resolved}
