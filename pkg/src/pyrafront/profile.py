"""Planar fronts of the 1D fractional Allen-Cahn equation.

Solves (-Delta)^s Phi - k Phi' - f(Phi) = 0 with Phi(-inf) = 1,
Phi(+inf) = -1, Phi(0) = 0 for the pair (k, Phi) on a uniform lattice.
The operator is the band-limited lattice Laplacian of ``fracop``; the
exterior of the window [-M, M] is filled from a fitted algebraic tail.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import fft as sfft
from scipy import integrate, linalg, special
from scipy.interpolate import BPoly, CubicSpline
from scipy.sparse.linalg import LinearOperator, gmres

from ._horner import HornerPoly
from .fracop import lattice_weights

_D1 = np.array([-1 / 60, 3 / 20, -3 / 4, 0.0, 3 / 4, -3 / 20, 1 / 60])
_D2 = np.array([1 / 90, -3 / 20, 3 / 2, -49 / 18, 3 / 2, -3 / 20, 1 / 90])


# ---------------------------------------------------------------------------
# nonlinearities


@dataclass(frozen=True)
class Nonlinearity:
    """Bistable reaction term with zeros at -1, t0, 1.

    ``delta_star``, ``kappa1``, ``kappa2`` are derived by sampling:
    -f' > kappa1 wherever 1 - |t| < 2 delta_star, and kappa2 bounds |f'|
    on [-1 - delta_star, 1 + delta_star].
    """

    f: Callable
    df: Callable
    t0: float
    name: str = "custom"
    delta_star: float = field(init=False)
    kappa1: float = field(init=False)
    kappa2: float = field(init=False)

    def __post_init__(self):
        t = np.linspace(-1.0, 1.0, 4001)[1:-1]
        fv = self.f(t)
        if abs(self.f(-1.0)) > 1e-12 or abs(self.f(1.0)) > 1e-12 or abs(self.f(self.t0)) > 1e-12:
            raise ValueError("f must vanish at -1, t0 and 1")
        left, right = t < self.t0 - 1e-9, t > self.t0 + 1e-9
        if np.any(fv[left] >= 0) or np.any(fv[right] <= 0):
            raise ValueError("f must be negative on (-1, t0) and positive on (t0, 1)")
        if not (self.df(-1.0) < 0 and self.df(1.0) < 0):
            raise ValueError("f'(+-1) must be negative")
        # widest symmetric neighbourhoods of +-1 on which -f' stays positive
        widths = np.linspace(1e-4, 0.5, 5000)
        ok = []
        for w in widths:
            tt = np.concatenate([np.linspace(-1 - w, -1 + w, 201), np.linspace(1 - w, 1 + w, 201)])
            ok.append(np.all(-self.df(tt) > 0))
        ok = np.asarray(ok)
        wmax = widths[np.argmin(ok)] if not ok.all() else widths[-1]
        delta = min(0.24, 0.375 * wmax)
        near = np.concatenate(
            [np.linspace(-1 - 2 * delta, -1 + 2 * delta, 801), np.linspace(1 - 2 * delta, 1 + 2 * delta, 801)]
        )
        object.__setattr__(self, "delta_star", float(delta))
        object.__setattr__(self, "kappa1", float(np.min(-self.df(near))))
        wide = np.linspace(-1 - delta, 1 + delta, 4001)
        object.__setattr__(self, "kappa2", float(np.max(np.abs(self.df(wide)))))

    @classmethod
    def cubic(cls, t0: float) -> "Nonlinearity":
        """f(t) = -(t - t0)(t - 1)(t + 1)."""
        if not -1 < t0 < 1:
            raise ValueError("t0 must lie in (-1, 1)")
        f = lambda t: -(np.asarray(t) - t0) * (np.asarray(t) ** 2 - 1.0)
        df = lambda t: -(3.0 * np.asarray(t) ** 2 - 2.0 * t0 * np.asarray(t) - 1.0)
        return cls(f, df, t0, name=f"cubic(t0={t0!r})")

    @classmethod
    def sine(cls) -> "Nonlinearity":
        """f(t) = sin(pi t)/pi, the nonlinearity of the explicit half-order layer."""
        return cls(lambda t: np.sin(np.pi * np.asarray(t)) / np.pi, lambda t: np.cos(np.pi * np.asarray(t)), 0.0, name="sine")

    def sup_df(self) -> float:
        """sup |f'| on [-1, 1]."""
        return float(np.max(np.abs(self.df(np.linspace(-1, 1, 4001)))))


# ---------------------------------------------------------------------------
# solution container


@dataclass(eq=False)
class ProfileSolution:
    """Tabulated front with its algebraic tail model.

    Beyond |mu| > M the values follow 1 - |Phi| = A |mu|^{-2s},
    |Phi'| = B |mu|^{-1-2s}; inside, quintic Hermite interpolation of
    (Phi, Phi', Phi'') so the interpolant is C^2.
    """

    s: float
    k: float
    mu: np.ndarray
    phi: np.ndarray
    phi1: np.ndarray
    phi2: np.ndarray
    A_plus: float
    A_minus: float
    B_plus: float
    B_minus: float
    M: float
    residual: float = float("nan")

    def __post_init__(self):
        derivs = np.stack([self.phi, self.phi1, self.phi2], axis=-1)
        h0 = BPoly.from_derivatives(self.mu, derivs, extrapolate=True)
        self._h0 = HornerPoly(h0)
        self._h1 = HornerPoly(h0.derivative())
        self._h2 = HornerPoly(h0.derivative(2))
        self._edge = (self.mu[0], self.mu[-1])

    def __call__(self, mu, order: int = 0):
        return self.evaluate(mu, order)

    def evaluate(self, mu, order: int = 0):
        """Phi^{(order)}(mu) for order 0, 1, 2."""
        m = np.asarray(mu, dtype=float)
        s = self.s
        if order == 0:
            out = self._h0(m)
        elif order == 1:
            out = self._h1(m)
        elif order == 2:
            out = self._h2(m)
        else:
            raise ValueError("order must be 0, 1 or 2")
        out = np.array(out, dtype=float, copy=True)
        hi, lo = m > self._edge[1], m < self._edge[0]
        if np.any(hi):
            mh = m[hi]
            out[hi] = (
                -1.0 + self.A_plus * mh ** (-2 * s),
                -self.B_plus * mh ** (-1 - 2 * s),
                (1 + 2 * s) * self.B_plus * mh ** (-2 - 2 * s),
            )[order]
        if np.any(lo):
            ml = -m[lo]
            out[lo] = (
                1.0 - self.A_minus * ml ** (-2 * s),
                -self.B_minus * ml ** (-1 - 2 * s),
                -(1 + 2 * s) * self.B_minus * ml ** (-2 - 2 * s),
            )[order]
        return out if out.ndim else float(out)

    def rescaled(self, alpha: float, order: int = 0):
        """Phi_alpha^{(order)} with Phi_alpha(mu) = Phi(mu / alpha)."""
        return lambda mu: self.evaluate(np.asarray(mu) / alpha, order) * alpha ** (-order)

    @property
    def h(self) -> float:
        return float(self.mu[1] - self.mu[0])


# ---------------------------------------------------------------------------
# lattice problem


@dataclass(frozen=True)
class ProfileNumerics:
    M: float = 200.0
    nodes: int = 8192
    tol: float = 1e-10
    max_steps: int = 40
    coarse_nodes: int = 1024
    pad_factor: int = 3
    allow_half: bool = False


class _Lattice:
    """Residual, Jacobian action and tail fit on mu_i = -M + (i + 1/2) h."""

    def __init__(self, f: Nonlinearity, s: float, M: float, N: int, pad_factor: int = 3):
        if N % 2:
            raise ValueError("node count must be even")
        self.f, self.s, self.M, self.N = f, s, float(M), int(N)
        self.h = 2.0 * M / N
        self.mu = -M + (np.arange(N) + 0.5) * self.h
        self.J = J = pad_factor * N
        c, _ = lattice_weights(s, self.h, J)
        self.c = c
        kern = np.concatenate([c[::-1], c[1:]])
        self.P = sfft.next_fast_len(N + 4 * J)
        self.kfft = sfft.rfft(kern, self.P)
        self.mu_left = self.mu[0] - self.h * np.arange(J, 0, -1)
        self.mu_right = self.mu[-1] + self.h * np.arange(1, J + 1)
        w = self.mu
        self.fit_plus = (w >= M / 4) & (w <= M / 2)
        self.fit_minus = (w <= -M / 4) & (w >= -M / 2)
        self.core = np.abs(w) <= M / 2
        self.outer_plus, self.outer_minus = w >= M / 2, w <= -M / 2
        powers = (-2 * s, -2 * s - 1)
        basis = lambda x: np.stack([x**p for p in powers], axis=-1)
        self.basis_plus = basis(w[self.outer_plus])
        self.basis_minus = basis(-w[self.outer_minus])
        self.ext_basis_right = basis(self.mu_right)
        self.ext_basis_left = basis(-self.mu_left)
        m = N // 2
        self.phase_idx = np.array([m - 2, m - 1, m, m + 1])
        self.phase_w = np.array([-1.0, 9.0, 9.0, -1.0]) / 16.0
        # periodic preconditioner symbol on the N-point window
        xi = 2 * np.pi * np.fft.fftfreq(N, d=self.h)
        self.xi = xi
        self.abs_sym = np.abs(xi) ** (2 * s)
        self.d1_sym = 1j * (
            sum(_D1[3 + q] * np.exp(1j * xi * q * self.h) for q in range(-3, 4))
        ).imag / self.h

    # tail model -----------------------------------------------------------
    def tail_coeffs(self, phi, which: int = 0):
        """Least-squares A_+, A_- (which=0) for 1 -|Phi| ~ A |mu|^{-2s}."""
        s = self.s
        ep = self.mu[self.fit_plus] ** (-2 * s)
        em = (-self.mu[self.fit_minus]) ** (-2 * s)
        Ap = float(ep @ (1.0 + phi[self.fit_plus]) / (ep @ ep))
        Am = float(em @ (1.0 - phi[self.fit_minus]) / (em @ em))
        return Ap, Am

    def exterior_coeffs(self, phi):
        """Two-term fits of 1 - |Phi| in |mu|^{-2s}, |mu|^{-2s-1} on the outer half.

        Fitting up to the window edge keeps the padded values continuous with
        the interior, which the one-term reporting fit does not.
        """
        Ap = np.linalg.lstsq(self.basis_plus, 1.0 + phi[self.outer_plus], rcond=None)[0]
        Am = np.linalg.lstsq(self.basis_minus, 1.0 - phi[self.outer_minus], rcond=None)[0]
        return Ap, Am

    def extended(self, phi):
        Ap, Am = self.exterior_coeffs(phi)
        left = 1.0 - self.ext_basis_left @ Am
        right = -1.0 + self.ext_basis_right @ Ap
        return np.concatenate([left, phi, right])

    def conv(self, ext):
        out = sfft.irfft(sfft.rfft(ext, self.P) * self.kfft, self.P)
        return out[2 * self.J : 2 * self.J + self.N]

    def deriv(self, ext, stencil=_D1, power=1):
        J, N = self.J, self.N
        out = np.zeros(N)
        for q in range(-3, 4):
            out += stencil[3 + q] * ext[J + q : J + q + N]
        return out / self.h**power

    def phase(self, phi):
        return float(self.phase_w @ phi[self.phase_idx])

    def residual(self, phi, k):
        ext = self.extended(phi)
        return self.conv(ext) - k * self.deriv(ext) - self.f.f(phi)

    def full_residual(self, z):
        phi, k = z[:-1], z[-1]
        return np.append(self.residual(phi, k), self.phase(phi))

    # linearization (tail coefficients frozen) --------------------------------
    def jac_apply(self, phi, k, dphi, v):
        vp, vk = v[:-1], v[-1]
        ext = np.concatenate([np.zeros(self.J), vp, np.zeros(self.J)])
        out = self.conv(ext) - k * self.deriv(ext) - self.f.df(phi) * vp - vk * dphi
        return np.append(out, self.phase(vp))

    def dense_jacobian(self, phi, k, dphi):
        N, c = self.N, self.c
        col = c[:N] if N <= len(c) else np.concatenate([c, np.zeros(N - len(c))])
        Jm = linalg.toeplitz(col)
        for q in range(-3, 4):
            if q:
                Jm -= k * _D1[3 + q] / self.h * np.eye(N, k=q)
        Jm -= np.diag(self.f.df(phi))
        full = np.zeros((N + 1, N + 1))
        full[:N, :N] = Jm
        full[:N, N] = -dphi
        full[N, self.phase_idx] = self.phase_w
        return full

    def precond(self, phi, k):
        sigma = max(float(np.mean(-self.f.df(phi))), 0.5)
        sym = self.abs_sym - k * self.d1_sym + sigma

        def apply(v):
            out = np.empty_like(v)
            out[:-1] = np.real(sfft.ifft(sfft.fft(v[:-1]) / sym))
            out[-1] = v[-1]
            return out

        return LinearOperator((self.N + 1, self.N + 1), matvec=apply)


def _newton(lat: _Lattice, phi, k, tol, max_steps, dense: bool):
    z = np.append(phi, k)
    F = lat.full_residual(z)
    norm = np.max(np.abs(F))
    for _ in range(max_steps):
        if norm < tol:
            return z[:-1], z[-1], norm
        phi, k = z[:-1], z[-1]
        dphi = lat.deriv(lat.extended(phi))
        if dense:
            step = linalg.solve(lat.dense_jacobian(phi, k, dphi), -F)
        else:
            A = LinearOperator((lat.N + 1, lat.N + 1), matvec=lambda v: lat.jac_apply(phi, k, dphi, v))
            step, info = gmres(A, -F, M=lat.precond(phi, k), rtol=1e-13, atol=0.1 * tol, restart=80, maxiter=20)
        lam = 1.0
        while lam > 1e-4:
            trial = z + lam * step
            Ft = lat.full_residual(trial)
            nt = np.max(np.abs(Ft))
            if nt < (1 - 1e-4 * lam) * norm or nt < tol:
                break
            lam *= 0.5
        else:
            break
        z, F, norm = trial, Ft, nt
    return z[:-1], z[-1], norm


def _initial_guess(mu):
    return -2.0 / np.pi * np.arctan(mu)


def solve_profile(f: Nonlinearity, s: float, numerics: Optional[ProfileNumerics] = None, init=None) -> ProfileSolution:
    """Front (k, Phi) on [-M, M] with exterior from the fitted tail.

    A dense Newton solve on ``coarse_nodes`` points seeds a matrix-free
    Newton-GMRES solve on ``nodes`` points. ``init`` may supply an initial
    (mu, phi, k) triple instead of the arctan layer with k = 0.
    """
    num = numerics or ProfileNumerics()
    half_ok = num.allow_half and s == 0.5
    if not (0.5 < s < 1.0) and not half_ok:
        raise ValueError("order s must lie in (1/2, 1)")
    Nc = min(num.coarse_nodes, num.nodes)
    coarse = _Lattice(f, s, num.M, Nc, num.pad_factor)
    if init is None:
        phi0, k0 = _initial_guess(coarse.mu), 0.0
    else:
        mu_i, phi_i, k0 = init
        phi0 = np.interp(coarse.mu, mu_i, phi_i)
    tol_c = max(num.tol, 1e-11)
    phi, k, res = _newton(coarse, phi0, k0, tol_c, num.max_steps, dense=True)
    if res > tol_c:
        # fall back to the relaxation oracle for a better starting point
        mu_e, phi_e, k_e = evolve_profile(f, s, M=min(num.M, 60.0), nodes=600)
        phi, k, res = _newton(coarse, np.interp(coarse.mu, mu_e, phi_e, left=1, right=-1), k_e, tol_c, num.max_steps, dense=True)
        if res > tol_c:
            raise RuntimeError(f"profile solve did not converge (residual {res:.3e})")
    lat = coarse
    if num.nodes != Nc:
        lat = _Lattice(f, s, num.M, num.nodes, num.pad_factor)
        phi = CubicSpline(coarse.mu, phi)(lat.mu)
        phi, k, res = _newton(lat, phi, k, num.tol, num.max_steps, dense=False)
        if res > num.tol:
            raise RuntimeError(f"profile solve did not converge (residual {res:.3e})")
    return _package(lat, phi, k, num)


def _package(lat: _Lattice, phi, k, num) -> ProfileSolution:
    ext = lat.extended(phi)
    phi1 = lat.deriv(ext)
    phi2 = lat.deriv(ext, _D2, 2)
    if np.max(phi1) >= 0:
        raise RuntimeError(f"monotonicity violated: max Phi' = {np.max(phi1):.3e}")
    if np.any(np.abs(phi) >= 1):
        raise RuntimeError("profile left (-1, 1)")
    if k <= 0:
        warnings.warn(f"front speed k = {k:.6g} is not positive; pyramid construction is unavailable")
    Ap, Am = lat.tail_coeffs(phi)
    s = lat.s
    ep = lat.mu[lat.fit_plus] ** (-1 - 2 * s)
    em = (-lat.mu[lat.fit_minus]) ** (-1 - 2 * s)
    Bp = float(ep @ (-phi1[lat.fit_plus]) / (ep @ ep))
    Bm = float(em @ (-phi1[lat.fit_minus]) / (em @ em))
    res = float(np.max(np.abs(lat.residual(phi, k)[lat.core])))
    return ProfileSolution(s, float(k), lat.mu.copy(), phi.copy(), phi1, phi2, Ap, Am, Bp, Bm, float(lat.M), res)


def evolve_profile(f: Nonlinearity, s: float, M: float = 50.0, nodes: int = 500, t_max: float = 400.0, tol: float = 1e-7):
    """Independent relaxation solver: explicit pseudo-time with front tracking.

    Steps Phi_t = -[(-Delta)^s Phi - k Phi' - f(Phi)] and after each step
    translates the profile so its zero returns to mu = 0; the translation
    rate feeds back into k. Returns (mu, phi, k).
    """
    lat = _Lattice(f, s, M, nodes, 3)
    phi = _initial_guess(lat.mu)
    k = 0.0
    c0 = lat.c[0]
    dt = 0.4 / (c0 + lat.f.sup_df() + 2.0)
    steps = int(t_max / dt)
    gain = 0.2
    for n in range(steps):
        r = lat.residual(phi, k)
        phi_new = phi - dt * r
        # zero location by linear interpolation around the centre
        p0 = lat.phase(phi_new)
        slope = (phi_new[lat.N // 2] - phi_new[lat.N // 2 - 1]) / lat.h
        z = -p0 / slope
        phi_new = np.interp(lat.mu + z, lat.mu, phi_new, left=phi_new[0], right=phi_new[-1])
        k += gain * z / dt
        change = np.max(np.abs(phi_new - phi)) / dt
        phi = phi_new
        if change < tol and abs(z) / dt < tol:
            break
    return lat.mu, phi, k


# ---------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class DecayFit:
    exponent: float
    constant: float
    residual: float
    side: str
    quantity: str


def _loglog(x, y):
    X = np.column_stack([np.log(x), np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(X, np.log(y), rcond=None)
    rms = float(np.sqrt(np.mean((X @ coef - np.log(y)) ** 2)))
    return float(coef[0]), float(np.exp(coef[1])), rms


def decay_report(p: ProfileSolution, window=None, threshold: float = 0.05, strict: bool = False) -> dict:
    """Log-log fits of 1-|Phi|, |Phi'|, |Phi''| over [M/10, 0.95 M].

    The last few percent of the window are dropped: there the difference
    stencils reach into the fitted exterior and Phi'' picks up an edge kink.

    Returns {"fits": [...], "exponents": {quantity: mean over sides},
    "constants": {...}, "resolved": bool}. With ``strict`` an unresolved
    tail (fit rms above ``threshold``) raises.
    """
    lo, hi = window or (p.M / 10.0, 0.95 * p.M)
    fits = []
    for side, mask, mag in (
        ("plus", (p.mu >= lo) & (p.mu <= hi), p.mu),
        ("minus", (p.mu <= -lo) & (p.mu >= -hi), -p.mu),
    ):
        x = mag[mask]
        data = {
            "phi": 1.0 - np.abs(p.phi[mask]),
            "phi1": np.abs(p.phi1[mask]),
            "phi2": np.abs(p.phi2[mask]),
        }
        for q, y in data.items():
            e, c, r = _loglog(x, y)
            fits.append(DecayFit(e, c, r, side, q))
    exps = {q: float(np.mean([f.exponent for f in fits if f.quantity == q])) for q in ("phi", "phi1", "phi2")}
    consts = {f"{f.quantity}_{f.side}": f.constant for f in fits}
    resolved = all(f.residual < threshold for f in fits)
    if strict and not resolved:
        raise ValueError("tail not resolved: log-log fit residual above threshold")
    return {"fits": fits, "exponents": exps, "constants": consts, "resolved": resolved}


def profile_bounds(p: ProfileSolution, alphas=(0.5, 0.25)) -> dict:
    """C_Phi = max |mu^i Phi^(j)| over the grid for 0 <= i <= j, j = 1, 2.

    Also tabulates sup |mu Phi_alpha'|, sup |Phi_alpha'|, sup |Phi_alpha''|
    for Phi_alpha(mu) = Phi(mu/alpha), evaluated on the rescaled grid.
    """
    tab = {}
    for j, d in ((1, p.phi1), (2, p.phi2)):
        for i in range(j + 1):
            tab[(i, j)] = float(np.max(np.abs(p.mu**i * d)))
    C = max(tab.values())
    scaling = []
    for a in alphas:
        mu_a = a * p.mu
        d1 = p.phi1 / a
        d2 = p.phi2 / a**2
        scaling.append(
            {
                "alpha": a,
                "sup_mu_dphi": float(np.max(np.abs(mu_a * d1))),
                "sup_dphi": float(np.max(np.abs(d1))),
                "sup_d2phi": float(np.max(np.abs(d2))),
            }
        )
    return {"C_phi": C, "table": tab, "argmax_dphi": float(p.mu[np.argmax(np.abs(p.phi1))]), "scaling": scaling}


def pointwise_residual(p: ProfileSolution, f: Nonlinearity, mu, cfg=None):
    """(-Delta)^s Phi - k Phi' - f(Phi) at ``mu`` by the pointwise quadrature.

    The interpolant (tail model beyond M) serves as the exterior.
    """
    from .fracop import OperatorConfig, fraclap_pointwise

    cfg = cfg or OperatorConfig(s=p.s, n=1, r=0.5, R=4 * p.M, resolution=12, tail_policy="callable_exterior", allow_half=p.s == 0.5)
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    lap = fraclap_pointwise(p.evaluate, mu, cfg)
    return lap - p.k * p.evaluate(mu, 1) - f.f(p.evaluate(mu))


# ---------------------------------------------------------------------------
# persistence

_HEADER_KEYS = ("s", "k", "M", "tail_A_plus", "tail_A_minus", "tail_B_plus", "tail_B_minus")


def save_profile(p: ProfileSolution, path) -> None:
    """Text header plus CSV rows mu,phi,phi1,phi2 at 17 significant digits."""
    vals = (p.s, p.k, p.M, p.A_plus, p.A_minus, p.B_plus, p.B_minus)
    with open(path, "w") as fh:
        for key, v in zip(_HEADER_KEYS, vals):
            fh.write(f"# {key}={v!r}\n")
        fh.write("mu,phi,phi1,phi2\n")
        for row in zip(p.mu, p.phi, p.phi1, p.phi2):
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def load_profile(path) -> ProfileSolution:
    head = {}
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                head[key.strip()] = float(val)
            elif line[:1].isalpha():
                continue
            elif line.strip():
                rows.append([float(v) for v in line.split(",")])
    missing = [k for k in _HEADER_KEYS if k not in head]
    if missing:
        raise ValueError(f"profile file lacks header keys {missing}")
    a = np.asarray(rows)
    return ProfileSolution(
        head["s"], head["k"], a[:, 0], a[:, 1], a[:, 2], a[:, 3],
        head["tail_A_plus"], head["tail_A_minus"], head["tail_B_plus"], head["tail_B_minus"], head["M"],
    )


# ---------------------------------------------------------------------------
# explicit layer family


def _fourier(g, mu, kind, r_cut=np.inf):
    """int_0^inf g(r) cos|sin(mu r) dr.

    When g is negligible beyond ``r_cut`` and fewer than ~60 oscillations fit
    below it, plain adaptive quadrature is used; otherwise QUADPACK's
    cycle-by-cycle Fourier rule with extrapolation.
    """
    trig = np.cos if kind == "cos" else np.sin
    if mu * r_cut < 400.0:
        return integrate.quad(lambda r: g(r) * trig(mu * r), 0.0, r_cut, limit=500, epsabs=1e-15)[0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        return integrate.quad(g, 0.0, np.inf, weight=kind, wvar=mu, limlst=200, limit=200, epsabs=1e-14)[0]


def _cutoff(t, s):
    # exp(-t r^{2s}) < 1e-20 beyond this radius
    return (46.0 / t) ** (1.0 / (2.0 * s))


def layer_kernel(mu, t: float, s: float, order: int = 0):
    """p_t(mu) = (1/pi) int_0^inf cos(mu r) exp(-t r^{2s}) dr (or its derivative)."""
    if not t > 0:
        raise ValueError("t must be positive")
    out = []
    for m in np.asarray(mu, dtype=float).ravel():
        a = abs(m)
        if order == 0:
            if a == 0:
                v = special.gamma(1 + 1 / (2 * s)) * t ** (-1 / (2 * s))
            else:
                v = _fourier(lambda r: np.exp(-t * r ** (2 * s)), a, "cos", _cutoff(t, s))
        else:
            v = 0.0 if a == 0 else -np.sign(m) * _fourier(lambda r: r * np.exp(-t * r ** (2 * s)), a, "sin", _cutoff(t, s))
        out.append(v / np.pi)
    out = np.asarray(out, dtype=float).reshape(np.shape(mu))
    return out if out.ndim else float(out)


_FAR = 2000.0


def layer(mu, t: float, s: float, order: int = 0):
    """v_t(mu) = -1 + 2 int_{-inf}^mu p_t; order 1 and 2 return 2 p_t and 2 p_t'."""
    if order:
        return 2.0 * layer_kernel(mu, t, s, order - 1)
    out = []
    for m in np.asarray(mu, dtype=float).ravel():
        if m == 0:
            out.append(0.0)
            continue
        a = abs(m)
        if a > _FAR:
            # 1 - |v_t| ~ (K / 2s) |mu|^{-2s}; next term is relatively O(|mu|^{-2s})
            out.append(np.sign(m) * (1.0 - layer_asymptotic_constant(t, s) / (2 * s) * a ** (-2 * s)))
            continue
        g = lambda r: np.exp(-t * r ** (2 * s))
        rc = _cutoff(t, s)
        if a * rc < 400.0:
            val = integrate.quad(lambda r: np.sinc(a * r / np.pi) * a * g(r), 0.0, rc, limit=500, epsabs=1e-15)[0]
        else:
            head = integrate.quad(lambda r: np.sinc(a * r / np.pi) * a * g(r), 0.0, 1.0, epsabs=1e-14, limit=500)[0]
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", integrate.IntegrationWarning)
                tail = integrate.quad(lambda r: g(r) / r, 1.0, np.inf, weight="sin", wvar=a, limlst=200, epsabs=1e-14)[0]
            val = head + tail
        out.append(np.sign(m) * 2.0 / np.pi * val)
    out = np.asarray(out, dtype=float).reshape(np.shape(mu))
    return out if out.ndim else float(out)


def layer_fraclap(mu, t: float, s: float):
    """(-Delta)^s v_t(mu) from the transform of v_t' = 2 p_t."""
    out = []
    for m in np.asarray(mu, dtype=float).ravel():
        if m == 0:
            out.append(0.0)
            continue
        g = lambda r: r ** (2 * s - 1) * np.exp(-t * r ** (2 * s))
        out.append(np.sign(m) * 2.0 / np.pi * _fourier(g, abs(m), "sin", _cutoff(t, s)))
    out = np.asarray(out, dtype=float).reshape(np.shape(mu))
    return out if out.ndim else float(out)


def layer_asymptotic_constant(t: float, s: float) -> float:
    """lim |mu|^{1+2s} v_t'(mu) = 4 t s Gamma(2s) sin(pi s) / pi."""
    return 4.0 * t * s * special.gamma(2 * s) * np.sin(np.pi * s) / np.pi


@dataclass(frozen=True)
class LayerFamily:
    t: float
    s: float

    def p(self, mu, order: int = 0):
        return layer_kernel(mu, self.t, self.s, order)

    def v(self, mu, order: int = 0):
        return layer(mu, self.t, self.s, order)
