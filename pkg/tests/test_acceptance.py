"""The nine acceptance criteria at their stated tolerances and runtime budgets.

Each test prints one ``criterion N: PASS/FAIL`` line (repeated in the
terminal summary). Criteria 5, 6 and 8 are known to fail on some items;
the failing figures are printed rather than hidden.
"""
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.transform import Rotation
from scipy.special import gamma

from conftest import ACCEPTANCE_LINES
from pyrafront import harness, wavelab
from pyrafront.fracop import OperatorConfig, beta_ratio, fraclap_pointwise
from pyrafront.mollify import P_eval, build_mollifier, convolve_radial, decay_audit, mollify_pyramid
from pyrafront.profile import Nonlinearity, decay_report, layer, layer_kernel, solve_profile
from pyrafront.pyramid import height, make_regular_pyramid

S = 0.75
pytestmark = pytest.mark.slow


class Criterion:
    """Collects named checks, times the block and reports one line."""

    def __init__(self, number: int, title: str, budget: float):
        self.number, self.title, self.budget = number, title, budget
        self.items = []

    def check(self, label: str, ok, value=None):
        self.items.append((label, bool(ok), value))

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            return False
        elapsed = time.perf_counter() - self.t0
        self.check(f"runtime<{self.budget:g}s", elapsed < self.budget, round(elapsed, 1))
        failed = [f"{l}={v}" if v is not None else l for l, ok, v in self.items if not ok]
        status = "PASS" if not failed else "FAIL"
        line = f"criterion {self.number}: {status} {self.title} ({elapsed:.0f}s)"
        if failed:
            line += " failing: " + ", ".join(failed)
        print(line)
        ACCEPTANCE_LINES.append(line)
        assert not failed, line
        return False


@pytest.fixture(scope="module")
def f():
    return Nonlinearity.cubic(-0.3)


@pytest.fixture(scope="module")
def prof(f):
    return solve_profile(f, S)


@pytest.fixture(scope="module")
def geometry(prof):
    pyr = make_regular_pyramid(4, 2 * prof.k, prof.k)
    moll = build_mollifier(S, pyr.m_star)
    return pyr, moll, mollify_pyramid(moll, pyr)


@pytest.fixture(scope="module")
def r1_report(prof, geometry):
    t0 = time.perf_counter()
    rep = wavelab.estimate_R1(prof, geometry[2])
    rep["elapsed"] = time.perf_counter() - t0
    return rep


@pytest.fixture(scope="module")
def accepted(prof, geometry, f, r1_report):
    surf = geometry[2]
    par = wavelab.select_parameters(prof, surf, f, r1_report)
    sup = wavelab.SuperSolution(prof, surf, par.eps, par.alpha)
    t0 = time.perf_counter()
    out = wavelab.verify_super(sup, par, f, n=1000, columns=100)
    out["elapsed"] = time.perf_counter() - t0
    return par, out


def test_criterion_1_operator_oracles():
    with Criterion(1, "operator oracles", 60) as c:
        for s in (0.6, 0.75, 0.9):
            cfg = OperatorConfig(s=s, n=1, R=2000.0)
            for w in (0.5, 1.0, 2.0):
                x = np.linspace(-3, 3, 7)
                err = np.max(np.abs(fraclap_pointwise(lambda y: np.cos(w * y), x, cfg) - w ** (2 * s) * np.cos(w * x)))
                c.check(f"cos s={s} w={w}", err <= 1e-6, err)
        c.check("constant ratio n=1 s=1/2", abs(beta_ratio(1, 0.5) - 2.0) <= 1e-8, beta_ratio(1, 0.5))
        gauss = lambda p: np.exp(-np.sum(p**2, axis=-1))
        cfg = OperatorConfig(s=S, n=3, R=10.0)
        hom, rig = [], []
        for seed in range(20):
            rng = np.random.default_rng(seed)
            a = rng.uniform(0.5, 2.5)
            x = rng.uniform(-0.6, 0.6, 3)
            lhs = fraclap_pointwise(lambda p: gauss(a * p), x, cfg)
            hom.append(abs(lhs - a ** (2 * S) * fraclap_pointwise(gauss, a * x, cfg)))
            A = Rotation.random(random_state=seed).as_matrix()
            b = rng.uniform(-0.5, 0.5, 3)
            u = lambda p: np.exp(-np.sum((p - 0.3) ** 2 * np.array([1.0, 2.0, 0.5]), axis=-1))
            cfg7 = OperatorConfig(s=0.7, n=3, R=12.0)
            lhs = fraclap_pointwise(lambda p: u(p @ A.T + b), x, cfg7)
            rig.append(abs(lhs - fraclap_pointwise(u, A @ x + b, cfg7)))
        c.check("homogeneity x20", max(hom) <= 1e-6, max(hom))
        c.check("rigid motion x20", max(rig) <= 1e-6, max(rig))


def test_criterion_2_layer_oracle():
    with Criterion(2, "explicit layer oracle", 120) as c:
        phi = lambda m: -2 / np.pi * np.arctan(m)
        f = Nonlinearity.sine()
        mu = np.array([-50.0, -8.0, -2.0, -0.5, 0.0, 0.3, 1.0, 4.0, 20.0])
        cfg = OperatorConfig(s=0.5, n=1, R=200.0, allow_half=True, tail_policy="callable_exterior")
        res = np.max(np.abs(fraclap_pointwise(phi, mu, cfg) - 0 * mu - f.f(phi(mu))))
        c.check("profile residual k=0", res <= 1e-6, res)
        kern = []
        for t in (0.2, 1.0, 3.0):
            m = np.linspace(-30, 30, 61)
            kern.append(np.max(np.abs(layer_kernel(m, t, 0.5) - t / (np.pi * (t * t + m * m)))))
        c.check("half-order kernel", max(kern) <= 1e-8, max(kern))
        for s in (0.6, 0.75, 0.9):
            const = 4 * s * gamma(2 * s) * np.sin(np.pi * s) / np.pi
            ratio = 400.0 ** (1 + 2 * s) * layer(400.0, 1.0, s, 1) / const
            c.check(f"tail constant s={s}", abs(ratio - 1) <= 0.02, ratio)


def test_criterion_3_profile_decay(prof):
    with Criterion(3, "profile decay", 600) as c:
        p = solve_profile(Nonlinearity.cubic(-0.3), S)
        rep = decay_report(p)
        e = rep["exponents"]
        c.check("phi", abs(e["phi"] + 2 * S) <= 0.1, e["phi"])
        c.check("phi1", abs(e["phi1"] + 1 + 2 * S) <= 0.1, e["phi1"])
        c.check("phi2", e["phi2"] <= -1 - 2 * S + 0.1, e["phi2"])
        c.check("window M=200", p.M == 200.0, p.M)


def test_criterion_4_mollifier(geometry):
    pyr, moll, surf = geometry
    with Criterion(4, "mollifier and P", 300) as c:
        slope = -P_eval(moll, 0.0, 1)
        c.check("-P'(0)=1/2", abs(slope - 0.5) <= 1e-8, slope)
        seam = max(abs(P_eval(moll, moll.r0, i, closed_form=False) - P_eval(moll, moll.r0, i)) for i in range(4))
        c.check("tail seam", seam <= 1e-8, seam)
        c.check("normalization", abs(moll.mass - 1) <= 1e-10, moll.mass)
        pts = np.random.default_rng(0).uniform(-20, 20, size=(20, 2))
        rep = max(np.max(np.abs(convolve_radial(moll, lambda X, Y, n=n: n[0] * X + n[1] * Y, pts, n_angle=8) - pts @ n))
                  for n in pyr.normals)
        c.check("rho*h_j=h_j", rep <= 1e-9, rep)
        pts = np.random.default_rng(1).uniform(-40, 40, size=(1000, 2))
        d = surf.derivatives(pts[:, 0], pts[:, 1], 1)
        ex = d.phi - height(pyr, pts[:, 0], pts[:, 1])
        g = np.linalg.norm(d.grad, axis=-1)
        c.check("h<phi", int(np.sum(ex <= 0)) == 0, int(np.sum(ex <= 0)))
        c.check("phi<=h+bound", int(np.sum(ex > surf.excess_bound)) == 0, int(np.sum(ex > surf.excess_bound)))
        c.check("|grad phi|<m*", int(np.sum(g >= pyr.m_star)) == 0, int(np.sum(g >= pyr.m_star)))


def test_criterion_5_S_audit(geometry):
    pyr, moll, surf = geometry
    with Criterion(5, "S audit", 600) as c:
        Sv = surf.S(*np.random.default_rng(2).uniform(-60, 60, size=(2, 2000)))
        c.check("0<S<=c-k", np.all(Sv > 0) and np.all(Sv <= pyr.c - pyr.k), (float(Sv.min()), float(Sv.max())))
        apex = surf.S(0.0, 0.0) - (pyr.c - pyr.k)
        c.check("S(0,0)=c-k", abs(apex) <= 1e-8, apex)
        fits = decay_audit(surf)["fits"]
        c.check("S exponent", abs(fits["S"]["exponent"] + 2 * S) <= 0.15, round(fits["S"]["exponent"], 3))
        c.check("(-Delta)^s S exponent", abs(fits["fraclap_S"]["exponent"] + 2 * S) <= 0.15,
                round(fits["fraclap_S"]["exponent"], 3))


def test_criterion_6_R1_scaling(r1_report):
    rep = r1_report
    with Criterion(6, "R1 scaling", 1800) as c:
        c.t0 -= rep["elapsed"]
        slope = rep["alpha_fit"]["exponent"]
        c.check("alpha slope=-s+-0.15", abs(slope + S) <= 0.15, round(slope, 3))
        lam = [f["exponent"] for f in rep["lambda_fits"]]
        c.check("lambda slope<=-2s+0.15", max(lam) <= -2 * S + 0.15, round(max(lam), 3))
        band = float(np.max(rep["z_band"]))
        c.check("z band<=5", band <= 5, round(band, 2))
        c.check("quadrature resolved", rep["unresolved"] == 0, rep["unresolved"])
        c.check("sample count ~100", 50 <= rep["R1"].size <= 200, rep["R1"].size)


def test_criterion_7_super_solution(accepted):
    par, out = accepted
    with Criterion(7, "super-solution", 1200) as c:
        c.t0 -= out["elapsed"]
        c.check("eps,alpha<1/2", par.eps < 0.5 and par.alpha < 0.5, (par.eps, par.alpha))
        c.check("accepted within 3 retries", out["accepted"] and len(out["attempts"]) <= 4, len(out["attempts"]))
        c.check("min L[V]>0", out["min_LV"] > 0, out["min_LV"])
        c.check("v<V at samples", out["min_gap"] > 0, out["min_gap"])
        c.check("1000 samples", len(out["LV"]) == 1000, len(out["LV"]))
        c1 = out["case"] == 1
        bound = 0.9 * 0.5 * out["super"].eps * par.kappa1 * out["S"][c1]
        c.check("case-1 bound", np.all(out["LV"][c1] >= bound), float(np.min(out["LV"][c1] - bound)))


def test_criterion_8_iteration(prof, f, geometry, accepted):
    pyr, moll, surf = geometry
    sup = accepted[1]["super"]
    sub = wavelab.SubSolution(prof, pyr)
    with Criterion(8, "monotone iteration", 3600) as c:
        res = wavelab.monotone_iterate(sub, sup, f, wavelab.IterationConfig())
        h = res.history
        order = min(min(r["sub_margin"], r["super_margin"]) for r in h)
        mono = min(r["monotone_margin"] for r in h)
        c.check("ordering on core", order >= -1e-10, order)
        c.check("monotone steps", mono >= -1e-10, mono)
        r = [x["residual"] for x in h]
        c.check("residual decreasing", all(b < a for a, b in zip(r, r[1:])),
                sum(b >= a for a, b in zip(r, r[1:])))
        c.check("converged within 50", res.converged and len(h) <= 50, f"{len(h)} steps, last {r[-1]:.2e}")
        rr = wavelab.iteration_residual(res, f, n=50)
        c.check("|L[u]|<=1e-4", rr["max_abs"] <= 1e-4, rr["max_abs"])
        tab = [row["sup_u_minus_v"] for row in wavelab.edge_convergence(res, (2.0, 4.0, 8.0, 16.0))]
        c.check("Gamma_R non-increasing", all(b <= a for a, b in zip(tab, tab[1:])), [round(t, 4) for t in tab])


def test_criterion_9_determinism(tmp_path):
    text = """
profile.M = 50
profile.nodes = 2048
box.L = 12
box.n = 24
iteration.r1_mode = drop
sampling.sub_points = 3
sampling.verify_points = 20
sampling.verify_columns = 4
sampling.ordering_points = 1000
sampling.residual_points = 4
sampling.r1_alphas = 0.4,0.2
sampling.r1_lambda = 1,4
sampling.r1_offsets = 0
"""
    with Criterion(9, "determinism", 600) as c:
        outs = []
        for name in ("a", "b"):
            cfg = harness.ExperimentConfig.from_text(text).with_output(tmp_path / name)
            man = harness.run(cfg)
            harness.report(man)
            outs.append(Path(man.directory))
        csvs = sorted(p.name for p in outs[0].glob("*.csv"))
        diff = [n for n in csvs if (outs[0] / n).read_bytes() != (outs[1] / n).read_bytes()]
        c.check("csv files written", len(csvs) >= 10, len(csvs))
        c.check("bit-identical csv", not diff, diff)
