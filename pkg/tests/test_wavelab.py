import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pyrafront.fracop import OperatorConfig, fraclap_pointwise
from pyrafront.mollify import build_mollifier, mollify_pyramid
from pyrafront.profile import Nonlinearity, solve_profile
from pyrafront.pyramid import facets, gamma_R_mask, make_regular_pyramid, region_index
from pyrafront.wavelab import (
    IterationConfig,
    SubSolution,
    SuperSolution,
    SuperSolutionParams,
    edge_convergence,
    eval_sub,
    estimate_R1,
    eval_super,
    mid_range,
    monotone_iterate,
    omega_min,
    ordering_check,
    phi_star,
    r1_samples,
    residual_sub,
    select_parameters,
    stratified_samples,
    tail_constant,
    tangent_frame,
    verify_super,
)

S_ORDER = 0.75
# eps and alpha from the full parameter selection on the default geometry
EPS, ALPHA = 0.007630244358613256, 2.4115930735082452e-05


@pytest.fixture(scope="module")
def f():
    return Nonlinearity.cubic(-0.3)


@pytest.fixture(scope="module")
def prof(f):
    return solve_profile(f, S_ORDER)


@pytest.fixture(scope="module")
def pyr(prof):
    return make_regular_pyramid(4, 2 * prof.k, prof.k)


@pytest.fixture(scope="module")
def surf(pyr):
    return mollify_pyramid(build_mollifier(S_ORDER, pyr.m_star), pyr)


@pytest.fixture(scope="module")
def sub(prof, pyr):
    return SubSolution(prof, pyr)


@pytest.fixture(scope="module")
def sup(prof, surf):
    return SuperSolution(prof, surf, EPS, ALPHA)


@pytest.fixture(scope="module")
def small_run(sub, sup, f):
    buf = io.StringIO()
    res = monotone_iterate(sub, sup, f, IterationConfig(L=12.0, n=24, r1_mode="drop"), buf)
    return res, buf.getvalue()


class TestSub:
    def test_unit_normal(self, sub, pyr):
        for a, b in pyr.normals:
            assert (pyr.k / pyr.c) ** 2 * (1 + a * a + b * b) == pytest.approx(1.0, abs=1e-14)
        assert np.allclose(np.linalg.norm([sub.facet_normal(j) for j in range(pyr.N)], axis=1), 1.0, atol=1e-14)

    def test_limits_on_axis(self, sub):
        z = np.array([1e3, 1e5])
        assert np.all(np.abs(eval_sub(sub, 0.0, 0.0, z) + 1) < 1e-3)
        assert eval_sub(sub, 0.0, 0.0, 1e5) < eval_sub(sub, 0.0, 0.0, 1e3)
        assert eval_sub(sub, 0.0, 0.0, -1e5) == pytest.approx(1.0, abs=1e-6)

    def test_range(self, sub):
        P = np.random.default_rng(0).uniform(-50, 50, size=(2000, 3))
        v = sub(*P.T)
        assert np.all((v > -1) & (v < 1))

    @given(st.floats(-40, 40), st.floats(-40, 40), st.floats(-40, 40))
    @settings(max_examples=40, deadline=None)
    def test_rotation_symmetry(self, sub, x, y, z):
        t = 2 * np.pi / sub.pyramid.N
        xr, yr = np.cos(t) * x - np.sin(t) * y, np.sin(t) * x + np.cos(t) * y
        assert sub(xr, yr, z) == pytest.approx(sub(x, y, z), abs=1e-13)

    def test_equals_max_of_facets(self, sub):
        P = np.random.default_rng(1).uniform(-30, 30, size=(500, 3))
        vals = np.stack([sub.facet(j, *P.T) for j in range(sub.pyramid.N)])
        assert np.allclose(sub(*P.T), vals.max(axis=0), atol=1e-14)

    def test_argmax_matches_region(self, sub, pyr):
        P = np.random.default_rng(2).uniform(-30, 30, size=(2000, 3))
        top = np.sort(facets(pyr, P[:, 0], P[:, 1]), axis=-1)
        clear = top[:, -1] - top[:, -2] > 1e-6
        got = sub.maximizing_facet(*P.T)
        assert np.array_equal(got[clear], region_index(pyr, P[clear, 0], P[clear, 1]))

    def test_facet_residual(self, sub, f):
        pts = np.array([[3.0, -1.0, 2.0], [0.5, 0.5, 0.0], [-7.0, 2.0, 12.0]])
        out = residual_sub(sub, f, pts)
        assert out["max_abs"] <= 5e-6

    def test_3d_operator_matches_1d(self, sub, prof):
        pts = np.random.default_rng(3).uniform(-10, 10, size=(4, 3))
        out = residual_sub(sub, Nonlinearity.cubic(-0.3), pts)
        cfg = OperatorConfig(s=S_ORDER, n=1, r=0.5, R=4 * prof.M, resolution=12, tail_policy="callable_exterior")
        one = fraclap_pointwise(prof.evaluate, out["mu"], cfg)
        assert np.allclose(out["operator"], one, atol=5e-6)


class TestFrame:
    @given(st.floats(-50, 50), st.floats(-50, 50))
    @settings(max_examples=60, deadline=None)
    def test_orthonormal(self, px, py):
        T = tangent_frame(px, py)
        assert np.allclose(T @ T.T, np.eye(3), atol=1e-14)
        q = np.sqrt(1 + px * px + py * py)
        assert np.allclose(T[0], [1 / q, -px / q, -py / q], atol=1e-14)

    def test_batched(self):
        g = np.random.default_rng(4).normal(size=(5, 7, 2))
        T = tangent_frame(g[..., 0], g[..., 1])
        assert T.shape == (5, 7, 3, 3)
        assert np.allclose(np.einsum("...ij,...kj->...ik", T, T), np.eye(3), atol=1e-14)


class TestSuper:
    def test_parameters_validated(self, prof, surf):
        with pytest.raises(ValueError):
            SuperSolution(prof, surf, 0.0, 0.1)
        with pytest.raises(ValueError):
            SuperSolution(prof, surf, 0.1, 1.0)

    def test_value_is_front_plus_gap(self, sup):
        x, y, z = 3.0, -2.0, 5.0
        assert eval_super(sup, x, y, z) == pytest.approx(sup.base(x, y, z) + EPS * sup.S(x, y), abs=1e-15)

    def test_mu_hat_affine_in_z(self, sup):
        m1, q1 = sup.mu_hat(4.0, 1.0, 0.0)
        m2, q2 = sup.mu_hat(4.0, 1.0, 10.0)
        assert q1 == q2
        assert (m2 - m1) * q1 == pytest.approx(10.0, rel=1e-9)

    def test_ordering_in_box(self, sub, sup):
        assert ordering_check(sub, sup) > 0

    def test_mid_range(self, prof):
        lo, hi = mid_range(prof, 0.1)
        assert prof(lo) == pytest.approx(0.9, abs=1e-10)
        assert prof(hi) == pytest.approx(-0.9, abs=1e-10)
        assert phi_star(prof, 0.1) == pytest.approx(min(-prof(lo, 1), -prof(hi, 1)), rel=1e-6)

    def test_tail_constant_bounds_derivative(self, prof):
        C = tail_constant(prof, 10.0)
        mu = np.concatenate([np.linspace(10, 1e3, 500), -np.linspace(10, 1e3, 500)])
        assert np.all(np.abs(prof(mu, 1)) <= C * np.abs(mu) ** (-1 - 2 * S_ORDER) * (1 + 1e-9))

    def test_omega_regression(self, surf):
        out = omega_min(surf)
        assert out["omega"] > 0
        assert out["omega"] <= out["sampled_min"] + 1e-12
        assert out["omega"] == pytest.approx(22.16086, rel=1e-5)

    def test_stratified_cases(self, sup, f):
        smp = stratified_samples(sup, f.delta_star, n=200, columns=20)
        mu = sup.mu_hat(*smp["points"].T)[0]
        inner = np.abs(sup.profile(mu)) <= 1 - f.delta_star
        assert np.array_equal(smp["case"] == 2, inner)
        assert 80 <= np.sum(smp["case"] == 2) <= 120
        again = stratified_samples(sup, f.delta_star, n=200, columns=20)
        assert np.array_equal(smp["points"], again["points"])

    @pytest.mark.slow
    def test_select_and_verify(self, prof, surf, f, sub):
        smp = r1_samples(surf.pyramid, lam=(1.0, 4.0), offsets=(0.0,), sector_fractions=(0.5,), apex=False)
        rep = estimate_R1(prof, surf, alphas=(0.4, 0.2), samples=smp)
        par = select_parameters(prof, surf, f, rep)
        assert isinstance(par, SuperSolutionParams)
        assert 0 < par.eps < 0.5 and 0 < par.alpha < 0.5
        assert par.eps == pytest.approx(0.9 * min(par.eps_terms.values()))
        assert par.alpha == pytest.approx(0.9 * min(par.alpha_terms.values()))
        out = verify_super(SuperSolution(prof, surf, par.eps, par.alpha), par, f, sub, n=20, columns=4)
        assert out["accepted"]
        assert out["min_LV"] > 0 and out["min_gap"] > 0
        assert out["case1_margin"] >= 0.9


class TestIteration:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            IterationConfig(r1_mode="full")
        with pytest.raises(ValueError):
            IterationConfig(n=25)
        with pytest.raises(ValueError):
            IterationConfig(K_factor=1.0)

    def test_converges_monotonically(self, small_run):
        res, _ = small_run
        assert res.converged
        assert res.state.K > 2.6
        assert all(r["monotone_margin"] >= -1e-10 for r in res.history)

    def test_sandwich(self, small_run):
        res, _ = small_run
        assert all(r["sub_margin"] >= -1e-8 and r["super_margin"] >= -1e-8 for r in res.history)

    def test_residual_decreases_after_first_step(self, small_run):
        res, _ = small_run
        r = [h["residual"] for h in res.history]
        assert r[-1] < 1e-5
        assert r[-1] < r[1] < r[0]

    def test_diagnostics_lines(self, small_run):
        res, text = small_run
        rows = [json.loads(line) for line in text.splitlines()]
        assert [r["m"] for r in rows] == list(range(1, len(res.history) + 1))
        for key in ("residual", "ordering_margin", "wall_time", "r1_mode"):
            assert key in rows[0]

    def test_u_function_matches_grid(self, small_run):
        res, _ = small_run
        P = res.grid.coordinates()[::97]
        assert np.allclose(res.u_function()(P), res.u.values.ravel()[::97], atol=1e-10)

    def test_stable_under_halved_tol(self, sub, sup, f, small_run):
        res, _ = small_run
        again = monotone_iterate(sub, sup, f, IterationConfig(L=12.0, n=24, r1_mode="drop", tol=5e-6))
        assert np.max(np.abs(again.u.values - res.u.values)) < 2e-5

    def test_edge_table(self, small_run):
        res, _ = small_run
        rows = edge_convergence(res, (0.0, 2.0, 4.0))
        on_edges = res.core_mask().ravel() & ~gamma_R_mask(res.sub.pyramid, res.grid.coordinates(), 0.0)
        assert rows[0]["count"] == int(res.core_mask().sum() - on_edges.sum())
        assert on_edges.sum() <= 2 * res.config.n
        sups = [r["sup_u_minus_v"] for r in rows]
        assert all(a >= b for a, b in zip(sups, sups[1:]))
        assert all(r["sup_u_minus_v"] <= r["sup_V_minus_v"] + 1e-8 for r in rows)
