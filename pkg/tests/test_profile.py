import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pyrafront.fracop import OperatorConfig, fraclap_pointwise
from pyrafront.profile import (
    LayerFamily,
    Nonlinearity,
    ProfileNumerics,
    decay_report,
    evolve_profile,
    layer,
    layer_asymptotic_constant,
    layer_fraclap,
    layer_kernel,
    load_profile,
    pointwise_residual,
    profile_bounds,
    save_profile,
    solve_profile,
)

# speed at s = 0.75, t0 = -0.3 on the default M = 200, 8192-node window
K_BASELINE = 0.45287713288


@pytest.fixture(scope="module")
def cubic():
    return Nonlinearity.cubic(-0.3)


@pytest.fixture(scope="module")
def front(cubic):
    return solve_profile(cubic, 0.75)


class TestNonlinearity:
    def test_cubic_invariants(self, cubic):
        assert 0 < cubic.delta_star <= 0.25
        assert cubic.kappa1 > 0 and cubic.kappa2 >= cubic.kappa1
        t = np.concatenate([np.linspace(-1 - 2 * cubic.delta_star, -1 + 2 * cubic.delta_star, 101),
                            np.linspace(1 - 2 * cubic.delta_star, 1 + 2 * cubic.delta_star, 101)])
        assert np.all(-cubic.df(t) >= cubic.kappa1 - 1e-12)

    @given(st.floats(-0.8, 0.8))
    @settings(max_examples=10, deadline=None)
    def test_derived_constants(self, t0):
        f = Nonlinearity.cubic(t0)
        assert 0 < f.delta_star < 0.25
        assert f.kappa1 > 0

    def test_rejects_non_bistable(self):
        with pytest.raises(ValueError):
            Nonlinearity(lambda t: np.asarray(t) ** 2 - 1, lambda t: 2 * np.asarray(t), 0.0)
        with pytest.raises(ValueError):
            Nonlinearity.cubic(1.2)


class TestSolver:
    def test_baseline(self, front):
        assert front.k == pytest.approx(K_BASELINE, abs=1e-8)
        assert front.residual < 1e-10

    def test_invariants(self, front):
        assert abs(front(0.0)) < 1e-6
        assert np.all(front.phi1 < 0)
        assert np.all(np.abs(front.phi) < 1)
        assert front.phi[0] > 0.999 and front.phi[-1] < -0.999

    def test_sign_flips_with_t0(self):
        num = ProfileNumerics(nodes=1024)
        kp = solve_profile(Nonlinearity.cubic(-0.3), 0.75, num).k
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            km = solve_profile(Nonlinearity.cubic(0.3), 0.75, num).k
        assert kp > 0 and km == pytest.approx(-kp, abs=1e-10)

    @pytest.mark.parametrize("f", [Nonlinearity.cubic(0.0), Nonlinearity.sine()])
    def test_odd_nonlinearity_has_zero_speed(self, f):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            sol = solve_profile(f, 0.75, ProfileNumerics(nodes=1024))
        assert abs(sol.k) < 1e-10
        assert np.allclose(sol.phi, -sol.phi[::-1], atol=1e-10)

    def test_evolution_oracle(self, cubic):
        mu, phi, k = evolve_profile(cubic, 0.75)
        assert k == pytest.approx(K_BASELINE, abs=1e-4)

    def test_explicit_half_order_layer(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            sol = solve_profile(Nonlinearity.sine(), 0.5, ProfileNumerics(allow_half=True))
        core = np.abs(sol.mu) <= 20
        assert abs(sol.k) < 1e-10
        assert np.max(np.abs(sol.phi[core] + 2 / np.pi * np.arctan(sol.mu[core]))) < 1e-2

    def test_rejects_half_outside_oracle_mode(self):
        with pytest.raises(ValueError):
            solve_profile(Nonlinearity.sine(), 0.5)

    def test_uniqueness(self, cubic, front):
        num = ProfileNumerics()
        mu = np.linspace(-200, 200, 801)
        other = solve_profile(cubic, 0.75, num, init=(mu, -np.tanh(mu / 3.0), 0.3))
        assert other.k == pytest.approx(front.k, abs=10 * num.tol)
        assert np.max(np.abs(other.phi - front.phi)) < 1e-8

    def test_pointwise_residual(self, cubic, front):
        x = np.array([-90.0, -10.0, -1.0, 0.0, 0.5, 2.0, 30.0, 99.0])
        assert np.max(np.abs(pointwise_residual(front, cubic, x))) < 1e-6


class TestDecay:
    def test_exponents(self, front):
        rep = decay_report(front)
        s = 0.75
        assert rep["resolved"]
        assert rep["exponents"]["phi"] == pytest.approx(-2 * s, abs=0.1)
        assert rep["exponents"]["phi1"] == pytest.approx(-1 - 2 * s, abs=0.1)
        assert rep["exponents"]["phi2"] <= -1 - 2 * s + 0.1

    def test_tail_constants_consistent(self, front):
        # derivative of A mu^{-2s} gives B = 2 s A
        assert front.B_plus == pytest.approx(1.5 * front.A_plus, rel=0.02)
        assert front.B_minus == pytest.approx(1.5 * front.A_minus, rel=0.02)

    def test_bounds(self, front):
        b = profile_bounds(front)
        assert abs(b["argmax_dphi"]) < 2.0
        s1, s2 = b["scaling"]
        assert s2["sup_dphi"] == pytest.approx(2 * s1["sup_dphi"], rel=1e-14)
        assert s2["sup_d2phi"] == pytest.approx(4 * s1["sup_d2phi"], rel=1e-14)
        assert s2["sup_mu_dphi"] == pytest.approx(s1["sup_mu_dphi"], rel=1e-14)
        assert b["C_phi"] >= s1["sup_mu_dphi"]

    def test_mu_dphi_tail(self, front):
        m = (front.mu > 100) & (front.mu < 200)
        ratio = -front.mu[m] * front.phi1[m] / (front.B_plus * front.mu[m] ** -1.5)
        assert np.all(np.abs(ratio - 1) < 0.05)


class TestPersistence:
    def test_round_trip(self, front, tmp_path):
        path = tmp_path / "front.csv"
        save_profile(front, path)
        back = load_profile(path)
        for name in ("mu", "phi", "phi1", "phi2"):
            assert np.array_equal(getattr(back, name), getattr(front, name))
        for name in ("s", "k", "M", "A_plus", "A_minus", "B_plus", "B_minus"):
            assert getattr(back, name) == getattr(front, name)

    def test_missing_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("# s=0.75\nmu,phi,phi1,phi2\n0,0,-1,0\n")
        with pytest.raises(ValueError):
            load_profile(path)


class TestLayerFamily:
    @given(st.floats(-50, 50), st.floats(0.1, 5))
    @settings(max_examples=30, deadline=None)
    def test_half_order_kernel(self, mu, t):
        assert layer_kernel(mu, t, 0.5) == pytest.approx(t / (np.pi * (t * t + mu * mu)), abs=1e-8)

    @pytest.mark.parametrize("s", [0.6, 0.75, 0.9])
    def test_centre_and_limits(self, s):
        assert layer(0.0, 1.0, s) == 0.0
        assert layer(1e4, 1.0, s) == pytest.approx(1.0, abs=1e-4)
        assert layer(-1e4, 1.0, s) == pytest.approx(-1.0, abs=1e-4)
        v = layer(np.linspace(-5, 5, 21), 1.0, s)
        assert np.all(np.diff(v) > 0)

    def test_half_order_layer(self):
        mu = np.array([-3.0, 0.2, 4.0])
        assert np.allclose(layer(mu, 1.0, 0.5), 2 / np.pi * np.arctan(mu), atol=1e-10)

    @pytest.mark.parametrize("s", [0.5, 0.75, 0.9])
    def test_asymptotic_constant(self, s):
        mu = 200.0
        assert mu ** (1 + 2 * s) * layer(mu, 1.0, s, 1) == pytest.approx(layer_asymptotic_constant(1.0, s), rel=0.02)

    def test_half_order_constant(self):
        assert layer_asymptotic_constant(1.0, 0.5) == pytest.approx(2 / np.pi, rel=1e-14)

    def test_fraclap_odd(self):
        mu = np.array([0.7, 2.0, 6.0])
        fam = LayerFamily(1.0, 0.75)
        assert np.allclose(layer_fraclap(mu, 1.0, 0.75), -layer_fraclap(-mu, 1.0, 0.75), atol=1e-14)
        assert layer_fraclap(0.0, 1.0, 0.75) == 0.0
        assert fam.v(0.0) == 0.0

    def test_fraclap_matches_pointwise(self):
        cfg = OperatorConfig(s=0.75, n=1, R=30.0, tail_policy="callable_exterior", resolution=6, inner_nodes=10)
        val = fraclap_pointwise(lambda m: layer(m, 1.0, 0.75), 1.5, cfg)
        assert val == pytest.approx(layer_fraclap(1.5, 1.0, 0.75), abs=1e-6)
