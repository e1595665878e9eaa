import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize_scalar

from pyrafront.pyramid import (
    PyramidSpec,
    edge_distance,
    facets,
    gamma_R_mask,
    height,
    height_gradient,
    lambda_pm,
    lifted_edge_distance,
    load_pyramid,
    make_regular_pyramid,
    planar_edge_distance,
    region_index,
    save_pyramid,
)

coord = st.floats(-50, 50, allow_nan=False)


@pytest.fixture(scope="module")
def square():
    return make_regular_pyramid(4, 2.0, 1.0)


def sampled_ray_distance(spec, x, y, T=200.0, n=400001):
    # dense sampling of every ray of E, refined by a local golden-section step
    t = np.linspace(0.0, T, n)
    best = np.inf
    for e in spec.edge_directions:
        d = np.hypot(x - t * e[0], y - t * e[1])
        i = int(np.argmin(d))
        lo, hi = t[max(i - 1, 0)], t[min(i + 1, n - 1)]
        r = minimize_scalar(lambda s: np.hypot(x - s * e[0], y - s * e[1]), bounds=(lo, hi), method="bounded",
                            options={"xatol": 1e-14})
        best = min(best, d[i], r.fun)
    return best


class TestConstruction:
    def test_square_matches_abs_form(self, square):
        m = np.sqrt(3.0)
        assert square.m_star == pytest.approx(m, rel=1e-15)
        assert height(square, 1.0, 0.0) == pytest.approx(np.sqrt(3.0) / np.sqrt(2.0), rel=1e-14)
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=(2, 200)) * 10
        assert np.allclose(height(square, x, y), m / np.sqrt(2) * (np.abs(x) + np.abs(y)), rtol=1e-14)

    def test_square_diagonal(self, square):
        assert height(square, 1.0, 1.0) == pytest.approx(np.sqrt(3.0) * np.sqrt(2.0), rel=1e-14)

    @pytest.mark.parametrize("N", [3, 4, 5, 8])
    def test_orientation_and_radius(self, N):
        p = make_regular_pyramid(N, 1.5, 0.7)
        n, nxt = p.normals, np.roll(p.normals, -1, axis=0)
        assert np.all(n[:, 0] * nxt[:, 1] - n[:, 1] * nxt[:, 0] > 0)
        assert np.allclose(np.sum(n * n, axis=1), p.m_star**2, rtol=1e-14)

    def test_rejects_bad_speeds(self):
        with pytest.raises(ValueError):
            make_regular_pyramid(4, 1.0, 1.0)
        with pytest.raises(ValueError):
            make_regular_pyramid(2, 2.0, 1.0)

    def test_rejects_bad_normals(self):
        m = np.sqrt(3.0)
        with pytest.raises(ValueError):
            PyramidSpec(2.0, 1.0, [[m, 0], [0, m], [-m, 0], [0, 1.0]])
        with pytest.raises(ValueError):
            PyramidSpec(2.0, 1.0, [[m, 0], [0, -m], [-m, 0], [0, m]])

    def test_irregular(self):
        th = np.array([0.1, 1.4, 2.9, 4.0, 5.3])
        p = PyramidSpec(3.0, 1.0, np.sqrt(8.0) * np.column_stack([np.cos(th), np.sin(th)]))
        assert p.N == 5

    def test_round_trip(self, square, tmp_path):
        path = tmp_path / "pyr.csv"
        save_pyramid(square, path)
        back = load_pyramid(path)
        assert back.c == square.c and back.k == square.k
        assert np.array_equal(back.normals, square.normals)


class TestHeight:
    def test_origin(self, square):
        assert height(square, 0.0, 0.0) == 0.0

    def test_symmetry(self, square):
        rng = np.random.default_rng(1)
        x, y = rng.uniform(-20, 20, size=(2, 100))
        h = height(square, x, y)
        assert np.allclose(h, height(square, -x, y), rtol=1e-15)
        assert np.allclose(h, height(square, x, -y), rtol=1e-15)
        assert np.allclose(h, height(square, y, x), rtol=1e-15)

    @given(coord, coord, coord, coord, st.floats(0, 1))
    @settings(max_examples=50, deadline=None)
    def test_convex_homogeneous_nonnegative(self, x1, y1, x2, y2, t):
        p = make_regular_pyramid(5, 2.0, 1.0)
        assert height(p, x1, y1) >= 0
        mix = height(p, t * x1 + (1 - t) * x2, t * y1 + (1 - t) * y2)
        assert mix <= t * height(p, x1, y1) + (1 - t) * height(p, x2, y2) + 1e-9
        assert height(p, 3 * x1, 3 * y1) == pytest.approx(3 * height(p, x1, y1), rel=1e-12, abs=1e-12)

    def test_region_constant_on_sectors(self, square):
        r = np.linspace(0.1, 30, 50)
        for j in range(4):
            ang = (2 * j + 1) * np.pi / 4 + np.linspace(-0.7, 0.7, 9)
            idx = region_index(square, np.outer(r, np.cos(ang)), np.outer(r, np.sin(ang)))
            assert np.all(idx == j)

    def test_ties_lowest_index(self, square):
        assert region_index(square, 1.0, 0.0) == 0

    def test_gradient(self, square):
        g = height_gradient(square, 2.0, 0.5)
        assert np.allclose(g, square.normals[0])


class TestEdgeDistance:
    def test_zero_on_edges(self, square):
        for e in square.edge_directions:
            assert edge_distance(square, *(7.3 * e)) == pytest.approx(0.0, abs=1e-14)

    def test_square_diagonal_point(self, square):
        lp, lm = lambda_pm(square, 0, 1.0, 1.0)
        ref = sampled_ray_distance(square, 1.0, 1.0)
        assert lp == pytest.approx(ref, abs=1e-12) and lm == pytest.approx(ref, abs=1e-12)
        assert ref == pytest.approx(1.0, abs=1e-12)

    def test_swap_symmetry(self, square):
        rng = np.random.default_rng(2)
        x, y = rng.uniform(-30, 30, size=(2, 100))
        assert np.allclose(edge_distance(square, x, y), edge_distance(square, y, x), atol=1e-13)

    @pytest.mark.parametrize("N", [3, 4, 6])
    def test_matches_ray_distance(self, N):
        p = make_regular_pyramid(N, 2.0, 1.0)
        rng = np.random.default_rng(N)
        x, y = rng.uniform(-40, 40, size=(2, 1000))
        lam = edge_distance(p, x, y)
        assert np.max(np.abs(lam - planar_edge_distance(p, x, y))) < 1e-12
        assert np.all(lam <= np.hypot(x, y) + 1e-12)

    def test_lambda_pm_are_sector_distances(self, square):
        rng = np.random.default_rng(3)
        x, y = rng.uniform(-20, 20, size=(2, 20))
        for xi, yi in zip(x, y):
            j = int(region_index(square, xi, yi))
            lp, lm = lambda_pm(square, j, xi, yi)
            e = square.edge_directions
            dp = np.hypot(*(np.array([xi, yi]) - max(xi * e[j, 0] + yi * e[j, 1], 0) * e[j]))
            jm = (j - 1) % 4
            dm = np.hypot(*(np.array([xi, yi]) - max(xi * e[jm, 0] + yi * e[jm, 1], 0) * e[jm]))
            assert lp == pytest.approx(dp, abs=1e-12) and lm == pytest.approx(dm, abs=1e-12)

    def test_against_sampled_rays(self):
        p = make_regular_pyramid(3, 2.0, 1.0)
        rng = np.random.default_rng(4)
        for x, y in rng.uniform(-10, 10, size=(5, 2)):
            assert edge_distance(p, x, y) == pytest.approx(sampled_ray_distance(p, x, y), abs=1e-10)


class TestGammaR:
    def test_points_on_edges(self, square):
        g = square.lifted_edges
        pts = np.array([3.0 * g[0], 0.5 * g[2], np.zeros(3)])
        assert not np.any(gamma_R_mask(square, pts, 1e-9))
        assert not gamma_R_mask(square, np.zeros(3), 0.0)

    @pytest.mark.parametrize("d", [0.5, 2.0, 10.0])
    def test_below_apex(self, square, d):
        p = np.array([0.0, 0.0, -d])
        best = np.inf
        for e in square.edge_directions:
            z = float(height(square, *e))
            r = minimize_scalar(lambda t: np.linalg.norm(p - t * np.array([e[0], e[1], z])),
                                bounds=(0.0, 100.0), method="bounded", options={"xatol": 1e-12})
            best = min(best, r.fun)
        # the edges rise above the apex, so the nearest point is the apex itself
        assert best == pytest.approx(d, abs=1e-9)
        assert lifted_edge_distance(square, p) == pytest.approx(best, abs=1e-9)

    def test_against_golden_section(self, square):
        rng = np.random.default_rng(5)
        pts = rng.uniform(-10, 10, size=(20, 3))
        exact = lifted_edge_distance(square, pts)
        for p, ex in zip(pts, exact):
            best = np.inf
            for g in square.lifted_edges:
                r = minimize_scalar(lambda t: np.linalg.norm(p - t * g), bounds=(0.0, 50.0), method="bounded",
                                    options={"xatol": 1e-12})
                best = min(best, r.fun, np.linalg.norm(p))
            assert ex == pytest.approx(best, abs=1e-8)

    def test_monotone_in_R(self, square):
        pts = np.random.default_rng(6).uniform(-10, 10, size=(500, 3))
        counts = [gamma_R_mask(square, pts, R).sum() for R in (0, 1, 2, 4, 8)]
        assert counts == sorted(counts, reverse=True)

    def test_rejects_negative(self, square):
        with pytest.raises(ValueError):
            gamma_R_mask(square, np.zeros(3), -1.0)


def test_facets_shape(square):
    assert facets(square, np.zeros((3, 5)), np.zeros((3, 5))).shape == (3, 5, 4)
