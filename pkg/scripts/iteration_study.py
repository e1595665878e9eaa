"""Monotone iteration on the default box with a larger step budget.

Prints the step count at which the update falls below tol, the worst
monotonicity and ordering margins, and the Gamma_R table.

    python scripts/iteration_study.py --max-m 250 --base-alpha 0.5
"""
import argparse
import time

from pyrafront import wavelab
from pyrafront.mollify import build_mollifier, mollify_pyramid
from pyrafront.profile import Nonlinearity, solve_profile
from pyrafront.pyramid import make_regular_pyramid


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--max-m", type=int, default=250)
    ap.add_argument("--base-alpha", type=float, default=0.5)
    ap.add_argument("--r1-mode", default="table", choices=["table", "drop"])
    ap.add_argument("--L", type=float, default=24.0)
    ap.add_argument("--n", type=int, default=48)
    ap.add_argument("--eps", type=float, default=0.00763)
    ap.add_argument("--alpha", type=float, default=2.41e-5)
    ap.add_argument("--diagnostics", default=None, help="JSON-lines output path")
    args = ap.parse_args()

    f = Nonlinearity.cubic(-0.3)
    prof = solve_profile(f, 0.75)
    pyr = make_regular_pyramid(4, 2 * prof.k, prof.k)
    surf = mollify_pyramid(build_mollifier(0.75, pyr.m_star), pyr)
    sub = wavelab.SubSolution(prof, pyr)
    sup = wavelab.SuperSolution(prof, surf, args.eps, args.alpha)
    cfg = wavelab.IterationConfig(L=args.L, n=args.n, max_m=args.max_m, base_alpha=args.base_alpha, r1_mode=args.r1_mode)
    t0 = time.perf_counter()
    res = wavelab.monotone_iterate(sub, sup, f, cfg, args.diagnostics)
    h = res.history
    print(f"converged={res.converged} steps={len(h)} last={h[-1]['residual']:.3e} time={time.perf_counter() - t0:.0f}s")
    print(f"min monotone margin {min(r['monotone_margin'] for r in h):.3e}")
    print(f"min ordering margin {min(r['ordering_margin'] for r in h):.3e}")
    rises = [r["m"] for a, r in zip(h, h[1:]) if r["residual"] >= a["residual"]]
    print(f"steps where the update grew: {rises}")
    for row in wavelab.edge_convergence(res, (0.0, 2.0, 4.0, 8.0, 16.0)):
        print(row)


if __name__ == "__main__":
    main()
