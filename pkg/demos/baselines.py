"""The two closed-form reference points of Witsenhausen's counterexample.

Prints the best affine controller and the one-step (sign) encoder at k = 0.2,
sigma_x = 5, each certified with the trapezoid rule and cross-checked with
Gauss-Hermite quadrature.

    python demos/baselines.py
"""

import math

from witsenhausen_da import Problem
from witsenhausen_da.problem import (
    baseline_affine_optimal, baseline_one_step, piecewise_cost, piecewise_cost_gauss_hermite,
)


def main():
    p = Problem.create(k=0.2, sigma_x=5.0, n_x=3001)
    affine, _ = baseline_affine_optimal(p)
    one = baseline_one_step(p)
    print(f"{'encoder':<10} {'stage1':>12} {'stage2':>12} {'total':>12} {'GH gap':>10}")
    for name, enc in (("affine", affine.pieces), ("1-step", one.pieces)):
        c = piecewise_cost(enc, p)
        gap = abs(piecewise_cost_gauss_hermite(enc, p).total - c.total)
        print(f"{name:<10} {c.stage1:12.9f} {c.stage2:12.9f} {c.total:12.9f} {gap:10.2e}")
    lam = affine.pieces.slopes[0]
    print(f"\naffine gain lambda* = {lam:.7f}")
    closed = 0.2 ** 2 * 2 * 25 * (1 - math.sqrt(2 / math.pi))
    print(f"1-step control cost, closed form k^2 2 s^2 (1 - sqrt(2/pi)) = {closed:.10f}")


if __name__ == "__main__":
    main()
