"""Deterministic annealing from the affine solution to a step encoder.

Runs a coarse, quick schedule (about a minute on one core): the temperature
falls geometrically, the single affine model splits at the first critical
temperature, and the soft solution is hardened into a piecewise-affine step
encoder and polished at T = 0. This fast schedule settles in a slightly
worse 3-step (about 0.16740) than the bundled configuration, which uses finer
grids and slower cooling to reach 0.166947 (``wce anneal --config ...``).

    python demos/anneal_walkthrough.py [target_steps]
"""

import sys

from witsenhausen_da import AnnealConfig, Problem, harden, polish, run


def main(target_steps=3):
    p = Problem.create(k=0.2, sigma_x=5.0, n_x=801, x_span=8.0, y_spacing=0.1)
    cert = Problem.create(k=0.2, sigma_x=5.0, n_x=3001)
    config = AnnealConfig(target_steps=target_steps, cooling_factor=0.8, t_min_ratio=1e-5)

    def report(state):
        h = state.history[-1]
        if h["step"] % 5 == 0 or len(state.history) < 2 or \
                h["effective_models"] != state.history[-2]["effective_models"]:
            print(f"step {h['step']:3d}  T {h['T']:10.3e}  D {h['D']:.6f}  H {h['H']:.4f}  "
                  f"models {h['effective_models']}")

    state = run(config, p, callback=report)
    sol = polish(harden(state, p, cert), cert)
    print(f"\n{sol.label}, certified total {sol.cost.total:.9f}")
    for m, (lo, hi) in sol.pieces:
        if lo >= 0:
            print(f"  [{lo:8.4f}, {hi:8.4f})  f(x) = {m.a:.6f} x + {m.b:.6f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 3)
