"""From the terminal soft solution to a certified step encoder.

`harden` assigns every source point to its cheapest local model and locates
the boundaries between winners by bisection; `polish` then runs descent on the
exact cost of the resulting piecewise-affine map, whose decoder is always the
closed-form posterior mean.  `classify` names the result ("3-step", "2.5-step")
and `compare` reports the pointwise difference of two encoders.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .annealer import AnnealState, FD_REL_STEP, ARMIJO_C, MAX_HALVINGS
from .fileio import csv_text
from .model import ChannelCost, LocalModel, model_classes
from .numerics import Grid
from .piecewise import PiecewiseAffine
from .problem import CostReport, Problem, piecewise_cost

log = logging.getLogger(__name__)

BOUNDARY_TOL = 1e-10
POLISH_TOL = 1e-10
HESS_REL_STEP = 1e-4
ZERO_INTERCEPT = 1e-12
ORIGIN_TOL = 1e-8


@dataclass(eq=False)
class StepSolution:
    """Deterministic piecewise-affine encoder with its certified cost."""

    encoder: PiecewiseAffine
    cost: CostReport
    grid: Grid
    diagnostics: List[str] = field(default_factory=list)

    @property
    def pieces(self) -> List[Tuple[LocalModel, Tuple[float, float]]]:
        lo, hi = self.encoder.intervals()
        return [(LocalModel(float(a), float(b)), (float(l), float(h)))
                for a, b, l, h in zip(self.encoder.slopes, self.encoder.intercepts, lo, hi)]

    @property
    def label(self) -> str:
        return classify(self)

    @property
    def symmetric(self) -> bool:
        return bool(self.encoder.odd)

    def __call__(self, x):
        return self.encoder(x)


def _bisect_boundary(cost_i, cost_j, lo: float, hi: float, tol: float = BOUNDARY_TOL) -> float:
    """Zero of ``D_i - D_j`` in ``[lo, hi]``, where model i wins at `lo` and j at `hi`."""
    g_lo = cost_i(lo) - cost_j(lo)
    g_hi = cost_i(hi) - cost_j(hi)
    if not (g_lo <= 0 <= g_hi):
        # the winners changed without a sign change of this pair (a third model
        # won in between at sub-grid scale); fall back to the midpoint
        return 0.5 * (lo + hi)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if cost_i(mid) - cost_j(mid) <= 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _representatives(state: AnnealState, p: Problem, tol_a: float, tol_b: float):
    """Mass-weighted mean of each tolerance class of models that carry mass."""
    mass = state.support.weights @ state.assoc
    a, b = state.models.slopes, state.models.intercepts
    classes = model_classes(state.models, tol_a, tol_b * p.sigma_x)
    classes = [c for c in classes if mass[c].sum() > 0] or classes
    slopes, inter = [], []
    for cls in classes:
        w = mass[cls] / mass[cls].sum() if mass[cls].sum() > 0 else np.full(len(cls), 1 / len(cls))
        slopes.append(float(w @ a[cls]))
        inter.append(float(w @ b[cls]))
    return np.array(slopes), np.array(inter)


def _assemble(slopes, intercepts, breaks, symmetric: bool) -> PiecewiseAffine:
    """Piecewise map from winner runs; ``breaks`` are the interior boundaries."""
    slopes, intercepts, breaks = map(np.asarray, (slopes, intercepts, breaks))
    if not symmetric:
        return PiecewiseAffine(slopes, intercepts, breaks)
    if abs(intercepts[0]) <= ZERO_INTERCEPT:
        # the first piece passes through the origin: it is one piece straddling 0
        return PiecewiseAffine.from_positive_half(slopes[1:], intercepts[1:], breaks,
                                                  center=slopes[0])
    return PiecewiseAffine.from_positive_half(slopes, intercepts, breaks)


def harden(state: AnnealState, p: Problem, certify: Optional[Problem] = None,
           tol_a: float = 1e-4, tol_b: float = 1e-3) -> StepSolution:
    """Argmin assignment of each source point, with bisected step boundaries.

    Models in one merge-tolerance class are replaced by their mass-weighted
    mean first, so numerically identical duplicates cannot alternate.  The cost
    is certified on `certify` (default `p`).
    """
    certify = certify or p
    slopes, inter = _representatives(state, p, tol_a, tol_b)
    channel = ChannelCost(state.dec, p)
    x = state.support.x
    costs = channel(x[:, None], x[:, None] * slopes[None, :] + inter[None, :])
    winners = np.argmin(costs, axis=1)
    change = np.flatnonzero(winners[1:] != winners[:-1])
    runs = np.concatenate([[winners[0]], winners[change + 1]])

    def cost_of(m):
        return lambda t: float(channel(t, slopes[m] * t + inter[m]))

    breaks = [_bisect_boundary(cost_of(winners[k]), cost_of(winners[k + 1]), x[k], x[k + 1])
              for k in change]
    diagnostics = []
    seen = set()
    for m in runs:
        if m in seen:
            diagnostics.append(f"model {int(m)} wins on disjoint intervals")
        seen.add(m)
    for d in diagnostics:
        log.info(d)
    enc = _assemble(slopes[runs], inter[runs], breaks, state.symmetric)
    return StepSolution(enc, piecewise_cost(enc, certify), certify.x_grid, diagnostics)


# -- polishing ---------------------------------------------------------------

class _Parametrization:
    """Flat parameter vector of a piecewise map and the blocks descended on."""

    def __init__(self, enc: PiecewiseAffine):
        self.odd = bool(enc.odd)
        if self.odd:
            s, b, br, center = enc.positive_half()
            self.center = center is not None
            self.n = s.size
            self.theta0 = np.concatenate([s, b, br] + ([[center]] if self.center else []))
            n_breaks = br.size
        else:
            self.center = False
            self.n = enc.n_pieces
            self.theta0 = np.concatenate([enc.slopes, enc.intercepts, enc.breaks])
            n_breaks = enc.breaks.size
        n = self.n
        self.break_idx = np.arange(2 * n, 2 * n + n_breaks)
        self.blocks = [np.array([i, n + i]) for i in range(n)]
        if self.center:
            self.blocks.append(np.array([self.theta0.size - 1]))
        self.blocks += [np.array([j]) for j in self.break_idx]

    def build(self, theta) -> PiecewiseAffine:
        n = self.n
        s, b = theta[:n], theta[n:2 * n]
        br = theta[self.break_idx]
        if self.odd:
            return PiecewiseAffine.from_positive_half(s, b, br, center=theta[-1] if self.center else None)
        return PiecewiseAffine(s, b, br)

    def feasible(self, theta) -> bool:
        br = theta[self.break_idx]
        if br.size and np.any(np.diff(br) <= 0):
            return False
        if self.odd and br.size and br[0] <= 0:
            return False
        return True


def _fd_block(f, theta, idx, f0):
    """Central-difference gradient and Hessian of `f` restricted to `idx`."""
    k = idx.size
    g = np.zeros(k)
    H = np.zeros((k, k))
    hg = FD_REL_STEP * (1.0 + np.abs(theta[idx]))
    hh = HESS_REL_STEP * (1.0 + np.abs(theta[idx]))

    def at(steps):
        t = theta.copy()
        t[idx] += steps
        return f(t)

    for i in range(k):
        e = np.zeros(k)
        e[i] = hg[i]
        g[i] = (at(e) - at(-e)) / (2 * hg[i])
        e[i] = hh[i]
        H[i, i] = (at(e) - 2 * f0 + at(-e)) / hh[i] ** 2
        for j in range(i):
            ei = np.zeros(k)
            ej = np.zeros(k)
            ei[i], ej[j] = hh[i], hh[j]
            H[i, j] = H[j, i] = (at(ei + ej) - at(ei - ej) - at(-ei + ej) + at(-ei - ej)) / (
                4 * hh[i] * hh[j])
    return g, H


def _block_step(f, par: _Parametrization, theta, idx, f0):
    """One Newton step (gradient step if the Hessian is not positive definite)
    on block `idx`, with Armijo backtracking. Returns ``(theta, f)``."""
    g, H = _fd_block(f, theta, idx, f0)
    if not np.any(g):
        return theta, f0
    try:
        L = np.linalg.cholesky(H)
        d = -np.linalg.solve(L.T, np.linalg.solve(L, g))
    except np.linalg.LinAlgError:
        d = -g
    slope = float(g @ d)
    if not slope < 0:
        d, slope = -g, -float(g @ g)
    t = 1.0
    for _ in range(MAX_HALVINGS):
        trial = theta.copy()
        trial[idx] += t * d
        if par.feasible(trial):
            ft = f(trial)
            if ft <= f0 + ARMIJO_C * t * slope:
                return trial, ft
        t *= 0.5
    return theta, f0


def polish(sol: StepSolution, p: Problem, tol: float = POLISH_TOL,
           max_sweeps: int = 200) -> StepSolution:
    """Block coordinate descent at zero temperature on the exact encoder cost.

    Blocks are each piece's ``(slope, intercept)`` and each boundary location;
    the decoder is the exact posterior mean of the current map, so it is
    re-optimised at every evaluation.  Stops when a sweep improves the total
    by less than `tol`; that last sweep is discarded, so an input already at
    a minimum comes back with its parameters untouched rather than drifted
    along the flat valley floor.
    """
    par = _Parametrization(sol.encoder)

    def f(theta):
        if not par.feasible(theta):
            return np.inf
        return piecewise_cost(par.build(theta), p).total

    theta = par.theta0.copy()
    start = cur = f(theta)
    for sweep in range(max_sweeps):
        before, kept = cur, theta.copy()
        for idx in par.blocks:
            theta, cur = _block_step(f, par, theta, idx, cur)
        if cur > before + 1e-15:
            msg = f"polish raised the cost by {cur - before:.3e} in sweep {sweep}"
            log.error(msg)
            return StepSolution(sol.encoder, sol.cost, sol.grid, sol.diagnostics + [msg])
        if before - cur < tol:
            theta, cur = kept, before
            break
    if np.array_equal(theta, par.theta0):
        return StepSolution(sol.encoder, sol.cost, sol.grid, list(sol.diagnostics))
    enc = par.build(theta)
    cost = piecewise_cost(enc, p)
    if cost.total > start:
        msg = "polish did not improve on its input"
        return StepSolution(sol.encoder, sol.cost, sol.grid, sol.diagnostics + [msg])
    return StepSolution(enc, cost, p.x_grid, list(sol.diagnostics))


# -- naming and comparison ---------------------------------------------------

def classify(sol) -> str:
    """``n-step`` with n the pieces lying in ``x >= 0``, plus 0.5 for a piece
    straddling the origin.

    Boundaries are only located to `BOUNDARY_TOL`, so one within
    `ORIGIN_TOL` of 0 counts as lying at the origin.
    """
    enc = sol.encoder if isinstance(sol, StepSolution) else sol
    lo, hi = enc.intervals()
    n = int(np.count_nonzero(lo >= -ORIGIN_TOL))
    straddle = bool(np.any((lo < -ORIGIN_TOL) & (hi > ORIGIN_TOL)))
    value = n + 0.5 * straddle
    text = f"{value:g}" if straddle else str(n)
    return f"{text}-step"


@dataclass(eq=False)
class DifferenceReport:
    x: np.ndarray
    difference: np.ndarray
    boundary_deltas: np.ndarray
    cost_delta: float

    def to_csv(self) -> str:
        return csv_text(["x", "difference"], [self.x, self.difference])


def compare(sol_a: StepSolution, sol_b: StepSolution, p: Problem) -> DifferenceReport:
    """Pointwise ``f_a - f_b`` on the x-grid, deltas of matched boundaries and
    the difference of certified totals."""
    if sol_a.grid != sol_b.grid or sol_a.grid != p.x_grid:
        raise ValueError("solutions are not defined on the same grid")
    x = p.x_grid.points
    diff = sol_a(x) - sol_b(x)
    ba, bb = sol_a.encoder.breaks, sol_b.encoder.breaks
    if ba.size and bb.size:
        # match each boundary of a with the nearest one of b
        nearest = bb[np.argmin(np.abs(ba[:, None] - bb[None, :]), axis=1)]
        deltas = ba - nearest
    else:
        deltas = np.zeros(0)
    return DifferenceReport(x, diff, deltas, sol_a.cost.total - sol_b.cost.total)


def solution_from_pieces(enc: PiecewiseAffine, p: Problem) -> StepSolution:
    """Certify an explicitly given piecewise-affine encoder."""
    return StepSolution(enc, piecewise_cost(enc, p), p.x_grid)
