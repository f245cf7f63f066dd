"""Grids, Gaussian densities and deterministic quadrature.

Every expectation in the package reduces to one of two schemes:

* composite trapezoid sums on uniform, zero-centred grids (the workhorse), and
* Gauss-Hermite quadrature (the independent cross-check).

`GaussTransform` evaluates sums of the form ``sum_j v_j u_j phi_s(y_j - c)`` for
arbitrary points ``c`` and a table ``u`` sampled on a uniform grid, together
with the adjoint "deposit" operation.  Both are exact up to a truncated Taylor
series whose remainder is below double precision, so the annealer can evaluate
the channel integral at off-grid points without interpolation error.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.signal import fftconvolve

log = logging.getLogger(__name__)

SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianDensity:
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.std) and self.std > 0):
            raise ValueError(f"std must be positive and finite, got {self.std}")
        if not np.isfinite(self.mean):
            raise ValueError(f"mean must be finite, got {self.mean}")

    def pdf(self, x):
        return gaussian_pdf(x, self)


@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform grid symmetric about zero with an odd number of points."""

    half_width: float
    n_points: int
    points: np.ndarray = field(repr=False)
    spacing: float

    def __len__(self):
        return self.n_points

    def __eq__(self, other):
        return (isinstance(other, Grid) and self.n_points == other.n_points
                and self.half_width == other.half_width)

    def __hash__(self):
        return hash((self.half_width, self.n_points))

    @property
    def midpoint(self) -> int:
        return self.n_points // 2

    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.n_points, self.spacing)
        w[0] = w[-1] = 0.5 * self.spacing
        return w

    def refined(self, factor: int = 2) -> "Grid":
        """Same span, spacing divided by `factor`."""
        return make_grid(self.half_width, (self.n_points - 1) * factor + 1)


def gaussian_pdf(x, g: GaussianDensity):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("gaussian_pdf: non-finite argument")
    z = (x - g.mean) / g.std
    out = np.exp(-0.5 * z * z) / (g.std * SQRT_2PI)
    return out if out.ndim else float(out)


def log_gaussian_pdf(x, std=1.0):
    z = np.asarray(x, dtype=float) / std
    return -0.5 * z * z - np.log(std * SQRT_2PI)


def make_grid(half_width: float, n_points: int) -> Grid:
    if not (np.isfinite(half_width) and half_width > 0):
        raise ValueError(f"half_width must be positive, got {half_width}")
    if int(n_points) != n_points or n_points < 3 or n_points % 2 == 0:
        raise ValueError(f"n_points must be an odd integer >= 3, got {n_points}")
    n_points = int(n_points)
    half = n_points // 2
    spacing = 2.0 * half_width / (n_points - 1)
    # integer multiples keep the grid exactly symmetric with an exact zero
    idx = np.arange(-half, half + 1, dtype=float)
    points = idx * spacing
    points[0], points[-1] = -half_width, half_width
    return Grid(float(half_width), n_points, points, spacing)


def grid_with_spacing(half_width: float, spacing: float) -> Grid:
    """Smallest odd grid covering ``[-half_width, half_width]`` at the given spacing."""
    half = int(math.ceil(half_width / spacing - 1e-9))
    return make_grid(half * spacing, 2 * half + 1)


def expect_over_density(f, g: GaussianDensity, grid: Grid) -> float:
    """Trapezoid approximation of ``E f(T)`` for ``T ~ g``; `f` is sampled on `grid`
    (or a callable evaluated there). Values outside the grid count as zero."""
    values = f(grid.points) if callable(f) else np.asarray(f, dtype=float)
    if values.shape != grid.points.shape:
        raise ValueError("samples do not match the grid")
    if np.any(np.isnan(values)):
        raise ValueError("NaN in integrand samples")
    coverage = min(grid.half_width - g.mean, grid.half_width + g.mean) / g.std
    if coverage < 6.0:
        log.warning("grid covers only %.2f std of the density", coverage)
    weights = grid.trapezoid_weights() * gaussian_pdf(grid.points, g)
    return float(np.dot(weights, values))


def gauss_hermite_rule(order: int, g: GaussianDensity):
    """Nodes and weights with ``sum(w * f(t)) ~= E f(T)``, ``T ~ g``."""
    t, w = np.polynomial.hermite_e.hermegauss(order)
    return g.mean + g.std * t, w / math.sqrt(2.0 * math.pi)


def gauss_hermite_expect(f: Callable, g: GaussianDensity, order: int = 200) -> float:
    nodes, weights = gauss_hermite_rule(order, g)
    return float(np.dot(weights, f(nodes)))


def cross_validate_quadrature(f: Callable, g: GaussianDensity, grid: Grid, order: int = 200):
    """Return ``(trapezoid, gauss_hermite, gap)`` for ``E f(T)``, ``T ~ g``."""
    trap = expect_over_density(f(grid.points), g, grid)
    gh = gauss_hermite_expect(f, g, order)
    return trap, gh, abs(trap - gh)


def grid_convergence(quantity: Callable[[Grid], float], grid: Grid, factor: int = 2):
    """Evaluate `quantity` on `grid` and on a `factor`-times refined grid.

    Returns ``(coarse, fine, abs change)``.
    """
    coarse = quantity(grid)
    fine = quantity(grid.refined(factor))
    return coarse, fine, abs(fine - coarse)


class GaussTransform:
    """Gaussian smoothing between off-grid points and a uniform grid.

    For a grid ``y_j`` with trapezoid weights ``v_j`` and kernel
    ``phi_s(u) = N(u; 0, s^2)`` truncated at ``|u| <= cutoff * s``:

    * ``forward(tables)`` precomputes data so that ``evaluate(c)`` returns
      ``G_r(c) = sum_j v_j u_r[j] phi_s(y_j - c)`` for every table ``u_r``;
    * ``deposit(c, weights)`` returns ``A_j = sum_k weights[..., k] phi_s(y_j - c_k)``.

    With ``c = y_l + rho * dy`` the kernel factorises as
    ``phi_s(d dy) exp(d rho beta) exp(-rho^2 beta / 2)``, ``beta = dy^2 / s^2``;
    the middle factor is expanded in powers of ``rho`` so both operations become
    a handful of FFT convolutions.
    """

    def __init__(self, grid: Grid, std: float = 1.0, cutoff: float = 10.0):
        self.grid = grid
        self.std = float(std)
        self.dy = grid.spacing
        self.y0 = float(grid.points[0])
        self.n = grid.n_points
        self.beta = self.dy ** 2 / self.std ** 2
        self.half_taps = int(math.ceil(cutoff * self.std / self.dy))
        d = np.arange(-self.half_taps, self.half_taps + 1, dtype=float)
        base = gaussian_pdf(d * self.dy, GaussianDensity(0.0, self.std))
        # series order: remainder of exp(x), |x| <= half_taps * beta, below 1e-18
        xmax = self.half_taps * self.beta
        q, term = 0, 1.0
        while term * math.exp(xmax) > 1e-18 or q < 2:
            q += 1
            term *= xmax / q
        self.order = q + 1
        self.kernels = np.stack([base * (d * self.beta) ** p for p in range(self.order)])
        self.inv_fact = np.array([1.0 / math.factorial(p) for p in range(self.order)])
        self.weights = grid.trapezoid_weights()
        self.lo = self.y0
        self.hi = float(grid.points[-1])

    def locate(self, c):
        """Cell index and fractional offset of each point; points are clipped to the grid."""
        c = np.asarray(c, dtype=float)
        clipped = np.clip(c, self.lo, self.hi)
        n_out = np.count_nonzero(clipped != c)
        if n_out:
            log.debug("%d points outside the channel-output grid were clamped", n_out)
        pos = (clipped - self.y0) / self.dy
        cell = np.minimum(np.floor(pos).astype(np.int64), self.n - 2)
        rho = pos - cell
        return cell, rho

    def forward(self, tables) -> np.ndarray:
        """Precompute ``S[r, p, l] = sum_d kernel_p(d) v u_r`` at ``l + d``."""
        tables = np.atleast_2d(np.asarray(tables, dtype=float))
        z = tables * self.weights
        out = np.empty((tables.shape[0], self.order, self.n))
        for r in range(tables.shape[0]):
            for p in range(self.order):
                out[r, p] = fftconvolve(z[r], self.kernels[p][::-1], mode="same")
        out *= self.inv_fact[None, :, None]
        return out

    def evaluate(self, smoothed: np.ndarray, c) -> np.ndarray:
        """``G_r(c)`` for every table; result has shape ``(n_tables,) + c.shape``."""
        c = np.asarray(c, dtype=float)
        cell, rho = self.locate(c.ravel())
        acc = smoothed[:, -1, cell]
        for p in range(self.order - 2, -1, -1):
            acc = acc * rho + smoothed[:, p, cell]
        acc = acc * np.exp(-0.5 * self.beta * rho * rho)
        return acc.reshape((smoothed.shape[0],) + c.shape)

    def evaluate_derivatives(self, smoothed: np.ndarray, c):
        """``(G, dG/dc, d2G/dc2)`` of the series representation used by `evaluate`."""
        c = np.asarray(c, dtype=float)
        cell, rho = self.locate(c.ravel())
        s = smoothed[:, :, cell]
        poly = s[:, -1]
        d1 = np.zeros_like(poly)
        d2 = np.zeros_like(poly)
        for p in range(self.order - 2, -1, -1):
            d2 = d2 * rho + 2.0 * d1
            d1 = d1 * rho + poly
            poly = poly * rho + s[:, p]
        beta = self.beta
        damp = np.exp(-0.5 * beta * rho * rho)
        g0 = damp * poly
        g1 = damp * (d1 - beta * rho * poly) / self.dy
        g2 = damp * (d2 - 2 * beta * rho * d1 + (beta * beta * rho * rho - beta) * poly) / self.dy ** 2
        shape = (smoothed.shape[0],) + c.shape
        return g0.reshape(shape), g1.reshape(shape), g2.reshape(shape)

    def deposit(self, c, weights) -> np.ndarray:
        """``A[r, j] = sum_k weights[r, k] phi_s(y_j - c_k)``."""
        c = np.asarray(c, dtype=float).ravel()
        weights = np.atleast_2d(np.asarray(weights, dtype=float)).reshape(-1, c.size)
        cell, rho = self.locate(c)
        damp = np.exp(-0.5 * self.beta * rho * rho)
        out = np.zeros((weights.shape[0], self.n))
        power = damp.copy()
        for p in range(self.order):
            for r in range(weights.shape[0]):
                binned = np.bincount(cell, weights=weights[r] * power, minlength=self.n)
                out[r] += fftconvolve(binned, self.kernels[p], mode="same") * self.inv_fact[p]
            power = power * rho
        return out
