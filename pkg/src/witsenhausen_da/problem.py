"""The Witsenhausen instance: cost functional, MMSE decoder and baselines.

Cost convention: ``J = k^2 E[(X1 - X0)^2] + E[(X1 - h(Y))^2]`` with
``X1 = f(X0)`` the total encoder map, ``Y = X1 + N`` and ``h`` the decoder.

Two evaluation routes are provided for every quantity:

* sampled encoders (an `EncoderMap` without pieces) use trapezoid sums on the
  source grid and the channel-output grid;
* piecewise-affine encoders use closed-form integrals over the source and a
  trapezoid rule on the channel-output grid only. This is the certification
  route; its only discretisation is the y-grid, where every integrand is smooth.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from .numerics import (
    GaussianDensity, GaussTransform, Grid, gauss_hermite_rule, grid_with_spacing,
    make_grid,
)
from .piecewise import PiecewiseAffine

log = logging.getLogger(__name__)


@dataclass(eq=False)
class Problem:
    k: float
    sigma_x: float
    x_grid: Grid
    y_grid: Grid
    noise_std: float = 1.0
    _transform: Optional[GaussTransform] = field(default=None, repr=False)

    def __post_init__(self):
        if not (self.k > 0 and self.sigma_x > 0 and self.noise_std > 0):
            raise ValueError("k, sigma_x and noise_std must be positive")

    @classmethod
    def create(cls, k=0.2, sigma_x=5.0, n_x=12001, x_span=12.0, y_spacing=None,
               noise_std=1.0, noise_span=10.0):
        """Source grid ``[-x_span sigma_x, x_span sigma_x]`` with `n_x` points and a
        channel-output grid extending it by ``noise_span`` noise std.

        The y spacing defaults to the x spacing.
        """
        x_grid = make_grid(x_span * sigma_x, n_x)
        dy = x_grid.spacing if y_spacing is None else y_spacing
        y_grid = grid_with_spacing(x_span * sigma_x + noise_span * noise_std, dy)
        return cls(k, sigma_x, x_grid, y_grid, noise_std)

    @property
    def source(self) -> GaussianDensity:
        return GaussianDensity(0.0, self.sigma_x)

    @property
    def noise(self) -> GaussianDensity:
        return GaussianDensity(0.0, self.noise_std)

    @property
    def transform(self) -> GaussTransform:
        if self._transform is None:
            self._transform = GaussTransform(self.y_grid, self.noise_std)
        return self._transform

    def source_weights(self) -> np.ndarray:
        """Trapezoid weight times source density at each x-grid point."""
        return self.x_grid.trapezoid_weights() * self.source.pdf(self.x_grid.points)

    def with_grids(self, n_x=None, y_spacing=None) -> "Problem":
        n_x = self.x_grid.n_points if n_x is None else n_x
        span = self.x_grid.half_width / self.sigma_x
        noise_span = (self.y_grid.half_width - self.x_grid.half_width) / self.noise_std
        return Problem.create(self.k, self.sigma_x, n_x, span,
                              y_spacing or self.y_grid.spacing, self.noise_std, noise_span)

    def params(self):
        return {"k": self.k, "sigma_x": self.sigma_x, "noise_std": self.noise_std}


@dataclass(eq=False)
class EncoderMap:
    """Total map ``f`` (``X1 = f(X0)``) sampled on the source grid.

    ``pieces`` is set when the map is known exactly as a piecewise-affine
    function; cost routines then integrate it in closed form.
    """

    grid: Grid
    f: np.ndarray
    pieces: Optional[PiecewiseAffine] = None

    @property
    def g(self) -> np.ndarray:
        """Control ``u = f(x) - x``."""
        return self.f - self.grid.points

    @classmethod
    def from_function(cls, fn: Callable, grid: Grid) -> "EncoderMap":
        return cls(grid, np.asarray(fn(grid.points), dtype=float))

    @classmethod
    def from_control(cls, fn: Callable, grid: Grid) -> "EncoderMap":
        return cls(grid, grid.points + np.asarray(fn(grid.points), dtype=float))

    @classmethod
    def from_pieces(cls, pieces: PiecewiseAffine, grid: Grid) -> "EncoderMap":
        return cls(grid, pieces(grid.points), pieces)


@dataclass(eq=False)
class DecoderTable:
    grid: Grid
    h: np.ndarray

    def __call__(self, y):
        return np.interp(y, self.grid.points, self.h)


@dataclass(frozen=True)
class CostReport:
    stage1: float
    stage2: float
    total: float

    def as_dict(self):
        return {"stage1": self.stage1, "stage2": self.stage2, "total": self.total}


# -- sampled route ---------------------------------------------------------

def _deposit_direct(c, weights, p: Problem, chunk: int = 2048):
    y = p.y_grid.points
    reach = p.transform.half_taps * p.y_grid.spacing
    out = np.zeros((weights.shape[0], y.size))
    order = np.argsort(c, kind="stable")
    c, weights = c[order], weights[:, order]
    for start in range(0, c.size, chunk):
        cc = c[start:start + chunk]
        lo = np.searchsorted(y, cc[0] - reach)
        hi = np.searchsorted(y, cc[-1] + reach, side="right")
        kern = p.noise.pdf(y[None, lo:hi] - cc[:, None])
        out[:, lo:hi] += weights[:, start:start + chunk] @ kern
    return out


def decoder_from_points(c, weights, p: Problem, method: str = "fft") -> DecoderTable:
    """MMSE decoder for a discrete law putting mass `weights` on levels `c`.

    ``h(y_j) = sum w c phi(y_j - c) / sum w phi(y_j - c)``. ``method="fft"`` uses
    the fast transform, whose relative accuracy degrades once the output density
    falls ~13 orders of magnitude below its peak; ``"direct"`` sums the kernel
    explicitly. Unsupported points take the value of the nearest supported one;
    they carry no weight in any cost.
    """
    c = np.asarray(c, float).ravel()
    weights = np.asarray(weights, float).ravel()
    stacked = np.stack([weights * c, weights])
    if method == "fft":
        num, den = p.transform.deposit(c, stacked)
        floor = 1e-13 * den.max()
    elif method == "direct":
        num, den = _deposit_direct(c, stacked, p)
        floor = 1e-300
    else:
        raise ValueError(f"unknown method {method!r}")
    supported = den > floor
    h = np.zeros_like(den)
    h[supported] = num[supported] / den[supported]
    if not supported.all():
        log.debug("decoder denominator underflow at %d y-points", np.count_nonzero(~supported))
        idx = np.flatnonzero(supported)
        nearest = idx[np.clip(np.searchsorted(idx, np.arange(h.size)), 0, idx.size - 1)]
        h[~supported] = h[nearest[~supported]]
    # convex combination of the levels; clipping only removes FFT round-off
    active = weights > 0
    if active.any():
        h = np.clip(h, c[active].min(), c[active].max())
    return DecoderTable(p.y_grid, h)


def channel_error(dec: DecoderTable, p: Problem):
    """Callable ``e(c) = E[(c - h(c + N))^2]`` for the decoder, vectorised over `c`.

    The noise integral runs on the decoder's y-grid (``y = c + n``), so the
    decoder returned by `decoder_from_points` exactly minimises the resulting
    discrete cost.
    """
    if dec.grid != p.y_grid:
        raise ValueError("decoder must live on the problem's y-grid")
    h = dec.h
    smoothed = p.transform.forward([np.ones_like(h), h, h * h])

    def error(c):
        c = np.asarray(c, float)
        g0, g1, g2 = p.transform.evaluate(smoothed, c)
        return np.maximum(c * c * g0 - 2.0 * c * g1 + g2, 0.0)

    return error


# -- piecewise route -------------------------------------------------------

def _piecewise_posterior(pieces: PiecewiseAffine, p: Problem, y_grid: Grid):
    log_mass, mean, var = pieces.channel_posterior(y_grid.points, p.sigma_x, p.noise_std)
    log_py = logsumexp(log_mass, axis=0)
    resp = np.exp(log_mass - log_py)
    return np.exp(log_py), resp, mean, var


def _piecewise_stage2(pieces: PiecewiseAffine, p: Problem, y_grid: Grid, h=None):
    py, resp, mean, var = _piecewise_posterior(pieces, p, y_grid)
    if h is None:
        h = np.sum(resp * mean, axis=0)
    err = np.sum(resp * (var + (mean - h) ** 2), axis=0)
    return float(np.dot(y_grid.trapezoid_weights() * py, err)), h


# -- public operations -----------------------------------------------------

def optimal_decoder(enc: EncoderMap, p: Problem) -> DecoderTable:
    if enc.pieces is not None:
        return DecoderTable(p.y_grid, enc.pieces.posterior_mean(p.y_grid.points, p.sigma_x, p.noise_std))
    _check_grid(enc, p)
    return decoder_from_points(enc.f, p.source_weights(), p)


def stage1_cost(enc: EncoderMap, p: Problem) -> float:
    if enc.pieces is not None:
        return p.k ** 2 * enc.pieces.control_moment2(p.sigma_x)
    _check_grid(enc, p)
    return float(p.k ** 2 * np.dot(p.source_weights(), enc.g ** 2))


def stage2_cost(enc: EncoderMap, dec: DecoderTable, p: Problem) -> float:
    """``E (f(X) - h(f(X) + N))^2`` with the noise integral taken on the decoder grid."""
    if enc.pieces is not None:
        return _piecewise_stage2(enc.pieces, p, dec.grid, dec.h)[0]
    _check_grid(enc, p)
    err = channel_error(dec, p)(enc.f)
    return float(np.dot(p.source_weights(), err))


def total_cost(enc: EncoderMap, p: Problem) -> CostReport:
    s1 = stage1_cost(enc, p)
    if enc.pieces is not None:
        s2 = _piecewise_stage2(enc.pieces, p, p.y_grid)[0]
    else:
        s2 = stage2_cost(enc, optimal_decoder(enc, p), p)
    return CostReport(s1, s2, s1 + s2)


def _check_grid(enc: EncoderMap, p: Problem):
    if enc.grid != p.x_grid:
        raise ValueError("encoder is not sampled on the problem's x-grid")


def piecewise_cost(pieces: PiecewiseAffine, p: Problem, y_grid: Optional[Grid] = None) -> CostReport:
    """Cost of a piecewise-affine encoder with its optimal decoder.

    Closed form over the source; trapezoid on `y_grid` (default: the problem's).
    The grid is widened automatically if the encoder range needs it.
    """
    y_grid = y_grid or p.y_grid
    reach = _encoder_reach(pieces, p) + 10.0 * p.noise_std
    if reach > y_grid.half_width:
        y_grid = grid_with_spacing(reach, y_grid.spacing)
    s1 = p.k ** 2 * pieces.control_moment2(p.sigma_x)
    s2 = _piecewise_stage2(pieces, p, y_grid)[0]
    return CostReport(s1, s2, s1 + s2)


def _encoder_reach(pieces: PiecewiseAffine, p: Problem) -> float:
    x = p.x_grid.half_width
    probe = np.concatenate([[-x, x], pieces.breaks[np.abs(pieces.breaks) <= x]])
    lo, hi = pieces.intervals()
    vals = []
    for xs in probe:
        i = pieces.piece_index(xs)
        vals.append(abs(pieces.slopes[i] * xs + pieces.intercepts[i]))
        if i > 0:
            vals.append(abs(pieces.slopes[i - 1] * xs + pieces.intercepts[i - 1]))
    return float(max(vals))


def piecewise_cost_gauss_hermite(pieces: PiecewiseAffine, p: Problem, order: int = 200,
                                 legendre_order: int = 200) -> CostReport:
    """Independent evaluation of the same cost.

    Stage 2 is ``sum over pieces of int phi(x) E_N[(f(x) - h(f(x) + N))^2] dx``
    with Gauss-Hermite in the noise and Gauss-Legendre over each piece
    (clipped to the source grid span); ``h`` is the closed-form posterior mean.
    """
    nodes_n, w_n = gauss_hermite_rule(order, p.noise)
    gl_t, gl_w = np.polynomial.legendre.leggauss(legendre_order)
    span = p.x_grid.half_width
    lo, hi = pieces.intervals()
    total2 = 0.0
    for i in range(pieces.n_pieces):
        a, b = max(lo[i], -span), min(hi[i], span)
        if b <= a:
            continue
        x = 0.5 * (b - a) * gl_t + 0.5 * (a + b)
        wx = 0.5 * (b - a) * gl_w * p.source.pdf(x)
        fx = pieces.slopes[i] * x + pieces.intercepts[i]
        y = (fx[:, None] + nodes_n[None, :]).ravel()
        h = pieces.posterior_mean(y, p.sigma_x, p.noise_std).reshape(fx.size, -1)
        inner = ((fx[:, None] - h) ** 2) @ w_n
        total2 += float(np.dot(wx, inner))
    s1 = p.k ** 2 * pieces.control_moment2(p.sigma_x)
    return CostReport(s1, total2, s1 + total2)


def affine_encoder(slope: float, p: Problem) -> EncoderMap:
    return EncoderMap.from_pieces(PiecewiseAffine.affine(slope), p.x_grid)


def golden_section(fun: Callable[[float], float], lo: float, hi: float, tol: float = 1e-10):
    """Minimise a unimodal scalar function on ``[lo, hi]``."""
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = fun(c), fun(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = fun(d)
    x = 0.5 * (a + b)
    return x, fun(x)


def baseline_affine_optimal(p: Problem, tol: float = 1e-10):
    """Best encoder of the form ``f(x) = lam x`` with ``lam`` in ``[0, 1]``.

    Returns ``(encoder, cost)``.
    """
    lam, cost = golden_section(lambda s: total_cost(affine_encoder(s, p), p).total, 0.0, 1.0, tol)
    return affine_encoder(lam, p), cost


def baseline_one_step(p: Problem) -> EncoderMap:
    """``f(x) = sigma_x sgn(x)`` with ``f(0) = 0``."""
    pieces = PiecewiseAffine.from_positive_half([0.0], [p.sigma_x], [])
    return EncoderMap.from_pieces(pieces, p.x_grid)
