"""Piecewise-affine encoders and their closed-form Gaussian integrals.

For an affine piece ``f(x) = a x + b`` on ``[lo, hi)`` with ``X ~ N(0, sx^2)``
and ``Y = f(X) + N``, ``N ~ N(0, sn^2)``, the joint density factorises as

    phi_sx(x) phi_sn(y - a x - b) = phi_s(y - b) * phi_tau(x - mu(y))

with ``s^2 = a^2 sx^2 + sn^2``, ``mu = a sx^2 (y - b) / s^2`` and
``tau = sx sn / s``.  Per-piece posterior mass and moments therefore reduce to
truncated-normal moments, which is what makes exact decoders and 1e-9-level
cost certification cheap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, logsumexp

from .numerics import log_gaussian_pdf

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def truncated_normal_moments(alpha, beta):
    """Log-mass, mean and variance of N(0, 1) restricted to ``[alpha, beta]``.

    Stable in both tails: intervals on the positive side are reflected so the
    log-mass is always formed from lower-tail CDF values.
    """
    alpha, beta = np.broadcast_arrays(np.asarray(alpha, float), np.asarray(beta, float))
    flip = alpha > 0
    lo = np.where(flip, -beta, alpha)
    hi = np.where(flip, -alpha, beta)

    log_hi = log_ndtr(hi)
    log_lo = log_ndtr(lo)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        # after reflection lo <= 0, so Phi(lo) <= 1/2 and the difference never
        # cancels unless the interval itself is tiny
        log_z = log_hi + np.log1p(-np.exp(log_lo - log_hi))

        def ratio(t):
            r = np.exp(-0.5 * t * t - _LOG_SQRT_2PI - log_z)
            return np.where(np.isfinite(t), r, 0.0)

        r_lo, r_hi = ratio(lo), ratio(hi)
        t_lo = np.where(np.isfinite(lo), lo * r_lo, 0.0)
        t_hi = np.where(np.isfinite(hi), hi * r_hi, 0.0)
    mean = r_lo - r_hi
    var = np.maximum(1.0 + t_lo - t_hi - mean * mean, 0.0)
    mean = np.where(flip, -mean, mean)
    return log_z, mean, var


@dataclass(frozen=True, eq=False)
class PiecewiseAffine:
    """``f(x) = slopes[i] * x + intercepts[i]`` on ``[breaks[i-1], breaks[i])``.

    ``breaks`` holds the interior boundaries in increasing order (one fewer than
    the number of pieces); the outer pieces extend to +-infinity.  When ``odd`` is
    set the map is evaluated as ``sign(x) f(|x|)``, which makes it exactly odd in
    floating point; the pieces must then be mirror images of each other.
    """

    slopes: np.ndarray
    intercepts: np.ndarray
    breaks: np.ndarray
    odd: bool = False

    def __post_init__(self):
        for name in ("slopes", "intercepts", "breaks"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        if self.slopes.size != self.intercepts.size or self.breaks.size != self.slopes.size - 1:
            raise ValueError("need n slopes, n intercepts and n-1 breakpoints")
        if self.breaks.size and np.any(np.diff(self.breaks) < 0):
            raise ValueError("breakpoints must be non-decreasing")
        if not (np.all(np.isfinite(self.slopes)) and np.all(np.isfinite(self.intercepts))):
            raise ValueError("non-finite piece parameters")

    @classmethod
    def affine(cls, slope: float, intercept: float = 0.0) -> "PiecewiseAffine":
        return cls([slope], [intercept], [], odd=intercept == 0.0)

    @classmethod
    def from_positive_half(cls, slopes, intercepts, breaks, center=None):
        """Odd map built from its pieces on ``x > 0``.

        ``breaks`` are the positive boundaries between consecutive pieces. If
        `center` is given, it is the slope of a piece ``[-c, c)`` through the
        origin and ``breaks[0]`` is its half-width ``c``; otherwise the map jumps
        at 0.
        """
        slopes = np.asarray(slopes, float)
        intercepts = np.asarray(intercepts, float)
        breaks = np.asarray(breaks, float)
        if center is None:
            if breaks.size != slopes.size - 1:
                raise ValueError("need len(slopes) - 1 positive breakpoints")
            full_breaks = np.concatenate([-breaks[::-1], [0.0], breaks])
            full_s = np.concatenate([slopes[::-1], slopes])
            full_b = np.concatenate([-intercepts[::-1], intercepts])
        else:
            if breaks.size != slopes.size:
                raise ValueError("need one breakpoint per positive piece with a center piece")
            full_breaks = np.concatenate([-breaks[::-1], breaks])
            full_s = np.concatenate([slopes[::-1], [center], slopes])
            full_b = np.concatenate([-intercepts[::-1], [0.0], intercepts])
        return cls(full_s, full_b, full_breaks, odd=True)

    @property
    def n_pieces(self) -> int:
        return self.slopes.size

    def intervals(self):
        edges = np.concatenate([[-np.inf], self.breaks, [np.inf]])
        return edges[:-1], edges[1:]

    def piece_index(self, x):
        return np.searchsorted(self.breaks, x, side="right")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.odd:
            ax = np.abs(x)
            i = self.piece_index(ax)
            out = np.sign(x) * (self.slopes[i] * ax + self.intercepts[i])
            return out
        i = self.piece_index(x)
        return self.slopes[i] * x + self.intercepts[i]

    def positive_half(self):
        """``(slopes, intercepts, breaks, center)`` of an odd map, inverse of
        `from_positive_half`."""
        if not self.odd:
            raise ValueError("map is not odd")
        n = self.n_pieces
        if n % 2 == 0:
            h = n // 2
            return self.slopes[h:], self.intercepts[h:], self.breaks[h:], None
        h = n // 2
        return self.slopes[h + 1:], self.intercepts[h + 1:], self.breaks[h:], self.slopes[h]

    def mirrored(self) -> "PiecewiseAffine":
        """The map ``x -> -f(-x)``."""
        return PiecewiseAffine(self.slopes[::-1].copy(), -self.intercepts[::-1],
                               -self.breaks[::-1], odd=self.odd)

    def control_moment2(self, sigma_x: float) -> float:
        """``E (f(X) - X)^2`` for ``X ~ N(0, sigma_x^2)``, in closed form."""
        lo, hi = self.intervals()
        log_z, m, v = truncated_normal_moments(lo / sigma_x, hi / sigma_x)
        mass = np.exp(log_z)
        ex = sigma_x * m
        ex2 = sigma_x ** 2 * (v + m * m)
        c = self.slopes - 1.0
        return float(np.sum(mass * (c * c * ex2 + 2 * c * self.intercepts * ex
                                    + self.intercepts ** 2)))

    def moment2(self, sigma_x: float) -> float:
        """``E f(X)^2`` in closed form."""
        shifted = PiecewiseAffine(self.slopes + 1.0, self.intercepts, self.breaks)
        return shifted.control_moment2(sigma_x)

    def channel_posterior(self, y, sigma_x: float, noise_std: float = 1.0):
        """Per-piece ``(log mass, E[f | y, piece], Var[f | y, piece])``.

        Arrays have shape ``(n_pieces, len(y))``; ``log mass`` is the log of the
        joint density of ``Y = y`` and ``X`` in the piece.
        """
        y = np.asarray(y, dtype=float)[None, :]
        a = self.slopes[:, None]
        b = self.intercepts[:, None]
        lo, hi = (e[:, None] for e in self.intervals())
        s2 = a * a * sigma_x ** 2 + noise_std ** 2
        s = np.sqrt(s2)
        mu = a * sigma_x ** 2 * (y - b) / s2
        tau = sigma_x * noise_std / s
        log_z, m, v = truncated_normal_moments((lo - mu) / tau, (hi - mu) / tau)
        log_mass = log_gaussian_pdf(y - b, s) + log_z
        mean = a * (mu + tau * m) + b
        var = a * a * tau * tau * v
        return log_mass, mean, var

    def posterior_mean(self, y, sigma_x: float, noise_std: float = 1.0):
        """Closed-form MMSE decoder ``E[f(X) | Y = y]``."""
        log_mass, mean, _ = self.channel_posterior(y, sigma_x, noise_std)
        w = np.exp(log_mass - logsumexp(log_mass, axis=0))
        return np.sum(w * mean, axis=0)

    def to_dict(self):
        return {"slopes": self.slopes.tolist(), "intercepts": self.intercepts.tolist(),
                "breaks": self.breaks.tolist(), "odd": bool(self.odd)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["slopes"], d["intercepts"], d["breaks"], odd=bool(d.get("odd", False)))
