"""Randomized piecewise-affine encoder: local models, associations, free energy.

Local models parametrize the total map ``f_m(x) = a_m x + b_m``; the control is
``f_m(x) - x``.  All source integrals are trapezoid sums on the problem's x-grid
and all channel integrals run on its y-grid, so the Gibbs update and the mixture
decoder are exact minimizers of the discrete free energy computed here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .problem import DecoderTable, Problem, channel_error, decoder_from_points

PROB_FLOOR = 1e-300


@dataclass(frozen=True)
class LocalModel:
    a: float
    b: float

    def __post_init__(self):
        if not (np.isfinite(self.a) and np.isfinite(self.b)):
            raise ValueError("local model parameters must be finite")

    def __call__(self, x):
        return self.a * np.asarray(x, float) + self.b

    def mirrored(self) -> "LocalModel":
        return LocalModel(self.a, -self.b)


@dataclass
class ModelSet:
    """Ordered local models held as parameter arrays."""

    slopes: np.ndarray
    intercepts: np.ndarray
    max_models: int = 64

    def __post_init__(self):
        self.slopes = np.atleast_1d(np.asarray(self.slopes, dtype=float)).copy()
        self.intercepts = np.atleast_1d(np.asarray(self.intercepts, dtype=float)).copy()
        if self.slopes.shape != self.intercepts.shape:
            raise ValueError("slopes and intercepts differ in length")
        if not 1 <= len(self) <= self.max_models:
            raise ValueError(f"need between 1 and {self.max_models} models, got {len(self)}")

    @classmethod
    def of(cls, models: Sequence[LocalModel], max_models: int = 64) -> "ModelSet":
        return cls([m.a for m in models], [m.b for m in models], max_models)

    def __len__(self):
        return self.slopes.size

    def __getitem__(self, i) -> LocalModel:
        return LocalModel(float(self.slopes[i]), float(self.intercepts[i]))

    def outputs(self, x) -> np.ndarray:
        """``f_m(x)`` with shape ``(len(x), n_models)``."""
        x = np.asarray(x, float)
        return x[:, None] * self.slopes[None, :] + self.intercepts[None, :]

    def copy(self) -> "ModelSet":
        return ModelSet(self.slopes, self.intercepts, self.max_models)


@dataclass(frozen=True)
class FreeEnergyReport:
    D: float
    H: float
    F: float
    T: float


class ChannelCost:
    """``D_m(x)`` evaluator for a fixed decoder.

    ``D(x, c) = k^2 (c - x)^2 + E[(c - h(c + N))^2]`` where ``c = f_m(x)``.
    """

    def __init__(self, dec: DecoderTable, p: Problem):
        self.dec = dec
        self.problem = p
        self.k2 = p.k ** 2
        self.channel = channel_error(dec, p)
        self._smoothed = None

    def __call__(self, x, c):
        x = np.asarray(x, float)
        c = np.asarray(c, float)
        return self.k2 * (c - x) ** 2 + self.channel(c)

    def derivatives(self, x, c):
        """``(D, dD/dc, d2D/dc2)`` of the discrete cost, exact for the series
        representation used by the channel integral."""
        x = np.asarray(x, float)
        c = np.asarray(c, float)
        tr = self.problem.transform
        if self._smoothed is None:
            h = self.dec.h
            self._smoothed = tr.forward([np.ones_like(h), h, h * h])
        # table r holds h^r; rows are value, first and second derivative
        (g0, g1, g2), (d0, d1, d2), (s0, s1, s2) = tr.evaluate_derivatives(self._smoothed, c)
        e = c * c * g0 - 2 * c * g1 + g2
        de = 2 * c * g0 + c * c * d0 - 2 * g1 - 2 * c * d1 + d2
        dde = 2 * g0 + 4 * c * d0 + c * c * s0 - 4 * d1 - 2 * c * s1 + s2
        diff = c - x
        return self.k2 * diff ** 2 + e, 2 * self.k2 * diff + de, 2 * self.k2 + dde

    def matrix(self, models: ModelSet, x=None) -> np.ndarray:
        x = self.problem.x_grid.points if x is None else np.asarray(x, float)
        return self(x[:, None], models.outputs(x))


def conditional_cost(x, m: LocalModel, dec: DecoderTable, p: Problem):
    """``D_m(x)``: expected cost when source value `x` is encoded by model `m`."""
    return ChannelCost(dec, p)(x, m(x))


def gibbs_update(costs, T: float) -> np.ndarray:
    """``p(m|x) proportional to exp(-D_m(x) / T)``, row-wise over the last axis."""
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    costs = np.asarray(costs, dtype=float)
    if not np.all(np.isfinite(costs)):
        raise ValueError("non-finite costs")
    z = -costs / T
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p[p < PROB_FLOOR] = 0.0
    return p / p.sum(axis=-1, keepdims=True)


def check_associations(assoc: np.ndarray, tol: float = 1e-12):
    assoc = np.asarray(assoc)
    if assoc.ndim != 2 or np.any(assoc < 0) or np.any(np.abs(assoc.sum(axis=1) - 1) > tol):
        raise ValueError("association rows must be non-negative and sum to 1")


def _entropy_rows(assoc: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(assoc > 0, assoc * np.log(assoc), 0.0)
    return -t.sum(axis=1)


def conditional_entropy(assoc: np.ndarray, p: Problem) -> float:
    """``H(M|X)`` in nats, integrated against the source density."""
    return float(np.dot(p.source_weights(), _entropy_rows(assoc)))


def expected_cost(assoc: np.ndarray, models: ModelSet, dec: DecoderTable, p: Problem,
                  costs: Optional[np.ndarray] = None) -> float:
    if costs is None:
        costs = ChannelCost(dec, p).matrix(models)
    return float(np.dot(p.source_weights(), np.sum(assoc * costs, axis=1)))


def free_energy(assoc, models: ModelSet, dec: DecoderTable, p: Problem, T: float,
                costs: Optional[np.ndarray] = None) -> FreeEnergyReport:
    if T < 0:
        raise ValueError("temperature must be non-negative")
    D = expected_cost(assoc, models, dec, p, costs)
    H = conditional_entropy(assoc, p)
    return FreeEnergyReport(D, H, D - T * H if T > 0 else D, T)


def randomized_decoder(assoc: np.ndarray, models: ModelSet, p: Problem,
                       method: str = "fft") -> DecoderTable:
    """MMSE estimate of ``X1`` when each source point picks model ``m`` with
    probability ``p(m|x)``."""
    c = models.outputs(p.x_grid.points)
    w = p.source_weights()[:, None] * assoc
    keep = w > 0
    return decoder_from_points(c[keep], w[keep], p, method)


def effective_model_count(models: ModelSet, tol_a: float, tol_b: float,
                          subset: Optional[Sequence[int]] = None) -> int:
    """Number of classes under ``|a_i - a_j| <= tol_a and |b_i - b_j| <= tol_b``
    (transitive closure)."""
    return len(model_classes(models, tol_a, tol_b, subset))


def model_classes(models: ModelSet, tol_a: float, tol_b: float,
                  subset: Optional[Sequence[int]] = None):
    """Equivalence classes (lists of model indices) under the merge tolerances."""
    if tol_a <= 0 or tol_b <= 0:
        raise ValueError("tolerances must be positive")
    idx = list(range(len(models))) if subset is None else sorted(set(int(i) for i in subset))
    parent = {i: i for i in idx}

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for n, i in enumerate(idx):
        for j in idx[n + 1:]:
            if (abs(models.slopes[i] - models.slopes[j]) <= tol_a
                    and abs(models.intercepts[i] - models.intercepts[j]) <= tol_b):
                parent[find(j)] = find(i)
    classes = {}
    for i in idx:
        classes.setdefault(find(i), []).append(i)
    return sorted(classes.values())


def lagrangian_row(costs, probs, T: float) -> float:
    """Per-point Lagrangian ``sum D p + T sum p log p`` that `gibbs_update` minimises."""
    probs = np.asarray(probs, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(probs > 0, probs * np.log(probs), 0.0)
    return float(np.dot(costs, probs) + T * ent.sum())


def log_partition(costs, T: float):
    """``-T log sum exp(-D/T)``: the minimum of `lagrangian_row`."""
    return -T * logsumexp(-np.asarray(costs, float) / T, axis=-1)
