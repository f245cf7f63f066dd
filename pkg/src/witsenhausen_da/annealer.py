"""Deterministic annealing over randomized piecewise-affine encoders.

Outer loop: at each temperature, collapse coincident models, duplicate and
perturb every model, minimise the free energy ``F = D - T H`` by block
coordinate descent (associations, model parameters, decoder), then cool.

The transition from one step to several is discontinuous for this problem: a
copy displaced by a small amount is always pulled back onto its original. The
default perturbation therefore moves copies by up to one source standard
deviation, and copies that fall back are merged before the next duplication
so the model cap never fills with clones.

With ``symmetry`` on, the encoder is odd by construction: a local model
``(a, b)`` acts as ``x -> a x + b`` on ``x >= 0`` and as its mirror image
``x -> a x - b`` on ``x < 0``, and ``p(m | -x) = p(m | x)``.  Only the
non-negative half of the source grid is stored; each row with ``x > 0``
carries the probability of both ``x`` and ``-x``, and the row at ``x = 0``
sends half its mass to ``+b`` and half to ``-b`` so the decoder stays odd.
A single symmetric model is therefore already a (sloped) 1-step encoder.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Union

import numpy as np

from .model import (
    ChannelCost, FreeEnergyReport, ModelSet, _entropy_rows, gibbs_update, model_classes,
)
from .problem import DecoderTable, Problem, baseline_affine_optimal, decoder_from_points

log = logging.getLogger(__name__)

ARMIJO_C = 1e-4
MAX_HALVINGS = 30
FD_REL_STEP = 1e-6
MONOTONE_TOL = 1e-9
DEAD_MASS = 1e-14


class AnnealAbort(RuntimeError):
    """Free energy increased inside a fixed-temperature minimisation."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


@dataclass
class AnnealConfig:
    T_init: Union[float, str] = "auto"
    cooling_factor: float = 0.9
    T_min: Optional[float] = None
    max_models: int = 16
    perturb_scale: float = 1.0
    convergence_tol: float = 1e-9
    max_inner_iters: int = 200
    gradient_step: float = 1.0
    merge_tol_a: float = 1e-4
    merge_tol_b: float = 1e-3
    rng_seed: int = 0
    symmetry: bool = True
    target_steps: Optional[float] = None
    auto_factor: float = 10.0
    t_min_ratio: float = 1e-7
    model_step: str = "newton"
    merge_models: bool = True

    def __post_init__(self):
        if not 0 < self.cooling_factor < 1:
            raise ValueError("cooling_factor must lie in (0, 1)")
        if self.T_init != "auto" and not (isinstance(self.T_init, (int, float)) and self.T_init > 0):
            raise ValueError("T_init must be positive or 'auto'")
        if self.T_min is not None and self.T_min <= 0:
            raise ValueError("T_min must be positive")
        if (self.T_min is not None and self.T_init != "auto" and self.T_min >= self.T_init):
            raise ValueError("T_min must be below T_init")
        for name in ("max_models", "max_inner_iters"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        for name in ("perturb_scale", "convergence_tol", "gradient_step",
                     "merge_tol_a", "merge_tol_b"):
            if not getattr(self, name) >= 0 or (name != "perturb_scale" and getattr(self, name) == 0):
                raise ValueError(f"{name} must be positive")
        if self.target_steps is not None and self.target_steps <= 0:
            raise ValueError("target_steps must be positive")
        if self.model_step not in ("gradient", "newton"):
            raise ValueError("model_step must be 'gradient' or 'newton'")

    @property
    def target_count(self) -> Optional[int]:
        """Effective model count that ends growth.

        A symmetric model is one step on the positive axis; without symmetry
        each step needs a model on either side of the origin.
        """
        if self.target_steps is None:
            return None
        per_step = 1 if self.symmetry else 2
        return max(1, int(np.ceil(per_step * self.target_steps - 1e-9)))


@dataclass(frozen=True, eq=False)
class Support:
    """Source points carried by the association matrix, with their probability
    weights (summing to the source mass on the full grid)."""

    x: np.ndarray
    weights: np.ndarray
    symmetric: bool

    @classmethod
    def of(cls, p: Problem, symmetric: bool) -> "Support":
        w = p.source_weights()
        if not symmetric:
            return cls(p.x_grid.points, w, False)
        mid = p.x_grid.midpoint
        half = 2.0 * w[mid:]
        half[0] = w[mid]
        return cls(p.x_grid.points[mid:], half, True)

    def full_rows(self, rows: np.ndarray) -> np.ndarray:
        """Rows on the full source grid (mirrored when symmetric)."""
        if not self.symmetric:
            return rows
        return np.concatenate([rows[:0:-1], rows], axis=0)


@dataclass
class AnnealState:
    T: float
    models: ModelSet
    assoc: np.ndarray
    dec: DecoderTable
    report: FreeEnergyReport
    support: Support
    history: List[dict] = field(default_factory=list)
    block_log: List[tuple] = field(default_factory=list)
    growth: bool = True
    converged: bool = False
    effective_count: int = 1
    T_min: float = 0.0
    step: int = 0
    rng_state: Optional[dict] = None
    inner_iterations: int = 0

    @property
    def symmetric(self) -> bool:
        return self.support.symmetric

    def full_associations(self) -> np.ndarray:
        """``p(m|x)`` on the full source grid."""
        return self.support.full_rows(self.assoc)

    def encoder_outputs(self, x) -> np.ndarray:
        """``f_m(x)`` for every model, including the mirror rule when symmetric."""
        x = np.asarray(x, float)
        out = self.models.outputs(x)
        if self.symmetric:
            out = np.where(x[:, None] < 0, -self.models.outputs(-x), out)
        return out


# -- helpers ---------------------------------------------------------------

def _free_energy(assoc, costs, weights, T) -> FreeEnergyReport:
    D = float(np.dot(weights, np.sum(assoc * costs, axis=1)))
    H = float(np.dot(weights, _entropy_rows(assoc)))
    return FreeEnergyReport(D, H, D - T * H, T)


def _decoder(assoc, models: ModelSet, sup: Support, p: Problem) -> DecoderTable:
    """Mixture MMSE decoder; exactly odd when the support is symmetric."""
    c = models.outputs(sup.x)
    w = sup.weights[:, None] * assoc
    keep = w > 0
    c, w = c[keep], w[keep]
    if sup.symmetric:
        dec = decoder_from_points(np.concatenate([c, -c]), np.concatenate([w, w]) / 2, p)
        return DecoderTable(dec.grid, 0.5 * (dec.h - dec.h[::-1]))
    return decoder_from_points(c, w, p)


def _costs(dec: DecoderTable, models: ModelSet, sup: Support, p: Problem):
    channel = ChannelCost(dec, p)
    return channel, channel.matrix(models, sup.x)


def owners(state: AnnealState) -> np.ndarray:
    """Models that win at least one source point."""
    rows = state.support.weights > 0
    return np.unique(np.argmax(state.assoc[rows], axis=1))


def count_effective(state: AnnealState, config: AnnealConfig, p: Problem) -> int:
    tol_b = config.merge_tol_b * p.sigma_x
    return len(model_classes(state.models, config.merge_tol_a, tol_b, owners(state)))


# -- operations ------------------------------------------------------------

def init(config: AnnealConfig, problem: Problem) -> AnnealState:
    """Single model at the optimal affine solution ``(lam*, 0)``, trivial associations."""
    enc, _ = baseline_affine_optimal(problem)
    lam = float(enc.pieces.slopes[0])
    sup = Support.of(problem, config.symmetry)
    models = ModelSet([lam], [0.0], config.max_models)
    assoc = np.ones((sup.x.size, 1))
    dec = _decoder(assoc, models, sup, problem)
    _, costs = _costs(dec, models, sup, problem)
    rep0 = _free_energy(assoc, costs, sup.weights, 0.0)
    T0 = config.auto_factor * rep0.D if config.T_init == "auto" else float(config.T_init)
    T_min = config.T_min if config.T_min is not None else config.t_min_ratio * T0
    if T_min >= T0:
        raise ValueError("T_min must be below the initial temperature")
    state = AnnealState(T0, models, assoc, dec, replace(rep0, F=rep0.D, T=T0), sup, T_min=T_min)
    state.growth = config.target_count is None or config.target_count > 1
    state.history.append(_history_entry(state))
    return state


def _history_entry(state: AnnealState) -> dict:
    r = state.report
    return {"step": len(state.history), "T": r.T, "F": r.F, "D": r.D, "H": r.H,
            "effective_models": state.effective_count, "models": len(state.models)}


def collapse(state: AnnealState, config: AnnealConfig, p: Problem) -> AnnealState:
    """Merge models closer than the merge tolerances and drop models without mass.

    Merged parameters are mass-weighted means; association columns are summed.
    """
    mass = state.support.weights @ state.assoc
    tol_b = config.merge_tol_b * p.sigma_x
    classes = model_classes(state.models, config.merge_tol_a, tol_b)
    keep = [c for c in classes if mass[c].sum() > DEAD_MASS]
    if not keep:
        keep = [max(classes, key=lambda c: mass[c].sum())]
    a, b = state.models.slopes, state.models.intercepts
    slopes, inter, cols = [], [], []
    for cls in keep:
        m = mass[cls]
        wts = m / m.sum() if m.sum() > 0 else np.full(len(cls), 1.0 / len(cls))
        slopes.append(float(wts @ a[cls]))
        inter.append(float(wts @ b[cls]))
        cols.append(state.assoc[:, cls].sum(axis=1))
    assoc = np.stack(cols, axis=1)
    assoc /= assoc.sum(axis=1, keepdims=True)
    return replace(state, models=ModelSet(slopes, inter, config.max_models), assoc=assoc,
                   converged=False)


def duplicate_and_perturb(state: AnnealState, config: AnnealConfig, p: Problem,
                          rng: np.random.Generator):
    """Copy models (lowest index first, up to `max_models`) and perturb the copies.

    A copy's intercept moves by ``delta sigma_x u`` and its slope by ``delta u'``
    with ``u, u'`` uniform on ``[-1, 1]``; original and copy split the
    association mass equally. Returns ``(state, capped)``.
    """
    m = len(state.models)
    n_new = min(m, max(config.max_models - m, 0))
    if n_new == 0:
        return state, True
    u = rng.uniform(-1.0, 1.0, size=(n_new, 2))
    a, b = state.models.slopes, state.models.intercepts
    delta = config.perturb_scale
    new_a = a[:n_new] + delta * u[:, 1]
    new_b = b[:n_new] + delta * p.sigma_x * u[:, 0]
    if state.symmetric:
        new_b = np.abs(new_b)
    assoc = state.assoc.copy()
    assoc[:, :n_new] *= 0.5
    assoc = np.concatenate([assoc, assoc[:, :n_new]], axis=1)
    models = ModelSet(np.concatenate([a, new_a]), np.concatenate([b, new_b]), config.max_models)
    return replace(state, models=models, assoc=assoc, converged=False), n_new < m


def finite_difference_gradient(objective, theta, rel_step=FD_REL_STEP):
    """Central differences with step ``rel_step * (1 + |theta_i|)``."""
    theta = np.asarray(theta, float)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        h = rel_step * (1.0 + abs(theta[i]))
        e = np.zeros_like(theta)
        e[i] = h
        grad[i] = (objective(theta + e) - objective(theta - e)) / (2 * h)
    return grad


def model_objective(state: AnnealState, problem: Problem, m: int,
                    channel: Optional[ChannelCost] = None):
    """The part of ``F`` that depends on model `m`, as a function of ``(a, b)``."""
    channel = channel or ChannelCost(state.dec, problem)
    x = state.support.x
    w = state.support.weights * state.assoc[:, m]
    rows = w > 0
    x, w = x[rows], w[rows]
    return lambda theta: float(np.dot(w, channel(x, theta[0] * x + theta[1])))


def model_gradient(state: AnnealState, problem: Problem, m: int,
                   channel: Optional[ChannelCost] = None):
    """``(gradient, hessian)`` of `model_objective` at the current parameters."""
    channel = channel or ChannelCost(state.dec, problem)
    w = state.support.weights * state.assoc[:, m]
    rows = w > 0
    x, w = state.support.x[rows], w[rows]
    a, b = state.models.slopes[m], state.models.intercepts[m]
    _, d1, d2 = channel.derivatives(x, a * x + b)
    grad = np.array([np.dot(w * d1, x), np.sum(w * d1)])
    hess = np.array([[np.dot(w * d2, x * x), np.dot(w * d2, x)],
                     [np.dot(w * d2, x), np.sum(w * d2)]])
    return grad, hess


def _descent_direction(grad, hess):
    """Newton direction with Hessian eigenvalues replaced by their (floored)
    magnitudes, which is always a descent direction."""
    lam, vec = np.linalg.eigh(hess)
    scale = np.max(np.abs(lam))
    if not (np.all(np.isfinite(lam)) and scale > 0):
        return -grad
    lam = np.maximum(np.abs(lam), 1e-8 * scale)
    return -vec @ ((vec.T @ grad) / lam)


def gradient_step_models(state: AnnealState, config: AnnealConfig, problem: Problem,
                         channel: Optional[ChannelCost] = None) -> ModelSet:
    """One descent step per model with associations and decoder fixed.

    Gradient and curvature come from the exact derivatives of the discrete
    channel cost; the step is a sign-corrected Newton step with Armijo
    backtracking (halving), so ``F`` never increases. With symmetry the
    intercept is projected onto ``b >= 0``. A model whose line search fails
    keeps its parameters.
    """
    channel = channel or ChannelCost(state.dec, problem)
    models = state.models.copy()
    for m in range(len(models)):
        if not np.any(state.assoc[:, m] > 0):
            continue
        grad, hess = model_gradient(state, problem, m, channel)
        if not np.all(np.isfinite(grad)) or not np.any(grad):
            continue
        if config.model_step == "newton":
            direction = _descent_direction(grad, hess)
        else:
            direction = -grad
        slope = float(grad @ direction)
        if not slope < 0:
            direction, slope = -grad, -float(grad @ grad)
        objective = model_objective(state, problem, m, channel)
        theta = np.array([models.slopes[m], models.intercepts[m]])
        f0 = objective(theta)
        t = config.gradient_step
        for _ in range(MAX_HALVINGS):
            trial = theta + t * direction
            if state.symmetric:
                trial[1] = max(trial[1], 0.0)
            if objective(trial) <= f0 + ARMIJO_C * min(t * slope, grad @ (trial - theta)):
                models.slopes[m], models.intercepts[m] = trial
                break
            t *= 0.5
        else:
            log.debug("line search failed for model %d", m)
    return models


def minimize_free_energy(state: AnnealState, config: AnnealConfig, problem: Problem) -> AnnealState:
    """Block coordinate descent on ``F`` at fixed temperature.

    Each iteration updates (a) associations by the Gibbs rule, (b) model
    parameters by one descent step, (c) the decoder by the mixture MMSE rule.
    Raises `AnnealAbort` if any block raises ``F`` by more than 1e-9.
    """
    T = state.T
    if not T > 0:
        raise ValueError("temperature must be positive")
    sup = state.support
    w = sup.weights
    models, assoc, dec = state.models, state.assoc, state.dec
    channel, costs = _costs(dec, models, sup, problem)
    report = _free_energy(assoc, costs, w, T)
    log_entries = [(state.step, T, 0, "start", report.F)]
    converged = False

    def record(block, new, old, it):
        log_entries.append((state.step, T, it, block, new.F))
        if new.F > old.F + MONOTONE_TOL:
            raise AnnealAbort(
                f"free energy rose by {new.F - old.F:.3e} in block {block} "
                f"(T={T:.6g}, iteration {it})",
                replace(state, models=models, assoc=assoc, dec=dec, report=new))

    it = 0
    for it in range(1, config.max_inner_iters + 1):
        start = report
        assoc = gibbs_update(costs, T)
        new = _free_energy(assoc, costs, w, T)
        record("associations", new, report, it)
        report = new

        probe = replace(state, models=models, assoc=assoc, dec=dec)
        models = gradient_step_models(probe, config, problem, channel)
        costs = channel.matrix(models, sup.x)
        new = _free_energy(assoc, costs, w, T)
        record("models", new, report, it)
        report = new

        dec = _decoder(assoc, models, sup, problem)
        channel, costs = _costs(dec, models, sup, problem)
        new = _free_energy(assoc, costs, w, T)
        record("decoder", new, report, it)
        report = new

        if abs(start.F - report.F) < config.convergence_tol * (1.0 + abs(report.F)):
            converged = True
            break
    out = replace(state, models=models, assoc=assoc, dec=dec, report=report,
                  converged=converged, inner_iterations=it)
    out.block_log = state.block_log + log_entries
    return out


def cool(state: AnnealState, config: AnnealConfig) -> AnnealState:
    """Record the converged temperature in the history and lower ``T``."""
    history = state.history + [_history_entry(state)]
    return replace(state, T=state.T * config.cooling_factor, history=history,
                   step=state.step + 1, converged=False)


def detect_phase_transition(history) -> list:
    """``(T, old_count, new_count)`` wherever the effective model count grew."""
    out = []
    for prev, cur in zip(history, history[1:]):
        if cur["effective_models"] > prev["effective_models"]:
            out.append((cur["T"], prev["effective_models"], cur["effective_models"]))
    return out


def run(config: AnnealConfig, problem: Problem,
        callback: Optional[Callable[[AnnealState], None]] = None,
        state: Optional[AnnealState] = None) -> AnnealState:
    """Full schedule from `init` (or a checkpointed `state`) down to ``T_min``.

    Duplication stops once the effective model count reaches
    ``config.target_count``; the rest of the schedule only refines the models
    (and, with ``merge_models``, keeps merging coincident copies).
    """
    rng = np.random.default_rng(config.rng_seed)
    if state is None:
        state = init(config, problem)
    elif state.rng_state is not None:
        rng.bit_generator.state = state.rng_state
    target = config.target_count
    while state.T >= state.T_min:
        if config.merge_models:
            state = collapse(state, config, problem)
        if state.growth:
            state, _ = duplicate_and_perturb(state, config, problem, rng)
            # decoder block first, so the copies' outputs are decodable before
            # the Gibbs step compares them with their originals
            state.dec = _decoder(state.assoc, state.models, state.support, problem)
        state = minimize_free_energy(state, config, problem)
        count = count_effective(state, config, problem)
        state.effective_count = count
        if state.growth and target is not None and count >= target:
            state.growth = False
            log.info("target of %d effective models reached at T=%.4g", count, state.T)
        log.debug("T=%.5g F=%.9f D=%.9f H=%.4g models=%d effective=%d iters=%d", state.T,
                  state.report.F, state.report.D, state.report.H, len(state.models),
                  state.effective_count, state.inner_iterations)
        state = cool(state, config)
        state.rng_state = rng.bit_generator.state
        if callback is not None:
            callback(state)
    return state
