"""Command-line interface: ``anneal``, ``evaluate``, ``reproduce-table``, ``export``.

Exit codes: 0 success, 1 a reproduced cost misses its reference, 2 usage or
configuration error, 3 runtime abort (checkpoint preserved), 4 missing cache
with ``--no-run``.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import re
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .annealer import AnnealAbort, AnnealConfig, AnnealState, Support, run
from .extraction import StepSolution, classify, compare, harden, polish, solution_from_pieces
from .fileio import atomic_write_text, csv_text, write_json
from .model import FreeEnergyReport, ModelSet
from .piecewise import PiecewiseAffine
from .problem import (
    CostReport, DecoderTable, Problem, baseline_affine_optimal, baseline_one_step,
    piecewise_cost, piecewise_cost_gauss_hermite,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
EXIT_OK, EXIT_MISS, EXIT_USAGE, EXIT_ABORT, EXIT_NO_CACHE = 0, 1, 2, 3, 4
HISTORY_FIELDS = ("step", "T", "F", "D", "H", "effective_models")


class ConfigError(ValueError):
    """Invalid configuration or solution file; maps to exit code 2."""


# -- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class GridConfig:
    """Source grids as multiples of ``sigma_x``; y spacings in noise units."""

    anneal_span: float = 8.0
    anneal_points: int = 1601
    anneal_y_spacing: float = 0.05
    certify_span: float = 12.0
    certify_points: int = 3001
    certify_y_spacing: float = 0.025

    def __post_init__(self):
        for name in ("anneal_span", "anneal_y_spacing", "certify_span", "certify_y_spacing"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("anneal_points", "certify_points"):
            v = getattr(self, name)
            if not (isinstance(v, int) and v >= 3 and v % 2 == 1):
                raise ValueError(f"{name} must be an odd integer >= 3")


@dataclass(frozen=True)
class RunConfig:
    k: float = 0.2
    sigma_x: float = 5.0
    grid: GridConfig = field(default_factory=GridConfig)
    anneal: AnnealConfig = field(default_factory=AnnealConfig)
    output_dir: str = "run"
    checkpoint_every: int = 0

    @property
    def target_steps(self):
        return self.anneal.target_steps

    def anneal_problem(self) -> Problem:
        g = self.grid
        return Problem.create(self.k, self.sigma_x, g.anneal_points, g.anneal_span,
                              g.anneal_y_spacing)

    def certify_problem(self, n_points: Optional[int] = None) -> Problem:
        g = self.grid
        return Problem.create(self.k, self.sigma_x, n_points or g.certify_points,
                              g.certify_span, g.certify_y_spacing)

    def semantic_dict(self) -> dict:
        """Every field that can change a result (not where it is written)."""
        return {"problem": {"k": self.k, "sigma_x": self.sigma_x},
                "grid": dataclasses.asdict(self.grid),
                "anneal": dataclasses.asdict(self.anneal)}

    def config_hash(self) -> str:
        text = json.dumps(self.semantic_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        d = self.semantic_dict()
        target = d["anneal"].pop("target_steps")
        d["schema_version"] = SCHEMA_VERSION
        d["target_steps"] = "unbounded" if target is None else target
        d["output_dir"] = self.output_dir
        d["checkpoint_every"] = self.checkpoint_every
        return d


_TOP_KEYS = {"schema_version", "problem", "grid", "anneal", "target_steps", "output_dir",
             "checkpoint_every"}


def _line_of(text: str, key: str) -> int:
    pat = re.compile(r'"' + re.escape(key) + r'"\s*:')
    for n, line in enumerate(text.splitlines(), 1):
        if pat.search(line):
            return n
    return 1


def _check_keys(section: dict, allowed, where: str, text: str, path):
    if not isinstance(section, dict):
        raise ConfigError(f"{path}:{_line_of(text, where)}: '{where}' must be an object")
    for key in section:
        if key not in allowed:
            raise ConfigError(f"{path}:{_line_of(text, key)}: unknown key '{key}' in {where}")


def parse_config(text: str, path="<config>") -> RunConfig:
    """Build a `RunConfig` from JSON text; errors carry ``path:line``."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}: {e.msg}") from None
    _check_keys(raw, _TOP_KEYS, "top level", text, path)
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{path}:{_line_of(text, 'schema_version')}: "
                          f"unsupported schema_version {version}")
    problem = raw.get("problem", {})
    _check_keys(problem, {"k", "sigma_x"}, "problem", text, path)
    grid_raw = raw.get("grid", {})
    _check_keys(grid_raw, {f.name for f in dataclasses.fields(GridConfig)}, "grid", text, path)
    anneal_raw = raw.get("anneal", {})
    anneal_keys = {f.name for f in dataclasses.fields(AnnealConfig)} - {"target_steps"}
    _check_keys(anneal_raw, anneal_keys, "anneal", text, path)

    target = raw.get("target_steps", "unbounded")
    if target == "unbounded":
        target = None
    elif isinstance(target, bool) or not isinstance(target, (int, float)):
        raise ConfigError(f"{path}:{_line_of(text, 'target_steps')}: "
                          "target_steps must be a number or \"unbounded\"")

    def build(cls, kwargs, section):
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as e:
            key = next((k for k in kwargs if k in str(e)), section)
            raise ConfigError(f"{path}:{_line_of(text, key)}: {e}") from None

    grid = build(GridConfig, grid_raw, "grid")
    anneal = build(AnnealConfig, {**anneal_raw, "target_steps": target}, "anneal")
    k = problem.get("k", 0.2)
    sigma_x = problem.get("sigma_x", 5.0)
    for name, v in (("k", k), ("sigma_x", sigma_x)):
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
            raise ConfigError(f"{path}:{_line_of(text, name)}: {name} must be a positive number")
    every = raw.get("checkpoint_every", 0)
    if isinstance(every, bool) or not isinstance(every, int) or every < 0:
        raise ConfigError(f"{path}:{_line_of(text, 'checkpoint_every')}: "
                          "checkpoint_every must be a non-negative integer")
    out = raw.get("output_dir", "run")
    if not isinstance(out, str):
        raise ConfigError(f"{path}:{_line_of(text, 'output_dir')}: output_dir must be a string")
    return RunConfig(float(k), float(sigma_x), grid, anneal, out, every)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config ({e.strerror})") from None
    return parse_config(text, path)


def bundled_config(name: str) -> RunConfig:
    """Reference configuration shipped with the package (``3-step``, ...)."""
    text = resources.files(__package__).joinpath("configs", f"{name}.json").read_text()
    return parse_config(text, f"configs/{name}.json")


BUNDLED = ("3-step", "4-step", "5-step")


# -- records -------------------------------------------------------------------

def _revision() -> str:
    """Content hash of the package sources, in the style of a short commit id."""
    h = hashlib.sha1()
    root = Path(__file__).parent
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def solution_record(sol: StepSolution, config: RunConfig, history=(), timestamp=None) -> dict:
    transitions = []
    for prev, cur in zip(history, list(history)[1:]):
        if cur["effective_models"] > prev["effective_models"]:
            transitions.append({"T": cur["T"], "old": prev["effective_models"],
                                "new": cur["effective_models"]})
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "solution",
        "problem": {"k": config.k, "sigma_x": config.sigma_x, "noise_std": 1.0},
        "grid": {"span": config.grid.certify_span, "points": config.grid.certify_points,
                 "y_spacing": config.grid.certify_y_spacing},
        "encoder": sol.encoder.to_dict(),
        "cost": sol.cost.as_dict(),
        "label": classify(sol),
        "diagnostics": list(sol.diagnostics),
        "provenance": {"seed": config.anneal.rng_seed, "config_hash": config.config_hash(),
                       "revision": _revision(),
                       "timestamp": timestamp or time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())},
        # where and how often a run saves does not change its result, so it is
        # left out and reruns into another directory give identical records
        "config": {k: v for k, v in config.to_dict().items()
                   if k not in ("output_dir", "checkpoint_every")},
        "history": [dict(h) for h in history],
        "history_summary": {"cooling_steps": max(len(history) - 1, 0),
                            "final_T": history[-1]["T"] if history else None,
                            "transitions": transitions},
    }


def record_payload(record: dict) -> str:
    """Canonical text of a record without its timestamp, for determinism checks."""
    d = json.loads(json.dumps(record))
    d.get("provenance", {}).pop("timestamp", None)
    return json.dumps(d, indent=2, sort_keys=True)


def read_record(path) -> dict:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"{path}: cannot read ({e.strerror})") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}: {e.msg}") from None
    if not isinstance(d, dict) or d.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"{path}: schema mismatch (expected schema_version {SCHEMA_VERSION})")
    if d.get("kind") not in ("solution", "checkpoint"):
        raise ConfigError(f"{path}: unknown record kind {d.get('kind')!r}")
    need = ("problem", "grid", "encoder") if d["kind"] == "solution" else ("problem", "models")
    missing = [k for k in need if k not in d]
    if missing:
        raise ConfigError(f"{path}: schema mismatch, missing {', '.join(missing)}")
    return d


def record_problem(record: dict, n_points: Optional[int] = None) -> Problem:
    pr, g = record["problem"], record["grid"]
    return Problem.create(pr["k"], pr["sigma_x"], n_points or g["points"], g["span"],
                          g["y_spacing"], pr.get("noise_std", 1.0))


def record_solution(record: dict, n_points: Optional[int] = None) -> StepSolution:
    try:
        enc = PiecewiseAffine.from_dict(record["encoder"])
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"schema mismatch in encoder: {e}") from None
    return solution_from_pieces(enc, record_problem(record, n_points))


def checkpoint_record(state: AnnealState, config: RunConfig) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "checkpoint",
        "problem": {"k": config.k, "sigma_x": config.sigma_x, "noise_std": 1.0},
        "config": config.to_dict(),
        "T": state.T,
        "T_min": state.T_min,
        "step": state.step,
        "growth": state.growth,
        "effective_count": state.effective_count,
        "models": {"slopes": state.models.slopes.tolist(),
                   "intercepts": state.models.intercepts.tolist()},
        "assoc": state.assoc.tolist(),
        "decoder": state.dec.h.tolist(),
        "report": dataclasses.asdict(state.report),
        "history": [dict(h) for h in state.history],
        "rng_state": state.rng_state,
    }


def state_from_checkpoint(record: dict, config: RunConfig) -> AnnealState:
    """Rebuild an `AnnealState` that `annealer.run` can continue from."""
    p = config.anneal_problem()
    sup = Support.of(p, config.anneal.symmetry)
    models = ModelSet(record["models"]["slopes"], record["models"]["intercepts"],
                      config.anneal.max_models)
    assoc = np.asarray(record["assoc"], float)
    dec = DecoderTable(p.y_grid, np.asarray(record["decoder"], float))
    if assoc.shape != (sup.x.size, len(models)) or dec.h.size != p.y_grid.n_points:
        raise ConfigError("checkpoint does not match the configured grids")
    return AnnealState(record["T"], models, assoc, dec, FreeEnergyReport(**record["report"]),
                       sup, history=list(record["history"]), growth=record["growth"],
                       effective_count=record["effective_count"], T_min=record["T_min"],
                       step=record["step"], rng_state=record["rng_state"])


# -- commands ------------------------------------------------------------------

def history_csv(history) -> str:
    return csv_text(HISTORY_FIELDS, [np.array([h[f] for h in history]) for f in HISTORY_FIELDS])


def anneal(config: RunConfig, out_dir=None, resume: Optional[dict] = None):
    """Anneal, harden, polish and certify. Returns ``(record, solution, state)``.

    Writes ``solution.json``, ``history.csv`` and, every ``checkpoint_every``
    cooling steps, ``checkpoint.json`` into `out_dir`. On `AnnealAbort` a
    checkpoint of the offending state is written before re-raising.
    """
    out = Path(out_dir or config.output_dir)
    p = config.anneal_problem()
    cert = config.certify_problem()
    every = config.checkpoint_every

    def callback(state):
        if every and state.step % every == 0:
            write_json(out / "checkpoint.json", checkpoint_record(state, config))

    state = state_from_checkpoint(resume, config) if resume else None
    try:
        state = run(config.anneal, p, callback=callback, state=state)
    except AnnealAbort as e:
        if e.state is not None:
            write_json(out / "checkpoint.json", checkpoint_record(e.state, config))
        raise
    sol = polish(harden(state, p, cert), cert)
    record = solution_record(sol, config, state.history)
    write_json(out / "solution.json", record)
    atomic_write_text(out / "history.csv", history_csv(state.history))
    return record, sol, state


def evaluate(record: dict, n_points: Optional[int] = None) -> dict:
    """Certified costs and the trapezoid / Gauss-Hermite gap for a stored encoder."""
    p = record_problem(record, n_points)
    enc = PiecewiseAffine.from_dict(record["encoder"])
    cost = piecewise_cost(enc, p)
    gh = piecewise_cost_gauss_hermite(enc, p)
    return {"stage1": cost.stage1, "stage2": cost.stage2, "total": cost.total,
            "gauss_hermite_total": gh.total, "quadrature_gap": abs(gh.total - cost.total)}


@dataclass(frozen=True)
class TableRow:
    name: str
    reference: float
    tolerance: float
    achieved: Optional[float] = None
    label: str = ""

    @property
    def delta(self):
        return None if self.achieved is None else self.achieved - self.reference

    @property
    def ok(self):
        return self.achieved is not None and self.achieved <= self.reference + self.tolerance


REFERENCE_ROWS = (
    ("affine", 0.961852, 5e-5),
    ("1-step", 0.404253, 5e-5),
    ("3-step", 0.16694471, 0.166950 - 0.16694471),
    ("4-step", 0.16692319, 0.166930 - 0.16692319),
    ("5-step", 0.16692291, 0.1669232 - 0.16692291),
)


def baseline_rows(p: Problem):
    """Achieved costs of the two closed-form baselines."""
    _, affine = baseline_affine_optimal(p)
    one = piecewise_cost(baseline_one_step(p).pieces, p).total
    return {"affine": (affine, "0.5-step"), "1-step": (one, "1-step")}


def reproduce_table(cache_dir, no_run: bool = False, names=BUNDLED, stream=None):
    """Rows for the baselines and every bundled configuration.

    Cached solutions are reused when their config hash matches. Raises
    `FileNotFoundError` on a cache miss with `no_run`.
    """
    cache = Path(cache_dir)
    first = bundled_config(names[0]) if names else RunConfig()
    base = baseline_rows(first.certify_problem())
    rows = []
    for name, ref, tol in REFERENCE_ROWS:
        if name in base:
            rows.append(TableRow(name, ref, tol, *base[name]))
            continue
        if name not in names:
            continue
        config = bundled_config(name)
        path = cache / name / "solution.json"
        record = None
        if path.exists():
            record = read_record(path)
            if record["provenance"]["config_hash"] != config.config_hash():
                record = None
        if record is None:
            if no_run:
                raise FileNotFoundError(f"no cached solution for {name} in {cache}")
            if stream:
                print(f"running {name} ...", file=stream, flush=True)
            record, _, _ = anneal(config, cache / name)
        rows.append(TableRow(name, ref, tol, record["cost"]["total"], record["label"]))
    return rows


def format_table(rows) -> str:
    lines = [f"{'row':<8} {'reference':>12} {'achieved':>12} {'delta':>12} {'tolerance':>10}  "
             f"{'label':<9} status"]
    for r in rows:
        ach = "-" if r.achieved is None else f"{r.achieved:.9g}"
        delta = "-" if r.delta is None else f"{r.delta:+.3e}"
        lines.append(f"{r.name:<8} {r.reference:>12.9g} {ach:>12} {delta:>12} {r.tolerance:>10.2e}  "
                     f"{r.label:<9} {'ok' if r.ok else 'MISS'}")
    return "\n".join(lines)


def export(record: dict, kind: str, other: Optional[dict] = None) -> str:
    """CSV text for `kind` in ``encoder``, ``decoder``, ``difference``, ``history``."""
    if kind == "history":
        return history_csv(record.get("history", []))
    if record["kind"] != "solution":
        raise ConfigError(f"export {kind} needs a solution file")
    p = record_problem(record)
    sol = record_solution(record)
    x = p.x_grid.points
    if kind == "encoder":
        f = sol(x)
        return csv_text(["x", "f", "g"], [x, f, f - x])
    if kind == "decoder":
        y = p.y_grid.points
        return csv_text(["y", "h"], [y, sol.encoder.posterior_mean(y, p.sigma_x, p.noise_std)])
    if kind == "difference":
        other_sol = sol if other is None else record_solution(other)
        if other is not None and record_problem(other).x_grid != p.x_grid:
            raise ConfigError("solutions are stored on different grids")
        rep = compare(sol, other_sol, p)
        return csv_text(["x", "f_a", "f_a_minus_f_b"], [x, sol(x), rep.difference])
    raise ConfigError(f"unknown export kind {kind!r}")


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wce", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    a = sub.add_parser("anneal", help="anneal, harden, polish and certify an encoder")
    a.add_argument("--config", required=True, metavar="PATH")
    a.add_argument("--seed", type=int, help="override the configured seed")
    a.add_argument("--out", metavar="DIR", help="override the configured output directory")
    a.add_argument("--checkpoint-every", type=int, metavar="K")
    a.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint file")

    e = sub.add_parser("evaluate", help="recertify a stored solution")
    e.add_argument("solution", metavar="SOLUTION")
    e.add_argument("--grid-points", type=int, metavar="N")

    r = sub.add_parser("reproduce-table", help="compare achieved costs with the reference table")
    r.add_argument("--out", default="runs", metavar="DIR", help="solution cache (default: runs)")
    r.add_argument("--no-run", action="store_true", help="fail instead of annealing on a cache miss")

    x = sub.add_parser("export", help="write plot data as CSV")
    x.add_argument("input", metavar="FILE", help="solution or checkpoint file")
    x.add_argument("--kind", required=True)
    x.add_argument("--against", metavar="FILE", help="second solution for --kind difference")
    x.add_argument("--out", metavar="PATH", help="output file (default: standard output)")
    return ap


def _cmd_anneal(args) -> int:
    config = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["anneal"] = dataclasses.replace(config.anneal, rng_seed=args.seed)
    if args.checkpoint_every is not None:
        if args.checkpoint_every < 0:
            raise ConfigError("--checkpoint-every must be non-negative")
        changes["checkpoint_every"] = args.checkpoint_every
    if args.out:
        changes["output_dir"] = args.out
    config = dataclasses.replace(config, **changes)
    resume = read_record(args.resume) if args.resume else None
    if resume is not None and resume["kind"] != "checkpoint":
        raise ConfigError(f"{args.resume}: not a checkpoint")
    record, _, _ = anneal(config, resume=resume)
    c = record["cost"]
    print(f"{record['label']}: total {c['total']:.9g} (stage1 {c['stage1']:.9g}, "
          f"stage2 {c['stage2']:.9g}) -> {Path(config.output_dir) / 'solution.json'}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    record = read_record(args.solution)
    if record["kind"] != "solution":
        raise ConfigError(f"{args.solution}: not a solution file")
    if args.grid_points is not None and (args.grid_points < 3 or args.grid_points % 2 == 0):
        raise ConfigError("--grid-points must be an odd integer >= 3")
    r = evaluate(record, args.grid_points)
    for key in ("stage1", "stage2", "total"):
        print(f"{key:<15} {r[key]:.9g}")
    print(f"{'quadrature gap':<15} {r['quadrature_gap']:.3e}")
    return EXIT_OK


def _cmd_reproduce(args) -> int:
    try:
        rows = reproduce_table(args.out, args.no_run, stream=sys.stdout)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NO_CACHE
    print(format_table(rows))
    return EXIT_OK if all(r.ok for r in rows) else EXIT_MISS


def _cmd_export(args) -> int:
    if args.kind not in ("encoder", "decoder", "difference", "history"):
        raise ConfigError(f"unknown export kind {args.kind!r}")
    record = read_record(args.input)
    other = read_record(args.against) if args.against else None
    text = export(record, args.kind, other)
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"anneal": _cmd_anneal, "evaluate": _cmd_evaluate,
            "reproduce-table": _cmd_reproduce, "export": _cmd_export}


def thread_limit():
    """Value of ``WCE_THREADS`` (None when unset); raises `ConfigError` if invalid."""
    raw = os.environ.get("WCE_THREADS")
    if raw is None or raw == "":
        return None
    if not raw.isdigit() or int(raw) < 1:
        raise ConfigError(f"WCE_THREADS must be a positive integer, got {raw!r}")
    return int(raw)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        thread_limit()
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except AnnealAbort as e:
        print(f"aborted: {e}", file=sys.stderr)
        return EXIT_ABORT
