"""End-to-end bound computation: setup once, solve per (x*, direction, seed), aggregate."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.stats import gaussian_kde

from . import scm
from .auglag import MAXIMIZE, MINIMIZE, AugLagConfig, solve
from .basis import ResponseBasis, neural_basis, polynomial_basis
from .flows import ConditionalFlow, fit_flow
from .nn import TrainConfig
from .program import (
    NORMS,
    CausalProgram,
    EtaModel,
    MomentTargets,
    Regressors,
    build_targets,
    fit_moment_regressors,
    suggest_epsilon,
)
from .scm import IV, Dataset

log = logging.getLogger(__name__)

LOWER, UPPER = "lower", "upper"
DIRECTIONS = (LOWER, UPPER)
_SOLVER_KEYS = ("tau_init", "tau_max", "tau_growth", "outer_rounds", "inner_steps", "learning_rate", "eval_mc")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    dataset: str = "IV-lin-2d-strong"
    n: int = 10_000
    data_seed: int = 0
    confounding: float = 1.0
    basis: str = "polynomial"
    K: int = 0  # neural width; 0 picks 3 for p <= 2 and 10 otherwise
    constant: bool = False
    norm: str = "sup"
    eps: float = 0.0  # 0 means eps_factor x held-out RMSE
    eps_factor: float = 2.0
    M: int = 100
    B_mc: int = 500
    flow: str = "spline"
    flow_epochs: int = 200
    flow_lr: float = 0.01
    grid_index: int = 0
    grid_min: float = -2.0
    grid_max: float = 2.0
    grid_points: int = 7
    seeds: tuple = (0, 1, 2, 3, 4)
    setup_seed: int = 0
    tau_init: float = 10.0
    tau_max: float = 10_000.0
    tau_growth: float = 1.08
    outer_rounds: int = 150
    inner_steps: int = 30
    learning_rate: float = 0.001
    eval_mc: int = 10_000
    workers: int = 1
    record_time: bool = True
    output: str = "out"

    def __post_init__(self):
        if self.grid_points < 1:
            raise ConfigError("grid_points must be >= 1")
        if self.grid_points > 1 and not self.grid_min < self.grid_max:
            raise ConfigError("grid_min must be below grid_max")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if self.basis not in ("polynomial", "neural"):
            raise ConfigError(f"basis must be 'polynomial' or 'neural', got {self.basis!r}")
        if self.norm not in NORMS:
            raise ConfigError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.flow not in ("spline", "affine"):
            raise ConfigError(f"flow must be 'spline' or 'affine', got {self.flow!r}")
        if self.eps < 0 or self.eps_factor <= 0:
            raise ConfigError("eps must be >= 0 and eps_factor > 0")
        if self.M < 1 or self.n < 1 or self.B_mc < 1 or self.workers < 1:
            raise ConfigError("M, n, B_mc and workers must be positive")
        try:
            self.solver(MINIMIZE)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def solver(self, direction: str) -> AugLagConfig:
        return AugLagConfig(direction=direction, **{k: getattr(self, k) for k in _SOLVER_KEYS})

    def grid(self) -> np.ndarray:
        return np.linspace(self.grid_min, self.grid_max, self.grid_points)

    def echo(self) -> dict:
        out = asdict(self)
        out["seeds"] = list(self.seeds)
        return out


# -- config files ----------------------------------------------------------------


def _coerce(name: str, raw: str):
    kinds = {f.name: f.type for f in fields(RunConfig)}
    if name not in kinds:
        raise ConfigError(f"unknown config key {name!r}")
    kind = kinds[name]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if kind == "tuple":
            return tuple(int(s) for s in raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for number, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = _coerce(key, value)
    return values


def load_config(path=None, **overrides) -> RunConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    for key, value in overrides.items():
        if value is not None:
            values[key] = _coerce(key, value) if isinstance(value, str) else value
    return RunConfig(**values)


# -- setup -------------------------------------------------------------------------


@dataclass
class Setup:
    """Everything shared by the individual bound problems."""

    dataset: Dataset  # outcome already standardized
    y_shift: float
    y_scale: float
    h_model: ConditionalFlow
    regressors: Regressors
    basis: ResponseBasis
    targets: MomentTargets
    eps: float
    theta: np.ndarray
    sigma_scale: float
    noise_shift: np.ndarray | None
    noise_scale: np.ndarray | None
    x_grid: np.ndarray  # (points, p)
    true_effect: np.ndarray | None
    naive: np.ndarray
    raw_treatment: np.ndarray = field(repr=False, default=None)


def load_dataset(config: RunConfig) -> tuple[Dataset, bool]:
    """Returns the data and whether the true effect is known."""
    if os.path.exists(config.dataset):
        return scm.read_csv(config.dataset), False
    try:
        return scm.generate(config.dataset, config.n, config.data_seed, config.confounding), True
    except KeyError as exc:
        raise ConfigError(f"{config.dataset!r} is neither a file nor a known SCM. {exc.args[0]}") from None


def make_grid(config: RunConfig, x: np.ndarray) -> np.ndarray:
    if not 0 <= config.grid_index < x.shape[1]:
        raise ConfigError(f"grid_index {config.grid_index} out of range for treatment dimension {x.shape[1]}")
    grid = np.repeat(x.mean(axis=0)[None, :], config.grid_points, axis=0)
    grid[:, config.grid_index] = config.grid()
    return grid


def prepare(config: RunConfig) -> Setup:
    raw, synthetic = load_dataset(config)
    y_shift, y_scale = float(raw.y.mean()), float(raw.y.std())
    if y_scale == 0:
        raise ConfigError("the outcome column is constant")
    data = replace(raw, y=(raw.y - y_shift) / y_scale)
    seed = config.setup_seed
    flow_cfg = TrainConfig(epochs=config.flow_epochs, learning_rate=config.flow_lr)
    if data.kind == IV:
        h = fit_flow(config.flow, data.z, data.x, flow_cfg, seed=seed)
        inputs = data.x
    else:
        h = fit_flow(config.flow, data.x, data.m, flow_cfg, seed=seed)
        inputs = data.m
    regressors = fit_moment_regressors(data, seed=seed)
    eps = config.eps or suggest_epsilon(data, seed=seed, factor=config.eps_factor)

    dim = inputs.shape[1]
    if config.basis == "polynomial":
        basis = polynomial_basis(dim)
        theta = basis.fit_theta(inputs, data.y)
    else:
        K = config.K or (3 if dim <= 2 else 10)
        basis = neural_basis(inputs, data.y, K, seed=seed, constant=config.constant)
        theta = basis.theta_init
    targets = build_targets(data, h, basis, config.M, seed, regressors)
    sigma_scale = float(np.sqrt(np.mean(targets.implied_variance()) / np.mean(np.sum(targets.psi**2, axis=1))))

    noise_shift = noise_scale = None
    if data.kind != IV:
        noise_shift = np.concatenate([data.x.mean(axis=0), np.zeros(data.q)])
        noise_scale = np.concatenate([data.x.std(axis=0), np.ones(data.q)])

    grid = make_grid(config, data.x)
    truth = np.asarray(scm.true_effect(data.name, grid), dtype=float) if synthetic else None
    naive = y_shift + y_scale * scm.naive_regression_curve(data, grid, seed=seed)
    return Setup(data, y_shift, y_scale, h, regressors, basis, targets, eps, theta, sigma_scale,
                 noise_shift, noise_scale, grid, truth, naive, raw.x)


# -- solving -----------------------------------------------------------------------


@dataclass
class BoundResult:
    x_star: tuple
    direction: str
    seed: int
    bound: float
    converged: bool
    max_violation: float
    wall_time: float
    trace: list = field(default_factory=list, repr=False, compare=False)
    message: str = field(default="", compare=False)


def make_program(setup: Setup, x_star, seed: int, norm: str, B_mc: int) -> CausalProgram:
    eta = EtaModel.initial(
        setup.targets.noise.shape[1], setup.basis.K, seed, theta=setup.theta, sigma_scale=setup.sigma_scale,
        noise_shift=setup.noise_shift, noise_scale=setup.noise_scale,
    )
    return CausalProgram(setup.dataset.kind, setup.basis, eta, setup.targets, x_star, setup.eps, norm, B_mc,
                         setup.h_model, setup.dataset)


def solve_task(setup: Setup, config: RunConfig, x_star, direction: str, seed: int) -> BoundResult:
    program = make_program(setup, x_star, seed, config.norm, config.B_mc)
    out = solve(program, config.solver(MINIMIZE if direction == LOWER else MAXIMIZE), seed)
    if out.message:
        log.warning("x*=%s %s seed %d: %s", np.round(x_star, 4).tolist(), direction, seed, out.message)
    return BoundResult(
        tuple(float(v) for v in x_star), direction, seed,
        setup.y_shift + setup.y_scale * out.bound, out.converged, out.max_violation,
        out.wall_time if config.record_time else 0.0, out.trace, out.message,
    )


_WORKER: dict = {}


def _init_worker(setup, config):
    _WORKER["args"] = (setup, config)


def _run_task(task):
    return solve_task(*_WORKER["args"], *task)


def tasks(setup: Setup, config: RunConfig) -> list[tuple]:
    return [(x, d, s) for x in setup.x_grid for d in DIRECTIONS for s in config.seeds]


def solve_all(setup: Setup, config: RunConfig) -> list[BoundResult]:
    todo = tasks(setup, config)
    if config.workers == 1:
        return [solve_task(setup, config, *t) for t in todo]
    with ProcessPoolExecutor(config.workers, initializer=_init_worker, initargs=(setup, config)) as pool:
        return list(pool.map(_run_task, todo))


# -- aggregation -------------------------------------------------------------------


@dataclass
class BoundCurve:
    x_grid: np.ndarray
    grid_index: int
    lower: list  # float or None per grid point
    upper: list
    true_effect: np.ndarray | None
    naive: np.ndarray
    eps: float
    spline: dict = field(default_factory=dict)
    density: dict = field(default_factory=dict)

    @property
    def varied(self) -> np.ndarray:
        return self.x_grid[:, self.grid_index]

    def contains_truth(self, slack: float = 0.0) -> bool | None:
        """True when every grid point has both bounds and they bracket the effect."""
        if self.true_effect is None:
            return None
        for lo, hi, t in zip(self.lower, self.upper, self.true_effect):
            tol = slack * (1 + abs(t))
            if lo is None or hi is None or not lo - tol <= t <= hi + tol:
                return False
        return True


def aggregate(results, direction: str):
    values = [r.bound for r in results if r.direction == direction and r.converged and math.isfinite(r.bound)]
    if not values:
        return None
    return max(values) if direction == UPPER else min(values)


def build_curve(setup: Setup, config: RunConfig, results: list[BoundResult]) -> BoundCurve:
    lower, upper = [], []
    for x in setup.x_grid:
        key = tuple(float(v) for v in x)
        here = [r for r in results if r.x_star == key]
        lo, hi = aggregate(here, LOWER), aggregate(here, UPPER)
        if lo is None or hi is None:
            log.warning("x*=%s: no converged run for %s", key, "lower" if lo is None else "upper")
        lower.append(lo)
        upper.append(hi)
    curve = BoundCurve(setup.x_grid, config.grid_index, lower, upper, setup.true_effect, setup.naive, setup.eps)
    for name, values in (("lower", lower), ("upper", upper)):
        ok = [i for i, v in enumerate(values) if v is not None]
        if len(ok) >= 2:
            knots, coef = fit_bound_spline(curve.varied[ok], [values[i] for i in ok])
            curve.spline[name] = {"knots": knots.tolist(), "coefficients": coef.tolist()}
    curve.density = density_strip(setup.raw_treatment[:, config.grid_index], curve.varied)
    return curve


def fit_bound_spline(grid_points, bound_values) -> tuple[np.ndarray, np.ndarray]:
    """Natural cubic interpolant; returns knots and the ``(4, pieces)`` coefficient array."""
    x = np.asarray(grid_points, dtype=float)
    y = np.asarray(bound_values, dtype=float)
    if x.shape[0] < 2:
        raise ValueError("fit_bound_spline: need at least two grid points")
    if np.any(np.diff(x) <= 0):
        raise ValueError("fit_bound_spline: grid points must be strictly increasing")
    return x, CubicSpline(x, y, bc_type="natural").c


def eval_spline(knots, coefficients, at) -> np.ndarray:
    from scipy.interpolate import PPoly

    return PPoly(np.asarray(coefficients), np.asarray(knots), extrapolate=True)(np.asarray(at, dtype=float))


def density_strip(sample: np.ndarray, varied: np.ndarray, points: int = 200) -> dict:
    """Silverman-bandwidth Gaussian KDE of the observed varied coordinate over the grid range."""
    at = np.linspace(float(varied.min()), float(varied.max()), points)
    dens = gaussian_kde(sample, bw_method="silverman")(at)
    return {"x": at.tolist(), "density": dens.tolist()}


# -- bundles -----------------------------------------------------------------------


@dataclass
class RunOutput:
    config: RunConfig
    setup: Setup
    results: list[BoundResult]
    curve: BoundCurve


def run_bounds(config: RunConfig, setup: Setup | None = None) -> RunOutput:
    setup = setup or prepare(config)
    results = solve_all(setup, config)
    bad = [r for r in results if not r.converged]
    if bad:
        log.warning("%d of %d runs did not converge and are left out of the curve", len(bad), len(results))
    return RunOutput(config, setup, results, build_curve(setup, config, results))


# -- persistence -------------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def emit_csv(results: list[BoundResult], path) -> None:
    if not results:
        raise ValueError("emit_csv: no results")
    p = len(results[0].x_star)
    order = {d: i for i, d in enumerate(DIRECTIONS)}
    rows = sorted(results, key=lambda r: (r.x_star, order[r.direction], r.seed))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x_star_{i + 1}" for i in range(p)] + ["direction", "seed", "bound", "converged",
                                                          "max_violation", "wall_time_s"])
        for r in rows:
            w.writerow([*map(_fmt, r.x_star), r.direction, r.seed, _fmt(r.bound), str(r.converged).lower(),
                        _fmt(r.max_violation), _fmt(r.wall_time)])


def read_bounds_csv(path) -> list[BoundResult]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    p = sum(h.startswith("x_star_") for h in header)
    out = []
    for row in body:
        out.append(BoundResult(
            tuple(float(v) for v in row[:p]), row[p], int(row[p + 1]), float(row[p + 2]),
            row[p + 3] == "true", float(row[p + 4]), float(row[p + 5]),
        ))
    return out


def emit_trace(results: list[BoundResult], path) -> None:
    p = len(results[0].x_star)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x_star_{i + 1}" for i in range(p)] + ["direction", "seed", "round", "objective",
                                                          "max_violation", "tau"])
        for r in results:
            for t in r.trace:
                w.writerow([*map(_fmt, r.x_star), r.direction, r.seed, t.round, _fmt(t.objective),
                            _fmt(t.max_violation), _fmt(t.tau)])


def _opt(v):
    return None if v is None else float(v)


def summary_dict(curve: BoundCurve, config: RunConfig | None = None) -> dict:
    points = []
    for i, x in enumerate(curve.x_grid):
        points.append({
            "x_star": [float(v) for v in x],
            "lower": _opt(curve.lower[i]),
            "upper": _opt(curve.upper[i]),
            "true_effect": None if curve.true_effect is None else float(curve.true_effect[i]),
            "naive": float(curve.naive[i]),
        })
    return {
        "config": None if config is None else config.echo(),
        "eps": float(curve.eps),
        "grid_index": curve.grid_index,
        "points": points,
        "valid": curve.contains_truth(),
        "spline": curve.spline,
        "density": curve.density,
    }


def emit_summary_json(curve: BoundCurve, path, config: RunConfig | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(summary_dict(curve, config), fh, indent=2, sort_keys=True)
        fh.write("\n")


def curve_from_summary(summary: dict) -> BoundCurve:
    pts = summary["points"]
    truth = [p["true_effect"] for p in pts]
    return BoundCurve(
        np.array([p["x_star"] for p in pts], dtype=float),
        summary["grid_index"],
        [p["lower"] for p in pts],
        [p["upper"] for p in pts],
        None if any(t is None for t in truth) else np.array(truth, dtype=float),
        np.array([p["naive"] for p in pts], dtype=float),
        summary["eps"],
        summary.get("spline", {}),
        summary.get("density", {}),
    )


def write_outputs(run: RunOutput, directory=None) -> Path:
    out = Path(directory or run.config.output)
    out.mkdir(parents=True, exist_ok=True)
    emit_csv(run.results, out / "bounds.csv")
    emit_trace(run.results, out / "trace.csv")
    emit_summary_json(run.curve, out / "summary.json", run.config)
    if len(run.curve.x_grid) >= 2:
        from .plot import emit_svg_plot

        emit_svg_plot(run.curve, out / "bounds.svg")
    return out
