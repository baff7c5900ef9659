"""Synthetic structural causal models with known interventional means.

Every dataset draws its exogenous noises and confounders as independent
standard normals and only returns the observed columns.  IV datasets hold
``(z, x, y)``; leaky-mediator (LM) datasets hold ``(x, m, y)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

IV = "IV"
LM = "LM"


@dataclass(frozen=True)
class Dataset:
    kind: str
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray | None = None
    m: np.ndarray | None = None
    name: str | None = None
    seed: int | None = None

    def __post_init__(self):
        n = self.x.shape[0]
        other = self.z if self.kind == IV else self.m
        if self.kind not in (IV, LM):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if other is None:
            raise ValueError(f"{self.kind} dataset requires the {'z' if self.kind == IV else 'm'} block")
        if other.shape[0] != n or self.y.shape != (n,):
            raise ValueError("row counts of dataset blocks disagree")
        if not all(np.all(np.isfinite(a)) for a in (self.x, self.y, other)):
            raise ValueError("dataset contains non-finite values")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        """Treatment dimension."""
        return self.x.shape[1]

    @property
    def q(self) -> int:
        """Instrument (IV) or mediator (LM) dimension."""
        return (self.z if self.kind == IV else self.m).shape[1]

    @property
    def regressor_inputs(self) -> np.ndarray:
        """Columns the outcome moments are conditioned on."""
        return np.hstack([self.x, self.z if self.kind == IV else self.m])

    def subset(self, idx) -> "Dataset":
        return Dataset(
            self.kind,
            self.x[idx],
            self.y[idx],
            None if self.z is None else self.z[idx],
            None if self.m is None else self.m[idx],
            self.name,
            self.seed,
        )


@dataclass(frozen=True)
class _Scm:
    kind: str
    dim: int
    treatment: Callable  # IV: (z, c, e) -> x ; LM: (u, e) -> x
    outcome: Callable  # IV: (x, c, e) -> y ; LM: (m, c, u, e) -> y
    effect: Callable  # x* (..., p) -> E[Y | do(x*)]
    mediator: Callable | None = None  # LM: (x, c, e) -> m


def _s(a):
    return a.sum(axis=-1)


_REGISTRY: dict[str, _Scm] = {
    "IV-lin-1d-weak-add": _Scm(
        IV, 1,
        lambda z, c, e: 3 * z + 0.5 * c + e,
        lambda x, c, e: x[:, 0] - 6 * c[:, 0] + e,
        lambda x: x[..., 0],
    ),
    "IV-quad-1d-strong": _Scm(
        IV, 1,
        lambda z, c, e: 0.5 * z + 3 * c + e,
        lambda x, c, e: 0.3 * x[:, 0] ** 2 - 1.5 * x[:, 0] * c[:, 0] + e,
        lambda x: 0.3 * x[..., 0] ** 2,
    ),
    "IV-quad-1d-weak": _Scm(
        IV, 1,
        lambda z, c, e: 3 * z + 0.5 * c + e,
        lambda x, c, e: 0.3 * x[:, 0] ** 2 - 1.5 * x[:, 0] * c[:, 0] + e,
        lambda x: 0.3 * x[..., 0] ** 2,
    ),
    "IV-lin-2d-strong": _Scm(
        IV, 2,
        lambda z, c, e: 0.5 * z + 2 * c + e,
        lambda x, c, e: _s(x) - 3 * _s(x) * _s(c) + e,
        lambda x: _s(x),
    ),
    "IV-lin-2d-weak": _Scm(
        IV, 2,
        lambda z, c, e: 2 * z + c + e,
        lambda x, c, e: 5 * x[:, 0] + 6 * x[:, 1] - x[:, 0] * _s(c) + e,
        lambda x: 5 * x[..., 0] + 6 * x[..., 1],
    ),
    "IV-quad-2d-strong-add": _Scm(
        IV, 2,
        lambda z, c, e: z + 2 * c + e,
        lambda x, c, e: 2 * x[:, 0] ** 2 + 2 * x[:, 1] ** 2 - _s(c) + e,
        lambda x: 2 * x[..., 0] ** 2 + 2 * x[..., 1] ** 2,
    ),
    "IV-quad-2d-weak": _Scm(
        IV, 2,
        lambda z, c, e: 2 * z + c + e,
        lambda x, c, e: 5 * x[:, 0] ** 2 + 6 * x[:, 1] ** 2 - _s(x) * _s(c) + e,
        lambda x: 5 * x[..., 0] ** 2 + 6 * x[..., 1] ** 2,
    ),
    "IV-quad-3d-weak": _Scm(
        IV, 3,
        lambda z, c, e: 2 * z + c + e,
        lambda x, c, e: 2 * x[:, 0] ** 2 + 2 * x[:, 1] ** 2 + 2 * x[:, 2]
        - 0.3 * (x[:, 1] + x[:, 2]) * _s(c) + e,
        lambda x: 2 * x[..., 0] ** 2 + 2 * x[..., 1] ** 2 + 2 * x[..., 2],
    ),
    # E[(m1+m2)(c1+c2+u1+u2)] under do(x*) is 3 * E[(c1+c2)^2] = 6
    "LM-lin1-2d": _Scm(
        LM, 2,
        lambda u, e: u + e,
        lambda m, c, u, e: 2 * m[:, 0] + m[:, 1] - _s(m) * (_s(c) + _s(u)) + e,
        lambda x: 2 * x[..., 0] + x[..., 1] - 6.0,
        lambda x, c, e: x + 3 * c - e,
    ),
    # here the cross moment is 0.3 * E[(c1+c2)^2] = 0.6
    "LM-lin2-2d": _Scm(
        LM, 2,
        lambda u, e: u + e,
        lambda m, c, u, e: 2 * m[:, 0] + m[:, 1] - 0.3 * _s(m) * (_s(c) + _s(u)) + e,
        lambda x: 6 * x[..., 0] + 3 * x[..., 1] - 0.6,
        lambda x, c, e: 3 * x + c - e,
    ),
}

ALIASES = {"LM-lin-2d-strong": "LM-lin1-2d", "LM-lin-2d-weak": "LM-lin2-2d"}

SCM_NAMES = tuple(_REGISTRY)


def canonical_name(name: str) -> str:
    name = ALIASES.get(name, name)
    if name not in _REGISTRY:
        valid = ", ".join(list(SCM_NAMES) + list(ALIASES))
        raise KeyError(f"unknown dataset {name!r}; valid names: {valid}")
    return name


def treatment_dim(name: str) -> int:
    return _REGISTRY[canonical_name(name)].dim


def dataset_kind(name: str) -> str:
    return _REGISTRY[canonical_name(name)].kind


def generate(name: str, n: int = 10_000, seed: int = 0, confounding: float = 1.0) -> Dataset:
    """Sample ``n`` observational rows from the named SCM.

    ``confounding`` multiplies every confounder draw; 0 gives an
    unconfounded debug variant with the same interventional effect for the
    IV models.
    """
    name = canonical_name(name)
    if n < 1:
        raise ValueError("n must be at least 1")
    spec = _REGISTRY[name]
    d = spec.dim
    rng = np.random.default_rng(seed)
    if spec.kind == IV:
        c = confounding * rng.standard_normal((n, d))
        z = rng.standard_normal((n, d))
        e_x = rng.standard_normal((n, d))
        e_y = rng.standard_normal(n)
        x = spec.treatment(z, c, e_x)
        y = spec.outcome(x, c, e_y)
        return Dataset(IV, x, y, z=z, name=name, seed=seed)
    c = confounding * rng.standard_normal((n, d))
    u = confounding * rng.standard_normal((n, d))
    e_x = rng.standard_normal((n, d))
    e_m = rng.standard_normal((n, d))
    e_y = rng.standard_normal(n)
    x = spec.treatment(u, e_x)
    m = spec.mediator(x, c, e_m)
    y = spec.outcome(m, c, u, e_y)
    return Dataset(LM, x, y, m=m, name=name, seed=seed)


def _check_xstar(name: str, x_star) -> np.ndarray:
    x_star = np.asarray(x_star, dtype=float)
    d = _REGISTRY[name].dim
    if x_star.shape[-1:] != (d,):
        raise ValueError(f"{name}: x_star must have trailing dimension {d}, got shape {x_star.shape}")
    return x_star


def true_effect(name: str, x_star) -> np.ndarray | float:
    """Closed-form E[Y | do(X = x_star)]; accepts a single point or a stack."""
    name = canonical_name(name)
    x_star = _check_xstar(name, x_star)
    out = _REGISTRY[name].effect(x_star)
    return float(out) if np.ndim(out) == 0 else out


def mc_effect(name: str, x_star, draws: int = 1_000_000, seed: int = 12345) -> tuple[float, float]:
    """Monte-Carlo E[Y | do(X = x_star)] and its standard error.

    Simulates the structural equations with the treatment forced to ``x_star``.
    """
    name = canonical_name(name)
    x_star = _check_xstar(name, x_star)
    spec = _REGISTRY[name]
    d = spec.dim
    rng = np.random.default_rng(seed)
    x = np.broadcast_to(x_star, (draws, d))
    c = rng.standard_normal((draws, d))
    if spec.kind == IV:
        y = spec.outcome(x, c, rng.standard_normal(draws))
    else:
        u = rng.standard_normal((draws, d))
        m = spec.mediator(x, c, rng.standard_normal((draws, d)))
        y = spec.outcome(m, c, u, rng.standard_normal(draws))
    return float(y.mean()), float(y.std(ddof=1) / np.sqrt(draws))


def naive_regression_curve(dataset: Dataset, x_grid, train_config=None, mlp_config=None, seed: int = 0):
    """Predictions of an outcome-on-treatment MLP, i.e. E[Y | X] ignoring confounding.

    The default learning rate is 1e-3; at 1e-2 the final minibatch jitter
    alone moves predictions by about 0.1.
    """
    from .nn import MlpConfig, TrainConfig, train_regression

    train_config = train_config or TrainConfig(learning_rate=0.001)
    mlp_config = mlp_config or MlpConfig(dataset.p, (64, 32, 16), 1)
    fit = train_regression(dataset.x, dataset.y, train_config, mlp_config, seed=seed)
    grid = np.atleast_2d(np.asarray(x_grid, dtype=float))
    return fit.model.predict(grid)[:, 0]


# -- CSV ---------------------------------------------------------------------


def columns(kind: str, p: int, q: int) -> list[str]:
    if kind == IV:
        return [f"z{i + 1}" for i in range(q)] + [f"x{i + 1}" for i in range(p)] + ["y"]
    return [f"x{i + 1}" for i in range(p)] + [f"m{i + 1}" for i in range(q)] + ["y"]


def write_csv(dataset: Dataset, path) -> None:
    first, second = (dataset.z, dataset.x) if dataset.kind == IV else (dataset.x, dataset.m)
    table = np.hstack([first, second, dataset.y[:, None]])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns(dataset.kind, dataset.p, dataset.q))
        for row in table:
            w.writerow([repr(float(v)) for v in row])


def read_csv(path) -> Dataset:
    """Load a dataset; the kind is inferred from the header (z-columns mean IV)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError(f"{path}: no data rows")
    cols = {h: i for i, h in enumerate(header)}
    if "y" not in cols:
        raise ValueError(f"{path}: missing 'y' column")

    def block(prefix):
        names = sorted((h for h in header if h[:1] == prefix and h[1:].isdigit()), key=lambda h: int(h[1:]))
        return data[:, [cols[h] for h in names]] if names else None

    z, x, m = block("z"), block("x"), block("m")
    if x is None:
        raise ValueError(f"{path}: missing treatment columns x1..xp")
    kind = IV if z is not None else LM
    expected = columns(kind, x.shape[1], (z if kind == IV else m).shape[1]) if (z is not None or m is not None) else None
    if expected is None or header != expected:
        raise ValueError(f"{path}: header {header} does not match the IV or LM schema")
    return Dataset(kind, x, data[:, cols["y"]], z=z, m=m, name=Path(path).stem)
