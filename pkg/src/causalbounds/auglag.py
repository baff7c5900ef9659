"""Augmented-Lagrangian method for ``min +-o(eta)  s.t.  c(eta) >= 0``.

Each round runs a fixed number of Adam steps on

    L(eta) = +-o(eta) + sum_l xi(c_l(eta), lambda_l, tau)

and then moves the multipliers, ``lambda <- max(0, lambda - tau c)``, and the
temperature, ``tau <- min(growth * tau, tau_max)``.  A single Adam instance
is kept for the whole run.

Anything with ``parameters()``, ``objective(rng)``, ``constraints(rng)`` and
a ``tolerance`` attribute can be solved; :class:`causalbounds.program.CausalProgram`
is the main client.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .nn import Adam

MINIMIZE = "minimize"
MAXIMIZE = "maximize"


@dataclass(frozen=True)
class AugLagConfig:
    tau_init: float = 10.0
    tau_max: float = 10_000.0
    tau_growth: float = 1.08
    outer_rounds: int = 150
    inner_steps: int = 30
    learning_rate: float = 0.001
    direction: str = MINIMIZE
    eval_mc: int = 10_000

    def __post_init__(self):
        if not 0 < self.tau_init <= self.tau_max:
            raise ValueError("AugLagConfig: need 0 < tau_init <= tau_max")
        if self.tau_growth <= 1:
            raise ValueError("AugLagConfig: tau_growth must exceed 1")
        if self.outer_rounds < 1 or self.inner_steps < 1 or self.eval_mc < 1:
            raise ValueError("AugLagConfig: round, step and sample counts must be positive")
        if self.learning_rate <= 0:
            raise ValueError("AugLagConfig: learning_rate must be positive")
        if self.direction not in (MINIMIZE, MAXIMIZE):
            raise ValueError(f"AugLagConfig: direction must be {MINIMIZE!r} or {MAXIMIZE!r}")

    @property
    def sign(self) -> float:
        return 1.0 if self.direction == MINIMIZE else -1.0


@dataclass
class TraceRow:
    round: int
    objective: float
    max_violation: float
    tau: float


@dataclass
class AugLagState:
    lam: np.ndarray
    tau: float
    history: list[TraceRow] = field(default_factory=list)


def xi(c, lam, tau):
    """Penalty term for one inequality ``c >= 0``.

    ``-lam c + tau c^2 / 2`` while ``tau c <= lam`` and the constant
    ``-lam^2 / (2 tau)`` beyond it.  Differentiable when ``c`` is a Tensor.
    """
    if isinstance(c, Tensor):
        lam = np.asarray(lam, dtype=float)
        active = tau * c.value <= lam
        quad = -lam * c + 0.5 * tau * dc.square(c)
        return dc.where(active, quad, np.broadcast_to(-(lam**2) / (2 * tau), c.shape))
    c, lam = np.asarray(c, dtype=float), np.asarray(lam, dtype=float)
    out = np.where(tau * c <= lam, -lam * c + 0.5 * tau * c**2, -(lam**2) / (2 * tau))
    return float(out) if out.ndim == 0 else out


def _terms(program, state: AugLagState, sign: float, rng) -> tuple[Tensor, Tensor, Tensor]:
    o = program.objective(rng)
    c = program.constraints(rng)
    if state.lam.shape != c.shape:
        raise dc.ShapeError(f"lagrangian: {c.shape[0]} constraints but {state.lam.shape[0]} multipliers")
    return sign * o + dc.sum(xi(c, state.lam, state.tau)), o, c


def lagrangian(program, state: AugLagState, direction: str = MINIMIZE, rng=None) -> Tensor:
    rng = rng if rng is not None else np.random.default_rng(0)
    sign = 1.0 if direction == MINIMIZE else -1.0
    return _terms(program, state, sign, rng)[0]


def outer_update(state: AugLagState, c, config: AugLagConfig) -> AugLagState:
    c = np.asarray(c, dtype=float)
    lam = np.maximum(0.0, state.lam - state.tau * c)
    tau = min(state.tau * config.tau_growth, config.tau_max)
    return replace(state, lam=lam, tau=tau)


def max_violation(c) -> float:
    return float(max(0.0, -np.min(c)))


@dataclass
class SolveResult:
    bound: float
    converged: bool
    max_violation: float
    trace: list[TraceRow]
    lam: np.ndarray
    wall_time: float
    message: str = ""

    @property
    def lambda_norm(self) -> float:
        return float(np.linalg.norm(self.lam))


def solve(program, config: AugLagConfig | None = None, seed: int = 0) -> SolveResult:
    """Run the full schedule; ``program``'s parameters are updated in place.

    The returned bound is the objective (sign restored) at the final iterate,
    re-estimated with ``config.eval_mc`` draws.  A run whose final violation
    exceeds ``program.tolerance`` is reported as not converged.  A non-finite
    Lagrangian stops the run early with ``converged=False``.
    """
    config = config or AugLagConfig()
    start = time.perf_counter()
    rng = np.random.default_rng([seed, 29])
    params = program.parameters()
    opt = Adam(params, lr=config.learning_rate)
    c0 = program.constraints(rng).value
    state = AugLagState(lam=np.zeros(c0.shape), tau=config.tau_init)
    sign = config.sign

    for r in range(config.outer_rounds):
        for _ in range(config.inner_steps):
            opt.zero_grad()
            with dc.Tape() as tape:
                total, o, _ = _terms(program, state, sign, rng)
                if not math.isfinite(total.item()):
                    return SolveResult(
                        math.nan, False, math.inf, state.history, state.lam, time.perf_counter() - start,
                        f"non-finite Lagrangian in round {r}; run aborted",
                    )
                tape.backward(total)
            opt.step()
        c = program.constraints(rng).value
        state = outer_update(state, c, config)
        state.history.append(TraceRow(r, float(o.item()), max_violation(c), state.tau))

    c = program.constraints(rng).value
    viol = max_violation(c)
    bound = float(program.objective(np.random.default_rng([seed, 31]), config.eval_mc).item())
    ok = math.isfinite(bound) and viol <= program.tolerance
    msg = "" if ok else f"final violation {viol:.3g} exceeds tolerance {program.tolerance:.3g}"
    return SolveResult(bound, ok, viol, state.history, state.lam, time.perf_counter() - start, msg)


@dataclass
class FunctionProgram:
    """Small explicit problems: ``objective(x)`` and ``constraints(x)`` on a Tensor vector."""

    objective_fn: object
    constraints_fn: object
    x: Tensor
    tolerance: float = 1e-3

    def parameters(self):
        return [self.x]

    def objective(self, rng=None, B_mc=None):
        return self.objective_fn(self.x)

    def constraints(self, rng=None):
        return dc.reshape(self.constraints_fn(self.x), (-1,))
