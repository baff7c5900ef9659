"""The constrained program over distributions of response coefficients.

``theta | n`` has mean ``mu(n)`` and covariance ``Sigma(n) = L^T L + omega I``,
both produced by small networks of the noise input ``n``.  Only these two
moments enter the constraints, so the implied moments of ``Y | x, z`` at a
support point are closed-form bilinear forms in ``psi(x)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .basis import ResponseBasis
from .diffcore import Tensor
from .flows import ConditionalFlow
from .nn import (
    Mlp,
    MlpConfig,
    TrainConfig,
    _fmt,
    _parse,
    init_mlp,
    mlp_from_records,
    mlp_records,
    read_records,
    train_regression,
    write_records,
)
from .scm import IV, LM, Dataset

OMEGA = 1e-4
SUP = "sup"
TWO = "two"
NORMS = (SUP, TWO)


def _triu(K: int):
    rows, cols = np.triu_indices(K)
    spread = np.zeros((len(rows), K))
    spread[np.arange(len(rows)), rows] = 1.0
    return rows, cols, spread


class EtaModel:
    """Mean and Cholesky networks of the coefficient distribution."""

    def __init__(self, mu_net: Mlp, sigma_net: Mlp, K: int, omega: float = OMEGA):
        if omega <= 0:
            raise ValueError("EtaModel: jitter omega must be positive")
        T = K * (K + 1) // 2
        if mu_net.config.output_dim != K or sigma_net.config.output_dim != T:
            raise dc.ShapeError(
                f"EtaModel: expected outputs ({K}, {T}), got "
                f"({mu_net.config.output_dim}, {sigma_net.config.output_dim})"
            )
        self.mu_net = mu_net
        self.sigma_net = sigma_net
        self.K = K
        self.omega = omega
        self._rows, self._cols, self._spread = _triu(K)

    @classmethod
    def initial(
        cls,
        noise_dim: int,
        K: int,
        seed: int,
        theta=None,
        sigma_scale: float = 0.1,
        omega: float = OMEGA,
        mu_hidden=(16, 16),
        sigma_hidden=(32, 32),
        noise_shift=None,
        noise_scale=None,
    ) -> "EtaModel":
        """``mu(n)`` starts close to ``theta`` and ``Sigma(n)`` close to ``sigma_scale**2 I``.

        The Cholesky net is not started at zero: ``|L psi|^2`` has a zero
        gradient at ``L = 0`` and the covariance would never move.
        """
        rng = np.random.default_rng([seed, 7])
        mu = init_mlp(MlpConfig(noise_dim, tuple(mu_hidden), K), int(rng.integers(2**31)))
        T = K * (K + 1) // 2
        sigma = init_mlp(MlpConfig(noise_dim, tuple(sigma_hidden), T), int(rng.integers(2**31)))
        mu.weights[-1].value *= 0.01
        sigma.weights[-1].value *= 0.01
        if theta is not None:
            mu.biases[-1].value[:] = np.asarray(theta, dtype=float)
        rows, cols, _ = _triu(K)
        sigma.biases[-1].value[:] = np.where(rows == cols, sigma_scale, 0.0)
        for net in (mu, sigma):
            if noise_shift is not None:
                net.in_shift = np.asarray(noise_shift, dtype=float)
                net.in_scale = np.asarray(noise_scale, dtype=float)
        return cls(mu, sigma, K, omega)

    @property
    def noise_dim(self) -> int:
        return self.mu_net.config.input_dim

    def parameters(self) -> list[Tensor]:
        return self.mu_net.parameters() + self.sigma_net.parameters()

    def mu(self, noise) -> Tensor:
        return self.mu_net(noise)

    def cholesky(self, noise) -> np.ndarray:
        """Upper-triangular factors ``L(n)``, shape ``(rows, K, K)``."""
        e = self.sigma_net.predict(np.atleast_2d(noise))
        L = np.zeros((e.shape[0], self.K, self.K))
        L[:, self._rows, self._cols] = e
        return L

    def sigma(self, noise) -> np.ndarray:
        L = self.cholesky(noise)
        return np.swapaxes(L, 1, 2) @ L + self.omega * np.eye(self.K)

    def quad_forms(self, noise, psi: np.ndarray) -> tuple[Tensor, Tensor]:
        """Per-row ``(psi^T mu, psi^T Sigma psi)``, differentiable in the parameters."""
        mu = self.mu_net(noise)
        first = dc.sum(mu * psi, axis=1)
        e = self.sigma_net(noise)
        L_psi = dc.matmul(e * psi[:, self._cols], self._spread)
        var = dc.sum(dc.square(L_psi), axis=1) + self.omega * np.sum(psi**2, axis=1)
        return first, var

    def copy(self) -> "EtaModel":
        return EtaModel(self.mu_net.copy(), self.sigma_net.copy(), self.K, self.omega)


def save_eta(eta: EtaModel, path) -> None:
    lines = [f"K {eta.K}", f"omega {_fmt([eta.omega])}"]
    lines += mlp_records(eta.mu_net, "mu.") + mlp_records(eta.sigma_net, "sigma.")
    write_records(path, "eta", lines)


def load_eta(path) -> EtaModel:
    rec = read_records(path, "eta")
    return EtaModel(
        mlp_from_records(rec, "mu."), mlp_from_records(rec, "sigma."), int(rec["K"][0]), float(_parse(rec["omega"])[0])
    )


# -- data-side quantities ------------------------------------------------------


REGRESSOR_HIDDEN = (64, 32, 16)


@dataclass
class Regressors:
    first: Mlp
    second: Mlp

    def __call__(self, inputs) -> tuple[np.ndarray, np.ndarray]:
        return self.first.predict(inputs)[:, 0], self.second.predict(inputs)[:, 0]


def fit_moment_regressors(dataset: Dataset, config: TrainConfig | None = None, seed: int = 0) -> Regressors:
    """MLPs for ``E[Y | inputs]`` and ``E[Y^2 | inputs]``.

    Inputs are ``(x, z)`` for IV data and ``(x, m)`` for mediator data.
    """
    config = config or TrainConfig()
    inputs = dataset.regressor_inputs
    shape = MlpConfig(inputs.shape[1], REGRESSOR_HIDDEN, 1)
    first = train_regression(inputs, dataset.y, config, shape, seed=seed).model
    second = train_regression(inputs, dataset.y**2, config, shape, seed=seed + 1).model
    return Regressors(first, second)


def suggest_epsilon(dataset: Dataset, config: TrainConfig | None = None, seed: int = 0, factor: float = 2.0,
                    holdout: float = 0.2) -> float:
    """``factor`` times the held-out RMSE of a first-moment regressor."""
    config = config or TrainConfig()
    order = np.random.default_rng([seed, 11]).permutation(dataset.n)
    cut = max(1, int(round(holdout * dataset.n)))
    test, train = order[:cut], order[cut:]
    inputs = dataset.regressor_inputs
    shape = MlpConfig(inputs.shape[1], REGRESSOR_HIDDEN, 1)
    net = train_regression(inputs[train], dataset.y[train], config, shape, seed=seed).model
    resid = net.predict(inputs[test])[:, 0] - dataset.y[test]
    return float(factor * np.sqrt(np.mean(resid**2)))


@dataclass(frozen=True)
class MomentTargets:
    variant: str
    index: np.ndarray
    B: np.ndarray  # (2, M)
    noise: np.ndarray  # (M, noise_dim)
    psi: np.ndarray  # (M, K)

    @property
    def M(self) -> int:
        return self.index.shape[0]

    def implied_variance(self) -> np.ndarray:
        """``B2 - B1^2`` floored at 1e-6."""
        return np.maximum(self.B[1] - self.B[0] ** 2, 1e-6)


def build_targets(
    dataset: Dataset,
    h_model: ConditionalFlow,
    basis: ResponseBasis,
    M: int,
    seed: int,
    regressors: Regressors,
    floor_second: bool = True,
) -> MomentTargets:
    """Subsample ``M`` support points and cache everything the constraints need.

    For IV data the noise input is ``h_z^{-1}(x)`` and the basis acts on
    ``x``.  For mediator data ``h`` models ``M | X``, the noise input is
    ``(x, h_x^{-1}(m))`` and the basis acts on ``m``.

    With ``floor_second`` the second-moment targets are raised to at least
    ``B1^2 + 1e-6``; no coefficient distribution can match a smaller value.
    """
    if M > dataset.n:
        raise ValueError(f"build_targets: M={M} exceeds the {dataset.n} available rows")
    if M < 1:
        raise ValueError("build_targets: M must be >= 1")
    index = np.random.default_rng([seed, 3]).choice(dataset.n, size=M, replace=False)
    sub = dataset.subset(index)
    B = np.vstack(regressors(sub.regressor_inputs))
    if floor_second:
        B[1] = np.maximum(B[1], B[0] ** 2 + 1e-6)
    if dataset.kind == IV:
        noise = h_model.invert(sub.z, sub.x)
        psi = basis(sub.x)
    else:
        noise = np.hstack([sub.x, h_model.invert(sub.x, sub.m)])
        psi = basis(sub.m)
    return MomentTargets(dataset.kind, index, B, np.atleast_2d(noise), np.atleast_2d(psi))


def implied_moments(eta: EtaModel, targets: MomentTargets) -> tuple[Tensor, Tensor]:
    """``A1 = psi^T mu`` and ``A2 = psi^T (Sigma + mu mu^T) psi`` at every support point."""
    first, var = eta.quad_forms(targets.noise, targets.psi)
    return first, var + dc.square(first)


lm_constraint_moments = implied_moments


def constraint_matrix(eta: EtaModel, targets: MomentTargets) -> Tensor:
    A1, A2 = implied_moments(eta, targets)
    return dc.concat([dc.reshape(targets.B[0] - A1, (1, -1)), dc.reshape(targets.B[1] - A2, (1, -1))], axis=0)


def constraint_scalars(nu, norm: str, eps: float) -> Tensor:
    """``eps - |nu|`` entrywise for the sup norm, ``eps - ||nu||`` for the 2-norm."""
    nu = nu if isinstance(nu, Tensor) else Tensor(nu)
    if norm == SUP:
        return eps - dc.absolute(dc.reshape(nu, (-1,)))
    if norm == TWO:
        return dc.reshape(eps - dc.sqrt(dc.sum(dc.square(nu))), (1,))
    raise ValueError(f"unknown norm {norm!r}; expected one of {NORMS}")


def objective_iv(eta: EtaModel, x_star, basis: ResponseBasis, B_mc: int, seed) -> Tensor:
    """``psi(x*)^T`` times the MC average of ``mu(n)`` over ``n ~ N(0, I)``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    noise = rng.standard_normal((B_mc, eta.noise_dim))
    return dc.sum(dc.mean(eta.mu(noise), axis=0) * basis(np.asarray(x_star, dtype=float)))


def lm_objective_draws(x_star, h_model: ConditionalFlow, dataset: Dataset, B_mc: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Noise inputs ``(n_x, n_m)`` and mediator values ``m = h_{x*}(n_m)``."""
    x_star = np.asarray(x_star, dtype=float)
    if x_star.shape != (dataset.p,):
        raise dc.ShapeError(f"objective_lm: x* has shape {x_star.shape}, treatment dimension is {dataset.p}")
    n_x = dataset.x[rng.integers(dataset.n, size=B_mc)]
    n_m = rng.standard_normal((B_mc, dataset.q))
    m = np.atleast_2d(h_model.sample(x_star, n_m))
    return np.hstack([n_x, n_m]), m


def objective_lm(eta: EtaModel, x_star, basis: ResponseBasis, h_m_model: ConditionalFlow, B_mc: int,
                 dataset: Dataset, seed) -> Tensor:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    noise, m = lm_objective_draws(x_star, h_m_model, dataset, B_mc, rng)
    return dc.mean(dc.sum(eta.mu(noise) * basis(m), axis=1))


@dataclass
class CausalProgram:
    """One bound problem: a fixed ``x*`` and a trainable ``eta``."""

    variant: str
    basis: ResponseBasis
    eta: EtaModel
    targets: MomentTargets
    x_star: np.ndarray
    eps: float
    norm: str = SUP
    B_mc: int = 500
    h_model: ConditionalFlow | None = None
    dataset: Dataset | None = None

    def __post_init__(self):
        self.x_star = np.asarray(self.x_star, dtype=float)
        if self.eps <= 0:
            raise ValueError("CausalProgram: eps must be positive")
        if self.B_mc < 1:
            raise ValueError("CausalProgram: B_mc must be >= 1")
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}; expected one of {NORMS}")
        if self.variant not in (IV, LM):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.targets.psi.shape[1] != self.eta.K or self.basis.K != self.eta.K:
            raise dc.ShapeError(f"CausalProgram: basis K={self.basis.K}, eta K={self.eta.K}")
        if self.targets.noise.shape[1] != self.eta.noise_dim:
            raise dc.ShapeError(
                f"CausalProgram: noise inputs have width {self.targets.noise.shape[1]}, eta expects {self.eta.noise_dim}"
            )
        if self.variant == LM and (self.h_model is None or self.dataset is None):
            raise ValueError("CausalProgram: the mediator variant needs h_model and dataset")

    @property
    def tolerance(self) -> float:
        """Largest violation a converged run may have."""
        return 1e-2 * self.eps

    def parameters(self) -> list[Tensor]:
        return self.eta.parameters()

    def objective(self, rng, B_mc: int | None = None) -> Tensor:
        B_mc = B_mc or self.B_mc
        if self.variant == IV:
            return objective_iv(self.eta, self.x_star, self.basis, B_mc, rng)
        return objective_lm(self.eta, self.x_star, self.basis, self.h_model, B_mc, self.dataset, rng)

    def constraints(self, rng=None) -> Tensor:
        return constraint_scalars(constraint_matrix(self.eta, self.targets), self.norm, self.eps)
