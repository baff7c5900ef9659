"""Response-function bases: ``f_theta(x) = theta @ psi(x)``."""

from __future__ import annotations

from itertools import combinations_with_replacement

import numpy as np

from .diffcore import ShapeError
from .nn import Mlp, MlpConfig, TrainConfig, mlp_from_records, mlp_records, read_records, train_regression, write_records, _fmt, _parse


class ResponseBasis:
    """Fixed feature map ``psi: R^p -> R^K``.

    ``theta_init`` is an initial coefficient guess used to start the
    coefficient model; it does not constrain anything.
    """

    def __init__(self, kind: str, p: int, K: int, net: Mlp | None = None, constant: bool = False):
        self.kind = kind
        self.p = p
        self.K = K
        self.net = net
        self.constant = constant
        self.theta_init: np.ndarray | None = None
        self.train_mse: float | None = None
        if kind == "polynomial":
            self._quad = list(combinations_with_replacement(range(p), 2))

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.p:
            raise ShapeError(f"basis.evaluate: expected dimension {self.p}, got shape {x.shape}")
        if self.kind == "polynomial":
            cols = [np.ones((x.shape[0], 1)), x]
            if self._quad:
                i, j = np.array(self._quad).T
                cols.append(x[:, i] * x[:, j])
            psi = np.hstack(cols)
        else:
            psi = self.net.hidden(x)
            if self.constant:
                psi = np.hstack([psi, np.ones((x.shape[0], 1))])
        return psi[0] if single else psi

    __call__ = evaluate

    def fit_theta(self, x, y) -> np.ndarray:
        """Least-squares coefficients of ``y`` on ``psi(x)``."""
        psi = self.evaluate(x)
        theta, *_ = np.linalg.lstsq(psi, np.asarray(y, dtype=float), rcond=None)
        return theta


def polynomial_basis(p: int) -> ResponseBasis:
    """Monomials up to total degree two: 1, x_i, then x_i x_j for i <= j."""
    if p < 1:
        raise ValueError("polynomial_basis: p must be >= 1")
    return ResponseBasis("polynomial", p, p * (p + 3) // 2 + 1)


def neural_basis(
    x,
    y,
    K: int,
    config: TrainConfig | None = None,
    seed: int = 0,
    hidden: tuple[int, int] = (64, 64),
    constant: bool = False,
) -> ResponseBasis:
    """Last-hidden-layer features of an ``x -> y`` MLP with a ``K``-wide final hidden layer.

    The readout layer has no bias and the targets are only rescaled, so the
    fitted network is exactly ``theta_init @ psi(x)``.
    """
    if K < 1:
        raise ValueError("neural_basis: K must be >= 1")
    x = np.asarray(x, dtype=float)
    x = x[:, None] if x.ndim == 1 else x
    config = config or TrainConfig(epochs=100, batch_size=512, learning_rate=0.01)
    mlp_config = MlpConfig(x.shape[1], (*hidden, K), 1, output_bias=False)
    fit = train_regression(x, y, config, mlp_config, seed=seed, center_targets=False)
    net = fit.model
    basis = ResponseBasis("neural", x.shape[1], K + int(constant), net, constant)
    readout = net.weights[-1].value[0] * net.out_scale[0]
    basis.theta_init = np.append(readout, 0.0) if constant else readout
    basis.train_mse = fit.final_mse
    return basis


def save_basis(basis: ResponseBasis, path) -> None:
    lines = [f"kind {basis.kind}", f"p {basis.p}", f"K {basis.K}", f"constant {int(basis.constant)}"]
    if basis.theta_init is not None:
        lines.append(f"theta_init {_fmt(basis.theta_init)}")
    if basis.net is not None:
        lines += mlp_records(basis.net, "net.")
    write_records(path, "basis", lines)


def load_basis(path) -> ResponseBasis:
    rec = read_records(path, "basis")
    kind, p = rec["kind"][0], int(rec["p"][0])
    if kind == "polynomial":
        basis = polynomial_basis(p)
    else:
        basis = ResponseBasis(kind, p, int(rec["K"][0]), mlp_from_records(rec, "net."), bool(int(rec["constant"][0])))
    if "theta_init" in rec:
        basis.theta_init = _parse(rec["theta_init"])
    return basis
