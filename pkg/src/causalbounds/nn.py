"""Multilayer perceptrons, Adam, and minibatch regression training."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

FORMAT_HEADER = "causalbounds-model"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_sizes: tuple[int, ...]
    output_dim: int
    output_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("MlpConfig: input_dim and output_dim must be positive")
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise ValueError("MlpConfig: hidden_sizes must be a nonempty list of positive ints")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden_sizes, self.output_dim]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 512
    learning_rate: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("TrainConfig: epochs, batch_size and learning_rate must be positive")


class Mlp:
    """ReLU network with an identity output layer.

    Weights are stored as ``(out, in)`` matrices.  Optional fixed affine maps
    standardize the inputs and rescale the outputs; they are part of the
    model and are not trained.
    """

    def __init__(
        self,
        config: MlpConfig,
        weights: Sequence[np.ndarray],
        biases: Sequence[np.ndarray | None],
        in_shift=None,
        in_scale=None,
        out_shift=None,
        out_scale=None,
    ):
        self.config = config
        self.weights = [Tensor(w, requires_grad=True) for w in weights]
        self.biases = [None if b is None else Tensor(b, requires_grad=True) for b in biases]
        sizes = config.layer_sizes
        for i, w in enumerate(self.weights):
            if w.shape != (sizes[i + 1], sizes[i]):
                raise dc.ShapeError(f"Mlp: layer {i} weight shape {w.shape} != {(sizes[i + 1], sizes[i])}")
        self.in_shift = np.zeros(config.input_dim) if in_shift is None else np.asarray(in_shift, float)
        self.in_scale = np.ones(config.input_dim) if in_scale is None else np.asarray(in_scale, float)
        self.out_shift = np.zeros(config.output_dim) if out_shift is None else np.asarray(out_shift, float)
        self.out_scale = np.ones(config.output_dim) if out_scale is None else np.asarray(out_scale, float)

    def parameters(self) -> list[Tensor]:
        params = []
        for w, b in zip(self.weights, self.biases):
            params.append(w)
            if b is not None:
                params.append(b)
        return params

    def copy(self) -> "Mlp":
        return Mlp(
            self.config,
            [w.value.copy() for w in self.weights],
            [None if b is None else b.value.copy() for b in self.biases],
            self.in_shift,
            self.in_scale,
            self.out_shift,
            self.out_scale,
        )

    def _check(self, x) -> None:
        shape = x.shape
        if len(shape) != 2 or shape[1] != self.config.input_dim:
            raise dc.ShapeError(
                f"Mlp.forward: expected input of shape (n, {self.config.input_dim}), got {shape}"
            )

    def forward(self, x, hidden_only: bool = False) -> Tensor:
        """Differentiable forward pass; records on the active tape."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        self._check(x)
        h = x
        if np.any(self.in_shift != 0.0) or np.any(self.in_scale != 1.0):
            h = (x - self.in_shift) / self.in_scale
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if i == last and hidden_only:
                return h
            h = dc.linear(h, w, b)
            if i < last:
                h = dc.relu(h)
        if np.any(self.out_scale != 1.0) or np.any(self.out_shift != 0.0):
            h = h * self.out_scale + self.out_shift
        return h

    __call__ = forward

    def predict(self, x) -> np.ndarray:
        """Plain numpy evaluation, no tape."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        x = np.atleast_2d(x)
        self._check(x)
        h = (x - self.in_shift) / self.in_scale
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.value.T
            if b is not None:
                h = h + b.value
            if i < last:
                h = np.maximum(h, 0.0)
        h = h * self.out_scale + self.out_shift
        return h[0] if squeeze else h

    def hidden(self, x) -> np.ndarray:
        """Post-ReLU activations of the last hidden layer."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        x = np.atleast_2d(x)
        self._check(x)
        h = (x - self.in_shift) / self.in_scale
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = h @ w.value.T
            if b is not None:
                h = h + b.value
            h = np.maximum(h, 0.0)
        return h[0] if squeeze else h


def init_mlp(config: MlpConfig, seed: int) -> Mlp:
    """Uniform fan-in initialization, zero biases."""
    rng = np.random.default_rng(seed)
    sizes = config.layer_sizes
    weights, biases = [], []
    for i in range(len(sizes) - 1):
        bound = math.sqrt(1.0 / sizes[i])
        weights.append(rng.uniform(-bound, bound, size=(sizes[i + 1], sizes[i])))
        last = i == len(sizes) - 2
        biases.append(None if (last and not config.output_bias) else np.zeros(sizes[i + 1]))
    return Mlp(config, weights, biases)


def hidden_activations(mlp: Mlp, x) -> np.ndarray:
    return mlp.hidden(x)


class Adam:
    """Adam with bias correction; updates parameter values in place."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p._grad = None

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        step = self.lr / c1
        for p, m, v in zip(self.params, self.m, self.v):
            g = p._grad
            if g is None:
                continue
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.value -= step * m / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    model: Mlp
    final_mse: float
    epoch_losses: list[float] = field(default_factory=list)


def _check_data(inputs: np.ndarray, targets: np.ndarray) -> None:
    if inputs.shape[0] == 0:
        raise ValueError("empty dataset")
    if inputs.shape[0] != targets.shape[0]:
        raise ValueError(f"row count mismatch: {inputs.shape[0]} inputs vs {targets.shape[0]} targets")
    if not (np.all(np.isfinite(inputs)) and np.all(np.isfinite(targets))):
        raise ValueError("non-finite values in training data")


def train_regression(
    inputs,
    targets,
    config: TrainConfig,
    mlp_config: MlpConfig | None = None,
    seed: int | None = None,
    center_targets: bool = True,
) -> TrainResult:
    """Fit an MLP by minibatch Adam on mean squared error.

    Inputs are standardized and targets rescaled by statistics stored in the
    returned model.  With ``center_targets=False`` the targets are only
    scaled, so a bias-free output layer stays a pure linear readout of the
    last hidden layer.
    """
    x = np.asarray(inputs, dtype=float)
    y = np.asarray(targets, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    _check_data(x, y)
    if mlp_config is None:
        mlp_config = MlpConfig(x.shape[1], (64, 32, 16), y.shape[1])
    if mlp_config.input_dim != x.shape[1] or mlp_config.output_dim != y.shape[1]:
        raise dc.ShapeError(
            f"train_regression: data shapes {x.shape}, {y.shape} do not match config "
            f"({mlp_config.input_dim} -> {mlp_config.output_dim})"
        )
    seed = config.seed if seed is None else seed
    net = init_mlp(mlp_config, seed)
    net.in_shift = x.mean(axis=0)
    net.in_scale = np.where(x.std(axis=0) > 0, x.std(axis=0), 1.0)
    y_shift = y.mean(axis=0) if center_targets else np.zeros(y.shape[1])
    y_scale = np.sqrt(np.mean((y - y_shift) ** 2, axis=0))
    y_scale = np.where(y_scale > 0, y_scale, 1.0)
    yt = (y - y_shift) / y_scale
    xs = (x - net.in_shift) / net.in_scale
    # train on standardized data with identity maps, install the maps afterwards
    net.in_shift = np.zeros(x.shape[1])
    net.in_scale = np.ones(x.shape[1])

    opt = Adam(net.parameters(), lr=config.learning_rate)
    n = x.shape[0]
    losses = []
    for epoch in range(config.epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            opt.zero_grad()
            with dc.Tape() as tape:
                err = net.forward(xs[idx]) - yt[idx]
                loss = dc.mean(dc.square(err))
                tape.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / n)

    flat = np.ptp(y, axis=0) == 0
    if np.any(flat) and center_targets:
        # nothing to learn for a constant column: predict its value exactly
        net.weights[-1].value[flat] = 0.0
        if net.biases[-1] is not None:
            net.biases[-1].value[flat] = 0.0
    net.in_shift = x.mean(axis=0)
    net.in_scale = np.where(x.std(axis=0) > 0, x.std(axis=0), 1.0)
    net.out_shift = y_shift
    net.out_scale = y_scale
    final = float(np.mean((net.predict(x) - y) ** 2))
    return TrainResult(net, final, [float(l * np.mean(y_scale**2)) for l in losses])


# -- serialization -----------------------------------------------------------
#
# Text format, one record per line:
#   causalbounds-model <version> <kind>
#   <key> <int|float-hex tokens ...>
# Floats are written with float.hex so a round trip is bit exact.


def _fmt(values) -> str:
    return " ".join(float(v).hex() for v in np.asarray(values, dtype=float).reshape(-1))


def _parse(tokens: list[str]) -> np.ndarray:
    return np.array([float.fromhex(t) for t in tokens], dtype=float)


def mlp_records(net: Mlp, prefix: str = "") -> list[str]:
    c = net.config
    lines = [
        f"{prefix}sizes {' '.join(str(s) for s in c.layer_sizes)}",
        f"{prefix}output_bias {int(c.output_bias)}",
        f"{prefix}in_shift {_fmt(net.in_shift)}",
        f"{prefix}in_scale {_fmt(net.in_scale)}",
        f"{prefix}out_shift {_fmt(net.out_shift)}",
        f"{prefix}out_scale {_fmt(net.out_scale)}",
    ]
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        lines.append(f"{prefix}W{i} {_fmt(w.value)}")
        if b is not None:
            lines.append(f"{prefix}b{i} {_fmt(b.value)}")
    return lines


def mlp_from_records(rec: dict[str, list[str]], prefix: str = "") -> Mlp:
    sizes = [int(t) for t in rec[f"{prefix}sizes"]]
    config = MlpConfig(sizes[0], tuple(sizes[1:-1]), sizes[-1], bool(int(rec[f"{prefix}output_bias"][0])))
    weights, biases = [], []
    for i in range(len(sizes) - 1):
        weights.append(_parse(rec[f"{prefix}W{i}"]).reshape(sizes[i + 1], sizes[i]))
        key = f"{prefix}b{i}"
        biases.append(_parse(rec[key]) if key in rec else None)
    return Mlp(
        config,
        weights,
        biases,
        _parse(rec[f"{prefix}in_shift"]),
        _parse(rec[f"{prefix}in_scale"]),
        _parse(rec[f"{prefix}out_shift"]),
        _parse(rec[f"{prefix}out_scale"]),
    )


def write_records(path, kind: str, lines: list[str]) -> None:
    text = f"{FORMAT_HEADER} {FORMAT_VERSION} {kind}\n" + "\n".join(lines) + "\n"
    Path(path).write_text(text)


def read_records(path, kind: str) -> dict[str, list[str]]:
    raw = Path(path).read_text().splitlines()
    head = raw[0].split()
    if len(head) != 3 or head[0] != FORMAT_HEADER:
        raise ValueError(f"{path}: not a {FORMAT_HEADER} file")
    if int(head[1]) != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {head[1]}")
    if head[2] != kind:
        raise ValueError(f"{path}: expected a '{kind}' model, found '{head[2]}'")
    rec = {}
    for line in raw[1:]:
        if line.strip():
            key, *tokens = line.split()
            rec[key] = tokens
    return rec


def save_mlp(net: Mlp, path) -> None:
    write_records(path, "mlp", mlp_records(net))


def load_mlp(path) -> Mlp:
    return mlp_from_records(read_records(path, "mlp"))
