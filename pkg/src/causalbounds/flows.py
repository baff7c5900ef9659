"""Conditional invertible models ``x = h_z(n)`` with exact inverses.

Two families are provided:

* :class:`AffineGaussianFlow`: ``x = A(z) n + b(z)`` with
  ``A = L^T L + jitter * I`` for an upper-triangular ``L``.
* :class:`SplineFlow`: an autoregressive stack where dimension ``d`` is
  transformed by a conditional shift/scale followed by a monotone
  rational-quadratic spline whose knots depend on ``(z, x_<d)``.  Linear
  (identity) tails outside ``[-bound, bound]`` make every 1-D map a bijection
  of the real line, and each one has a closed-form inverse.

Both are trained in the normalizing direction ``x -> n`` by maximum
likelihood under ``n ~ N(0, I)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from . import diffcore as dc
from .diffcore import Tensor
from .nn import (
    Adam,
    Mlp,
    MlpConfig,
    TrainConfig,
    _fmt,
    _parse,
    init_mlp,
    mlp_from_records,
    mlp_records,
    read_records,
    write_records,
)

LOG_2PI = math.log(2.0 * math.pi)
MIN_BIN_WIDTH = 1e-3
MIN_BIN_HEIGHT = 1e-3
MIN_DERIVATIVE = 1e-3
_DERIV_OFFSET = math.log(math.expm1(1.0 - MIN_DERIVATIVE))


class DegenerateDataError(ValueError):
    pass


def _as_batch(a, dim: int, what: str) -> tuple[np.ndarray, bool]:
    a = np.asarray(a, dtype=float)
    single = a.ndim == 1
    a = np.atleast_2d(a)
    if a.shape[1] != dim:
        raise dc.ShapeError(f"{what}: expected trailing dimension {dim}, got shape {a.shape}")
    return a, single


class ConditionalFlow:
    """Shared batching, checks and likelihood for conditional flows."""

    kind = "base"
    p: int
    q: int
    x_shift: np.ndarray
    x_scale: np.ndarray
    z_shift: np.ndarray
    z_scale: np.ndarray
    train_log_likelihood: float | None = None

    def _broadcast(self, z, v, what):
        z, zs = _as_batch(z, self.q, f"{what} condition")
        v, vs = _as_batch(v, self.p, what)
        if z.shape[0] == 1 and v.shape[0] > 1:
            z = np.repeat(z, v.shape[0], axis=0)
        elif v.shape[0] == 1 and z.shape[0] > 1:
            v = np.repeat(v, z.shape[0], axis=0)
        if z.shape[0] != v.shape[0]:
            raise dc.ShapeError(f"{what}: {z.shape[0]} conditions vs {v.shape[0]} rows")
        return z, v, zs and vs

    def sample(self, z, n) -> np.ndarray:
        """Map base noise ``n`` to the variable given condition ``z``."""
        z, n, single = self._broadcast(z, n, "sample")
        x = self._sample_std((z - self.z_shift) / self.z_scale, n) * self.x_scale + self.x_shift
        return x[0] if single else x

    def invert(self, z, x) -> np.ndarray:
        """Recover the base noise that ``sample`` maps to ``x``."""
        z, x, single = self._broadcast(z, x, "invert")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
            raise ValueError("invert: non-finite input")
        n, _ = self._normalize((z - self.z_shift) / self.z_scale, Tensor((x - self.x_shift) / self.x_scale))
        n = n.value
        return n[0] if single else n

    def log_prob(self, z, x) -> np.ndarray:
        """Conditional log density of ``x`` given ``z`` (per row)."""
        z, x, single = self._broadcast(z, x, "log_prob")
        n, ld = self._normalize((z - self.z_shift) / self.z_scale, Tensor((x - self.x_shift) / self.x_scale))
        lp = -0.5 * np.sum(n.value**2, axis=1) - 0.5 * self.p * LOG_2PI + ld.value - np.sum(np.log(self.x_scale))
        return lp[0] if single else lp

    def parameters(self) -> list[Tensor]:
        raise NotImplementedError

    def _normalize(self, zs: np.ndarray, xs: Tensor) -> tuple[Tensor, Tensor]:
        """Differentiable standardized map x -> n with per-row log|det|."""
        raise NotImplementedError

    def _sample_std(self, zs: np.ndarray, n: np.ndarray) -> np.ndarray:
        raise NotImplementedError


# -- affine Gaussian ---------------------------------------------------------


def _triu_placement(p: int) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Constant matrix scattering the p(p+1)/2 triangle entries into a flat p*p matrix."""
    pairs = [(r, c) for r in range(p) for c in range(r, p)]
    place = np.zeros((len(pairs), p * p))
    for t, (r, c) in enumerate(pairs):
        place[t, r * p + c] = 1.0
    return place, pairs


class AffineGaussianFlow(ConditionalFlow):
    kind = "affine"

    def __init__(self, p: int, q: int, net: Mlp | None = None, jitter: float = 1e-4, A=None, b=None):
        self.p, self.q = p, q
        self.net = net
        self.jitter = jitter
        self.A_const = None if A is None else np.asarray(A, dtype=float).reshape(p, p)
        self.b_const = None if b is None else np.asarray(b, dtype=float).reshape(p)
        self.x_shift = np.zeros(p)
        self.x_scale = np.ones(p)
        self.z_shift = np.zeros(q)
        self.z_scale = np.ones(q)
        self._place, self._pairs = _triu_placement(p)

    @classmethod
    def constant(cls, A, b, q: int = 1) -> "AffineGaussianFlow":
        """Condition-independent map ``x = A n + b`` (any invertible ``A``)."""
        b = np.atleast_1d(np.asarray(b, dtype=float))
        return cls(b.shape[0], q, A=A, b=b)

    @classmethod
    def initial(cls, p: int, q: int, seed: int, hidden=(64, 32, 16), jitter: float = 1e-4) -> "AffineGaussianFlow":
        t = p * (p + 1) // 2
        net = init_mlp(MlpConfig(q, hidden, p + t), seed)
        last_w, last_b = net.weights[-1], net.biases[-1]
        last_w.value *= 0.1
        flow = cls(p, q, net, jitter)
        for k, (r, c) in enumerate(flow._pairs):
            if r == c:
                last_b.value[p + k] = 1.0
        return flow

    def parameters(self):
        return [] if self.net is None else self.net.parameters()

    def _matrices(self, zs: np.ndarray):
        n = zs.shape[0]
        if self.net is None:
            A = Tensor(np.broadcast_to(self.A_const, (n, self.p, self.p)).copy())
            b = Tensor(np.broadcast_to(self.b_const, (n, self.p)).copy())
            return A, b
        out = self.net.forward(zs)
        b = out[:, : self.p]
        L = dc.reshape(dc.matmul(out[:, self.p :], self._place), (n, self.p, self.p))
        A = dc.matmul(dc.transpose(L, (0, 2, 1)), L) + self.jitter * np.eye(self.p)
        return A, b

    def params_at(self, z) -> tuple[np.ndarray, np.ndarray]:
        """Effective ``(A, b)`` of ``x = A n + b`` in original units at one condition."""
        zb, _ = _as_batch(z, self.q, "params_at")
        A, b = self._matrices((zb - self.z_shift) / self.z_scale)
        A = self.x_scale[:, None] * A.value[0]
        b = self.x_scale * b.value[0] + self.x_shift
        return A, b

    def _normalize(self, zs, xs):
        A, b = self._matrices(zs)
        n = dc.solve(A, xs - b)
        return n, dc.neg(dc.logdet(A))

    def _sample_std(self, zs, n):
        A, b = self._matrices(zs)
        return np.einsum("nij,nj->ni", A.value, n) + b.value

    def records(self) -> list[str]:
        lines = [
            f"p {self.p}",
            f"q {self.q}",
            f"jitter {_fmt([self.jitter])}",
            f"x_shift {_fmt(self.x_shift)}",
            f"x_scale {_fmt(self.x_scale)}",
            f"z_shift {_fmt(self.z_shift)}",
            f"z_scale {_fmt(self.z_scale)}",
        ]
        if self.net is None:
            lines += [f"A {_fmt(self.A_const)}", f"b {_fmt(self.b_const)}"]
        else:
            lines += mlp_records(self.net, "net.")
        return lines

    @classmethod
    def from_records(cls, rec) -> "AffineGaussianFlow":
        p, q = int(rec["p"][0]), int(rec["q"][0])
        jitter = float(_parse(rec["jitter"])[0])
        if "A" in rec:
            flow = cls(p, q, None, jitter, A=_parse(rec["A"]), b=_parse(rec["b"]))
        else:
            flow = cls(p, q, mlp_from_records(rec, "net."), jitter)
        _load_scalers(flow, rec)
        return flow


# -- rational-quadratic spline ----------------------------------------------


@dataclass
class _Knots:
    cw: np.ndarray  # (n, B+1) x-knots
    ch: np.ndarray  # (n, B+1) y-knots
    d: np.ndarray  # (n, B+1) derivatives at knots


def _knots_tensor(raw: Tensor, bins: int, bound: float):
    """Differentiable knot positions and derivatives from raw conditioner output."""
    n = raw.shape[0]
    rw = raw[:, :bins]
    rh = raw[:, bins : 2 * bins]
    rd = raw[:, 2 * bins :]

    def knots(r, min_size):
        e = dc.exp(r - np.max(r.value, axis=1, keepdims=True))
        w = e / dc.sum(e, axis=1, keepdims=True)
        w = w * (1.0 - min_size * bins) + min_size
        cum = dc.cumsum(w, axis=1)
        return dc.concat([np.zeros((n, 1)), cum], axis=1) * (2.0 * bound) - bound

    cw = knots(rw, MIN_BIN_WIDTH)
    ch = knots(rh, MIN_BIN_HEIGHT)
    inner = dc.softplus(rd + _DERIV_OFFSET) + MIN_DERIVATIVE
    ones = np.ones((n, 1))
    d = dc.concat([ones, inner, ones], axis=1)
    return cw, ch, d


def rqs_forward(u: Tensor, cw: Tensor, ch: Tensor, d: Tensor, bound: float) -> tuple[Tensor, Tensor]:
    """Monotone rational-quadratic spline with identity tails; returns (value, log slope)."""
    uv = u.value
    inside = (uv >= -bound) & (uv <= bound)
    bins = cw.shape[1] - 1
    idx = np.sum(np.where(inside, uv, 0.0)[:, None] >= cw.value[:, 1:bins], axis=1)[:, None]
    uc = dc.reshape(dc.where(inside, u, 0.0), (-1, 1))
    x0 = dc.take_along(cw, idx, 1)
    x1 = dc.take_along(cw, idx + 1, 1)
    y0 = dc.take_along(ch, idx, 1)
    y1 = dc.take_along(ch, idx + 1, 1)
    d0 = dc.take_along(d, idx, 1)
    d1 = dc.take_along(d, idx + 1, 1)
    w = x1 - x0
    h = y1 - y0
    s = h / w
    t = (uc - x0) / w
    tt = t * (1.0 - t)
    den = s + (d1 + d0 - 2.0 * s) * tt
    val = y0 + h * (s * dc.square(t) + d0 * tt) / den
    slope_num = dc.square(s) * (d1 * dc.square(t) + 2.0 * s * tt + d0 * dc.square(1.0 - t))
    logslope = dc.log(slope_num) - 2.0 * dc.log(den)
    out = dc.where(inside, dc.reshape(val, (-1,)), u)
    ld = dc.where(inside, dc.reshape(logslope, (-1,)), 0.0)
    return out, ld


def rqs_inverse(y: np.ndarray, k: _Knots, bound: float) -> np.ndarray:
    inside = (y >= -bound) & (y <= bound)
    bins = k.cw.shape[1] - 1
    idx = np.sum(np.where(inside, y, 0.0)[:, None] >= k.ch[:, 1:bins], axis=1)[:, None]

    def g(a, off=0):
        return np.take_along_axis(a, idx + off, axis=1)[:, 0]

    x0, x1, y0, y1, d0, d1 = g(k.cw), g(k.cw, 1), g(k.ch), g(k.ch, 1), g(k.d), g(k.d, 1)
    w, h = x1 - x0, y1 - y0
    s = h / w
    dy = np.where(inside, y, 0.0) - y0
    mix = d1 + d0 - 2.0 * s
    a = h * (s - d0) + dy * mix
    b = h * d0 - dy * mix
    c = -s * dy
    disc = np.maximum(b * b - 4.0 * a * c, 0.0)
    t = (2.0 * c) / (-b - np.sqrt(disc))
    return np.where(inside, t * w + x0, y)


class SplineFlow(ConditionalFlow):
    kind = "spline"

    def __init__(self, p: int, q: int, conditioners: list[Mlp], bins: int = 8, bound: float = 5.0):
        self.p, self.q = p, q
        self.conditioners = conditioners
        self.bins = bins
        self.bound = bound
        self.x_shift = np.zeros(p)
        self.x_scale = np.ones(p)
        self.z_shift = np.zeros(q)
        self.z_scale = np.ones(q)

    @property
    def n_params(self) -> int:
        return 2 + 3 * self.bins - 1

    @classmethod
    def initial(cls, p: int, q: int, seed: int, bins: int = 8, bound: float = 5.0, hidden=(32, 32)) -> "SplineFlow":
        """Conditioners with a zero output layer, so the map starts as the identity."""
        nets = []
        for dim in range(p):
            net = init_mlp(MlpConfig(q + dim, hidden, 2 + 3 * bins - 1), seed * 1000 + dim)
            net.weights[-1].value[:] = 0.0
            net.biases[-1].value[:] = 0.0
            nets.append(net)
        return cls(p, q, nets, bins, bound)

    def parameters(self):
        return [t for net in self.conditioners for t in net.parameters()]

    def _split(self, raw: Tensor):
        shift = raw[:, 0]
        logscale = raw[:, 1]
        cw, ch, d = _knots_tensor(raw[:, 2:], self.bins, self.bound)
        return shift, logscale, cw, ch, d

    def _normalize(self, zs, xs):
        ns, lds = [], []
        for dim, net in enumerate(self.conditioners):
            cond = np.hstack([zs, xs.value[:, :dim]]) if dim else zs
            raw = net.forward(cond)
            shift, logscale, cw, ch, d = self._split(raw)
            u = (xs[:, dim] - shift) * dc.exp(dc.neg(logscale))
            n_d, ld = rqs_forward(u, cw, ch, d, self.bound)
            ns.append(dc.reshape(n_d, (-1, 1)))
            lds.append(ld - logscale)
        total = lds[0]
        for ld in lds[1:]:
            total = total + ld
        return dc.concat(ns, axis=1), total

    def _sample_std(self, zs, n):
        x = np.empty_like(n)
        for dim, net in enumerate(self.conditioners):
            cond = np.hstack([zs, x[:, :dim]]) if dim else zs
            raw = Tensor(net.predict(cond))
            shift, logscale, cw, ch, d = self._split(raw)
            u = rqs_inverse(n[:, dim], _Knots(cw.value, ch.value, d.value), self.bound)
            x[:, dim] = u * np.exp(logscale.value) + shift.value
        return x

    def knots_at(self, z, x_prefix=(), dim: int = 0) -> _Knots:
        """Spline knots of dimension ``dim`` for one (standardized-units) condition."""
        zb, _ = _as_batch(z, self.q, "knots_at")
        zs = (zb - self.z_shift) / self.z_scale
        prefix = (np.asarray(x_prefix, dtype=float).reshape(1, -1) - self.x_shift[:dim]) / self.x_scale[:dim]
        cond = np.hstack([zs, prefix]) if dim else zs
        _, _, cw, ch, d = self._split(Tensor(self.conditioners[dim].predict(cond)))
        return _Knots(cw.value, ch.value, d.value)

    def records(self) -> list[str]:
        lines = [
            f"p {self.p}",
            f"q {self.q}",
            f"bins {self.bins}",
            f"bound {_fmt([self.bound])}",
            f"x_shift {_fmt(self.x_shift)}",
            f"x_scale {_fmt(self.x_scale)}",
            f"z_shift {_fmt(self.z_shift)}",
            f"z_scale {_fmt(self.z_scale)}",
        ]
        for dim, net in enumerate(self.conditioners):
            lines += mlp_records(net, f"cond{dim}.")
        return lines

    @classmethod
    def from_records(cls, rec) -> "SplineFlow":
        p, q = int(rec["p"][0]), int(rec["q"][0])
        nets = [mlp_from_records(rec, f"cond{dim}.") for dim in range(p)]
        flow = cls(p, q, nets, int(rec["bins"][0]), float(_parse(rec["bound"])[0]))
        _load_scalers(flow, rec)
        return flow


def _load_scalers(flow: ConditionalFlow, rec) -> None:
    for key in ("x_shift", "x_scale", "z_shift", "z_scale"):
        setattr(flow, key, _parse(rec[key]))


# -- fitting -----------------------------------------------------------------


def fit_flow(
    variant: str,
    condition,
    variable,
    config: TrainConfig | None = None,
    seed: int | None = None,
    bins: int = 8,
    bound: float = 5.0,
    hidden=None,
    jitter: float = 1e-4,
) -> ConditionalFlow:
    """Maximum-likelihood fit of ``variable | condition`` under a standard normal base."""
    config = config or TrainConfig()
    seed = config.seed if seed is None else seed
    z = np.asarray(condition, dtype=float)
    x = np.asarray(variable, dtype=float)
    z = z[:, None] if z.ndim == 1 else z
    x = x[:, None] if x.ndim == 1 else x
    if x.shape[0] == 0 or z.shape[0] != x.shape[0]:
        raise ValueError("fit_flow: need a nonempty set of (condition, variable) pairs")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
        raise ValueError("fit_flow: non-finite values in training pairs")
    x_std = x.std(axis=0)
    if np.any(x_std == 0):
        raise DegenerateDataError(
            "fit_flow: a variable column is constant; add small jitter noise before fitting a density"
        )
    p, q = x.shape[1], z.shape[1]
    if variant == "spline":
        flow = SplineFlow.initial(p, q, seed, bins, bound, hidden or (32, 32))
    elif variant == "affine":
        flow = AffineGaussianFlow.initial(p, q, seed, hidden or (64, 32, 16), jitter)
    else:
        raise ValueError(f"unknown flow variant {variant!r}; expected 'spline' or 'affine'")
    z_std = z.std(axis=0)
    flow.x_shift, flow.x_scale = x.mean(axis=0), x_std
    flow.z_shift, flow.z_scale = z.mean(axis=0), np.where(z_std > 0, z_std, 1.0)
    xs = (x - flow.x_shift) / flow.x_scale
    zs = (z - flow.z_shift) / flow.z_scale

    opt = Adam(flow.parameters(), lr=config.learning_rate)
    rows = x.shape[0]
    for epoch in range(config.epochs):
        order = np.random.default_rng([seed, epoch]).permutation(rows)
        for start in range(0, rows, config.batch_size):
            idx = order[start : start + config.batch_size]
            opt.zero_grad()
            with dc.Tape() as tape:
                n, ld = flow._normalize(zs[idx], Tensor(xs[idx]))
                nll = dc.mean(0.5 * dc.sum(dc.square(n), axis=1) - ld)
                tape.backward(nll)
            opt.step()
    flow.train_log_likelihood = float(np.mean(flow.log_prob(z, x)))
    return flow


class CdfNoiseFlow(ConditionalFlow):
    """Uniform-noise view of a scalar flow: ``x = h_z(Phi^{-1}(u))`` with ``u ~ U(0, 1)``."""

    kind = "cdf"

    def __init__(self, base: ConditionalFlow):
        if base.p != 1:
            raise ValueError(f"the inverse-CDF parameterization needs a scalar variable, got p={base.p}")
        self.base = base
        self.p, self.q = 1, base.q

    def sample(self, z, u):
        return self.base.sample(z, norm.ppf(np.asarray(u, dtype=float)))

    def invert(self, z, x):
        return norm.cdf(self.base.invert(z, x))

    def log_prob(self, z, x):
        return self.base.log_prob(z, x)


def one_dim_cdf_variant(model: ConditionalFlow) -> CdfNoiseFlow:
    return CdfNoiseFlow(model)


def save_flow(flow: ConditionalFlow, path) -> None:
    if isinstance(flow, CdfNoiseFlow):
        raise TypeError("save the underlying base flow instead")
    write_records(path, f"flow-{flow.kind}", flow.records())


def load_flow(path) -> ConditionalFlow:
    from pathlib import Path

    head = Path(path).read_text().split("\n", 1)[0].split()
    kind = head[2] if len(head) == 3 else ""
    if kind == "flow-spline":
        return SplineFlow.from_records(read_records(path, kind))
    if kind == "flow-affine":
        return AffineGaussianFlow.from_records(read_records(path, kind))
    raise ValueError(f"{path}: not a saved flow")
