"""The eleven acceptance criteria, each reported as one PASS/FAIL line.

Criteria 5-10 share pipeline runs through the session fixtures in conftest.py;
the whole file takes tens of minutes on one core.
"""

import filecmp

import numpy as np
import pytest

from causalbounds import diffcore as dc
from causalbounds import program as pg
from causalbounds import scm
from causalbounds.auglag import MAXIMIZE, AugLagConfig, FunctionProgram, solve
from causalbounds.basis import polynomial_basis
from causalbounds.flows import AffineGaussianFlow, fit_flow
from causalbounds.nn import MlpConfig, init_mlp
from causalbounds.pipeline import RunConfig, run_bounds, write_outputs

from conftest import record


def slack(t):
    return 0.05 * (1 + abs(t))


def containment(curve):
    rows = []
    for x, lo, hi, t in zip(curve.varied, curve.lower, curve.upper, curve.true_effect):
        ok = lo is not None and hi is not None and lo - slack(t) <= t <= hi + slack(t)
        rows.append((float(x), lo, hi, float(t), ok))
    return rows


def describe(rows):
    def f(v):
        return "missing" if v is None else f"{v:.2f}"

    return "; ".join(f"x*={x:+.2f} [{f(lo)}, {f(hi)}] true={t:.2f}{'' if ok else ' OUT'}" for x, lo, hi, t, ok in rows)


# 1 ---------------------------------------------------------------------------------

def test_criterion_1_autodiff():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for k in range(20):
        depth = 1 + k % 3
        hidden = tuple(int(h) for h in rng.integers(3, 9, size=depth))
        p, out = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        net = init_mlp(MlpConfig(p, hidden, out), seed=k)
        # zero biases put whole layers exactly on the ReLU kink for some rows
        for b in net.biases:
            b.value = rng.normal(scale=0.5, size=b.shape)
        x = rng.normal(size=(6, p))
        y = rng.normal(size=(6, out))

        def loss(inp):
            return dc.mean(dc.square(net(inp) - y))

        worst = max(worst, dc.gradient_check(loss, x))
        for slot in (net.weights, net.biases):
            for i, original in enumerate(slot):

                def loss_wrt(t, slot=slot, i=i, original=original):
                    slot[i] = t
                    try:
                        return dc.mean(dc.square(net(x) - y))
                    finally:
                        slot[i] = original

                worst = max(worst, dc.gradient_check(loss_wrt, original.value))
    assert record(1, worst < 1e-4, f"max relative error {worst:.2e} over 20 MLPs (threshold 1e-4)")


# 2 ---------------------------------------------------------------------------------

def test_criterion_2_flow_round_trips():
    data = scm.generate("IV-lin-2d-weak", 2000, seed=0)
    rng = np.random.default_rng(7)
    idx = rng.integers(data.n, size=1000)
    z, x = data.z[idx], data.x[idx]
    n = rng.standard_normal((1000, 2))
    errors = {}
    for variant in ("spline", "affine"):
        flow = fit_flow(variant, data.z, data.x, seed=0)
        errors[variant] = max(np.max(np.abs(flow.invert(z, flow.sample(z, n)) - n)),
                              np.max(np.abs(flow.sample(z, flow.invert(z, x)) - x)))
    ok = max(errors.values()) < 1e-6
    record(2, ok, ", ".join(f"{k} max round-trip error {e:.1e}" for k, e in errors.items()) + " (threshold 1e-6)")
    assert ok


# 3 ---------------------------------------------------------------------------------

def test_criterion_3_closed_form_moments():
    data = scm.generate("IV-lin-2d-weak", 400, seed=1)
    reg = pg.Regressors(*(init_mlp(MlpConfig(4, (8,), 1), seed=s) for s in (0, 1)))
    h = AffineGaussianFlow.constant(np.eye(2), np.zeros(2), q=2)
    basis = polynomial_basis(2)
    targets = pg.build_targets(data, h, basis, 20, 0, reg)
    rng = np.random.default_rng(33)
    draws = 100_000
    worst = 0.0
    for k in range(10):
        eta = pg.EtaModel.initial(2, basis.K, seed=k, theta=rng.normal(size=basis.K), sigma_scale=rng.uniform(0.1, 1))
        for net in (eta.mu_net, eta.sigma_net):
            net.weights[-1].value = rng.normal(scale=0.5, size=net.weights[-1].shape)
        A1, A2 = (a.value for a in pg.implied_moments(eta, targets))
        mu = eta.mu_net.predict(targets.noise)
        cov = eta.sigma(targets.noise)
        for j in range(targets.M):
            theta = rng.multivariate_normal(mu[j], cov[j], size=draws)
            f = theta @ targets.psi[j]
            z1 = abs(f.mean() - A1[j]) / (f.std() / np.sqrt(draws))
            z2 = abs((f**2).mean() - A2[j]) / ((f**2).std() / np.sqrt(draws))
            worst = max(worst, z1, z2)
    assert record(3, worst < 4, f"largest deviation {worst:.2f} MC standard errors over 10 eta x 20 points (threshold 4)")


# 4 ---------------------------------------------------------------------------------

def test_criterion_4_solver_oracles():
    cfg = AugLagConfig(learning_rate=0.01)
    x = dc.Tensor(np.zeros(1), requires_grad=True)
    first = solve(FunctionProgram(lambda t: dc.sum(dc.square(t)), lambda t: t - 1.0, x), cfg)
    y = dc.Tensor(np.zeros(1), requires_grad=True)
    box = FunctionProgram(lambda t: -dc.sum(dc.square(t - 3.0)), lambda t: dc.concat([1.0 - t, 1.0 + t]), y)
    second = solve(box, AugLagConfig(learning_rate=0.01, direction=MAXIMIZE))
    e1, e2 = abs(x.value[0] - 1), abs(y.value[0] - 1)
    v = max(first.max_violation, second.max_violation)
    ok = e1 < 1e-3 and e2 < 1e-3 and v <= 1e-3
    assert record(4, ok, f"|x-1| = {e1:.1e} and {e2:.1e}, max violation {v:.1e} (lr 0.01)")


# 5 ---------------------------------------------------------------------------------

def test_criterion_5_bound_validity(strong_run, weak_run):
    strong, weak = containment(strong_run.curve), containment(weak_run.curve)
    ok = all(r[-1] for r in strong + weak)
    record(5, ok, f"IV-lin-2d-strong: {describe(strong)} | IV-lin-2d-weak: {describe(weak)}")
    assert ok


# 6 ---------------------------------------------------------------------------------

def test_criterion_6_leaky_mediator(lm_run):
    c = lm_run.curve
    expected = 2 * c.x_grid[:, 0] + c.x_grid[:, 1] - 6
    np.testing.assert_allclose(c.true_effect, expected)
    mc, se = scm.mc_effect("LM-lin1-2d", c.x_grid[0], draws=400_000)
    assert abs(mc - expected[0]) < 4 * se
    rows = containment(c)
    ok = all(r[-1] for r in rows)
    record(6, ok, describe(rows))
    assert ok


# 7 ---------------------------------------------------------------------------------

def test_criterion_7_basis_ordering(strong_run, strong_neural_run):
    i = int(np.argmin(np.abs(strong_run.curve.varied)))
    assert strong_run.curve.varied[i] == 0.0
    np.testing.assert_allclose(strong_neural_run.curve.x_grid[0], strong_run.curve.x_grid[i])
    plo, phi = strong_run.curve.lower[i], strong_run.curve.upper[i]
    nlo, nhi = strong_neural_run.curve.lower[0], strong_neural_run.curve.upper[0]
    ok = None not in (plo, phi, nlo, nhi) and nlo - 0.1 <= plo and phi <= nhi + 0.1
    record(7, ok, f"polynomial [{plo}, {phi}] vs neural [{nlo}, {nhi}] at x*=(0, mean), tolerance 0.1")
    assert ok


# 8 ---------------------------------------------------------------------------------

def test_criterion_8_norms(weak_run, weak_two_norm_run):
    sup, two = containment(weak_run.curve), containment(weak_two_norm_run.curve)
    ok = all(r[-1] for r in sup + two)
    record(8, ok, f"sup: {describe(sup)} | two: {describe(two)}")
    assert ok


# 9 ---------------------------------------------------------------------------------

def test_criterion_9_tightness_trend(additive_run):
    c = additive_run.curve
    width = {float(x): (None if lo is None or hi is None else hi - lo) for x, lo, hi in zip(c.varied, c.lower, c.upper)}
    w0, wm, wp = width[0.0], width[-3.0], width[3.0]
    ok = None not in (w0, wm, wp) and w0 < wm and w0 < wp
    record(9, ok, f"width at 0: {w0}, at -3: {wm}, at +3: {wp}")
    assert ok


# 10 --------------------------------------------------------------------------------

def test_criterion_10_naive_bias(strong_run):
    c = strong_run.curve
    i = int(np.argmax(c.varied))
    assert c.varied[i] == 2.0
    x_star = c.x_grid[i]
    big = scm.generate("IV-lin-2d-strong", 2_000_000, seed=99)
    near = np.all(np.abs(big.x - x_star) < 0.1, axis=1)
    local = big.y[near]
    oracle, se = local.mean(), local.std() / np.sqrt(local.size)
    truth = c.true_effect[i]
    naive = c.naive[i]
    ok = abs(naive - truth) > 0.5 and abs(oracle - truth) - 4 * se > 0.5
    record(10, ok, f"naive {naive:.2f}, local-average E[Y|X~x*] {oracle:.2f} +- {se:.2f}, true {truth:.2f} at x*=(2, mean)")
    assert ok


# 11 --------------------------------------------------------------------------------

def test_criterion_11_determinism(tmp_path):
    cfg = RunConfig(dataset="IV-lin-2d-weak", n=600, M=20, grid_points=2, seeds=(0, 1), outer_rounds=10,
                    flow_epochs=20, eval_mc=500, record_time=False)
    a = write_outputs(run_bounds(cfg), tmp_path / "a")
    b = write_outputs(run_bounds(cfg), tmp_path / "b")
    names = ["bounds.csv", "summary.json", "trace.csv", "bounds.svg"]
    same = [filecmp.cmp(a / n, b / n, shallow=False) for n in names]
    record(11, all(same), ", ".join(f"{n} {'identical' if s else 'DIFFERENT'}" for n, s in zip(names, same)))
    assert all(same)
