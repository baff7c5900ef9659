import csv
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from causalbounds import cli, scm
from causalbounds.pipeline import (
    BoundCurve, BoundResult, ConfigError, RunConfig, aggregate, curve_from_summary, emit_csv, emit_summary_json,
    eval_spline, fit_bound_spline, load_config, make_grid, parse_config_text, read_bounds_csv, run_bounds,
    summary_dict, write_outputs,
)
from causalbounds.plot import emit_svg_plot, plot_ranges

TINY = dict(dataset="IV-lin-1d-weak-add", n=300, M=10, B_mc=20, flow="affine", flow_epochs=5, outer_rounds=2,
            inner_steps=2, eval_mc=50, record_time=False)


def result(x, direction, seed, bound, converged=True):
    return BoundResult(tuple(x), direction, seed, bound, converged, 0.0, 0.0)


def test_one_point_one_seed_gives_two_results(tmp_path):
    run = run_bounds(RunConfig(**TINY, grid_min=0.5, grid_max=0.5, grid_points=1, seeds=(7,)))
    assert sorted((r.direction, r.seed) for r in run.results) == [("lower", 7), ("upper", 7)]
    assert all(r.x_star == (0.5,) for r in run.results)
    out = write_outputs(run, tmp_path)
    assert not (out / "bounds.svg").exists()  # one point is too few for a plot


def test_aggregate_examples():
    ups = [result([0], "upper", s, b) for s, b in enumerate([1.0, 1.2, 0.9])]
    los = [result([0], "lower", s, b) for s, b in enumerate([0.1, -0.2, 0.0])]
    assert aggregate(ups + los, "upper") == 1.2
    assert aggregate(ups + los, "lower") == -0.2
    # non-converged runs are left out; none left means missing
    assert aggregate(ups + [result([0], "upper", 9, 5.0, converged=False)], "upper") == 1.2
    assert aggregate([result([0], "lower", 0, -9.0, converged=False)], "lower") is None


def fake_results():
    rng = np.random.default_rng(0)
    out = []
    for x in ([1.0, 0.5], [-1.0, 0.5]):
        for d in ("upper", "lower"):
            for s in (4, 3, 2, 1, 0):
                out.append(BoundResult(tuple(x), d, s, float(rng.normal()), bool(s % 2), float(rng.random()), 0.25))
    return out


def test_csv_rows_header_and_round_trip(tmp_path):
    res = fake_results()
    emit_csv(res, tmp_path / "b.csv")
    with open(tmp_path / "b.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x_star_1", "x_star_2", "direction", "seed", "bound", "converged", "max_violation",
                       "wall_time_s"]
    assert len(rows) == 21
    back = read_bounds_csv(tmp_path / "b.csv")
    assert sorted(back, key=repr) == sorted(res, key=repr)
    keys = [(r.x_star, r.direction, r.seed) for r in back]
    assert keys[0] == ((-1.0, 0.5), "lower", 0) and keys[-1] == ((1.0, 0.5), "upper", 4)
    assert keys == sorted(keys, key=lambda k: (k[0], k[1] != "lower", k[2]))
    with pytest.raises(ValueError):
        emit_csv([], tmp_path / "empty.csv")
    with pytest.raises(OSError):
        emit_csv(res, tmp_path / "missing" / "dir" / "b.csv")


def curve(lower=(0.0, None, -1.0), upper=(2.0, 1.0, 3.0), truth=(1.0, 0.5, 0.0)):
    grid = np.array([[-1.0, 0.2], [0.0, 0.2], [1.0, 0.2]])
    c = BoundCurve(grid, 0, list(lower), list(upper), None if truth is None else np.array(truth),
                   np.array([0.3, 0.4, 0.5]), 0.1)
    for name, vals in (("lower", lower), ("upper", upper)):
        ok = [i for i, v in enumerate(vals) if v is not None]
        if len(ok) >= 2:
            knots, coef = fit_bound_spline(grid[ok, 0], [vals[i] for i in ok])
            c.spline[name] = {"knots": knots.tolist(), "coefficients": coef.tolist()}
    return c


def test_summary_json_schema(tmp_path):
    c = curve()
    emit_summary_json(c, tmp_path / "s.json", RunConfig())
    text = (tmp_path / "s.json").read_text()
    data = json.loads(text)
    assert data["points"][1]["lower"] is None and len(data["points"]) == 3
    assert data["valid"] is False  # a missing point cannot certify containment
    assert data["config"]["M"] == 100 and data["config"]["seeds"] == [0, 1, 2, 3, 4]
    assert text == json.dumps(data, indent=2, sort_keys=True) + "\n"
    full = summary_dict(curve(lower=(0.0, 0.0, -1.0)))
    assert full["valid"] is True
    assert summary_dict(curve(truth=None))["valid"] is None
    assert summary_dict(curve(lower=(0.0, 0.0, 0.5)))["valid"] is False
    back = curve_from_summary(data)
    assert back.lower == c.lower and back.upper == c.upper
    np.testing.assert_array_equal(back.x_grid, c.x_grid)


def test_spline_examples():
    knots, coef = fit_bound_spline([0.0, 2.0], [1.0, 3.0])
    assert eval_spline(knots, coef, 1.0) == pytest.approx(2.0)
    x = np.linspace(-2, 2, 20)
    knots, coef = fit_bound_spline(x, x**3)
    np.testing.assert_allclose(eval_spline(knots, coef, x), x**3, atol=1e-12)
    mid = (x[1:] + x[:-1]) / 2
    assert np.max(np.abs(eval_spline(knots, coef, mid) - mid**3)) < 0.05
    with pytest.raises(ValueError):
        fit_bound_spline([1.0], [1.0])
    with pytest.raises(ValueError):
        fit_bound_spline([0.0, 0.0, 1.0], [1.0, 2.0, 3.0])


def test_svg_well_formed_and_deterministic(tmp_path):
    c = curve()
    c.density = {"x": [-1.0, 0.0, 1.0], "density": [0.1, 0.4, 0.1]}
    emit_svg_plot(c, tmp_path / "a.svg")
    emit_svg_plot(c, tmp_path / "b.svg")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
    root = ET.parse(tmp_path / "a.svg").getroot()
    assert root.tag.endswith("svg")
    ids = {el.get("id") for el in root.iter()}
    assert {"lower", "upper", "true", "naive"} <= ids
    naive = next(el for el in root.iter() if el.get("id") == "naive")
    assert naive.get("stroke-dasharray")
    single = BoundCurve(np.zeros((1, 1)), 0, [0.0], [1.0], None, np.zeros(1), 0.1)
    with pytest.raises(ValueError):
        emit_svg_plot(single, tmp_path / "c.svg")


def test_plot_ranges_margin():
    c = curve(truth=None)
    (x0, x1), (y0, y1) = plot_ranges(c)
    assert (x0, x1) == pytest.approx((-1.1, 1.1))
    xs = np.linspace(-1, 1, 200)
    ys = np.concatenate([eval_spline(c.spline["upper"]["knots"], c.spline["upper"]["coefficients"], xs),
                         [-1.0, 0.0, 0.3, 0.5]])
    lo, hi = ys.min(), ys.max()
    assert (y0, y1) == pytest.approx((lo - 0.05 * (hi - lo), hi + 0.05 * (hi - lo)))


def test_config_parsing(tmp_path):
    text = "# comment\ndataset = IV-lin-2d-weak\nM = 20  # trailing\nseeds = 0, 2\nconstant = true\neps = 0.3\n"
    vals = parse_config_text(text)
    assert vals == {"dataset": "IV-lin-2d-weak", "M": 20, "seeds": (0, 2), "constant": True, "eps": 0.3}
    path = tmp_path / "run.cfg"
    path.write_text(text)
    cfg = load_config(path, M="30", norm=None)
    assert cfg.M == 30 and cfg.seeds == (0, 2) and cfg.norm == "sup"
    for bad in ("M = many", "colour = red", "just words", "constant = maybe"):
        with pytest.raises(ConfigError):
            parse_config_text(bad)
    for bad in (dict(seeds=()), dict(grid_points=0), dict(grid_min=1.0, grid_max=1.0), dict(norm="l1"),
                dict(basis="fourier"), dict(tau_growth=1.0), dict(M=0)):
        with pytest.raises(ConfigError):
            RunConfig(**bad)


def test_grid_uses_marginal_means():
    x = np.array([[0.0, 1.0], [2.0, 3.0]])
    g = make_grid(RunConfig(grid_index=1, grid_points=3, grid_min=-1, grid_max=1), x)
    np.testing.assert_array_equal(g, [[1.0, -1.0], [1.0, 0.0], [1.0, 1.0]])
    with pytest.raises(ConfigError):
        make_grid(RunConfig(grid_index=2), x)


def tiny_flags(**extra):
    flags = []
    for k, v in {**TINY, **extra}.items():
        flags += [f"--{k}", ",".join(map(str, v)) if isinstance(v, tuple) else str(v)]
    return flags


def test_cli_generate_and_oracle(tmp_path, capsys):
    assert cli.main(["generate", "--dataset", "IV-lin-1d-weak-add", "--n", "50", "--out", str(tmp_path / "d.csv")]) == 0
    data = scm.read_csv(tmp_path / "d.csv")
    assert data.n == 50 and data.kind == scm.IV
    assert cli.main(["oracle", "--dataset", "IV-lin-2d-weak", "--grid-points", "3", "--out", str(tmp_path / "o.csv")]) == 0
    rows = list(csv.reader(open(tmp_path / "o.csv")))
    assert rows[0] == ["x_star_1", "x_star_2", "true_effect"] and len(rows) == 4
    for row in rows[1:]:
        x = np.array(row[:2], dtype=float)
        assert float(row[2]) == pytest.approx(float(scm.true_effect("IV-lin-2d-weak", x[None])[0]))


def test_cli_bounds_plot_and_exit_codes(tmp_path, capsys):
    out = tmp_path / "run"
    code = cli.main(["bounds", *tiny_flags(grid_points=2, grid_min=-1, grid_max=1, seeds=(0,)), "--output", str(out)])
    assert code == 0
    assert {p.name for p in out.iterdir()} == {"bounds.csv", "trace.csv", "summary.json", "bounds.svg"}
    assert cli.main(["plot", "--summary", str(out / "summary.json"), "--out", str(tmp_path / "re.svg")]) == 0
    ET.parse(tmp_path / "re.svg")
    assert cli.main(["bounds", "--dataset", "no-such-scm", "--output", str(tmp_path / "x")]) == 1
    assert cli.main(["bounds", "--config", str(tmp_path / "absent.cfg")]) == 1
    assert cli.main(["bounds", *tiny_flags(M="lots")]) == 1
    # a slack far below the regression error makes every run infeasible
    code = cli.main(["bounds", *tiny_flags(grid_points=1, seeds=(0,), eps=1e-9), "--output", str(tmp_path / "inf")])
    assert code == 2
    assert "infeasible" in capsys.readouterr().err


def test_end_to_end_identifiable_containment(additive_run):
    c = additive_run.curve
    for i, x in enumerate(c.varied):
        if x in (-1.0, 0.0, 1.0):
            t = c.true_effect[i]
            assert t == pytest.approx(x)
            assert c.lower[i] is not None and c.upper[i] is not None
            assert c.lower[i] - 0.05 * (1 + abs(t)) <= t <= c.upper[i] + 0.05 * (1 + abs(t))
    for lo, hi in zip(c.lower, c.upper):
        if lo is not None and hi is not None:
            assert lo <= hi
