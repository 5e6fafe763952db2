import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from codite import __version__, cli
from codite.cme import fit_cme, witness
from codite.data import gen_toy, load_csv, load_truth, pehde, rmse
from codite.errors import NumericError
from codite.kernels import KernelSpec, median_heuristic
from codite.ustat import VARIANCE, conditional_std_batch, fit_ustat_regression


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_json(path):
    return json.loads(path.read_text())


@pytest.fixture(scope="module")
def toy_csv(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert run("simulate", "--generator", "toy", "--n", 300, "--seed", 4, "--out", out) == 0
    return out / "dataset.csv"


@pytest.fixture(scope="module")
def null_csv(tmp_path_factory):
    """Toy covariates and labels with every outcome drawn from the control law."""
    sd = gen_toy(300, seed=21)
    path = tmp_path_factory.mktemp("null") / "null.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "z", "y"])
        for x, z, y in zip(sd.base.X[:, 0], sd.base.z, sd.y0):
            w.writerow([repr(float(x)), int(z), repr(float(y))])
    return path


# --- simulate


def test_simulate_files(toy_csv):
    rows = list(csv.DictReader(toy_csv.open()))
    assert len(rows) == 300
    for r in rows:
        z = int(r["z"])
        assert float(r["y"]) == (float(r["y1"]) if z else float(r["y0"]))
    side = read_json(toy_csv.with_suffix(".json"))
    assert side["truth"]["generator"] == "toy" and side["version"] == __version__ and side["seed"] == 4


def test_simulate_roundtrip(toy_csv):
    ds = load_csv(toy_csv)
    assert ds.n == 300 and ds.covariate_names == ("x",)
    assert load_truth(toy_csv.with_suffix(".json")).generator == "toy"


def test_simulate_ihdp_options(tmp_path):
    assert run("simulate", "--generator", "ihdp:setting=HN,d=10,n_continuous=3", "--n", 50, "--out", tmp_path) == 0
    ds = load_csv(tmp_path / "dataset.csv")
    assert ds.X.shape == (50, 10)
    assert read_json(tmp_path / "dataset.json")["truth"]["setting"] == "HN"


def test_simulate_deterministic(tmp_path):
    argv = ("simulate", "--generator", "ihdp:setting=LN", "--n", 80, "--seed", 9, "--out", tmp_path)
    run(*argv)
    first = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
    run(*argv)
    assert {p.name: p.read_bytes() for p in tmp_path.iterdir()} == first
    run(*argv[:-3], 10, "--out", tmp_path)
    assert (tmp_path / "dataset.csv").read_bytes() != first["dataset.csv"]


# --- test


def test_kcd_golden_alternative(toy_csv, tmp_path):
    assert run("test", "--input", toy_csv, "--permutations", 50, "--seed", 1, "--out", tmp_path) == 0
    rec = read_json(tmp_path / "kcd_test.json")
    res = rec["result"]
    assert res["rejected"] is True
    # Golden values pinned from the first verified run.
    assert res["p_value"] == pytest.approx(1 / 51)
    assert res["t_hat"] == pytest.approx(0.04205951398429278, rel=1e-9)
    assert res["propensity"] == "klr" and len(res["null_stats"]) == 50
    assert rec["config"]["permutations"] == 50 and rec["version"] == __version__


def test_kcd_golden_null(null_csv, tmp_path):
    assert run("test", "--input", null_csv, "--permutations", 50, "--seed", 1, "--propensity", "const:0.5",
               "--out", tmp_path) == 0
    res = read_json(tmp_path / "kcd_test.json")["result"]
    assert res["rejected"] is False
    assert res["p_value"] == pytest.approx(45 / 51)
    assert res["t_hat"] == pytest.approx(0.003400173501563562, rel=1e-9)
    assert res["propensity"] == "known"


def test_known_propensity_column(tmp_path):
    path = tmp_path / "d.csv"
    rng = np.random.default_rng(0)
    lines = ["x,z,y,e"] + [f"{rng.random()},{i % 2},{rng.standard_normal()},0.5" for i in range(40)]
    path.write_text("\n".join(lines) + "\n")
    assert run("test", "--input", path, "--covariates", "x", "--propensity", "known:e", "--permutations", 9,
               "--out", tmp_path) == 0
    assert read_json(tmp_path / "kcd_test.json")["result"]["propensity"] == "known"


def test_malformed_csv(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("x,z,y\n0.1,1,2\n0.2,0,oops\n")
    assert run("test", "--input", bad, "--out", tmp_path) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ParseError" and "row 3" in err["message"] and err["exit_code"] == 2


@pytest.mark.parametrize("argv", [
    ["test", "--generator", "toy", "--lambda", "-1"],
    ["test", "--generator", "toy", "--propensity", "magic"],
    ["test"],
    ["witness", "--generator", "toy", "--bandwidth", "wide"],
    ["ustat", "--generator", "toy", "--quantity", "kurtosis"],
    ["test", "--no-such-flag"],
])
def test_validation_errors_exit_2(argv, tmp_path, capsys):
    assert run(*argv, "--out", tmp_path) == 2
    assert "error" in json.loads(capsys.readouterr().err)


def test_numeric_failure_exit_3(monkeypatch, tmp_path, capsys):
    def boom(cfg):
        raise NumericError("factorization failed: smallest pivot -1")
    monkeypatch.setitem(cli.HANDLERS, "test", boom)
    assert run("test", "--generator", "toy", "--out", tmp_path) == 3
    assert json.loads(capsys.readouterr().err)["exit_code"] == 3


# --- witness


def test_witness_single_cell(toy_csv, tmp_path):
    assert run("witness", "--input", toy_csv, "--x-grid", "0.5:0.5:1", "--y-grid", "2:2:1", "--out", tmp_path) == 0
    rows = list(csv.DictReader((tmp_path / "witness_grid.csv").open()))
    assert len(rows) == 1 and rows[0]["x_index"] == "0" and rows[0]["y"] == "2.0"


def test_witness_matches_library(toy_csv, tmp_path):
    run("witness", "--input", toy_csv, "--x-grid", "0:1:4", "--y-grid=-5:12:6", "--lambda", "0.01", "--out", tmp_path)
    ds = load_csv(toy_csv)
    k = KernelSpec("gaussian", median_heuristic(ds.X))
    l = KernelSpec("gaussian", median_heuristic(ds.y))
    m0 = fit_cme(*ds.group(0), k, l, 0.01)
    m1 = fit_cme(*ds.group(1), k, l, 0.01)
    for r in csv.DictReader((tmp_path / "witness_grid.csv").open()):
        assert float(r["value"]) == witness(m0, m1, [float(r["x"])], float(r["y"]))
    rec = read_json(tmp_path / "witness_grid.json")
    assert np.array(rec["grid"]["values"]).shape == (4, 6)


def test_witness_x_grid_from_csv(toy_csv, tmp_path):
    grid = tmp_path / "grid.csv"
    grid.write_text("x\n0.2\n0.8\n")
    assert run("witness", "--input", toy_csv, "--x-grid", grid, "--y-grid", "0:1:2", "--out", tmp_path) == 0
    rows = list(csv.DictReader((tmp_path / "witness_grid.csv").open()))
    assert [r["x"] for r in rows] == ["0.2", "0.2", "0.8", "0.8"]


# --- ustat


def test_ustat_empty_grid(toy_csv, tmp_path):
    assert run("ustat", "--input", toy_csv, "--x-grid", "0:1:0", "--out", tmp_path) == 2
    assert not (tmp_path / "ustat_curves.csv").exists()


def test_ustat_matches_library(toy_csv, tmp_path):
    assert run("ustat", "--input", toy_csv, "--quantity", "std", "--x-grid", "0.1:0.9:5", "--lambda", "0.001",
               "--out", tmp_path) == 0
    rows = list(csv.DictReader((tmp_path / "ustat_curves.csv").open()))
    assert len(rows) == 10
    ds = load_csv(toy_csv)
    k = KernelSpec("gaussian", median_heuristic(ds.X))
    grid = np.linspace(0.1, 0.9, 5)[:, None]
    for g, name in ((0, "control"), (1, "treatment")):
        model = fit_ustat_regression(*ds.group(g), VARIANCE, k, 0.001)
        expected, _ = conditional_std_batch(model, grid)
        got = [float(r["estimate"]) for r in rows if r["group"] == name]
        assert got == expected.tolist()
    assert {r["quantity"] for r in rows} == {"std"}


def test_ustat_cv_bandwidth(toy_csv, tmp_path):
    assert run("ustat", "--input", toy_csv, "--quantity", "variance", "--bandwidth", "cv", "--lambda", "cv",
               "--x-grid", "0.2:0.8:3", "--out", tmp_path) == 0
    models = read_json(tmp_path / "ustat_run.json")["models"]
    assert len(models) == 2 and all(m["lambda"] > 0 for m in models)


# --- evaluate


def test_evaluate_matches_library(toy_csv, tmp_path):
    assert run("evaluate", "--input", toy_csv, "--quantity", "std", "--lambda", "0.001", "--out", tmp_path) == 0
    rep = read_json(tmp_path / "evaluate.json")
    ds = load_csv(toy_csv)
    truth = load_truth(toy_csv.with_suffix(".json"))
    k = KernelSpec("gaussian", median_heuristic(ds.X))
    for g, name in ((0, "control"), (1, "treatment")):
        est, _ = conditional_std_batch(fit_ustat_regression(*ds.group(g), VARIANCE, k, 0.001), ds.X)
        tv = truth.cond_std(g, ds.X)
        cell = next(r for r in rep["results"] if r["group"] == name)
        assert cell["pehde"]["values"] == [pehde(est, tv)]
        assert cell["rmse"]["mean"] == rmse(est, tv) and cell["rmse"]["se"] == 0.0


def test_evaluate_zero_error_when_injected(toy_csv, tmp_path):
    def oracle(cfg, ds):
        for g, name in ((0, "control"), (1, "treatment")):
            fn = lambda truth, X, g=g: truth.cond_std(g, X)
            yield "std", name, fn(load_truth(toy_csv.with_suffix(".json")), ds.X), fn

    cfg = cli.resolve_config(cli.build_parser().parse_args(
        ["evaluate", "--input", str(toy_csv), "--repetitions", "3", "--out", str(tmp_path)]))
    assert cli.cmd_evaluate(cfg, estimator=oracle) == 0
    for cell in read_json(tmp_path / "evaluate.json")["results"]:
        assert cell["pehde"]["values"][0] == 0.0


def test_evaluate_repetitions_schema(tmp_path):
    import jsonschema

    assert run("evaluate", "--generator", "ihdp:setting=SN", "--n", 120, "--quantity", "mean,std,mmd",
               "--repetitions", 3, "--seed", 2, "--out", tmp_path) == 0
    rep = read_json(tmp_path / "evaluate.json")
    jsonschema.validate(rep, cli.report_schema())
    cells = {(r["quantity"], r["group"]) for r in rep["results"]}
    assert cells == {("mean", "control"), ("mean", "treatment"), ("std", "control"), ("std", "treatment"),
                     ("mmd", "effect")}
    for r in rep["results"]:
        vals = r["rmse"]["values"]
        assert len(vals) == 3
        assert r["rmse"]["se"] == pytest.approx(np.std(vals, ddof=1) / np.sqrt(3))


def test_evaluate_needs_truth(tmp_path, null_csv):
    assert run("evaluate", "--input", null_csv, "--out", tmp_path) == 2


def test_schema_rejects_bad_report():
    import jsonschema

    with pytest.raises(jsonschema.ValidationError):
        cli.validate_report({"command": "evaluate", "version": "x", "seed": 0, "config": {}, "repetitions": 0,
                             "results": []})


# --- config handling


def test_config_precedence(tmp_path, toy_csv):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"input": str(toy_csv), "permutations": 7, "alpha": 0.2, "seed": 3}))
    assert run("test", "--config", conf, "--permutations", 5, "--out", tmp_path) == 0
    rec = read_json(tmp_path / "kcd_test.json")
    assert rec["config"]["permutations"] == 5
    assert rec["config"]["alpha"] == 0.2 and rec["result"]["alpha"] == 0.2
    assert rec["seed"] == 3 and rec["config"]["kernel"] == "gaussian"


def test_config_roundtrip(tmp_path, toy_csv):
    run("witness", "--input", toy_csv, "--x-grid", "0:1:2", "--y-grid", "0:1:2", "--out", tmp_path / "a")
    conf = tmp_path / "resolved.json"
    before = {p.name: p.read_bytes() for p in (tmp_path / "a").iterdir()}
    conf.write_text(json.dumps(read_json(tmp_path / "a" / "witness_grid.json")["config"]))
    assert run("witness", "--config", conf) == 0
    assert {p.name: p.read_bytes() for p in (tmp_path / "a").iterdir()} == before


def test_config_unknown_key(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"permutatoins": 3}))
    assert run("test", "--config", conf, "--generator", "toy") == 2


def test_substreams_are_distinct():
    assert cli.substream_seed(0, "data") != cli.substream_seed(0, "permutations")
    assert cli.substream_seed(0, "data") == cli.substream_seed(0, "data")


def test_atomic_write_leaves_no_temp_files(tmp_path):
    cli.atomic_write(tmp_path / "x" / "f.txt", "hello\n")
    assert [p.name for p in (tmp_path / "x").iterdir()] == ["f.txt"]


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "codite", "simulate", "--generator", "toy", "--n", "20",
                          "--out", str(tmp_path)], capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    assert (tmp_path / "dataset.csv").exists()
