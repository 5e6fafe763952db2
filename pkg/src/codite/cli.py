"""Command-line entry point: ``codite {test,witness,ustat,simulate,evaluate}``.

Every command resolves its configuration as CLI flags > ``--config`` JSON file >
defaults, derives all randomness from ``--seed`` through named substreams, and
writes its artifacts atomically into ``--out``. Exit codes: 0 success,
2 validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .cme import codite_mmd_batch, default_lambda, fit_cme, select_lambda, witness_grid
from .data import (
    Dataset,
    dataset_csv_text,
    generate,
    load_csv,
    load_truth,
    pehde,
    rmse,
    true_mmd,
    true_ustat,
    truth_sidecar,
)
from .errors import ArgumentError, CoditeError, SchemaError
from .kcd import DEFAULT_KLR_RIDGE, kcd_test
from .kernels import KernelSpec, median_heuristic
from .ustat import (
    MEAN,
    VARIANCE,
    conditional_std_batch,
    fit_ustat_regression,
    select_ustat_hyperparameters,
    ukernel,
)

COMMANDS = ("test", "witness", "ustat", "simulate", "evaluate")
CME_LAMBDA_GRID = tuple(10.0**e for e in range(-6, 1))
SCHEMA_DIR = Path(__file__).with_name("schemas")


@dataclass
class RunConfig:
    command: str = ""
    input: str | None = None
    generator: str | None = None
    n: int = 1000
    covariates: list | None = None
    treatment: str = "z"
    outcome: str = "y"
    truth: str | None = None
    kernel: str = "gaussian"
    bandwidth: str = "median"
    kernel1: str | None = None
    bandwidth1: str | None = None
    outcome_kernel: str = "gaussian"
    outcome_bandwidth: str = "median"
    lam: str = "default"
    cv_folds: int = 5
    permutations: int = 100
    alpha: float = 0.05
    propensity: str = "klr"
    klr_ridge: float = DEFAULT_KLR_RIDGE
    quantities: list = field(default_factory=lambda: ["mean", "std"])
    x_grid: str | None = None
    y_grid: str | None = None
    repetitions: int = 1
    seed: int = 0
    out: str = "."

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SchemaError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def substream_seed(seed: int, name: str) -> int:
    """Deterministic child seed for a named purpose."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


# --- output -------------------------------------------------------------------


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _record(cfg: RunConfig, **payload) -> dict:
    return {"command": cfg.command, "version": __version__, "seed": cfg.seed, "config": cfg.to_dict(), **payload}


# --- inputs -------------------------------------------------------------------


def _parse_generator(spec: str):
    name, _, rest = spec.partition(":")
    kwargs = {}
    for item in filter(None, rest.split(",")):
        key, sep, val = item.partition("=")
        if not sep:
            raise ArgumentError(f"generator option {item!r} must look like key=value")
        kwargs[key.strip()] = _coerce(val.strip())
    return name.strip(), kwargs


def _coerce(val: str):
    for conv in (int, float):
        try:
            return conv(val)
        except ValueError:
            pass
    return val


def load_input(cfg: RunConfig):
    """Return (Dataset, SyntheticDataset or None, truth or None)."""
    if bool(cfg.input) == bool(cfg.generator):
        raise ArgumentError("give exactly one of --input and --generator")
    if cfg.generator:
        name, kwargs = _parse_generator(cfg.generator)
        sd = generate(name, int(cfg.n), substream_seed(cfg.seed, "data"), **kwargs)
        return sd.base, sd, sd.truth
    ds = load_csv(cfg.input, cfg.covariates, cfg.treatment, cfg.outcome)
    truth = None
    truth_path = Path(cfg.truth) if cfg.truth else Path(cfg.input).with_suffix(".json")
    if cfg.truth or truth_path.exists():
        truth = load_truth(truth_path)
    return ds, None, truth


def _kernel(family: str, bandwidth: str, points) -> KernelSpec:
    if family == "linear":
        return KernelSpec("linear")
    if bandwidth == "median":
        return KernelSpec(family, median_heuristic(points))
    try:
        return KernelSpec(family, float(bandwidth))
    except ValueError:
        raise ArgumentError(f"bandwidth must be 'median' or a number, got {bandwidth!r}") from None


def resolve_kernels(cfg: RunConfig, ds: Dataset):
    k0 = _kernel(cfg.kernel, cfg.bandwidth, ds.X)
    k1 = _kernel(cfg.kernel1 or cfg.kernel, cfg.bandwidth1 or cfg.bandwidth, ds.X)
    l = _kernel(cfg.outcome_kernel, cfg.outcome_bandwidth, ds.y)
    return k0, k1, l


def _fixed_lambda(cfg: RunConfig, n: int) -> float | None:
    if cfg.lam == "default":
        return default_lambda(n)
    if cfg.lam == "cv":
        return None
    try:
        lam = float(cfg.lam)
    except ValueError:
        raise ArgumentError(f"--lambda must be a number, 'cv' or 'default', got {cfg.lam!r}") from None
    if not lam > 0:
        raise ArgumentError(f"--lambda must be positive, got {lam}")
    return lam


def cme_lambdas(cfg: RunConfig, ds: Dataset, k0, k1, l):
    out = []
    for g, k in ((0, k0), (1, k1)):
        X, Y = ds.group(g)
        lam = _fixed_lambda(cfg, X.shape[0])
        if lam is None:
            lam = select_lambda(X, Y, k, l, CME_LAMBDA_GRID, cfg.cv_folds)
        out.append(lam)
    return out


def fit_cme_pair(cfg: RunConfig, ds: Dataset):
    ds.require_both_groups()
    k0, k1, l = resolve_kernels(cfg, ds)
    lam0, lam1 = cme_lambdas(cfg, ds, k0, k1, l)
    m0 = fit_cme(*ds.group(0), k0, l, lam0, group="control")
    m1 = fit_cme(*ds.group(1), k1, l, lam1, group="treatment")
    return m0, m1, {"k0": k0.to_dict(), "k1": k1.to_dict(), "l": l.to_dict(), "lambda0": lam0, "lambda1": lam1}


def _parse_range(spec: str, name: str) -> np.ndarray:
    parts = spec.split(":")
    if len(parts) != 3:
        raise ArgumentError(f"{name} must look like start:stop:num, got {spec!r}")
    try:
        a, b, num = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise ArgumentError(f"cannot parse {name} {spec!r}") from None
    if num < 1:
        raise ArgumentError(f"{name} needs at least one point")
    return np.linspace(a, b, num)


def resolve_x_grid(cfg: RunConfig, ds: Dataset) -> np.ndarray:
    d = ds.X.shape[1]
    if cfg.x_grid is None:
        if d == 1:
            return np.linspace(ds.X.min(), ds.X.max(), 21)[:, None]
        return ds.X[: min(ds.n, 20)]
    if Path(cfg.x_grid).suffix == ".csv" or ":" not in cfg.x_grid:
        rows = load_csv_points(cfg.x_grid, ds.covariate_names)
        return rows
    if d != 1:
        raise ArgumentError("a start:stop:num x grid needs one covariate; pass a CSV of covariate rows")
    return _parse_range(cfg.x_grid, "--x-grid")[:, None]


def load_csv_points(path, columns) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        missing = [c for c in columns if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing covariate columns {missing}")
        idx = [header.index(c) for c in columns]
        rows = []
        for lineno, r in enumerate(reader, start=2):
            if not r:
                continue
            try:
                rows.append([float(r[i]) for i in idx])
            except (ValueError, IndexError):
                raise ArgumentError(f"{path}: row {lineno}: cannot parse covariates") from None
    if not rows:
        raise ArgumentError(f"{path}: no grid rows")
    return np.array(rows)


def resolve_y_grid(cfg: RunConfig, ds: Dataset) -> np.ndarray:
    if cfg.y_grid is None:
        return np.linspace(ds.y.min(), ds.y.max(), 50)
    return _parse_range(cfg.y_grid, "--y-grid")


def parse_quantity(q: str):
    """Map a CLI quantity token to (label, U-kernel, transform)."""
    name, _, arg = q.partition(":")
    if name == "mean":
        return "mean", MEAN
    if name in ("std", "variance"):
        return name, VARIANCE
    if name == "gini":
        return "gini", ukernel("gini")
    if name == "cdf":
        try:
            return f"cdf:{float(arg):g}", ukernel("cdf_at", float(arg))
        except ValueError:
            raise ArgumentError(f"cdf quantity needs a threshold, e.g. cdf:2.5 (got {q!r})") from None
    if name == "moment":
        try:
            return f"moment:{int(arg)}", ukernel("raw_moment", int(arg))
        except ValueError:
            raise ArgumentError(f"moment quantity needs an integer order, e.g. moment:3 (got {q!r})") from None
    raise ArgumentError(f"unknown quantity {q!r}; expected mean, std, variance, gini, cdf:<y>, moment:<k>")


def fit_ustat_group(cfg: RunConfig, X, Y, h, k_spec: KernelSpec):
    lam = _fixed_lambda(cfg, X.shape[0])
    if lam is None:
        if cfg.bandwidth == "cv":
            k_spec, lam = select_ustat_hyperparameters(X, Y, h, k_spec.family, folds=cfg.cv_folds)
        else:
            k_spec, lam = select_ustat_hyperparameters(X, Y, h, k_spec.family, k_spec.bandwidth, (1.0,), folds=cfg.cv_folds)
    return fit_ustat_regression(X, Y, h, k_spec, lam)


def ustat_estimates(cfg: RunConfig, ds: Dataset, Xq: np.ndarray, quantities=None):
    """Yield (quantity label, U-kernel, group, estimates at Xq, model info)."""
    ds.require_both_groups()
    bw = "median" if cfg.bandwidth == "cv" else cfg.bandwidth
    bw1 = "median" if (cfg.bandwidth1 or cfg.bandwidth) == "cv" else (cfg.bandwidth1 or cfg.bandwidth)
    specs = {0: _kernel(cfg.kernel, bw, ds.X), 1: _kernel(cfg.kernel1 or cfg.kernel, bw1, ds.X)}
    for q in cfg.quantities if quantities is None else quantities:
        label, h = parse_quantity(q)
        for g in (0, 1):
            X, Y = ds.group(g)
            if X.shape[0] < h.r:
                raise ArgumentError(f"group {g} has fewer than {h.r} points")
            model = fit_ustat_group(cfg, X, Y, h, specs[g])
            if label == "std":
                est, clamped = conditional_std_batch(model, Xq)
            else:
                est, clamped = model.predict_diagonal(Xq), 0
            info = {"quantity": label, "group": g, "lambda": model.lam, "kernel": model.k_spec.to_dict(),
                    "clamped": int(clamped)}
            yield label, h, g, est, info


# --- commands -------------------------------------------------------------------


def cmd_test(cfg: RunConfig) -> int:
    ds, _, _ = load_input(cfg)
    ds.require_both_groups()
    k0, k1, l = resolve_kernels(cfg, ds)
    if k0 != k1:
        raise ArgumentError("the KCD test uses one covariate kernel for both groups; drop --kernel1/--bandwidth1")
    lam0, lam1 = cme_lambdas(cfg, ds, k0, k1, l)
    propensity = resolve_propensity(cfg, ds)
    res = kcd_test(ds, k0, l, lam0, lam1, m=cfg.permutations, alpha=cfg.alpha,
                   seed=substream_seed(cfg.seed, "permutations"), propensity=propensity, klr_ridge=cfg.klr_ridge)
    rec = _record(cfg, result=res.to_dict(), kernels={"k": k0.to_dict(), "l": l.to_dict()})
    atomic_write(Path(cfg.out) / "kcd_test.json", _json(rec))
    return 0


def resolve_propensity(cfg: RunConfig, ds: Dataset):
    mode = cfg.propensity
    if mode == "klr":
        return "klr"
    if mode.startswith("const:"):
        try:
            p = float(mode.split(":", 1)[1])
        except ValueError:
            raise ArgumentError(f"cannot parse propensity {mode!r}") from None
        if not 0 < p < 1:
            raise ArgumentError(f"constant propensity must lie in (0, 1), got {p}")
        return np.full(ds.n, p)
    if mode.startswith("known:"):
        col = mode.split(":", 1)[1]
        if not cfg.input:
            raise ArgumentError("known:<column> propensity needs --input")
        e = load_csv_points(cfg.input, [col])[:, 0]
        if e.shape[0] != ds.n:
            raise ArgumentError(f"propensity column {col!r} has {e.shape[0]} rows for {ds.n} units")
        return e
    raise ArgumentError(f"--propensity must be klr, known:<column> or const:<p>, got {mode!r}")


def cmd_witness(cfg: RunConfig) -> int:
    ds, _, _ = load_input(cfg)
    m0, m1, info = fit_cme_pair(cfg, ds)
    grid = witness_grid(m0, m1, resolve_x_grid(cfg, ds), resolve_y_grid(cfg, ds))
    out = Path(cfg.out)
    atomic_write(out / "witness_grid.csv", grid.to_csv(list(ds.covariate_names)))
    atomic_write(out / "witness_grid.json", _json(_record(cfg, fit=info, grid=grid.to_dict())))
    return 0


def ustat_curves_csv(x_names, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*x_names, "estimate", "group", "quantity"])
    for xrow, est, g, q in rows:
        w.writerow([*(repr(float(v)) for v in xrow), repr(float(est)), "control" if g == 0 else "treatment", q])
    return buf.getvalue()


def cmd_ustat(cfg: RunConfig) -> int:
    ds, _, _ = load_input(cfg)
    Xq = resolve_x_grid(cfg, ds)
    rows, infos = [], []
    for label, _, g, est, info in ustat_estimates(cfg, ds, Xq):
        rows.extend((Xq[i], est[i], g, label) for i in range(Xq.shape[0]))
        infos.append(info)
    out = Path(cfg.out)
    atomic_write(out / "ustat_curves.csv", ustat_curves_csv(ds.covariate_names, rows))
    atomic_write(out / "ustat_run.json", _json(_record(cfg, models=infos)))
    return 0


def cmd_simulate(cfg: RunConfig) -> int:
    if not cfg.generator:
        raise ArgumentError("simulate needs --generator")
    ds, sd, _ = load_input(cfg)
    out = Path(cfg.out)
    atomic_write(out / "dataset.csv", dataset_csv_text(ds, sd.y0, sd.y1))
    atomic_write(out / "dataset.json", _json(_record(cfg, **truth_sidecar(sd))))
    return 0


def truth_values(truth, label: str, h, g: int, X) -> np.ndarray:
    if label == "std":
        return np.atleast_1d(truth.cond_std(g, X))
    return true_ustat(truth, h.name, g, X, param=h.param)


def _group_name(g: int) -> str:
    return "control" if g == 0 else "treatment"


def fitted_estimates(cfg: RunConfig, ds: Dataset):
    """Default estimators: U-statistic regression per group, plus MMD-CoDiTE if requested.

    Yields (quantity label, group name, estimates at ds.X, truth function)."""
    ustat_q = [q for q in cfg.quantities if q != "mmd"]
    for label, h, g, est, _ in ustat_estimates(cfg, ds, ds.X, ustat_q):
        yield label, _group_name(g), est, (lambda truth, X, label=label, h=h, g=g: truth_values(truth, label, h, g, X))
    if "mmd" in cfg.quantities:
        m0, m1, _ = fit_cme_pair(cfg, ds)
        yield "mmd", "effect", codite_mmd_batch(m0, m1, ds.X), (lambda truth, X, l=m0.l_spec: true_mmd(truth, l, X))


def evaluate_dataset(cfg: RunConfig, ds: Dataset, truth, estimator=fitted_estimates) -> list:
    """Per-(quantity, group) PEHDE and RMSE on the sample's own covariates."""
    out = []
    for label, group, est, truth_fn in estimator(cfg, ds):
        tv = truth_fn(truth, ds.X)
        out.append({"quantity": label, "group": group, "pehde": pehde(est, tv), "rmse": rmse(est, tv)})
    return out


def summarize(per_rep: list) -> list:
    """Mean and standard error over repetitions for every (quantity, group) cell."""
    cells = {}
    for rep in per_rep:
        for row in rep:
            cells.setdefault((row["quantity"], row["group"]), []).append(row)
    summary = []
    for (q, g), rows in cells.items():
        entry = {"quantity": q, "group": g}
        for metric in ("pehde", "rmse"):
            vals = np.array([r[metric] for r in rows])
            se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
            entry[metric] = {"mean": float(vals.mean()), "se": se, "values": vals.tolist()}
        summary.append(entry)
    return summary


def regenerate(truth, seed: int):
    """A fresh draw from the law recorded in a truth sidecar."""
    meta = truth.meta
    kwargs = {"propensity": meta.get("propensity", 0.5)}
    if truth.generator == "ihdp":
        kwargs.update(setting=meta["setting"], d=len(meta["beta"]), n_continuous=meta["n_continuous"])
    return generate(truth.generator, int(meta["n"]), seed, **kwargs)


def cmd_evaluate(cfg: RunConfig, estimator=fitted_estimates) -> int:
    ds, _, truth = load_input(cfg)
    if truth is None:
        raise ArgumentError("evaluate needs ground truth: use --generator or a dataset with a truth sidecar")
    reps = int(cfg.repetitions)
    if reps < 1:
        raise ArgumentError("--repetitions must be >= 1")
    for q in cfg.quantities:
        if q != "mmd":
            parse_quantity(q)
    per_rep = [evaluate_dataset(cfg, ds, truth, estimator)]
    for rep in range(1, reps):
        sd = regenerate(truth, substream_seed(cfg.seed, f"repetition/{rep}"))
        per_rep.append(evaluate_dataset(cfg, sd.base, sd.truth, estimator))
    report = _record(cfg, repetitions=reps, results=summarize(per_rep))
    validate_report(report)
    atomic_write(Path(cfg.out) / "evaluate.json", _json(report))
    return 0


def report_schema() -> dict:
    return json.loads((SCHEMA_DIR / "evaluate_report.schema.json").read_text())


def validate_report(report: dict) -> None:
    import jsonschema

    jsonschema.validate(report, report_schema())


HANDLERS = {"test": cmd_test, "witness": cmd_witness, "ustat": cmd_ustat, "simulate": cmd_simulate,
            "evaluate": cmd_evaluate}


# --- argument parsing -----------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Usage errors become ArgumentError so they share the structured error path."""

    def error(self, message):
        raise ArgumentError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="codite", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"codite {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config file; CLI flags override its values")
        s.add_argument("--input", help="CSV with covariates, treatment and outcome columns")
        s.add_argument("--generator", help="toy | ihdp[:setting=SN,d=25,...]")
        s.add_argument("--n", type=int, help="sample size for --generator")
        s.add_argument("--covariates", type=lambda v: v.split(","), help="comma-separated covariate columns")
        s.add_argument("--treatment", help="treatment column (default z)")
        s.add_argument("--outcome", help="outcome column (default y)")
        s.add_argument("--truth", help="truth sidecar JSON (default: <input>.json if present)")
        s.add_argument("--kernel", choices=("gaussian", "laplacian", "linear"))
        s.add_argument("--bandwidth", help="median | <value> (ustat/evaluate also accept cv)")
        s.add_argument("--kernel1", choices=("gaussian", "laplacian", "linear"), help="treatment-group covariate kernel")
        s.add_argument("--bandwidth1")
        s.add_argument("--outcome-kernel", dest="outcome_kernel", choices=("gaussian", "laplacian", "linear"))
        s.add_argument("--outcome-bandwidth", dest="outcome_bandwidth")
        s.add_argument("--lambda", dest="lam", help="<value> | cv | default (n^-1/4)")
        s.add_argument("--cv-folds", dest="cv_folds", type=int)
        s.add_argument("--permutations", type=int)
        s.add_argument("--alpha", type=float)
        s.add_argument("--propensity", help="klr | known:<column> | const:<p>")
        s.add_argument("--klr-ridge", dest="klr_ridge", type=float)
        s.add_argument("--quantity", dest="quantities", action="append",
                       help="mean | std | variance | gini | cdf:<y> | moment:<k> (evaluate: also mmd); repeatable")
        s.add_argument("--x-grid", dest="x_grid", help="start:stop:num or a CSV of covariate rows")
        s.add_argument("--y-grid", dest="y_grid", help="start:stop:num (write --y-grid=-5:10:50 for a negative start)")
        s.add_argument("--repetitions", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output directory")
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    base = RunConfig().to_dict()
    if args.config:
        try:
            base.update(json.loads(Path(args.config).read_text()))
        except json.JSONDecodeError as exc:
            raise ArgumentError(f"{args.config}: invalid JSON ({exc})") from None
    for key, val in vars(args).items():
        if key == "config" or val is None:
            continue
        if key == "quantities":
            val = [t for v in val for t in v.split(",") if t]
        base[key] = val
    base["command"] = args.command
    return RunConfig.from_dict(base)


def main(argv=None) -> int:
    try:
        cfg = resolve_config(build_parser().parse_args(argv))
        return HANDLERS[cfg.command](cfg)
    except CoditeError as exc:
        _report_error(exc, exc.exit_code)
        return exc.exit_code
    except (OSError, StopIteration) as exc:
        _report_error(exc, 2)
        return 2


def _report_error(exc: BaseException, code: int) -> None:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")


if __name__ == "__main__":
    raise SystemExit(main())
