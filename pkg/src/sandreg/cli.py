"""Command line front end: config validation, CSV ingestion, four commands.

Commands
--------
``sandreg fit -c config.json -d data.csv -o results.tsv``
    Fit the configured working-covariance structure under one or more
    dispersion objectives, with jackknife standard errors and the percent
    variance reduction against the unweighted baseline.
``sandreg select -c config.json -d data.csv -o results.tsv``
    Fit every candidate structure and report c^T V_hat c per candidate with
    the winner flagged.
``sandreg simulate -c config.json -o results.tsv``
    Run the paired relative-MSE Monte-Carlo comparison.
``sandreg counterexample -c config.json -o results.tsv``
    Sweep the heteroscedastic counterexample law over delta and report
    divergence ratios from quadrature.

The config is one JSON document; unknown keys anywhere are rejected before
any data is read.  Output files are tab separated, embed the config's
SHA-256 digest and the library version, and print all numerics with 17
significant digits, so identical (config, data, seed) runs produce byte
identical files.  Exit codes: 0 success, 2 config error, 3 convergence
failure, 4 data error.
"""

import argparse
import csv
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from . import covariance as cov
from .data import ClusterData, ClusterDataset
from .errors import ConfigError, ConvergenceError, DataError, SandregError
from .counterexample import (
    CounterexampleSpec,
    divergence_lower_bound,
    divergence_ratio,
    find_delta_for_eta,
    population_minimizers,
    population_sandwich_V,
    two_piece_infimum,
)
from .families import family_by_name
from .inference import ModelCandidate, delta_method_variance, jackknife_variance, select_model
from .objectives import DispersionObjective, OptimizerSettings, minimize_dispersion
from .simulate import DgpSpec, MethodSpec, run_mse_experiment


def _fmt(x):
    return format(float(x), ".17g")


def _fmt_vec(v):
    return "[" + ",".join(_fmt(x) for x in np.atleast_1d(v)) + "]"


# ---------------------------------------------------------------------------
# Config schema
# ---------------------------------------------------------------------------

_STRUCTURE_KEYS = {
    "kind": str,
    "scale_mode": str,
    "ar_order": int,
    "ma_order": int,
    "re_columns": list,
    "re_intercept": bool,
    "re_poly": int,
    "split_column": int,
}

_OPTIMIZER_KEYS = {
    "restarts": int,
    "init_scale": float,
    "tol": float,
    "max_evals": int,
    "seed": int,
}

_CONTRAST_KEYS = {"kind": str, "index": int, "values": list, "row": list}

_CSV_KEYS = {"cluster": str, "response": str, "covariates": list}

_TOP_KEYS = {
    "fit": {
        "family": str,
        "link": str,
        "csv": dict,
        "structure": dict,
        "objectives": list,
        "contrast": dict,
        "optimizer": dict,
        "jackknife_steps": int,
        "seed": int,
        "threads": int,
    },
    "select": {
        "family": str,
        "link": str,
        "csv": dict,
        "candidates": list,
        "objective": str,
        "contrast": dict,
        "optimizer": dict,
        "jackknife_steps": int,
        "seed": int,
        "threads": int,
    },
    "simulate": {
        "dgp": str,
        "lambda": float,
        "cluster_counts": list,
        "replications": int,
        "methods": list,
        "optimizer": dict,
        "seed": int,
        "threads": int,
    },
    "counterexample": {
        "tau": float,
        "sigma2": float,
        "c_tilde": float,
        "deltas": list,
        "eta": float,
        "seed": int,
        "threads": int,
    },
}

_OBJECTIVE_KINDS = ("sandwich", "sandwich_large_sample", "eqml", "gee", "none")


def _check_keys(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be an object")
    for key, value in obj.items():
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in {where}")
        want = allowed[key]
        if want is float:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{where}.{key} must be a number")
        elif want is int:
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{where}.{key} must be an integer")
        elif not isinstance(value, want):
            raise ConfigError(f"{where}.{key} must be of type {want.__name__}")


def load_config(path, command):
    try:
        with open(path) as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}")
    try:
        config = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    _check_keys(config, _TOP_KEYS[command], "config")
    if "structure" in config:
        _check_keys(config["structure"], _STRUCTURE_KEYS, "config.structure")
    if "optimizer" in config:
        _check_keys(config["optimizer"], _OPTIMIZER_KEYS, "config.optimizer")
    if "contrast" in config:
        _check_keys(config["contrast"], _CONTRAST_KEYS, "config.contrast")
    if "csv" in config:
        _check_keys(config["csv"], _CSV_KEYS, "config.csv")
    for i, cand in enumerate(config.get("candidates", [])):
        _check_keys(cand, {"label": str, "structure": dict}, f"config.candidates[{i}]")
        _check_keys(cand.get("structure", {}), _STRUCTURE_KEYS, f"config.candidates[{i}].structure")
    for i, m in enumerate(config.get("methods", [])):
        _check_keys(
            m, {"label": str, "objective": str, "structure": dict}, f"config.methods[{i}]"
        )
        _check_keys(m.get("structure", {}), _STRUCTURE_KEYS, f"config.methods[{i}].structure")
    digest = hashlib.sha256(
        json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()
    return config, digest


def build_structure(section):
    if "kind" not in section:
        raise ConfigError("structure.kind is required")
    kind = section["kind"]
    try:
        if kind == "independence":
            return cov.independence(section.get("scale_mode", "unit"))
        if kind == "exchangeable":
            return cov.exchangeable(section.get("scale_mode", "unit"))
        if kind == "ar1":
            return cov.ar1(section.get("scale_mode", "unit"))
        if kind == "arma":
            return cov.arma(
                section.get("ar_order", 1),
                section.get("ma_order", 0),
                section.get("scale_mode", "unit"),
            )
        if kind == "random_effects":
            return cov.random_effects(
                columns=section.get("re_columns", ()),
                intercept=section.get("re_intercept", True),
                poly=section.get("re_poly", 1),
            )
        if kind == "two_piece":
            return cov.two_piece(section.get("split_column", 0))
    except SandregError as exc:
        raise ConfigError(str(exc))
    raise ConfigError(f"unknown structure kind {kind!r}")


def build_optimizer(section, default_seed=0):
    section = dict(section or {})
    section.setdefault("seed", default_seed)
    try:
        return OptimizerSettings(**section)
    except (TypeError, SandregError) as exc:
        raise ConfigError(f"bad optimizer settings: {exc}")


def build_contrast(section, p):
    kind = section.get("kind")
    if kind == "coefficient":
        idx = section.get("index", 0)
        if not 0 <= idx < p:
            raise ConfigError(f"contrast index {idx} out of range for p={p}")
        c = np.zeros(p)
        c[idx] = 1.0
        return c, None
    if kind == "vector":
        c = np.asarray(section.get("values", ()), dtype=float)
        if c.size != p or not np.any(c != 0):
            raise ConfigError(f"contrast vector must be nonzero with length {p}")
        return c, None
    if kind == "prediction_at":
        row = np.asarray(section.get("row", ()), dtype=float)
        if row.size != p:
            raise ConfigError(f"prediction row must have length {p}")
        return row, "prediction"
    raise ConfigError("contrast.kind must be coefficient, vector or prediction_at")


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def ingest_csv(path, cluster_col, response_col, covariate_cols):
    """Group rows by cluster id, preserving file order within clusters.

    Clusters come out in first-appearance order; every covariate must parse
    as a finite decimal; any missing or malformed cell names its row and
    column in the error.
    """
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read data: {exc}")
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError("data file has no header row")
        needed = [cluster_col, response_col, *covariate_cols]
        for col in needed:
            if col not in reader.fieldnames:
                raise DataError(f"column {col!r} missing from data header")
        by_cluster = {}
        for rownum, row in enumerate(reader, start=2):  # header is line 1
            values = []
            for col in [response_col, *covariate_cols]:
                cell = row.get(col)
                if cell is None or cell.strip() == "":
                    raise DataError(f"missing value at line {rownum}, column {col!r}")
                try:
                    val = float(cell)
                except ValueError:
                    raise DataError(
                        f"non-numeric value {cell!r} at line {rownum}, column {col!r}"
                    )
                if not np.isfinite(val):
                    raise DataError(f"non-finite value at line {rownum}, column {col!r}")
                values.append(val)
            key = row[cluster_col]
            if key is None or key.strip() == "":
                raise DataError(f"missing cluster id at line {rownum}")
            by_cluster.setdefault(key, []).append(values)
    if not by_cluster:
        raise DataError("data file contains no rows")
    ys, xs, ids = [], [], []
    for key, rows in by_cluster.items():
        arr = np.asarray(rows)
        ys.append(arr[:, 0])
        xs.append(arr[:, 1:])
        ids.append(key)
    return ClusterDataset.from_arrays(ys, xs), ids


def emit_dataset(dataset, path, cluster_ids=None, covariate_names=None):
    """Write a dataset back to CSV (17 significant digits; round-trip safe)."""
    p = dataset.p
    names = covariate_names or [f"x{k + 1}" for k in range(p)]
    ids = cluster_ids or [str(i) for i in range(dataset.n_clusters)]
    lines = ["cluster,y," + ",".join(names)]
    for cid, cluster in zip(ids, dataset.clusters):
        for j in range(cluster.n):
            cells = [str(cid), _fmt(cluster.y[j])] + [_fmt(v) for v in cluster.x[j]]
            lines.append(",".join(cells))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Result emission
# ---------------------------------------------------------------------------


def _write_result(path, digest, header, rows):
    lines = [f"# sandreg {__version__}", f"# config sha256={digest}", "\t".join(header)]
    for row in rows:
        lines.append("\t".join(row))
    text = "\n".join(lines) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_fit(config, digest, data_path, out_path):
    family = family_by_name(config.get("family", "gaussian"), config.get("link"))
    csv_cfg = config.get("csv")
    if not csv_cfg:
        raise ConfigError("fit needs a csv section naming the data columns")
    dataset, _ = ingest_csv(
        data_path, csv_cfg["cluster"], csv_cfg["response"], csv_cfg["covariates"]
    )
    structure = build_structure(config.get("structure", {"kind": "exchangeable"}))
    c, mode = build_contrast(config.get("contrast", {"kind": "coefficient"}), dataset.p)
    settings = build_optimizer(config.get("optimizer"), config.get("seed", 0))
    steps = config.get("jackknife_steps", 1)
    kinds = config.get("objectives", ["sandwich"])
    for kind in kinds:
        if kind not in _OBJECTIVE_KINDS:
            raise ConfigError(f"unknown objective {kind!r}")
    if "none" not in kinds:
        kinds = ["none", *kinds]

    rows = []
    base_cvc = None
    summary = []
    for kind in kinds:
        objective = DispersionObjective(
            kind, target=c if kind in ("sandwich", "sandwich_large_sample") else None
        )
        fit = minimize_dispersion(dataset, family, structure, objective, settings=settings)
        est = jackknife_variance(
            fit, dataset, family, fit.structure, c, steps=steps if kind != "none" else 0
        )
        cvc = float(c @ est.vhat @ c)
        if kind == "none":
            base_cvc = cvc
        reduction = 100.0 * (1.0 - cvc / base_cvc) if base_cvc else 0.0
        extra = (
            _fmt(delta_method_variance(fit, est.vhat, c, family)) if mode == "prediction" else ""
        )
        rows.append(
            [
                kind,
                _fmt_vec(fit.beta_hat),
                _fmt(cvc),
                _fmt(np.sqrt(cvc)),
                _fmt(reduction),
                _fmt_vec(fit.gamma_hat),
                _fmt(fit.value) if np.isfinite(fit.value) else "",
                extra,
            ]
        )
        summary.append(
            f"{kind:>22}: c'beta = {float(c @ fit.beta_hat): .6g}   "
            f"se = {np.sqrt(cvc):.6g}   reduction vs unweighted = {reduction:.1f}%"
        )
    _write_result(
        out_path,
        digest,
        ["method", "beta_hat", "cvc", "se", "reduction_pct", "gamma_hat", "loss", "prediction_var"],
        rows,
    )
    print("\n".join(summary))
    return 0


def cmd_select(config, digest, data_path, out_path):
    family = family_by_name(config.get("family", "gaussian"), config.get("link"))
    csv_cfg = config.get("csv")
    if not csv_cfg:
        raise ConfigError("select needs a csv section naming the data columns")
    dataset, _ = ingest_csv(
        data_path, csv_cfg["cluster"], csv_cfg["response"], csv_cfg["covariates"]
    )
    c, _ = build_contrast(config.get("contrast", {"kind": "coefficient"}), dataset.p)
    settings = build_optimizer(config.get("optimizer"), config.get("seed", 0))
    cands = [
        ModelCandidate(cand.get("label", f"model{i}"), build_structure(cand["structure"]))
        for i, cand in enumerate(config.get("candidates", []))
    ]
    if not cands:
        raise ConfigError("select needs at least one candidate")
    best, table = select_model(
        cands,
        dataset,
        family,
        config.get("objective", "sandwich"),
        c,
        settings=settings,
        steps=config.get("jackknife_steps", 1),
    )
    rows = [
        [
            r.label,
            _fmt_vec(r.gamma_hat) if r.gamma_hat is not None else "",
            _fmt(r.cvc) if np.isfinite(r.cvc) else "",
            "1" if r.selected else "0",
            r.error or "",
        ]
        for r in table
    ]
    _write_result(out_path, digest, ["label", "gamma_hat", "cvc", "selected", "error"], rows)
    print(f"selected: {best}")
    return 0


def cmd_simulate(config, digest, out_path):
    from .simulate import UNWEIGHTED_LABEL  # noqa: F401 (documented baseline label)

    methods = []
    for m in config.get("methods", []):
        kind = m.get("objective")
        if kind not in _OBJECTIVE_KINDS:
            raise ConfigError(f"unknown objective {kind!r}")
        target = np.ones(1) if kind in ("sandwich", "sandwich_large_sample") else None
        methods.append(
            MethodSpec(
                m.get("label", kind),
                DispersionObjective(kind, target=target),
                build_structure(m["structure"]),
            )
        )
    if not methods:
        raise ConfigError("simulate needs at least one method")
    dgps = [
        DgpSpec(config.get("dgp", "linear_multilevel"), I=i, lam=config.get("lambda", 0.0))
        for i in config.get("cluster_counts", [50])
    ]
    settings = build_optimizer(config.get("optimizer"), config.get("seed", 0))
    report = run_mse_experiment(
        dgps,
        methods,
        replications=config.get("replications", 100),
        root_seed=config.get("seed", 0),
        settings=settings,
        workers=config.get("threads") or os.cpu_count() or 1,
    )
    rows = [
        [r.dgp, r.method, str(r.I), str(r.reps), _fmt(r.mse_ratio), _fmt(r.mc_se_ratio)]
        for r in report.rows
    ]
    _write_result(out_path, digest, ["dgp", "method", "I", "reps", "mse_ratio", "mc_se"], rows)
    print(f"failure rate: {report.failure_rate:.2%}")
    return 0


def cmd_counterexample(config, digest, out_path):
    tau = config.get("tau", 1.0)
    sigma2 = config.get("sigma2", 1.0)
    c_tilde = config.get("c_tilde", 0.5)
    rows = []
    for delta in config.get("deltas", [5.0, 20.0, 100.0]):
        spec = CounterexampleSpec(tau=tau, sigma2=sigma2, c_tilde=c_tilde, delta=delta)
        gamma_eqml, v_pointwise = population_minimizers(spec)
        v_eqml = population_sandwich_V(gamma_eqml, spec)
        v_inf, _ = two_piece_infimum(spec)
        rows.append(
            [
                _fmt(delta),
                _fmt(divergence_ratio(spec)),
                _fmt(divergence_lower_bound(spec)),
                _fmt(gamma_eqml[0]),
                _fmt(gamma_eqml[1]),
                _fmt(v_eqml),
                _fmt(v_inf),
                _fmt(v_pointwise),
            ]
        )
    if config.get("eta"):
        delta_star = find_delta_for_eta(tau, sigma2, c_tilde, config["eta"])
        print(f"delta* for eta={config['eta']:g}: {delta_star:.4g}")
    _write_result(
        out_path,
        digest,
        [
            "delta",
            "ratio",
            "lower_bound",
            "gamma_eqml_1",
            "gamma_eqml_2",
            "v_eqml",
            "v_two_piece_inf",
            "v_pointwise_opt",
        ],
        rows,
    )
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _build_parser():
    parser = argparse.ArgumentParser(prog="sandreg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("fit", "select"):
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", required=True)
        p.add_argument("-d", "--data", required=True)
        p.add_argument("-o", "--out", default=None)
    for name in ("simulate", "counterexample"):
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", required=True)
        p.add_argument("-o", "--out", default=None)
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        config, digest = load_config(args.config, args.command)
        if args.command == "fit":
            return cmd_fit(config, digest, args.data, args.out)
        if args.command == "select":
            return cmd_select(config, digest, args.data, args.out)
        if args.command == "simulate":
            return cmd_simulate(config, digest, args.out)
        return cmd_counterexample(config, digest, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 4
    except ConvergenceError as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
