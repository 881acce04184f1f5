"""Command-line front end: estimation, simulation, cross-validation, balance reports.

Outputs are deterministic for a given configuration and library version:
wall-clock metadata lives only in a ``run_info.json`` sidecar, never in the
report files themselves.
"""

from __future__ import annotations

import argparse
import datetime
import json
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__, balancer, basis as basis_mod, late, simlab
from .model import (
    BasisSpec,
    Dataset,
    Penalty,
    ValidationError,
    dataset_from_csv,
    _jsonable,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_ALL_FAILED = 3
EXIT_INTERNAL = 4

_METHOD_SPLIT = re.compile(r",(?![^(]*\))")


class CliInputError(Exception):
    """Bad command-line input; maps to exit code 2."""


def _parse_methods(text: str) -> list[str]:
    labels = [m.strip() for m in _METHOD_SPLIT.split(text) if m.strip()]
    if not labels:
        raise CliInputError("no methods requested")
    normalized = []
    for label in labels:
        if label == "MLE(2)":
            label = "MLE2"
        normalized.append(label)
    return normalized


def _parse_basis(text: str) -> BasisSpec:
    text = text.strip()
    if text == "raw":
        return BasisSpec("raw")
    if text.startswith("power:"):
        return BasisSpec("power", power_order=int(text.split(":", 1)[1]))
    if text.startswith("spline:"):
        body = text.split(":", 1)[1]
        parts = body.split(",")
        interact = False
        if len(parts) == 3 and parts[2] == "interact":
            interact = True
            parts = parts[:2]
        if len(parts) != 2:
            raise CliInputError(
                "spline basis takes degree,knots[,interact] (e.g. spline:2,1)"
            )
        return BasisSpec(
            "spline",
            degree=int(parts[0]),
            n_knots=int(parts[1]),
            binary_interactions=interact,
        )
    raise CliInputError(f"cannot parse basis {text!r}")


def _parse_range(token: str) -> list[int]:
    if "-" in token:
        lo, hi = token.split("-", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(token)]


def _parse_basis_grid(text: str) -> list[BasisSpec]:
    """Grid form: ``power:1-6`` or ``spline:1-3,0-2`` (ranges or scalars)."""
    text = text.strip()
    if text.startswith("power:"):
        orders = _parse_range(text.split(":", 1)[1])
        return [BasisSpec("power", power_order=k) for k in orders]
    if text.startswith("spline:"):
        body = text.split(":", 1)[1]
        parts = body.split(",")
        interact = False
        if len(parts) == 3 and parts[2] == "interact":
            interact = True
            parts = parts[:2]
        if len(parts) != 2:
            raise CliInputError("spline grid takes degree-range,knot-range[,interact]")
        degrees = _parse_range(parts[0])
        knots = _parse_range(parts[1])
        return [
            BasisSpec("spline", degree=d, n_knots=k, binary_interactions=interact)
            for d in degrees
            for k in knots
        ]
    raise CliInputError(f"cannot parse basis grid {text!r}")


def _parse_float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _apply_log_columns(dataset: Dataset, columns: list[str]) -> Dataset:
    names = list(dataset.covariate_names or [])
    x = dataset.x.copy()
    for col in columns:
        if col not in names:
            raise CliInputError(f"log column {col!r} is not a covariate")
        j = names.index(col)
        if np.any(x[:, j] <= 0):
            raise CliInputError(f"log column {col!r} has non-positive entries")
        x[:, j] = np.log(x[:, j])
    return Dataset(dataset.y, dataset.d, dataset.z, x, tuple(names))


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_jsonable(payload), sort_keys=True, indent=2) + "\n")


def _write_csv(path: Path, body: str, config: dict) -> None:
    """CSV with a one-line comment header echoing the version and config."""
    echo = json.dumps(_jsonable(config), sort_keys=True)
    path.write_text(f"# latebal {__version__} config={echo}\n{body}")


def _write_sidecar(outdir: Path, config: dict) -> None:
    _write_json(
        outdir / "run_info.json",
        {
            "timestamp": datetime.datetime.now().isoformat(),
            "version": __version__,
            "config": config,
        },
    )


def _config_echo(args, keys) -> dict:
    return {k: getattr(args, k.replace("-", "_"), None) for k in keys}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latebal",
        description=(
            "Complier treatment-effect estimation with covariate-balancing "
            "instrument propensity scores"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--format", default="json,csv", help="subset of json,csv")
        p.add_argument("--config", default=None, help="JSON config file (flags win)")

    p_est = sub.add_parser("estimate", help="estimate effects from a CSV dataset")
    p_est.add_argument("--input", default=None, help="CSV with columns y,d,z,...")
    p_est.add_argument("--methods", default="Wald,IV,MLE,MLE2,B(X)")
    p_est.add_argument("--basis", default="raw")
    p_est.add_argument("--penalty", default=None, choices=["l1", "l2", "elastic_net"])
    p_est.add_argument("--lambda", dest="lam", type=float, default=None)
    p_est.add_argument("--bootstrap", type=int, default=0, help="bootstrap replications")
    p_est.add_argument("--log-columns", default=None, help="comma list to log-transform")
    common(p_est)

    p_sim = sub.add_parser("simulate", help="run Monte Carlo cells")
    p_sim.add_argument("--design", default="A", help="comma list from A,B,C")
    p_sim.add_argument("--n", default="500", help="comma list of sample sizes")
    p_sim.add_argument("--delta", default="0.05", help="comma list of overlap bounds")
    p_sim.add_argument("--reps", type=int, default=500)
    p_sim.add_argument("--methods", default=",".join(simlab.DEFAULT_MC_METHODS))
    common(p_sim)

    p_cv = sub.add_parser("cv", help="cross-validate basis recipes")
    p_cv.add_argument("--input", default=None)
    p_cv.add_argument("--basis", default="spline:1-3,0-2", help="candidate grid")
    p_cv.add_argument("--log-columns", default=None)
    common(p_cv)

    p_bal = sub.add_parser("balance-report", help="standardized imbalance tables")
    p_bal.add_argument("--input", default=None)
    p_bal.add_argument("--basis", default="raw")
    p_bal.add_argument("--penalty", default=None, choices=["l1", "l2", "elastic_net"])
    p_bal.add_argument("--lambda", dest="lam", default=None,
                       help="comma list of penalty strengths for the path")
    p_bal.add_argument("--log-columns", default=None)
    common(p_bal)
    return parser


def _merge_config(args: argparse.Namespace, argv: list[str]) -> None:
    if not getattr(args, "config", None):
        return
    path = Path(args.config)
    if not path.exists():
        raise CliInputError(f"config file not found: {path}")
    loaded = json.loads(path.read_text())
    if not isinstance(loaded, dict):
        raise CliInputError("config file must hold a JSON object")
    explicit = set()
    for token in argv:
        if token.startswith("--"):
            name = token[2:].split("=", 1)[0].replace("-", "_")
            explicit.add("lam" if name == "lambda" else name)
    for key, value in loaded.items():
        attr = key.replace("-", "_")
        if attr == "lambda":
            attr = "lam"
        if not hasattr(args, attr) or attr in explicit:
            continue  # flags explicitly given on the command line win
        setattr(args, attr, value)


def _load_dataset(args) -> Dataset:
    if not getattr(args, "input", None):
        raise CliInputError("this command requires --input")
    path = Path(args.input)
    if not path.exists():
        raise CliInputError(f"input file not found: {path}")
    dataset = dataset_from_csv(path)
    if getattr(args, "log_columns", None):
        dataset = _apply_log_columns(
            dataset, [c.strip() for c in args.log_columns.split(",") if c.strip()]
        )
    return dataset


def _formats(args) -> set[str]:
    formats = {f.strip() for f in args.format.split(",") if f.strip()}
    unknown = formats - {"json", "csv"}
    if unknown:
        raise CliInputError(f"unknown output format(s): {sorted(unknown)}")
    return formats


def cmd_estimate(args) -> int:
    dataset = _load_dataset(args)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    formats = _formats(args)
    methods = _parse_methods(args.methods)
    basis_spec = _parse_basis(args.basis)
    penalty = None
    if args.penalty:
        if args.lam is None:
            raise CliInputError("--penalty requires --lambda")
        penalty = Penalty(args.penalty, float(args.lam))
    config = {
        "command": "estimate",
        "input": str(args.input),
        "methods": methods,
        "basis": args.basis,
        "penalty": penalty.to_dict() if penalty else None,
        "bootstrap": args.bootstrap,
        "seed": args.seed,
        "log_columns": args.log_columns,
        "format": sorted(formats),
    }
    estimates = []
    failures = {}
    score_rows = []
    balance_tables = {}
    score_summaries = {}
    for label in methods:
        try:
            est, fitted, built = _run_single_method(
                dataset, label, basis_spec, penalty, args
            )
        except (late.EstimationError, ValidationError) as err:
            failures[label] = str(err)
            continue
        estimates.append(est.to_dict())
        if fitted is not None:
            for i in range(dataset.n):
                score_rows.append(
                    (label, i, int(dataset.z[i]), repr(float(fitted.scores[i])))
                )
            resid = balancer.balance_residuals(fitted.scores, built, dataset.z)
            balance_tables[label] = {
                "columns": list(built.names()),
                "balance_residuals": resid.tolist(),
                "standardized_imbalance": balancer.standardized_imbalance(
                    built, dataset.z, fitted.weights
                ).tolist(),
            }
            z_mask = dataset.z == 1.0
            score_summaries[label] = {
                "min": float(fitted.scores.min()),
                "max": float(fitted.scores.max()),
                "min_z1": float(fitted.scores[z_mask].min()),
                "max_z1": float(fitted.scores[z_mask].max()),
                "min_z0": float(fitted.scores[~z_mask].min()),
                "max_z0": float(fitted.scores[~z_mask].max()),
            }
    if not estimates:
        _write_sidecar(outdir, config)
        print("every requested method failed", file=sys.stderr)
        for label, reason in failures.items():
            print(f"  {label}: {reason}", file=sys.stderr)
        return EXIT_ALL_FAILED
    if "json" in formats:
        _write_json(
            outdir / "report.json",
            {
                "version": __version__,
                "config": config,
                "estimates": estimates,
                "failures": failures,
                "balance": balance_tables,
                "score_summaries": score_summaries,
            },
        )
    if "csv" in formats and score_rows:
        lines = ["method,row,z,score"]
        lines += [f"{m},{i},{z},{s}" for (m, i, z, s) in score_rows]
        _write_csv(outdir / "scores.csv", "\n".join(lines) + "\n", config)
    _write_sidecar(outdir, config)
    return EXIT_OK


def _run_single_method(dataset, label, basis_spec, penalty, args):
    """Run one method; returns (estimate, fitted propensity or None, basis)."""
    opts = balancer.SolverOptions()
    if label in ("B(D)", "B(D,X)"):
        raise late.EstimationError(
            label, "oracle take-up probabilities are only available in simulations"
        )
    if label in ("B(X)", "custom") and penalty is not None and penalty.lam > 0:
        built = basis_mod.standardize(basis_mod.build_basis(dataset.x, basis_spec))
        fitted = balancer.fit_regularized(built, dataset.z, penalty, opts)
        if not fitted.converged:
            raise late.EstimationError(
                label, fitted.note or "penalized balancing fit did not converge"
            )
        est = late.estimate_ipw(dataset, fitted, method=label)
        spec = late.MethodSpec(label, basis=basis_spec)
    else:
        spec = late.method_from_label(label, basis=basis_spec)
        est, fitted, built = late.estimate_method_detailed(dataset, spec, opts)
    if args.bootstrap and penalty is None:
        boot = late.bootstrap_se(dataset, spec, args.bootstrap, args.seed, opts)
        est = _with_bootstrap(est, boot)
    elif fitted is not None:
        est = late._attach_asymptotic_se(dataset, est, fitted, built)
    return est, fitted, built


def _with_bootstrap(est, boot):
    from dataclasses import replace

    diag = dict(est.diagnostics)
    diag["bootstrap"] = {
        "replications": boot.n_boot,
        "failed": boot.n_failed,
        "interval": list(boot.interval),
        "seed": boot.seed,
    }
    return replace(est, se=boot.se, se_method="bootstrap", diagnostics=diag)


def cmd_simulate(args) -> int:
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    formats = _formats(args)
    designs = [d.strip() for d in args.design.split(",") if d.strip()]
    sizes = [int(v) for v in args.n.split(",") if v.strip()]
    deltas = _parse_float_list(args.delta)
    methods = tuple(_parse_methods(args.methods))
    config = {
        "command": "simulate",
        "design": designs,
        "n": sizes,
        "delta": deltas,
        "reps": args.reps,
        "methods": list(methods),
        "seed": args.seed,
        "format": sorted(formats),
    }
    results = []
    manifest = []
    for design in designs:
        for delta in deltas:
            for n in sizes:
                cell = simlab.McCell(
                    design=design,
                    n=n,
                    delta=delta,
                    replications=args.reps,
                    methods=methods,
                    seed=args.seed,
                )
                try:
                    results.append(simlab.run_mc(cell))
                except (ValidationError, late.EstimationError) as err:
                    manifest.append(
                        {"design": design, "delta": delta, "n": n, "error": str(err)}
                    )
    if not results:
        _write_sidecar(outdir, config)
        print("every simulation cell failed", file=sys.stderr)
        return EXIT_ALL_FAILED
    if "csv" in formats:
        _write_csv(outdir / "mc_results.csv", simlab.mc_results_to_csv(results), config)
    if "json" in formats:
        _write_json(
            outdir / "mc_metadata.json",
            {
                "version": __version__,
                "config": config,
                "results": [r.to_dict() for r in results],
                "failed_cells": manifest,
            },
        )
    if manifest:
        _write_json(outdir / "failures.json", {"failed_cells": manifest})
    _write_sidecar(outdir, config)
    return EXIT_OK


def cmd_cv(args) -> int:
    dataset = _load_dataset(args)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    candidates = _parse_basis_grid(args.basis)
    config = {
        "command": "cv",
        "input": str(args.input),
        "basis": args.basis,
        "seed": args.seed,
        "log_columns": args.log_columns,
    }
    result = basis_mod.cross_validate(dataset, candidates, seed=args.seed)
    payload = {
        "version": __version__,
        "config": config,
        "selected": result.best.describe(),
        "candidates": [
            {
                "basis": spec.describe(),
                "held_out_tailored_loss": score,
                "flag": flag,
            }
            for spec, score, flag in zip(candidates, result.scores, result.flags)
        ],
        "fold_method": result.fold_method,
        "n_folds": result.n_folds,
    }
    _write_json(outdir / "cv_report.json", payload)
    _write_sidecar(outdir, config)
    return EXIT_OK


def cmd_balance_report(args) -> int:
    dataset = _load_dataset(args)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    formats = _formats(args)
    basis_spec = _parse_basis(args.basis)
    built = basis_mod.build_basis(dataset.x, basis_spec)
    opts = balancer.SolverOptions()
    balanced = balancer.fit(built, dataset.z, opts)
    likelihood = late.fit_mle_propensity(built, dataset.z, opts)
    before = balancer.standardized_imbalance(built, dataset.z)
    after_mle = balancer.standardized_imbalance(built, dataset.z, likelihood.weights)
    after_bal = balancer.standardized_imbalance(built, dataset.z, balanced.weights)
    config = {
        "command": "balance-report",
        "input": str(args.input),
        "basis": args.basis,
        "penalty": args.penalty,
        "lambda": args.lam,
        "seed": args.seed,
    }
    names = built.names()
    if "csv" in formats:
        lines = ["column,smd_unweighted,smd_likelihood,smd_balanced"]
        for j, name in enumerate(names):
            lines.append(
                f"{name},{repr(float(before[j]))},{repr(float(after_mle[j]))},"
                f"{repr(float(after_bal[j]))}"
            )
        _write_csv(outdir / "balance.csv", "\n".join(lines) + "\n", config)
    path_rows = []
    selected_lambda = None
    if args.penalty:
        lams = _parse_float_list(args.lam) if args.lam else list(np.logspace(-4, 2, 13))
        standardized = basis_mod.standardize(built)
        for lam in lams:
            if lam == 0.0:
                fitted = balancer.fit(standardized, dataset.z, opts)
            else:
                fitted = balancer.fit_regularized(
                    standardized, dataset.z, Penalty(args.penalty, lam), opts
                )
            imb = balancer.standardized_imbalance(
                standardized, dataset.z, fitted.weights
            )
            path_rows.append(
                {
                    "lambda": lam,
                    "max_abs_standardized_imbalance": float(np.max(np.abs(imb[1:]))),
                    "converged": fitted.converged,
                }
            )
        positive = [lam for lam in lams if lam > 0.0]
        if positive:
            selected_lambda, held_out = balancer.select_lambda(
                standardized,
                dataset.z,
                kind=args.penalty,
                grid=positive,
                seed=args.seed,
                options=opts,
            )
            held_by_lam = {row["lambda"]: row["held_out_imbalance"] for row in held_out}
            for row in path_rows:
                row["held_out_imbalance"] = held_by_lam.get(row["lambda"])
        if "csv" in formats:
            lines = ["lambda,max_abs_standardized_imbalance,converged,held_out_imbalance"]
            for row in path_rows:
                held = row.get("held_out_imbalance")
                lines.append(
                    f"{repr(row['lambda'])},"
                    f"{repr(row['max_abs_standardized_imbalance'])},"
                    f"{row['converged']},"
                    f"{'' if held is None else repr(held)}"
                )
            _write_csv(outdir / "lambda_path.csv", "\n".join(lines) + "\n", config)
    if "json" in formats:
        _write_json(
            outdir / "balance_report.json",
            {
                "version": __version__,
                "config": config,
                "columns": list(names),
                "smd_unweighted": before.tolist(),
                "smd_likelihood": after_mle.tolist(),
                "smd_balanced": after_bal.tolist(),
                "lambda_path": path_rows,
                "selected_lambda": selected_lambda,
                "balanced_fit": balanced.convergence_report(),
                "likelihood_fit": likelihood.convergence_report(),
            },
        )
    _write_sidecar(outdir, config)
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    tokens = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(tokens)
        _merge_config(args, tokens)
        if not getattr(args, "out", None):
            raise CliInputError("an output directory is required (--out)")
        if args.command == "estimate":
            return cmd_estimate(args)
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "cv":
            return cmd_cv(args)
        if args.command == "balance-report":
            return cmd_balance_report(args)
        raise CliInputError(f"unknown command {args.command!r}")
    except (CliInputError, ValidationError, FileNotFoundError, json.JSONDecodeError) as err:
        print(f"input error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except late.EstimationError as err:
        print(f"estimation failed: {err}", file=sys.stderr)
        return EXIT_ALL_FAILED
    except Exception as err:  # noqa: BLE001 - exit-code contract
        print(f"internal error: {err}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
