"""Command-line entry point: ``rankicc estimate | simulate | version``.

Exit codes: 0 on success, 2 for bad input data or arguments, 3 when the
data are valid but the ICC is undefined.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .csvio import ColumnMapping, dump_json, parse_csv
from .data import SINGLETON_POLICIES, ThreeLevelDataset
from .errors import EstimationError, InvalidSpec, RankIccError
from .estimator import rank_icc, rank_icc_three_level
from .inference import (
    BOOTSTRAP_SCHEMES,
    CI_METHODS,
    asymptotic_se,
    asymptotic_se_three_level,
    ci_fisher_z,
    ci_wald,
    cluster_bootstrap,
    env_workers,
    one_stage_bootstrap_3level,
    two_stage_bootstrap,
)
from .simulation import DEFAULT_TRUTH_M, ScenarioSpec, SizeSpec, StudyCell, run_study
from .weighting import (
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    THREE_LEVEL_SCHEMES,
    TWO_LEVEL_SCHEMES,
    WeightScheme,
    make_weights,
)

DEFAULT_B = 1000
DEFAULT_CIS = ("wald", "fisher-z")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rankicc", description="Rank intraclass correlation toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("estimate", help="estimate the rank ICC of a CSV dataset")
    e.add_argument("--input", required=True, help="CSV file with a header row")
    e.add_argument("--levels", type=int, choices=(2, 3), default=2)
    e.add_argument("--cluster-col", default="cluster")
    e.add_argument("--subcluster-col", default=None, help="level-2 id column (three-level data)")
    e.add_argument("--value-col", default="value")
    e.add_argument("--weight-col", default=None, help="raw per-observation weights; overrides --weights")
    e.add_argument("--weights", choices=TWO_LEVEL_SCHEMES + THREE_LEVEL_SCHEMES, default=None)
    e.add_argument("--tol", type=float, default=DEFAULT_TOL)
    e.add_argument("--max-iter", type=int, default=DEFAULT_MAX_ITER)
    e.add_argument("--ci", action="append", choices=CI_METHODS, default=None,
                   help="interval method; repeatable (default: wald and fisher-z)")
    e.add_argument("--level", type=float, default=0.95, help="confidence level")
    e.add_argument("--bootstrap", choices=BOOTSTRAP_SCHEMES, default=None)
    e.add_argument("--B", type=int, default=DEFAULT_B, help="bootstrap replicates")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--singletons", choices=SINGLETON_POLICIES, default="error")
    e.add_argument("--output", default=None, help="write the JSON report here instead of stdout")

    s = sub.add_parser("simulate", help="run a simulation study from a JSON config")
    s.add_argument("config", help="study configuration (JSON)")
    s.add_argument("--output", default=None, help="output path prefix for .csv and .json")
    s.add_argument("--workers", type=int, default=None, help="worker processes (default RANKICC_THREADS)")

    sub.add_parser("version", help="print the version")
    return p


# ---------------------------------------------------------------------------
# estimate


def _interval_entries(methods, point, se, boot, which, level) -> list:
    out = []
    for m in methods:
        try:
            if point is None:
                raise EstimationError("estimate undefined")
            if m == "wald":
                ci = ci_wald(point, se, level)
            elif m == "fisher-z":
                ci = ci_fisher_z(point, se, level)
            elif m == "boot-percentile":
                ci = boot.percentile_ci(level, which)
            else:
                ci = boot.se_ci(point, level, which)
            out.append(ci.to_dict())
        except EstimationError as exc:
            out.append({"method": m, "level": level, "lower": None, "upper": None, "error": exc.to_dict()})
    return out


def _size_summary(sizes: np.ndarray) -> dict:
    return {"min": int(sizes.min()), "max": int(sizes.max()), "mean": float(sizes.mean())}


def _target(gamma, se, boot, which, methods, level, extra=None) -> dict:
    d = {"gamma_hat": gamma, "se": {"asymptotic": se}}
    if boot is not None:
        d["se"]["bootstrap"] = boot.se(which)
    d.update(extra or {})
    d["ci"] = _interval_entries(methods, gamma, se, boot, which, level)
    return d


def run_estimate(args) -> dict:
    """Build the estimate report for parsed command-line ``args``."""
    three = args.levels == 3
    if three and not args.subcluster_col:
        raise InvalidSpec("three-level input needs --subcluster-col", "subcluster-col")
    methods = tuple(dict.fromkeys(args.ci or DEFAULT_CIS))
    needs_boot = any(m.startswith("boot") for m in methods)
    mapping = ColumnMapping(
        args.cluster_col, args.value_col, args.subcluster_col if three else None, args.weight_col
    )
    parsed = parse_csv(args.input, mapping, args.singletons)
    data = parsed.data
    tag = args.weights or ("level3" if three else "equal-clusters")
    scheme = WeightScheme(tag, args.tol, args.max_iter)
    if parsed.weights is not None:
        weights = parsed.weights
        if needs_boot or args.bootstrap:
            raise InvalidSpec("bootstrap needs a weighting scheme, not a weight column", "weight-col")
    else:
        weights = make_weights(data, scheme)

    boot_kind = args.bootstrap or ("one-stage" if three else "cluster")
    if (boot_kind == "one-stage") != three:
        raise InvalidSpec(f"bootstrap {boot_kind!r} does not match {args.levels}-level data", "bootstrap")
    boot = None
    if needs_boot or args.bootstrap:
        fn = {"cluster": cluster_bootstrap, "two-stage": two_stage_bootstrap,
              "one-stage": one_stage_bootstrap_3level}[boot_kind]
        boot = fn(data, scheme, args.B, args.seed, workers=env_workers())

    report = {
        "tool": "rankicc",
        "version": __version__,
        "input": str(args.input),
        "levels": args.levels,
        "rows": parsed.rows,
        "n": data.n,
        "N": data.N,
        "dropped_singletons": data.dropped_singletons,
        "seed": args.seed,
        "weights": {
            "scheme": weights.scheme,
            "iterations": weights.iterations,
            "gamma_final": weights.gamma_final,
            "converged": weights.converged,
            "tol": args.tol if scheme.iterative and parsed.weights is None else None,
            "max_iter": args.max_iter if scheme.iterative and parsed.weights is None else None,
        },
    }
    if isinstance(data, ThreeLevelDataset):
        est = rank_icc_three_level(data, weights)
        se2, se3, _ = asymptotic_se_three_level(data, weights, est)
        report["sizes"] = {"level2_units": _size_summary(data.unit_sizes),
                           "level1_units": _size_summary(data.sub_sizes),
                           "n_level2": data.n_sub}
        report["denominator"] = est.denominator
        report["estimates"] = {
            "gamma2": _target(est.gamma2_hat, se2, boot, "gamma", methods, args.level,
                              {"numerator": est.numerator2, "status": est.status2}),
            "gamma3": _target(est.gamma3_hat, se3, boot, "gamma3", methods, args.level,
                              {"numerator": est.numerator3, "status": "OK"}),
        }
    else:
        est = rank_icc(data, weights)
        se, _ = asymptotic_se(data, weights, est)
        report["sizes"] = {"clusters": _size_summary(data.sizes)}
        report["denominator"] = est.denominator
        report["estimates"] = {
            "gamma": _target(est.gamma_hat, se, boot, "gamma", methods, args.level,
                             {"numerator": est.numerator, "status": "OK"}),
        }
    if boot is not None:
        report["bootstrap"] = {
            "scheme": boot.scheme, "B": boot.B, "seed": boot.seed,
            "successful": boot.n_success, "failures": boot.failures,
            "failure_reasons": list(boot.failure_reasons), "warning": boot.warning,
        }
    else:
        report["bootstrap"] = None
    return report


# ---------------------------------------------------------------------------
# simulate

_CELL_KEYS = {
    "scenario", "rho", "rho2", "rho3", "n", "sizes", "sub_sizes", "levels",
    "size_variance", "weights", "methods", "level", "truth",
}
_EXPANDABLE = ("scenario", "rho", "rho2", "rho3", "n", "sizes", "sub_sizes", "levels", "weights")


def _require(cond: bool, message: str, path: str) -> None:
    if not cond:
        raise InvalidSpec(message, path)


def cells_from_config(doc: dict) -> tuple[list, dict]:
    """Expand a study config into :class:`StudyCell` objects.

    List values of ``n``, ``rho``, ``sizes`` and the other scalar fields
    expand to one cell per combination, in the order given.
    """
    _require(isinstance(doc, dict), "config must be a JSON object", "$")
    unknown = set(doc) - {"seed", "sims", "B", "truth_M", "cells", "output"}
    _require(not unknown, f"unknown keys {sorted(unknown)}", "$")
    settings = {
        "seed": doc.get("seed", 0),
        "sims": doc.get("sims", 300),
        "B": doc.get("B", 200),
        "truth_M": doc.get("truth_M", DEFAULT_TRUTH_M),
    }
    for key, value in settings.items():
        _require(isinstance(value, int) and not isinstance(value, bool) and value >= 0,
                 "must be a non-negative integer", key)
    raw_cells = doc.get("cells")
    _require(isinstance(raw_cells, list) and raw_cells, "must be a non-empty list", "cells")
    cells = []
    for i, raw in enumerate(raw_cells):
        base = f"cells[{i}]"
        _require(isinstance(raw, dict), "must be an object", base)
        bad = set(raw) - _CELL_KEYS
        _require(not bad, f"unknown keys {sorted(bad)}", base)
        _require("scenario" in raw, "missing", f"{base}.scenario")
        axes = [(k, raw[k] if isinstance(raw[k], list) else [raw[k]])
                for k in _EXPANDABLE if k in raw]
        for k, vals in axes:
            _require(len(vals) > 0, "empty list", f"{base}.{k}")
        for combo in itertools.product(*(vals for _, vals in axes)):
            fields = dict(zip((k for k, _ in axes), combo))
            weights = fields.pop("weights", "level3" if fields["scenario"] == "three-level" else "equal-clusters")
            try:
                spec = ScenarioSpec(
                    scenario=fields.get("scenario"),
                    rho=float(fields.get("rho", 0.5)),
                    n=int(fields.get("n", 200)),
                    sizes=SizeSpec.parse(fields.get("sizes", 15 if fields["scenario"] == "three-level" else 30)),
                    rho2=None if fields.get("rho2") is None else float(fields["rho2"]),
                    rho3=None if fields.get("rho3") is None else float(fields["rho3"]),
                    sub_sizes=SizeSpec.parse(fields.get("sub_sizes", 2)),
                    levels=int(fields.get("levels", 3)),
                    size_variance=raw.get("size_variance"),
                )
                truth = raw.get("truth")
                if truth is not None:
                    truth = tuple(float(t) for t in (truth if isinstance(truth, list) else [truth]))
                cells.append(StudyCell(spec, weights, tuple(raw.get("methods", DEFAULT_CIS)),
                                       float(raw.get("level", 0.95)), truth))
            except InvalidSpec as exc:
                raise InvalidSpec(str(exc).split(": ", 1)[-1], f"{base}.{exc.path or ''}".rstrip(".")) from None
            except (TypeError, ValueError) as exc:
                raise InvalidSpec(str(exc), base) from None
    return cells, settings


def run_simulate(args) -> tuple:
    try:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidSpec(f"not valid JSON: {exc}", "$") from None
    cells, settings = cells_from_config(doc)
    workers = env_workers() if args.workers is None else max(1, args.workers)
    report = run_study(cells, settings["sims"], settings["B"], settings["seed"], workers, settings["truth_M"])
    prefix = args.output or doc.get("output") or Path(args.config).with_suffix("").as_posix() + "-report"
    Path(prefix + ".csv").write_text(report.to_csv(), encoding="utf-8")
    Path(prefix + ".json").write_text(report.to_json(), encoding="utf-8")
    return report, prefix


# ---------------------------------------------------------------------------


def _fail(exc: RankIccError) -> int:
    sys.stdout.write(dump_json({"error": exc.to_dict()}))
    print(f"rankicc: {exc.code}: {exc}", file=sys.stderr)
    return exc.exit_code


def main(argv: list | None = None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "version":
        print(f"rankicc {__version__}")
        return 0
    try:
        if args.command == "estimate":
            text = dump_json(run_estimate(args))
            if args.output:
                Path(args.output).write_text(text, encoding="utf-8")
            else:
                sys.stdout.write(text)
            return 0
        report, prefix = run_simulate(args)
        print(report.summary())
        print(f"wrote {prefix}.csv and {prefix}.json")
        return 0
    except RankIccError as exc:
        return _fail(exc)
    except FileNotFoundError as exc:
        return _fail(InvalidSpec(f"file not found: {exc.filename}", "input"))


if __name__ == "__main__":
    sys.exit(main())
