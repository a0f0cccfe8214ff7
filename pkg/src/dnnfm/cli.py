"""``dnnfm`` command line: simulate, fit and backtest.

Exit codes: 0 ok, 2 usage or validation, 3 I/O, 4 data consistency,
5 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .factor_model import DataError, EstimationError, build_bundle, fit_model, residuals
from .files import (
    check_aligned,
    file_sha256,
    model_to_dict,
    provenance,
    read_panel,
    write_bundle,
    write_frame,
    write_json,
    write_matrix,
)
from .metrics import NumericError
from .portfolio import BacktestConfig, BacktestError, UniverseError, rolling_backtest
from .portfolio import EstimationError as PortfolioEstimationError
from .simulation import (
    DIAGNOSTIC_COLUMNS,
    METHODS,
    DesignConfig,
    diagnostics_table,
    run_study,
    simulate,
)
from .trainer import ConfigError, TrainConfig, TrainingError

log = logging.getLogger("dnnfm")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4, 5

# flags that never influence results and stay out of the config hash
_VOLATILE = {"out", "config", "threads", "verbose", "func", "command"}
_TRAIN_KEYS = ("max_epochs", "batch_size", "learning_rate", "patience", "widths", "dropout_rate",
               "l1_lambda_grid", "val_fraction")


class UsageError(ValueError):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _str_list(text: str) -> list[str]:
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _threads(text: str) -> int:
    if text == "auto":
        return os.cpu_count() or 1
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("threads must be positive")
    return n


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--config", type=Path, help="JSON file with flat keys mirroring the flags")
    p.add_argument("--threads", type=_threads, default="auto")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_train(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("network training")
    g.add_argument("--max-epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--learning-rate", type=float)
    g.add_argument("--patience", type=int)
    g.add_argument("--widths", type=_int_list, help="hidden widths, e.g. 16,16")
    g.add_argument("--dropout-rate", type=float, help="sparse mode only")
    g.add_argument("--l1-lambda-grid", type=_float_list, help="sparse mode only")
    g.add_argument("--val-fraction", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dnnfm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dnnfm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Monte Carlo designs, diagnostics and method study")
    p.add_argument("--design", type=int, required=True, choices=(1, 2, 3))
    p.add_argument("--n", type=_int_list, default=[120])
    p.add_argument("--j", type=_int_list, default=[50])
    p.add_argument("--d", type=_int_list, default=[1])
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--with-methods", action="store_true", help="also fit methods and write study.csv")
    p.add_argument("--methods", type=_str_list, default=list(METHODS))
    _add_common(p)
    _add_train(p)
    p.set_defaults(func=run_simulate)

    p = sub.add_parser("fit", help="fit a factor model and export the covariance bundle")
    p.add_argument("--returns", type=Path, required=True)
    p.add_argument("--factors", type=Path, required=True)
    p.add_argument("--model", choices=("dnn", "sdnn", "linear"), required=True)
    p.add_argument("--omega-constant", type=float, default=3.0)
    p.add_argument("--eig-floor", type=float)
    _add_common(p)
    _add_train(p)
    p.set_defaults(func=run_fit)

    p = sub.add_parser("backtest", help="rolling-window GMVP backtest")
    p.add_argument("--returns", type=Path, required=True)
    p.add_argument("--factors", type=Path, required=True)
    p.add_argument("--ranks", type=Path, help="CSV of liquidity ranks (date + one column per asset)")
    p.add_argument("--estimators", type=_str_list, default=["linear", "equal_weight"])
    p.add_argument("--sizes", type=_int_list, default=[50])
    p.add_argument("--window", type=int, default=120)
    p.add_argument("--tc-bps", type=float, default=50.0)
    p.add_argument("--periods-per-year", type=int, default=12)
    p.add_argument("--refit-every", type=int, default=1)
    _add_common(p)
    _add_train(p)
    p.set_defaults(func=run_backtest)
    return parser


def _config_dict(args) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v)
            for k, v in sorted(vars(args).items()) if k not in _VOLATILE}


def _train_overrides(args) -> dict:
    return {k: getattr(args, k) for k in _TRAIN_KEYS if getattr(args, k, None) is not None}


def _safe_name(text: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in str(text))


def _finish(out: Path, args, prov: dict, files: list[str], extra: dict | None = None) -> None:
    manifest = {
        "command": args.command,
        "config": _config_dict(args),
        "provenance": prov,
        "outputs": {f: file_sha256(out / f) for f in sorted(files)},
    }
    if extra:
        manifest.update(extra)
    write_json(out / "manifest.json", manifest)


def run_simulate(args) -> int:
    if args.design not in (1, 2, 3):
        raise UsageError(f"design must be 1, 2 or 3, got {args.design}")
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    prov = provenance(args.seed, _config_dict(args))
    files = []

    cells = [(J, d) for J in args.j for d in args.d]
    rows, by_rep = [], []
    for J, d in cells:
        # the true covariances do not depend on n, so the first n is used
        cfg = DesignConfig(args.design, args.n[0], J, d, reps=args.reps, seed=args.seed)
        per_rep = diagnostics_table(cfg)
        per_rep.insert(0, "rep", range(args.reps))
        per_rep.insert(0, "d", d)
        per_rep.insert(0, "J", J)
        by_rep.append(per_rep)
        means = per_rep.mean(numeric_only=True)
        rows.append({"d": d, "J": J, **{k: means[k] for k in DIAGNOSTIC_COLUMNS[2:]}})
    write_frame(out / "diagnostics.csv", pd.DataFrame(rows, columns=list(DIAGNOSTIC_COLUMNS)), prov)
    write_frame(out / "diagnostics_by_rep.csv", pd.concat(by_rep, ignore_index=True), prov)
    files += ["diagnostics.csv", "diagnostics_by_rep.csv"]

    if len(args.n) == len(args.j) == len(args.d) == 1:
        panel = simulate(DesignConfig(args.design, args.n[0], args.j[0], args.d[0], args.reps, args.seed), 0)
        ids = [f"y{j + 1}" for j in range(args.j[0])]
        dates = list(range(1, args.n[0] + 1))
        write_frame(out / "Y.csv", pd.DataFrame(panel.Y, columns=ids).assign(date=dates)[["date", *ids]], prov)
        xcols = [f"x{m + 1}" for m in range(args.d[0])]
        write_frame(out / "X.csv", pd.DataFrame(panel.X, columns=xcols).assign(date=dates)[["date", *xcols]], prov)
        write_matrix(out / "sigma_f_true.csv", panel.sigma_f_true, ids, prov)
        write_matrix(out / "sigma_u_true.csv", panel.sigma_u_true, ids, prov)
        files += ["Y.csv", "X.csv", "sigma_f_true.csv", "sigma_u_true.csv"]

    if args.with_methods:
        unknown = [m for m in args.methods if m not in METHODS]
        if unknown:
            raise UsageError(f"unknown methods {unknown}")
        grid = [DesignConfig(args.design, n, J, d, args.reps, args.seed)
                for n in args.n for J in args.j for d in args.d]
        table, records = run_study(grid, args.methods, train_overrides=_train_overrides(args),
                                   threads=args.threads)
        write_frame(out / "study.csv", table, prov)
        write_frame(out / "study_by_rep.csv", records, prov)
        files += ["study.csv", "study_by_rep.csv"]

    _finish(out, args, prov, files)
    return EXIT_OK


def run_fit(args) -> int:
    returns = read_panel(args.returns)
    factors = read_panel(args.factors)
    check_aligned(returns, factors)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    prov = provenance(args.seed, _config_dict(args))

    cfg = None
    if args.model != "linear":
        mode = "dense" if args.model == "dnn" else "sparse"
        cfg = TrainConfig.for_mode(mode, seed=args.seed, **_train_overrides(args))
    ids = list(returns.columns)
    model = fit_model(returns.to_numpy(), factors.to_numpy(), args.model, cfg, ids)
    bundle = build_bundle(model, returns.to_numpy(), factors.to_numpy(),
                          omega_constant=args.omega_constant, eig_floor=args.eig_floor)

    payload = model_to_dict(model)
    write_json(out / "models.json", {**payload, "provenance": prov})
    (out / "models").mkdir(exist_ok=True)
    model_files = []
    for entry in payload["models"]:
        name = f"models/{_safe_name(entry['asset_id'])}.json"
        write_json(out / name, {"mode": payload["mode"], "factor_dim": payload["factor_dim"],
                                **entry, "provenance": prov})
        model_files.append(name)
    resid = pd.DataFrame(residuals(model, returns.to_numpy(), factors.to_numpy()), columns=ids)
    resid.insert(0, "date", list(returns.index))
    write_frame(out / "residuals.csv", resid, prov)
    sidecar = write_bundle(out, bundle, ids, prov)

    files = ["models.json", "residuals.csv", "bundle.json", *model_files] + [f"{m}.csv" for m in (
        "sigma_f", "sigma_u_raw", "theta", "sigma_u_th", "sigma_y", "precision_u", "precision_y")]
    extra = {
        "omega_n": bundle.omega_n,
        "s_n": bundle.s_n,
        "eig_floor_events": [{"eig_floor": bundle.eig_floor, "shift": bundle.eig_shift}]
        if bundle.eig_floor_applied else [],
        "bundle": {k: v for k, v in sidecar.items() if k != "provenance"},
    }
    if model.fit_results:
        extra["training"] = [
            {"asset_id": a, "stopped_epoch": r.stopped_epoch, "chosen_lambda": r.chosen_lambda,
             "best_val_mse": r.best_val}
            for a, r in zip(ids, model.fit_results)
        ]
    _finish(out, args, prov, files, extra)
    return EXIT_OK


def run_backtest(args) -> int:
    returns = read_panel(args.returns)
    factors = read_panel(args.factors)
    check_aligned(returns, factors)
    ranks = None
    if args.ranks is not None:
        ranks = read_panel(args.ranks)
        check_aligned(returns, ranks)
        ranks = ranks[list(returns.columns)]
    n = len(returns)
    if args.window >= n - 1:
        raise UsageError(f"window {args.window} must be smaller than n - 1 = {n - 1}")
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    prov = provenance(args.seed, _config_dict(args))
    overrides = _train_overrides(args)

    files, summaries = [], []
    for est in args.estimators:
        for size in args.sizes:
            cfg = BacktestConfig(window=args.window, universe_sizes=(size,), tc_rate=args.tc_bps / 1e4,
                                 estimator=est, periods_per_year=args.periods_per_year, seed=args.seed,
                                 refit_every=args.refit_every, train_overrides=overrides)
            report = rolling_backtest(returns, factors.to_numpy(), cfg, J=size, ranks=ranks)
            stem = f"{est}_J{size}"
            write_json(out / f"report_{stem}.json", {**report.summary(), "provenance": prov})
            write_frame(out / f"series_{stem}.csv", report.series_frame(), prov)
            files += [f"report_{stem}.json", f"series_{stem}.csv"]
            summaries.append(report.summary())

    rows = []
    for size in args.sizes:
        for metric in ("SD", "AV", "SR", "PT", "SD_net", "AV_net", "SR_net"):
            row = {"J": size, "metric": metric}
            for s in summaries:
                if s["J"] == size:
                    row[s["estimator"]] = s[metric]
            rows.append(row)
    write_frame(out / "summary.csv", pd.DataFrame(rows), prov)
    files.append("summary.csv")
    _finish(out, args, prov, files)
    return EXIT_OK


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in ("simulate", "fit", "backtest")), None)
    if known.config is None or command is None:
        return parser.parse_args(argv)
    if not known.config.is_file():
        raise FileNotFoundError(f"no such config file: {known.config}")
    values = json.loads(known.config.read_text())
    if not isinstance(values, dict):
        raise UsageError("config file must hold a JSON object")
    values = {k.replace("-", "_"): v for k, v in values.items()}
    sub = parser._subparsers._group_actions[0].choices[command]
    actions = {a.dest: a for a in sub._actions}
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise UsageError(f"unknown config keys: {unknown}")
    for k, v in values.items():
        actions[k].required = False
        # string values go through the flag's type converter, lists pass as-is
        actions[k].default = v
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FileNotFoundError, PermissionError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (EstimationError, PortfolioEstimationError, TrainingError, NumericError,
            BacktestError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, UniverseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
