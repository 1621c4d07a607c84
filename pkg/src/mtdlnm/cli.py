"""Command-line interface: ``mtdlnm fit | simulate | summarize``.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import logging
import math
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .core import ModelConfig, ModelError, RankDeficiencyError, build_lagged_design
from .inference import (gelman_rubin, percent_change_summary, summarize_surface, susceptibility)
from .mcmc import NumericalError, selection_prior_arrays, run_chains
from .simstudy import (Scenario, aggregate_metrics, fit_replicate, scenario_config,
                       synthetic_exposure_library)

log = logging.getLogger("mtdlnm")

SURFACE_SCHEMA = "# schema: mtdlnm.surface/1"
SUSCEPT_SCHEMA = "# schema: mtdlnm.susceptibility/1"
DRAWS_SCHEMA = "# schema: mtdlnm.draws/1"
LAGDRAWS_SCHEMA = "# schema: mtdlnm.lag-draws/1"
TABLE_SCHEMA = "# schema: mtdlnm.sim-table/1"
REPLICATE_SCHEMA = "# schema: mtdlnm.sim-replicates/1"
RHAT_WARN = 1.1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, schema: str, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(schema + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _read_csv(path: Path):
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    return reader.fieldnames or [], list(reader)


def _digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def parse_grid(text: str | None, integer=False):
    """``"3:30"`` (inclusive range, step 1), ``"3:30:0.5"`` or a comma list."""
    if text is None:
        return None
    text = text.strip()
    try:
        if ":" in text:
            parts = [float(p) for p in text.split(":")]
            lo, hi = parts[0], parts[1]
            step = parts[2] if len(parts) > 2 else 1.0
            if step <= 0 or hi < lo:
                raise ValueError
            vals = list(np.arange(lo, hi + step / 2, step))
        else:
            vals = [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise UsageError(f"cannot parse grid {text!r}") from None
    if integer:
        return [int(round(v)) for v in vals]
    return [float(v) for v in vals]


def load_config(path: str | None, overrides: dict) -> ModelConfig:
    values = {}
    if path:
        try:
            values = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ModelError(f"config file is not valid JSON: {e}") from None
        if not isinstance(values, dict):
            raise ModelError("config file must hold a flat key-value object")
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ModelConfig.from_dict(values)


def _parse_float(s: str, col: str, row: int) -> float:
    s = s.strip()
    if s == "" or s.upper() in ("NA", "NAN"):
        return math.nan
    try:
        v = float(s)
    except ValueError:
        raise ModelError(f"row {row}: column {col!r} is not numeric ({s!r})") from None
    if math.isinf(v):
        raise ModelError(f"row {row}: column {col!r} is not finite")
    return v


def calendar_covariates(times) -> tuple[np.ndarray, list[str]]:
    """Month, year and day-of-week indicator columns (first level of each dropped)."""
    try:
        dates = [dt.date.fromisoformat(str(t).strip()) for t in times]
    except ValueError:
        raise ModelError("--calendar-covariates needs ISO dates (YYYY-MM-DD) in the time column") from None
    cols, names = [], []
    for label, key in (("month", lambda d: d.month), ("year", lambda d: d.year),
                       ("dow", lambda d: d.weekday())):
        levels = sorted({key(d) for d in dates})
        for lev in levels[1:]:
            cols.append([1.0 if key(d) == lev else 0.0 for d in dates])
            names.append(f"{label}_{lev}")
    if not cols:
        return np.empty((len(dates), 0)), []
    return np.array(cols).T, names


def read_dataset(path: str, args, family: str):
    fields, rows = _read_csv(Path(path))
    for col in (args.time_col, args.outcome_col, args.exposure_col):
        if col not in fields:
            raise ModelError(f"data file lacks required column {col!r}")
    if not rows:
        raise ModelError("data file has no rows")
    trials_col = args.trials_col if args.trials_col in fields else None
    if family == "binomial" and trials_col is None:
        raise ModelError(f"binomial family needs a {args.trials_col!r} column")
    skip = {args.time_col, args.outcome_col, args.exposure_col, trials_col}
    cov_names = [c for c in fields if c not in skip]
    times = [r[args.time_col] for r in rows]
    y = np.array([_parse_float(r[args.outcome_col], args.outcome_col, i) for i, r in enumerate(rows, 1)])
    x = np.array([_parse_float(r[args.exposure_col], args.exposure_col, i) for i, r in enumerate(rows, 1)])
    if args.negate_exposure:
        x = -x
    Z = [np.ones(len(rows))]
    names = ["intercept"]
    for c in cov_names:
        Z.append(np.array([_parse_float(r[c], c, i) for i, r in enumerate(rows, 1)]))
        names.append(c)
    Z = np.column_stack(Z)
    if args.calendar_covariates:
        C, cn = calendar_covariates(times)
        Z = np.hstack([Z, C])
        names += cn
    trials = None
    if trials_col:
        trials = np.array([_parse_float(r[trials_col], trials_col, i) for i, r in enumerate(rows, 1)])
    data = build_lagged_design(x, y, Z, args.lags, trials, np.array(times))
    return data, names


def _config_overrides(args) -> dict:
    out = {
        "seed": args.seed, "chains": args.chains, "iterations": args.iterations,
        "burn_in": args.burn_in, "thinning": args.thin,
        "outcome_family": args.family,
        "grid_x": parse_grid(args.grid_x), "grid_l": parse_grid(args.grid_l, integer=True),
    }
    return out


def _manifest(args, config: ModelConfig, inputs: dict, extra=None) -> dict:
    L = getattr(args, "lags", None)
    m = {
        "library_version": __version__,
        "kernel_backend": kernels.BACKEND,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "command": sys.argv[1:] if args.argv is None else args.argv,
        "started": args.started,
        "finished": dt.datetime.now(dt.timezone.utc).isoformat(),
        "config": config.to_dict(),
        "chain_seeds": [[config.seed, c] for c in range(config.chains)],
        "inputs": inputs,
    }
    if L is not None:
        mean, var = selection_prior_arrays(config, L)
        m["selection_prior"] = {"mean": mean.tolist(), "var": var.tolist()}
        if config.dirichlet_weights is not None:
            d = np.asarray(config.dirichlet_weights, dtype=float)
            m["dirichlet_weights"] = (d / d.sum()).tolist()
    if extra:
        m.update(extra)
    return m


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n",
                    encoding="utf-8")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def write_summaries(out: Path, summary, profile):
    rows = [(summary.grid_x[i], int(summary.grid_l[j]), summary.mean[i, j],
             summary.lower[i, j], summary.upper[i, j])
            for i in range(len(summary.grid_x)) for j in range(len(summary.grid_l))]
    _write_csv(out / "surface.csv", SURFACE_SCHEMA, ["x", "l", "mean", "lower", "upper"], rows)
    decl = set(int(l) for l in profile.declared)
    _write_csv(out / "susceptibility.csv", SUSCEPT_SCHEMA, ["l", "probability", "declared"],
               [(l, p, int(l in decl)) for l, p in enumerate(profile.probability)])


def write_draws(out: Path, results):
    rows, lag_rows = [], []
    for r in results:
        for d in r.draws:
            for i, x in enumerate(r.grid_x):
                for j, l in enumerate(r.grid_l):
                    rows.append((r.chain_id, d.iteration, float(x), int(l), d.surface[i, j]))
            for l, e in enumerate(d.effect_lags):
                lag_rows.append((r.chain_id, d.iteration, l, int(e)))
    _write_csv(out / "draws.csv", DRAWS_SCHEMA, ["chain", "iteration", "x", "l", "value"], rows)
    _write_csv(out / "lag_draws.csv", LAGDRAWS_SCHEMA, ["chain", "iteration", "l", "indicator"], lag_rows)


def cmd_fit(args) -> int:
    config = load_config(args.config, _config_overrides(args))
    data, cov_names = read_dataset(args.data, args, config.outcome_family)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = run_chains(data, config, threads=args.threads)
    draws = [d for r in results for d in r.draws]
    if len(draws) < 2:
        raise ModelError("fewer than two retained draws; increase iterations or lower thinning")
    gx, gl = results[0].grid_x, results[0].grid_l
    summary = summarize_surface(draws, args.level, args.widen, one_sided=args.one_sided,
                                grid_x=gx, grid_l=gl)
    if args.percent_change:
        summary = percent_change_summary(summary)
    profile = susceptibility(draws, args.threshold)
    write_summaries(out, summary, profile)
    if args.save_draws:
        write_draws(out, results)
    rhat = None
    if len(results) > 1 and len(results[0].draws) >= 10:
        rhat = gelman_rubin([r.draws for r in results])[0]
        if rhat > RHAT_WARN:
            log.warning("median R-hat %.3f exceeds %.1f; chains may not have converged", rhat, RHAT_WARN)
    diag = {
        "median_rhat": rhat,
        "n_rows": data.n,
        "covariates": cov_names,
        "chains": [{
            "chain": r.chain_id, "acceptance": r.acceptance, "seconds": r.seconds,
            "retained_draws": len(r.draws), "monotone_violations": r.monotone_violations,
            "traces": r.traces,
        } for r in results],
    }
    _write_json(out / "diagnostics.json", diag)
    inputs = {"data": {"path": str(args.data), "sha256": _digest(args.data)}}
    if args.config:
        inputs["config"] = {"path": str(args.config), "sha256": _digest(args.config)}
    _write_json(out / "manifest.json", _manifest(args, config, inputs, {
        "negate_exposure": args.negate_exposure, "calendar_covariates": args.calendar_covariates,
        "lags": args.lags, "level": args.level, "widen": args.widen, "threshold": args.threshold,
        "percent_change": args.percent_change,
    }))
    return 0


def cmd_simulate(args) -> int:
    base = load_config(args.config, _config_overrides(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    library = synthetic_exposure_library()
    table, rep_rows = [], []
    for fx in args.fx:
        for fl in args.fl:
            for nf in args.noise:
                sc = Scenario(fx, fl, nf, args.n, args.lags, base.seed)
                cfg = scenario_config(sc, base, informative=args.informative)
                reports = []
                for r in range(args.replicates):
                    sc_r = Scenario(fx, fl, nf, args.n, args.lags, base.seed + r)
                    rep, _ = fit_replicate(sc_r, cfg.replace(seed=sc_r.seed), library,
                                           threads=args.threads, widen=args.widen,
                                           threshold=args.threshold)
                    reports.append(rep)
                    row = rep.row()
                    rep_rows.append((sc.label, r, sc_r.seed, row["rmse"], row["coverage"],
                                     row["ci_width"], row["precision"], int(row["precision_vacuous"]),
                                     row["declared_lags"], row["median_rhat"]))
                agg = aggregate_metrics(reports)
                table.append((sc.label, fx, fl, nf, agg.replicates, agg.rmse, agg.coverage,
                              agg.ci_width, agg.precision, int(agg.precision_vacuous), agg.median_rhat))
    _write_csv(out / "table.csv", TABLE_SCHEMA,
               ["scenario", "fx", "fl", "noise_factor", "replicates", "rmse", "coverage",
                "ci_width", "precision", "precision_vacuous", "max_median_rhat"], table)
    _write_csv(out / "replicates.csv", REPLICATE_SCHEMA,
               ["scenario", "replicate", "seed", "rmse", "coverage", "ci_width", "precision",
                "precision_vacuous", "declared_lags", "median_rhat"], rep_rows)
    inform_cfg = scenario_config(Scenario(args.fx[0], args.fl[0], args.noise[0], args.n, args.lags),
                                 base, informative=args.informative)
    _write_json(out / "manifest.json", _manifest(args, inform_cfg, {"exposure_library": "synthetic"}, {
        "informative": args.informative, "replicates": args.replicates, "n": args.n,
        "widen": args.widen, "threshold": args.threshold,
    }))
    return 0


def _load_draws(draw_dir: Path):
    if not (draw_dir / "draws.csv").exists() or not (draw_dir / "lag_draws.csv").exists():
        raise ModelError(f"no stored draws in {draw_dir} (fit with --save-draws)")
    _, rows = _read_csv(draw_dir / "draws.csv")
    xs = sorted({float(r["x"]) for r in rows})
    ls = sorted({int(r["l"]) for r in rows})
    xi = {x: i for i, x in enumerate(xs)}
    li = {l: j for j, l in enumerate(ls)}
    surf = {}
    for r in rows:
        key = (int(r["chain"]), int(r["iteration"]))
        if key not in surf:
            surf[key] = np.full((len(xs), len(ls)), np.nan)
        surf[key][xi[float(r["x"])], li[int(r["l"])]] = float(r["value"])
    _, lrows = _read_csv(draw_dir / "lag_draws.csv")
    L = max(int(r["l"]) for r in lrows)
    lags = {}
    for r in lrows:
        key = (int(r["chain"]), int(r["iteration"]))
        lags.setdefault(key, np.zeros(L + 1, dtype=bool))[int(r["l"])] = r["indicator"] == "1"
    keys = sorted(surf)
    return np.array(xs), np.array(ls), keys, [surf[k] for k in keys], [lags[k] for k in keys]


def cmd_summarize(args) -> int:
    src = Path(args.draws)
    out = Path(args.out) if args.out else src
    out.mkdir(parents=True, exist_ok=True)
    gx, gl, keys, surfaces, lags = _load_draws(src)
    summary = summarize_surface(surfaces, args.level, args.widen, one_sided=args.one_sided,
                                grid_x=gx, grid_l=gl)
    if args.percent_change:
        summary = percent_change_summary(summary)
    profile = susceptibility(lags, args.threshold)
    write_summaries(out, summary, profile)
    return 0


def _add_common(p):
    p.add_argument("--config", help="JSON file of model settings (ModelConfig field names)")
    p.add_argument("--seed", type=int)
    p.add_argument("--chains", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--burn-in", type=int, dest="burn_in")
    p.add_argument("--thin", type=int)
    p.add_argument("--family", choices=["gaussian", "binomial"])
    p.add_argument("--grid-x", help='exposure grid, "lo:hi[:step]" or comma list')
    p.add_argument("--grid-l", help='lag grid, "lo:hi" or comma list')
    p.add_argument("--threads", type=int, default=1, help="worker processes for chains")
    p.add_argument("--lags", type=int, default=20, help="maximum lag L")


def _add_summary_opts(p, widen_default=0.0):
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--widen", type=float, default=widen_default)
    p.add_argument("--threshold", type=float, default=0.95)
    p.add_argument("--one-sided", action="store_true", help="upper one-sided intervals")
    p.add_argument("--percent-change", action="store_true",
                   help="report 100 (exp(w) - 1) for log-rate outcomes")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mtdlnm", description="Monotone treed distributed lag models.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="fit the model to a CSV time series")
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    _add_common(f)
    _add_summary_opts(f)
    f.add_argument("--time-col", default="time")
    f.add_argument("--outcome-col", default="outcome")
    f.add_argument("--exposure-col", default="exposure")
    f.add_argument("--trials-col", default="trials")
    f.add_argument("--negate-exposure", action="store_true",
                   help="flip the exposure sign (cold-season analyses)")
    f.add_argument("--calendar-covariates", action="store_true",
                   help="add month, year and day-of-week indicators from ISO dates")
    f.add_argument("--save-draws", action="store_true")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="run the simulation study")
    s.add_argument("--out", required=True)
    _add_common(s)
    s.add_argument("--fx", nargs="+", default=["linear"], choices=["linear", "sublinear", "exponential"])
    s.add_argument("--fl", nargs="+", default=["piecewise"], choices=["piecewise", "linear", "quadratic"])
    s.add_argument("--noise", nargs="+", type=float, default=[2.0])
    s.add_argument("--replicates", type=int, default=10)
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--informative", action="store_true")
    s.add_argument("--widen", type=float, default=0.05)
    s.add_argument("--threshold", type=float, default=0.95)
    s.set_defaults(func=cmd_simulate)

    m = sub.add_parser("summarize", help="re-summarize stored draws")
    m.add_argument("--draws", required=True, help="directory written by fit --save-draws")
    m.add_argument("--out")
    _add_summary_opts(m)
    m.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"mtdlnm: error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.argv = None if argv is None else list(argv)
    args.started = dt.datetime.now(dt.timezone.utc).isoformat()
    try:
        return args.func(args)
    except RankDeficiencyError as e:
        print(f"mtdlnm: error: {e}", file=sys.stderr)
        return 1
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"mtdlnm: numerical failure: {e}", file=sys.stderr)
        return 2
    except (ModelError, UsageError, ValueError, OSError) as e:
        print(f"mtdlnm: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
