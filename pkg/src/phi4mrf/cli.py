"""Command-line interface.

Exit codes: 0 success, 1 internal failure, 2 usage or input error,
3 numerical divergence during training.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from ._io import build_configs, config_record, header_line, load_config, read_csv_rows, write_csv
from .data import CsvSchema, DataError, ReturnPanel, ingest_csv, log_returns, merge_tables, read_panel, write_panel
from .forecast import (
    FORECAST_SAMPLER,
    FORECAST_TRAIN,
    IMPUTE_SAMPLER,
    impute,
    mae_ignoring_missing,
    next_day_forecast,
    rescaled_mean_baseline,
    rolling_linreg_baseline,
)
from .model import load_checkpoint, save_checkpoint
from .sampler import SamplerConfig, sample_chains
from .scaling import scaling_run
from .stats import KURTOSIS_CONVENTION, comparison_table, phi4_panel
from .trainer import DivergenceError, TrainConfig, estimate_model_moments, moment_residuals, train

log = logging.getLogger("phi4mrf")

EXIT_INTERNAL, EXIT_USAGE, EXIT_DIVERGED = 1, 2, 3

# options that never influence results (paths are covered by the input checksum)
_NOT_RECORDED = {"func", "threads", "out", "summary", "history", "panel", "config", "checkpoint", "input", "forecast_csv", "verbose"}

STATS_SAMPLER = SamplerConfig(sweeps_burn_in=1000, sweeps_between_samples=5, n_samples=0)


class UsageError(Exception):
    pass


def _options(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_RECORDED}


def _header(args, inputs) -> str:
    return header_line(args.command, getattr(args, "seed", None), _options(args), inputs)


def _threads(args) -> int:
    return args.threads if args.threads and args.threads > 0 else (os.cpu_count() or 1)


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _train_overrides(args) -> dict:
    return {
        "epochs": args.epochs,
        "learning_rate": args.learning_rate,
        "chains": args.chains,
        "seed": args.seed,
    }


def _configs(args, base_train: TrainConfig, base_sampler: SamplerConfig):
    try:
        train_cfg, sampler_cfg = build_configs(load_config(args.config), base_train, base_sampler, _train_overrides(args))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from exc
    return replace(train_cfg, threads=_threads(args)), sampler_cfg


def _history_path(out: str) -> Path:
    p = Path(out)
    return p.with_name(p.stem + ".history.csv")


def _summary_path(out: str, suffix: str) -> Path:
    p = Path(out)
    return p.with_name(p.stem + suffix)


def _require(path, what: str) -> None:
    if path is None or not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")


def cmd_ingest(args) -> int:
    for p in args.input:
        _require(p, "input")
    schema = CsvSchema(args.date_col, args.ticker_col, args.close_col)
    table = merge_tables(ingest_csv(p, schema, args.format) for p in args.input)
    panel = log_returns(table)
    with open(args.out, "w", newline="") as fh:
        write_panel(panel, fh, _header(args, args.input))
    print(f"panel: {len(panel.tickers)} tickers x {len(panel)} days -> {args.out}")
    return 0


def _load_panel(args) -> ReturnPanel:
    _require(args.panel, "panel")
    panel = read_panel(args.panel)
    if getattr(args, "tickers", None):
        missing = [t for t in args.tickers if t not in panel.tickers]
        if missing:
            raise UsageError(f"tickers not in panel: {missing}")
        panel = panel.select(args.tickers)
    return panel


def _train_metadata(args, cfg: TrainConfig, panel: ReturnPanel, scale, inputs) -> dict:
    return {
        "config": config_record(cfg),
        "standardize_scale": [float(s) for s in scale],
        "data_std": [float(s) for s in panel.returns.std(axis=0)],
        "n_days": len(panel),
        "first_date": panel.dates[0].isoformat(),
        "last_date": panel.dates[-1].isoformat(),
    }


HISTORY_COLUMNS = ["epoch", "resid_phi", "resid_pair", "resid_sq", "resid_quart", "acceptance"]


def cmd_train(args) -> int:
    panel = _load_panel(args)
    cfg, _ = _configs(args, TrainConfig(), SamplerConfig())
    inputs = [args.panel, args.config]
    try:
        result = train(panel.returns, cfg, panel.tickers)
    except DivergenceError as exc:
        print(f"training diverged at epoch {exc.epoch}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(result.theta, args.out, _train_metadata(args, cfg, panel, result.scale, inputs), _header(args, inputs))
    history = args.history or _history_path(args.out)
    write_csv(history, _header(args, inputs), HISTORY_COLUMNS, ([row[c] for c in HISTORY_COLUMNS] for row in result.history))
    last = result.history[-1]
    print("final moment residuals: " + " ".join(f"{k}={last['resid_' + k]:.4g}" for k in ("phi", "pair", "sq", "quart")))
    if args.check_moments:
        est, _ = estimate_model_moments(
            result.theta, SamplerConfig(sweeps_burn_in=500, sweeps_between_samples=2, n_samples=args.check_moments),
            chains=4, seed=args.seed, threads=_threads(args),
        )
        from .trainer import data_moments

        res = moment_residuals(data_moments(panel.returns), est)
        print("long-run MCMC residuals: " + " ".join(f"{k}={v:.4g}" for k, v in res.items()))
    return 0


def cmd_sample(args) -> int:
    _require(args.checkpoint, "checkpoint")
    theta, _ = load_checkpoint(args.checkpoint)
    cfg = SamplerConfig(
        proposal_width=args.proposal_width,
        sweeps_burn_in=args.burn_in,
        sweeps_between_samples=args.thin,
        n_samples=args.n_samples,
    )
    runs = sample_chains(theta, cfg, args.n_chains, seed=args.seed, threads=_threads(args))
    cols = list(theta.tickers) or [f"site{k}" for k in range(theta.volume)]
    rows = (list(r) for run in runs for r in run)
    write_csv(args.out, _header(args, [args.checkpoint]), cols, ([float(v) for v in r] for r in rows))
    return 0


def cmd_stats(args) -> int:
    panel = _load_panel(args)
    inputs = [args.panel, args.checkpoint, args.config]
    theta = None
    if args.checkpoint:
        _require(args.checkpoint, "checkpoint")
        theta, _ = load_checkpoint(args.checkpoint)
        if theta.tickers and tuple(theta.tickers) != panel.tickers:
            raise UsageError("checkpoint tickers differ from panel tickers")
    cfg, post = _configs(args, TrainConfig(), STATS_SAMPLER)
    synthetic = None
    if not args.no_phi4:
        try:
            synthetic = phi4_panel(
                panel, theta, cfg, post, seed=args.seed, refit_every=args.refit_every,
                fit_window=args.window, threads=_threads(args),
            )
        except DivergenceError as exc:
            print(f"training diverged at epoch {exc.epoch}: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
    rows = comparison_table(panel, synthetic, args.window, args.pooled, binarized=args.binarize)
    header = _header(args, inputs) + f" kurtosis={KURTOSIS_CONVENTION}"
    write_csv(args.out, header, ["date", "market_mean_sma", "market_kurtosis", "source_label"], rows)
    return 0


def cmd_scaling(args) -> int:
    panel = _load_panel(args)
    cfg, _ = _configs(args, TrainConfig(), SamplerConfig())
    inputs = [args.panel, args.config]
    result = scaling_run(panel, args.volumes, cfg, args.subset_rule, args.draws, args.seed)
    header = _header(args, inputs)
    write_csv(args.out, header, ["V", "mean_w", "mean_a"], result.rows)
    fits = []
    for family, fit in (("weights", result.weights), ("biases", result.biases)):
        if fit is not None:
            fits.append((family, fit.exponent, fit.stderr_k, fit.r_squared, fit.sign, fit.prefactor, len(fit.points)))
    summary = args.summary or _summary_path(args.out, ".fit.csv")
    write_csv(summary, header, ["family", "k", "stderr_k", "r_squared", "sign", "prefactor", "n_points"], fits)
    if result.error:
        print(f"scaling stopped early: {result.error}", file=sys.stderr)
        return EXIT_DIVERGED
    return 0


def cmd_impute(args) -> int:
    _require(args.checkpoint, "checkpoint")
    theta, meta = load_checkpoint(args.checkpoint)
    panel = _load_panel(args)
    if args.target not in theta.tickers:
        raise UsageError(f"target {args.target!r} is not a modelled ticker")
    missing = [t for t in theta.tickers if t not in panel.tickers]
    if missing:
        raise UsageError(f"panel lacks modelled tickers: {missing}")
    panel = panel.select(theta.tickers)
    _, post = _configs(args, TrainConfig(), IMPUTE_SAMPLER)
    if "data_std" not in meta:
        raise UsageError("checkpoint lacks data_std metadata needed by the baseline")
    sigma = dict(zip(theta.tickers, meta["data_std"]))
    t = theta.tickers.index(args.target)
    others = [k for k in range(theta.volume) if k != t]
    start = max(0, len(panel) - args.count) if args.count else 0
    rows = []
    for d in range(start, len(panel)):
        day = panel.returns[d]
        summ = impute(theta, t, day, post, seed=np.random.SeedSequence([args.seed, d]))
        base = rescaled_mean_baseline(day[others], [sigma[theta.tickers[k]] for k in others], sigma[args.target])
        rows.append((panel.dates[d], float(day[t]), float(summ.mean[0]), float(summ.q05[0]), float(summ.q50[0]), float(summ.q95[0]), base))
    inputs = [args.checkpoint, args.panel, args.config]
    header = _header(args, inputs)
    write_csv(args.out, header, FORECAST_COLUMNS, rows)
    _write_mae_summary(args, header, rows, "rescaled_mean")
    return 0


FORECAST_COLUMNS = ["date", "truth", "phi4_mean", "phi4_q05", "phi4_q50", "phi4_q95", "baseline_value"]


def _write_mae_summary(args, header, rows, baseline_name):
    truth = np.array([r[1] for r in rows])
    summary = args.summary or _summary_path(args.out, ".summary.csv")
    out = [
        ("phi4", mae_ignoring_missing([r[2] for r in rows], truth), len(rows)),
        (baseline_name, mae_ignoring_missing([r[6] for r in rows], truth), len(rows)),
        ("zero", mae_ignoring_missing(np.zeros(len(rows)), truth), len(rows)),
    ]
    write_csv(summary, header, ["method", "mae", "n_days"], out)
    for name, value, _ in out:
        print(f"MAE {name}: {value:.6g}")


def _forecast_index(panel: ReturnPanel, count: int, train_days: int) -> list[int]:
    first = max(train_days, len(panel) - count)
    if first >= len(panel):
        raise UsageError(f"need more than {train_days} days of history, panel has {len(panel)}")
    return list(range(first, len(panel)))


def cmd_forecast(args) -> int:
    panel = _load_panel(args)
    if args.ticker not in panel.tickers:
        raise UsageError(f"ticker {args.ticker!r} not in panel")
    cfg, post = _configs(args, FORECAST_TRAIN, FORECAST_SAMPLER)
    series = panel.column(args.ticker)
    idx = _forecast_index(panel, args.count, max(args.train_days, args.baseline_window + args.lags))
    rows = next_day_forecast(
        series, idx, args.window, args.train_days, cfg, post, args.retrain_every, args.seed, panel.dates,
        threads=_threads(args),
    )
    done = [r.index for r in rows]
    base = rolling_linreg_baseline(series, [args.baseline_window], done, args.lags)[args.baseline_window] if done else []
    out = [(r.date, r.truth, r.mean, r.q05, r.q50, r.q95, float(b)) for r, b in zip(rows, base)]
    header = _header(args, [args.panel, args.config])
    write_csv(args.out, header, FORECAST_COLUMNS, out)
    _write_mae_summary(args, header, out, f"linreg_w{args.baseline_window}")
    return 0


def cmd_baseline(args) -> int:
    panel = _load_panel(args)
    if args.ticker not in panel.tickers:
        raise UsageError(f"ticker {args.ticker!r} not in panel")
    series = panel.column(args.ticker)
    inputs = [args.panel, args.forecast_csv]
    if args.forecast_csv:
        # evaluate on exactly the days the phi4 forecast covered
        _require(args.forecast_csv, "forecast csv")
        cols, rows = read_csv_rows(args.forecast_csv)
        date_pos = {d.isoformat(): k for k, d in enumerate(panel.dates)}
        try:
            idx = [date_pos[r[cols.index("date")]] for r in rows]
        except KeyError as exc:
            raise UsageError(f"forecast date {exc} not in panel") from None
        phi4 = [float(r[cols.index("phi4_mean")]) for r in rows]
    else:
        idx = _forecast_index(panel, args.count, max(args.windows) + args.lags)
        phi4 = None
    short = [w for w in args.windows if idx and idx[0] < w + args.lags]
    if short:
        raise UsageError(f"windows {short} need more history than the {idx[0]} days before the first evaluation day")
    preds = rolling_linreg_baseline(series, args.windows, idx, args.lags)
    truth = series[idx]
    out = [(w, mae_ignoring_missing(preds[w], truth), len(idx)) for w in args.windows]
    if phi4 is not None:
        out.append(("phi4", mae_ignoring_missing(phi4, truth), len(idx)))
    write_csv(args.out, _header(args, inputs), ["window", "mae", "n_days"], out)
    for w, m, _ in out:
        print(f"window {w}: MAE {m:.6g}")
    return 0


def cmd_validate(args) -> int:
    from .validation import run_checks

    failed = 0
    for name, ok, detail in run_checks(args.level, args.seed, _threads(args)):
        print(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
        failed += not ok
    return 1 if failed else 0


def _add_train_flags(p):
    p.add_argument("--config", help="flat TOML file with TrainConfig / SamplerConfig keys")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--chains", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phi4mrf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"phi4mrf {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=0, help="worker threads (0 = all cores)")
        return p

    p = command("ingest", cmd_ingest, "read price CSVs and write a log-return panel")
    p.add_argument("--input", action="append", required=True, help="CSV file (repeatable)")
    p.add_argument("--format", choices=("long", "wide"), default="long")
    p.add_argument("--date-col", default="date")
    p.add_argument("--ticker-col", default="ticker")
    p.add_argument("--close-col", default="close")
    p.add_argument("--out", required=True)

    p = command("train", cmd_train, "fit couplings to a panel")
    p.add_argument("--panel", required=True)
    p.add_argument("--tickers", type=lambda s: s.split(","))
    p.add_argument("--out", required=True, help="checkpoint JSON")
    p.add_argument("--history", help="history CSV (default: <out>.history.csv)")
    p.add_argument("--check-moments", type=int, default=0, metavar="N", help="re-estimate moments with N MCMC samples per chain")
    _add_train_flags(p)

    p = command("sample", cmd_sample, "draw samples from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-samples", type=int, default=5000)
    p.add_argument("--n-chains", type=int, default=1)
    p.add_argument("--burn-in", type=int, default=2000)
    p.add_argument("--thin", type=int, default=10)
    p.add_argument("--proposal-width", type=float, default=0.5)

    p = command("stats", cmd_stats, "market mean/kurtosis for original, phi4 and binarized series")
    p.add_argument("--panel", required=True)
    p.add_argument("--checkpoint", help="use these couplings instead of training")
    p.add_argument("--window", type=int, default=250)
    p.add_argument("--binarize", action="store_true", help="include the binarized series")
    p.add_argument("--pooled", action="store_true", help="kurtosis of pooled stock returns")
    p.add_argument("--refit-every", type=int, help="refit on the trailing window every N days")
    p.add_argument("--no-phi4", action="store_true")
    p.add_argument("--out", required=True)
    _add_train_flags(p)

    p = command("scaling", cmd_scaling, "mean couplings versus number of stocks")
    p.add_argument("--panel", required=True)
    p.add_argument("--volumes", type=_int_list, required=True)
    p.add_argument("--subset-rule", choices=("alphabetical", "random"), default="alphabetical")
    p.add_argument("--draws", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--summary", help="fit summary CSV (default: <out>.fit.csv)")
    _add_train_flags(p)

    p = command("impute", cmd_impute, "predict one stock from the others on each day")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--panel", required=True, help="days to impute")
    p.add_argument("--target", required=True)
    p.add_argument("--count", type=int, default=0, help="only the last N days (0 = all)")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--summary")
    p.set_defaults(epochs=None, learning_rate=None, chains=None)

    p = command("forecast", cmd_forecast, "walk-forward next-day forecasts of one ticker")
    p.add_argument("--panel", required=True)
    p.add_argument("--ticker", required=True)
    p.add_argument("--window", type=int, default=150)
    p.add_argument("--train-days", type=int, default=230)
    p.add_argument("--count", type=int, default=20, help="forecast the last N days")
    p.add_argument("--retrain-every", type=int, default=1)
    p.add_argument("--baseline-window", type=int, default=200)
    p.add_argument("--lags", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--summary")
    _add_train_flags(p)

    p = command("baseline", cmd_baseline, "rolling linear-regression MAE per window size")
    p.add_argument("--panel", required=True)
    p.add_argument("--ticker", required=True)
    p.add_argument("--windows", type=_int_list, default=[25, 50, 100, 200, 300, 400])
    p.add_argument("--lags", type=int, default=1)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--forecast-csv", help="evaluate on the days of this forecast output")
    p.add_argument("--out", required=True)

    p = command("validate", cmd_validate, "quadrature-oracle self-checks")
    p.add_argument("--level", choices=("quick", "full"), default="quick")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, DataError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except Exception as exc:  # noqa: BLE001
        log.exception("internal failure")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
