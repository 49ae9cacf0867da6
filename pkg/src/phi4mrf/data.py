"""Price ingestion, log-returns, windowing and simple series transforms."""

from __future__ import annotations

import csv
import datetime as dt
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Malformed or unusable input data."""


@dataclass(frozen=True)
class CsvSchema:
    date_col: str = "date"
    ticker_col: str = "ticker"
    close_col: str = "close"


# ticker -> {date: close}
PriceTable = dict[str, dict[dt.date, float]]


def _parse_date(text: str, where: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError as exc:
        raise DataError(f"{where}: bad ISO date {text!r}") from exc


def _parse_price(text: str, where: str) -> float:
    try:
        value = float(text)
    except ValueError as exc:
        raise DataError(f"{where}: bad price {text!r}") from exc
    if not math.isfinite(value) or value <= 0:
        raise DataError(f"{where}: price must be positive and finite, got {text!r}")
    return value


def _put(table: PriceTable, ticker: str, date: dt.date, price: float, where: str) -> None:
    series = table.setdefault(ticker, {})
    if date in series:
        raise DataError(f"{where}: duplicate row for ({ticker}, {date.isoformat()})")
    series[date] = price


def ingest_csv(path, schema: CsvSchema | None = None, fmt: str = "long") -> PriceTable:
    """Read closing prices from a CSV file.

    ``fmt="long"`` expects one row per (date, ticker). ``fmt="wide"`` expects a
    date column plus price columns: a lone ``close`` column is named after the
    file stem, otherwise each column header is a ticker.
    """
    schema = schema or CsvSchema()
    path = Path(path)
    table: PriceTable = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if schema.date_col not in header:
            raise DataError(f"{path}:1: missing column {schema.date_col!r}")
        di = header.index(schema.date_col)
        if fmt == "long":
            for col in (schema.ticker_col, schema.close_col):
                if col not in header:
                    raise DataError(f"{path}:1: missing column {col!r}")
            ti, ci = header.index(schema.ticker_col), header.index(schema.close_col)
            columns = None
        elif fmt == "wide":
            others = [k for k in range(len(header)) if k != di]
            if not others:
                raise DataError(f"{path}:1: no price columns")
            if [header[k] for k in others] == [schema.close_col]:
                columns = {others[0]: path.stem}
            else:
                columns = {k: header[k] for k in others}
        else:
            raise ValueError(f"unknown format {fmt!r}")
        for row in reader:
            where = f"{path}:{reader.line_num}"
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{where}: expected {len(header)} fields, got {len(row)}")
            date = _parse_date(row[di], where)
            if columns is None:
                _put(table, row[ti].strip(), date, _parse_price(row[ci], where), where)
            else:
                for k, ticker in columns.items():
                    if row[k].strip() == "":
                        continue
                    _put(table, ticker, date, _parse_price(row[k], where), where)
    if not table:
        raise DataError(f"{path}: no data rows")
    return table


def merge_tables(tables: Iterable[PriceTable]) -> PriceTable:
    out: PriceTable = {}
    for table in tables:
        for ticker, series in table.items():
            for date, price in series.items():
                _put(out, ticker, date, price, f"ticker {ticker}")
    return out


@dataclass(frozen=True, eq=False)
class ReturnPanel:
    """Aligned daily log-returns: ``returns[t, k]`` is ticker k on ``dates[t]``."""

    tickers: tuple[str, ...]
    dates: tuple[dt.date, ...]
    returns: np.ndarray

    def __post_init__(self):
        r = np.array(self.returns, dtype=np.float64)
        if r.ndim != 2 or r.shape != (len(self.dates), len(self.tickers)):
            raise DataError(f"returns shape {r.shape} does not match dates x tickers")
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise DataError("dates must be strictly increasing")
        if not np.all(np.isfinite(r)):
            raise DataError("returns must be finite")
        if len(set(self.tickers)) != len(self.tickers):
            raise DataError("duplicate tickers")
        r.setflags(write=False)
        object.__setattr__(self, "returns", r)
        object.__setattr__(self, "tickers", tuple(self.tickers))
        object.__setattr__(self, "dates", tuple(self.dates))

    def __len__(self) -> int:
        return len(self.dates)

    def column(self, ticker: str) -> np.ndarray:
        try:
            return self.returns[:, self.tickers.index(ticker)]
        except ValueError:
            raise KeyError(f"ticker {ticker!r} not in panel") from None

    def select(self, tickers: Sequence[str]) -> "ReturnPanel":
        idx = [self.tickers.index(t) for t in tickers]
        return ReturnPanel(tuple(tickers), self.dates, self.returns[:, idx])

    def rows(self, start: int, stop: int) -> "ReturnPanel":
        return ReturnPanel(self.tickers, self.dates[start:stop], self.returns[start:stop])


def log_returns(prices: PriceTable) -> ReturnPanel:
    """Log-returns on the dates every ticker trades.

    Prices are first aligned on the intersection of dates (rows with a missing
    ticker are dropped and logged), then differenced, so every return spans
    the same interval for all tickers.
    """
    if not prices:
        raise DataError("no tickers")
    for ticker, series in prices.items():
        if len(series) < 2:
            raise DataError(f"ticker {ticker!r} has fewer than 2 prices")
    tickers = sorted(prices)
    common = set.intersection(*(set(prices[t]) for t in tickers))
    union = set.union(*(set(prices[t]) for t in tickers))
    dropped = len(union) - len(common)
    if dropped:
        log.info("dropped %d dates missing at least one ticker", dropped)
    dates = sorted(common)
    if len(dates) < 2:
        raise DataError("fewer than 2 dates shared by all tickers; panel would be empty")
    p = np.array([[prices[t][d] for t in tickers] for d in dates])
    r = np.diff(np.log(p), axis=0)
    return ReturnPanel(tuple(tickers), tuple(dates[1:]), r)


def binarize(values) -> np.ndarray:
    """Sign of each return as +/-1; exact zeros map to +1."""
    x = np.asarray(values, dtype=np.float64)
    return np.where(x >= 0, 1.0, -1.0)


def binarize_panel(panel: ReturnPanel) -> ReturnPanel:
    return ReturnPanel(panel.tickers, panel.dates, binarize(panel.returns))


def sma(series, window: int) -> np.ndarray:
    """Trailing simple moving average; output has ``len(series) - window + 1`` points."""
    x = np.asarray(series, dtype=np.float64)
    if window < 1 or window > x.shape[0]:
        raise DataError(f"window {window} invalid for series of length {x.shape[0]}")
    return np.lib.stride_tricks.sliding_window_view(x, window).mean(axis=-1)


def minmax_rescale(series, target_min: float, target_max: float) -> np.ndarray:
    """Affinely map ``[min, max]`` of the series onto ``[target_min, target_max]``.

    A constant series maps to the midpoint of the target range.
    """
    x = np.asarray(series, dtype=np.float64)
    lo, hi = float(np.min(x)), float(np.max(x))
    if hi == lo:
        return np.full(x.shape, 0.5 * (target_min + target_max))
    out = target_min + ((x - lo) / (hi - lo)) * (target_max - target_min)
    # pin the extremes so they equal the targets exactly
    out[x == lo] = target_min
    out[x == hi] = target_max
    return out


@dataclass(frozen=True, eq=False)
class WindowedDataset:
    """Reverse-chronological windows of one series.

    ``vectors[k, 0]`` is the return on ``anchor_dates[k]`` and ``vectors[k, m]``
    the return m trading days earlier. Rows are in chronological anchor order.
    """

    window: int
    vectors: np.ndarray
    anchor_index: np.ndarray
    anchor_dates: tuple

    def __len__(self) -> int:
        return self.vectors.shape[0]


def build_windows(
    series,
    window: int,
    stride: int = 1,
    max_count: int | None = None,
    dates: Sequence | None = None,
) -> WindowedDataset:
    """Sliding windows anchored on the most recent day and stepping back by ``stride``."""
    x = np.asarray(series, dtype=np.float64)
    if window < 1 or stride < 1:
        raise DataError("window and stride must be >= 1")
    if x.shape[0] < window:
        raise DataError(f"need at least {window} days of history, have {x.shape[0]}")
    anchors = np.arange(x.shape[0] - 1, window - 2, -stride)[::-1]
    if max_count is not None:
        anchors = anchors[-max_count:]
    offsets = np.arange(window)
    vectors = x[anchors[:, None] - offsets[None, :]]
    anchor_dates = tuple(dates[i] for i in anchors) if dates is not None else tuple(int(i) for i in anchors)
    return WindowedDataset(window, vectors, anchors, anchor_dates)


def panel_windows(panel: ReturnPanel, ticker: str, window: int, stride: int = 1, max_count: int | None = None) -> WindowedDataset:
    return build_windows(panel.column(ticker), window, stride, max_count, panel.dates)


def write_panel(panel: ReturnPanel, fh, header_line: str | None = None) -> None:
    if header_line:
        fh.write(header_line + "\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["date", *panel.tickers])
    for d, row in zip(panel.dates, panel.returns):
        w.writerow([d.isoformat(), *(repr(float(v)) for v in row)])


def read_panel(path) -> ReturnPanel:
    """Read a panel written by ``write_panel`` (leading ``#`` lines are skipped)."""
    path = Path(path)
    with path.open(newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader, None)
    if not header or header[0] != "date":
        raise DataError(f"{path}: not a return panel (missing date header)")
    dates, rows = [], []
    for k, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{path}: row {k} has {len(row)} fields, expected {len(header)}")
        dates.append(_parse_date(row[0], f"{path}: row {k}"))
        try:
            rows.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise DataError(f"{path}: row {k}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: panel has no rows")
    return ReturnPanel(tuple(header[1:]), tuple(dates), np.array(rows))
