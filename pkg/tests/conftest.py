import datetime as dt

import numpy as np
import pytest

from phi4mrf.data import ReturnPanel
from phi4mrf.validation import random_couplings


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def theta3(rng):
    return random_couplings(3, rng)


def make_dates(n, start=dt.date(2020, 1, 1)):
    return tuple(start + dt.timedelta(days=k) for k in range(n))


def t5_panel(n_days=400, tickers=("A", "B", "C", "D"), seed=1, scale=0.01):
    """Common-factor Student-t panel of log returns."""
    r = np.random.default_rng(seed)
    f = r.standard_t(5, size=n_days) * scale
    x = 0.7 * f[:, None] + r.normal(0, 0.8 * scale, (n_days, len(tickers)))
    return ReturnPanel(tuple(tickers), make_dates(n_days), x)


def write_wide_prices(path, panel: ReturnPanel):
    prices = 100 * np.exp(np.vstack([np.zeros(len(panel.tickers)), np.cumsum(panel.returns, axis=0)]))
    dates = (panel.dates[0] - dt.timedelta(days=1),) + panel.dates
    with open(path, "w") as fh:
        fh.write("date," + ",".join(panel.tickers) + "\n")
        for d, row in zip(dates, prices):
            fh.write(d.isoformat() + "," + ",".join(f"{p:.10f}" for p in row) + "\n")
