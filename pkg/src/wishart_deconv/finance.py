"""Weekly 2x2 realized covariance matrices from two daily closing-price series.

Each Monday-Friday week contributes the uncentered sum of the outer products
of its four daily log-return vectors.  Under a zero-mean return model with a
constant within-week covariance this is a Wishart draw with 4 degrees of
freedom, which is the noise law handed to the deconvolution estimator.
"""

from __future__ import annotations

import bisect
import csv
import datetime as dt
import math
from dataclasses import dataclass

import numpy as np

from .estimator import DensityGrid, EstimatorConfig, deconvolve
from .spd import SpdMatrix, eigenvalues_of, is_positive_definite

WEEKDAYS = 5
FINANCE_DF = 4.0
HEADER = ("date", "close1", "close2")


class PriceDataError(ValueError):
    """Malformed or invalid price input."""


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class PriceSeries:
    dates: tuple[dt.date, ...]
    close1: np.ndarray
    close2: np.ndarray

    def __post_init__(self):
        n = len(self.dates)
        c1 = np.asarray(self.close1, dtype=float)
        c2 = np.asarray(self.close2, dtype=float)
        if c1.shape != (n,) or c2.shape != (n,):
            raise PriceDataError("dates and prices must have equal lengths")
        if np.any(~(c1 > 0)) or np.any(~(c2 > 0)):
            raise PriceDataError("prices must be positive and finite")
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise PriceDataError("dates must be strictly increasing")
        object.__setattr__(self, "close1", c1)
        object.__setattr__(self, "close2", c2)

    def __len__(self) -> int:
        return len(self.dates)


@dataclass(frozen=True)
class WeeklyCovariance:
    """Realized covariance of one Monday-Friday week.

    ``y11, y12, y22`` are always stored; ``degenerate`` marks weeks whose
    matrix is not numerically positive definite.
    """

    week_start: dt.date
    y11: float
    y12: float
    y22: float
    degenerate: bool

    @property
    def y(self) -> SpdMatrix | None:
        return None if self.degenerate else SpdMatrix(self.y11, self.y12, self.y22)


def parse_prices(path) -> PriceSeries:
    """Read a ``date,close1,close2`` CSV with ISO-8601 dates.

    Rows must be weekdays in strictly increasing order.  Errors name the
    offending line (the header is line 1).
    """
    dates, c1, c2 = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != HEADER:
            raise PriceDataError(f"line 1: expected header {','.join(HEADER)}, got {header}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise PriceDataError(f"line {line}: expected 3 fields, got {len(row)}")
            try:
                d = dt.date.fromisoformat(row[0].strip())
                p1, p2 = float(row[1]), float(row[2])
            except ValueError as exc:
                raise PriceDataError(f"line {line}: {exc}") from None
            if not (p1 > 0 and p2 > 0 and math.isfinite(p1) and math.isfinite(p2)):
                raise PriceDataError(f"line {line}: prices must be positive, got ({row[1]}, {row[2]})")
            if d.weekday() >= WEEKDAYS:
                raise PriceDataError(f"line {line}: {d} falls on a weekend")
            if dates and d <= dates[-1]:
                raise PriceDataError(f"line {line}: date {d} is not after {dates[-1]}")
            dates.append(d)
            c1.append(p1)
            c2.append(p2)
    if not dates:
        raise PriceDataError("no price rows")
    return PriceSeries(tuple(dates), np.array(c1), np.array(c2))


def _monday(d: dt.date) -> dt.date:
    return d - dt.timedelta(days=d.weekday())


def weekly_closes(series: PriceSeries) -> list[tuple[dt.date, np.ndarray]]:
    """Five filled weekday closes, shape ``(5, 2)``, for every complete week.

    A week is complete when its Monday is not before the first date and its
    Friday is not after the last date; missing days repeat the last previous
    close.  Dates outside complete weeks form the dropped leading/trailing
    fragments.
    """
    if not series.dates:
        return []
    closes = np.column_stack([series.close1, series.close2])
    first, last = series.dates[0], series.dates[-1]
    monday = _monday(first)
    if monday < first:
        monday += dt.timedelta(days=7)
    out = []
    while monday + dt.timedelta(days=WEEKDAYS - 1) <= last:
        days = [monday + dt.timedelta(days=k) for k in range(WEEKDAYS)]
        # last close on or before each day
        idx = [bisect.bisect_right(series.dates, d) - 1 for d in days]
        out.append((monday, closes[idx]))
        monday += dt.timedelta(days=7)
    return out


def realized_covariance(week_closes: np.ndarray) -> np.ndarray:
    """Uncentered ``sum_j Q_j Q_j^T`` of the daily log-return vectors."""
    c = np.asarray(week_closes, dtype=float)
    q = np.log(c[1:] / c[:-1])
    return q.T @ q


def fill_and_weekly(series: PriceSeries) -> list[WeeklyCovariance]:
    weeks = weekly_closes(series)
    if not weeks:
        raise InsufficientDataError("series does not span a full Monday-Friday week")
    out = []
    for monday, c in weeks:
        y = realized_covariance(c)
        ok = bool(is_positive_definite(y[None])[0])
        out.append(WeeklyCovariance(monday, float(y[0, 0]), float(y[0, 1]), float(y[1, 1]), not ok))
    return out


def write_weekly_csv(weeks: list[WeeklyCovariance], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["week_start", "y11", "y12", "y22", "degenerate_flag"])
        for wk in weeks:
            w.writerow([wk.week_start.isoformat(), repr(wk.y11), repr(wk.y12), repr(wk.y22), int(wk.degenerate)])


def estimate_from_prices(series: PriceSeries, cfg: EstimatorConfig | None = None) -> tuple[DensityGrid, list[WeeklyCovariance]]:
    """Deconvolve the eigenvalue density of the weekly covariance scale.

    Degenerate weeks are dropped and counted in ``meta["degenerate_weeks"]``.
    """
    cfg = EstimatorConfig(N=FINANCE_DF) if cfg is None else cfg
    weeks = fill_and_weekly(series)
    good = [w for w in weeks if not w.degenerate]
    if len(good) < 2:
        raise InsufficientDataError(
            f"need at least 2 non-degenerate weeks, got {len(good)} of {len(weeks)}"
        )
    ys = np.array([[w.y11, w.y12, w.y22] for w in good])
    grid = deconvolve(eigenvalues_of(ys), cfg)
    grid.meta["weeks"] = len(weeks)
    grid.meta["degenerate_weeks"] = len(weeks) - len(good)
    return grid, weeks
