"""
Panel ingestion: CSV loading, stationarity transforms, standardization and
the lagged design matrix.

Transformation codes
--------------------
1 : level, no transformation
2 : year-on-year growth, 100 * (log x_t - log x_{t-4})
3 : quarter-on-quarter growth, 100 * (log x_t - log x_{t-1})
4 : quarter-on-quarter percentage change, 100 * (x_t / x_{t-1} - 1)
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Raised for malformed or insufficient input data."""


class DomainError(DataError):
    pass


class LengthError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class DegenerateScaleError(DataError):
    pass


# number of leading observations each transform consumes
TRANSFORM_LAG = {1: 0, 2: 4, 3: 1, 4: 1}


@dataclass(frozen=True)
class TimeSeriesPanel:
    """Aligned quarterly panel.

    Attributes
    ----------
    names : list of str
        Variable mnemonics, one per column.
    values : (T, n) array
    transform_codes : tuple of int
        Code applied to each column (1 for untouched data).
    date_index : list of str
        Quarter labels, one per row.
    scaling : (2, n) array or None
        Row 0 holds the centers, row 1 the scales used to standardize.
    """

    names: list
    values: np.ndarray
    transform_codes: tuple
    date_index: list
    scaling: np.ndarray | None = field(default=None)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise DataError(f"values must be 2-d, got shape {values.shape}")
        T, n = values.shape
        if len(self.names) != n:
            raise DataError(f"{len(self.names)} names for {n} columns")
        if len(self.transform_codes) != n:
            raise DataError(f"{len(self.transform_codes)} transform codes for {n} columns")
        if len(self.date_index) != T:
            raise DataError(f"{len(self.date_index)} dates for {T} rows")
        if not np.all(np.isfinite(values)):
            raise DataError("panel contains missing or non-finite values")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "transform_codes", tuple(int(c) for c in self.transform_codes))
        object.__setattr__(self, "names", list(self.names))
        object.__setattr__(self, "date_index", list(self.date_index))

    @property
    def T(self):
        return self.values.shape[0]

    @property
    def n(self):
        return self.values.shape[1]

    def head(self, t):
        """The first `t` observations, keeping the scaling state."""
        return replace(self, values=self.values[:t], date_index=self.date_index[:t])


@dataclass(frozen=True)
class DesignPair:
    """Response matrix and lag matrix of a VAR(p).

    Column ``q`` of `X` holds variable ``q % n`` at lag ``q // n + 1``.
    """

    Y: np.ndarray
    X: np.ndarray
    lag_order: int
    lag_of_column: np.ndarray
    variable_of_column: np.ndarray

    @property
    def k(self):
        return self.X.shape[1]

    @property
    def n(self):
        return self.Y.shape[1]


def apply_transform(series, code):
    """Apply a stationarity transformation and drop the undefined leading entries."""
    x = np.asarray(series, dtype=float)
    if code not in TRANSFORM_LAG:
        raise DataError(f"unknown transformation code {code!r}")
    lag = TRANSFORM_LAG[code]
    if code == 1:
        return x.copy()
    if len(x) < lag + 1:
        raise LengthError(f"code {code} needs at least {lag + 1} observations, got {len(x)}")
    if code in (2, 3):
        if np.any(x <= 0):
            raise DomainError(f"code {code} takes logs of nonpositive values")
        lx = np.log(x)
        return 100.0 * (lx[lag:] - lx[:-lag])
    if np.any(x[:-1] == 0):
        raise DomainError("percentage change from a zero level")
    return 100.0 * (x[1:] / x[:-1] - 1.0)


def transform_panel(panel, codes):
    """Transform every column and trim all of them to a common start."""
    codes = tuple(int(c) for c in codes)
    if len(codes) != panel.n:
        raise DataError(f"{len(codes)} codes for {panel.n} variables")
    trim = max(TRANSFORM_LAG.get(c, 0) for c in codes)
    cols = []
    for i, c in enumerate(codes):
        out = apply_transform(panel.values[:, i], c)
        cols.append(out[len(out) - (panel.T - trim):])
    values = np.column_stack(cols) if cols else np.empty((panel.T - trim, 0))
    return TimeSeriesPanel(panel.names, values, codes, panel.date_index[trim:])


def build_design(panel, p):
    """Stack ``y_t`` against ``x_t = (y_{t-1}', ..., y_{t-p}')``."""
    p = int(p)
    if p < 1:
        raise DataError(f"lag order must be positive, got {p}")
    values = panel.values if isinstance(panel, TimeSeriesPanel) else np.asarray(panel, float)
    T, n = values.shape
    if T <= p:
        raise InsufficientDataError(f"need more than {p} observations, got {T}")
    Y = values[p:].copy()
    X = np.empty((T - p, n * p))
    for lag in range(1, p + 1):
        X[:, (lag - 1) * n:lag * n] = values[p - lag:T - lag]
    q = np.arange(n * p)
    return DesignPair(Y, X, p, q // n + 1, q % n)


def lag_vector(history, p):
    """Regressor row built from the last `p` rows of `history` (most recent last)."""
    history = np.asarray(history, dtype=float)
    return history[::-1][:p].reshape(-1)


def standardize(panel):
    """Center each column and scale it to unit sample standard deviation (ddof=1)."""
    center = panel.values.mean(axis=0)
    scale = panel.values.std(axis=0, ddof=1)
    bad = ~(scale > 0)
    if np.any(bad):
        names = [panel.names[i] for i in np.flatnonzero(bad)]
        raise DegenerateScaleError(f"constant column(s): {', '.join(names)}")
    values = (panel.values - center) / scale
    return replace(panel, values=values, scaling=np.vstack([center, scale]))


def destandardize(values, scaling):
    """Map standardized values back to original units."""
    center, scale = scaling
    return np.asarray(values) * scale + center


def read_panel_csv(path, codes=None):
    """Read a panel CSV: header row of mnemonics, first column the quarter label."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise DataError(f"{path}: no data rows")
    header, body = rows[0], [r for r in rows[1:] if r]
    names = [h.strip() for h in header[1:]]
    dates, values = [], []
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        dates.append(row[0].strip())
        try:
            values.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    values = np.array(values, dtype=float)
    if np.any(np.isnan(values)):
        raise DataError(f"{path}: missing values are not supported")
    panel = TimeSeriesPanel(names, values, (1,) * len(names), dates)
    if codes is not None:
        panel = transform_panel(panel, [codes[nm] for nm in names] if isinstance(codes, dict) else codes)
    return panel


def read_transform_codes(path):
    """Sidecar file of ``mnemonic,code`` lines (a header line is optional)."""
    codes = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            try:
                codes[row[0].strip()] = int(row[1])
            except (ValueError, IndexError):
                if codes:
                    raise DataError(f"bad transform-code line: {row}") from None
    return codes


def write_panel_csv(panel, path):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date"] + panel.names)
        for d, row in zip(panel.date_index, panel.values):
            w.writerow([d] + [repr(float(v)) for v in row])
    return Path(path)
