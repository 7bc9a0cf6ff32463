"""Datasets: synthetic linear-toy generation, CSV ingestion and windowing.

Series are stored time-major (T x D); the model consumes transposed D x L
windows and D x H targets, produced one index at a time so overlapping
windows are never materialized together.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

from .errors import DataError, ShapeError
from .linalg import Matrix, Rng, matmul, rng_normal


@dataclass
class SeriesTable:
    name: str
    values: np.ndarray  # (T, D)
    feature_names: list
    timestamps: list | None = None

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]


def load_csv(path: str, name: str | None = None) -> SeriesTable:
    """Read a UTF-8 comma-separated series file.

    The first line is a header; a leading non-numeric column (canonically
    called ``date``) is kept as timestamps, every other column must parse as
    a real number. Errors name the offending row and column.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if not header:
            raise DataError(f"{path}: empty header")
        has_date = header[0].strip().lower() in ("date", "time", "timestamp")
        feature_names = [h.strip() for h in (header[1:] if has_date else header)]
        width = len(header)
        timestamps: list | None = [] if has_date else None
        rows = []
        for ridx, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DataError(f"{path}: row {ridx} has {len(row)} fields, expected {width}")
            cells = row[1:] if has_date else row
            if has_date:
                timestamps.append(row[0])
            parsed = []
            for cidx, cell in enumerate(cells):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    col = feature_names[cidx]
                    raise DataError(
                        f"{path}: row {ridx}, column {col!r}: not a number: {cell!r}"
                    ) from None
            rows.append(parsed)
        if not rows:
            raise DataError(f"{path}: no data rows")
    values = np.array(rows, dtype=np.float64)
    table_name = name if name is not None else path.rsplit("/", 1)[-1].rsplit(".", 1)[0]
    return SeriesTable(name=table_name, values=values,
                       feature_names=feature_names, timestamps=timestamps)


def _steps_per_month(table: SeriesTable) -> int:
    """Months are 30 days; the step interval comes from the timestamps,
    falling back to the ETTh/ETTm naming convention."""
    if table.timestamps and len(table.timestamps) >= 2:
        try:
            t0 = datetime.fromisoformat(table.timestamps[0])
            t1 = datetime.fromisoformat(table.timestamps[1])
            delta = (t1 - t0).total_seconds()
            if delta > 0:
                month_seconds = 30 * 24 * 3600
                if month_seconds % int(delta) == 0:
                    return month_seconds // int(delta)
        except ValueError:
            pass
    lowered = table.name.lower()
    if "ettm" in lowered:
        return 30 * 24 * 4
    if "etth" in lowered:
        return 30 * 24
    raise DataError(f"{table.name}: cannot infer step interval for the month-based split")


def split(table: SeriesTable, policy: str) -> tuple[SeriesTable, SeriesTable, SeriesTable]:
    """Chronological train/val/test slices.

    ``ett_months`` takes 12/4/4 thirty-day months; ``ratio`` takes 70/20/10
    percent. Slices are contiguous and non-overlapping; windows are later
    built inside each slice so nothing straddles a boundary.
    """
    t = table.length
    if policy == "ett_months":
        spm = _steps_per_month(table)
        bounds = (12 * spm, 16 * spm, 20 * spm)
        if t < bounds[2]:
            raise DataError(f"{table.name}: {t} steps is too short for the 12/4/4 month split "
                            f"({bounds[2]} needed)")
    elif policy == "ratio":
        n_train = int(t * 0.7)
        n_val = int(t * 0.2)
        bounds = (n_train, n_train + n_val, t)
    else:
        raise DataError(f"unknown split policy {policy!r}")

    def piece(lo, hi, tag):
        return SeriesTable(
            name=f"{table.name}/{tag}",
            values=table.values[lo:hi],
            feature_names=table.feature_names,
            timestamps=table.timestamps[lo:hi] if table.timestamps else None)

    return piece(0, bounds[0], "train"), piece(bounds[0], bounds[1], "val"), \
        piece(bounds[1], bounds[2], "test")


def infer_policy(name: str) -> str:
    return "ett_months" if name.lower().startswith("ett") else "ratio"


@dataclass
class WindowedDataset:
    """Sliding (L, H) windows with stride 1 over one series slice."""

    table: SeriesTable
    lookback: int
    horizon: int
    stride: int = 1

    def __post_init__(self):
        if self.stride != 1:
            raise DataError("only stride 1 is supported")
        if self.size < 1:
            raise DataError(
                f"{self.table.name}: {self.table.length} steps cannot fit one "
                f"window of L={self.lookback}, H={self.horizon}")

    @property
    def size(self) -> int:
        return self.table.length - self.lookback - self.horizon + 1

    @property
    def n_features(self) -> int:
        return self.table.n_features

    def window_at(self, i: int) -> tuple[Matrix, Matrix]:
        if not 0 <= i < self.size:
            raise DataError(f"window index {i} out of range [0, {self.size})")
        lo = i + self.lookback
        x = np.ascontiguousarray(self.table.values[i:lo].T)
        y = np.ascontiguousarray(self.table.values[lo:lo + self.horizon].T)
        return x, y

    # trainable-pair protocol shared with ArrayPairs
    def pair(self, i: int) -> tuple[Matrix, Matrix]:
        return self.window_at(i)


@dataclass
class ArrayPairs:
    """Pre-materialized (X, Y) pairs (the toy data) behind the dataset protocol."""

    xs: np.ndarray  # (N, D, L)
    ys: np.ndarray  # (N, D, H)

    def __post_init__(self):
        if self.xs.shape[0] != self.ys.shape[0] or self.xs.shape[1] != self.ys.shape[1]:
            raise ShapeError(f"pair arrays disagree: {self.xs.shape} vs {self.ys.shape}")

    @property
    def size(self) -> int:
        return self.xs.shape[0]

    @property
    def n_features(self) -> int:
        return self.xs.shape[1]

    def pair(self, i: int) -> tuple[Matrix, Matrix]:
        return self.xs[i], self.ys[i]


def batches(dataset, batch_size: int, rng: Rng | None = None,
            shuffle: bool = False) -> list:
    """Index lists covering the dataset once; the final partial batch stays.

    Training shuffles with the caller's seeded stream; evaluation iterates
    in order.
    """
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    n = dataset.size if hasattr(dataset, "size") else int(dataset)
    if shuffle:
        if rng is None:
            raise DataError("shuffling requires an rng")
        order = rng.permutation(n)
    else:
        order = np.arange(n, dtype=np.int64)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class ToySpec:
    """The linear generative toy problem Y = X W + noise."""

    lookback: int = 512
    horizon: int = 96
    channels: int = 7
    n_train: int = 10_000
    n_val: int = 5_000
    noise_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("lookback", "horizon", "channels", "n_train", "n_val"):
            if getattr(self, name) < 1:
                raise DataError(f"ToySpec.{name} must be >= 1")


@dataclass
class ToyData:
    train: ArrayPairs
    val: ArrayPairs
    w_toy: Matrix
    spec: ToySpec | None = field(repr=False, default=None)


def generate_toy(spec: ToySpec, rng: Rng | None = None) -> ToyData:
    """Draw the mixing matrix, then the train and val pairs, all standard
    normal; noise is fresh per sample. Fixed draw order: W, then per sample
    X followed by the noise, train split first."""
    r = rng if rng is not None else Rng(spec.seed)
    w_toy = rng_normal(r, spec.lookback, spec.horizon)

    def draw_split(n):
        xs = np.empty((n, spec.channels, spec.lookback))
        ys = np.empty((n, spec.channels, spec.horizon))
        for i in range(n):
            x = rng_normal(r, spec.channels, spec.lookback)
            eps = rng_normal(r, spec.channels, spec.horizon)
            xs[i] = x
            ys[i] = matmul(x, w_toy) + spec.noise_scale * eps
        return ArrayPairs(xs, ys)

    train = draw_split(spec.n_train)
    val = draw_split(spec.n_val)
    return ToyData(train=train, val=val, w_toy=w_toy, spec=spec)
