"""CSV ingestion, chronological splitting, standardization and windowing."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import ContractError

DEFAULT_LOOKBACK = 96


class DataError(ValueError):
    """Malformed or insufficient input data."""


@dataclass(frozen=True)
class TimeSeriesDataset:
    """A multivariate series stored as a ``[time_steps, channels]`` matrix."""

    values: np.ndarray
    channel_names: tuple[str, ...] = ()
    granularity: str = ""
    norm_stats: tuple[np.ndarray, np.ndarray] | None = None
    # absolute row offset of values[0] inside the originally loaded series
    offset: int = 0

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise DataError(f"values must be a non-empty [time, channels] matrix, got {v.shape}")
        object.__setattr__(self, "values", v)
        if not self.channel_names:
            object.__setattr__(self, "channel_names", tuple(f"c{i}" for i in range(v.shape[1])))
        if len(self.channel_names) != v.shape[1]:
            raise DataError("channel_names length does not match channel count")
        if self.norm_stats is not None and np.any(np.asarray(self.norm_stats[1]) <= 0):
            raise DataError("norm_stats std must be positive")

    @property
    def time_steps(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class WindowSet:
    """Supervised windows, each ``lookback + horizon`` rows long.

    ``starts`` records the absolute start row of every window so that callers
    can audit which part of the source series a window was cut from.
    """

    windows: np.ndarray
    lookback: int
    horizon: int
    labels: np.ndarray | None = None
    num_classes: int = 0
    starts: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        w = np.asarray(self.windows, dtype=np.float32)
        if w.ndim != 3:
            raise DataError(f"windows must be [count, length, channels], got {w.shape}")
        if w.shape[1] != self.lookback + self.horizon:
            raise DataError("window length must equal lookback + horizon")
        object.__setattr__(self, "windows", w)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64)
            if lab.shape != (w.shape[0],):
                raise DataError("labels must have one entry per window")
            if lab.size and (lab.min() < 0 or lab.max() >= self.num_classes):
                raise DataError("labels out of range [0, num_classes)")
            object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return self.windows.shape[0]

    @property
    def channels(self) -> int:
        return self.windows.shape[2]

    @property
    def inputs(self) -> np.ndarray:
        return self.windows[:, : self.lookback]

    @property
    def targets(self) -> np.ndarray:
        return self.windows[:, self.lookback :]

    def subset(self, indices) -> "WindowSet":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(
            self,
            windows=self.windows[idx],
            labels=None if self.labels is None else self.labels[idx],
            starts=None if self.starts is None else self.starts[idx],
        )


def load_csv(
    path,
    has_header: bool = True,
    drop_first_column: bool = False,
    label_column: int | None = None,
) -> TimeSeriesDataset | tuple[TimeSeriesDataset, np.ndarray]:
    """Read a comma-separated numeric file into a dataset.

    With ``label_column`` set (index after the optional first-column drop),
    that column is split off as integer labels and ``(dataset, labels)`` is
    returned.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    header: list[str] | None = None
    if has_header and rows:
        header = rows.pop(0)
    if not rows:
        raise DataError(f"{path}: zero rows")
    width = len(rows[0])
    data = []
    for i, row in enumerate(rows):
        if len(row) != width:
            raise DataError(f"{path}: ragged row {i + 1}: {len(row)} cells, expected {width}")
        cells = row[1:] if drop_first_column else row
        parsed = []
        for j, cell in enumerate(cells):
            try:
                parsed.append(float(cell))
            except ValueError:
                col = j + 1 if drop_first_column else j
                raise DataError(f"{path}: unparseable cell at row {i + 1}, column {col}: {cell!r}") from None
        data.append(parsed)
    values = np.asarray(data, dtype=np.float64)
    if values.shape[1] == 0:
        raise DataError(f"{path}: no data columns")
    names = None
    if header is not None:
        names = header[1:] if drop_first_column else header
        names = [n.strip() for n in names]
    labels = None
    if label_column is not None:
        labels = values[:, label_column].astype(np.int64)
        values = np.delete(values, label_column, axis=1)
        if names is not None:
            names = names[:label_column] + names[label_column + 1 :]
    ds = TimeSeriesDataset(values=values, channel_names=tuple(names or ()), granularity="")
    return (ds, labels) if label_column is not None else ds


def save_csv(ds: TimeSeriesDataset, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(ds.channel_names)
        for row in ds.values:
            w.writerow([repr(float(x)) for x in row])


def split_lengths(time_steps: int, ratios) -> tuple[int, int, int]:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ContractError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ContractError(f"ratios must sum to 1, got {sum(ratios)}")
    # small epsilon guards against 0.7 * 100 = 69.99999 style flooring
    n_train = int(np.floor(time_steps * ratios[0] + 1e-9))
    n_val = int(np.floor(time_steps * ratios[1] + 1e-9))
    return n_train, n_val, time_steps - n_train - n_val


def split_chronological(ds: TimeSeriesDataset, ratios=(0.7, 0.1, 0.2)):
    """Cut the time axis into contiguous train/val/test segments.

    Floors the first two lengths; the remainder goes to test.
    """
    n_train, n_val, _ = split_lengths(ds.time_steps, ratios)
    bounds = [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, ds.time_steps)]
    out = []
    for lo, hi in bounds:
        if hi <= lo:
            raise DataError(f"split segment [{lo}, {hi}) is empty for {ds.time_steps} steps")
        out.append(replace(ds, values=ds.values[lo:hi], offset=ds.offset + lo))
    return tuple(out)


def standardize(ds: TimeSeriesDataset, stats_source: TimeSeriesDataset) -> TimeSeriesDataset:
    if stats_source.channels != ds.channels:
        raise ContractError("stats_source has a different channel count")
    mean = stats_source.values.mean(axis=0)
    std = stats_source.values.std(axis=0)
    for c, s in enumerate(std):
        if s <= 1e-8:
            raise DataError(f"channel {ds.channel_names[c]!r} has near-zero std ({s:g})")
    return replace(ds, values=(ds.values - mean) / std, norm_stats=(mean, std))


def unstandardize(ds: TimeSeriesDataset) -> TimeSeriesDataset:
    if ds.norm_stats is None:
        raise ContractError("dataset carries no norm_stats")
    mean, std = ds.norm_stats
    return replace(ds, values=ds.values * std + mean, norm_stats=None)


def make_windows(
    ds: TimeSeriesDataset,
    lookback: int = DEFAULT_LOOKBACK,
    horizon: int = 96,
    stride: int = 1,
) -> WindowSet:
    if lookback < 1 or horizon < 0 or stride < 1:
        raise ContractError(f"bad window config lookback={lookback} horizon={horizon} stride={stride}")
    need = lookback + horizon
    if ds.time_steps < need:
        raise DataError(f"series too short: {ds.time_steps} steps, need at least {need}")
    count = (ds.time_steps - need) // stride + 1
    starts = np.arange(count) * stride
    # sliding_window_view gives [count', channels, need]; keep every stride-th
    view = np.lib.stride_tricks.sliding_window_view(ds.values, need, axis=0)[::stride]
    windows = np.ascontiguousarray(view.transpose(0, 2, 1)).astype(np.float32)
    return WindowSet(windows=windows, lookback=lookback, horizon=horizon, starts=starts + ds.offset)


def synthetic_series(
    time_steps: int = 20_000,
    channels: int = 3,
    noise: float = 0.1,
    seed: int = 0,
) -> TimeSeriesDataset:
    """Trend plus two incommensurate seasonal components plus noise.

    Noise standard deviation is ``noise`` times the standard deviation of the
    clean signal, per channel.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(time_steps, dtype=np.float64)
    cols = []
    for c in range(channels):
        p1 = 24.0 * (1.0 + 0.15 * c)
        p2 = p1 * np.sqrt(2.0) * 3.1
        trend = 0.5 * np.sin(2 * np.pi * t / (time_steps * (0.9 + 0.2 * c))) + 2e-5 * t
        s1 = np.sin(2 * np.pi * t / p1 + rng.uniform(0, 2 * np.pi))
        s2 = 0.6 * np.sin(2 * np.pi * t / p2 + rng.uniform(0, 2 * np.pi))
        clean = trend + s1 + s2
        cols.append(clean + noise * clean.std() * rng.standard_normal(time_steps))
    return TimeSeriesDataset(
        values=np.stack(cols, axis=1),
        channel_names=tuple(f"ch{c}" for c in range(channels)),
        granularity="synthetic",
    )


def two_regime_series(
    time_steps: int = 6_000,
    channels: int = 2,
    shift_at: float = 0.7,
    noise: float = 0.1,
    seed: int = 0,
) -> TimeSeriesDataset:
    """Seasonal series whose period and phase change abruptly at ``shift_at``."""
    rng = np.random.default_rng(seed)
    t = np.arange(time_steps, dtype=np.float64)
    cut = int(time_steps * shift_at)
    cols = []
    for c in range(channels):
        pa, pb = 24.0 + 4 * c, 9.0 + 2 * c
        a = np.sin(2 * np.pi * t / pa + rng.uniform(0, 2 * np.pi))
        b = np.sign(np.sin(2 * np.pi * t / pb)) * 0.8 + 0.5 * np.sin(2 * np.pi * t / 50.0)
        clean = np.where(t < cut, a, b)
        cols.append(clean + noise * rng.standard_normal(time_steps))
    return TimeSeriesDataset(values=np.stack(cols, axis=1), granularity="synthetic")
