"""Survival datasets, CSV ingestion, time grids and censoring-stratified splits."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


class SchemaError(ValueError):
    """A column named by the schema is missing from the file."""


class ParseError(ValueError):
    """A cell could not be parsed as a number."""


class ValidationError(ValueError):
    """Parsed values violate a dataset invariant."""


@dataclass(frozen=True)
class SurvivalDataset:
    """Right-censored (optionally competing-risks) survival data.

    ``events`` holds 0 for censored rows and the event type ``1..delta_max``
    otherwise. ``groups`` maps a sensitive-attribute name to one label per row.
    """

    features: np.ndarray
    times: np.ndarray
    events: np.ndarray
    groups: Mapping[str, np.ndarray] = field(default_factory=dict)
    feature_names: tuple = ()
    delta_max: int = 1

    def __post_init__(self):
        features = np.asarray(self.features, dtype=float)
        if features.ndim == 1:
            features = features.reshape(-1, 1)
        times = np.asarray(self.times, dtype=float).reshape(-1)
        events = np.asarray(self.events).reshape(-1).astype(int)
        n = times.shape[0]
        if n < 1:
            raise ValidationError("dataset must contain at least one row")
        if features.shape[0] != n or events.shape[0] != n:
            raise ValidationError("features, times and events must have the same length")
        if np.any(~np.isfinite(times)) or np.any(times < 0):
            raise ValidationError("times must be finite and nonnegative")
        if self.delta_max < 1:
            raise ValidationError("delta_max must be >= 1")
        if np.any(events < 0) or np.any(events > self.delta_max):
            raise ValidationError(f"events must lie in 0..{self.delta_max}")
        groups = {k: np.asarray(v) for k, v in dict(self.groups).items()}
        for name, labels in groups.items():
            if labels.shape != (n,):
                raise ValidationError(f"group {name!r} has {labels.shape[0]} labels, expected {n}")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "events", events)
        object.__setattr__(self, "groups", groups)
        if not self.feature_names:
            names = tuple(f"x{k}" for k in range(features.shape[1]))
            object.__setattr__(self, "feature_names", names)

    @property
    def n(self) -> int:
        return self.times.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def censoring_rate(self) -> float:
        return float(np.mean(self.events == 0))

    def subset(self, idx) -> "SurvivalDataset":
        idx = np.asarray(idx)
        return replace(
            self,
            features=self.features[idx],
            times=self.times[idx],
            events=self.events[idx],
            groups={k: v[idx] for k, v in self.groups.items()},
        )


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing positive time points t_1 < ... < t_m (t_0 = 0 implied)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1)
        if pts.size < 1:
            raise ValueError("time grid needs at least one point")
        if pts[0] <= 0:
            raise ValueError("first grid point must be positive")
        if np.any(np.diff(pts) <= 0):
            raise ValueError("grid points must be strictly increasing")
        object.__setattr__(self, "points", pts)

    @property
    def m(self) -> int:
        return self.points.size

    @property
    def widths(self) -> np.ndarray:
        """t_l - t_{l-1} for l = 1..m."""
        return np.diff(np.concatenate([[0.0], self.points]))

    def __len__(self):
        return self.m


@dataclass(frozen=True)
class SplitAssignment:
    d1_indices: np.ndarray
    d2_indices: np.ndarray
    seed: int


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for :func:`load_csv`."""

    time: str
    event: str
    features: Sequence[str]
    groups: Sequence[str] = ()
    standardize: bool = False
    delta_max: int = 1

    @classmethod
    def from_dict(cls, d: Mapping) -> "CsvSchema":
        return cls(
            time=d["time"],
            event=d["event"],
            features=tuple(d["features"]),
            groups=tuple(d.get("groups", ())),
            standardize=bool(d.get("standardize", False)),
            delta_max=int(d.get("delta_max", 1)),
        )


def _parse_float(cell: str, row: int, column: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise ParseError(f"row {row}: column {column!r} has non-numeric value {cell!r}") from None
    if not np.isfinite(value):
        raise ParseError(f"row {row}: column {column!r} has non-finite value {cell!r}")
    return value


def standardize(features: np.ndarray) -> np.ndarray:
    """Z-score each column with the population std; constant columns become 0."""
    features = np.asarray(features, dtype=float)
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    out = np.zeros_like(features)
    ok = std > 0
    out[:, ok] = (features[:, ok] - mean[ok]) / std[ok]
    return out


def load_csv(path, schema: CsvSchema) -> SurvivalDataset:
    """Read a UTF-8, comma-separated file with a header row.

    Row numbers in error messages count data rows from 1 (the header is row 0).
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row missing") from None
        col = {name: k for k, name in enumerate(header)}
        needed = [schema.time, schema.event, *schema.features, *schema.groups]
        missing = [c for c in needed if c not in col]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")

        times, events, feats = [], [], []
        groups = {g: [] for g in schema.groups}
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"row {row_no}: expected {len(header)} cells, got {len(row)}")
            t = _parse_float(row[col[schema.time]], row_no, schema.time)
            if t < 0:
                raise ValidationError(f"row {row_no}: negative time {t}")
            e = _parse_float(row[col[schema.event]], row_no, schema.event)
            if e != int(e) or not 0 <= e <= schema.delta_max:
                raise ValidationError(
                    f"row {row_no}: event value {row[col[schema.event]]!r} outside 0..{schema.delta_max}"
                )
            times.append(t)
            events.append(int(e))
            feats.append([_parse_float(row[col[c]], row_no, c) for c in schema.features])
            for g in schema.groups:
                groups[g].append(row[col[g]].strip())

    if not times:
        raise ValidationError(f"{path}: no data rows")
    features = np.array(feats, dtype=float).reshape(len(times), len(schema.features))
    if schema.standardize:
        features = standardize(features)
    return SurvivalDataset(
        features=features,
        times=np.array(times),
        events=np.array(events),
        groups={g: np.array(v) for g, v in groups.items()},
        feature_names=tuple(schema.features),
        delta_max=schema.delta_max,
    )


def event_time_grid(ds: SurvivalDataset) -> TimeGrid:
    """Sorted distinct times at which an event (of any type) was observed."""
    event_times = ds.times[ds.events > 0]
    if event_times.size == 0:
        raise ValidationError("no uncensored rows: cannot build an event-time grid")
    pts = np.unique(event_times)
    if pts[0] <= 0:
        # zero event times carry no hazard mass before t_1; drop to keep t_1 > 0
        pts = pts[pts > 0]
        if pts.size == 0:
            raise ValidationError("all event times are zero")
    return TimeGrid(pts)


def quantile_time_grid(ds: SurvivalDataset, num_points: int) -> TimeGrid:
    """At most ``num_points`` event-time quantiles; used to keep DeepHit heads small."""
    full = event_time_grid(ds)
    if full.m <= num_points:
        return full
    qs = np.quantile(ds.times[ds.events > 0], np.linspace(0, 1, num_points))
    return TimeGrid(np.unique(qs[qs > 0]))


def kappa(t, grid: TimeGrid):
    """1-based grid index of time ``t``: exact match, else the last point strictly below.

    Accepts scalars or arrays. Raises for any ``t < t_1``.
    """
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < grid.points[0]):
        raise ValueError(f"time below first grid point {grid.points[0]}")
    # side='right' counts points <= t, which is the exact-match index or the last t_l < t
    idx = np.searchsorted(grid.points, t_arr, side="right")
    return int(idx) if np.ndim(idx) == 0 else idx.astype(int)


def kappa_clamped(t, grid: TimeGrid):
    """Like :func:`kappa` but times below t_1 map to index 1."""
    idx = np.searchsorted(grid.points, np.asarray(t, dtype=float), side="right")
    idx = np.maximum(idx, 1)
    return int(idx) if np.ndim(idx) == 0 else idx.astype(int)


def kappa_with_event(y, delta, grid: TimeGrid):
    """Index in {0..m}: exact grid index for events, last t_l < y for censored rows."""
    y_arr = np.asarray(y, dtype=float)
    d_arr = np.asarray(delta)
    below = np.searchsorted(grid.points, y_arr, side="left")  # #{l : t_l < y}
    exact = np.searchsorted(grid.points, y_arr, side="right")
    ev = d_arr != 0
    hit = exact > below
    if np.any(ev & ~hit):
        raise ValueError("event time does not lie on the grid")
    out = np.where(ev, exact, below)
    return int(out) if np.ndim(out) == 0 else out.astype(int)


def kappa_snapped(y, delta, grid: TimeGrid):
    """Index in {0..m} of times that already lie on the grid (or at 0).

    This is the index used by the full Cox likelihood after
    :func:`snap_censored_times`: a snapped censored time ``t_l`` keeps index ``l``,
    so it stays in the risk sets of ``t_1..t_l``.
    """
    out = np.searchsorted(grid.points, np.asarray(y, dtype=float), side="right")
    ev = np.asarray(delta) != 0
    on_grid = np.isin(np.asarray(y, dtype=float), grid.points)
    if np.any(ev & ~on_grid):
        raise ValueError("event time does not lie on the grid")
    return int(out) if np.ndim(out) == 0 else out.astype(int)


def snap_censored_times(ds: SurvivalDataset, grid: TimeGrid) -> SurvivalDataset:
    """Move each censored time down to the last event time at or before it (0 if none).

    A censored time that coincides with an event time stays put (it is still at
    risk there), which also makes the map idempotent.
    """
    cens = ds.events == 0
    k = np.atleast_1d(np.searchsorted(grid.points, ds.times, side="right"))
    snapped = np.concatenate([[0.0], grid.points])[k]
    times = np.where(cens, snapped, ds.times)
    return replace(ds, times=times)


def stratified_split(ds: SurvivalDataset, fraction: float = 0.5, seed: int = 0) -> SplitAssignment:
    """Split rows into two parts with (nearly) equal censoring rates.

    Censored and uncensored rows are shuffled separately and each stratum is cut at
    ``fraction``; D1 receives ``round(fraction * size)`` rows of each stratum.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    if ds.n < 2:
        raise ValueError("need at least two rows to split")
    rng = np.random.default_rng(seed)
    d1, d2 = [], []
    for stratum in (np.flatnonzero(ds.events == 0), np.flatnonzero(ds.events != 0)):
        perm = rng.permutation(stratum)
        cut = int(np.floor(fraction * perm.size + 0.5))
        d1.append(perm[:cut])
        d2.append(perm[cut:])
    d1 = np.sort(np.concatenate(d1))
    d2 = np.sort(np.concatenate(d2))
    if d1.size == 0 or d2.size == 0:
        raise ValueError("split produced an empty side")
    return SplitAssignment(d1, d2, seed)


def stratified_kfold(ds: SurvivalDataset, k: int, seed: int = 0) -> list:
    """Partition rows into ``k`` folds, dealing each censoring stratum round-robin."""
    if k < 2 or k > ds.n:
        raise ValueError("k must lie in 2..n")
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    offset = 0
    for stratum in (np.flatnonzero(ds.events == 0), np.flatnonzero(ds.events != 0)):
        perm = rng.permutation(stratum)
        for pos, idx in enumerate(perm):
            folds[(pos + offset) % k].append(idx)
        offset = (offset + perm.size) % k
    return [np.sort(np.array(f, dtype=int)) for f in folds]


def make_two_group_mixture(
    n: int = 400,
    minority_fraction: float = 0.2,
    d: int = 3,
    effect: float = 1.0,
    censor_rate: float = 0.3,
    seed: int = 0,
) -> SurvivalDataset:
    """Synthetic two-group proportional-hazards data where the minority's effect is flipped.

    The majority has log hazard ``effect * x[0] + 0.5 * x[1]``; the minority has
    ``-effect * x[0] + 0.5 * x[1]``. Group labels are returned under ``"group"``
    but are not part of the features.
    """
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    minority = rng.random(n) < minority_fraction
    coef = np.zeros(d)
    coef[0] = effect
    if d > 1:
        coef[1] = 0.5
    log_hazard = X @ coef
    log_hazard[minority] -= 2 * effect * X[minority, 0]
    event_times = rng.exponential(1.0, n) * np.exp(-log_hazard)
    # censoring rate for exponential C vs T is roughly rate_c / (rate_c + rate_t)
    c_scale = np.median(event_times) * (1 - censor_rate) / max(censor_rate, 1e-9)
    censor_times = rng.exponential(c_scale, n)
    times = np.minimum(event_times, censor_times)
    events = (event_times <= censor_times).astype(int)
    labels = np.where(minority, "minority", "majority")
    return SurvivalDataset(X, times, events, groups={"group": labels})
