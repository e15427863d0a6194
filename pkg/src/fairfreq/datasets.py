"""Datasets: ingestion of raw check-ins and incomes, synthetic generators, and
the canonical on-disk format.

Canonical format: first line ``N=<int>``, then one item label (``1..N``) per
line, one line per user.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .field import encode_one_hot
from .streams import as_generator

__all__ = [
    "Dataset",
    "load_dataset",
    "save_dataset",
    "ingest_checkins",
    "ingest_income",
    "synth_uniform",
    "synth_normal",
    "synth_checkins",
    "synth_checkin_dataset",
    "GOWALLA_LAT",
    "GOWALLA_LON",
]

log = logging.getLogger(__name__)

GOWALLA_LAT = (30.0, 45.0)
GOWALLA_LON = (-100.0, -80.0)


@dataclass(frozen=True, eq=False)
class Dataset:
    """One item label in ``1..N`` per user."""

    name: str
    N: int
    items: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        items = np.array(self.items, dtype=np.int64).reshape(-1)
        if self.N < 1:
            raise ValueError("N must be at least 1")
        if items.size and (items.min() < 1 or items.max() > self.N):
            raise ValueError(f"item labels must lie in 1..{self.N}")
        items.setflags(write=False)
        object.__setattr__(self, "items", items)

    @property
    def n(self) -> int:
        return int(self.items.size)

    def counts(self) -> np.ndarray:
        return np.bincount(self.items, minlength=self.N + 1)[1:]

    def frequencies(self) -> np.ndarray:
        if self.n == 0:
            raise ValueError("empty dataset has no frequencies")
        return self.counts() / self.n

    def min_item_fraction(self) -> float:
        """Empirical beta: the smallest item frequency."""
        return float(self.counts().min() / self.n)

    def records(self, field=None):
        return [encode_one_hot(int(i), self.N, field) for i in self.items]

    def subsample(self, n: int, rng=None, name: Optional[str] = None) -> "Dataset":
        """``n`` users drawn without replacement."""
        if n > self.n:
            raise ValueError(f"cannot draw {n} users from {self.n}")
        idx = np.sort(as_generator(rng).choice(self.n, size=n, replace=False))
        prov = dict(self.provenance, subsample=n)
        return Dataset(name or f"{self.name}[{n}]", self.N, self.items[idx], prov)

    def take(self, index) -> "Dataset":
        return Dataset(self.name, self.N, self.items[np.asarray(index)], dict(self.provenance))

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.N == other.N and np.array_equal(self.items, other.items)

    __hash__ = None


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"N={ds.N}\n")
        fh.writelines(f"{i}\n" for i in ds.items.tolist())


def load_dataset(path, name: Optional[str] = None) -> Dataset:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("N="):
            raise ValueError(f"{path}: first line must be 'N=<int>', got {header!r}")
        N = int(header[2:])
        items = [int(line) for line in fh if line.strip()]
    return Dataset(name or path.stem, N, np.array(items, dtype=np.int64), {"source": str(path)})


def _split(line: str, delimiter: Optional[str]) -> List[str]:
    if delimiter is not None:
        return line.rstrip("\r\n").split(delimiter)
    if "\t" in line:
        return line.rstrip("\r\n").split("\t")
    if "," in line:
        return line.rstrip("\r\n").split(",")
    return line.split()


def _grid_shape(lat_range, lon_range, cell_size, grid) -> Tuple[int, int, float, float]:
    lat_span = lat_range[1] - lat_range[0]
    lon_span = lon_range[1] - lon_range[0]
    if lat_span <= 0 or lon_span <= 0:
        raise ValueError("ranges must be increasing")
    if grid is not None:
        rows, cols = int(grid[0]), int(grid[1])
        return rows, cols, lat_span / rows, lon_span / cols
    dlat, dlon = float(cell_size[0]), float(cell_size[1])
    rows = max(1, math.ceil(round(lat_span / dlat, 9)))
    cols = max(1, math.ceil(round(lon_span / dlon, 9)))
    return rows, cols, dlat, dlon


def ingest_checkins(
    source,
    lat_range: Sequence[float] = GOWALLA_LAT,
    lon_range: Sequence[float] = GOWALLA_LON,
    cell_size: Sequence[float] = (5.0, 5.0),
    grid: Optional[Sequence[int]] = None,
    columns: Sequence[int] = (0, 2, 3),
    delimiter: Optional[str] = None,
    name: str = "checkins",
) -> Dataset:
    """Map every user to the grid cell they visited most often.

    ``source`` is a path or an iterable of lines.  ``columns`` gives the
    positions of user id, latitude and longitude (Gowalla layout by
    default).  Check-ins outside the box are dropped.  Cells are numbered
    row-major from the south-west corner starting at 1; ties go to the
    lowest cell.  Pass ``grid=(rows, cols)`` to split the box into a fixed
    number of cells instead of fixed-size cells.
    """
    rows, cols, dlat, dlon = _grid_shape(lat_range, lon_range, cell_size, grid)
    ucol, latcol, loncol = columns
    visits = {}
    malformed = dropped = 0
    lines: Iterable[str] = open(source, encoding="utf-8") if isinstance(source, (str, Path)) else source
    try:
        for line in lines:
            if not line.strip():
                continue
            parts = _split(line, delimiter)
            try:
                user = parts[ucol].strip()
                lat = float(parts[latcol])
                lon = float(parts[loncol])
            except (IndexError, ValueError):
                malformed += 1
                continue
            if not (math.isfinite(lat) and math.isfinite(lon)):
                malformed += 1
                continue
            if not (lat_range[0] <= lat <= lat_range[1] and lon_range[0] <= lon <= lon_range[1]):
                dropped += 1
                continue
            r = min(int((lat - lat_range[0]) // dlat), rows - 1)
            c = min(int((lon - lon_range[0]) // dlon), cols - 1)
            visits.setdefault(user, np.zeros(rows * cols, dtype=np.int64))[r * cols + c] += 1
    finally:
        if isinstance(source, (str, Path)):
            lines.close()
    if malformed:
        log.warning("skipped %d malformed check-in rows", malformed)
    if not visits:
        raise ValueError("no check-ins inside the requested range")
    # argmax returns the first (lowest) index among ties
    items = np.array([int(v.argmax()) + 1 for v in visits.values()], dtype=np.int64)
    prov = {
        "lat_range": tuple(lat_range), "lon_range": tuple(lon_range),
        "cell_size": (dlat, dlon), "grid": (rows, cols),
        "malformed": malformed, "out_of_range": dropped,
    }
    return Dataset(name, rows * cols, items, prov)


def ingest_income(source, width: float = 100, column: Optional[int] = None,
                  delimiter: Optional[str] = None, name: str = "income") -> Dataset:
    """Bin incomes into intervals ``[k*width, (k+1)*width)`` labelled ``k+1``.

    ``column`` selects the income field of a delimited file; by default each
    line holds a single number.  Negative or non-numeric values are skipped.
    """
    if not width > 0:
        raise ValueError("width must be positive")
    skipped = 0
    labels = []
    lines: Iterable[str] = open(source, encoding="utf-8") if isinstance(source, (str, Path)) else source
    try:
        for line in lines:
            if not line.strip():
                continue
            if column is None:
                raw = line.strip()
            else:
                parts = _split(line, delimiter)
                raw = parts[column] if len(parts) > column else ""
            try:
                value = float(raw)
            except ValueError:
                skipped += 1
                continue
            if not math.isfinite(value) or value < 0:
                skipped += 1
                continue
            labels.append(int(value // width) + 1)
    finally:
        if isinstance(source, (str, Path)):
            lines.close()
    if skipped:
        log.warning("skipped %d negative or non-numeric incomes", skipped)
    if not labels:
        raise ValueError("no usable incomes")
    items = np.array(labels, dtype=np.int64)
    return Dataset(name, int(items.max()), items, {"width": width, "skipped": skipped})


def synth_uniform(n: int = 1000, N: int = 30, seed=None) -> Dataset:
    if n < 1 or N < 1:
        raise ValueError("n and N must be positive")
    items = as_generator(seed).integers(1, N + 1, size=n)
    return Dataset("uniform", N, items, {"generator": "uniform", "seed": seed})


def synth_normal(n: int = 1000, N: int = 30, seed=None, clip: float = 3.0) -> Dataset:
    """Standard normal draws clipped to ``[-clip, clip]`` and cut into ``N`` equal bins."""
    if n < 1 or N < 1:
        raise ValueError("n and N must be positive")
    x = np.clip(as_generator(seed).standard_normal(n), -clip, clip)
    items = np.minimum(((x + clip) / (2 * clip) * N).astype(np.int64), N - 1) + 1
    prov = {"generator": "normal", "seed": seed, "clip": clip, "bins": N}
    return Dataset("normal", N, items, prov)


def synth_checkins(n_users: int = 1000, seed=None, lat_range=GOWALLA_LAT, lon_range=GOWALLA_LON,
                   cell_size=(5.0, 5.0), home_share: float = 0.7, max_checkins: int = 12,
                   stray: float = 0.05) -> List[str]:
    """Tab-separated check-in lines (Gowalla column layout) for synthetic users.

    Each user has a home cell drawn from a skewed popularity profile;
    ``home_share`` of their check-ins fall in it, the rest anywhere in the
    box, and a ``stray`` fraction lands outside the box entirely.
    """
    rng = as_generator(seed)
    rows, cols, dlat, dlon = _grid_shape(lat_range, lon_range, cell_size, None)
    cells = rows * cols
    popularity = rng.dirichlet(np.full(cells, 2.0))
    lines = []
    for u in range(n_users):
        home = rng.choice(cells, p=popularity)
        hr, hc = divmod(int(home), cols)
        for _ in range(int(rng.integers(1, max_checkins + 1))):
            roll = rng.random()
            if roll < stray:
                lat = rng.uniform(lat_range[1] + 1, lat_range[1] + 10)
                lon = rng.uniform(*lon_range)
            elif roll < stray + home_share:
                lat = lat_range[0] + (hr + rng.random()) * dlat
                lon = lon_range[0] + (hc + rng.random()) * dlon
                lat, lon = min(lat, lat_range[1]), min(lon, lon_range[1])
            else:
                lat = rng.uniform(*lat_range)
                lon = rng.uniform(*lon_range)
            lines.append(f"u{u}\t2010-01-01T00:00:00Z\t{lat:.6f}\t{lon:.6f}\t0")
    return lines


def synth_checkin_dataset(n_users: int = 1000, seed=None, **kwargs) -> Dataset:
    box = {k: kwargs[k] for k in ("lat_range", "lon_range", "cell_size") if k in kwargs}
    lines = synth_checkins(n_users, seed, **kwargs)
    ds = ingest_checkins(lines, name="checkins-synthetic", **box)
    prov = dict(ds.provenance, generator="checkins", seed=seed)
    return Dataset(ds.name, ds.N, ds.items, prov)
