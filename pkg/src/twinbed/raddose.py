"""Voxel dose tables, radiation sources and accumulating dosimeters.

Inside the mesh the tabulated rate is used when it is positive. Elsewhere (and for
empty voxels) the rate falls off exponentially from the mesh boundary::

    D(x) = D(x0) * 0.5 ** ((x - x0) / L)

with x the distance from the mesh centre, x0 the centre-to-boundary distance along
the same ray and L the halving distance. Beyond ``max_range_m`` the rate is 0.
"""
from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

HEADER = ["name", "i", "j", "k", "sv_s", "sv_hr"]
SV_HR_PER_SV_S = 3600.0
UNIT_RTOL = 1e-9


class TableError(ValueError):
    pass


class InvalidPosition(ValueError):
    pass


class Zone(str, enum.Enum):
    IN_MESH = "IN_MESH"
    APPROX_ZONE = "APPROX_ZONE"
    OUT = "OUT"


def _units_agree(sv_s: float, sv_hr: float) -> bool:
    ref = SV_HR_PER_SV_S * sv_s
    return abs(sv_hr - ref) <= UNIT_RTOL * max(abs(sv_hr), abs(ref))


@dataclass
class DoseTable:
    dims: tuple[int, int, int]
    rates_sv_s: np.ndarray                       # dims-shaped, 0 where no row
    names: dict[tuple[int, int, int], str] = field(default_factory=dict)

    @classmethod
    def empty(cls, dims: Sequence[int]) -> "DoseTable":
        d = tuple(int(n) for n in dims)
        if len(d) != 3 or min(d) < 1:
            raise TableError(f"bad mesh dimensions {dims}")
        return cls(d, np.zeros(d))

    @classmethod
    def from_array(cls, rates_sv_s: np.ndarray, prefix: str = "v") -> "DoseTable":
        arr = np.asarray(rates_sv_s, dtype=float)
        if arr.ndim != 3 or np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise TableError("rates must be a finite, non-negative 3-d array")
        names = {idx: f"{prefix}_{idx[0]}_{idx[1]}_{idx[2]}" for idx in np.ndindex(arr.shape)}
        return cls(tuple(arr.shape), arr.copy(), names)

    def __len__(self) -> int:
        return len(self.names)

    def lookup(self, i: int, j: int, k: int) -> float:
        return float(self.rates_sv_s[i, j, k])

    def rows(self) -> Iterable[tuple[str, int, int, int, float, float]]:
        for idx in sorted(self.names):
            r = float(self.rates_sv_s[idx])
            yield self.names[idx], *idx, r, SV_HR_PER_SV_S * r


def load_dose_table(path: str | Path, dims: Sequence[int]) -> DoseTable:
    """Read a ``name,i,j,k,sv_s,sv_hr`` table; voxels without a row read as zero."""
    table = DoseTable.empty(dims)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != HEADER:
            raise TableError(f"{path}: header must be {','.join(HEADER)}")
        for lineno, row in enumerate(reader, 2):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 6:
                raise TableError(f"{path}:{lineno}: expected 6 columns, got {len(row)}")
            try:
                idx = tuple(int(v) for v in row[1:4])
                sv_s, sv_hr = float(row[4]), float(row[5])
            except ValueError:
                raise TableError(f"{path}:{lineno}: unreadable number") from None
            if any(not 0 <= n < d for n, d in zip(idx, table.dims)):
                raise TableError(f"{path}:{lineno}: index {idx} outside mesh {table.dims}")
            if not (math.isfinite(sv_s) and math.isfinite(sv_hr)) or sv_s < 0 or sv_hr < 0:
                raise TableError(f"{path}:{lineno}: rates must be finite and non-negative")
            if not _units_agree(sv_s, sv_hr):
                raise TableError(f"{path}:{lineno}: sv_hr {sv_hr} is not 3600 x sv_s {sv_s}")
            if idx in table.names:
                raise TableError(f"{path}:{lineno}: duplicate voxel {idx}")
            table.names[idx] = row[0]
            table.rates_sv_s[idx] = sv_s
    return table


def write_dose_table(path: str | Path, table: DoseTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HEADER)
        for name, i, j, k, sv_s, sv_hr in table.rows():
            w.writerow([name, i, j, k, repr(sv_s), repr(sv_hr)])


@dataclass(frozen=True)
class RadiationSource:
    origin: tuple[float, float, float]           # mesh minimum corner, world metres
    voxel_size_m: float
    dims: tuple[int, int, int]
    table: DoseTable
    halving_distance_m: float
    boundary_rate_sv_s: float
    max_range_m: float
    boundary_from_table: bool = False            # D(x0) from the exit voxel instead

    def __post_init__(self) -> None:
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        if self.voxel_size_m <= 0 or self.halving_distance_m <= 0:
            raise ValueError("voxel size and halving distance must be positive")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError("dims must be three counts >= 1")
        if tuple(self.table.dims) != self.dims:
            raise ValueError(f"table dims {self.table.dims} differ from source dims {self.dims}")
        if self.boundary_rate_sv_s < 0:
            raise ValueError("boundary rate must be non-negative")
        if self.max_range_m < float(np.linalg.norm(self.half_extent)):
            raise ValueError("max_range_m must reach the mesh corners")

    @property
    def half_extent(self) -> np.ndarray:
        return np.asarray(self.dims, dtype=float) * self.voxel_size_m / 2.0

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.origin) + self.half_extent


def halving_rate(d0: float, x: float, x0: float, L: float) -> float:
    return d0 * 0.5 ** ((x - x0) / L)


@dataclass(frozen=True)
class DoseSample:
    rate_sv_s: float
    zone: Zone
    index: tuple[int, int, int] | None
    distance_m: float
    x0_m: float


def probe(source: RadiationSource, pos: Sequence[float]) -> DoseSample:
    """Evaluate the dose rate at ``pos`` and report how it was obtained."""
    p = np.asarray(pos, dtype=float)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise InvalidPosition(f"position must be three finite coordinates, got {pos!r}")
    # relative voxel index
    idx = np.floor((p - np.asarray(source.origin)) / source.voxel_size_m).astype(np.int64)
    in_mesh = bool(np.all(idx >= 0) and np.all(idx < np.asarray(source.dims)))
    # distance from the mesh centre and bounding
    r = p - source.center
    x = float(np.linalg.norm(r))
    h = source.half_extent
    nz = np.abs(r) > 0
    s = float(np.min(h[nz] / np.abs(r[nz]))) if nz.any() else float("inf")
    x0 = s * x if nz.any() else float(h.min())
    index = tuple(int(v) for v in idx) if in_mesh else None
    if not in_mesh and x > source.max_range_m:
        return DoseSample(0.0, Zone.OUT, None, x, x0)
    # table read
    if in_mesh:
        rate = source.table.lookup(*index)
        if rate > 0:
            return DoseSample(rate, Zone.IN_MESH, index, x, x0)
    # exponential approximation
    d0 = source.boundary_rate_sv_s
    if source.boundary_from_table:
        d0 = _exit_voxel_rate(source, r, s if nz.any() else 1.0)
    zone = Zone.IN_MESH if in_mesh else Zone.APPROX_ZONE
    return DoseSample(halving_rate(d0, x, x0, source.halving_distance_m), zone, index, x, x0)


def _exit_voxel_rate(source: RadiationSource, r: np.ndarray, s: float) -> float:
    exit_pt = source.center + r * s
    idx = np.floor((exit_pt - np.asarray(source.origin)) / source.voxel_size_m).astype(np.int64)
    idx = np.clip(idx, 0, np.asarray(source.dims) - 1)
    return source.table.lookup(*idx)


def update_dose(source: RadiationSource, dosimeter_pos: Sequence[float]) -> float:
    """Dose rate in Sv/s at a position."""
    return probe(source, dosimeter_pos).rate_sv_s


def total_rate(sources: RadiationSource | Sequence[RadiationSource], pos: Sequence[float]) -> float:
    if isinstance(sources, RadiationSource):
        return update_dose(sources, pos)
    return float(sum(update_dose(s, pos) for s in sources))


@dataclass(frozen=True)
class Dosimeter:
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    cumulative_dose_sv: float = 0.0
    current_rate_sv_hr: float = 0.0

    @property
    def current_rate_sv_s(self) -> float:
        return self.current_rate_sv_hr / SV_HR_PER_SV_S


def dosimeter_tick(dosimeter: Dosimeter, sources: RadiationSource | Sequence[RadiationSource],
                   dt_s: float, position: Sequence[float] | None = None) -> Dosimeter:
    """Move (optionally), sample the rate there and accumulate rate * dt."""
    if not dt_s > 0:
        raise ValueError("dt_s must be positive")
    pos = dosimeter.position if position is None else tuple(float(v) for v in position)
    rate = total_rate(sources, pos)
    return replace(dosimeter, position=pos, cumulative_dose_sv=dosimeter.cumulative_dose_sv + rate * dt_s,
                   current_rate_sv_hr=SV_HR_PER_SV_S * rate)


def load_source(path: str | Path) -> RadiationSource:
    """Source definition JSON; ``table`` is resolved relative to the JSON file."""
    p = Path(path)
    try:
        d = json.loads(p.read_text())
        dims = d["dims"]
        table_path = d.get("table")
        table = (load_dose_table(p.parent / table_path, dims) if table_path
                 else DoseTable.empty(dims))
        return RadiationSource(d["origin"], float(d["voxel_size_m"]), dims, table,
                               float(d["halving_distance_m"]), float(d["boundary_rate_sv_s"]),
                               float(d["max_range_m"]), bool(d.get("boundary_from_table", False)))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{p}: bad source definition ({exc})") from None


def default_source_path() -> Path:
    return Path(__file__).parent / "data" / "demo_source.json"
