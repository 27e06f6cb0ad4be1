"""Polling time-series historian: ingest, range/latest queries, CSV export, datasets."""
from __future__ import annotations

import bisect
import csv
import enum
import logging
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tagbus import Message, Op, Quality, TagbusError, TagLink, TagValue, UnknownTag

log = logging.getLogger(__name__)


class ManifestError(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


class Source(str, enum.Enum):
    PLC = "PLC"
    PLANT = "PLANT"


@dataclass(frozen=True)
class Sample:
    t_ms: int
    value: float
    quality: Quality = Quality.GOOD


@dataclass(frozen=True)
class SensorManifestEntry:
    tag: str
    source: Source
    period_ms: int


MANIFEST_HEADER = ["tag", "source", "period_ms"]


def parse_manifest(text: str, origin: str = "<manifest>") -> list[SensorManifestEntry]:
    rows = list(csv.reader(text.splitlines()))
    if not rows or [c.strip() for c in rows[0]] != MANIFEST_HEADER:
        raise ManifestError(f"{origin}:1: header must be {','.join(MANIFEST_HEADER)}")
    out: list[SensorManifestEntry] = []
    seen: set[str] = set()
    for lineno, row in enumerate(rows[1:], 2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise ManifestError(f"{origin}:{lineno}: expected 3 columns, got {len(row)}")
        tag, src, period = (c.strip() for c in row)
        if not tag:
            raise ManifestError(f"{origin}:{lineno}: empty tag")
        if tag in seen:
            raise ManifestError(f"{origin}:{lineno}: duplicate tag {tag}")
        try:
            source = Source(src.upper())
        except ValueError:
            raise ManifestError(f"{origin}:{lineno}: unknown source {src!r}") from None
        try:
            period_ms = int(period)
        except ValueError:
            raise ManifestError(f"{origin}:{lineno}: period_ms {period!r} is not an integer") from None
        if period_ms < 10:
            raise ManifestError(f"{origin}:{lineno}: period_ms must be >= 10")
        seen.add(tag)
        out.append(SensorManifestEntry(tag, source, period_ms))
    return out


def load_manifest(path: str | Path) -> list[SensorManifestEntry]:
    p = Path(path)
    return parse_manifest(p.read_text(), str(p))


@dataclass
class DatasetBundle:
    times: np.ndarray
    columns: list[str]
    features: np.ndarray
    labels: np.ndarray | None
    splits: dict[str, slice]

    def part(self, name: str) -> tuple[np.ndarray, np.ndarray | None]:
        sl = self.splits[name]
        return self.features[sl], None if self.labels is None else self.labels[sl]


@dataclass
class _Series:
    times: list[int] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    quality: list[Quality] = field(default_factory=list)
    flushed: int = 0


def _interval_flags(times: np.ndarray, intervals: Iterable) -> np.ndarray:
    flags = np.zeros(len(times), dtype=np.int8)
    for start, end in intervals:
        hi = np.inf if end is None else end
        flags[(times >= start) & (times < hi)] = 1
    return flags


class Historian:
    """In-memory per-series store fed by polling tag sources.

    One poller writes; readers get a consistent copy per query.
    """

    def __init__(self, sources: dict[Source | str, TagLink] | None = None,
                 manifest: Sequence[SensorManifestEntry] = (),
                 snapshot_dir: str | Path | None = None) -> None:
        self.sources = {Source(k): v for k, v in (sources or {}).items()}
        self.manifest = list(manifest)
        self.snapshot_dir = Path(snapshot_dir) if snapshot_dir else None
        self.series: dict[str, _Series] = defaultdict(_Series)
        self.missing: list[tuple[str, int]] = []
        self.last_poll: dict[str, int] = {}
        self.lock = threading.RLock()
        for e in self.manifest:
            self.series[e.tag]

    # -- ingest ---------------------------------------------------------
    def append(self, tag: str, sample: Sample) -> bool:
        """Append unless the timestamp is not newer than the last one stored."""
        with self.lock:
            s = self.series[tag]
            if s.times and sample.t_ms <= s.times[-1]:
                return False
            s.times.append(sample.t_ms)
            s.values.append(float(sample.value))
            s.quality.append(sample.quality)
            return True

    def poll_once(self, now_ms: int) -> int:
        """Poll every due manifest entry, one READ per source; returns samples appended."""
        due: dict[Source, list[str]] = defaultdict(list)
        for e in self.manifest:
            last = self.last_poll.get(e.tag)
            if last is None or now_ms - last >= e.period_ms:
                due[e.source].append(e.tag)
        added = 0
        for source, tags in due.items():
            for t in tags:
                self.last_poll[t] = now_ms
            link = self.sources.get(source)
            try:
                if link is None:
                    raise TagbusError(f"no link for source {source.value}")
                values = link.read_tags(tags)
            except TagbusError as exc:
                log.warning("poll of %s failed at %d ms: %s", source.value, now_ms, exc)
                with self.lock:
                    self.missing.extend((t, now_ms) for t in tags)
                continue
            for tag in tags:
                tv = values.get(tag)
                if tv is None or isinstance(tv.value, str):
                    with self.lock:
                        self.missing.append((tag, now_ms))
                    continue
                added += self.append(tag, Sample(tv.timestamp_ms, float(tv.value), tv.quality))
        return added

    # -- queries --------------------------------------------------------
    def tags(self) -> list[str]:
        with self.lock:
            return sorted(self.series)

    def _get(self, tag: str) -> _Series:
        if tag not in self.series:
            raise UnknownTag(tag)
        return self.series[tag]

    def query_range(self, tag: str, t0: int, t1: int) -> list[Sample]:
        """Samples with t0 <= t < t1, ascending."""
        with self.lock:
            s = self._get(tag)
            lo = bisect.bisect_left(s.times, t0)
            hi = bisect.bisect_left(s.times, t1)
            return [Sample(s.times[i], s.values[i], s.quality[i]) for i in range(lo, max(lo, hi))]

    def latest(self, tag: str) -> Sample | None:
        with self.lock:
            s = self._get(tag)
            if not s.times:
                return None
            return Sample(s.times[-1], s.values[-1], s.quality[-1])

    def series_arrays(self, tag: str) -> tuple[np.ndarray, np.ndarray]:
        with self.lock:
            s = self._get(tag)
            return np.array(s.times, dtype=np.int64), np.array(s.values, dtype=float)

    # -- export ---------------------------------------------------------
    def aligned(self, tags: Sequence[str], t0: int | None = None,
                t1: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Rows on the union of sample times, each tag carried forward from its last sample."""
        if not tags:
            raise EmptyDataset("no tags requested")
        with self.lock:
            arrays = [self.series_arrays(t) for t in tags]
        times = np.unique(np.concatenate([a[0] for a in arrays])) if arrays else np.array([])
        if t0 is not None:
            times = times[times >= t0]
        if t1 is not None:
            times = times[times < t1]
        cols = []
        valid = np.ones(len(times), dtype=bool)
        for ts, vs in arrays:
            idx = np.searchsorted(ts, times, side="right") - 1
            valid &= idx >= 0
            cols.append(np.where(idx >= 0, vs[np.clip(idx, 0, None)] if len(vs) else 0.0, np.nan))
        if not valid.any():
            raise EmptyDataset(f"no overlapping coverage for {list(tags)}")
        feats = np.column_stack(cols)[valid] if cols else np.empty((0, 0))
        return times[valid], feats

    def export_csv(self, tags: Sequence[str], t0: int | None, t1: int | None,
                   path: str | Path) -> int:
        times, feats = self.aligned(tags, t0, t1)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_ms", *tags])
            for t, row in zip(times, feats):
                w.writerow([int(t), *(repr(float(v)) for v in row)])
        return len(times)

    def build_dataset(self, tags: Sequence[str], labels: Iterable | None = None,
                      splits: Sequence[float] = (0.7, 0.15, 0.15), t0: int | None = None,
                      t1: int | None = None) -> DatasetBundle:
        """Aligned features plus optional attack flags from (start, end) intervals."""
        if len(splits) != 3 or any(f < 0 for f in splits) or abs(sum(splits) - 1.0) > 1e-9:
            raise ValueError("splits must be three non-negative fractions summing to 1")
        times, feats = self.aligned(tags, t0, t1)
        n = len(times)
        n_train = int(round(n * splits[0]))
        n_val = min(n - n_train, int(round(n * splits[1])))
        parts = {"train": slice(0, n_train), "val": slice(n_train, n_train + n_val),
                 "test": slice(n_train + n_val, n)}
        flags = None if labels is None else _interval_flags(times, labels)
        return DatasetBundle(times, list(tags), feats, flags, parts)

    # -- persistence ----------------------------------------------------
    def flush_snapshot(self, directory: str | Path | None = None) -> None:
        """Append samples not yet written to ``<dir>/<tag>.csv`` (one file per tag)."""
        d = Path(directory) if directory else self.snapshot_dir
        if d is None:
            return
        d.mkdir(parents=True, exist_ok=True)
        with self.lock:
            for tag, s in self.series.items():
                path = d / f"{tag}.csv"
                new_file = not path.exists()
                if not new_file and s.flushed == len(s.times):
                    continue
                with open(path, "a", newline="") as fh:
                    w = csv.writer(fh)
                    if new_file:
                        w.writerow(["t_ms", "value", "quality"])
                        s.flushed = 0
                    for i in range(s.flushed, len(s.times)):
                        w.writerow([s.times[i], repr(s.values[i]), s.quality[i].value])
                s.flushed = len(s.times)

    @classmethod
    def from_snapshot(cls, directory: str | Path) -> "Historian":
        h = cls()
        for path in sorted(Path(directory).glob("*.csv")):
            with open(path, newline="") as fh:
                rows = csv.DictReader(fh)
                for r in rows:
                    h.append(path.stem, Sample(int(r["t_ms"]), float(r["value"]),
                                               Quality(r["quality"])))
            h.series[path.stem].flushed = len(h.series[path.stem].times)
        return h

    # -- tagbus ---------------------------------------------------------
    def handle(self, msg: Message) -> Message:
        if msg.op in (Op.READ, Op.SUBSCRIBE_POLL):
            out = {}
            for tag in msg.tags:
                s = self.latest(tag)
                if s is None:
                    raise UnknownTag(tag)
                out[tag] = TagValue(tag, s.value, s.t_ms, s.quality)
            return msg.answer(out)
        if msg.op is Op.WRITE:
            raise TagbusError("historian is read-only over the network")
        with self.lock:
            n = len(self.series)
        return msg.answer({"component": TagValue("component", "historian"),
                           "series": TagValue("series", n)})


def import_csv(path: str | Path) -> dict[str, list[Sample]]:
    """Read an exported CSV back into per-tag samples."""
    out: dict[str, list[Sample]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "time_ms":
            raise ValueError(f"{path}: first column must be time_ms")
        for tag in header[1:]:
            out[tag] = []
        for row in reader:
            t = int(row[0])
            for tag, cell in zip(header[1:], row[1:]):
                out[tag].append(Sample(t, float(cell)))
    return out
