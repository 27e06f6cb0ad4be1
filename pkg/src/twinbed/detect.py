"""Analytic attack detectors over historian series and scenario-level scoring.

Two detectors: a rolling z-score for step-like injections and an averaged
periodogram peak test for oscillations. Both are pure functions of the series.
"""
from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import apply_kv, load_kv

log = logging.getLogger(__name__)

STD_FLOOR = 1e-6


class DetectionKind(str, enum.Enum):
    STEP = "STEP"
    OSCILLATION = "OSCILLATION"


@dataclass(frozen=True)
class DetectorConfig:
    window: int = 64
    k_sigma: float = 6.0
    spectral_window: int = 1024      # samples per periodogram segment
    peak_ratio_threshold: float = 10.0
    spectral_segments: int = 4       # half-overlapping segments averaged per decision
    min_freq_hz: float = 0.2         # bins below this are ignored (drift, trends)
    max_freq_hz: float = 10.0        # plant Nyquist; above it the held command is shaped by the hold
    sample_rate_hz: float = 100.0

    def __post_init__(self) -> None:
        if self.window < 8 or self.spectral_window < 8:
            raise ValueError("detector windows must hold at least 8 samples")
        if self.spectral_window > 1024:
            raise ValueError("spectral_window is limited to 1024 samples")
        if self.k_sigma <= 0 or self.peak_ratio_threshold <= 0:
            raise ValueError("detector thresholds must be positive")
        if (self.spectral_segments < 1 or self.sample_rate_hz <= 0 or self.min_freq_hz < 0
                or self.max_freq_hz <= self.min_freq_hz):
            raise ValueError("bad spectral settings")

    @property
    def spectral_span(self) -> int:
        """Samples consumed by one spectral decision."""
        half = self.spectral_window // 2
        return self.spectral_window + half * (self.spectral_segments - 1)

    @classmethod
    def from_file(cls, path) -> "DetectorConfig":
        return apply_kv(cls(), load_kv(path))


@dataclass(frozen=True)
class Detection:
    tag: str
    t_ms: int
    kind: DetectionKind
    score: float
    threshold: float
    freq_hz: float | None = None


def _as_times(n: int, times_ms, sample_rate_hz: float) -> np.ndarray:
    if times_ms is None:
        return np.round(np.arange(n) * 1000.0 / sample_rate_hz).astype(np.int64)
    t = np.asarray(times_ms, dtype=np.int64)
    if len(t) != n:
        raise ValueError("times and values differ in length")
    return t


def zscore_detect(series: Sequence[float], cfg: DetectorConfig = DetectorConfig(),
                  times_ms: Sequence[int] | None = None, tag: str = "") -> list[Detection]:
    """Flag samples farther than k_sigma rolling standard deviations from the rolling mean.

    Rolling statistics use the ``window`` samples strictly before the tested one.
    """
    x = np.asarray(series, dtype=float)
    if len(x) <= cfg.window:
        raise ValueError(f"series needs more than {cfg.window} samples")
    t = _as_times(len(x), times_ms, cfg.sample_rate_hz)
    hist = sliding_window_view(x, cfg.window)[:-1]
    mu = hist.mean(axis=1)
    sd = np.maximum(hist.std(axis=1), STD_FLOOR)
    z = np.abs(x[cfg.window:] - mu) / sd
    hits = np.flatnonzero(z > cfg.k_sigma)
    return [Detection(tag, int(t[i + cfg.window]), DetectionKind.STEP, float(z[i]), cfg.k_sigma)
            for i in hits]


@lru_cache(maxsize=8)
def dft_matrix(n: int) -> np.ndarray:
    """Rows k = 0..n/2 of the n-point DFT: M[k, j] = exp(-2*pi*i*k*j/n)."""
    k = np.arange(n // 2 + 1)[:, None]
    j = np.arange(n)[None, :]
    return np.exp(-2j * np.pi * ((k * j) % n) / n)


@lru_cache(maxsize=8)
def _hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def _detrend(seg: np.ndarray) -> np.ndarray:
    n = seg.shape[-1]
    u = np.arange(n) - (n - 1) / 2
    mean = seg.mean(axis=-1, keepdims=True)
    slope = (seg @ u / (u @ u))[..., None]
    return seg - mean - slope * u


def periodogram(x: np.ndarray, cfg: DetectorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Averaged, Hann-windowed, detrended power spectrum over one spectral span."""
    n, half = cfg.spectral_window, cfg.spectral_window // 2
    segs = np.stack([x[i * half:i * half + n] for i in range(cfg.spectral_segments)])
    spec = dft_matrix(n) @ (_detrend(segs) * _hann(n)).T
    power = (np.abs(spec) ** 2).mean(axis=1)
    freqs = np.arange(n // 2 + 1) * cfg.sample_rate_hz / n
    return freqs, power


def spectral_detect(series: Sequence[float], cfg: DetectorConfig = DetectorConfig(),
                    times_ms: Sequence[int] | None = None, tag: str = "") -> list[Detection]:
    """Slide a spectral span along the series (hop = one segment) and test the peak bin.

    Fires when the strongest bin in [min_freq_hz, max_freq_hz] exceeds the median
    bin power of that band by ``peak_ratio_threshold``. Spans with gaps or
    non-finite values are skipped.
    """
    x = np.asarray(series, dtype=float)
    span = cfg.spectral_span
    t = _as_times(len(x), times_ms, cfg.sample_rate_hz)
    dt_nominal = 1000.0 / cfg.sample_rate_hz
    out = []
    for start in range(0, len(x) - span + 1, cfg.spectral_window):
        w = x[start:start + span]
        tw = t[start:start + span]
        if not np.all(np.isfinite(w)) or np.any(np.abs(np.diff(tw) - dt_nominal) > 0.5 * dt_nominal):
            log.info("spectral window at %d ms has gaps; skipped", int(tw[0]))
            continue
        freqs, power = periodogram(w, cfg)
        band = (freqs >= cfg.min_freq_hz) & (freqs <= cfg.max_freq_hz)
        band[-1] = False  # Nyquist bin
        p = power[band]
        med = np.median(p)
        # rounding residue of a flat span: nothing to test
        floor = (np.finfo(float).eps * cfg.spectral_window * max(1.0, np.abs(w).max())) ** 2
        if med <= 0 or p.max() <= 100 * floor:
            continue
        k = int(np.argmax(p))
        ratio = float(p[k] / med)
        if ratio > cfg.peak_ratio_threshold:
            out.append(Detection(tag, int(tw[-1]), DetectionKind.OSCILLATION, ratio,
                                 cfg.peak_ratio_threshold, float(freqs[band][k])))
    return out


# -- scoring ---------------------------------------------------------------

@dataclass
class Metrics:
    intervals: int = 0
    detected: int = 0
    false_alarms: int = 0
    benign_samples: int = 0
    latencies_ms: list[int] = field(default_factory=list)

    @property
    def detection_rate(self) -> float:
        return self.detected / self.intervals if self.intervals else 1.0

    @property
    def false_alarm_rate(self) -> float:
        return self.false_alarms / self.benign_samples if self.benign_samples else 0.0

    @property
    def mean_latency_ms(self) -> float:
        return float(np.mean(self.latencies_ms)) if self.latencies_ms else float("nan")

    def __add__(self, other: "Metrics") -> "Metrics":
        return Metrics(self.intervals + other.intervals, self.detected + other.detected,
                       self.false_alarms + other.false_alarms,
                       self.benign_samples + other.benign_samples,
                       self.latencies_ms + other.latencies_ms)

    def as_dict(self) -> dict[str, float]:
        return {"detection_rate": self.detection_rate, "false_alarm_rate": self.false_alarm_rate,
                "mean_latency_ms": self.mean_latency_ms, "intervals": self.intervals,
                "detected": self.detected, "false_alarms": self.false_alarms,
                "benign_samples": self.benign_samples}


def _interval_bounds(lab) -> tuple[int, int]:
    if hasattr(lab, "start_ms"):
        return lab.start_ms, lab.end_ms
    return int(lab[0]), int(lab[1])


def evaluate(detections: Iterable[Detection], ground_truth: Iterable,
             times_ms: Sequence[int] = (), grace_ms: int = 0) -> Metrics:
    """Score one run.

    An attack interval counts as detected when some detection falls in
    [start, end + grace_ms]. Detections outside every such range are false alarms,
    normalised by the number of sample times outside them.
    """
    spans = [_interval_bounds(g) for g in ground_truth]
    dets = sorted(detections, key=lambda d: d.t_ms)
    m = Metrics(intervals=len(spans))
    covered = [False] * len(dets)
    for start, end in spans:
        hit = [i for i, d in enumerate(dets) if start <= d.t_ms <= end + grace_ms]
        for i in hit:
            covered[i] = True
        if hit:
            m.detected += 1
            m.latencies_ms.append(dets[hit[0]].t_ms - start)
    m.false_alarms = covered.count(False)
    t = np.asarray(times_ms, dtype=np.int64)
    benign = np.ones(len(t), dtype=bool)
    for start, end in spans:
        benign &= ~((t >= start) & (t <= end + grace_ms))
    m.benign_samples = int(benign.sum())
    return m


def combine(metrics: Iterable[Metrics]) -> Metrics:
    total = Metrics()
    for m in metrics:
        total = total + m
    return total


def write_detections(path: str | Path, detections: Iterable[Detection]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tag", "t_ms", "kind", "score", "threshold", "freq_hz"])
        for d in detections:
            w.writerow([d.tag, d.t_ms, d.kind.value, repr(d.score), d.threshold,
                        "" if d.freq_hz is None else repr(d.freq_hz)])


def write_metrics(path: str | Path, metrics: Metrics) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in metrics.as_dict().items():
            w.writerow([k, v])


def read_series_csv(path: str | Path, column: str | None = None
                    ) -> tuple[np.ndarray, np.ndarray, str]:
    """Read ``time_ms,<tag>...`` CSV; returns times, values and the column used."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "time_ms" or len(header) < 2:
            raise ValueError(f"{path}: expected a time_ms,<tag> header")
        col = column or header[1]
        if col not in header[1:]:
            raise ValueError(f"{path}: no column {col!r}")
        j = header.index(col)
        rows = [(int(r[0]), float(r[j])) for r in reader if r]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    t, v = zip(*rows)
    return np.array(t, dtype=np.int64), np.array(v, dtype=float), col
