import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from twinbed.detect import (Detection, DetectionKind, DetectorConfig, Metrics, combine, dft_matrix,
                            evaluate, periodogram, read_series_csv, spectral_detect,
                            write_detections, zscore_detect)

CFG = DetectorConfig()


@pytest.mark.parametrize("n", [8, 64, 1000, 1024])
def test_dft_matches_fft(n):
    x = np.random.default_rng(n).normal(size=n)
    np.testing.assert_allclose(dft_matrix(n) @ x, np.fft.rfft(x), atol=1e-9 * n)


def test_periodogram_peak_bin():
    n = CFG.spectral_span
    t = np.arange(n) / 100.0
    freqs, power = periodogram(np.sin(2 * np.pi * 2.5 * t), CFG)
    assert freqs[np.argmax(power)] == pytest.approx(2.5, abs=100 / 1024)


def test_constant_series_no_detections():
    x = np.full(5000, 14.77)
    assert zscore_detect(x) == []
    assert spectral_detect(x) == []


def test_step_detected_within_one_sample():
    rng = np.random.default_rng(0)
    x = 14.77 + rng.normal(0, 0.02, 600)
    x[400:] = 200.0
    dets = zscore_detect(x, times_ms=np.arange(600) * 100)
    assert dets and dets[0].t_ms == 40_000
    assert all(d.score > d.threshold for d in dets)


def test_ramp_within_noise_is_quiet():
    rng = np.random.default_rng(1)
    x = 14.77 + np.linspace(0, 0.05, 2000) + rng.normal(0, 0.02, 2000)
    assert zscore_detect(x) == []


@given(st.lists(st.integers(-1000, 1000), min_size=70, max_size=200), st.integers(-10**6, 10**6))
def test_zscore_shift_invariant(values, c):
    x = np.array(values, dtype=float)
    a = [(d.t_ms, d.score) for d in zscore_detect(x)]
    b = [(d.t_ms, d.score) for d in zscore_detect(x + c)]
    assert [t for t, _ in a] == [t for t, _ in b]
    np.testing.assert_allclose([s for _, s in a], [s for _, s in b], rtol=1e-9)


@given(st.lists(st.floats(-100, 100), min_size=70, max_size=200))
def test_zscore_deterministic(values):
    assert zscore_detect(values) == zscore_detect(list(values))


def test_white_noise_false_positive_rate():
    rng = np.random.default_rng(1234)
    span = CFG.spectral_span
    fired = sum(bool(spectral_detect(rng.normal(size=span))) for _ in range(100))
    assert fired / 100 < 0.01


def test_sinusoid_detected_at_one_hz():
    rng = np.random.default_rng(2)
    t = np.arange(12_000) / 100.0
    x = 0.5 + 0.02 * np.sin(2 * np.pi * 1.0 * t) + rng.normal(0, 1e-3, t.size)
    dets = spectral_detect(x, tag="FW_VALVE_CMD")
    assert dets
    assert all(d.kind is DetectionKind.OSCILLATION for d in dets)
    assert all(abs(d.freq_hz - 1.0) <= 0.1 for d in dets)


def test_gappy_window_skipped():
    t = np.arange(3000) * 10
    t[1500:] += 500
    x = np.sin(2 * np.pi * np.arange(3000) / 100.0)
    assert spectral_detect(x, times_ms=t) == []


@pytest.mark.parametrize("kw", [{"window": 0}, {"spectral_window": 4}, {"k_sigma": 0},
                                {"peak_ratio_threshold": -1}, {"spectral_window": 2048}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        DetectorConfig(**kw)


def det(t):
    return Detection("X", t, DetectionKind.STEP, 10.0, 6.0)


def test_evaluate_perfect_and_empty():
    times = np.arange(0, 100_000, 100)
    runs = [evaluate([det(60_000)], [(60_000, 90_000)], times) for _ in range(10)]
    total = combine(runs)
    assert total.detection_rate == 1.0 and total.false_alarm_rate == 0.0
    assert total.mean_latency_ms == 0.0
    assert evaluate([], [(60_000, 90_000)], times).detection_rate == 0.0


def test_evaluate_grace_and_false_alarms():
    times = np.arange(0, 10_000, 100)
    m = evaluate([det(5_050), det(1_000)], [(2_000, 5_000)], times, grace_ms=100)
    assert m.detected == 1 and m.latencies_ms == [3_050]
    assert m.false_alarms == 1
    assert m.benign_samples == 100 - 32
    assert m + Metrics() == m


def test_csv_helpers(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("time_ms,A,B\n0,1.0,2.0\n10,3.0,4.0\n")
    t, v, col = read_series_csv(p, "B")
    assert t.tolist() == [0, 10] and v.tolist() == [2.0, 4.0] and col == "B"
    with pytest.raises(ValueError):
        read_series_csv(p, "C")
    write_detections(tmp_path / "d.csv", [det(1)])
    assert (tmp_path / "d.csv").read_text().splitlines()[1].startswith("X,1,STEP")
