import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from twinbed.historian import (EmptyDataset, Historian, ManifestError, Sample, SensorManifestEntry,
                               Source, import_csv, parse_manifest)
from twinbed.tagbus import LocalLink, Message, Op, TagValue, UnknownTag


class FakePlc:
    def __init__(self):
        self.values = {}

    def set(self, tag, value, t):
        self.values[tag] = TagValue(tag, value, t)

    def handle(self, msg: Message) -> Message:
        return msg.answer({t: self.values[t] for t in msg.tags})


def make(tags=("CW_TEMP",), period=100):
    plc = FakePlc()
    link = LocalLink(plc.handle)
    hist = Historian({Source.PLC: link}, [SensorManifestEntry(t, Source.PLC, period) for t in tags])
    return plc, link, hist


def test_poll_after_fdi_write():
    plc, _, hist = make()
    plc.set("CW_TEMP", 14.77, 0)
    hist.poll_once(0)
    plc.set("CW_TEMP", 200.0, 60_000)
    hist.poll_once(100)
    assert hist.latest("CW_TEMP") == Sample(60_000, 200.0)


def test_source_down_leaves_gap():
    plc, link, hist = make()
    for t in range(0, 1000, 100):
        plc.set("CW_TEMP", 1.0 + t, t)
        link.down = 300 <= t < 700
        hist.poll_once(t)
    times = [s.t_ms for s in hist.query_range("CW_TEMP", 0, 1000)]
    assert times == [0, 100, 200, 700, 800, 900]
    assert [t for _, t in hist.missing] == [300, 400, 500, 600]


def test_duplicate_poll_deduplicated():
    plc, _, hist = make(period=10)
    plc.set("CW_TEMP", 5.0, 50)
    assert hist.poll_once(0) == 1
    assert hist.poll_once(10) == 0
    assert len(hist.query_range("CW_TEMP", 0, 10**9)) == 1


def test_period_respected():
    plc, _, hist = make(period=100)
    hits = 0
    for t in range(0, 1000, 10):
        plc.set("CW_TEMP", float(t), t)
        hits += hist.poll_once(t)
    assert hits == 10


def test_query_semantics():
    hist = Historian()
    for t in (10, 20, 30):
        hist.append("X", Sample(t, float(t)))
    assert [s.t_ms for s in hist.query_range("X", 10, 30)] == [10, 20]
    assert hist.query_range("X", 20, 20) == []
    assert hist.query_range("X", 30, 10) == []
    assert hist.latest("X") == Sample(30, 30.0)
    with pytest.raises(UnknownTag):
        hist.query_range("Y", 0, 1)
    assert not hist.append("X", Sample(30, 1.0))


@given(st.lists(st.integers(0, 10_000), min_size=1, max_size=60))
def test_series_monotone(times):
    hist = Historian()
    for t in times:
        hist.append("X", Sample(t, 1.0))
    ts = [s.t_ms for s in hist.query_range("X", 0, 10_001)]
    assert all(b > a for a, b in zip(ts, ts[1:]))


def test_loss_free_when_polling_fast_enough():
    plc, _, hist = make(period=50)
    produced = []
    for t in range(0, 5000, 10):
        if t % 100 == 0:
            plc.set("CW_TEMP", float(t) / 7, t)
            produced.append((t, float(t) / 7))
        hist.poll_once(t)
    stored = [(s.t_ms, s.value) for s in hist.query_range("CW_TEMP", 0, 10**9)]
    assert stored == produced


def test_export_and_reimport(tmp_path):
    hist = Historian()
    for t in (0, 100, 200):
        hist.append("A", Sample(t, t / 3))
    path = tmp_path / "a.csv"
    assert hist.export_csv(["A"], None, None, path) == 3
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["time_ms", "A"] and len(rows) == 4
    assert import_csv(path)["A"] == hist.query_range("A", 0, 1000)


def test_alignment_carries_forward():
    hist = Historian()
    hist.append("A", Sample(0, 1.0))
    hist.append("A", Sample(20, 2.0))
    hist.append("B", Sample(10, 5.0))
    times, feats = hist.aligned(["A", "B"])
    assert times.tolist() == [10, 20]
    assert feats.tolist() == [[1.0, 5.0], [2.0, 5.0]]


def test_no_overlap_is_empty_dataset():
    hist = Historian()
    hist.append("A", Sample(0, 1.0))
    hist.series["B"]
    with pytest.raises(EmptyDataset):
        hist.aligned(["A", "B"])


def test_splits_and_labels():
    hist = Historian()
    for t in range(1000):
        hist.append("A", Sample(t * 100, 0.0))
    ds = hist.build_dataset(["A"], labels=[(60_000, None)])
    sizes = [len(ds.part(p)[0]) for p in ("train", "val", "test")]
    assert sizes == [700, 150, 150]
    assert np.array_equal(ds.labels, (ds.times >= 60_000).astype(np.int8))
    with pytest.raises(ValueError):
        hist.build_dataset(["A"], splits=(0.5, 0.5, 0.5))


def test_snapshot_round_trip(tmp_path):
    hist = Historian(snapshot_dir=tmp_path)
    hist.append("A", Sample(0, 1.5))
    hist.flush_snapshot()
    hist.append("A", Sample(5, 2.5))
    hist.flush_snapshot()
    back = Historian.from_snapshot(tmp_path)
    assert back.query_range("A", 0, 10) == hist.query_range("A", 0, 10)


@pytest.mark.parametrize("text, line", [
    ("tag,source,period_ms\nA,PLC,100\nA,PLC,100\n", 3),
    ("tag,source,period_ms\nA,PLC,5\n", 2),
    ("tag,source,period_ms\nA,SCADA,100\n", 2),
    ("tag,source,period_ms\nA,PLC\n", 2),
    ("tag,period_ms\n", 1),
])
def test_manifest_errors_name_line(text, line):
    with pytest.raises(ManifestError, match=f":{line}:"):
        parse_manifest(text)


def test_handle_latest():
    hist = Historian()
    hist.append("A", Sample(7, 3.0))
    link = LocalLink(hist.handle)
    tv = link.read_tag("A")
    assert (tv.value, tv.timestamp_ms) == (3.0, 7)
