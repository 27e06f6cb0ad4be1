import hashlib
import socket
import threading

import pytest
from hypothesis import given

from strategies import messages
from twinbed.mitm import Interposer, MitmProxy, MitmRule, Transform
from twinbed.tagbus import (LocalLink, Message, Op, TagClient, TagValue, TransportError,
                            decode_frame, encode_frame, read_frame, serve)


class Echo:
    def __init__(self):
        self.seen = []

    def handle(self, msg):
        self.seen.append(msg)
        if msg.op is Op.WRITE:
            return msg.answer(msg.writes)
        return msg.answer({t: TagValue(t, 14.77, 100) for t in msg.tags})


@given(messages())
def test_idle_interposer_is_identity(msg):
    tap = Interposer()
    frame = encode_frame(msg)
    assert tap.on_request(frame) is frame
    assert tap.on_reply(frame, frame) is frame


def test_proxy_pass_through_is_bit_exact():
    echo = Echo()
    srv = serve(("127.0.0.1", 0), echo.handle)
    proxy = MitmProxy(("127.0.0.1", 0), ("127.0.0.1", srv.port)).start()
    sent, got_direct, got_proxy = hashlib.sha256(), hashlib.sha256(), hashlib.sha256()
    try:
        frames = [encode_frame(Message(Op.READ, i, tags=["CW_TEMP", f"T{i}"])) for i in range(200)]
        frames += [encode_frame(Message(Op.WRITE, 1000 + i, writes={"X": TagValue("X", i * 0.1)}))
                   for i in range(50)]
        with socket.create_connection(("127.0.0.1", srv.port)) as d, \
                socket.create_connection(proxy.address) as p:
            for f in frames:
                sent.update(f)
                d.sendall(f)
                got_direct.update(read_frame(d))
                p.sendall(f)
                got_proxy.update(read_frame(p))
        assert got_proxy.digest() == got_direct.digest()
        # requests reached the server unchanged too
        assert [encode_frame(m) for m in echo.seen[1::2]] == frames
    finally:
        proxy.stop()
        srv.stop()


def test_full_dos_drops_everything():
    echo = Echo()
    link = LocalLink(echo.handle)
    link.tap = Interposer(seed=1)
    link.tap.start_dos(1.0)
    for _ in range(20):
        with pytest.raises(TransportError):
            link.read_tag("CW_TEMP")
    assert echo.seen == []


def test_dos_through_proxy_times_out():
    echo = Echo()
    srv = serve(("127.0.0.1", 0), echo.handle)
    tap = Interposer()
    proxy = MitmProxy(("127.0.0.1", 0), ("127.0.0.1", srv.port), tap).start()
    tap.start_dos(1.0)
    try:
        with pytest.raises(TransportError):
            TagClient(*proxy.address, timeout=0.3).read_tag("CW_TEMP")
        tap.stop_dos()
        assert TagClient(*proxy.address, timeout=1.0).read_tag("CW_TEMP").value == 14.77
    finally:
        proxy.stop()
        srv.stop()


def test_seeded_dos_is_deterministic():
    def pattern(seed):
        link = LocalLink(Echo().handle)
        link.tap = Interposer(seed=seed)
        link.tap.start_dos(0.5)
        out = []
        for _ in range(100):
            try:
                link.read_tag("A")
                out.append(1)
            except TransportError:
                out.append(0)
        return out
    assert pattern(5) == pattern(5)
    assert 20 < sum(pattern(5)) < 80


def test_rewrite_rules():
    link = LocalLink(Echo().handle)
    link.tap = Interposer()
    link.tap.start_mitm([MitmRule("CW_*", Transform.SCALE, 2.0)])
    assert link.read_tag("CW_TEMP").value == pytest.approx(29.54)
    assert link.read_tag("SG_LEVEL").value == 14.77
    link.tap.add_rule(MitmRule("SG_LEVEL", Transform.SET_VALUE, 50.0, ops=frozenset({Op.READ})))
    assert link.read_tag("SG_LEVEL").value == 50.0
    link.tap.stop_mitm()
    assert link.read_tag("CW_TEMP").value == 14.77


def test_rule_validation():
    with pytest.raises(ValueError):
        MitmRule("*", Transform.DROP_PROB, 1.5)
    with pytest.raises(ValueError):
        MitmRule.from_dict({"match": "A", "scale": 2, "set_value": 1})
    assert MitmRule.from_dict({"match": "A", "drop_prob": 0.5}).arg == 0.5


def test_replay_reemits_recorded_values():
    now = [0]
    echo = Echo()
    value = [14.77]
    echo.handle = lambda msg: msg.answer({t: TagValue(t, value[0], now[0]) for t in msg.tags})
    link = LocalLink(echo.handle)
    link.tap = tap = Interposer(clock=lambda: now[0])
    tap.record(1000)
    for now[0] in range(0, 1001, 100):
        link.read_tag("CW_TEMP")
    value[0] = 200.0
    now[0] = 5000
    tap.play()
    vals = []
    for now[0] in range(5000, 7000, 100):
        tv = link.read_tag("CW_TEMP")
        vals.append(tv.value)
    assert set(vals) == {14.77}
    tap.stop_play()
    assert link.read_tag("CW_TEMP").value == 200.0
