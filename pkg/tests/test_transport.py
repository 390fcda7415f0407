import io
import socket
import threading
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvhandoff.cachecard import decode_card, encode_card
from kvhandoff.errors import (
    ChecksumError,
    FormatError,
    FrameChecksumError,
    FrameError,
    HandshakeRejected,
    OversizeFrameError,
    RemoteError,
    SessionClosed,
    SessionStateError,
    ShortReadError,
    UnknownFrameTypeError,
)
from kvhandoff.transport import (
    ErrorCode,
    FrameType,
    Handshake,
    Reason,
    Session,
    frame_decode,
    frame_encode,
    handshake_exchange,
)

from .fixtures import regenerate

FIXTURES = Path(regenerate.__file__).parent
FIXTURE_NAMES = ["uniform_q4", "uniform_q8", "mixed"]


def _fixture(name):
    return (FIXTURES / f"{name}.qkvc").read_bytes()


# -- frames --------------------------------------------------------------------------


@settings(max_examples=80, deadline=None)
@given(ftype=st.sampled_from(list(FrameType)), payload=st.binary(max_size=600))
def test_frame_round_trip(ftype, payload):
    data = frame_encode(ftype, payload)
    assert len(data) == 9 + len(payload)
    frame = frame_decode(io.BytesIO(data))
    assert (frame.type, frame.payload) == (ftype, payload)


def test_bye_frame_is_nine_bytes():
    data = frame_encode(FrameType.BYE)
    assert len(data) == 9
    assert data[:5] == b"\x05\x00\x00\x00\x00"


@settings(max_examples=30, deadline=None)
@given(payloads=st.lists(st.binary(max_size=64), min_size=1, max_size=6))
def test_back_to_back_frames(payloads):
    stream = io.BytesIO(b"".join(frame_encode(FrameType.CARD, p) for p in payloads))
    assert [frame_decode(stream).payload for _ in payloads] == payloads
    assert stream.read() == b""


@pytest.mark.parametrize("cut", [0, 3, 5, 20, -1])
def test_short_read(cut):
    data = frame_encode(FrameType.CARD, b"x" * 40)
    with pytest.raises(ShortReadError):
        frame_decode(io.BytesIO(data[:cut]))


def test_crc_mismatch():
    data = bytearray(frame_encode(FrameType.CARD, b"payload"))
    data[7] ^= 0x20
    with pytest.raises(FrameChecksumError):
        frame_decode(io.BytesIO(bytes(data)))


def test_unknown_type():
    data = bytearray(frame_encode(FrameType.BYE))
    data[0] = 9
    with pytest.raises(UnknownFrameTypeError):
        frame_decode(io.BytesIO(bytes(data)))


def test_oversize_declaration():
    head = bytes([FrameType.CARD]) + (2**31 + 1).to_bytes(4, "little")
    with pytest.raises(OversizeFrameError):
        frame_decode(io.BytesIO(head))


def test_frame_errors_are_distinct():
    kinds = [FrameChecksumError, OversizeFrameError, UnknownFrameTypeError, ShortReadError]
    for a in kinds:
        for b in kinds:
            assert a is b or not issubclass(a, b)


@pytest.mark.parametrize("name", FIXTURE_NAMES)
def test_card_frame_carries_fixture(name):
    card = _fixture(name)
    assert frame_decode(io.BytesIO(frame_encode(FrameType.CARD, card))).payload == card


def test_exchange_transcript_matches():
    stored = regenerate.parse_hexdump((FIXTURES / "exchange.hex").read_text())
    assert stored == regenerate.exchange_frames()
    assert [frame_decode(io.BytesIO(f)).type for _, f in stored] == [
        FrameType.HELLO, FrameType.HELLO_ACK, FrameType.CARD, FrameType.BYE]


# -- handshake -----------------------------------------------------------------------


def test_handshake_bytes_round_trip():
    h = Handshake("agent7", "toy-v1", (4, 8))
    assert Handshake.from_bytes(h.to_bytes()) == h


@pytest.mark.parametrize("data", [b"", b"\x01\x00\x03ab", b"\x01\x00\x01a\x01m\x00extra",
                                  b"\x01\x00\x00\x01m\x00", b"\x01\x00\x01a\x01m\x01\x03"])
def test_malformed_handshake(data):
    with pytest.raises(FrameError):
        Handshake.from_bytes(data)


def test_same_model_accepted():
    d = handshake_exchange(Handshake("a", "toy-v1"), Handshake("b", "toy-v1", (4, 8, 16)))
    assert d.model_id == "toy-v1" and d.version == 1
    assert d.widths == (4, 8, 16)


@pytest.mark.parametrize("local,remote,reason", [
    (Handshake("a", "llama-3.1-8b"), Handshake("b", "toy-v1"), Reason.MODEL_MISMATCH),
    (Handshake("a", "toy-v1", version=1), Handshake("b", "toy-v1", version=2), Reason.VERSION_MISMATCH),
])
def test_rejections_carry_reason(local, remote, reason):
    with pytest.raises(HandshakeRejected) as info:
        handshake_exchange(local, remote)
    assert info.value.reason == reason


# -- sessions ------------------------------------------------------------------------


def _pair(sender_model="toy-v1", receiver_model="toy-v1"):
    a, b = socket.socketpair()
    a.settimeout(10)
    b.settimeout(10)
    return (Session.over_socket(a, Handshake("agent0", sender_model)),
            Session.over_socket(b, Handshake("agent1", receiver_model)), a, b)


def _run_receiver(session, box):
    def target():
        try:
            session.accept()
            box["card"] = encode_card(session.receive_card())
            session.wait_bye()
        except Exception as exc:  # surfaced to the test thread
            box["error"] = exc
    t = threading.Thread(target=target)
    t.start()
    return t


@pytest.mark.parametrize("name", FIXTURE_NAMES)
def test_loopback_is_byte_exact(name):
    sender, receiver, a, b = _pair()
    box = {}
    t = _run_receiver(receiver, box)
    sender.connect()
    sent = sender.send_card(decode_card(_fixture(name)))
    sender.close()
    t.join(10)
    a.close()
    b.close()
    assert "error" not in box
    assert box["card"] == _fixture(name)
    assert sent == 9 + len(_fixture(name))
    assert sender.last_transfer_ms >= 0


def test_model_mismatch_rejected_on_both_sides():
    sender, receiver, a, b = _pair("llama-3.1-8b", "toy-v1")
    box = {}
    t = _run_receiver(receiver, box)
    with pytest.raises(HandshakeRejected) as info:
        sender.connect()
    t.join(10)
    a.close()
    b.close()
    assert info.value.reason == Reason.MODEL_MISMATCH
    assert isinstance(box["error"], HandshakeRejected)


def test_send_before_handshake():
    sender, _, a, b = _pair()
    with pytest.raises(SessionStateError):
        sender.send_card(decode_card(_fixture("uniform_q4")))
    a.close()
    b.close()


def test_send_after_close():
    out = io.BytesIO()
    s = Session(io.BytesIO(), out, Handshake("a", "toy-v1"))
    s.close()
    assert out.getvalue() == frame_encode(FrameType.BYE)
    with pytest.raises(SessionStateError):
        s.send_card(decode_card(_fixture("uniform_q4")))


def _receiver_over(frames: bytes) -> Session:
    hello = frame_encode(FrameType.HELLO, Handshake("agent0", "toy-v1").to_bytes())
    s = Session(io.BytesIO(hello + frames), io.BytesIO(), Handshake("agent1", "toy-v1"))
    s.accept()
    return s


def test_in_flight_corruption_is_a_frame_error():
    frame = bytearray(frame_encode(FrameType.CARD, _fixture("uniform_q4")))
    frame[100] ^= 0x04
    with pytest.raises(FrameChecksumError):
        _receiver_over(bytes(frame)).receive_card()


def test_corrupt_card_in_valid_frame_is_a_card_error():
    card = bytearray(_fixture("uniform_q4"))
    card[100] ^= 0x04
    with pytest.raises(ChecksumError) as info:
        _receiver_over(frame_encode(FrameType.CARD, bytes(card))).receive_card()
    assert isinstance(info.value, FormatError) and not isinstance(info.value, FrameError)


def test_remote_error_and_bye_surface():
    err = frame_encode(FrameType.ERROR, bytes([ErrorCode.CARD]) + b"bad card")
    with pytest.raises(RemoteError) as info:
        _receiver_over(err).receive_card()
    assert info.value.code == ErrorCode.CARD
    with pytest.raises(SessionClosed):
        _receiver_over(frame_encode(FrameType.BYE)).receive_card()


def test_unexpected_frame_type():
    with pytest.raises(SessionStateError):
        _receiver_over(frame_encode(FrameType.HELLO, b"")).receive_card()


def test_card_model_must_match_session():
    out = io.BytesIO()
    ack = frame_encode(FrameType.HELLO_ACK, bytes([Reason.ACCEPTED]) + Handshake("b", "other").to_bytes())
    s = Session(io.BytesIO(ack), out, Handshake("a", "other"))
    s.connect()
    with pytest.raises(SessionStateError):
        s.send_card(decode_card(_fixture("uniform_q4")))
