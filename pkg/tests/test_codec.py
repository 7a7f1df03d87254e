import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from framegen import fuzz_inputs, random_frames
from gridsec.codec import (
    Apdu, Asdu, BadStartByte, Cot, DataBeforeStart, DecodeError, FrameReader,
    IFrame, InformationObject, InvariantViolation, MalformedAsdu,
    MeasuredFloat, NeedMoreData, ReplyWith, SequenceError, SessionState,
    SetpointFloat, SFrame, SingleCommand, SinglePoint, TypeId, UFrame,
    UFunction, UnknownTypeId, decode_apdu, decode_stream, encode_apdu,
    session_accept,
)


def _measurement_frame(value=0.0):
    asdu = Asdu(TypeId.M_ME_NC, Cot.SPONTANEOUS, 1, (InformationObject(100, MeasuredFloat(value)),))
    return Apdu(IFrame(0, 0), asdu)


def test_testfr_act_bytes():
    assert encode_apdu(Apdu(UFrame(UFunction.TESTFR_ACT))) == bytes([0x68, 0x04, 0x43, 0x00, 0x00, 0x00])


def test_measurement_asdu_bytes():
    raw = encode_apdu(_measurement_frame())
    assert raw[:6] == bytes([0x68, 0x12, 0x00, 0x00, 0x00, 0x00])
    assert raw[6:] == bytes([0x0D, 0x01, 0x03, 0x00, 0x01, 0x00, 0x64, 0x00, 0x00,
                             0x00, 0x00, 0x00, 0x00, 0x00])


def test_i_frame_sequence_numbers_are_shifted():
    raw = encode_apdu(Apdu(IFrame(5, 300), _measurement_frame().asdu))
    # 5 << 1 = 0x000A, 300 << 1 = 0x0258
    assert raw[2:6] == bytes([0x0A, 0x00, 0x58, 0x02])


def test_s_frame_bytes():
    assert encode_apdu(Apdu(SFrame(3))) == bytes([0x68, 0x04, 0x01, 0x00, 0x06, 0x00])


def test_negative_confirmation_sets_pn_bit():
    asdu = Asdu(TypeId.C_SE_NC, Cot.ACT_CON, 2, (InformationObject(7, SetpointFloat(0.5)),), negative=True)
    raw = encode_apdu(Apdu(IFrame(1, 1), asdu))
    assert raw[8] == 0x47
    assert decode_apdu(raw)[0].asdu.negative


def test_decode_testfr_con():
    frame, used = decode_apdu(bytes([0x68, 0x04, 0x83, 0x00, 0x00, 0x00]))
    assert frame == Apdu(UFrame(UFunction.TESTFR_CON))
    assert used == 6


def test_bad_start_byte():
    with pytest.raises(BadStartByte):
        decode_apdu(bytes([0x69, 0x04, 0x83, 0x00, 0x00, 0x00]))


def test_truncated_header_reports_required_length():
    with pytest.raises(NeedMoreData) as exc:
        decode_apdu(bytes([0x68, 0x0E, 0x00, 0x00]))
    assert exc.value.required == 16


def test_unknown_type_id():
    raw = bytearray(encode_apdu(_measurement_frame()))
    raw[6] = 0x0B
    with pytest.raises(UnknownTypeId):
        decode_apdu(bytes(raw))


def test_count_mismatch_is_malformed():
    raw = bytearray(encode_apdu(_measurement_frame()))
    raw[7] = 2
    with pytest.raises(MalformedAsdu):
        decode_apdu(bytes(raw))


def test_encoder_rejects_too_many_objects():
    objs = tuple(InformationObject(i, MeasuredFloat(1.0)) for i in range(31))
    frame = Apdu(IFrame(0, 0), Asdu(TypeId.M_ME_NC, Cot.SPONTANEOUS, 1, objs))
    with pytest.raises(InvariantViolation):
        encode_apdu(frame)


def test_encoder_rejects_multi_object_command():
    objs = (InformationObject(1, SingleCommand(True)), InformationObject(2, SingleCommand(True)))
    with pytest.raises(InvariantViolation):
        encode_apdu(Apdu(IFrame(0, 0), Asdu(TypeId.C_SC_NA, Cot.ACTIVATION, 1, objs)))


def test_encoder_rejects_payload_type_mismatch():
    objs = (InformationObject(1, SinglePoint(True)),)
    with pytest.raises(InvariantViolation):
        encode_apdu(Apdu(IFrame(0, 0), Asdu(TypeId.M_ME_NC, Cot.SPONTANEOUS, 1, objs)))


def test_encoder_rejects_asdu_on_u_frame():
    with pytest.raises(InvariantViolation):
        encode_apdu(Apdu(UFrame(UFunction.STARTDT_ACT), _measurement_frame().asdu))


def test_round_trip_seeded_frames():
    for frame in random_frames(seed=7, n=2000):
        raw = encode_apdu(frame)
        assert raw[0] == 0x68
        assert len(raw) <= 255
        assert decode_apdu(raw) == (frame, len(raw))


def test_stream_of_frames_decodes_in_order():
    frames = random_frames(seed=11, n=50)
    blob = b"".join(encode_apdu(f) for f in frames)
    assert decode_stream(blob) == frames


def test_reader_handles_arbitrary_chunking():
    frames = random_frames(seed=12, n=40)
    blob = b"".join(encode_apdu(f) for f in frames)
    reader = FrameReader()
    out = []
    for i in range(0, len(blob), 7):
        out += reader.feed(blob[i:i + 7])
    assert out == frames
    assert reader.pending == 0


def test_fuzz_decode_is_total():
    for raw in fuzz_inputs(seed=3, n=3000):
        try:
            frame, used = decode_apdu(raw)
        except DecodeError:
            continue
        assert used == raw[1] + 2


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=300))
def test_decode_never_raises_outside_decode_error(raw):
    try:
        decode_apdu(raw)
    except DecodeError:
        pass


# -- session ----------------------------------------------------------------


def test_startdt_act_starts_session_and_requests_confirmation():
    state, events = session_accept(SessionState(), Apdu(UFrame(UFunction.STARTDT_ACT)), "inbound")
    assert state.started
    assert events == [ReplyWith(UFunction.STARTDT_CON)]


def test_sequence_gap_is_reported():
    state = SessionState(started=True)
    asdu = _measurement_frame().asdu
    state, events = session_accept(state, Apdu(IFrame(0, 0), asdu), "inbound")
    assert events == []
    state, events = session_accept(state, Apdu(IFrame(2, 0), asdu), "inbound")
    assert events == [SequenceError(expected=1, got=2)]
    assert state.next_expected == 3


def test_data_before_start():
    _, events = session_accept(SessionState(), _measurement_frame(), "inbound")
    assert events == [DataBeforeStart(0)]


def test_outbound_i_frames_advance_send_counter_modulo():
    state = SessionState(started=True, next_send=32767)
    state, _ = session_accept(state, Apdu(IFrame(32767, 0), _measurement_frame().asdu), "outbound")
    assert state.next_send == 0


def test_testfr_and_stopdt_replies():
    state = SessionState(started=True)
    state, events = session_accept(state, Apdu(UFrame(UFunction.TESTFR_ACT)), "inbound")
    assert events == [ReplyWith(UFunction.TESTFR_CON)] and state.started
    state, events = session_accept(state, Apdu(UFrame(UFunction.STOPDT_ACT)), "inbound")
    assert events == [ReplyWith(UFunction.STOPDT_CON)] and not state.started


def test_s_frame_updates_peer_ack():
    state, events = session_accept(SessionState(started=True), Apdu(SFrame(9)), "inbound")
    assert state.peer_acked == 9 and events == []
