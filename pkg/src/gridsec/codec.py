"""Encoder, decoder and session bookkeeping for a subset of IEC 60870-5-104.

Supported frames: I-, S- and U-format APDUs. I-frames carry one ASDU of
type M_SP_NA (1), M_ME_NC (13), C_SC_NA (45), C_SE_NC (50) or C_IC_NA (100).
All multi-octet integers are little-endian, floats are IEEE 754 single
precision little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from enum import Enum, IntEnum
from typing import Union

START = 0x68
MAX_APDU_LENGTH = 253
MIN_FRAME = 6
SEQ_MOD = 1 << 15
TELECONTROL_PORT = 2404

_F32 = struct.Struct("<f")


class CodecError(Exception):
    """Base class for codec failures."""


class InvariantViolation(CodecError):
    """A frame handed to the encoder breaks a structural invariant."""


class DecodeError(CodecError):
    pass


class BadStartByte(DecodeError):
    pass


class NeedMoreData(DecodeError):
    def __init__(self, required: int):
        super().__init__(f"need {required} octets")
        self.required = required


class UnknownTypeId(DecodeError):
    pass


class MalformedAsdu(DecodeError):
    pass


class MalformedControlField(DecodeError):
    pass


class UFunction(IntEnum):
    STARTDT_ACT = 0x07
    STARTDT_CON = 0x0B
    STOPDT_ACT = 0x13
    STOPDT_CON = 0x23
    TESTFR_ACT = 0x43
    TESTFR_CON = 0x83


class TypeId(IntEnum):
    M_SP_NA = 1
    M_ME_NC = 13
    C_SC_NA = 45
    C_SE_NC = 50
    C_IC_NA = 100


class Cot(IntEnum):
    SPONTANEOUS = 3
    ACTIVATION = 6
    ACT_CON = 7
    ACT_TERM = 10
    INTERROGATED = 20


COMMAND_TYPES = frozenset({TypeId.C_SC_NA, TypeId.C_SE_NC, TypeId.C_IC_NA})
MONITOR_TYPES = frozenset({TypeId.M_SP_NA, TypeId.M_ME_NC})


def to_float32(value: float) -> float:
    return _F32.unpack(_F32.pack(value))[0]


class Quality(str, Enum):
    GOOD = "good"
    INVALID = "invalid"


@dataclass(frozen=True)
class SinglePoint:
    on: bool


@dataclass(frozen=True)
class MeasuredFloat:
    value: float
    quality: Quality = Quality.GOOD

    def __post_init__(self):
        object.__setattr__(self, "value", to_float32(self.value))
        object.__setattr__(self, "quality", Quality(self.quality))


@dataclass(frozen=True)
class SingleCommand:
    on: bool


@dataclass(frozen=True)
class SetpointFloat:
    value: float

    def __post_init__(self):
        object.__setattr__(self, "value", to_float32(self.value))


@dataclass(frozen=True)
class InterrogationQualifier:
    qoi: int = 20


Payload = Union[SinglePoint, MeasuredFloat, SingleCommand, SetpointFloat, InterrogationQualifier]

PAYLOAD_FOR_TYPE: dict[TypeId, type] = {
    TypeId.M_SP_NA: SinglePoint,
    TypeId.M_ME_NC: MeasuredFloat,
    TypeId.C_SC_NA: SingleCommand,
    TypeId.C_SE_NC: SetpointFloat,
    TypeId.C_IC_NA: InterrogationQualifier,
}
PAYLOAD_SIZE: dict[TypeId, int] = {
    TypeId.M_SP_NA: 1,
    TypeId.M_ME_NC: 5,
    TypeId.C_SC_NA: 1,
    TypeId.C_SE_NC: 5,
    TypeId.C_IC_NA: 1,
}


@dataclass(frozen=True)
class InformationObject:
    ioa: int
    payload: Payload


@dataclass(frozen=True)
class Asdu:
    type_id: TypeId
    cot: Cot
    common_address: int
    objects: tuple[InformationObject, ...]
    # P/N bit of the cause octet; set on negative confirmations
    negative: bool = False

    def __post_init__(self):
        object.__setattr__(self, "type_id", TypeId(self.type_id))
        object.__setattr__(self, "cot", Cot(self.cot))
        object.__setattr__(self, "objects", tuple(self.objects))

    @property
    def is_command(self) -> bool:
        return self.type_id in COMMAND_TYPES


@dataclass(frozen=True)
class IFrame:
    send_seq: int
    recv_seq: int


@dataclass(frozen=True)
class SFrame:
    recv_seq: int


@dataclass(frozen=True)
class UFrame:
    function: UFunction

    def __post_init__(self):
        object.__setattr__(self, "function", UFunction(self.function))


ControlField = Union[IFrame, SFrame, UFrame]


@dataclass(frozen=True)
class Apdu:
    control: ControlField
    asdu: Asdu | None = None


def i_frame(send_seq: int, recv_seq: int, asdu: Asdu) -> Apdu:
    return Apdu(IFrame(send_seq, recv_seq), asdu)


def u_frame(function: UFunction) -> Apdu:
    return Apdu(UFrame(function))


def s_frame(recv_seq: int) -> Apdu:
    return Apdu(SFrame(recv_seq))


# -- encoding ---------------------------------------------------------------


def _check_seq(value: int, name: str) -> None:
    if not 0 <= value < SEQ_MOD:
        raise InvariantViolation(f"{name}={value} outside 0..32767")


def _encode_control(control: ControlField) -> bytes:
    if isinstance(control, IFrame):
        _check_seq(control.send_seq, "sendSeq")
        _check_seq(control.recv_seq, "recvSeq")
        return struct.pack("<HH", control.send_seq << 1, control.recv_seq << 1)
    if isinstance(control, SFrame):
        _check_seq(control.recv_seq, "recvSeq")
        return struct.pack("<BBH", 0x01, 0x00, control.recv_seq << 1)
    if isinstance(control, UFrame):
        return bytes((int(control.function), 0, 0, 0))
    raise InvariantViolation(f"unknown control field {control!r}")


def _encode_payload(type_id: TypeId, payload: Payload) -> bytes:
    expected = PAYLOAD_FOR_TYPE[type_id]
    if not isinstance(payload, expected):
        raise InvariantViolation(
            f"{type(payload).__name__} object in {type_id.name} ASDU"
        )
    if isinstance(payload, (SinglePoint, SingleCommand)):
        return bytes((1 if payload.on else 0,))
    if isinstance(payload, MeasuredFloat):
        qds = 0x80 if payload.quality is Quality.INVALID else 0x00
        return _F32.pack(payload.value) + bytes((qds,))
    if isinstance(payload, SetpointFloat):
        return _F32.pack(payload.value) + b"\x00"
    if payload.qoi != 20:
        raise InvariantViolation(f"unsupported qualifier of interrogation {payload.qoi}")
    return bytes((payload.qoi,))


def encode_asdu(asdu: Asdu) -> bytes:
    n = len(asdu.objects)
    if not 1 <= n <= 127:
        raise InvariantViolation(f"object count {n} outside 1..127")
    if asdu.is_command and n != 1:
        raise InvariantViolation(f"{asdu.type_id.name} must carry exactly one object")
    if not 1 <= asdu.common_address <= 65534:
        raise InvariantViolation(f"common address {asdu.common_address} outside 1..65534")
    cot = int(asdu.cot) | (0x40 if asdu.negative else 0)
    out = bytearray(struct.pack("<BBBBH", int(asdu.type_id), n, cot, 0, asdu.common_address))
    for obj in asdu.objects:
        if not 0 <= obj.ioa <= 0xFFFFFF:
            raise InvariantViolation(f"ioa {obj.ioa} outside 0..16777215")
        out += obj.ioa.to_bytes(3, "little")
        out += _encode_payload(asdu.type_id, obj.payload)
    return bytes(out)


def encode_apdu(frame: Apdu) -> bytes:
    """Serialize one APDU. Raises InvariantViolation on structural errors."""
    control = _encode_control(frame.control)
    if isinstance(frame.control, IFrame):
        if frame.asdu is None:
            raise InvariantViolation("I-format frame without ASDU")
        body = control + encode_asdu(frame.asdu)
    else:
        if frame.asdu is not None:
            raise InvariantViolation("S/U-format frames carry no ASDU")
        body = control
    if len(body) > MAX_APDU_LENGTH:
        raise InvariantViolation(f"APDU length {len(body)} exceeds {MAX_APDU_LENGTH}")
    return bytes((START, len(body))) + body


# -- decoding ---------------------------------------------------------------


def _decode_control(raw: bytes) -> ControlField:
    b0 = raw[0]
    if b0 & 0x01 == 0:
        send_raw, recv_raw = struct.unpack("<HH", raw)
        if recv_raw & 0x01:
            raise MalformedControlField("reserved bit set in receive sequence")
        return IFrame(send_raw >> 1, recv_raw >> 1)
    if b0 & 0x03 == 0x01:
        if raw[0] != 0x01 or raw[1] != 0x00:
            raise MalformedControlField("bad S-format octets")
        recv_raw = struct.unpack("<H", raw[2:4])[0]
        if recv_raw & 0x01:
            raise MalformedControlField("reserved bit set in receive sequence")
        return SFrame(recv_raw >> 1)
    try:
        function = UFunction(b0)
    except ValueError:
        raise MalformedControlField(f"unknown U-format function 0x{b0:02x}") from None
    if raw[1:4] != b"\x00\x00\x00":
        raise MalformedControlField("non-zero U-format padding")
    return UFrame(function)


def _decode_payload(type_id: TypeId, raw: bytes) -> Payload:
    if type_id in (TypeId.M_SP_NA, TypeId.C_SC_NA):
        if raw[0] > 1:
            raise MalformedAsdu(f"unsupported qualifier bits 0x{raw[0]:02x}")
        cls = SinglePoint if type_id is TypeId.M_SP_NA else SingleCommand
        return cls(bool(raw[0]))
    if type_id is TypeId.M_ME_NC:
        value = _F32.unpack(raw[:4])[0]
        if raw[4] == 0x00:
            return MeasuredFloat(value, Quality.GOOD)
        if raw[4] == 0x80:
            return MeasuredFloat(value, Quality.INVALID)
        raise MalformedAsdu(f"unsupported quality descriptor 0x{raw[4]:02x}")
    if type_id is TypeId.C_SE_NC:
        if raw[4] != 0:
            raise MalformedAsdu("unsupported setpoint qualifier")
        return SetpointFloat(_F32.unpack(raw[:4])[0])
    if raw[0] != 20:
        raise MalformedAsdu(f"unsupported qualifier of interrogation {raw[0]}")
    return InterrogationQualifier(raw[0])


def decode_asdu(raw: bytes) -> Asdu:
    if len(raw) < 6:
        raise MalformedAsdu("ASDU shorter than its header")
    try:
        type_id = TypeId(raw[0])
    except ValueError:
        raise UnknownTypeId(f"type id {raw[0]}") from None
    vsq, cot_octet, originator = raw[1], raw[2], raw[3]
    if vsq & 0x80:
        raise MalformedAsdu("sequence-of-elements addressing not supported")
    count = vsq & 0x7F
    if count == 0:
        raise MalformedAsdu("zero objects")
    if cot_octet & 0x80 or originator != 0:
        raise MalformedAsdu("test bit or originator address set")
    try:
        cot = Cot(cot_octet & 0x3F)
    except ValueError:
        raise MalformedAsdu(f"unsupported cause of transmission {cot_octet & 0x3F}") from None
    common_address = raw[4] | (raw[5] << 8)
    if not 1 <= common_address <= 65534:
        raise MalformedAsdu(f"common address {common_address} outside 1..65534")
    if type_id in COMMAND_TYPES and count != 1:
        raise MalformedAsdu(f"{type_id.name} must carry exactly one object")
    size = 3 + PAYLOAD_SIZE[type_id]
    if len(raw) != 6 + count * size:
        raise MalformedAsdu(f"length {len(raw)} does not match {count} objects")
    objects = []
    pos = 6
    for _ in range(count):
        ioa = int.from_bytes(raw[pos:pos + 3], "little")
        objects.append(InformationObject(ioa, _decode_payload(type_id, raw[pos + 3:pos + size])))
        pos += size
    return Asdu(type_id, cot, common_address, tuple(objects), negative=bool(cot_octet & 0x40))


def decode_apdu(data: bytes) -> tuple[Apdu, int]:
    """Decode the first APDU in ``data``.

    Returns the frame and the number of octets consumed. Raises a
    ``DecodeError`` subclass for any input that is not a complete, valid
    frame; ``NeedMoreData.required`` gives the total length to wait for.
    """
    if len(data) == 0:
        raise NeedMoreData(MIN_FRAME)
    if data[0] != START:
        raise BadStartByte(f"0x{data[0]:02x}")
    if len(data) < 2:
        raise NeedMoreData(MIN_FRAME)
    length = data[1]
    if length < 4 or length > MAX_APDU_LENGTH:
        raise MalformedControlField(f"APDU length {length} outside 4..{MAX_APDU_LENGTH}")
    total = length + 2
    if len(data) < total:
        raise NeedMoreData(total)
    control = _decode_control(bytes(data[2:6]))
    if isinstance(control, IFrame):
        if length == 4:
            raise MalformedAsdu("I-format frame without ASDU")
        asdu = decode_asdu(bytes(data[6:total]))
        return Apdu(control, asdu), total
    if length != 4:
        raise MalformedControlField("S/U-format frame with trailing octets")
    return Apdu(control), total


def decode_stream(data: bytes) -> list[Apdu]:
    """Decode a buffer holding only complete frames."""
    frames = []
    pos = 0
    while pos < len(data):
        frame, used = decode_apdu(data[pos:])
        frames.append(frame)
        pos += used
    return frames


class FrameReader:
    """Reassembles frames from a byte stream delivered in arbitrary chunks."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, chunk: bytes) -> list[Apdu]:
        self._buf += chunk
        frames = []
        while self._buf:
            try:
                frame, used = decode_apdu(bytes(self._buf))
            except NeedMoreData:
                break
            except DecodeError:
                self._buf.clear()
                raise
            frames.append(frame)
            del self._buf[:used]
        return frames

    @property
    def pending(self) -> int:
        return len(self._buf)


# -- session bookkeeping ----------------------------------------------------


@dataclass(frozen=True)
class SessionState:
    started: bool = False
    next_send: int = 0
    next_expected: int = 0
    peer_acked: int = 0


@dataclass(frozen=True)
class ReplyWith:
    function: UFunction


@dataclass(frozen=True)
class SequenceError:
    expected: int
    got: int


@dataclass(frozen=True)
class DataBeforeStart:
    send_seq: int


SessionEvent = Union[ReplyWith, SequenceError, DataBeforeStart]

_REPLIES = {
    UFunction.STARTDT_ACT: UFunction.STARTDT_CON,
    UFunction.STOPDT_ACT: UFunction.STOPDT_CON,
    UFunction.TESTFR_ACT: UFunction.TESTFR_CON,
}


def session_accept(state: SessionState, frame: Apdu, direction: str) -> tuple[SessionState, list[SessionEvent]]:
    """Advance one endpoint's session by a frame it sent or received.

    ``direction`` is ``"inbound"`` for frames the endpoint received and
    ``"outbound"`` for frames it sent. Anomalies are reported as events,
    never raised.
    """
    ctl = frame.control
    events: list[SessionEvent] = []
    if direction == "outbound":
        if isinstance(ctl, IFrame):
            state = replace(state, next_send=(ctl.send_seq + 1) % SEQ_MOD)
        elif isinstance(ctl, UFrame) and ctl.function is UFunction.STARTDT_CON:
            state = replace(state, started=True)
        elif isinstance(ctl, UFrame) and ctl.function is UFunction.STOPDT_CON:
            state = replace(state, started=False)
        return state, events
    if direction != "inbound":
        raise ValueError(f"direction must be inbound or outbound, not {direction!r}")

    if isinstance(ctl, UFrame):
        fn = ctl.function
        if fn in _REPLIES:
            events.append(ReplyWith(_REPLIES[fn]))
        if fn in (UFunction.STARTDT_ACT, UFunction.STARTDT_CON):
            state = replace(state, started=True)
        elif fn in (UFunction.STOPDT_ACT, UFunction.STOPDT_CON):
            state = replace(state, started=False)
        return state, events
    if isinstance(ctl, SFrame):
        return replace(state, peer_acked=ctl.recv_seq), events

    if not state.started:
        events.append(DataBeforeStart(ctl.send_seq))
    if ctl.send_seq != state.next_expected:
        events.append(SequenceError(expected=state.next_expected, got=ctl.send_seq))
    state = replace(
        state,
        next_expected=(ctl.send_seq + 1) % SEQ_MOD,
        peer_acked=ctl.recv_seq,
    )
    return state, events
