"""Protocol-buffers wire format: varints, tagged fields, nested messages.

Implements the subset the RPC engines exercise: base-128 varints (up to 10
bytes), field keys ``(field_number << 3) | wire_type``, wire types 0 (varint),
1 (64-bit), 2 (length-delimited) and 5 (32-bit), and nested messages as
length-delimited payloads. Values are unsigned. Decoding is strict against a
schema: an unknown field number or a wire-type mismatch is an error, not a
skip.

Message values are represented as a list of ``(field_number, value)`` pairs in
wire order; nested messages are nested pair lists. This keeps
decode(encode(m)) == m exact, including repeated fields and field order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

WT_VARINT = 0
WT_I64 = 1
WT_LEN = 2
WT_I32 = 5

_MAX_VARINT_BYTES = 10
_MAX_DECODE_DEPTH = 64


class WireFormatError(ValueError):
    """Malformed or schema-violating wire data."""


# --- varints ----------------------------------------------------------------

def encode_varint(value: int) -> bytes:
    if value < 0 or value >= 1 << 64:
        raise WireFormatError(f"varint out of range: {value}")
    out = bytearray()
    while True:
        b = value & 0x7F
        value >>= 7
        if value:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def decode_varint(data: bytes, offset: int = 0) -> tuple[int, int]:
    """Return (value, next_offset). Rejects truncation and >10-byte runs."""
    result = 0
    shift = 0
    pos = offset
    while True:
        if pos >= len(data):
            raise WireFormatError("truncated varint")
        if pos - offset >= _MAX_VARINT_BYTES:
            raise WireFormatError("varint exceeds 10 bytes")
        b = data[pos]
        result |= (b & 0x7F) << shift
        pos += 1
        if not b & 0x80:
            if result >= 1 << 64:
                raise WireFormatError("varint overflows 64 bits")
            return result, pos
        shift += 7


# --- schema -----------------------------------------------------------------

# field kinds and their wire types
_KIND_WIRE = {
    "uint": WT_VARINT,
    "fixed64": WT_I64,
    "fixed32": WT_I32,
    "bytes": WT_LEN,
    "msg": WT_LEN,
}


@dataclass(frozen=True)
class Field:
    number: int
    kind: str
    schema: "MessageSchema | None" = None  # for kind == "msg"

    def __post_init__(self):
        if self.kind not in _KIND_WIRE:
            raise ValueError(f"unknown field kind {self.kind!r}")
        if (self.kind == "msg") != (self.schema is not None):
            raise ValueError("nested schema required exactly for kind='msg'")
        if not 1 <= self.number < 1 << 29:
            raise ValueError(f"field number out of range: {self.number}")

    @property
    def wire_type(self) -> int:
        return _KIND_WIRE[self.kind]


class MessageSchema:
    def __init__(self, name: str, fields: list[Field]):
        self.name = name
        self.fields = {f.number: f for f in fields}
        if len(self.fields) != len(fields):
            raise ValueError("duplicate field numbers")
        self.order = [f.number for f in fields]

    def __repr__(self) -> str:
        return f"MessageSchema({self.name!r}, {len(self.fields)} fields)"


FieldValue = Union[int, bytes, list]
Message = list  # list[tuple[int, FieldValue]]


# --- encode -----------------------------------------------------------------

def encode_message(schema: MessageSchema, message: Message) -> bytes:
    out = bytearray()
    for number, value in message:
        field = schema.fields.get(number)
        if field is None:
            raise WireFormatError(f"field {number} not in schema {schema.name}")
        out += encode_varint((number << 3) | field.wire_type)
        if field.kind == "uint":
            out += encode_varint(value)
        elif field.kind == "fixed64":
            if not 0 <= value < 1 << 64:
                raise WireFormatError(f"fixed64 out of range: {value}")
            out += value.to_bytes(8, "little")
        elif field.kind == "fixed32":
            if not 0 <= value < 1 << 32:
                raise WireFormatError(f"fixed32 out of range: {value}")
            out += value.to_bytes(4, "little")
        elif field.kind == "bytes":
            out += encode_varint(len(value))
            out += value
        else:  # msg
            body = encode_message(field.schema, value)
            out += encode_varint(len(body))
            out += body
    return bytes(out)


# --- decode -----------------------------------------------------------------

def decode_message(schema: MessageSchema, data: bytes) -> Message:
    message, end = _decode_body(schema, data, 0, len(data), 0)
    assert end == len(data)
    return message


def _decode_body(schema, data, offset, end, depth) -> tuple[Message, int]:
    if depth > _MAX_DECODE_DEPTH:
        raise WireFormatError("nesting too deep")
    message: Message = []
    pos = offset
    while pos < end:
        key, pos = decode_varint(data, pos)
        number, wire_type = key >> 3, key & 0x7
        field = schema.fields.get(number)
        if field is None:
            raise WireFormatError(
                f"unknown field {number} in {schema.name} at byte {pos}")
        if wire_type != field.wire_type:
            raise WireFormatError(
                f"field {number} in {schema.name}: wire type {wire_type}, "
                f"expected {field.wire_type}")
        if wire_type == WT_VARINT:
            value, pos = decode_varint(data, pos)
        elif wire_type == WT_I64:
            if pos + 8 > end:
                raise WireFormatError("truncated fixed64")
            value = int.from_bytes(data[pos:pos + 8], "little")
            pos += 8
        elif wire_type == WT_I32:
            if pos + 4 > end:
                raise WireFormatError("truncated fixed32")
            value = int.from_bytes(data[pos:pos + 4], "little")
            pos += 4
        else:  # WT_LEN
            length, pos = decode_varint(data, pos)
            if pos + length > end:
                raise WireFormatError("length-delimited field overruns buffer")
            if field.kind == "msg":
                value, pos = _decode_body(field.schema, data, pos, pos + length,
                                          depth + 1)
            else:
                value = bytes(data[pos:pos + length])
                pos += length
        message.append((number, value))
    return message, pos


# --- decoded host-object image ----------------------------------------------

def decoded_image(schema: MessageSchema, message: Message) -> bytes:
    """Flat byte layout of a decoded message as it lands in host memory.

    Scalars widen to fixed slots (varint/fixed64 -> 8 bytes LE, fixed32 -> 4),
    bytes fields keep a 4-byte length prefix plus the raw payload, nested
    messages recurse behind a 4-byte length prefix. Both deserializer designs
    write exactly this image; only their transfer timing differs.
    """
    out = bytearray()
    for number, value in message:
        field = schema.fields[number]
        if field.kind in ("uint", "fixed64"):
            out += value.to_bytes(8, "little")
        elif field.kind == "fixed32":
            out += value.to_bytes(4, "little")
        elif field.kind == "bytes":
            out += len(value).to_bytes(4, "little")
            out += value
        else:
            body = decoded_image(field.schema, value)
            out += len(body).to_bytes(4, "little")
            out += body
    return bytes(out)


@dataclass
class WalkStats:
    """Counts the de/serialization engines charge time against."""
    fields: int = 0        # field entries walked, nested fields included
    messages: int = 1      # message instances (1 + nested instances)
    depth: int = 1         # deepest nesting level
    wire_bytes: int = 0
    image_bytes: int = 0


def walk_stats(schema: MessageSchema, message: Message) -> WalkStats:
    stats = WalkStats()
    stats.wire_bytes = len(encode_message(schema, message))
    stats.image_bytes = len(decoded_image(schema, message))
    _walk(schema, message, 1, stats)
    return stats


def _walk(schema, message, level, stats):
    stats.depth = max(stats.depth, level)
    for number, value in message:
        stats.fields += 1
        field = schema.fields[number]
        if field.kind == "msg":
            stats.messages += 1
            _walk(field.schema, value, level + 1, stats)
