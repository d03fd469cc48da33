"""Canonical CBOR codec for CTAP2 payloads.

Encoding always emits the canonical form required on the wire: definite
lengths, shortest-form integer heads, and map keys ordered by their
encoded bytes (major type first, then length, then lexicographically).
Decoding is lenient about integer head width but rejects indefinite
lengths, tags, floats, duplicate map keys, and anything truncated, so
arbitrary input either decodes to a value or raises :class:`CborError`.
"""

from __future__ import annotations

import struct

MAX_NESTING = 64

_MT_UINT = 0
_MT_NINT = 1
_MT_BYTES = 2
_MT_TEXT = 3
_MT_ARRAY = 4
_MT_MAP = 5
_MT_SIMPLE = 7

_FALSE = 0xF4
_TRUE = 0xF5
_NULL = 0xF6


class CborError(ValueError):
    """Malformed, non-canonical, or unsupported CBOR data."""


def _head(major: int, arg: int) -> bytes:
    mt = major << 5
    if arg < 24:
        return bytes([mt | arg])
    if arg <= 0xFF:
        return struct.pack(">BB", mt | 24, arg)
    if arg <= 0xFFFF:
        return struct.pack(">BH", mt | 25, arg)
    if arg <= 0xFFFFFFFF:
        return struct.pack(">BI", mt | 26, arg)
    if arg <= 0xFFFFFFFFFFFFFFFF:
        return struct.pack(">BQ", mt | 27, arg)
    raise CborError("integer out of CBOR range")


def _sort_key(encoded: bytes):
    # canonical map order: major type, then encoded length, then bytes
    return (encoded[0] >> 5, len(encoded), encoded)


def encode(value) -> bytes:
    """Encode ``value`` as canonical CBOR bytes."""
    out = bytearray()
    _encode_into(value, out)
    return bytes(out)


def _encode_into(value, out: bytearray) -> None:
    if value is True:
        out.append(_TRUE)
    elif value is False:
        out.append(_FALSE)
    elif value is None:
        out.append(_NULL)
    elif isinstance(value, int):
        if value >= 0:
            out += _head(_MT_UINT, value)
        else:
            out += _head(_MT_NINT, -1 - value)
    elif isinstance(value, (bytes, bytearray, memoryview)):
        value = bytes(value)
        out += _head(_MT_BYTES, len(value))
        out += value
    elif isinstance(value, str):
        raw = value.encode("utf-8")
        out += _head(_MT_TEXT, len(raw))
        out += raw
    elif isinstance(value, (list, tuple)):
        out += _head(_MT_ARRAY, len(value))
        for item in value:
            _encode_into(item, out)
    elif isinstance(value, dict):
        items = sorted(
            ((encode(k), encode(v)) for k, v in value.items()),
            key=lambda kv: _sort_key(kv[0]),
        )
        out += _head(_MT_MAP, len(items))
        for k, v in items:
            out += k
            out += v
    else:
        raise CborError(f"type {type(value).__name__} is not CBOR-encodable")


def decode(data: bytes):
    """Decode exactly one CBOR item; trailing bytes are an error."""
    value, end = _decode_item(memoryview(bytes(data)), 0, 0)
    if end != len(data):
        raise CborError("trailing bytes after CBOR item")
    return value


def _read_head(data: memoryview, pos: int) -> tuple[int, int, int]:
    if pos >= len(data):
        raise CborError("truncated CBOR")
    first = data[pos]
    major, info = first >> 5, first & 0x1F
    pos += 1
    if info < 24:
        return major, info, pos
    if info == 31:
        raise CborError("indefinite lengths are not supported")
    width = {24: 1, 25: 2, 26: 4, 27: 8}.get(info)
    if width is None:
        raise CborError("reserved additional-information value")
    if pos + width > len(data):
        raise CborError("truncated CBOR head")
    arg = int.from_bytes(data[pos : pos + width], "big")
    return major, arg, pos + width


def _decode_item(data: memoryview, pos: int, depth: int):
    if depth > MAX_NESTING:
        raise CborError("nesting too deep")
    major, arg, pos = _read_head(data, pos)
    if major == _MT_UINT:
        return arg, pos
    if major == _MT_NINT:
        return -1 - arg, pos
    if major in (_MT_BYTES, _MT_TEXT):
        if pos + arg > len(data):
            raise CborError("truncated string body")
        raw = bytes(data[pos : pos + arg])
        pos += arg
        if major == _MT_BYTES:
            return raw, pos
        try:
            return raw.decode("utf-8"), pos
        except UnicodeDecodeError as exc:
            raise CborError("invalid UTF-8 in text string") from exc
    if major == _MT_ARRAY:
        if arg > len(data) - pos:
            raise CborError("array length exceeds input")
        items = []
        for _ in range(arg):
            item, pos = _decode_item(data, pos, depth + 1)
            items.append(item)
        return items, pos
    if major == _MT_MAP:
        if arg > (len(data) - pos) // 2:
            raise CborError("map length exceeds input")
        result = {}
        for _ in range(arg):
            key, pos = _decode_item(data, pos, depth + 1)
            if not isinstance(key, (int, str, bytes)):
                raise CborError("unsupported map key type")
            if key in result:
                raise CborError("duplicate map key")
            value, pos = _decode_item(data, pos, depth + 1)
            result[key] = value
        return result, pos
    if major == _MT_SIMPLE:
        # only the one-byte encodings of false/true/null are accepted
        if arg == 20 and data[pos - 1] == _FALSE:
            return False, pos
        if arg == 21 and data[pos - 1] == _TRUE:
            return True, pos
        if arg == 22 and data[pos - 1] == _NULL:
            return None, pos
        raise CborError("unsupported simple value")
    raise CborError("unsupported major type (tags and floats are rejected)")
