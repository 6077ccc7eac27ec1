"""Negotiation messages and their length-prefixed frame encoding.

Frame layout (big-endian)::

    +----------------+----------+---------+----------------------+
    | length: uint32 | type: u8 | ver: u8 | payload (length B)   |
    +----------------+----------+---------+----------------------+

Payloads are UTF-8 XML fragments, except DataPush whose payload is an
8-byte sequence number followed by the raw data bytes.
"""

from __future__ import annotations

import struct
import xml.etree.ElementTree as ET
from xml.sax.saxutils import quoteattr
from dataclasses import dataclass
from typing import ClassVar, Union

from .errors import DecodeError, PrivnegError
from .policy import FormFactorSet, Retention, factors_from_element, factors_to_element

VERSION = 0x01
HEADER = struct.Struct(">IBB")
HEADER_SIZE = HEADER.size  # 6
MAX_PAYLOAD = 16 * 1024 * 1024
_SEQ = struct.Struct(">Q")


@dataclass(frozen=True)
class AccessRequest:
    TYPE: ClassVar[int] = 0x01
    factors: FormFactorSet

    @property
    def data_type(self) -> str:
        return self.factors.data_type


@dataclass(frozen=True)
class DataGrant:
    TYPE: ClassVar[int] = 0x02
    factors: FormFactorSet


@dataclass(frozen=True)
class Proposal:
    TYPE: ClassVar[int] = 0x03
    factors: FormFactorSet


@dataclass(frozen=True)
class ProposalAccept:
    TYPE: ClassVar[int] = 0x04


@dataclass(frozen=True)
class ProposalReject:
    TYPE: ClassVar[int] = 0x05


@dataclass(frozen=True)
class Denied:
    TYPE: ClassVar[int] = 0x06
    reason: str


@dataclass(frozen=True)
class DataPush:
    TYPE: ClassVar[int] = 0x07
    sequence: int
    payload: bytes


@dataclass(frozen=True)
class Notify:
    """Final group policy sent to a member whose preferences could not be met."""

    TYPE: ClassVar[int] = 0x08
    user_id: str
    factors: tuple[FormFactorSet, ...]
    include: tuple[bool, ...]


@dataclass(frozen=True)
class GroupPrefSubmit:
    """A member's per-sensor preferences, with optional fallback rules."""

    TYPE: ClassVar[int] = 0x09
    user_id: str
    prefs: tuple[FormFactorSet, ...]
    fallbacks: tuple[FormFactorSet, ...] = ()


Message = Union[
    AccessRequest, DataGrant, Proposal, ProposalAccept, ProposalReject,
    Denied, DataPush, Notify, GroupPrefSubmit,
]

_FACTOR_MESSAGES = {AccessRequest: "access-request", DataGrant: "data-grant", Proposal: "proposal"}
BY_TYPE = {
    cls.TYPE: cls
    for cls in (AccessRequest, DataGrant, Proposal, ProposalAccept, ProposalReject,
                Denied, DataPush, Notify, GroupPrefSubmit)
}


def _xml(el: ET.Element) -> bytes:
    return ET.tostring(el, encoding="utf-8", xml_declaration=False)


def _factor_xml(f: FormFactorSet, tag: str) -> bytes:
    # hot path: same document factors_to_element would produce
    retention = "" if f.retention is Retention.NONE else f.retention.label
    return (
        f"<{tag} type={quoteattr(f.data_type)}><retention>{retention}</retention>"
        f"<shared>{'yes' if f.shared else 'no'}</shared>"
        f"<inferred>{'yes' if f.inferred else 'no'}</inferred></{tag}>"
    ).encode("utf-8")


def _encode_payload(msg: Message) -> bytes:
    cls = type(msg)
    if cls in _FACTOR_MESSAGES:
        return _factor_xml(msg.factors, _FACTOR_MESSAGES[cls])
    if cls in (ProposalAccept, ProposalReject):
        return b""
    if cls is Denied:
        return _xml(ET.Element("denied", reason=msg.reason))
    if cls is DataPush:
        return _SEQ.pack(msg.sequence) + bytes(msg.payload)
    if cls is Notify:
        if len(msg.factors) != len(msg.include):
            raise ValueError("Notify needs one include flag per sensor")
        root = ET.Element("notify", user=msg.user_id)
        for f, inc in zip(msg.factors, msg.include):
            root.append(factors_to_element(f, "sensor", include="1" if inc else "0"))
        return _xml(root)
    if cls is GroupPrefSubmit:
        root = ET.Element("group-pref", user=msg.user_id)
        for tag, items in (("pref", msg.prefs), ("fallback", msg.fallbacks)):
            for f in items:
                root.append(factors_to_element(f, tag))
        return _xml(root)
    raise TypeError(f"not a negotiation message: {msg!r}")


def encode(msg: Message) -> bytes:
    payload = _encode_payload(msg)
    return HEADER.pack(len(payload), msg.TYPE, VERSION) + payload


def _parse_xml(payload: bytes, tag: str) -> ET.Element:
    try:
        root = ET.fromstring(payload.decode("utf-8"))
    except (ET.ParseError, UnicodeDecodeError) as exc:
        raise DecodeError("MalformedPayload", str(exc)) from exc
    if root.tag != tag:
        raise DecodeError("MalformedPayload", f"expected <{tag}>, got <{root.tag}>")
    return root


def _decode_payload(cls, payload: bytes) -> Message:
    if cls in _FACTOR_MESSAGES:
        root = _parse_xml(payload, _FACTOR_MESSAGES[cls])
        return cls(factors_from_element(root, strict=True))
    if cls in (ProposalAccept, ProposalReject):
        if payload:
            raise DecodeError("MalformedPayload", f"{cls.__name__} carries no payload")
        return cls()
    if cls is Denied:
        root = _parse_xml(payload, "denied")
        return Denied(root.get("reason", ""))
    if cls is DataPush:
        if len(payload) < _SEQ.size:
            raise DecodeError("MalformedPayload", "DataPush shorter than its sequence number")
        (seq,) = _SEQ.unpack_from(payload)
        return DataPush(seq, payload[_SEQ.size:])
    if cls is Notify:
        root = _parse_xml(payload, "notify")
        factors, include = [], []
        for el in root:
            if el.tag != "sensor":
                raise DecodeError("MalformedPayload", f"unexpected <{el.tag}> in notify")
            factors.append(factors_from_element(el, strict=True))
            include.append(el.get("include", "1") == "1")
        return Notify(root.get("user", ""), tuple(factors), tuple(include))
    if cls is GroupPrefSubmit:
        root = _parse_xml(payload, "group-pref")
        prefs, fallbacks = [], []
        for el in root:
            if el.tag == "pref":
                prefs.append(factors_from_element(el, strict=True))
            elif el.tag == "fallback":
                fallbacks.append(factors_from_element(el, strict=True))
            else:
                raise DecodeError("MalformedPayload", f"unexpected <{el.tag}> in group-pref")
        return GroupPrefSubmit(root.get("user", ""), tuple(prefs), tuple(fallbacks))
    raise AssertionError(cls)


def decode_header(header: bytes) -> tuple[int, int]:
    """Validate a 6-byte header; return (payload length, message type)."""
    if len(header) < HEADER_SIZE:
        raise DecodeError("TruncatedFrame", f"header has {len(header)} of {HEADER_SIZE} bytes")
    length, msg_type, version = HEADER.unpack_from(header)
    if version != VERSION:
        raise DecodeError("BadVersion", f"version 0x{version:02x}")
    if msg_type not in BY_TYPE:
        raise DecodeError("BadType", f"message type 0x{msg_type:02x}")
    if length > MAX_PAYLOAD:
        raise DecodeError("MalformedPayload", f"payload length {length} exceeds limit")
    return length, msg_type


def decode(frame: bytes) -> Message:
    """Decode exactly one complete frame."""
    frame = bytes(frame)
    length, msg_type = decode_header(frame[:HEADER_SIZE])
    payload = frame[HEADER_SIZE:]
    if len(payload) < length:
        raise DecodeError("TruncatedFrame", f"payload has {len(payload)} of {length} bytes")
    if len(payload) > length:
        raise DecodeError("MalformedPayload", f"{len(payload) - length} trailing bytes")
    try:
        return _decode_payload(BY_TYPE[msg_type], payload)
    except DecodeError:
        raise
    except (PrivnegError, ValueError) as exc:
        raise DecodeError("MalformedPayload", str(exc)) from exc


def describe(msg: Message) -> str:
    """One-line human-readable rendering used in transcripts."""
    name = type(msg).__name__
    if isinstance(msg, (AccessRequest, DataGrant, Proposal)):
        return f"{name} {msg.factors}"
    if isinstance(msg, Denied):
        return f"{name}({msg.reason})"
    if isinstance(msg, DataPush):
        return f"{name}#{msg.sequence} ({len(msg.payload)} bytes)"
    if isinstance(msg, Notify):
        return f"{name} -> {msg.user_id} ({len(msg.factors)} sensors)"
    if isinstance(msg, GroupPrefSubmit):
        return f"{name} from {msg.user_id} ({len(msg.prefs)} prefs)"
    return name
