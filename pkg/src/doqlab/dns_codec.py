"""DNS wire format (RFC 1035), EDNS(0) padding and DoQ length framing.

Names are carried as tuples of raw label octets so that arbitrary labels
(including punycode or binary labels) survive a round trip unchanged.  The
encoder never compresses; the decoder follows compression pointers, also
inside the rdata of the handful of types whose rdata embeds names, and
stores that rdata in its uncompressed form.
"""

from __future__ import annotations

import ipaddress
import struct
from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Iterable, Sequence, Union

MAX_MESSAGE_SIZE = 65535
MAX_LABEL_LENGTH = 63
MAX_NAME_LENGTH = 255

EDNS_UDP_PAYLOAD = 1232
EDNS_OPTION_PADDING = 12
DEFAULT_QUERY_PAD_BLOCK = 128
DEFAULT_RESPONSE_PAD_BLOCK = 468

_HEADER = struct.Struct("!HHHHHH")
_QUESTION_TAIL = struct.Struct("!HH")
_RR_TAIL = struct.Struct("!HHIH")
_U16 = struct.Struct("!H")
_OPTION = struct.Struct("!HH")


class RecordType(IntEnum):
    A = 1
    NS = 2
    CNAME = 5
    SOA = 6
    PTR = 12
    MX = 15
    TXT = 16
    AAAA = 28
    SRV = 33
    DNAME = 39
    OPT = 41


class RecordClass(IntEnum):
    IN = 1


class Opcode(IntEnum):
    QUERY = 0
    IQUERY = 1
    STATUS = 2
    NOTIFY = 4
    UPDATE = 5
    DSO = 6


class Rcode(IntEnum):
    NOERROR = 0
    FORMERR = 1
    SERVFAIL = 2
    NXDOMAIN = 3
    NOTIMP = 4
    REFUSED = 5


class DnsCodecError(ValueError):
    """Base class for every error the codec raises."""


class OversizeMessage(DnsCodecError):
    pass


class InvalidLabel(DnsCodecError):
    pass


class TruncatedMessage(DnsCodecError):
    pass


class CompressionLoop(DnsCodecError):
    pass


class CountMismatch(DnsCodecError):
    pass


class MalformedRecord(DnsCodecError):
    pass


class StrictModeViolation(DnsCodecError):
    pass


class NotAQuery(DnsCodecError):
    pass


Name = tuple  # tuple[bytes, ...]
NameLike = Union[str, Sequence[bytes]]


def _check_labels(labels: Sequence[bytes]) -> tuple:
    total = 1
    for label in labels:
        if not isinstance(label, (bytes, bytearray)):
            raise InvalidLabel(f"label {label!r} is not bytes")
        if not 1 <= len(label) <= MAX_LABEL_LENGTH:
            raise InvalidLabel(f"label length {len(label)} outside 1..{MAX_LABEL_LENGTH}")
        total += len(label) + 1
    if total > MAX_NAME_LENGTH:
        raise InvalidLabel(f"name is {total} octets on the wire, limit {MAX_NAME_LENGTH}")
    return tuple(bytes(label) for label in labels)


def parse_name(name: NameLike) -> Name:
    """Turn ``"example.org"`` (or an existing label tuple) into validated labels."""
    if not isinstance(name, str):
        return _check_labels(list(name))
    text = name[:-1] if name.endswith(".") else name
    if text == "":
        return ()
    try:
        labels = [part.encode("ascii") for part in text.split(".")]
    except UnicodeEncodeError as exc:
        raise InvalidLabel(f"non-ASCII name {name!r}; pass punycode") from exc
    return _check_labels(labels)


def format_name(labels: Sequence[bytes]) -> str:
    if not labels:
        return "."
    return ".".join(label.decode("ascii", "backslashreplace") for label in labels)


def names_equal(a: Sequence[bytes], b: Sequence[bytes]) -> bool:
    # bytes.lower() folds ASCII letters only
    return len(a) == len(b) and all(x.lower() == y.lower() for x, y in zip(a, b))


@dataclass(frozen=True)
class DnsHeader:
    id: int = 0
    qr: bool = False
    opcode: int = Opcode.QUERY
    aa: bool = False
    tc: bool = False
    rd: bool = False
    ra: bool = False
    z: int = 0
    rcode: int = Rcode.NOERROR
    qdcount: int = 0
    ancount: int = 0
    nscount: int = 0
    arcount: int = 0

    def flags(self) -> int:
        return (
            (int(self.qr) << 15)
            | ((self.opcode & 0xF) << 11)
            | (int(self.aa) << 10)
            | (int(self.tc) << 9)
            | (int(self.rd) << 8)
            | (int(self.ra) << 7)
            | ((self.z & 0x7) << 4)
            | (self.rcode & 0xF)
        )


@dataclass(frozen=True)
class Question:
    qname: Name
    qtype: int = RecordType.A
    qclass: int = RecordClass.IN


@dataclass(frozen=True)
class ResourceRecord:
    name: Name
    rtype: int
    rclass: int
    ttl: int
    rdata: bytes = b""

    def __post_init__(self):
        if len(self.rdata) > 0xFFFF:
            raise MalformedRecord("rdata longer than 65535 octets")
        if not 0 <= self.ttl <= 0xFFFFFFFF:
            raise MalformedRecord(f"ttl {self.ttl} outside 32-bit range")
        if self.rtype == RecordType.A and self.rclass == RecordClass.IN and len(self.rdata) != 4:
            raise MalformedRecord(f"A record rdata must be 4 octets, got {len(self.rdata)}")


@dataclass(frozen=True)
class DnsMessage:
    header: DnsHeader
    questions: tuple = ()
    answers: tuple = ()
    authorities: tuple = ()
    additionals: tuple = ()

    def __post_init__(self):
        for name in ("questions", "answers", "authorities", "additionals"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        h = self.header
        counts = (h.qdcount, h.ancount, h.nscount, h.arcount)
        actual = (len(self.questions), len(self.answers), len(self.authorities), len(self.additionals))
        if counts != actual:
            raise CountMismatch(f"header counts {counts} but sections hold {actual}")

    @classmethod
    def build(cls, header: DnsHeader | None = None, questions=(), answers=(),
              authorities=(), additionals=()) -> "DnsMessage":
        """Assemble a message, filling the header section counts from the sections."""
        header = replace(
            header or DnsHeader(),
            qdcount=len(questions),
            ancount=len(answers),
            nscount=len(authorities),
            arcount=len(additionals),
        )
        return cls(header, questions, answers, authorities, additionals)

    def with_sections(self, **sections) -> "DnsMessage":
        parts = {
            "questions": self.questions,
            "answers": self.answers,
            "authorities": self.authorities,
            "additionals": self.additionals,
        }
        parts.update(sections)
        return DnsMessage.build(self.header, **parts)

    def with_header(self, **changes) -> "DnsMessage":
        return replace(self, header=replace(self.header, **changes))

    @property
    def id(self) -> int:
        return self.header.id

    def opt_record(self) -> ResourceRecord | None:
        for rr in self.additionals:
            if rr.rtype == RecordType.OPT:
                return rr
        return None


# -- encoding ---------------------------------------------------------------

def encode_name(labels: Sequence[bytes]) -> bytes:
    labels = _check_labels(labels)
    return b"".join(bytes((len(label),)) + label for label in labels) + b"\x00"


def _encode_rr(rr: ResourceRecord) -> bytes:
    return encode_name(rr.name) + _RR_TAIL.pack(rr.rtype, rr.rclass, rr.ttl, len(rr.rdata)) + rr.rdata


def encode_message(msg: DnsMessage) -> bytes:
    h = msg.header
    parts = [_HEADER.pack(h.id, h.flags(), h.qdcount, h.ancount, h.nscount, h.arcount)]
    for q in msg.questions:
        parts.append(encode_name(q.qname) + _QUESTION_TAIL.pack(q.qtype, q.qclass))
    for section in (msg.answers, msg.authorities, msg.additionals):
        parts.extend(_encode_rr(rr) for rr in section)
    wire = b"".join(parts)
    if len(wire) > MAX_MESSAGE_SIZE:
        raise OversizeMessage(f"encoded message is {len(wire)} octets")
    return wire


# -- decoding ---------------------------------------------------------------

def _read_name(wire: bytes, offset: int, limit: int | None = None) -> tuple:
    """Read a possibly compressed name starting at ``offset``.

    ``limit`` bounds the uncompressed prefix (used for names inside rdata).
    Returns ``(labels, offset just past the name in the original position)``.
    """
    bound = len(wire) if limit is None else limit
    labels = []
    visited = set()
    pos = offset
    end = None
    total = 1
    while True:
        if pos >= bound:
            raise TruncatedMessage(f"name runs past octet {bound}")
        length = wire[pos]
        kind = length & 0xC0
        if kind == 0xC0:
            if pos + 1 >= bound:
                raise TruncatedMessage("compression pointer cut short")
            target = ((length & 0x3F) << 8) | wire[pos + 1]
            if end is None:
                end = pos + 2
            if target in visited:
                raise CompressionLoop(f"pointer cycle through offset {target}")
            visited.add(target)
            # pointers may lead anywhere in the message, not just the rdata
            pos, bound = target, len(wire)
            continue
        if kind:
            raise InvalidLabel(f"reserved label type 0x{kind:02x} at offset {pos}")
        if length == 0:
            pos += 1
            break
        if pos + 1 + length > bound:
            raise TruncatedMessage("label runs past end of data")
        labels.append(wire[pos + 1:pos + 1 + length])
        total += length + 1
        if total > MAX_NAME_LENGTH:
            raise InvalidLabel("decoded name longer than 255 octets")
        pos += 1 + length
    return tuple(labels), (pos if end is None else end)


# rtype -> layout of the rdata: "n" a name, an int is that many fixed octets
_NAME_RDATA = {
    RecordType.NS: ("n",),
    RecordType.CNAME: ("n",),
    RecordType.PTR: ("n",),
    RecordType.DNAME: ("n",),
    RecordType.MX: (2, "n"),
    RecordType.SOA: ("n", "n", 20),
    RecordType.SRV: (6, "n"),
}


def _canonical_rdata(wire: bytes, rtype: int, start: int, end: int) -> bytes:
    layout = _NAME_RDATA.get(rtype)
    if layout is None:
        return wire[start:end]
    pos = start
    out = []
    for item in layout:
        if item == "n":
            labels, pos = _read_name(wire, pos, limit=end)
            out.append(encode_name(labels))
        else:
            if pos + item > end:
                raise MalformedRecord(f"type {rtype} rdata too short")
            out.append(wire[pos:pos + item])
            pos += item
    if pos != end:
        raise MalformedRecord(f"type {rtype} rdata has {end - pos} trailing octets")
    return b"".join(out)


def decode_message(wire: bytes, strict: bool = False) -> DnsMessage:
    """Parse one DNS message.

    Every failure surfaces as a :class:`DnsCodecError` subclass.  With
    ``strict`` set, a nonzero Z field or an unassigned opcode is rejected.
    """
    wire = bytes(wire)
    if len(wire) < _HEADER.size:
        raise TruncatedMessage(f"{len(wire)} octets is shorter than a header")
    txid, flags, qd, an, ns, ar = _HEADER.unpack_from(wire)
    header = DnsHeader(
        id=txid,
        qr=bool(flags & 0x8000),
        opcode=(flags >> 11) & 0xF,
        aa=bool(flags & 0x0400),
        tc=bool(flags & 0x0200),
        rd=bool(flags & 0x0100),
        ra=bool(flags & 0x0080),
        z=(flags >> 4) & 0x7,
        rcode=flags & 0xF,
        qdcount=qd,
        ancount=an,
        nscount=ns,
        arcount=ar,
    )
    if strict:
        if header.z:
            raise StrictModeViolation(f"nonzero Z field {header.z}")
        if header.opcode not in Opcode._value2member_map_:
            raise StrictModeViolation(f"unknown opcode {header.opcode}")

    pos = _HEADER.size
    questions = []
    for _ in range(qd):
        qname, pos = _read_name(wire, pos)
        if pos + _QUESTION_TAIL.size > len(wire):
            raise TruncatedMessage("question section cut short")
        qtype, qclass = _QUESTION_TAIL.unpack_from(wire, pos)
        pos += _QUESTION_TAIL.size
        questions.append(Question(qname, qtype, qclass))

    sections = []
    for count in (an, ns, ar):
        records = []
        for _ in range(count):
            name, pos = _read_name(wire, pos)
            if pos + _RR_TAIL.size > len(wire):
                raise TruncatedMessage("resource record header cut short")
            rtype, rclass, ttl, rdlength = _RR_TAIL.unpack_from(wire, pos)
            pos += _RR_TAIL.size
            if pos + rdlength > len(wire):
                raise TruncatedMessage("rdata runs past end of message")
            rdata = _canonical_rdata(wire, rtype, pos, pos + rdlength)
            pos += rdlength
            records.append(ResourceRecord(name, rtype, rclass, ttl, rdata))
        sections.append(records)

    if pos != len(wire):
        raise CountMismatch(f"{len(wire) - pos} octets left after the counted sections")
    return DnsMessage(header, questions, *sections)


# -- construction helpers ---------------------------------------------------

def make_query(name: NameLike, rtype: int = RecordType.A, txid: int = 0,
               recursion_desired: bool = True, rclass: int = RecordClass.IN) -> DnsMessage:
    if not 0 <= txid <= 0xFFFF:
        raise ValueError(f"transaction id {txid} is not 16-bit")
    header = DnsHeader(id=txid, opcode=Opcode.QUERY, rd=recursion_desired)
    return DnsMessage.build(header, questions=[Question(parse_name(name), rtype, rclass)])


def make_response(query: DnsMessage, answers: Iterable[ResourceRecord] = (),
                  rcode: int = Rcode.NOERROR, authorities=(), additionals=()) -> DnsMessage:
    if query.header.qr:
        raise NotAQuery("cannot answer a message that is itself a response")
    header = DnsHeader(
        id=query.header.id,
        qr=True,
        opcode=query.header.opcode,
        rd=query.header.rd,
        ra=True,
        rcode=rcode,
    )
    return DnsMessage.build(header, questions=query.questions, answers=list(answers),
                            authorities=list(authorities), additionals=list(additionals))


def a_record(name: NameLike, address: str, ttl: int = 300) -> ResourceRecord:
    packed = ipaddress.IPv4Address(address).packed
    return ResourceRecord(parse_name(name), RecordType.A, RecordClass.IN, ttl, packed)


def answer_addresses(msg: DnsMessage) -> list:
    return [str(ipaddress.IPv4Address(rr.rdata)) for rr in msg.answers
            if rr.rtype == RecordType.A and rr.rclass == RecordClass.IN]


# -- EDNS padding -----------------------------------------------------------

def iter_options(rdata: bytes) -> list:
    """Split OPT rdata into ``(code, data)`` pairs."""
    options = []
    pos = 0
    while pos < len(rdata):
        if pos + _OPTION.size > len(rdata):
            raise MalformedRecord("EDNS option header cut short")
        code, length = _OPTION.unpack_from(rdata, pos)
        pos += _OPTION.size
        if pos + length > len(rdata):
            raise MalformedRecord("EDNS option data cut short")
        options.append((code, rdata[pos:pos + length]))
        pos += length
    return options


def _join_options(options) -> bytes:
    return b"".join(_OPTION.pack(code, len(data)) + data for code, data in options)


def _replace_opt(msg: DnsMessage, opt: ResourceRecord) -> DnsMessage:
    additionals = list(msg.additionals)
    for i, rr in enumerate(additionals):
        if rr.rtype == RecordType.OPT:
            additionals[i] = opt
            break
    else:
        additionals.append(opt)
    return msg.with_sections(additionals=additionals)


def padding_length(msg: DnsMessage) -> int:
    """Fill octets carried by the message's padding option (0 when absent)."""
    opt = msg.opt_record()
    if opt is None:
        return 0
    return sum(len(data) for code, data in iter_options(opt.rdata) if code == EDNS_OPTION_PADDING)


def strip_padding(msg: DnsMessage) -> DnsMessage:
    opt = msg.opt_record()
    if opt is None:
        return msg
    kept = [(c, d) for c, d in iter_options(opt.rdata) if c != EDNS_OPTION_PADDING]
    return _replace_opt(msg, replace(opt, rdata=_join_options(kept)))


def apply_padding(msg: DnsMessage, block: int) -> DnsMessage:
    """Pad the encoded message to a multiple of ``block`` octets.

    The OPT record (added if missing) and a padding option header are part of
    the length being rounded up, so re-padding with the same block yields the
    same size.
    """
    if block < 1:
        raise ValueError("padding block must be positive")
    opt = msg.opt_record() or ResourceRecord((), RecordType.OPT, EDNS_UDP_PAYLOAD, 0, b"")
    kept = [(c, d) for c, d in iter_options(opt.rdata) if c != EDNS_OPTION_PADDING]
    bare = _replace_opt(msg, replace(opt, rdata=_join_options(kept + [(EDNS_OPTION_PADDING, b"")])))
    base = len(encode_message(bare))
    fill = -base % block
    if base + fill > MAX_MESSAGE_SIZE:
        raise OversizeMessage(f"padding to block {block} needs {base + fill} octets")
    rdata = _join_options(kept + [(EDNS_OPTION_PADDING, b"\x00" * fill)])
    return _replace_opt(msg, replace(opt, rdata=rdata))


# -- DoQ framing ------------------------------------------------------------

def frame_message(wire: bytes) -> bytes:
    if len(wire) > MAX_MESSAGE_SIZE:
        raise OversizeMessage(f"cannot frame {len(wire)} octets behind a 2-octet length")
    return _U16.pack(len(wire)) + wire


def unframe_messages(buffer: bytes) -> tuple:
    """Split ``buffer`` into complete length-prefixed messages.

    Returns ``(messages, remainder)``; an incomplete trailing frame stays in
    the remainder so the caller can prepend it to the next chunk.
    """
    messages = []
    pos = 0
    while len(buffer) - pos >= 2:
        (length,) = _U16.unpack_from(buffer, pos)
        if len(buffer) - pos - 2 < length:
            break
        messages.append(bytes(buffer[pos + 2:pos + 2 + length]))
        pos += 2 + length
    return messages, bytes(buffer[pos:])

