"""Frame histograms from qlog traces (JSON format, as aioquic writes them).

A packet's raw length is attributed to every frame type it carries, so
``bytes`` for a type is the volume of packets containing that type.  The
``alone`` counter tracks packets in which the type was the only frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from ..transport import CLIENT_TO_SERVER, DIRECTIONS, SERVER_TO_CLIENT

KNOWN_FRAME_TYPES = frozenset({
    "PADDING", "PING", "ACK", "RESET_STREAM", "STOP_SENDING", "CRYPTO", "NEW_TOKEN", "STREAM",
    "MAX_DATA", "MAX_STREAM_DATA", "MAX_STREAMS", "DATA_BLOCKED", "STREAM_DATA_BLOCKED",
    "STREAMS_BLOCKED", "NEW_CONNECTION_ID", "RETIRE_CONNECTION_ID", "PATH_CHALLENGE",
    "PATH_RESPONSE", "CONNECTION_CLOSE", "HANDSHAKE_DONE", "DATAGRAM",
})
OTHER = "other"

_SENT = ("packet_sent", "transport:packet_sent")
_RECEIVED = ("packet_received", "transport:packet_received")


class MalformedTrace(ValueError):
    pass


@dataclass
class FrameStats:
    count: int = 0
    packets: int = 0
    bytes: int = 0
    alone: int = 0


@dataclass
class FrameHistogram:
    frames: dict = field(default_factory=lambda: {d: {} for d in DIRECTIONS})
    packets: dict = field(default_factory=lambda: {d: 0 for d in DIRECTIONS})
    octets: dict = field(default_factory=lambda: {d: 0 for d in DIRECTIONS})

    def count(self, frame_type: str, direction: Optional[str] = None) -> int:
        directions = DIRECTIONS if direction is None else (direction,)
        return sum(self.frames[d][frame_type].count for d in directions if frame_type in self.frames[d])

    def counts(self, direction: Optional[str] = None) -> dict:
        directions = DIRECTIONS if direction is None else (direction,)
        out = {}
        for d in directions:
            for name, stats in self.frames[d].items():
                out[name] = out.get(name, 0) + stats.count
        return out

    def to_dict(self) -> dict:
        return {
            "frames": {d: {k: dict(v.__dict__) for k, v in sorted(self.frames[d].items())} for d in DIRECTIONS},
            "packets": dict(self.packets),
            "octets": dict(self.octets),
        }

    def _add_packet(self, direction: str, frame_types: list, length: int):
        self.packets[direction] += 1
        self.octets[direction] += length
        table = self.frames[direction]
        for name in frame_types:
            table.setdefault(name, FrameStats()).count += 1
        for name in set(frame_types):
            stats = table[name]
            stats.packets += 1
            stats.bytes += length
            if len(frame_types) == 1:
                stats.alone += 1


def _frame_name(frame) -> str:
    if not isinstance(frame, dict) or not isinstance(frame.get("frame_type"), str):
        raise MalformedTrace(f"frame without a frame_type: {frame!r}")
    name = frame["frame_type"].upper()
    return name if name in KNOWN_FRAME_TYPES else OTHER


def _split_traces(trace) -> list:
    """Normalize to ``[(vantage, events)]``."""
    if isinstance(trace, list):
        return [(None, trace)]
    if not isinstance(trace, dict):
        raise MalformedTrace(f"expected a qlog object or event list, got {type(trace).__name__}")
    if "traces" in trace:
        if not isinstance(trace["traces"], list):
            raise MalformedTrace("'traces' is not a list")
        return [t for sub in trace["traces"] for t in _split_traces(sub)]
    if "events" in trace:
        vantage = trace.get("vantage_point", {}).get("type")
        if not isinstance(trace["events"], list):
            raise MalformedTrace("'events' is not a list")
        return [(vantage, trace["events"])]
    raise MalformedTrace("no 'traces' or 'events' key")


def parse_qlog_frames(trace, vantage: Optional[str] = None) -> FrameHistogram:
    """Count frames per type and direction.

    ``trace`` may be a whole qlog file object, a single trace, or a bare event
    list.  ``vantage`` ("client" or "server") overrides or supplies the
    trace's vantage point; it defaults to "client" for bare event lists.
    """
    histogram = FrameHistogram()
    for trace_vantage, events in _split_traces(trace):
        point = vantage or trace_vantage or "client"
        if point not in ("client", "server"):
            raise MalformedTrace(f"unknown vantage point {point!r}")
        outbound = CLIENT_TO_SERVER if point == "client" else SERVER_TO_CLIENT
        inbound = SERVER_TO_CLIENT if point == "client" else CLIENT_TO_SERVER
        for event in events:
            if not isinstance(event, dict) or not isinstance(event.get("name"), str):
                raise MalformedTrace(f"event without a name: {event!r}")
            if event["name"] in _SENT:
                direction = outbound
            elif event["name"] in _RECEIVED:
                direction = inbound
            else:
                continue
            data = event.get("data")
            if not isinstance(data, dict) or not isinstance(data.get("frames", []), list):
                raise MalformedTrace(f"packet event without a frame list: {event!r}")
            length = data.get("raw", {}).get("length", 0)
            if not isinstance(length, int) or length < 0:
                raise MalformedTrace(f"bad raw length {length!r}")
            histogram._add_packet(direction, [_frame_name(f) for f in data.get("frames", [])], length)
    return histogram


def load_qlog(path: str) -> FrameHistogram:
    with open(path) as fh:
        try:
            document = json.load(fh)
        except json.JSONDecodeError as exc:
            raise MalformedTrace(f"{path}: not JSON: {exc}") from exc
    return parse_qlog_frames(document)
