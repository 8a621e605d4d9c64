"""TCP segment crafting, sending, and capture.

Two interchangeable backends implement the same interface: the simulator
backend (see :mod:`inferscan.simnet`) and an optional raw-socket backend
for live use.  Scan logic is written against :class:`Transport` and a
:class:`Clock`, so the same code runs on virtual or wall-clock time.

Workers sharing a transport own disjoint flow filters; send and capture
serialize internally, and ordering guarantees hold per flow.
"""

from __future__ import annotations

import json
import socket
import struct
import threading
from dataclasses import dataclass, replace
from typing import Iterable, Optional

NS_PER_SEC = 1_000_000_000

FLAG_BITS = {"SYN": 0x02, "ACK": 0x10, "RST": 0x04, "FIN": 0x01}
FLAG_ORDER = ("FIN", "SYN", "RST", "ACK")


class TransportError(Exception):
    """Base class for transport failures."""


class TransportClosedError(TransportError):
    pass


class SpoofingUnsupportedError(TransportError):
    pass


class RateLimitError(TransportError):
    pass


class InvalidSegmentError(TransportError, ValueError):
    pass


def _check_addr(addr: str) -> str:
    try:
        socket.inet_aton(addr)
    except (OSError, TypeError) as exc:
        raise InvalidSegmentError(f"invalid IPv4 address: {addr!r}") from exc
    if addr.count(".") != 3:
        raise InvalidSegmentError(f"invalid IPv4 address: {addr!r}")
    return addr


def addr_to_int(addr: str) -> int:
    return struct.unpack("!I", socket.inet_aton(addr))[0]


def int_to_addr(value: int) -> str:
    return socket.inet_ntoa(struct.pack("!I", value & 0xFFFFFFFF))


@dataclass(frozen=True, order=True)
class FlowKey:
    """4-tuple identifying one direction of a TCP flow.

    Equality is exact tuple equality.  For capture filters, fields set to
    None act as wildcards (see :meth:`matches`).
    """

    src_addr: Optional[str]
    src_port: Optional[int]
    dst_addr: Optional[str]
    dst_port: Optional[int]

    def matches(self, other: "FlowKey") -> bool:
        for mine, theirs in zip(self._tuple(), other._tuple()):
            if mine is not None and mine != theirs:
                return False
        return True

    def reversed(self) -> "FlowKey":
        return FlowKey(self.dst_addr, self.dst_port, self.src_addr, self.src_port)

    def _tuple(self):
        return (self.src_addr, self.src_port, self.dst_addr, self.dst_port)


@dataclass(frozen=True)
class TcpSegment:
    src_addr: str
    dst_addr: str
    src_port: int
    dst_port: int
    seq: int
    ack: int
    flags: frozenset
    ttl: int
    ipid: int
    timestamp: int  # monotonic nanoseconds

    @property
    def flow(self) -> FlowKey:
        return FlowKey(self.src_addr, self.src_port, self.dst_addr, self.dst_port)

    def has(self, *names: str) -> bool:
        return all(n in self.flags for n in names)


@dataclass
class SegmentSpec:
    """Descriptor for :meth:`Transport.craft_segment`.

    Unset fields fall back to transport defaults; ``seq=None`` pulls the
    next value from the session ISN generator.
    """

    dst_addr: str = ""
    dst_port: int = 0
    flags: Iterable[str] = ()
    src_addr: Optional[str] = None
    src_port: int = 0
    seq: Optional[int] = None
    ack: int = 0
    ttl: int = 64
    ipid: Optional[int] = None


@dataclass(frozen=True)
class SendReceipt:
    timestamp: int  # ns at which the segment entered the wire/simulation


def validate_segment(seg: TcpSegment, crafted: bool = True) -> TcpSegment:
    _check_addr(seg.src_addr)
    _check_addr(seg.dst_addr)
    for name, port in (("src_port", seg.src_port), ("dst_port", seg.dst_port)):
        if not 0 <= port <= 0xFFFF:
            raise InvalidSegmentError(f"{name} out of range: {port}")
    if not 0 <= seg.seq <= 0xFFFFFFFF:
        raise InvalidSegmentError(f"seq out of range: {seg.seq}")
    if not 0 <= seg.ack <= 0xFFFFFFFF:
        raise InvalidSegmentError(f"ack out of range: {seg.ack}")
    if not 1 <= seg.ttl <= 255:
        raise InvalidSegmentError(f"ttl out of range: {seg.ttl}")
    if not 0 <= seg.ipid <= 0xFFFF:
        raise InvalidSegmentError(f"ipid out of range: {seg.ipid}")
    unknown = set(seg.flags) - set(FLAG_BITS)
    if unknown:
        raise InvalidSegmentError(f"unknown flags: {sorted(unknown)}")
    if crafted and not seg.flags:
        raise InvalidSegmentError("crafted probes need at least one flag")
    return seg


# ---------------------------------------------------------------------------
# Serialization.  The JSON record round-trips every field (this is the packet
# log format); the wire codec emits minimal IPv4+TCP headers for live use.
# ---------------------------------------------------------------------------

def segment_to_json(seg: TcpSegment) -> str:
    rec = {
        "src_addr": seg.src_addr,
        "src_port": seg.src_port,
        "dst_addr": seg.dst_addr,
        "dst_port": seg.dst_port,
        "seq": seg.seq,
        "ack": seg.ack,
        "flags": sorted(seg.flags),
        "ttl": seg.ttl,
        "ipid": seg.ipid,
        "timestamp": seg.timestamp,
    }
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def segment_from_json(line: str) -> TcpSegment:
    rec = json.loads(line)
    return TcpSegment(
        src_addr=rec["src_addr"],
        dst_addr=rec["dst_addr"],
        src_port=rec["src_port"],
        dst_port=rec["dst_port"],
        seq=rec["seq"],
        ack=rec["ack"],
        flags=frozenset(rec["flags"]),
        ttl=rec["ttl"],
        ipid=rec["ipid"],
        timestamp=rec["timestamp"],
    )


def _inet_checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def segment_to_wire(seg: TcpSegment) -> bytes:
    """Minimal 20-byte IPv4 header + 20-byte TCP header, no options/payload."""
    flag_bits = 0
    for name in seg.flags:
        flag_bits |= FLAG_BITS[name]
    ip_header = struct.pack(
        "!BBHHHBBH4s4s",
        0x45, 0, 40, seg.ipid, 0, seg.ttl, socket.IPPROTO_TCP, 0,
        socket.inet_aton(seg.src_addr), socket.inet_aton(seg.dst_addr),
    )
    ip_header = ip_header[:10] + struct.pack("!H", _inet_checksum(ip_header)) + ip_header[12:]
    tcp_header = struct.pack(
        "!HHIIBBHHH",
        seg.src_port, seg.dst_port, seg.seq, seg.ack,
        5 << 4, flag_bits, 65535, 0, 0,
    )
    pseudo = struct.pack(
        "!4s4sBBH",
        socket.inet_aton(seg.src_addr), socket.inet_aton(seg.dst_addr),
        0, socket.IPPROTO_TCP, len(tcp_header),
    )
    csum = _inet_checksum(pseudo + tcp_header)
    tcp_header = tcp_header[:16] + struct.pack("!H", csum) + tcp_header[18:]
    return ip_header + tcp_header


def segment_from_wire(data: bytes, timestamp: int = 0) -> TcpSegment:
    if len(data) < 40:
        raise InvalidSegmentError("short packet")
    ihl = (data[0] & 0x0F) * 4
    ipid, = struct.unpack("!H", data[4:6])
    ttl = data[8]
    src = socket.inet_ntoa(data[12:16])
    dst = socket.inet_ntoa(data[16:20])
    sport, dport, seq, ack = struct.unpack("!HHII", data[ihl:ihl + 12])
    flag_bits = data[ihl + 13]
    flags = frozenset(n for n, b in FLAG_BITS.items() if flag_bits & b)
    return TcpSegment(src, dst, sport, dport, seq, ack, flags, ttl, ipid, timestamp)


# ---------------------------------------------------------------------------
# Deterministic ISN generation.  A cooperating vantage point holding the same
# seed reconstructs any probe's sequence number from its index, which is how
# the RST-burst sender derives the sequence numbers its RSTs must carry.
# ---------------------------------------------------------------------------

def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


def derive_seed(seed: int, *labels) -> int:
    """Stable 64-bit sub-seed from a root seed and a label path."""
    x = seed & 0xFFFFFFFFFFFFFFFF
    for label in labels:
        if isinstance(label, str):
            for ch in label:
                x = _splitmix64(x ^ ord(ch))
        else:
            x = _splitmix64(x ^ (int(label) & 0xFFFFFFFFFFFFFFFF))
    return x


class IsnGenerator:
    """Counter-mode sequence numbers: isn(i) is a pure function of (seed, i)."""

    def __init__(self, seed: int):
        self.seed = seed
        self._index = 0

    def at(self, index: int) -> int:
        return _splitmix64(derive_seed(self.seed, "isn", index)) & 0xFFFFFFFF

    def next(self) -> int:
        value = self.at(self._index)
        self._index += 1
        return value

    @property
    def index(self) -> int:
        return self._index


class Clock:
    """Monotonic time source; the sim backend advances virtual time."""

    def now_ns(self) -> int:
        raise NotImplementedError

    def sleep_ns(self, duration_ns: int) -> None:
        raise NotImplementedError

    def sleep_until(self, t_ns: int) -> None:
        delta = t_ns - self.now_ns()
        if delta > 0:
            self.sleep_ns(delta)


class FlowRateLimiter:
    """Paces sends to at most `rate` segments per second per flow."""

    def __init__(self, rate: float = 10.0):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self._interval_ns = int(NS_PER_SEC / rate)
        self._next_free: dict[FlowKey, int] = {}

    def reserve(self, flow: FlowKey, now_ns: int, wait: bool = True) -> int:
        """Return the send slot for this flow; raise if wait=False and throttled."""
        slot = max(now_ns, self._next_free.get(flow, 0))
        if not wait and slot > now_ns:
            raise RateLimitError(f"flow {flow} throttled to {self.rate}/s")
        self._next_free[flow] = slot + self._interval_ns
        return slot


class PacketLog:
    """Optional line-delimited JSON log, one record per segment."""

    def __init__(self, path):
        self._fh = open(path, "a", encoding="utf-8")

    def write(self, seg: TcpSegment, direction: str) -> None:
        rec = json.loads(segment_to_json(seg))
        rec["dir"] = direction
        self._fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


class Transport:
    """Common backend behavior: crafting, rate pacing, logging, demux."""

    #: set by subclasses
    supports_spoofing = False

    def __init__(self, local_addr: str, isn_seed: int = 0,
                 rate_limit: float = 10.0, packet_log: Optional[PacketLog] = None):
        self.local_addr = _check_addr(local_addr)
        self.isn = IsnGenerator(isn_seed)
        self._limiter = FlowRateLimiter(rate_limit)
        self._log = packet_log
        self._open = True
        self._last_receipt = 0
        self._pending: list[tuple[int, TcpSegment]] = []
        self._io_lock = threading.RLock()
        self._ipid = derive_seed(isn_seed, "ipid", local_addr) & 0xFFFF

    # -- subclass hooks ----------------------------------------------------

    @property
    def clock(self) -> Clock:
        raise NotImplementedError

    def _dispatch(self, seg: TcpSegment, at_ns: int) -> None:
        raise NotImplementedError

    def _collect(self, until_ns: int) -> list[tuple[int, TcpSegment]]:
        """Advance to until_ns and return (arrival, segment) pairs since last call."""
        raise NotImplementedError

    # -- public API ---------------------------------------------------------

    def craft_segment(self, spec: SegmentSpec) -> TcpSegment:
        src = spec.src_addr or self.local_addr
        if src != self.local_addr and not self.supports_spoofing:
            raise SpoofingUnsupportedError(
                f"backend cannot spoof source {src} (local {self.local_addr})")
        seq = spec.seq if spec.seq is not None else self.isn.next()
        if spec.ipid is None:
            self._ipid = (self._ipid + 1) & 0xFFFF
            ipid = self._ipid
        else:
            ipid = spec.ipid
        seg = TcpSegment(
            src_addr=src,
            dst_addr=spec.dst_addr,
            src_port=spec.src_port,
            dst_port=spec.dst_port,
            seq=seq,
            ack=spec.ack,
            flags=frozenset(spec.flags),
            ttl=spec.ttl,
            ipid=ipid,
            timestamp=self.clock.now_ns(),
        )
        return validate_segment(seg)

    def send(self, seg: TcpSegment, wait: bool = True) -> SendReceipt:
        if not self._open:
            raise TransportClosedError("send after close")
        with self._io_lock:
            slot = self._limiter.reserve(seg.flow, self.clock.now_ns(), wait=wait)
            seg = replace(seg, timestamp=slot)
            self._dispatch(seg, slot)
            if self._log:
                self._log.write(seg, "out")
            self._last_receipt = max(self._last_receipt, slot)
        return SendReceipt(timestamp=slot)

    def capture(self, flows: Iterable[FlowKey], window_ns: int) -> list[TcpSegment]:
        """Advance by window_ns; return matching arrivals in order.

        Non-matching segments stay queued for other workers' filters.
        A window of 0 inspects what has already arrived without advancing.
        """
        if not self._open:
            raise TransportClosedError("capture after close")
        filters = list(flows)
        if not filters:
            raise ValueError("capture filter must be non-empty")
        end = self.clock.now_ns() + window_ns
        with self._io_lock:
            self._pending.extend(self._collect(end))
            out, kept = [], []
            for arrival, seg in self._pending:
                if any(f.matches(seg.flow) for f in filters):
                    out.append(replace(seg, timestamp=arrival))
                else:
                    kept.append((arrival, seg))
            self._pending = kept
            if self._log:
                for seg in out:
                    self._log.write(seg, "in")
        return out

    def close(self) -> None:
        self._open = False
        if self._log:
            self._log.close()
