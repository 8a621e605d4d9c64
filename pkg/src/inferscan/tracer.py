"""Dual-source-port TCP traceroutes with entry-network attribution.

Each destination gets two SYN/ACK traceroutes in the same hour slot: one
from the filtered source port and one from an unfiltered control port.
Probes for all TTLs are fired without waiting on per-hop replies.  Entry
attribution (which backbone a route enters the measured region through)
comes exclusively from a longest-prefix-match table.
"""

from __future__ import annotations

import csv
import ipaddress
from dataclasses import dataclass, field
from typing import Optional

from .transport import NS_PER_SEC, FlowKey, SegmentSpec, Transport

STATUS_FINISHED = "Finished"
STATUS_STALLED = "Stalled"

LABEL_EDU = "EDU"
LABEL_COM = "COM"
LABEL_OTHER = "Other"

TOR_PORT = 9001
RAND_PORT = 9002

# Backbone prefixes of the measured region's entry networks.
DEFAULT_PREFIX_ROWS = (
    ("210.250.0.0/16", LABEL_EDU, "CN"),   # education/research backbone
    ("101.4.112.0/24", LABEL_EDU, "CN"),
    ("159.226.0.0/16", LABEL_EDU, "CN"),   # science network
    ("219.158.0.0/16", LABEL_COM, "CN"),   # commercial backbones
    ("202.97.0.0/16", LABEL_COM, "CN"),
    ("211.136.1.0/24", LABEL_COM, "CN"),
    ("221.176.23.0/24", LABEL_COM, "CN"),
    ("50.43.0.0/16", LABEL_COM, "CN"),
)


@dataclass(frozen=True)
class PrefixEntry:
    network: ipaddress.IPv4Network
    label: str
    region: str


class PrefixTable:
    """Longest-prefix-match lookup; the sole source of network attribution."""

    def __init__(self, rows=DEFAULT_PREFIX_ROWS):
        self.entries = [PrefixEntry(ipaddress.ip_network(cidr), label, region)
                        for cidr, label, region in rows]
        # Longest prefix first makes the linear scan unambiguous.
        self.entries.sort(key=lambda e: e.network.prefixlen, reverse=True)

    def lookup(self, addr: str) -> Optional[PrefixEntry]:
        ip = ipaddress.ip_address(addr)
        for entry in self.entries:
            if ip in entry.network:
                return entry
        return None

    @classmethod
    def from_csv(cls, path) -> "PrefixTable":
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.reader(fh):
                if not row or row[0].startswith("#") or row[0] == "cidr":
                    continue
                rows.append((row[0].strip(), row[1].strip(), row[2].strip()))
        return cls(rows)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["cidr", "label", "region"])
            for e in self.entries:
                writer.writerow([str(e.network), e.label, e.region])


@dataclass(frozen=True)
class HopRecord:
    ttl: int
    responder: Optional[str]  # None = timeout
    rtt_ns: Optional[int]


@dataclass
class TracerouteRun:
    dest: str
    src_port: int
    flags: tuple
    hops: list
    status: str
    hour: int
    entry_label: str = LABEL_OTHER

    def __post_init__(self):
        ttls = [h.ttl for h in self.hops]
        if ttls != sorted(set(ttls)):
            raise ValueError("hops must cover strictly increasing TTLs")

    @property
    def finished(self) -> bool:
        return self.status == STATUS_FINISHED

    def responding_hops(self) -> list:
        return [h for h in self.hops if h.responder is not None]

    def to_dict(self) -> dict:
        return {
            "dest": self.dest,
            "src_port": self.src_port,
            "flags": list(self.flags),
            "hops": [[h.ttl, h.responder, h.rtt_ns] for h in self.hops],
            "status": self.status,
            "hour": self.hour,
            "entry_label": self.entry_label,
        }

    @classmethod
    def from_dict(cls, rec: dict) -> "TracerouteRun":
        return cls(dest=rec["dest"], src_port=rec["src_port"],
                   flags=tuple(rec["flags"]),
                   hops=[HopRecord(t, r, d) for t, r, d in rec["hops"]],
                   status=rec["status"], hour=rec["hour"],
                   entry_label=rec.get("entry_label", LABEL_OTHER))


@dataclass
class TraceConfig:
    max_ttl: int = 30
    response_window_s: float = 3.0
    dst_port: int = 80
    tor_port: int = TOR_PORT
    rand_port: int = RAND_PORT
    region: str = "CN"
    # Optional per-region RTT sanity bound (ns); hops slower than the bound
    # are treated as out-of-region mislabels.
    rtt_bounds: dict = field(default_factory=dict)


def run_traceroute(transport: Transport, dest: str, src_port: int,
                   cfg: Optional[TraceConfig] = None, hour: int = 0
                   ) -> TracerouteRun:
    """One TCP traceroute: SYN/ACK probes at TTL 1..max, fired back to back.

    TTL-expiry notifications and the destination's response both quote the
    probe's sequence number in their ack field, which maps responses to
    TTLs.  Finished means the destination itself responded.
    """
    cfg = cfg or TraceConfig()
    seq_to_ttl: dict[int, int] = {}
    first_send = transport.clock.now_ns()
    send_times: dict[int, int] = {}
    for ttl in range(1, cfg.max_ttl + 1):
        probe = transport.craft_segment(SegmentSpec(
            dst_addr=dest, dst_port=cfg.dst_port, flags=("SYN", "ACK"),
            src_port=src_port, ttl=ttl))
        receipt = transport.send(probe)
        seq_to_ttl[probe.seq] = ttl
        send_times[ttl] = receipt.timestamp
    window = (transport.clock.now_ns() - first_send
              + int(cfg.response_window_s * NS_PER_SEC))
    responses = transport.capture(
        [FlowKey(None, None, transport.local_addr, src_port)], window)

    responders: dict[int, tuple] = {}
    finished_at: Optional[int] = None
    for seg in responses:
        ttl = seq_to_ttl.get(seg.ack)
        if ttl is None or ttl in responders:
            continue
        rtt = seg.timestamp - send_times[ttl]
        responders[ttl] = (seg.src_addr, rtt)
        if seg.src_addr == dest and (finished_at is None or ttl < finished_at):
            finished_at = ttl

    last_ttl = finished_at if finished_at is not None else cfg.max_ttl
    hops = []
    for ttl in range(1, last_ttl + 1):
        addr, rtt = responders.get(ttl, (None, None))
        hops.append(HopRecord(ttl=ttl, responder=addr, rtt_ns=rtt))
    status = STATUS_FINISHED if finished_at is not None else STATUS_STALLED
    return TracerouteRun(dest=dest, src_port=src_port, flags=("SYN", "ACK"),
                         hops=hops, status=status, hour=hour)


def paired_run(transport: Transport, dest: str, hour: int,
               cfg: Optional[TraceConfig] = None) -> tuple:
    """Back-to-back (filtered-port, control-port) runs in one hour slot."""
    cfg = cfg or TraceConfig()
    tor = run_traceroute(transport, dest, cfg.tor_port, cfg, hour=hour)
    rand = run_traceroute(transport, dest, cfg.rand_port, cfg, hour=hour)
    return tor, rand


def _hop_entry(hop: HopRecord, table: PrefixTable, cfg: TraceConfig
               ) -> Optional[PrefixEntry]:
    """Region-tagged table entry for a hop, or None when out of region."""
    if hop.responder is None:
        return None
    entry = table.lookup(hop.responder)
    if entry is None or entry.region != cfg.region:
        return None
    bound = cfg.rtt_bounds.get(entry.region)
    if bound is not None and hop.rtt_ns is not None and hop.rtt_ns > bound:
        return None
    return entry


def classify_entry(run: TracerouteRun, table: PrefixTable,
                   cfg: Optional[TraceConfig] = None) -> str:
    """Label of the first in-region hop (the route's entry network)."""
    cfg = cfg or TraceConfig()
    if not run.responding_hops():
        raise ValueError("run has no responding hops")
    for hop in run.hops:
        entry = _hop_entry(hop, table, cfg)
        if entry is not None:
            return entry.label
    return LABEL_OTHER


def hops_into_region(run: TracerouteRun, table: PrefixTable,
                     cfg: Optional[TraceConfig] = None) -> int:
    """How many in-region hops a stalled run traversed before stopping."""
    cfg = cfg or TraceConfig()
    if run.status != STATUS_STALLED:
        raise ValueError("hop depth is defined for stalled runs only")
    count = sum(1 for hop in run.hops if _hop_entry(hop, table, cfg) is not None)
    if count < 1:
        raise ValueError("run never entered the region")
    return count


def label_run(run: TracerouteRun, table: PrefixTable,
              cfg: Optional[TraceConfig] = None) -> TracerouteRun:
    """Attach the entry-network label (Other when attribution fails)."""
    try:
        run.entry_label = classify_entry(run, table, cfg)
    except ValueError:
        run.entry_label = LABEL_OTHER
    return run


def run_trace_campaign(transport: Transport, dests: list, table: PrefixTable,
                       cfg: Optional[TraceConfig] = None, hours: int = 24,
                       days: int = 1, on_pair=None) -> int:
    """Hourly paired runs to every destination; returns the pair count."""
    cfg = cfg or TraceConfig()
    pairs = 0
    for day in range(days):
        for hour in range(hours):
            slot_start = ((day * 24 + hour) * 3600) * NS_PER_SEC
            transport.clock.sleep_until(slot_start)
            for dest in dests:
                tor, rand = paired_run(transport, dest, hour, cfg)
                label_run(tor, table, cfg)
                label_run(rand, table, cfg)
                pairs += 1
                if on_pair is not None:
                    on_pair(day, hour, tor, rand)
    return pairs
