"""Hybrid idle scan orchestration.

Qualifies clients for a usable host-wide IPID counter, runs two-phase
probe schedules against (client, server) pairs, enforces liveliness
checks around every round, and schedules bipartite campaigns with
per-address mutual exclusion.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Iterable, Optional

from . import classify
from .classify import PHASE_BASE, PHASE_PERTURB, diff_series
from .endpoints import EndpointSpec, passes_stability_rule
from .transport import (
    NS_PER_SEC,
    FlowKey,
    SegmentSpec,
    Transport,
    TransportError,
    derive_seed,
)

QUALIFIED = "qualified"
DISQUALIFIED = "disqualified"

REASON_RANDOM = "random-ipid"
REASON_PER_FLOW = "per-flow-ipid"
REASON_OFFLINE = "offline"
REASON_NOISY = "too-noisy"

DEFAULT_CLIENT_PROBE_PORT = 33434


class RoundVoided(Exception):
    """A scan round whose basic assumptions broke; it must not be stored."""


@dataclass
class ScanRoundConfig:
    scan_duration_s: float = 120.0
    rst_flush_duration_s: float = 30.0
    check_duration_s: float = 5.0
    hourly_rounds: int = 22
    probe_rate: float = 1.0   # IPID probes per second
    spoof_rate: float = 2.0   # spoofed SYNs per second during the perturb phase
    settle_s: float = classify.DEFAULT_SETTLE_S
    noise_threshold: float = 2.0  # median per-interval delta allowed when quiet
    liveliness_rate: float = 5.0  # probes per second during checks
    probe_src_port: int = 39000
    spoof_src_port_base: int = 42000

    def __post_init__(self):
        for name in ("scan_duration_s", "rst_flush_duration_s", "check_duration_s"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.probe_rate <= 0 or self.spoof_rate <= 0:
            raise ValueError("probe and spoof rates must be positive")

    @property
    def base_duration_s(self) -> float:
        return self.scan_duration_s / 2.0

    @property
    def perturb_duration_s(self) -> float:
        return self.scan_duration_s / 2.0


@dataclass(frozen=True)
class IpidSample:
    timestamp: int  # ns
    ipid: int
    phase: str  # PHASE_BASE | PHASE_PERTURB


@dataclass
class IpidTimeSeries:
    samples: list
    spoof_rate: float
    probe_rate: float
    client: EndpointSpec
    server: EndpointSpec

    def __post_init__(self):
        if self.spoof_rate <= 0 or self.probe_rate <= 0:
            raise ValueError("rates must be positive")
        last = -1
        seen_perturb = False
        for s in self.samples:
            if s.timestamp <= last:
                raise ValueError("sample timestamps must be strictly increasing")
            last = s.timestamp
            if s.phase == PHASE_PERTURB:
                seen_perturb = True
            elif seen_perturb:
                raise ValueError("base samples must precede perturb samples")

    def to_dict(self) -> dict:
        return {
            "samples": [[s.timestamp, s.ipid, s.phase] for s in self.samples],
            "spoof_rate": self.spoof_rate,
            "probe_rate": self.probe_rate,
            "client": self.client.to_dict(),
            "server": self.server.to_dict(),
        }

    @classmethod
    def from_dict(cls, rec: dict) -> "IpidTimeSeries":
        return cls(
            samples=[IpidSample(t, i, ph) for t, i, ph in rec["samples"]],
            spoof_rate=rec["spoof_rate"],
            probe_rate=rec["probe_rate"],
            client=EndpointSpec.from_dict(rec["client"]),
            server=EndpointSpec.from_dict(rec["server"]),
        )


@dataclass(frozen=True)
class QualificationResult:
    verdict: str
    reason: Optional[str] = None
    responses: int = 0
    probes: int = 0

    @property
    def qualified(self) -> bool:
        return self.verdict == QUALIFIED


@dataclass(frozen=True)
class LivelinessResult:
    passed: bool
    sent: int
    responses: int
    ipids: tuple = ()


def _probe_once(transport: Transport, addr: str, dst_port: int, src_port: int,
                window_ns: int) -> list:
    """One SYN/ACK probe to a client; returns the RSTs seen in the window."""
    probe = transport.craft_segment(SegmentSpec(
        dst_addr=addr, dst_port=dst_port, flags=("SYN", "ACK"),
        src_port=src_port))
    transport.send(probe)
    return transport.capture(
        [FlowKey(addr, dst_port, transport.local_addr, src_port)], window_ns)


def qualify_client(transport: Transport, addr: str, window_s: float = 30.0,
                   cfg: Optional[ScanRoundConfig] = None) -> QualificationResult:
    """Decide whether a client's IPID behaves as a single global counter.

    Probes alternate between two source ports.  A per-connection counter
    shows up as two clean interleaved sequences that disagree with each
    other; a randomizing stack is dirty on every port; a busy host is a
    counter that moves too fast to carry a signal.
    """
    cfg = cfg or ScanRoundConfig()
    interval_ns = int(NS_PER_SEC / cfg.probe_rate)
    n_probes = max(int(window_s * cfg.probe_rate), 8)
    ports = (cfg.probe_src_port, cfg.probe_src_port + 1)
    observed = []  # (port, ipid)
    for i in range(n_probes):
        port = ports[i % 2]
        rsts = _probe_once(transport, addr, DEFAULT_CLIENT_PROBE_PORT, port,
                           interval_ns)
        for seg in rsts:
            observed.append((port, seg.ipid))
    result_base = dict(responses=len(observed), probes=n_probes)
    if len(observed) < max(2, n_probes // 2):
        return QualificationResult(DISQUALIFIED, REASON_OFFLINE, **result_base)

    merged = diff_series([ipid for _, ipid in observed])
    merged_dirty = len(merged.artifacts) > 0.1 * (len(observed) - 1)
    if not merged_dirty:
        deltas = sorted(merged.deltas)
        median = deltas[len(deltas) // 2]
        if median <= cfg.noise_threshold:
            return QualificationResult(QUALIFIED, **result_base)
        return QualificationResult(DISQUALIFIED, REASON_NOISY, **result_base)

    per_port_clean = True
    for port in ports:
        seq = [ipid for p, ipid in observed if p == port]
        if len(seq) < 2:
            per_port_clean = False
            break
        d = diff_series(seq)
        if d.artifacts or (d.deltas and sorted(d.deltas)[len(d.deltas) // 2] > 4):
            per_port_clean = False
            break
    reason = REASON_PER_FLOW if per_port_clean else REASON_RANDOM
    return QualificationResult(DISQUALIFIED, reason, **result_base)


def client_liveliness(transport: Transport, addr: str,
                      cfg: Optional[ScanRoundConfig] = None,
                      src_port: Optional[int] = None) -> LivelinessResult:
    """SYN/ACK the client for the check window; pass needs RSTs back for
    more than half of the probes."""
    cfg = cfg or ScanRoundConfig()
    sport = src_port if src_port is not None else cfg.probe_src_port + 2
    n = int(cfg.check_duration_s * cfg.liveliness_rate)
    gap_ns = int(NS_PER_SEC / cfg.liveliness_rate)
    flow = FlowKey(addr, DEFAULT_CLIENT_PROBE_PORT, transport.local_addr, sport)
    collected = []
    for _ in range(n):
        probe = transport.craft_segment(SegmentSpec(
            dst_addr=addr, dst_port=DEFAULT_CLIENT_PROBE_PORT,
            flags=("SYN", "ACK"), src_port=sport))
        transport.send(probe)
        collected.extend(transport.capture([flow], gap_ns))
    collected.extend(transport.capture([flow], NS_PER_SEC))
    rsts = [seg for seg in collected if seg.has("RST")]
    return LivelinessResult(passed=len(rsts) > n // 2, sent=n,
                            responses=len(rsts),
                            ipids=tuple(seg.ipid for seg in rsts))


def server_liveliness(transport: Transport, addr: str, port: int,
                      cfg: Optional[ScanRoundConfig] = None,
                      src_port_base: Optional[int] = None) -> LivelinessResult:
    """SYN the server from the silent measurement address; pass needs some
    probe's entry to retransmit its SYN/ACK three or more times."""
    cfg = cfg or ScanRoundConfig()
    base = src_port_base if src_port_base is not None else cfg.probe_src_port + 100
    n = int(cfg.check_duration_s * cfg.liveliness_rate)
    gap_ns = int(NS_PER_SEC / cfg.liveliness_rate)
    flows = [FlowKey(addr, port, transport.local_addr, base + i) for i in range(n)]
    for i in range(n):
        syn = transport.craft_segment(SegmentSpec(
            dst_addr=addr, dst_port=port, flags=("SYN",), src_port=base + i))
        transport.send(syn)
        transport.clock.sleep_ns(gap_ns)
    # Three retransmissions arrive within 1+2+4 s of the original SYN/ACK.
    collected = transport.capture(flows, 12 * NS_PER_SEC)
    counts: dict[int, int] = {}
    for seg in collected:
        if seg.has("SYN", "ACK"):
            counts[seg.dst_port] = counts.get(seg.dst_port, 0) + 1
    best = max(counts.values(), default=0)
    return LivelinessResult(passed=(best - 1) >= 3, sent=n,
                            responses=sum(counts.values()))


def run_idle_scan(transport: Transport, client: EndpointSpec,
                  server: EndpointSpec, cfg: Optional[ScanRoundConfig] = None
                  ) -> IpidTimeSeries:
    """Two-phase hybrid idle scan of one (client, server) pair.

    Base phase: sample the client's IPID via SYN/ACK probes while sending
    nothing else.  Perturb phase: keep sampling while sending SYNs to the
    server spoofed with the client's source address.  Afterwards, RSTs
    matching every spoofed handshake are spread over the flush window to
    clear the server's backlog.
    """
    cfg = cfg or ScanRoundConfig()
    interval_ns = int(NS_PER_SEC / cfg.probe_rate)
    n_base = int(cfg.base_duration_s * cfg.probe_rate)
    n_perturb = int(cfg.perturb_duration_s * cfg.probe_rate)
    spoof_per_interval = cfg.spoof_rate / cfg.probe_rate
    probe_flow = FlowKey(client.addr, DEFAULT_CLIENT_PROBE_PORT,
                         transport.local_addr, cfg.probe_src_port)

    samples: list[IpidSample] = []
    spoofed: list[tuple[int, int]] = []  # (src_port, isn)
    spoof_budget = 0.0

    def sample_interval(phase: str) -> None:
        probe = transport.craft_segment(SegmentSpec(
            dst_addr=client.addr, dst_port=DEFAULT_CLIENT_PROBE_PORT,
            flags=("SYN", "ACK"), src_port=cfg.probe_src_port))
        transport.send(probe)
        for seg in transport.capture([probe_flow], interval_ns):
            if seg.has("RST"):
                samples.append(IpidSample(seg.timestamp, seg.ipid, phase))

    for _ in range(n_base):
        sample_interval(PHASE_BASE)

    for _ in range(n_perturb):
        spoof_budget += spoof_per_interval
        while spoof_budget >= 1.0:
            port = cfg.spoof_src_port_base + len(spoofed)
            syn = transport.craft_segment(SegmentSpec(
                dst_addr=server.addr, dst_port=server.port, flags=("SYN",),
                src_addr=client.addr, src_port=port))
            transport.send(syn)
            spoofed.append((port, syn.seq))
            spoof_budget -= 1.0
        sample_interval(PHASE_PERTURB)

    # Flush: terminate every half-open entry the spoofed SYNs created.
    if spoofed:
        flush_gap = int(cfg.rst_flush_duration_s * NS_PER_SEC / len(spoofed))
        for port, isn in spoofed:
            rst = transport.craft_segment(SegmentSpec(
                dst_addr=server.addr, dst_port=server.port, flags=("RST",),
                src_addr=client.addr, src_port=port,
                seq=(isn + 1) & 0xFFFFFFFF))
            transport.send(rst)
            transport.clock.sleep_ns(flush_gap)

    expected = n_base + n_perturb
    if len(samples) < expected // 2:
        raise RoundVoided(
            f"client went quiet mid-scan: {len(samples)}/{expected} samples")
    return IpidTimeSeries(samples=samples, spoof_rate=cfg.spoof_rate,
                          probe_rate=cfg.probe_rate, client=client,
                          server=server)


# ---------------------------------------------------------------------------
# Round + campaign orchestration
# ---------------------------------------------------------------------------

@dataclass
class ScanRoundResult:
    client: EndpointSpec
    server: EndpointSpec
    series: IpidTimeSeries
    label: classify.CaseLabel
    checks: dict
    started_at: int
    finished_at: int
    hour: int


def _recheck_client(transport, client, cfg) -> bool:
    check = client_liveliness(transport, client.addr, cfg)
    if not check.passed:
        return False
    if len(check.ipids) >= 2:
        d = diff_series(list(check.ipids))
        if d.artifacts:
            return False
    return True


def run_scan_round(transport: Transport, client: EndpointSpec,
                   server: EndpointSpec, cfg: Optional[ScanRoundConfig] = None,
                   hour: int = 0) -> ScanRoundResult:
    """One full scan round: pre-checks, scan, flush, post-checks, label.

    Raises RoundVoided when any liveliness assumption fails; voided rounds
    must not reach the record store.
    """
    cfg = cfg or ScanRoundConfig()
    started = transport.clock.now_ns()
    if not client_liveliness(transport, client.addr, cfg).passed:
        raise RoundVoided(f"client {client.addr} failed pre-check")
    if not server_liveliness(transport, server.addr, server.port, cfg).passed:
        raise RoundVoided(f"server {server.addr}:{server.port} failed pre-check")
    try:
        series = run_idle_scan(transport, client, server, cfg)
    except TransportError as exc:
        raise RoundVoided(f"transport failure mid-scan: {exc}") from exc
    post_client = _recheck_client(transport, client, cfg)
    post_server = server_liveliness(transport, server.addr, server.port, cfg).passed
    if not (post_client and post_server):
        raise RoundVoided("post-scan liveliness check failed")
    label = classify.classify_series(series, settle_s=cfg.settle_s)
    checks = {
        "client_liveliness": True,
        "server_liveliness": True,
        "stable_flag": passes_stability_rule(server),
        "qualification": True,
    }
    return ScanRoundResult(client=client, server=server, series=series,
                           label=label, checks=checks, started_at=started,
                           finished_at=transport.clock.now_ns(), hour=hour)


@dataclass(frozen=True)
class Assignment:
    slot: int   # campaign hour slot, 0-based
    hour: int   # hour of day
    client: EndpointSpec
    server: EndpointSpec


def schedule_bipartite(clients: list, servers: list,
                       cfg: Optional[ScanRoundConfig] = None,
                       seed: int = 0, max_slots: Optional[int] = None
                       ) -> Iterable[Assignment]:
    """Assignment stream covering every (client, server) pair.

    Each hour slot carries a matching: no two assignments in the same slot
    share an address, so the whole slot may run concurrently.  Order inside
    a slot is shuffled per hour; the stream is a pure function of the seed.
    """
    if not clients or not servers:
        raise ValueError("need at least one client and one server")
    cfg = cfg or ScanRoundConfig()
    rng = random.Random(derive_seed(seed, "bipartite"))
    clients = list(clients)
    servers = list(servers)
    rng.shuffle(clients)
    rng.shuffle(servers)
    swap = len(clients) > len(servers)
    small, large = (servers, clients) if swap else (clients, servers)
    slots_needed = len(large)
    if max_slots is not None:
        slots_needed = min(slots_needed, max_slots)
    for slot in range(slots_needed):
        pairs = []
        for i, side_a in enumerate(small):
            side_b = large[(i + slot) % len(large)]
            pairs.append((side_b, side_a) if swap else (side_a, side_b))
        hour_rng = random.Random(derive_seed(seed, "hour-order", slot))
        hour_rng.shuffle(pairs)
        hour = slot % cfg.hourly_rounds
        for client, server in pairs:
            yield Assignment(slot=slot, hour=hour % 24, client=client,
                             server=server)


@dataclass
class CampaignSummary:
    completed: int = 0
    voided: int = 0
    void_reasons: list = field(default_factory=list)


def run_idle_campaign(transport: Transport, clients: list, servers: list,
                      cfg: Optional[ScanRoundConfig] = None, seed: int = 0,
                      slots: int = 1, on_result=None) -> CampaignSummary:
    """Drive the bipartite schedule over `slots` hourly rounds.

    Assignments inside a slot are address-disjoint by construction; on the
    simulator backend they run back-to-back in deterministic order.
    ``on_result`` receives (Assignment, ScanRoundResult) for every
    completed round; voided rounds are only counted.
    """
    cfg = cfg or ScanRoundConfig()
    summary = CampaignSummary()
    clock = transport.clock
    for a in schedule_bipartite(clients, servers, cfg, seed, max_slots=slots):
        day, hour = divmod(a.slot, cfg.hourly_rounds)
        slot_start = (day * 24 + hour) * 3600 * NS_PER_SEC
        clock.sleep_until(slot_start)
        try:
            result = run_scan_round(transport, a.client, a.server, cfg,
                                    hour=a.hour)
        except RoundVoided as exc:
            summary.voided += 1
            summary.void_reasons.append(str(exc))
            continue
        summary.completed += 1
        if on_result is not None:
            on_result(a, result)
    return summary
