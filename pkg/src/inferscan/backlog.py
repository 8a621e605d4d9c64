"""SYN-backlog side-channel scans.

A server's half-open connection queue prunes pending entries once it runs
more than half full, cutting their SYN/ACK retransmissions.  Counting the
retransmissions of a handful of probe SYNs therefore reveals whether a
separately sent burst of segments reached the server: the SYN scan checks
whether a vantage point's SYNs arrive, the RST scan whether its RSTs do.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .endpoints import EndpointSpec
from .transport import (
    NS_PER_SEC,
    FlowKey,
    IsnGenerator,
    SegmentSpec,
    Transport,
)

KIND_SYN = "SynScan"
KIND_RST = "RstScan"

VERDICT_PASSES = "Passes"
VERDICT_DROPPED = "Dropped"
VERDICT_INVALID = "Invalid"

REASON_NON_DEFAULT = "non-default-stack"
REASON_NO_BACKOFF = "no-backoff"
REASON_OFFLINE = "offline"
REASON_INCONSISTENT = "inconsistent"
REASON_UNDER_FILL = "under-fill"

PRUNE_REASONS = (REASON_NON_DEFAULT, REASON_NO_BACKOFF, REASON_OFFLINE)

MAPPING_MECHANICS = "mechanics"
MAPPING_LITERAL = "literal"


@dataclass
class BacklogScanConfig:
    syn_probe_count: int = 5
    rst_probe_count: int = 10
    fill_count: int = 145
    stagger_ms: float = 500.0
    rst_burst_delay_ms: float = 250.0  # after the fill burst
    observe_s: float = 40.0
    baseline_probes: int = 3
    baseline_observe_s: float = 70.0
    expected_retransmissions: int = 5
    backoff_ratio_bounds: tuple = (1.5, 2.5)
    assumed_capacity: int = 256
    # Safety bound: probes + fill never exceed this many half-open entries,
    # keeping occupancy below ~59% of the default capacity.
    max_half_open: int = 150
    literal_verdicts: bool = False
    probe_port_base: int = 41000
    fill_port_base: int = 43000
    baseline_port_base: int = 40900

    def effective_fill(self, probe_count: int) -> int:
        return max(min(self.fill_count, self.max_half_open - probe_count), 0)


@dataclass(frozen=True)
class BaselineProfile:
    valid: bool
    reason: Optional[str]  # one of PRUNE_REASONS when invalid
    retransmission_count: int
    gaps_s: tuple

    def to_dict(self) -> dict:
        return {"valid": self.valid, "reason": self.reason,
                "retransmission_count": self.retransmission_count,
                "gaps_s": list(self.gaps_s)}

    @classmethod
    def from_dict(cls, rec: dict) -> "BaselineProfile":
        return cls(valid=rec["valid"], reason=rec.get("reason"),
                   retransmission_count=rec["retransmission_count"],
                   gaps_s=tuple(rec.get("gaps_s", ())))


@dataclass
class BacklogScanRecord:
    kind: str
    relay: EndpointSpec
    probe_count: int
    fill_count: int
    observed_retransmissions: list  # one entry per probe; None = unreachable
    baseline: Optional[BaselineProfile]
    verdict: str
    invalid_reason: Optional[str]
    timestamp: int
    verdict_mapping: str = MAPPING_MECHANICS

    def __post_init__(self):
        if self.kind not in (KIND_SYN, KIND_RST):
            raise ValueError(f"bad scan kind: {self.kind}")
        if len(self.observed_retransmissions) != self.probe_count:
            raise ValueError("need exactly one retransmission count per probe")
        if (self.verdict == VERDICT_INVALID) != (self.invalid_reason is not None):
            raise ValueError("invalid verdicts carry a reason, others do not")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "relay": self.relay.to_dict(),
            "probe_count": self.probe_count,
            "fill_count": self.fill_count,
            "observed_retransmissions": list(self.observed_retransmissions),
            "baseline": self.baseline.to_dict() if self.baseline else None,
            "verdict": self.verdict,
            "invalid_reason": self.invalid_reason,
            "timestamp": self.timestamp,
            "verdict_mapping": self.verdict_mapping,
        }

    @classmethod
    def from_dict(cls, rec: dict) -> "BacklogScanRecord":
        return cls(
            kind=rec["kind"],
            relay=EndpointSpec.from_dict(rec["relay"]),
            probe_count=rec["probe_count"],
            fill_count=rec["fill_count"],
            observed_retransmissions=list(rec["observed_retransmissions"]),
            baseline=(BaselineProfile.from_dict(rec["baseline"])
                      if rec.get("baseline") else None),
            verdict=rec["verdict"],
            invalid_reason=rec.get("invalid_reason"),
            timestamp=rec["timestamp"],
            verdict_mapping=rec.get("verdict_mapping", MAPPING_MECHANICS),
        )


def _synack_arrivals(transport: Transport, flows: list, window_ns: int) -> dict:
    """Advance the clock and bucket SYN/ACK arrival times by probe flow."""
    arrivals: dict[int, list] = {}
    for seg in transport.capture(flows, window_ns):
        if seg.has("SYN", "ACK"):
            arrivals.setdefault(seg.dst_port, []).append(seg.timestamp)
    return arrivals


def baseline_probe(transport: Transport, relay: EndpointSpec,
                   cfg: Optional[BacklogScanConfig] = None) -> BaselineProfile:
    """Query the relay's unstressed retransmission profile.

    Valid only for a default stack: exactly the expected retransmission
    count with exponentially backed-off gaps.  Fixed-count embedded stacks,
    non-doubling schedules, and silent relays are all invalid, each under
    its pruning-rule reason.
    """
    cfg = cfg or BacklogScanConfig()
    flows = []
    for i in range(cfg.baseline_probes):
        sport = cfg.baseline_port_base + i
        syn = transport.craft_segment(SegmentSpec(
            dst_addr=relay.addr, dst_port=relay.port, flags=("SYN",),
            src_port=sport))
        transport.send(syn)
        flows.append(FlowKey(relay.addr, relay.port, transport.local_addr, sport))
    arrivals = _synack_arrivals(transport, flows,
                                int(cfg.baseline_observe_s * NS_PER_SEC))
    if not arrivals:
        return BaselineProfile(False, REASON_OFFLINE, -1, ())
    times = max(arrivals.values(), key=len)
    count = len(times) - 1
    gaps = tuple((b - a) / NS_PER_SEC for a, b in zip(times, times[1:]))
    if count != cfg.expected_retransmissions:
        return BaselineProfile(False, REASON_NON_DEFAULT, count, gaps)
    lo, hi = cfg.backoff_ratio_bounds
    for g0, g1 in zip(gaps, gaps[1:]):
        if g0 <= 0 or not lo <= g1 / g0 <= hi:
            return BaselineProfile(False, REASON_NO_BACKOFF, count, gaps)
    return BaselineProfile(True, None, count, gaps)


def _probe_votes(counts: list, expected: int) -> tuple:
    """Split per-probe retransmission counts into full/reduced votes."""
    full = sum(1 for c in counts if c is not None and c >= expected - 1)
    reduced = sum(1 for c in counts if c is not None and 0 <= c < expected - 1)
    return full, reduced


def _run_probe_phase(transport: Transport, relay: EndpointSpec, n: int,
                     cfg: BacklogScanConfig) -> list:
    flows = []
    for i in range(n):
        sport = cfg.probe_port_base + i
        syn = transport.craft_segment(SegmentSpec(
            dst_addr=relay.addr, dst_port=relay.port, flags=("SYN",),
            src_port=sport))
        transport.send(syn)
        flows.append(FlowKey(relay.addr, relay.port, transport.local_addr, sport))
    return flows


def _collect_probe_counts(transport: Transport, flows: list, n: int,
                          cfg: BacklogScanConfig) -> list:
    arrivals = _synack_arrivals(transport, flows, int(cfg.observe_s * NS_PER_SEC))
    counts: list = []
    for i in range(n):
        port = cfg.probe_port_base + i
        times = arrivals.get(port)
        counts.append(None if not times else len(times) - 1)
    return counts


def syn_scan(mm: Transport, vps: Transport, relay: EndpointSpec,
             cfg: Optional[BacklogScanConfig] = None,
             baseline: Optional[BaselineProfile] = None) -> BacklogScanRecord:
    """Does a burst of SYNs from the vantage point reach the relay?

    The measurement machine's probe SYNs keep their full retransmission
    budget only while the backlog stays at most half full; the vantage
    point's fill burst pushes it past half exactly when its SYNs arrive.
    Reduced probe retransmissions therefore mean the SYNs passed.
    """
    cfg = cfg or BacklogScanConfig()
    if baseline is None:
        baseline = baseline_probe(mm, relay, cfg)
        mm.clock.sleep_ns(2 * NS_PER_SEC)
    started = mm.clock.now_ns()
    if not baseline.valid:
        return _invalid(KIND_SYN, relay, cfg.syn_probe_count, 0, baseline,
                        baseline.reason, started, cfg)
    fill = cfg.effective_fill(cfg.syn_probe_count)
    if cfg.syn_probe_count + fill <= cfg.assumed_capacity // 2:
        return _invalid(KIND_SYN, relay, cfg.syn_probe_count, fill, baseline,
                        REASON_UNDER_FILL, started, cfg)
    flows = _run_probe_phase(mm, relay, cfg.syn_probe_count, cfg)
    mm.clock.sleep_ns(int(cfg.stagger_ms * 1e6))
    for i in range(fill):
        syn = vps.craft_segment(SegmentSpec(
            dst_addr=relay.addr, dst_port=relay.port, flags=("SYN",),
            src_port=cfg.fill_port_base + i))
        vps.send(syn)
    counts = _collect_probe_counts(mm, flows, cfg.syn_probe_count, cfg)
    full, reduced = _probe_votes(counts, cfg.expected_retransmissions)
    if full == 0 and reduced == 0:
        verdict, reason = VERDICT_INVALID, REASON_OFFLINE
    elif full == reduced:
        verdict, reason = VERDICT_INVALID, REASON_INCONSISTENT
    else:
        # Reduced retransmissions: the fill burst arrived -> SYNs pass.
        verdict = VERDICT_PASSES if reduced > full else VERDICT_DROPPED
        reason = None
    return BacklogScanRecord(
        kind=KIND_SYN, relay=relay, probe_count=cfg.syn_probe_count,
        fill_count=fill, observed_retransmissions=counts, baseline=baseline,
        verdict=verdict, invalid_reason=reason, timestamp=started,
        verdict_mapping=_mapping(cfg))


def rst_scan(mm: Transport, vps: Transport, relay: EndpointSpec,
             cfg: Optional[BacklogScanConfig] = None,
             baseline: Optional[BaselineProfile] = None,
             shared_isn_seed: Optional[int] = None) -> BacklogScanRecord:
    """Do RSTs from the vantage point reach the relay?

    The fill burst is spoofed with the vantage point's source address from
    the measurement machine's unfiltered link, so it always arrives.  The
    vantage point then sends one RST per spoofed handshake, reconstructing
    the expected sequence numbers from the shared ISN seed.  A cleared
    backlog (at most half full again) restores the probes' full
    retransmission budget, so full retransmissions mean the RSTs passed.

    The mapping from probe retransmissions to verdicts follows the backlog
    mechanics above; set ``cfg.literal_verdicts`` to swap to the
    inverted convention.
    """
    cfg = cfg or BacklogScanConfig()
    if baseline is None:
        baseline = baseline_probe(mm, relay, cfg)
        mm.clock.sleep_ns(2 * NS_PER_SEC)
    started = mm.clock.now_ns()
    if not baseline.valid:
        return _invalid(KIND_RST, relay, cfg.rst_probe_count, 0, baseline,
                        baseline.reason, started, cfg)
    fill = cfg.effective_fill(cfg.rst_probe_count)
    if cfg.rst_probe_count + fill <= cfg.assumed_capacity // 2:
        return _invalid(KIND_RST, relay, cfg.rst_probe_count, fill, baseline,
                        REASON_UNDER_FILL, started, cfg)
    isn_seed = shared_isn_seed if shared_isn_seed is not None else mm.isn.seed
    spoof_isns = IsnGenerator(isn_seed)

    flows = _run_probe_phase(mm, relay, cfg.rst_probe_count, cfg)
    mm.clock.sleep_ns(int(cfg.stagger_ms * 1e6))
    for i in range(fill):
        syn = mm.craft_segment(SegmentSpec(
            dst_addr=relay.addr, dst_port=relay.port, flags=("SYN",),
            src_addr=vps.local_addr, src_port=cfg.fill_port_base + i,
            seq=spoof_isns.at(i)))
        mm.send(syn)
    mm.clock.sleep_ns(int(cfg.rst_burst_delay_ms * 1e6))
    # The vantage point derives each RST's sequence number independently.
    vps_isns = IsnGenerator(isn_seed)
    for i in range(fill):
        rst = vps.craft_segment(SegmentSpec(
            dst_addr=relay.addr, dst_port=relay.port, flags=("RST",),
            src_port=cfg.fill_port_base + i,
            seq=(vps_isns.at(i) + 1) & 0xFFFFFFFF))
        vps.send(rst)
    counts = _collect_probe_counts(mm, flows, cfg.rst_probe_count, cfg)
    full, reduced = _probe_votes(counts, cfg.expected_retransmissions)
    if full == 0 and reduced == 0:
        verdict, reason = VERDICT_INVALID, REASON_OFFLINE
    elif full == reduced:
        verdict, reason = VERDICT_INVALID, REASON_INCONSISTENT
    else:
        cleared = full > reduced
        passes = cleared if not cfg.literal_verdicts else not cleared
        verdict = VERDICT_PASSES if passes else VERDICT_DROPPED
        reason = None
    return BacklogScanRecord(
        kind=KIND_RST, relay=relay, probe_count=cfg.rst_probe_count,
        fill_count=fill, observed_retransmissions=counts, baseline=baseline,
        verdict=verdict, invalid_reason=reason, timestamp=started,
        verdict_mapping=_mapping(cfg))


def _mapping(cfg: BacklogScanConfig) -> str:
    return MAPPING_LITERAL if cfg.literal_verdicts else MAPPING_MECHANICS


def _invalid(kind, relay, probe_count, fill, baseline, reason, started, cfg):
    return BacklogScanRecord(
        kind=kind, relay=relay, probe_count=probe_count, fill_count=fill,
        observed_retransmissions=[None] * probe_count, baseline=baseline,
        verdict=VERDICT_INVALID, invalid_reason=reason, timestamp=started,
        verdict_mapping=_mapping(cfg))


@dataclass
class DiscardEntry:
    index: int
    rule: str


@dataclass
class PruneResult:
    retained: list
    discard_log: list = field(default_factory=list)

    @property
    def retention_ratio(self) -> Optional[float]:
        total = len(self.retained) + len(self.discard_log)
        return len(self.retained) / total if total else None


def prune_backlog_dataset(records: list) -> PruneResult:
    """Apply the three validity rules to a scan dataset.

    Discards scans whose relay did not show the default retransmission
    count, whose gaps lacked exponential backoff, or that hit the relay
    while offline / mid network error.  The discard log names the rule
    that fired for each dropped record.
    """
    result = PruneResult(retained=[])
    for i, rec in enumerate(records):
        rule = None
        if rec.baseline is None or not rec.baseline.valid:
            rule = rec.baseline.reason if rec.baseline else REASON_OFFLINE
        elif rec.invalid_reason == REASON_OFFLINE:
            rule = REASON_OFFLINE
        if rule in PRUNE_REASONS:
            result.discard_log.append(DiscardEntry(index=i, rule=rule))
        else:
            result.retained.append(rec)
    return result
