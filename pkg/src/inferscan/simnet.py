"""Deterministic discrete-event simulator of clients, servers, and firewalled paths.

Serves as the ground-truth oracle for every inference technique in the
toolkit.  All randomness (loss, noise, initial counters) derives from the
scenario seed; virtual time is integer nanoseconds; identical seeds yield
identical event traces.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from heapq import heappush, heappop
from typing import Callable, Optional

from .transport import (
    NS_PER_SEC,
    Clock,
    FlowKey,
    TcpSegment,
    Transport,
    derive_seed,
)

PASS = "pass"
DROP = "drop"

HOUR_NS = 3600 * NS_PER_SEC

DEFAULT_BACKLOG_CAPACITY = 256
DEFAULT_MAX_RETRANSMISSIONS = 5
DEFAULT_BACKOFF_S = (1.0, 2.0, 4.0, 8.0, 16.0)


def effective_retransmissions(occupancy_fraction: float, max_retransmissions: int = 5) -> int:
    """SYN/ACK retransmission budget as a function of backlog occupancy.

    At most half full the default budget applies; past half full the kernel
    prunes pending entries by cutting their retransmission count.  The exact
    reduced values are a model choice; the load-shedding property that
    matters is: <= half gives the full budget, above half gives fewer.
    """
    if not 0.0 <= occupancy_fraction <= 1.0:
        raise ValueError(f"occupancy fraction out of range: {occupancy_fraction}")
    if occupancy_fraction <= 0.5:
        return max_retransmissions
    if occupancy_fraction <= 0.75:
        return min(max_retransmissions, 3)
    return min(max_retransmissions, 2)


@dataclass(frozen=True)
class FilterRule:
    """One firewall rule; first matching rule wins, default action is pass.

    ``addr``/``port`` name the filtered service endpoint.  Direction
    ``server->client`` matches segments sourced from it, ``client->server``
    matches segments destined to it.  ``hours`` is an optional 24-slot
    on/off mask; the rule only applies in hours where the mask is true.
    """

    name: str
    direction: str  # "server->client" | "client->server"
    addr: Optional[str] = None
    port: Optional[int] = None
    action: str = DROP
    placement_hop: int = 1
    hours: Optional[tuple] = None  # 24 booleans
    flags: Optional[frozenset] = None  # exact flag-set match, None = any

    def __post_init__(self):
        if self.direction not in ("server->client", "client->server"):
            raise ValueError(f"bad direction: {self.direction}")
        if self.action not in (PASS, DROP):
            raise ValueError(f"bad action: {self.action}")
        if self.hours is not None and len(self.hours) != 24:
            raise ValueError("hours mask must have 24 entries")
        if self.flags is not None:
            object.__setattr__(self, "flags", frozenset(self.flags))

    def applies(self, seg: TcpSegment, hop: int, hour: int) -> bool:
        if hop != self.placement_hop:
            return False
        if self.hours is not None and not self.hours[hour]:
            return False
        if self.flags is not None and seg.flags != self.flags:
            return False
        if self.direction == "server->client":
            return ((self.addr is None or seg.src_addr == self.addr)
                    and (self.port is None or seg.src_port == self.port))
        return ((self.addr is None or seg.dst_addr == self.addr)
                and (self.port is None or seg.dst_port == self.port))


@dataclass
class FirewallPolicy:
    rules: list = field(default_factory=list)

    def decide(self, seg: TcpSegment, hop: int, hour: int) -> str:
        for rule in self.rules:
            if rule.applies(seg, hop, hour):
                return rule.action
        return PASS


def firewall_decide(seg: TcpSegment, hop: int, policy: FirewallPolicy, hour: int) -> str:
    """Deterministic pass/drop decision for a segment at a given path hop."""
    if hop < 1:
        raise ValueError("hop index is 1-based")
    if not 0 <= hour <= 23:
        raise ValueError("hour out of range")
    return policy.decide(seg, hop, hour)


@dataclass(frozen=True)
class Hop:
    addr: str
    region: str = ""
    delay_ns: Optional[int] = None


@dataclass
class SimPath:
    """Unidirectional route description; reverse direction mirrors the hops.

    ``hops`` are listed from endpoint ``a`` toward ``b``; a rule's
    placement_hop always refers to this listed (physical) index regardless
    of travel direction.  ``loss_rate`` is drawn once per traversal.
    """

    a: str
    b: str
    hops: list = field(default_factory=list)
    one_way_delay_ns: int = 10_000_000
    loss_rate: float = 0.0
    filtered: bool = False

    def leg_delays(self) -> list:
        """Per-leg delays (len(hops)+1 legs) summing to one_way_delay_ns."""
        explicit = [h.delay_ns for h in self.hops]
        n_legs = len(self.hops) + 1
        if any(d is not None for d in explicit):
            hop_total = sum(d or 0 for d in explicit)
            last = max(self.one_way_delay_ns - hop_total, 0)
            return [d or 0 for d in explicit] + [last]
        base, rem = divmod(self.one_way_delay_ns, n_legs)
        return [base] * (n_legs - 1) + [base + rem]


@dataclass
class BacklogEntry:
    flow: FlowKey
    client_isn: int
    server_isn: int
    created_at: int
    retransmissions_done: int = 0
    alive: bool = True


class _Host:
    def __init__(self, sim: "Simulator", addr: str):
        self.sim = sim
        self.addr = addr
        self.sent_count = 0
        self.online = True

    def on_segment(self, seg: TcpSegment, now: int) -> None:
        raise NotImplementedError


class SimClient(_Host):
    """End host probed by idle scans.

    The IPID counter advances by exactly one for every packet the client
    sends, noise included.  With rst_policy on, every unsolicited SYN/ACK
    elicits exactly one RST.
    """

    def __init__(self, sim, addr, ipid_mode="global", ipid_start=None,
                 background_rate=0.0, rst_policy=True):
        super().__init__(sim, addr)
        if ipid_mode not in ("global", "per-flow", "random"):
            raise ValueError(f"bad ipid_mode: {ipid_mode}")
        self.ipid_mode = ipid_mode
        self.background_rate = background_rate
        self.rst_policy = rst_policy
        self._rng = random.Random(derive_seed(sim.seed, "client", addr))
        self.ipid_counter = (ipid_start if ipid_start is not None
                             else self._rng.getrandbits(16))
        self._flow_counters: dict[FlowKey, int] = {}
        if background_rate > 0:
            self._schedule_noise(sim.now)

    def _schedule_noise(self, now: int) -> None:
        gap = int(self._rng.expovariate(self.background_rate) * NS_PER_SEC)
        self.sim.schedule(now + max(gap, 1), self._noise_tick)

    def _noise_tick(self, now: int) -> None:
        # Noise goes to hosts outside the model; only the counter advance
        # and the send count are observable.
        self.sent_count += 1
        self._stamp_ipid(FlowKey(self.addr, 0, "0.0.0.0", 0))
        self.sim.emit(now, "noise", host=self.addr)
        self._schedule_noise(now)

    def _stamp_ipid(self, flow: FlowKey) -> int:
        if self.ipid_mode == "global":
            value = self.ipid_counter
            self.ipid_counter = (self.ipid_counter + 1) & 0xFFFF
            return value
        if self.ipid_mode == "per-flow":
            if flow not in self._flow_counters:
                self._flow_counters[flow] = derive_seed(
                    self.sim.seed, "flow-ipid", self.addr, flow.dst_addr or "",
                    flow.src_port or 0, flow.dst_port or 0) & 0xFFFF
            value = self._flow_counters[flow]
            self._flow_counters[flow] = (value + 1) & 0xFFFF
            return value
        return self._rng.getrandbits(16)

    def on_segment(self, seg: TcpSegment, now: int) -> None:
        if seg.has("SYN") and seg.has("ACK"):
            if self.rst_policy:
                # ack echoes the offending seq so probers can pair responses.
                self._reply(seg, now, seq=seg.ack, ack=seg.seq, flags=("RST",))
        elif seg.has("SYN"):
            # No open ports on clients: closed-port RST.
            self._reply(seg, now, seq=0, ack=(seg.seq + 1) & 0xFFFFFFFF,
                        flags=("RST", "ACK"))

    def _reply(self, seg: TcpSegment, now: int, seq: int, ack: int, flags) -> None:
        flow = FlowKey(self.addr, seg.dst_port, seg.src_addr, seg.src_port)
        self.sent_count += 1
        out = TcpSegment(
            src_addr=self.addr, dst_addr=seg.src_addr,
            src_port=seg.dst_port, dst_port=seg.src_port,
            seq=seq, ack=ack, flags=frozenset(flags), ttl=64,
            ipid=self._stamp_ipid(flow), timestamp=now,
        )
        self.sim._launch(out, origin=self.addr, at=now)


class SimServer(_Host):
    """Listening host with a half-open connection backlog.

    The backlog never exceeds its capacity; a matching RST or a
    handshake-completing ACK removes exactly one entry; the retransmission
    budget is recomputed from current occupancy at every retransmission
    instant (see :func:`effective_retransmissions`).
    """

    def __init__(self, sim, addr, open_ports=(), backlog_capacity=DEFAULT_BACKLOG_CAPACITY,
                 max_retransmissions=DEFAULT_MAX_RETRANSMISSIONS,
                 backoff_s=DEFAULT_BACKOFF_S, down_intervals=()):
        super().__init__(sim, addr)
        self.open_ports = set(open_ports)
        self.backlog_capacity = backlog_capacity
        self.max_retransmissions = max_retransmissions
        self.backoff_ns = tuple(int(s * NS_PER_SEC) for s in backoff_s)
        if len(self.backoff_ns) < max_retransmissions:
            raise ValueError("backoff schedule shorter than max_retransmissions")
        self.backlog: dict[FlowKey, BacklogEntry] = {}
        self.peak_backlog = 0
        self.down_intervals = tuple(down_intervals)  # (start_ns, end_ns) pairs
        self._ipid = derive_seed(sim.seed, "server-ipid", addr) & 0xFFFF
        self._isn_rng = random.Random(derive_seed(sim.seed, "server-isn", addr))
        for start, _end in self.down_intervals:
            sim.schedule(start, self._go_down)

    def _go_down(self, now: int) -> None:
        # Restart semantics: a rebooting host loses its half-open state.
        for entry in self.backlog.values():
            entry.alive = False
        self.backlog.clear()
        self.sim.emit(now, "host_down", host=self.addr)

    def _is_up(self, now: int) -> bool:
        return not any(start <= now < end for start, end in self.down_intervals)

    @property
    def occupancy(self) -> float:
        return len(self.backlog) / self.backlog_capacity

    def _next_ipid(self) -> int:
        self._ipid = (self._ipid + 1) & 0xFFFF
        return self._ipid

    def on_segment(self, seg: TcpSegment, now: int) -> None:
        if not self._is_up(now):
            self.sim.emit(now, "drop_offline", host=self.addr)
            return
        syn, ack, rst = seg.has("SYN"), seg.has("ACK"), seg.has("RST")
        if syn and not ack and not rst:
            self._on_syn(seg, now)
        elif rst:
            self._on_rst(seg, now)
        elif syn and ack:
            self._reply(seg, now, seq=seg.ack, ack=seg.seq, flags=("RST",))
        elif ack:
            self._on_ack(seg, now)

    def _on_syn(self, seg: TcpSegment, now: int) -> None:
        if seg.dst_port not in self.open_ports:
            self._reply(seg, now, seq=0, ack=(seg.seq + 1) & 0xFFFFFFFF,
                        flags=("RST", "ACK"))
            return
        flow = seg.flow
        if flow in self.backlog:
            return  # duplicate SYN: entry already pending
        if len(self.backlog) >= self.backlog_capacity:
            self.sim.emit(now, "drop_backlog_full", host=self.addr)
            return
        entry = BacklogEntry(flow=flow, client_isn=seg.seq,
                             server_isn=self._isn_rng.getrandbits(32), created_at=now)
        self.backlog[flow] = entry
        self.peak_backlog = max(self.peak_backlog, len(self.backlog))
        self.sim.emit(now, "backlog_insert", host=self.addr, size=len(self.backlog))
        self._send_synack(entry, now)
        self.sim.schedule(now + self.backoff_ns[0], self._retransmit_check, entry)

    def _send_synack(self, entry: BacklogEntry, now: int) -> None:
        flow = entry.flow
        self.sent_count += 1
        out = TcpSegment(
            src_addr=self.addr, dst_addr=flow.src_addr,
            src_port=flow.dst_port, dst_port=flow.src_port,
            seq=entry.server_isn, ack=(entry.client_isn + 1) & 0xFFFFFFFF,
            flags=frozenset(("SYN", "ACK")), ttl=64,
            ipid=self._next_ipid(), timestamp=now,
        )
        self.sim._launch(out, origin=self.addr, at=now)

    def _retransmit_check(self, now: int, entry: BacklogEntry) -> None:
        if not entry.alive or not self._is_up(now):
            return
        budget = effective_retransmissions(self.occupancy, self.max_retransmissions)
        if entry.retransmissions_done >= budget:
            self._remove(entry, now, "pruned")
            return
        entry.retransmissions_done += 1
        self._send_synack(entry, now)
        self.sim.emit(now, "retransmit", host=self.addr,
                      n=entry.retransmissions_done)
        done = entry.retransmissions_done
        if done < self.max_retransmissions:
            self.sim.schedule(now + self.backoff_ns[done], self._retransmit_check, entry)
        else:
            # Final timeout: one more doubled wait, then the entry expires.
            last = (self.backoff_ns[done] if done < len(self.backoff_ns)
                    else 2 * self.backoff_ns[-1])
            self.sim.schedule(now + last, self._expire, entry)

    def _expire(self, now: int, entry: BacklogEntry) -> None:
        if entry.alive:
            self._remove(entry, now, "expired")

    def _remove(self, entry: BacklogEntry, now: int, reason: str) -> None:
        entry.alive = False
        self.backlog.pop(entry.flow, None)
        self.sim.emit(now, "backlog_remove", host=self.addr, reason=reason,
                      size=len(self.backlog))

    def _on_rst(self, seg: TcpSegment, now: int) -> None:
        entry = self.backlog.get(seg.flow)
        if entry and seg.seq == (entry.client_isn + 1) & 0xFFFFFFFF:
            self._remove(entry, now, "rst")

    def _on_ack(self, seg: TcpSegment, now: int) -> None:
        entry = self.backlog.get(seg.flow)
        if (entry and seg.seq == (entry.client_isn + 1) & 0xFFFFFFFF
                and seg.ack == (entry.server_isn + 1) & 0xFFFFFFFF):
            self._remove(entry, now, "ack")

    def _reply(self, seg: TcpSegment, now: int, seq: int, ack: int, flags) -> None:
        self.sent_count += 1
        out = TcpSegment(
            src_addr=self.addr, dst_addr=seg.src_addr,
            src_port=seg.dst_port, dst_port=seg.src_port,
            seq=seq, ack=ack, flags=frozenset(flags), ttl=64,
            ipid=self._next_ipid(), timestamp=now,
        )
        self.sim._launch(out, origin=self.addr, at=now)


class _MonitorHost(_Host):
    """Unbound measurement address: absorbs traffic, never auto-responds."""

    def __init__(self, sim, addr):
        super().__init__(sim, addr)
        self.inbox: list[tuple[int, TcpSegment]] = []

    def on_segment(self, seg: TcpSegment, now: int) -> None:
        self.inbox.append((now, seg))


class SimClock(Clock):
    def __init__(self, sim: "Simulator"):
        self._sim = sim

    def now_ns(self) -> int:
        return self._sim.now

    def sleep_ns(self, duration_ns: int) -> None:
        if duration_ns > 0:
            self._sim.step(self._sim.now + duration_ns)


class SimTransport(Transport):
    """Transport backend attached to a monitor address inside the simulator."""

    supports_spoofing = True

    def __init__(self, sim: "Simulator", local_addr: str, **kwargs):
        self._sim = sim
        self._clock = SimClock(sim)
        super().__init__(local_addr=local_addr, **kwargs)
        self._monitor = sim._ensure_monitor(local_addr)

    @property
    def clock(self) -> Clock:
        return self._clock

    def _dispatch(self, seg: TcpSegment, at_ns: int) -> None:
        self._sim.schedule(at_ns, self._sim._launch_cb, seg, self.local_addr)

    def _collect(self, until_ns: int) -> list:
        self._sim.step(until_ns)
        arrivals = self._monitor.inbox
        self._monitor.inbox = []
        return arrivals


class Simulator:
    """Single-threaded deterministic event loop over virtual nanoseconds."""

    def __init__(self, seed: int = 0, default_delay_ns: int = 10_000_000,
                 hour0: int = 0, trace: Optional[Callable[[dict], None]] = None):
        self.seed = seed
        self.now = 0
        self.hour0 = hour0
        self.default_delay_ns = default_delay_ns
        self.policy = FirewallPolicy()
        self.hosts: dict[str, _Host] = {}
        self._paths: dict[tuple, SimPath] = {}
        self._heap: list = []
        self._order = 0
        self._trace = trace
        self._step_events: list[dict] = []
        self._loss_rngs: dict[tuple, random.Random] = {}

    # -- construction --------------------------------------------------------

    def add_client(self, addr: str, **kwargs) -> SimClient:
        host = SimClient(self, addr, **kwargs)
        self.hosts[addr] = host
        return host

    def add_server(self, addr: str, **kwargs) -> SimServer:
        host = SimServer(self, addr, **kwargs)
        self.hosts[addr] = host
        return host

    def _ensure_monitor(self, addr: str) -> _MonitorHost:
        host = self.hosts.get(addr)
        if host is None:
            host = _MonitorHost(self, addr)
            self.hosts[addr] = host
        if not isinstance(host, _MonitorHost):
            raise ValueError(f"{addr} already assigned to a non-monitor host")
        return host

    def add_path(self, a: str, b: str, hops=(), delay_ns: Optional[int] = None,
                 loss_rate: float = 0.0, filtered: bool = False) -> SimPath:
        path = SimPath(a=a, b=b, hops=list(hops),
                       one_way_delay_ns=(delay_ns if delay_ns is not None
                                         else self.default_delay_ns),
                       loss_rate=loss_rate, filtered=filtered)
        self._paths[(a, b)] = path
        return path

    def attach(self, local_addr: str, **kwargs) -> SimTransport:
        return SimTransport(self, local_addr, **kwargs)

    def client(self, addr: str) -> SimClient:
        return self.hosts[addr]

    def server(self, addr: str) -> SimServer:
        return self.hosts[addr]

    # -- event loop -----------------------------------------------------------

    def schedule(self, t: int, fn: Callable, *args) -> None:
        if t < self.now:
            t = self.now
        heappush(self._heap, (t, self._order, fn, args))
        self._order += 1

    def step(self, until: int) -> list[dict]:
        """Process all events with timestamp <= until; returns emitted events."""
        if until < self.now:
            raise ValueError("cannot step backwards")
        self._step_events = []
        while self._heap and self._heap[0][0] <= until:
            t, _, fn, args = heappop(self._heap)
            self.now = t
            fn(t, *args)
        self.now = until
        return self._step_events

    def run_for(self, duration_ns: int) -> list[dict]:
        return self.step(self.now + duration_ns)

    def hour_at(self, t: int) -> int:
        return int((t // HOUR_NS + self.hour0) % 24)

    def emit(self, t: int, ev: str, **fields) -> None:
        record = {"t": t, "ev": ev}
        record.update(fields)
        self._step_events.append(record)
        if self._trace is not None:
            self._trace(record)

    # -- wire ------------------------------------------------------------------

    def _route(self, origin: str, dst: str) -> tuple[SimPath, bool]:
        """Path and direction flag (True when traveling a->b as declared)."""
        path = self._paths.get((origin, dst))
        if path is not None:
            return path, True
        path = self._paths.get((dst, origin))
        if path is not None:
            return path, False
        return SimPath(a=origin, b=dst, one_way_delay_ns=self.default_delay_ns), True

    def _loss_rng(self, path: SimPath) -> random.Random:
        key = (path.a, path.b)
        rng = self._loss_rngs.get(key)
        if rng is None:
            rng = random.Random(derive_seed(self.seed, "loss", path.a, path.b))
            self._loss_rngs[key] = rng
        return rng

    def _launch_cb(self, now: int, seg: TcpSegment, origin: str) -> None:
        self._launch(seg, origin, now)

    def _launch(self, seg: TcpSegment, origin: str, at: int) -> None:
        """Enter a segment onto the wire at virtual time `at`.

        Routing uses the physical origin, not the header source, so spoofed
        segments travel the sender's path.  The whole traversal is resolved
        here; outcome events are scheduled at their future times.
        """
        self.emit(at, "send", src=seg.src_addr, dst=seg.dst_addr,
                  sport=seg.src_port, dport=seg.dst_port,
                  flags="".join(sorted(seg.flags)), origin=origin)
        path, forward = self._route(origin, seg.dst_addr)
        if path.loss_rate > 0 and self._loss_rng(path).random() < path.loss_rate:
            self.emit(at, "drop_loss", src=seg.src_addr, dst=seg.dst_addr)
            return
        hops = path.hops if forward else list(reversed(path.hops))
        legs = path.leg_delays() if forward else list(reversed(path.leg_delays()))
        t = at
        ttl = seg.ttl
        for i, hop in enumerate(hops):
            t += legs[i]
            ttl -= 1
            if ttl <= 0:
                self.schedule(t, self._ttl_exceeded, seg, hop, origin, t - at)
                return
            physical_index = (i + 1) if forward else (len(hops) - i)
            if path.filtered:
                action = self.policy.decide(seg, physical_index, self.hour_at(t))
                if action == DROP:
                    self.schedule(t, self._emit_rule_drop, seg, physical_index)
                    return
        t += legs[-1]
        self.schedule(t, self._deliver, seg)

    def _emit_rule_drop(self, now: int, seg: TcpSegment, hop: int) -> None:
        self.emit(now, "drop_rule", src=seg.src_addr, dst=seg.dst_addr,
                  sport=seg.src_port, dport=seg.dst_port, hop=hop)

    def _ttl_exceeded(self, now: int, seg: TcpSegment, hop: Hop, origin: str,
                      elapsed: int) -> None:
        """Hop responds to an expired probe; notification carries the probe's
        seq in its ack field (the quoted-header convention) and src_port 0."""
        self.emit(now, "ttl_exceeded", hop=hop.addr, dst=seg.src_addr, ttl=seg.ttl)
        reply = TcpSegment(
            src_addr=hop.addr, dst_addr=seg.src_addr,
            src_port=0, dst_port=seg.src_port,
            seq=0, ack=seg.seq, flags=frozenset(("RST",)), ttl=64,
            ipid=0, timestamp=now,
        )
        # Return trip retraces the forward legs walked so far.
        self.schedule(now + elapsed, self._deliver, reply)

    def _deliver(self, now: int, seg: TcpSegment) -> None:
        target = self.hosts.get(seg.dst_addr)
        if target is None:
            self.emit(now, "drop_unrouted", dst=seg.dst_addr)
            return
        self.emit(now, "deliver", src=seg.src_addr, dst=seg.dst_addr,
                  sport=seg.src_port, dport=seg.dst_port,
                  flags="".join(sorted(seg.flags)), ipid=seg.ipid)
        target.on_segment(seg, now)
