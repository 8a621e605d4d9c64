"""Scenario files: declarative host/path/policy descriptions for the simulator.

INI syntax (configparser).  Example::

    [sim]
    seed = 42
    duration_s = 600
    default_delay_ms = 10

    [client c1]
    addr = 10.0.0.2
    ipid_mode = global
    background_rate = 0.0
    rst_policy = yes

    [server relay1]
    addr = 203.0.113.5
    ports = 9001, 9030
    backlog_capacity = 256
    max_retransmissions = 5
    backoff_s = 1, 2, 4, 8, 16

    [path c1 relay1]
    hops = 10.1.0.1, 10.9.0.1@CN, 10.9.0.2@CN
    delay_ms = 30
    loss_rate = 0.0
    filtered = yes

    [rule drop-tor]
    direction = server->client
    addr = 203.0.113.5
    port = 9001
    action = drop
    placement_hop = 2
    hours = *

Hops are listed from the first-named path endpoint toward the second; a
rule's placement_hop refers to that listed index in either travel
direction.  ``hours`` is ``*`` (always), a 24-character 0/1 mask, or hour
ranges like ``0-1,11-23``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from typing import Optional

from .simnet import FilterRule, Hop, Simulator
from .transport import NS_PER_SEC


class ScenarioError(ValueError):
    pass


@dataclass
class HostDecl:
    kind: str  # client | server | monitor
    name: str
    addr: str
    options: dict = field(default_factory=dict)


@dataclass
class PathDecl:
    a: str  # host name
    b: str
    hops: list
    delay_ns: Optional[int]
    loss_rate: float
    filtered: bool


@dataclass
class Scenario:
    seed: int = 0
    duration_ns: int = 0
    default_delay_ns: int = 10_000_000
    hour0: int = 0
    hosts: list = field(default_factory=list)
    paths: list = field(default_factory=list)
    rules: list = field(default_factory=list)
    # Free-form defaults applied by campaign runners to hosts/paths that the
    # file does not declare explicitly (keeps large bipartite scenarios short).
    defaults: dict = field(default_factory=dict)

    def host_addr(self, name: str) -> str:
        for h in self.hosts:
            if h.name == name:
                return h.addr
        raise ScenarioError(f"unknown host name: {name}")

    def build(self, seed: Optional[int] = None, trace=None) -> Simulator:
        sim = Simulator(seed=self.seed if seed is None else seed,
                        default_delay_ns=self.default_delay_ns,
                        hour0=self.hour0, trace=trace)
        for h in self.hosts:
            if h.kind == "client":
                sim.add_client(h.addr, **h.options)
            elif h.kind == "server":
                sim.add_server(h.addr, **h.options)
            else:
                sim._ensure_monitor(h.addr)
        for p in self.paths:
            sim.add_path(self.host_addr(p.a), self.host_addr(p.b), hops=p.hops,
                         delay_ns=p.delay_ns, loss_rate=p.loss_rate,
                         filtered=p.filtered)
        sim.policy.rules.extend(self.rules)
        return sim


def parse_hours(text: str) -> Optional[tuple]:
    text = text.strip()
    if text in ("*", ""):
        return None
    if len(text) == 24 and set(text) <= {"0", "1"}:
        return tuple(c == "1" for c in text)
    mask = [False] * 24
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            for h in range(int(lo), int(hi) + 1):
                mask[h] = True
        else:
            mask[int(part)] = True
    return tuple(mask)


def _parse_hops(text: str) -> list:
    hops = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        parts = item.split("@")
        addr = parts[0]
        region = parts[1] if len(parts) > 1 else ""
        delay = int(float(parts[2]) * 1e6) if len(parts) > 2 else None
        hops.append(Hop(addr=addr, region=region, delay_ns=delay))
    return hops


def _floats(text: str) -> list:
    return [float(x) for x in text.split(",") if x.strip()]


def _intervals_ns(text: str) -> list:
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, hi = part.split("-", 1)
        out.append((int(float(lo) * NS_PER_SEC), int(float(hi) * NS_PER_SEC)))
    return out


def loads(text: str) -> Scenario:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    scn = Scenario()
    if cp.has_section("sim"):
        sec = cp["sim"]
        scn.seed = sec.getint("seed", 0)
        scn.duration_ns = int(sec.getfloat("duration_s", 0.0) * NS_PER_SEC)
        scn.default_delay_ns = int(sec.getfloat("default_delay_ms", 10.0) * 1e6)
        scn.hour0 = sec.getint("hour0", 0)
    if cp.has_section("defaults"):
        scn.defaults = dict(cp["defaults"])
    for section in cp.sections():
        if section in ("sim", "defaults"):
            continue
        words = section.split()
        kind = words[0]
        sec = cp[section]
        if kind in ("client", "server", "monitor"):
            if len(words) != 2:
                raise ScenarioError(f"bad host section name: [{section}]")
            name = words[1]
            addr = sec.get("addr")
            if not addr:
                raise ScenarioError(f"[{section}] missing addr")
            options: dict = {}
            if kind == "client":
                options["ipid_mode"] = sec.get("ipid_mode", "global")
                if "ipid_start" in sec:
                    options["ipid_start"] = sec.getint("ipid_start")
                options["background_rate"] = sec.getfloat("background_rate", 0.0)
                options["rst_policy"] = sec.getboolean("rst_policy", True)
            elif kind == "server":
                ports = [int(p) for p in sec.get("ports", "").split(",") if p.strip()]
                options["open_ports"] = ports
                options["backlog_capacity"] = sec.getint("backlog_capacity", 256)
                options["max_retransmissions"] = sec.getint("max_retransmissions", 5)
                if "backoff_s" in sec:
                    options["backoff_s"] = _floats(sec["backoff_s"])
                if "down_s" in sec:
                    options["down_intervals"] = _intervals_ns(sec["down_s"])
            scn.hosts.append(HostDecl(kind=kind, name=name, addr=addr, options=options))
        elif kind == "path":
            if len(words) != 3:
                raise ScenarioError(f"bad path section name: [{section}]")
            delay_ns = (int(sec.getfloat("delay_ms") * 1e6)
                        if "delay_ms" in sec else None)
            scn.paths.append(PathDecl(
                a=words[1], b=words[2],
                hops=_parse_hops(sec.get("hops", "")),
                delay_ns=delay_ns,
                loss_rate=sec.getfloat("loss_rate", 0.0),
                filtered=sec.getboolean("filtered", False),
            ))
        elif kind == "rule":
            if len(words) != 2:
                raise ScenarioError(f"bad rule section name: [{section}]")
            flags_text = sec.get("flags", "").strip()
            scn.rules.append(FilterRule(
                name=words[1],
                direction=sec.get("direction", "server->client"),
                addr=sec.get("addr") or None,
                port=sec.getint("port") if "port" in sec else None,
                action=sec.get("action", "drop"),
                placement_hop=sec.getint("placement_hop", 1),
                hours=parse_hours(sec.get("hours", "*")),
                flags=(frozenset(f.strip().upper() for f in flags_text.split(","))
                       if flags_text else None),
            ))
        else:
            raise ScenarioError(f"unknown section kind: [{section}]")
    return scn


def load(path) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        return loads(fh.read())
