"""Endpoint metadata: client/server identities and their CSV on-disk form."""

from __future__ import annotations

import csv
from dataclasses import dataclass, asdict
from typing import Iterable

ROLES = ("client", "tor-relay", "tor-dir", "web")

MIN_RELAY_UPTIME_DAYS = 5.0


@dataclass(frozen=True)
class EndpointSpec:
    addr: str
    port: int
    role: str
    lat: float = 0.0
    lon: float = 0.0
    uptime_days: float = 0.0
    stable: bool = True

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role: {self.role!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, rec: dict) -> "EndpointSpec":
        return cls(addr=rec["addr"], port=int(rec["port"]), role=rec["role"],
                   lat=float(rec.get("lat", 0.0)), lon=float(rec.get("lon", 0.0)),
                   uptime_days=float(rec.get("uptime_days", 0.0)),
                   stable=bool(rec.get("stable", True)))


def load_endpoints(path) -> list:
    """Read an endpoint CSV: addr,port,role,lat,lon,uptime_days,stable_flag."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(EndpointSpec(
                addr=row["addr"].strip(),
                port=int(row["port"] or 0),
                role=row["role"].strip(),
                lat=float(row.get("lat") or 0.0),
                lon=float(row.get("lon") or 0.0),
                uptime_days=float(row.get("uptime_days") or 0.0),
                stable=(row.get("stable_flag") or "1").strip().lower()
                       in ("1", "true", "yes"),
            ))
    return out


def save_endpoints(path, endpoints: Iterable[EndpointSpec]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["addr", "port", "role", "lat", "lon",
                         "uptime_days", "stable_flag"])
        for ep in endpoints:
            writer.writerow([ep.addr, ep.port, ep.role, ep.lat, ep.lon,
                             ep.uptime_days, int(ep.stable)])


def passes_stability_rule(ep: EndpointSpec,
                          min_uptime_days: float = MIN_RELAY_UPTIME_DAYS) -> bool:
    """Relay admission rule: the stability flag plus a minimum uptime.

    Only relay-type endpoints are subject to it; clients and web servers
    always pass.
    """
    if ep.role not in ("tor-relay", "tor-dir"):
        return True
    return ep.stable and ep.uptime_days >= min_uptime_days


def filter_stable(endpoints: Iterable[EndpointSpec],
                  min_uptime_days: float = MIN_RELAY_UPTIME_DAYS) -> list:
    """Ingestion-time filter applied to server lists before any scanning."""
    return [ep for ep in endpoints if passes_stability_rule(ep, min_uptime_days)]
