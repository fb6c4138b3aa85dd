"""Role configuration: ``key = value`` lines plus a ``[peers]`` table.

    channel = udp
    interval_us = 1000

    [peers]
    1 = 127.0.0.1:40001 icps
    10 = 127.0.0.1:40010 hall-A
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

from ..domain import US
from ..transport import ChannelKind, EndpointConfig, PeerAddress
from .testbed import GRANDMASTER, ICPS, REGISTRY, VPCMO

_MAIN = "main"


class ConfigError(ValueError):
    pass


@dataclass
class RoleConfig:
    peers: Dict[int, PeerAddress] = field(default_factory=dict)
    channel: ChannelKind = ChannelKind.DATAGRAM
    interface: str = "lo"
    node: int = 0
    interval_ns: int = 1000 * US
    samples: int = 10_000
    timeout_cycles: int = 2
    backups: int = 1
    ready_window: int = 5
    vpf: Tuple[int, int] = (1, 1)
    site: str = "hall-A"
    icps: int = ICPS
    vpcmo: int = VPCMO
    registry: int = REGISTRY
    grandmaster: int = GRANDMASTER
    irs: List[int] = field(default_factory=list)
    min_subscribers: int = 0
    trace: str = "trace.csv"
    start_file: str = ""
    registry_path: str = ""
    workflow_log: str = ""
    sync_probes: int = 0
    #: SCHED_FIFO priority for the time-critical roles; 0 keeps the default policy
    rt_priority: int = 0
    extra: Dict[str, str] = field(default_factory=dict)

    def endpoint_config(self) -> EndpointConfig:
        return EndpointConfig(peers=dict(self.peers), interface=self.interface)


def _int_list(text: str) -> List[int]:
    return [int(x) for x in text.replace(",", " ").split()]


def parse_config(text: str, source: str = "<config>") -> RoleConfig:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep key case
    try:
        cp.read_string(f"[{_MAIN}]\n" + text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = RoleConfig()
    if cp.has_section("peers"):
        for key, value in cp.items("peers"):
            parts = value.split()
            if not parts or ":" not in parts[0]:
                raise ConfigError(f"{source}: peer {key}: expected 'host:port [site]'")
            host, _, port = parts[0].rpartition(":")
            try:
                cfg.peers[int(key)] = PeerAddress(host, int(port), parts[1] if len(parts) > 1 else "")
            except ValueError as exc:
                raise ConfigError(f"{source}: peer {key}: {exc}") from None
    main = dict(cp.items(_MAIN)) if cp.has_section(_MAIN) else {}
    ints = {
        "node": "node", "samples": "samples", "timeout_cycles": "timeout_cycles", "backups": "backups",
        "ready_window": "ready_window", "icps": "icps", "vpcmo": "vpcmo", "registry": "registry",
        "grandmaster": "grandmaster", "min_subscribers": "min_subscribers", "sync_probes": "sync_probes",
        "rt_priority": "rt_priority",
    }
    try:
        for key, value in main.items():
            if key in ints:
                setattr(cfg, ints[key], int(value))
            elif key == "interval_us":
                cfg.interval_ns = int(float(value) * US)
            elif key == "channel":
                cfg.channel = ChannelKind(value.strip())
            elif key == "vpf":
                a, _, b = value.partition(":")
                cfg.vpf = (int(a), int(b or 0))
            elif key == "irs":
                cfg.irs = _int_list(value)
            elif key in ("interface", "site", "trace", "start_file", "registry_path", "workflow_log"):
                setattr(cfg, key, value.strip())
            else:
                cfg.extra[key] = value.strip()
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def load_config(path: str) -> RoleConfig:
    with open(path) as fh:
        return parse_config(fh.read(), path)


def render_config(cfg: RoleConfig) -> str:
    lines = [
        f"channel = {cfg.channel.value}",
        f"interface = {cfg.interface}",
        f"interval_us = {cfg.interval_ns / US:g}",
        f"samples = {cfg.samples}",
        f"timeout_cycles = {cfg.timeout_cycles}",
        f"backups = {cfg.backups}",
        f"ready_window = {cfg.ready_window}",
        f"vpf = {cfg.vpf[0]}:{cfg.vpf[1]}",
        f"site = {cfg.site}",
        f"icps = {cfg.icps}",
        f"vpcmo = {cfg.vpcmo}",
        f"registry = {cfg.registry}",
        f"grandmaster = {cfg.grandmaster}",
        f"irs = {','.join(map(str, cfg.irs))}",
        f"min_subscribers = {cfg.min_subscribers}",
        f"trace = {cfg.trace}",
        f"rt_priority = {cfg.rt_priority}",
    ]
    for key in ("start_file", "registry_path", "workflow_log"):
        if getattr(cfg, key):
            lines.append(f"{key} = {getattr(cfg, key)}")
    for k, v in cfg.extra.items():
        lines.append(f"{k} = {v}")
    lines.append("")
    lines.append("[peers]")
    for node, addr in sorted(cfg.peers.items()):
        lines.append(f"{node} = {addr.host}:{addr.port} {addr.site}".rstrip())
    return "\n".join(lines) + "\n"
