"""Multi-process runs over real sockets.

Every role runs as its own OS process (``python -m vpcsys run <role>``); VPC
instances are threads inside the IR agent process that hosts them, so
killing an IR process crash-stops everything on it.  The parent process is
the harness: it issues workflow requests and kills on the ICPS schedule,
then evaluates the trace the ICPS wrote.
"""

from __future__ import annotations

import gc
import logging
import os
import queue
import random
import signal
import socket
import subprocess
import sys
import tempfile
import threading
import time
from typing import Dict, List, Optional, Tuple

from .. import protocol as p
from ..domain import MsgType
from ..icps_sim import IcpsActor, IcpsConfig, read_trace, write_trace
from ..protocol import IrCapabilities
from ..registry_service import RegistryService
from ..runtime import ActorDriver, ThreadedRuntime
from ..transport import ChannelKind, EndpointClosed, PeerAddress, open_endpoint, raw_frames_available
from ..vpc_runtime import IrAgent
from ..vpcmo import Phase, Vpcmo
from .cases import ChannelUnavailable, TestCase, TestParams, alternating_vpfs, reconfig_points
from .config import RoleConfig, load_config, render_config
from .report import TestReport, evaluate, format_schedule, published_comparison
from .testbed import FIRST_VPC, GRANDMASTER, HARNESS, ICPS, INVERT, IR_SITES, REGISTRY, VPCMO, default_registry, kind_name

log = logging.getLogger(__name__)

ROLES = ("icps", "vpc", "vpcmo", "registry", "grandmaster")
#: VPC node ids the orchestrator may hand out in one run
VPC_IDS = range(FIRST_VPC, FIRST_VPC + 100)
STARTUP_TIMEOUT_S = 30.0
RT_PRIORITY = 50


# -- role processes ---------------------------------------------------------


class _Stopper:
    """SIGTERM/SIGINT turn into an orderly stop."""

    def __init__(self) -> None:
        self.event = threading.Event()
        self.drivers: List[ActorDriver] = []
        for sig in (signal.SIGTERM, signal.SIGINT):
            signal.signal(sig, self._handle)

    def _handle(self, signum, frame) -> None:
        self.event.set()
        for d in self.drivers:
            d.stop()


class BootVpcmo(Vpcmo):
    """Orchestrator that deploys the initial cluster once the expected IRs
    have registered."""

    def __init__(self, cfg: RoleConfig, **kw) -> None:
        super().__init__(cfg.node, default_registry(), icps=[cfg.icps], log_path=cfg.workflow_log or None, **kw)
        self.boot = cfg
        self.booted = False

    def on_message(self, msg, sender: int) -> None:
        super().on_message(msg, sender)
        if not self.booted and len(self.irs) >= len(self.boot.irs):
            self.booted = True
            cid = self.deploy_cluster(
                self.boot.vpf,
                size=1 + self.boot.backups,
                site=self.boot.site,
                sync_timeout_cycles=self.boot.timeout_cycles,
                ready_window=self.boot.ready_window,
                sync_interval_ns=self.boot.interval_ns,
            )
            log.info("vpcmo: initial cluster %d deployed on %s", cid, self.clusters[cid].irs)


def _write_atomic(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _realtime(priority: int) -> None:
    if priority <= 0 or not hasattr(os, "sched_setscheduler"):
        return
    try:
        os.sched_setscheduler(0, os.SCHED_FIFO, os.sched_param(priority))
    except (PermissionError, OSError) as exc:
        log.warning("realtime priority %d not granted: %s", priority, exc)


def realtime_available() -> bool:
    if not hasattr(os, "sched_setscheduler"):
        return False
    try:
        policy, param = os.sched_getscheduler(0), os.sched_getparam(0)
        os.sched_setscheduler(0, os.SCHED_FIFO, os.sched_param(1))
        os.sched_setscheduler(0, policy, param)
        return True
    except (PermissionError, OSError):
        return False


def run_role(role: str, cfg: RoleConfig) -> int:
    """Run one role in this process until it finishes or is signalled."""
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}")
    if role in ("icps", "vpc"):
        # the ICPS stands in for separate hardware, so it outranks the hosts
        _realtime(cfg.rt_priority + 10 if role == "icps" and cfg.rt_priority else cfg.rt_priority)
        # a full collection pauses for milliseconds; the hot path allocates no cycles
        gc.freeze()
        gc.disable()
    elif cfg.rt_priority > 10:
        # control plane sits below the hosts but must not starve behind them
        _realtime(cfg.rt_priority - 10)
    stopper = _Stopper()
    econf = cfg.endpoint_config()
    if role == "vpc":
        site = cfg.peers[cfg.node].site or cfg.site
        caps = IrCapabilities(site=site, supports_raw_frame=cfg.channel is ChannelKind.RAW_FRAME)
        rt = ThreadedRuntime(cfg.channel, econf)
        rt.add(IrAgent(cfg.node, caps, vpcmo=cfg.vpcmo, register=True))
        stopper.event.wait()
        rt.stop()
        return 0
    endpoint = open_endpoint(cfg.channel, cfg.node, econf)
    if role == "icps":
        actor = IcpsActor(IcpsConfig(cfg.node, cfg.interval_ns, cfg.samples, min_subscribers=cfg.min_subscribers))
        if cfg.start_file:
            actor.on_start.append(lambda t0: _write_atomic(cfg.start_file, f"{t0}\n"))
        driver = ActorDriver(actor, endpoint)
        stopper.drivers.append(driver)
        driver.run(until=lambda: actor.finished)
        write_trace(cfg.trace, actor.trace(), {"duplicates": str(actor.duplicates), "late": str(actor.late)})
        endpoint.close()
        return 0 if actor.finished else 1
    if role == "vpcmo":
        actor = BootVpcmo(cfg)
    elif role == "registry":
        actor = RegistryService(cfg.node, default_registry(cfg.registry_path or None))
    else:
        from ..clocksync import Grandmaster

        actor = Grandmaster(cfg.node)
    driver = ActorDriver(actor, endpoint)
    stopper.drivers.append(driver)
    driver.run()
    endpoint.close()
    return 0


# -- orchestration ------------------------------------------------------------


def _free_base(span: int) -> int:
    """A base port such that base..base+span is free for TCP and UDP right now."""
    for _ in range(50):
        base = random.randrange(20_000, 60_000 - span)
        try:
            for port in (base, base + span // 2, base + span - 1):
                for kind in (socket.SOCK_STREAM, socket.SOCK_DGRAM):
                    with socket.socket(socket.AF_INET, kind) as s:
                        s.bind(("127.0.0.1", port))
        except OSError:
            continue
        return base
    raise RuntimeError("no free port range found")


def build_config(params: TestParams, workdir: str, ir_sites: Optional[Dict[int, str]] = None) -> RoleConfig:
    ir_sites = dict(ir_sites or IR_SITES)
    ids = [ICPS, VPCMO, REGISTRY, GRANDMASTER, HARNESS, *ir_sites, *VPC_IDS]
    base = _free_base(max(ids) + 1)
    peers = {n: PeerAddress("127.0.0.1", base + n, ir_sites.get(n, "")) for n in ids}
    return RoleConfig(
        peers=peers,
        channel=ChannelKind(params.channel),
        interval_ns=params.interval_ns,
        samples=params.samples,
        timeout_cycles=params.timeout_cycles,
        backups=params.backups,
        vpf=INVERT,
        irs=sorted(ir_sites),
        min_subscribers=1 + params.backups,
        trace=os.path.join(workdir, "icps-trace.csv"),
        start_file=os.path.join(workdir, "icps-start"),
        workflow_log=os.path.join(workdir, "workflows.log"),
        rt_priority=RT_PRIORITY if realtime_available() else 0,
    )


def _wait_port(addr: PeerAddress, deadline: float) -> None:
    while True:
        try:
            with socket.create_connection((addr.host, addr.port), timeout=0.2):
                return
        except OSError:
            if time.monotonic() > deadline:
                raise TimeoutError(f"nothing listening on {addr.host}:{addr.port}")
            time.sleep(0.05)


class _Procs:
    def __init__(self, config_path: str, workdir: str) -> None:
        self.config_path = config_path
        self.workdir = workdir
        self.procs: Dict[int, subprocess.Popen] = {}
        self._logs: List = []

    def spawn(self, role: str, node: int) -> subprocess.Popen:
        out = open(os.path.join(self.workdir, f"{role}-{node}.log"), "w")
        self._logs.append(out)
        level = logging.getLogger().getEffectiveLevel()
        verbosity = ["-v"] * (level <= logging.INFO) + ["-v"] * (level <= logging.DEBUG)
        cmd = [sys.executable, "-m", "vpcsys", *verbosity, "run", role, "--config", self.config_path, "--node", str(node)]
        proc = subprocess.Popen(cmd, stdout=out, stderr=subprocess.STDOUT)
        self.procs[node] = proc
        return proc

    def kill(self, node: int) -> None:
        proc = self.procs.get(node)
        if proc is not None and proc.poll() is None:
            proc.send_signal(signal.SIGKILL)

    def shutdown(self) -> None:
        for proc in self.procs.values():
            if proc.poll() is None:
                proc.terminate()
        for proc in self.procs.values():
            try:
                proc.wait(timeout=3)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
        for fh in self._logs:
            fh.close()


class _StatusListener(threading.Thread):
    """Collects WorkflowStatus replies addressed to the harness node."""

    def __init__(self, endpoint) -> None:
        super().__init__(name="harness-status", daemon=True)
        self.endpoint = endpoint
        self.statuses: "queue.Queue[Tuple[int, p.WorkflowStatusPayload]]" = queue.Queue()
        self.running = True

    def run(self) -> None:
        while self.running:
            try:
                msg, _ = self.endpoint.receive(50_000_000)
            except TimeoutError:
                continue
            except (EndpointClosed, OSError):
                return
            if msg.msg_type == MsgType.WORKFLOW_STATUS:
                self.statuses.put((msg.cluster_id, p.WorkflowStatusPayload.decode(msg.payload)))


def _actions(case: TestCase, params: TestParams, cfg: RoleConfig) -> List[Tuple[int, str, object]]:
    if case == TestCase.REPLACEMENT:
        # placement is deterministic: the cluster starts on the two lowest
        # hall-A IRs and the first one hosts the leader
        hall = [ir for ir in cfg.irs if cfg.peers[ir].site == cfg.site]
        acts = [(params.kill_at, "kill", hall[0])]
        if params.second_kill_at:
            acts.append((params.second_kill_at, "kill", hall[1]))
        return acts
    if case == TestCase.RECONFIGURATION:
        return [
            (at, "reconfigure", vpf)
            for at, vpf in zip(reconfig_points(params.samples, params.reconfigs), alternating_vpfs(params.reconfigs))
        ]
    if case == TestCase.REDEPLOYMENT:
        return [(params.samples // 2, "redeploy", params.redeploy_site)]
    return []


def run_socket_test(case: TestCase, params: TestParams) -> TestReport:
    case = TestCase(case)
    channel = ChannelKind(params.channel)
    if channel is ChannelKind.RAW_FRAME and not raw_frames_available("lo"):
        raise ChannelUnavailable("raw-frame unavailable")
    workdir = params.out_dir or tempfile.mkdtemp(prefix="vpcsys-")
    os.makedirs(workdir, exist_ok=True)
    cfg = build_config(params, workdir)
    config_path = os.path.join(workdir, "testbed.conf")
    _write_atomic(config_path, render_config(cfg))
    for stale in (cfg.start_file, cfg.trace):
        if os.path.exists(stale):
            os.remove(stale)

    procs = _Procs(config_path, workdir)
    harness_ep = open_endpoint(channel, HARNESS, cfg.endpoint_config())
    listener = _StatusListener(harness_ep)
    listener.start()
    kills: List[int] = []
    requests: List[Tuple[str, object]] = []
    try:
        deadline = time.monotonic() + STARTUP_TIMEOUT_S
        procs.spawn("registry", REGISTRY)
        icps = procs.spawn("icps", ICPS)
        _wait_port(cfg.peers[ICPS], deadline)
        procs.spawn("vpcmo", VPCMO)
        _wait_port(cfg.peers[VPCMO], deadline)
        for ir in cfg.irs:
            procs.spawn("vpc", ir)
        while not os.path.exists(cfg.start_file):
            if time.monotonic() > deadline or icps.poll() is not None:
                raise RuntimeError(f"ICPS never started; see logs in {workdir}")
            time.sleep(0.01)
        with open(cfg.start_file) as fh:
            t0 = int(fh.read().strip())
        iv = params.interval_ns
        for seq, action, arg in _actions(case, params, cfg):
            # half a cycle ahead of the send, as the simulator does
            target = t0 + seq * iv - iv // 2
            while time.monotonic_ns() < target:
                time.sleep(min(0.05, max(0.0, (target - time.monotonic_ns()) / 1e9)))
            if action == "kill":
                procs.kill(arg)
                kills.append(int((time.monotonic_ns() - t0) // iv))
            elif action == "reconfigure":
                body = p.ReconfigureRequestPayload(1, arg[0], arg[1]).encode()
                harness_ep.send(VPCMO, p.make(MsgType.RECONFIGURE_REQUEST, HARNESS, body))
                requests.append((action, arg))
            elif action == "redeploy":
                body = p.RedeployRequestPayload(1, arg).encode()
                harness_ep.send(VPCMO, p.make(MsgType.REDEPLOY_REQUEST, HARNESS, body))
                requests.append((action, arg))
        run_s = (params.samples + 10) * iv / 1e9 + STARTUP_TIMEOUT_S
        try:
            icps.wait(timeout=run_s)
        except subprocess.TimeoutExpired:
            raise RuntimeError(f"ICPS did not finish within {run_s:.0f}s; see logs in {workdir}") from None
        time.sleep(0.1)  # let the last statuses arrive
    finally:
        listener.running = False
        procs.shutdown()
        harness_ep.close()
        listener.join(timeout=1)

    final: Dict[int, p.WorkflowStatusPayload] = {}
    while not listener.statuses.empty():
        _, st = listener.statuses.get()
        final[st.workflow_id] = st
    return _finish(case, params, cfg, workdir, kills, requests, final)


def _finish(
    case: TestCase,
    params: TestParams,
    cfg: RoleConfig,
    workdir: str,
    kills: List[int],
    requests: List[Tuple[str, object]],
    final: Dict[int, p.WorkflowStatusPayload],
) -> TestReport:
    records, icps_meta = read_trace(cfg.trace)
    channel = ChannelKind(params.channel).value
    meta = params.meta(case)
    # requests are spaced far apart, so workflow ids follow request order
    ordered = [final[wf] for wf in sorted(final)]
    schedule = [(1, kind_name(INVERT))]
    boundaries: List[int] = []
    current = INVERT
    for (action, arg), st in zip(requests, ordered):
        _, b = st.event() if st.detail.startswith("boundary:") else ("", None)
        if Phase(st.phase) in (Phase.COMMITTED, Phase.RELEASED) and b is not None:
            current = arg if action == "reconfigure" else current
            schedule.append((b, kind_name(current)))
            boundaries.append(b)
    meta["schedule"] = format_schedule(schedule)
    meta["kills"] = ",".join(map(str, kills))
    meta["duplicates"] = icps_meta.get("duplicates", "0")
    if case == TestCase.REDEPLOYMENT:
        meta["redeploys"] = str(len(requests))
        meta["handovers"] = ",".join(map(str, boundaries))
    path = os.path.join(workdir, f"{case.value}-{channel}.csv")
    write_trace(path, records, meta)
    rep = evaluate(records, meta, path)
    if requests:
        rep.live_checks["workflows_committed"] = len(ordered) == len(requests) and all(
            Phase(st.phase) == Phase.RELEASED for st in ordered
        )
    rep.informational = published_comparison(rep.stats)
    with open(os.path.join(workdir, f"{case.value}-{channel}.json"), "w") as fh:
        fh.write(rep.to_json())
    return rep


def load_role_config(path: str, node: Optional[int]) -> RoleConfig:
    cfg = load_config(path)
    if node is not None:
        cfg.node = node
    if cfg.node not in cfg.peers:
        raise ValueError(f"node {cfg.node} has no address in {path}")
    return cfg
