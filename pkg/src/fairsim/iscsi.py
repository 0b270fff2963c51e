"""iSCSI-like session: SCSI commands multiplexed over N TCP connections.

Framing is byte-accurate but negotiation-free: every command, data-in and
status PDU carries a 48-byte header, and write data follows its command
header on the same stream (no R2T). All PDUs of a command travel on the
connection the command was bound to at issue time.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .ensemble import EnsembleRegistry, ensemble_join
from .netem import INITIATOR, TARGET, Testbed
from .sim_core import MS, SEC, US, Simulator
from .tcp import Tcb, TcpParams

WRITE = "write"
READ = "read"
PDU_HEADER_BYTES = 48
SECTOR_BYTES = 512
CLUSTER_BYTES = 128 * 1024

STANDARD = "standard"
FAIR = "fair"
MODES = (STANDARD, FAIR)

# PDU kinds
CMD = "cmd"
DATA_IN = "data_in"
STATUS = "status"


class SessionError(RuntimeError):
    pass


@dataclass(eq=False)
class ScsiCommand:
    command_id: int
    direction: str
    lba: int
    length_bytes: int
    issue_time: int | None = None
    complete_time: int | None = None
    conn_id: int | None = None
    on_complete: Callable | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.length_bytes <= 0:
            raise ValueError(f"command {self.command_id}: length must be positive")
        if self.direction not in (READ, WRITE):
            raise ValueError(f"command {self.command_id}: bad direction {self.direction!r}")

    @property
    def end_lba(self) -> int:
        return self.lba + -(-self.length_bytes // SECTOR_BYTES)


@dataclass(frozen=True)
class TurnaroundRecord:
    command_id: int
    direction: str
    turnaround: int
    conn_id: int
    issue_ns: int
    complete_ns: int


@dataclass
class DiskModel:
    """Single FIFO spindle: fixed overhead + transfer, plus a seek when non-sequential."""
    per_command_overhead: int = 500 * US
    transfer_rate_bps: int = 400_000_000
    seek_penalty: int = 4 * MS
    next_lba: int | None = None
    busy_until: int = 0

    def service_time(self, cmd: ScsiCommand) -> int:
        t = self.per_command_overhead + -(-cmd.length_bytes * 8 * SEC // self.transfer_rate_bps)
        if self.next_lba is not None and cmd.lba != self.next_lba:
            t += self.seek_penalty
        return t

    def submit(self, now: int, cmd: ScsiCommand) -> int:
        """Queue ``cmd`` behind earlier work; returns its completion time."""
        start = self.busy_until if self.busy_until > now else now
        done = start + self.service_time(cmd)
        self.next_lba = cmd.end_lba
        self.busy_until = done
        return done


class Channel:
    """PDU framing for one direction of one connection."""

    def __init__(self, conn_id: int, sender: Tcb, receiver: Tcb, on_pdu: Callable):
        self.conn_id = conn_id
        self.sender = sender
        self.receiver = receiver
        self.on_pdu = on_pdu
        self.written = 0
        self.backlog = 0
        self.received = 0
        self._frames: deque = deque()
        sender.on_send_space = self._flush
        receiver.on_deliver = self._deliver

    def push(self, kind: str, cmd: ScsiCommand, nbytes: int) -> None:
        self.written += nbytes
        self._frames.append((self.written, kind, cmd))
        self.backlog += nbytes
        self._flush(self.sender)

    def _flush(self, tcb: Tcb) -> None:
        if self.backlog:
            self.backlog -= tcb.app_send(self.backlog)

    def _deliver(self, tcb: Tcb, nbytes: int) -> None:
        self.received += nbytes
        frames = self._frames
        while frames and frames[0][0] <= self.received:
            _, kind, cmd = frames.popleft()
            self.on_pdu(self.conn_id, kind, cmd)


class Endpoint:
    """Demultiplexes arriving packets to this host's connections."""

    def __init__(self, host: str):
        self.host = host
        self.tcbs: dict[int, Tcb] = {}

    def __call__(self, pkt) -> None:
        seg = pkt.segment
        self.tcbs[seg.conn_id].receive(seg)


def endpoints_for(testbed: Testbed) -> dict[str, Endpoint]:
    eps = getattr(testbed, "endpoints", None)
    if eps is None:
        eps = testbed.endpoints = {INITIATOR: Endpoint(INITIATOR), TARGET: Endpoint(TARGET)}
        for host, ep in eps.items():
            testbed.attach(host, ep)
    return eps


class Target:
    """Services commands against a shared disk and replies on the command's connection."""

    def __init__(self, sim: Simulator, disk: DiskModel):
        self.sim = sim
        self.disk = disk
        self.served = 0

    def target_service(self, session: Session, cmd: ScsiCommand) -> int:
        done = self.disk.submit(self.sim.now, cmd)
        self.sim.schedule(done, self._respond, session, cmd)
        return done

    def _respond(self, session: Session, cmd: ScsiCommand) -> None:
        self.served += 1
        down = session.down[cmd.conn_id]
        if cmd.direction == READ:
            down.push(DATA_IN, cmd, PDU_HEADER_BYTES + cmd.length_bytes)
        down.push(STATUS, cmd, PDU_HEADER_BYTES)


class Session:
    def __init__(self, sim: Simulator, testbed: Testbed, n_conns: int, mode: str = STANDARD,
                 registry: EnsembleRegistry | None = None, params: TcpParams | None = None,
                 max_outstanding: int = 32, target: Target | None = None,
                 conn_id_base: int = 0, session_id: int = 0):
        if n_conns < 1:
            raise SessionError("a session needs at least one connection")
        if mode not in MODES:
            raise SessionError(f"unknown mode {mode!r}")
        if max_outstanding < 1:
            raise SessionError("max_outstanding must be at least 1")
        if mode == FAIR and registry is None:
            registry = EnsembleRegistry(params)
        self.sim = sim
        self.testbed = testbed
        self.mode = mode
        self.registry = registry
        self.session_id = session_id
        self.max_outstanding = max_outstanding
        self.target = target or Target(sim, DiskModel())
        eps = endpoints_for(testbed)
        self.conns: list[int] = []
        self.initiator_tcbs: dict[int, Tcb] = {}
        self.target_tcbs: dict[int, Tcb] = {}
        self.up: dict[int, Channel] = {}
        self.down: dict[int, Channel] = {}
        for k in range(n_conns):
            cid = conn_id_base + k
            if cid in eps[INITIATOR].tcbs:
                raise SessionError(f"connection id {cid} already in use")
            itcb = Tcb(sim, cid, INITIATOR, TARGET, testbed, params=params)
            ttcb = Tcb(sim, cid, TARGET, INITIATOR, testbed, params=params)
            if mode == FAIR:
                ensemble_join(registry, itcb)
                ensemble_join(registry, ttcb)
            eps[INITIATOR].tcbs[cid] = itcb
            eps[TARGET].tcbs[cid] = ttcb
            self.conns.append(cid)
            self.initiator_tcbs[cid] = itcb
            self.target_tcbs[cid] = ttcb
            self.up[cid] = Channel(cid, itcb, ttcb, self._at_target)
            self.down[cid] = Channel(cid, ttcb, itcb, self._at_initiator)
        self.pending: deque[ScsiCommand] = deque()
        self.in_flight: dict[int, ScsiCommand] = {}
        self.next_conn_index = 0
        self.records: list[TurnaroundRecord] = []
        self.submitted = 0
        self.completed = 0
        self.max_in_flight_seen = 0
        self.allegiance_violations = 0
        self._next_id = 0

    def new_command(self, direction: str, lba: int, length: int) -> ScsiCommand:
        cmd = ScsiCommand(self._next_id, direction, lba, length)
        self._next_id += 1
        return cmd

    def submit(self, cmd: ScsiCommand) -> ScsiCommand:
        self.submitted += 1
        if len(self.in_flight) < self.max_outstanding:
            self._issue(cmd)
        else:
            self.pending.append(cmd)
        return cmd

    def _issue(self, cmd: ScsiCommand) -> None:
        cid = self.conns[self.next_conn_index]
        self.next_conn_index = (self.next_conn_index + 1) % len(self.conns)
        cmd.conn_id = cid
        cmd.issue_time = self.sim.now
        self.in_flight[cmd.command_id] = cmd
        if len(self.in_flight) > self.max_in_flight_seen:
            self.max_in_flight_seen = len(self.in_flight)
        nbytes = PDU_HEADER_BYTES
        if cmd.direction == WRITE:
            nbytes += cmd.length_bytes
        self.up[cid].push(CMD, cmd, nbytes)

    def _at_target(self, conn_id: int, kind: str, cmd: ScsiCommand) -> None:
        if cmd.conn_id != conn_id:
            self.allegiance_violations += 1
        self.target.target_service(self, cmd)

    def _at_initiator(self, conn_id: int, kind: str, cmd: ScsiCommand) -> None:
        if cmd.conn_id != conn_id:
            self.allegiance_violations += 1
        if kind == STATUS:
            self.complete(cmd.command_id)

    def complete(self, command_id: int) -> TurnaroundRecord:
        cmd = self.in_flight.pop(command_id, None)
        if cmd is None:
            raise SessionError(f"completion for unknown command {command_id}")
        now = self.sim.now
        cmd.complete_time = now
        rec = TurnaroundRecord(command_id, cmd.direction, now - cmd.issue_time, cmd.conn_id,
                               cmd.issue_time, now)
        self.records.append(rec)
        self.completed += 1
        if self.pending:
            self._issue(self.pending.popleft())
        if cmd.on_complete is not None:
            cmd.on_complete(cmd)
        return rec

    def all_tcbs(self) -> list[Tcb]:
        return list(self.initiator_tcbs.values()) + list(self.target_tcbs.values())

    def conservation_ok(self) -> bool:
        """Every byte written on every stream was delivered exactly once."""
        for ch in list(self.up.values()) + list(self.down.values()):
            if ch.backlog or ch.received != ch.written:
                return False
            if ch.receiver.delivered_bytes != ch.sender.app_end:
                return False
        return True


def open_session(sim: Simulator, testbed: Testbed, n_conns: int, mode: str = STANDARD,
                 **kwargs) -> Session:
    return Session(sim, testbed, n_conns, mode, **kwargs)


def submit(session: Session, cmd: ScsiCommand) -> ScsiCommand:
    return session.submit(cmd)


def complete(session: Session, command_id: int) -> TurnaroundRecord:
    return session.complete(command_id)
