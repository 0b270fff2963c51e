"""TCP Reno with SACK over the simulated testbed.

A :class:`Tcb` is one endpoint of a full-duplex connection: it sends its own
byte stream and acknowledges the peer's. Congestion and RTT state live in a
pluggable ``cc`` object. Standard mode uses :class:`OwnCongestionState`; the
ensemble module supplies a member object that forwards to a shared block.

Simplifications:

* no handshake, no FIN; connections live for the whole run
* pure acks only, one per data segment (no delayed ack, no piggybacking)
* Nagle off; a segment goes out once the window admits all of it
* loss recovery is SACK based: on entering recovery, and on each new SACK
  while recovering, every un-SACKed segment below the highest SACKed byte
  is marked lost and retransmitted lowest first as the window allows
"""
from __future__ import annotations

from bisect import bisect_left
from dataclasses import dataclass
from operator import attrgetter

from .netem import ACK_BYTES, HEADER_BYTES, Packet
from .sim_core import MS, SEC, Simulator

MSS = 1460
SEND_BUFFER_BYTES = 512 * 1024
RWND_BYTES = 512 * 1024
INITIAL_CWND = 2 * MSS
MIN_RTO = 200 * MS
MAX_RTO = 60 * SEC
INITIAL_RTO = 1 * SEC
DUPACK_THRESHOLD = 3
MAX_SACK_BLOCKS = 4

FLAG_DATA = 1
FLAG_ACK = 2
FLAG_FIN = 4

# segment record states
IN_PIPE = 0
LOST = 1
SACKED = 2

# which event marked a segment lost
BY_RECOVERY = 1
BY_TIMEOUT = 2


class ProtocolViolation(RuntimeError):
    """The peer acknowledged bytes that were never sent."""


class ConnectionClosed(RuntimeError):
    pass


class Segment:
    __slots__ = ("conn_id", "seq", "len", "ack", "sack_blocks", "flags")

    def __init__(self, conn_id, seq: int = 0, length: int = 0, ack: int = 0,
                 sack_blocks: tuple = (), flags: int = FLAG_DATA):
        self.conn_id = conn_id
        self.seq = seq
        self.len = length
        self.ack = ack
        self.sack_blocks = sack_blocks
        self.flags = flags

    def __repr__(self) -> str:
        if self.flags & FLAG_DATA:
            return f"Segment(conn={self.conn_id}, data [{self.seq}, {self.seq + self.len}))"
        return f"Segment(conn={self.conn_id}, ack={self.ack}, sack={list(self.sack_blocks)})"


@dataclass(frozen=True)
class RttEstimator:
    srtt: int = 0
    rttvar: int = 0
    initialized: bool = False


def update_rtt(est: RttEstimator, sample: int) -> RttEstimator:
    """Jacobson/Karels smoothing on integer nanoseconds."""
    if sample <= 0:
        raise ValueError(f"RTT sample must be positive, got {sample}")
    if not est.initialized:
        return RttEstimator(sample, sample // 2, True)
    err = sample - est.srtt
    rttvar = (3 * est.rttvar + abs(err)) // 4
    srtt = (7 * est.srtt + sample) // 8
    return RttEstimator(srtt, rttvar, True)


def rto_from(est: RttEstimator, min_rto: int = MIN_RTO, max_rto: int = MAX_RTO,
             initial_rto: int = INITIAL_RTO) -> int:
    if not est.initialized:
        return initial_rto
    return min(max(est.srtt + 4 * est.rttvar, min_rto), max_rto)


@dataclass
class TcpParams:
    mss: int = MSS
    send_buffer_cap: int = SEND_BUFFER_BYTES
    rwnd: int = RWND_BYTES
    initial_cwnd: int = INITIAL_CWND
    initial_ssthresh: int = RWND_BYTES
    min_rto: int = MIN_RTO
    max_rto: int = MAX_RTO
    initial_rto: int = INITIAL_RTO


class OwnCongestionState:
    """Per-connection Reno state used in standard mode."""

    def __init__(self, params: TcpParams | None = None):
        p = params or TcpParams()
        self.params = p
        self.cwnd = p.initial_cwnd
        self.ssthresh = p.initial_ssthresh
        self.est = RttEstimator()
        self.base_rto = p.initial_rto
        self.backoff_exponent = 0

    @property
    def srtt(self) -> int:
        return self.est.srtt

    @property
    def rttvar(self) -> int:
        return self.est.rttvar

    @property
    def rto(self) -> int:
        return min(self.base_rto << self.backoff_exponent, self.params.max_rto)

    def window(self, tcb: Tcb) -> int:
        return self.cwnd

    def on_ack(self, tcb: Tcb, acked: int) -> None:
        mss = self.params.mss
        if self.cwnd < self.ssthresh:
            self.cwnd += min(acked, mss)
        else:
            self.cwnd += max(1, mss * mss // self.cwnd)

    def on_loss(self, tcb: Tcb, flight: int) -> None:
        mss = self.params.mss
        self.ssthresh = max(flight // 2, 2 * mss)
        self.cwnd = self.ssthresh + 3 * mss

    def on_recovery_exit(self, tcb: Tcb) -> None:
        self.cwnd = self.ssthresh

    def on_timeout(self, tcb: Tcb, flight: int) -> None:
        mss = self.params.mss
        self.ssthresh = max(flight // 2, 2 * mss)
        self.cwnd = mss
        if self.rto < self.params.max_rto:
            self.backoff_exponent += 1

    def on_rtt_sample(self, tcb: Tcb, sample: int) -> None:
        p = self.params
        self.est = update_rtt(self.est, sample)
        self.base_rto = rto_from(self.est, p.min_rto, p.max_rto, p.initial_rto)
        self.backoff_exponent = 0


class SegRecord:
    __slots__ = ("start", "end", "state", "sent_at", "retx", "lost_by", "epoch")

    def __init__(self, start: int, end: int, sent_at: int):
        self.start = start
        self.end = end
        self.state = IN_PIPE
        self.sent_at = sent_at
        self.retx = False
        self.lost_by = 0
        self.epoch = -1


_start_key = attrgetter("start")


class Tcb:
    """One endpoint of a connection: sender of its stream, receiver of the peer's."""

    def __init__(self, sim: Simulator, conn_id, local: str, remote: str, net,
                 cc=None, params: TcpParams | None = None):
        self.sim = sim
        self.conn_id = conn_id
        self.local = local
        self.remote = remote
        self.net = net
        self.params = params or TcpParams()
        self.cc = cc if cc is not None else OwnCongestionState(self.params)
        self.open = True

        # sender
        self.snd_una = 0
        self.snd_nxt = 0
        self.snd_max = 0
        self.app_end = 0
        self._segs: list[SegRecord] = []
        self._head = 0
        self._rtx_idx = 0
        self._fack_idx = 0
        self.fack = 0
        self.pipe = 0
        self.sacked_bytes = 0
        self.dupack_count = 0
        self.in_recovery = False
        self.recovery_point = 0
        # Highest byte sent when the last timeout fired: duplicate acks for
        # data sent before a timeout must not start a fast retransmit.
        self.recover = 0
        self._epoch = 0
        self._rto_deadline: int | None = None
        self._rto_armed_at = 0
        self._rto_event = None

        # receiver
        self.rcv_nxt = 0
        self._ooo: list[list[int]] = []
        self._sack_order: list[list[int]] = []  # ooo blocks, most recently reported first
        self.delivered_bytes = 0

        # callbacks into the session layer
        self.on_deliver = None     # on_deliver(tcb, nbytes)
        self.on_send_space = None  # on_send_space(tcb)

        # counters
        self.segments_sent = 0
        self.bytes_sent = 0
        self.fast_retransmits = 0     # retransmitted segments marked lost by SACK recovery
        self.timeout_retransmits = 0  # retransmitted segments marked lost by an RTO
        self.recoveries = 0
        self.timeouts = 0
        self.rtt_samples = 0
        self.send_log: list | None = None   # (time, seq, len, is_retx) when enabled
        self.cwnd_log: list | None = None   # (time, ack, window) after every new-data ack
        self.rtt_log: list | None = None    # (time, seq_end, was_retransmitted) per RTT sample

    # -- sender side --------------------------------------------------------

    @property
    def retransmit_count(self) -> int:
        return self.fast_retransmits + self.timeout_retransmits

    @property
    def flight(self) -> int:
        return self.pipe

    @property
    def buffered(self) -> int:
        return self.app_end - self.snd_una

    def effective_cwnd(self) -> int:
        return self.cc.window(self)

    def app_send(self, nbytes: int) -> int:
        if not self.open:
            raise ConnectionClosed(f"connection {self.conn_id} at {self.local} is closed")
        free = self.params.send_buffer_cap - (self.app_end - self.snd_una)
        accepted = nbytes if nbytes < free else max(free, 0)
        if accepted:
            self.app_end += accepted
            self.try_send()
        return accepted

    def allowed_window(self) -> int:
        wnd = self.cc.window(self)
        if wnd > self.params.rwnd:
            wnd = self.params.rwnd
        return max(0, wnd - self.pipe)

    def _next_lost(self) -> SegRecord | None:
        segs = self._segs
        i = max(self._rtx_idx, self._head)
        n = len(segs)
        while i < n and segs[i].state != LOST:
            i += 1
        self._rtx_idx = i
        return segs[i] if i < n else None

    def try_send(self) -> None:
        params = self.params
        cc = self.cc
        rwnd = params.rwnd
        mss = params.mss
        sent = False
        while True:
            wnd = cc.window(self)
            if wnd > rwnd:
                wnd = rwnd
            avail = wnd - self.pipe
            if avail <= 0:
                break
            rec = self._next_lost() if self._rtx_idx < len(self._segs) else None
            if rec is not None:
                if rec.end - rec.start > avail:
                    break
                self._retransmit(rec)
                sent = True
                continue
            unsent = self.app_end - self.snd_max
            if unsent <= 0:
                break
            n = mss if unsent > mss else unsent
            if n > avail:
                break
            rec = SegRecord(self.snd_max, self.snd_max + n, self.sim.now)
            self._segs.append(rec)
            self.snd_max = rec.end
            if self.snd_nxt < rec.end:
                self.snd_nxt = rec.end
            self.pipe += n
            self._emit(rec, False)
            sent = True
        if sent and self._rto_deadline is None:
            self._arm_timer(self.sim.now + cc.rto)

    def _retransmit(self, rec: SegRecord) -> None:
        rec.state = IN_PIPE
        rec.retx = True
        rec.epoch = self._epoch
        rec.sent_at = self.sim.now
        self.pipe += rec.end - rec.start
        if rec.lost_by == BY_TIMEOUT:
            self.timeout_retransmits += 1
        else:
            self.fast_retransmits += 1
        if self.snd_nxt < rec.end:
            self.snd_nxt = rec.end
        self._emit(rec, True)

    def _emit(self, rec: SegRecord, is_retx: bool) -> None:
        n = rec.end - rec.start
        self.segments_sent += 1
        self.bytes_sent += n
        if self.send_log is not None:
            self.send_log.append((self.sim.now, rec.start, n, is_retx))
        seg = Segment(self.conn_id, rec.start, n, 0, (), FLAG_DATA)
        self.net.send(Packet(self.local, self.remote, n + HEADER_BYTES, seg))

    def _mark_lost(self, rec: SegRecord, cause: int) -> None:
        if rec.state == IN_PIPE:
            self.pipe -= rec.end - rec.start
        elif rec.state == SACKED:
            self.sacked_bytes -= rec.end - rec.start
        rec.state = LOST
        rec.lost_by = cause

    def on_ack(self, seg: Segment) -> None:
        ack = seg.ack
        advanced = False
        if ack > self.snd_max:
            raise ProtocolViolation(
                f"conn {self.conn_id}@{self.local}: ack {ack} beyond snd_max {self.snd_max}")
        if ack < self.snd_una:
            return
        newly_sacked = self._process_sack(seg.sack_blocks) if seg.sack_blocks else 0
        cc = self.cc
        if ack > self.snd_una:
            advanced = True
            newly = ack - self.snd_una
            segs = self._segs
            i = self._head
            n = len(segs)
            karn_ok = True
            last = None
            while i < n and segs[i].end <= ack:
                rec = segs[i]
                if rec.state == IN_PIPE:
                    self.pipe -= rec.end - rec.start
                elif rec.state == SACKED:
                    self.sacked_bytes -= rec.end - rec.start
                if rec.retx:
                    karn_ok = False
                last = rec
                i += 1
            self._head = i
            if i > 512 and i * 2 > n:
                del segs[:i]
                self._rtx_idx = max(0, self._rtx_idx - i)
                self._fack_idx = max(0, self._fack_idx - i)
                self._head = 0
            self.snd_una = ack
            if self.snd_nxt < ack:
                self.snd_nxt = ack
            if self.fack < ack:
                self.fack = ack
            if karn_ok and last is not None:
                self.rtt_samples += 1
                if self.rtt_log is not None:
                    self.rtt_log.append((self.sim.now, last.end, last.retx))
                cc.on_rtt_sample(self, self.sim.now - last.sent_at)
            if self.in_recovery:
                if ack >= self.recovery_point:
                    self.in_recovery = False
                    self.dupack_count = 0
                    cc.on_recovery_exit(self)
            else:
                self.dupack_count = 0
                cc.on_ack(self, newly)
            if self.cwnd_log is not None:
                self.cwnd_log.append((self.sim.now, ack, cc.window(self)))
            if self.snd_max > self.snd_una:
                self._arm_timer(self.sim.now + cc.rto)
            else:
                self._rto_deadline = None
        elif self.snd_max > self.snd_una and not seg.flags & FLAG_DATA:
            self.dupack_count += 1
            if (not self.in_recovery and self.dupack_count >= DUPACK_THRESHOLD
                    and self.snd_una >= self.recover and not self._head_retx_in_flight()):
                self._enter_recovery()
                newly_sacked = 0
        if self.in_recovery and newly_sacked:
            self._fack_mark()
        self.try_send()
        if advanced and self.on_send_space is not None:
            self.on_send_space(self)

    def _process_sack(self, blocks) -> int:
        segs = self._segs
        head = self._head
        n = len(segs)
        newly = 0
        for start, end in blocks:
            if end <= self.snd_una:
                continue
            i = bisect_left(segs, start, head, n, key=_start_key)
            while i < n:
                rec = segs[i]
                if rec.end > end:
                    break
                if rec.state != SACKED:
                    ln = rec.end - rec.start
                    if rec.state == IN_PIPE:
                        self.pipe -= ln
                    rec.state = SACKED
                    self.sacked_bytes += ln
                    newly += ln
                i += 1
            if end > self.fack:
                self.fack = end
        return newly

    def _head_retx_in_flight(self) -> bool:
        """True while the head's retransmission is younger than one srtt.

        Duplicate acks arriving then were sent before the retransmission
        reached the receiver, so they are not fresh evidence of loss.
        """
        first = self._segs[self._head]
        return (first.retx and first.state == IN_PIPE
                and self.sim.now - first.sent_at < self.cc.srtt)

    def _enter_recovery(self) -> None:
        self.cc.on_loss(self, self.pipe)
        self.in_recovery = True
        self.recovery_point = self.snd_max
        self.recoveries += 1
        self._epoch += 1
        self._fack_idx = self._head
        first = self._segs[self._head]
        if first.state != SACKED:
            self._mark_lost(first, BY_RECOVERY)
        self._fack_mark()
        if first.state == LOST:
            self._retransmit(first)

    def _fack_mark(self) -> None:
        segs = self._segs
        i = max(self._fack_idx, self._head)
        n = len(segs)
        fack = self.fack
        epoch = self._epoch
        while i < n:
            rec = segs[i]
            if rec.end > fack:
                break
            if rec.state == IN_PIPE and rec.epoch != epoch:
                self._mark_lost(rec, BY_RECOVERY)
                if i < self._rtx_idx:
                    self._rtx_idx = i
            i += 1
        self._fack_idx = i

    def _arm_timer(self, deadline: int) -> None:
        self._rto_armed_at = self.sim.now
        self._set_deadline(deadline)

    def retime(self) -> None:
        """Re-aim a running retransmission timer after the RTO changed elsewhere.

        Used by shared congestion state: when another connection's RTT sample
        changes the common RTO, a pending timer expires at (time armed + new RTO).
        """
        if self._rto_deadline is None:
            return
        deadline = self._rto_armed_at + self.cc.rto
        if deadline < self.sim.now:
            deadline = self.sim.now
        if deadline != self._rto_deadline:
            self._set_deadline(deadline)

    def _set_deadline(self, deadline: int) -> None:
        self._rto_deadline = deadline
        ev = self._rto_event
        if ev is not None and not ev.cancelled:
            if ev.fire_at <= deadline:
                return
            self.sim.cancel(ev)
        self._rto_event = self.sim.schedule(deadline, self._on_timer)

    def _on_timer(self) -> None:
        self._rto_event = None
        deadline = self._rto_deadline
        if deadline is None:
            return
        if self.sim.now < deadline:
            self._rto_event = self.sim.schedule(deadline, self._on_timer)
            return
        self._rto_deadline = None
        self.on_timeout()

    def on_timeout(self) -> None:
        if self.snd_max == self.snd_una:
            return
        self.cc.on_timeout(self, self.pipe)
        self.timeouts += 1
        self.recover = self.snd_max
        self._epoch += 1
        segs = self._segs
        for i in range(self._head, len(segs)):
            rec = segs[i]
            rec.state = LOST
            rec.lost_by = BY_TIMEOUT
        self.pipe = 0
        self.sacked_bytes = 0
        self._rtx_idx = self._head
        self.fack = self.snd_una
        self.snd_nxt = self.snd_una
        self.in_recovery = False
        self.dupack_count = 0
        self.try_send()
        self._arm_timer(self.sim.now + self.cc.rto)

    # -- receiver side ------------------------------------------------------

    def on_segment_arrival(self, seg: Segment) -> Segment:
        """Accept a data segment from the peer and send back an immediate ack."""
        start = seg.seq
        end = start + seg.len
        ooo = self._ooo
        latest = None
        if end <= self.rcv_nxt:
            pass
        elif start <= self.rcv_nxt:
            old = self.rcv_nxt
            nxt = end
            while ooo and ooo[0][0] <= nxt:
                if ooo[0][1] > nxt:
                    nxt = ooo[0][1]
                ooo.pop(0)
            self.rcv_nxt = nxt
            self.delivered_bytes += nxt - old
            if self.on_deliver is not None:
                self.on_deliver(self, nxt - old)
        else:
            latest = self._insert_ooo(start, end)
        blocks = ()
        if ooo:
            # First the block holding this segment, then the blocks reported
            # most recently, so each block is repeated in several acks.
            live = {id(b) for b in ooo}
            order = [b for b in self._sack_order if id(b) in live and b is not latest]
            if latest is not None:
                order.insert(0, latest)
            if len(order) < len(ooo):
                seen = {id(b) for b in order}
                order.extend(b for b in reversed(ooo) if id(b) not in seen)
            self._sack_order = order
            blocks = tuple((b[0], b[1]) for b in order[:MAX_SACK_BLOCKS])
        else:
            self._sack_order = []
        ack = Segment(self.conn_id, 0, 0, self.rcv_nxt, blocks, FLAG_ACK)
        self.net.send(Packet(self.local, self.remote, ACK_BYTES, ack))
        return ack

    def _insert_ooo(self, start: int, end: int) -> list[int]:
        ooo = self._ooo
        i = 0
        while i < len(ooo) and ooo[i][1] < start:
            i += 1
        block = [start, end]
        while i < len(ooo) and ooo[i][0] <= block[1]:
            other = ooo.pop(i)
            block[0] = min(block[0], other[0])
            block[1] = max(block[1], other[1])
        ooo.insert(i, block)
        return block

    def receive(self, seg: Segment) -> None:
        """Network entry point: dispatch data to the receiver, acks to the sender."""
        if seg.flags & FLAG_DATA:
            self.on_segment_arrival(seg)
        else:
            self.on_ack(seg)


def allowed_window(tcb: Tcb) -> int:
    return tcb.allowed_window()
