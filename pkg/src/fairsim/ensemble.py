"""Fair-TCP: one Ensemble Control Block (ECB) per host pair.

Connections that join an ensemble are stripped of their own congestion
window, slow-start threshold and RTT estimator; they keep only reliability
state and a reference to the shared block. The block divides its window
evenly among members and takes the most recently reported srtt/rttvar.

Window arithmetic is in bytes. Shares are handed out in whole-MSS granules:
``granules // ref_cnt`` each, one extra granule to the lowest-ranked
``granules % ref_cnt`` members, and the sub-MSS residue to the next member in
line. Shares therefore sum to the aggregate exactly and differ by at most one
MSS. Every share is floored at one MSS.
"""
from __future__ import annotations

from dataclasses import dataclass

from .tcp import MSS, RttEstimator, TcpParams, rto_from, update_rtt

PER_MEMBER = "per_member"
AGGREGATE_ONE_FLOW = "aggregate_one_flow"
GROWTH_MODES = (PER_MEMBER, AGGREGATE_ONE_FLOW)

# How a member's loss or timeout reduces the aggregate.
REDUCE_AGGREGATE = "aggregate"  # the whole ensemble halves / restarts
REDUCE_MEMBER = "member"        # only the reporting member's part is cut
REDUCTION_MODES = (REDUCE_AGGREGATE, REDUCE_MEMBER)


class EnsembleError(RuntimeError):
    """Membership misuse: double join, leave by a stranger, etc."""


@dataclass
class Share:
    cwnd: int
    ssthresh: int
    srtt: int
    rttvar: int


class Ecb:
    def __init__(self, host_pair, cwnd: int, ssthresh: int, est: RttEstimator,
                 params: TcpParams, growth_mode: str = PER_MEMBER,
                 reduction_mode: str = REDUCE_AGGREGATE):
        if growth_mode not in GROWTH_MODES:
            raise ValueError(f"unknown growth_mode {growth_mode!r}")
        if reduction_mode not in REDUCTION_MODES:
            raise ValueError(f"unknown reduction_mode {reduction_mode!r}")
        self.host_pair = host_pair
        self.snd_cwnd = cwnd
        self.snd_ssthresh = ssthresh
        self.est = est
        self.params = params
        self.rto = rto_from(est, params.min_rto, params.max_rto, params.initial_rto)
        self.growth_mode = growth_mode
        self.reduction_mode = reduction_mode
        self.members: dict = {}      # conn_id -> Tcb
        self._rank: dict = {}        # conn_id -> position in ascending conn_id order
        self.last_reduction_at: int | None = None
        self.last_reduction_by = None
        self.reductions = 0
        self.coalesced = 0
        self.accesses = 0
        self.events: list[tuple] = []  # (time, kind, conn_id, cwnd_after)

    @property
    def ref_cnt(self) -> int:
        return len(self.members)

    @property
    def srtt(self) -> int:
        return self.est.srtt

    @property
    def rttvar(self) -> int:
        return self.est.rttvar

    def _rerank(self) -> None:
        self._rank = {cid: i for i, cid in enumerate(sorted(self.members))}

    def aggregate_flight(self) -> int:
        return sum(t.pipe for t in self.members.values())

    def __repr__(self) -> str:
        return (f"Ecb({self.host_pair}, cwnd={self.snd_cwnd}, ssthresh={self.snd_ssthresh}, "
                f"ref_cnt={self.ref_cnt})")


class EnsembleRegistry:
    """At most one Ecb per (local host, remote host)."""

    def __init__(self, params: TcpParams | None = None, growth_mode: str = PER_MEMBER,
                 reduction_mode: str = REDUCE_AGGREGATE):
        if growth_mode not in GROWTH_MODES:
            raise ValueError(f"unknown growth_mode {growth_mode!r}")
        if reduction_mode not in REDUCTION_MODES:
            raise ValueError(f"unknown reduction_mode {reduction_mode!r}")
        self.params = params or TcpParams()
        self.growth_mode = growth_mode
        self.reduction_mode = reduction_mode
        self.ecbs: dict = {}
        self.created: list[Ecb] = []

    def get(self, host_pair) -> Ecb | None:
        return self.ecbs.get(host_pair)

    def total_accesses(self) -> int:
        return sum(e.accesses for e in self.created)


class EnsembleMember:
    """Congestion-state stand-in installed on a Tcb that belongs to an ensemble."""

    def __init__(self, ecb: Ecb, conn_id):
        self.ecb = ecb
        self.conn_id = conn_id
        self.backoff_exponent = 0
        # After its own timeout a member slow-starts back up to its share
        # rather than bursting a full share of go-back-N retransmissions.
        self.restart_cwnd: int | None = None

    @property
    def cwnd(self) -> int:
        return share_cwnd(self.ecb, self.conn_id)

    @property
    def srtt(self) -> int:
        return self.ecb.srtt

    @property
    def rto(self) -> int:
        ecb = self.ecb
        return min(ecb.rto << self.backoff_exponent, ecb.params.max_rto)

    def window(self, tcb) -> int:
        w = share_cwnd(self.ecb, self.conn_id)
        if self.restart_cwnd is not None and self.restart_cwnd < w:
            w = self.restart_cwnd
        if tcb.in_recovery:
            w += 3 * self.ecb.params.mss
        return w

    def on_ack(self, tcb, acked: int) -> None:
        on_member_ack(self.ecb, self.conn_id, acked)
        if self.restart_cwnd is not None:
            mss = self.ecb.params.mss
            self.restart_cwnd += acked if acked < mss else mss
            if self.restart_cwnd >= share_cwnd(self.ecb, self.conn_id):
                self.restart_cwnd = None

    def on_loss(self, tcb, flight: int) -> None:
        on_member_loss(self.ecb, self.conn_id, flight, now=tcb.sim.now)

    def on_recovery_exit(self, tcb) -> None:
        pass

    def on_timeout(self, tcb, flight: int) -> None:
        on_member_timeout(self.ecb, self.conn_id, flight, now=tcb.sim.now)
        self.restart_cwnd = self.ecb.params.mss
        if self.rto < self.ecb.params.max_rto:
            self.backoff_exponent += 1

    def on_rtt_sample(self, tcb, sample: int) -> None:
        ecb = self.ecb
        old_rto = ecb.rto
        est = update_rtt(ecb.est, sample)
        report_rtt(ecb, est.srtt, est.rttvar)
        self.backoff_exponent = 0
        # A valid sample for the shared estimator ends every member's backoff;
        # running timers follow the new RTO.
        for cid, tcb in ecb.members.items():
            if cid != self.conn_id:
                cc = tcb.cc
                if cc.backoff_exponent or ecb.rto != old_rto:
                    cc.backoff_exponent = 0
                    tcb.retime()


def ensemble_join(registry: EnsembleRegistry, tcb) -> Ecb:
    """Add ``tcb`` to the ensemble for its host pair, creating one if needed."""
    if isinstance(tcb.cc, EnsembleMember):
        raise EnsembleError(f"connection {tcb.conn_id} already belongs to an ensemble")
    key = (tcb.local, tcb.remote)
    ecb = registry.ecbs.get(key)
    if ecb is None:
        own = tcb.cc
        ecb = Ecb(key, own.cwnd, own.ssthresh, own.est, registry.params,
                  registry.growth_mode, registry.reduction_mode)
        registry.ecbs[key] = ecb
        registry.created.append(ecb)
    elif tcb.conn_id in ecb.members:
        raise EnsembleError(f"connection id {tcb.conn_id} already in ensemble {key}")
    ecb.accesses += 1
    ecb.members[tcb.conn_id] = tcb
    ecb._rerank()
    # keep room for the one-MSS floor of every share
    ecb.snd_cwnd = max(ecb.snd_cwnd, ecb.ref_cnt * ecb.params.mss)
    tcb.cc = EnsembleMember(ecb, tcb.conn_id)
    return ecb


def ensemble_leave(registry: EnsembleRegistry, tcb) -> None:
    member = tcb.cc
    if not isinstance(member, EnsembleMember) or tcb.conn_id not in member.ecb.members:
        raise EnsembleError(f"connection {tcb.conn_id} is not an ensemble member")
    ecb = member.ecb
    ecb.accesses += 1
    del ecb.members[tcb.conn_id]
    if not ecb.members:
        # no caching of ensemble state once the last member is gone
        if registry.ecbs.get(ecb.host_pair) is ecb:
            del registry.ecbs[ecb.host_pair]
    else:
        ecb._rerank()
        ecb.snd_cwnd = max(ecb.snd_cwnd, ecb.ref_cnt * ecb.params.mss)
    tcb.cc = None


def share_cwnd(ecb: Ecb, conn_id) -> int:
    mss = ecb.params.mss
    n = len(ecb.members)
    granules, residue = divmod(ecb.snd_cwnd, mss)
    base, extra = divmod(granules, n)
    rank = ecb._rank[conn_id]
    share = base * mss
    if rank < extra:
        share += mss
    elif rank == extra:
        share += residue
    return share if share > mss else mss


def allocate_share(ecb: Ecb, conn_id) -> Share:
    if conn_id not in ecb.members:
        raise EnsembleError(f"connection {conn_id} is not a member of {ecb.host_pair}")
    ecb.accesses += 1
    return Share(share_cwnd(ecb, conn_id), ecb.snd_ssthresh // ecb.ref_cnt,
                 ecb.est.srtt, ecb.est.rttvar)


def on_member_ack(ecb: Ecb, conn_id, newly_acked: int) -> None:
    """Grow the aggregate for one new-data ack from a member."""
    ecb.accesses += 1
    mss = ecb.params.mss
    n = len(ecb.members)
    cwnd = ecb.snd_cwnd
    if cwnd < n * mss:
        cwnd = n * mss
    if cwnd < ecb.snd_ssthresh:
        cwnd += newly_acked if newly_acked < mss else mss
    elif ecb.growth_mode == PER_MEMBER:
        cwnd += max(1, mss * mss * n // cwnd)
    else:
        cwnd += max(1, mss * mss // cwnd)
    ecb.snd_cwnd = cwnd


def _coalesce(ecb: Ecb, conn_id, now: int | None) -> bool:
    """True when this reduction belongs to a congestion event already acted on."""
    if now is None or ecb.last_reduction_at is None or not ecb.est.initialized:
        return False
    return ecb.last_reduction_by != conn_id and now - ecb.last_reduction_at < ecb.est.srtt


def on_member_loss(ecb: Ecb, conn_id, member_flight: int, now: int | None = None) -> bool:
    """Multiplicative decrease after a member's triple-dupack loss.

    Returns False when the reduction was coalesced into a recent one from a
    different member.
    """
    ecb.accesses += 1
    if _coalesce(ecb, conn_id, now):
        ecb.coalesced += 1
        ecb.events.append((now, "coalesced", conn_id, ecb.snd_cwnd))
        return False
    mss = ecb.params.mss
    n = len(ecb.members)
    floor = 2 * n * mss
    if ecb.reduction_mode == REDUCE_AGGREGATE:
        basis = _flight_basis(ecb, conn_id, member_flight)
        ecb.snd_ssthresh = max(basis // 2, floor)
    else:
        total = _flight_basis(ecb, conn_id, member_flight)
        ecb.snd_ssthresh = max(total - (member_flight - member_flight // 2), floor)
    ecb.snd_cwnd = ecb.snd_ssthresh
    ecb.last_reduction_at = now
    ecb.last_reduction_by = conn_id
    ecb.reductions += 1
    ecb.events.append((now, "loss", conn_id, ecb.snd_cwnd))
    return True


def on_member_timeout(ecb: Ecb, conn_id, member_flight: int = 0, now: int | None = None) -> None:
    ecb.accesses += 1
    mss = ecb.params.mss
    n = len(ecb.members)
    total = _flight_basis(ecb, conn_id, member_flight)
    if ecb.reduction_mode == REDUCE_AGGREGATE:
        ecb.snd_ssthresh = max(total // 2, 2 * n * mss)
        ecb.snd_cwnd = n * mss
    else:
        share = share_cwnd(ecb, conn_id)
        ecb.snd_ssthresh = max(total - (member_flight - member_flight // 2), 2 * n * mss)
        ecb.snd_cwnd = max(ecb.snd_cwnd - (share - mss), n * mss)
    ecb.last_reduction_at = now
    ecb.last_reduction_by = conn_id
    ecb.events.append((now, "timeout", conn_id, ecb.snd_cwnd))


def _flight_basis(ecb: Ecb, conn_id, member_flight: int) -> int:
    """The aggregate window with the reporting member's share replaced by its flight.

    Other members keep their allocation; the reporter contributes what it
    actually had outstanding, as a lone Reno sender would. With one member
    this is exactly that member's flight.
    """
    return ecb.snd_cwnd - share_cwnd(ecb, conn_id) + member_flight


def report_rtt(ecb: Ecb, srtt: int, rttvar: int) -> None:
    """Last writer wins: the ensemble keeps the most recently reported pair."""
    ecb.accesses += 1
    p = ecb.params
    ecb.est = RttEstimator(srtt, rttvar, True)
    ecb.rto = min(max(srtt + 4 * rttvar, p.min_rto), p.max_rto)
