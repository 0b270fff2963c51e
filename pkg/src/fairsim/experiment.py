"""Build and run one simulation cell: (workload, mode, delay, seed)."""
from __future__ import annotations

from dataclasses import dataclass, field

from .config import ExperimentConfig
from .ensemble import EnsembleRegistry
from .iscsi import FAIR, READ, WRITE, DiskModel, Session, Target
from .metrics import (CwndSampler, count_retransmits, summarize, throughput, turnaround_stats,
                      window_difference)
from .netem import NetConfig, Testbed
from .sim_core import MS, SEC, STREAM_WORKLOAD, US, RngStream, Simulator
from .tcp import MSS, TcpParams
from .workload import (PostmarkParams, PostmarkStats, SeqParams, gen_postmark,
                       gen_rewrite_seek, gen_sequential_read, gen_sequential_write,
                       merge_report, start_processes)


@dataclass
class CellResult:
    workload: str
    mode: str
    delay_ms: float
    seed: int
    metrics: dict
    sampler: CwndSampler | None = None
    records: list = field(default_factory=list)
    ecb_rows: list = field(default_factory=list)
    sessions: list = field(default_factory=list)
    testbed: Testbed | None = None
    registry: EnsembleRegistry | None = None
    sim: Simulator | None = None
    processes: list = field(default_factory=list)

    @property
    def name(self) -> str:
        return cell_name(self.workload, self.mode, self.delay_ms, self.seed)


def cell_name(workload: str, mode: str, delay_ms: float, seed: int) -> str:
    return f"{workload}_{mode}_d{delay_ms:g}_s{seed}"


def tcp_params(cfg: ExperimentConfig) -> TcpParams:
    return TcpParams(
        send_buffer_cap=cfg.send_buffer_bytes,
        initial_cwnd=cfg.initial_cwnd_segments * MSS,
        min_rto=int(cfg.min_rto_ms * MS),
        max_rto=int(cfg.max_rto_ms * MS),
        initial_rto=int(cfg.initial_rto_ms * MS),
    )


def _generators(cfg: ExperimentConfig, seed: int):
    w = cfg.workload
    size = cfg.effective_file_size
    stats: list[PostmarkStats] = []
    if w == "seq_write":
        return [gen_sequential_write(SeqParams(size, cfg.block_size_bytes))], stats
    if w == "seq_read":
        return [gen_sequential_read(SeqParams(size, cfg.block_size_bytes))], stats
    if w in ("postmark", "postmark_multi"):
        n = 1 if w == "postmark" else cfg.postmark_processes
        files = max(1, cfg.postmark_files // n)
        txns = cfg.postmark_transactions // n
        gens = []
        for k in range(n):
            params = PostmarkParams(files, cfg.postmark_size_min, cfg.postmark_size_max, txns, n)
            st = PostmarkStats()
            stats.append(st)
            # disjoint lba regions per process
            gens.append(gen_postmark(params, RngStream(seed, STREAM_WORKLOAD + k), st,
                                     lba_base=k * (1 << 32)))
        return gens, stats
    if w == "rewrite":
        return gen_rewrite_seek(size, "rewrite"), stats
    if w == "seek":
        return gen_rewrite_seek(size, "seek", cfg.bonnie_seekers,
                                RngStream(seed, STREAM_WORKLOAD), cfg.bonnie_seeks), stats
    raise ValueError(f"unknown workload {w!r}")


def run_cell(cfg: ExperimentConfig, mode: str, delay_ms: float, seed: int,
             *, trace_sends: bool = False) -> CellResult:
    sim = Simulator()
    net = NetConfig(cfg.bandwidth_bps, delay_ms, cfg.delay_is_one_way, cfg.loss_prob,
                    cfg.queue_capacity_pkts)
    testbed = Testbed(sim, net, seed)
    params = tcp_params(cfg)
    registry = EnsembleRegistry(params, cfg.growth_mode, cfg.reduction_mode) if mode == FAIR else None
    disk = DiskModel(int(cfg.disk_overhead_us * US), cfg.disk_rate_bps,
                     int(cfg.seek_penalty_ms * MS))
    target = Target(sim, disk)
    gens, pm_stats = _generators(cfg, seed)
    n_sessions = 1 if cfg.shared_session else len(gens)
    sessions = [Session(sim, testbed, cfg.n_conns, mode, registry, params, cfg.max_outstanding,
                        target, conn_id_base=k * cfg.n_conns, session_id=k)
                for k in range(n_sessions)]
    if trace_sends:
        for s in sessions:
            for tcb in s.all_tcbs():
                tcb.send_log = []

    side_tcbs = {}
    for s in sessions:
        side_tcbs.update(s.initiator_tcbs if cfg.cwnd_side == "initiator" else s.target_tcbs)
    ecbs = list(registry.ecbs.values()) if registry is not None else []
    sampler = CwndSampler(sim, side_tcbs, int(cfg.sample_ms * MS), ecbs)

    def all_done(_procs):
        sampler.stop()

    sampler.start()
    procs = start_processes(sim, gens, sessions if len(sessions) > 1 else sessions[0], all_done)
    sim.run()

    unfinished = [p.name for p in procs if not p.done]
    if unfinished:
        raise RuntimeError(f"cell {cell_name(cfg.workload, mode, delay_ms, seed)}: "
                           f"processes never finished: {unfinished}")

    report = merge_report(procs)
    records = [r for s in sessions for r in s.records]
    tcbs = [t for s in sessions for t in s.all_tcbs()]
    retx = count_retransmits(tcbs)
    offered, dropped = testbed.loss_counts()
    m: dict = {
        "workload": cfg.workload,
        "mode": mode,
        "delay_ms": delay_ms,
        "seed": seed,
        "elapsed_s": report.elapsed_ns / SEC,
        "bytes_read": report.bytes_read,
        "bytes_written": report.bytes_written,
        "throughput_MBps": (throughput(report.bytes_read + report.bytes_written, report.elapsed_ns)
                            / 1e6 if report.elapsed_ns > 0 else 0.0),
        "read_MBps": report.read_Bps / 1e6,
        "write_MBps": report.write_Bps / 1e6,
        "commands": report.commands,
        "retx_fast": retx.fast,
        "retx_timeout": retx.timeout,
        "retx_total": retx.total,
        "timeouts": sum(t.timeouts for t in tcbs),
        "recoveries": sum(t.recoveries for t in tcbs),
    }
    for direction, label in ((WRITE, "write"), (READ, "read")):
        st = turnaround_stats(records, direction)
        m[f"{label}_tat_mean_ms"] = st.mean if st else None
        m[f"{label}_tat_sd_ms"] = st.sd if st else None
        m[f"{label}_tat_pct_sd"] = st.pct_sd if st else None
    if len(sampler.aggregate):
        agg = summarize([v / MSS for v in sampler.aggregate.values])
        m["aggr_cwnd_mean_seg"] = agg.mean
        m["aggr_cwnd_sd_seg"] = agg.sd
        m["aggr_cwnd_pct_sd"] = agg.pct_sd
    else:
        m["aggr_cwnd_mean_seg"] = m["aggr_cwnd_sd_seg"] = m["aggr_cwnd_pct_sd"] = None
    conn_ids = list(sampler.series)
    if len(conn_ids) >= 2 and len(sampler.aggregate):
        a = sampler.series[conn_ids[0]].scaled(1 / MSS)
        b = sampler.series[conn_ids[1]].scaled(1 / MSS)
        sa, sb = summarize(a), summarize(b)
        _, sd = window_difference(a, b)
        m.update(conn0_cwnd_mean_seg=sa.mean, conn0_cwnd_sd_seg=sa.sd,
                 conn1_cwnd_mean_seg=sb.mean, conn1_cwnd_sd_seg=sb.sd,
                 diff01_mean_seg=sd.mean, diff01_sd_seg=sd.sd)
        m["max_share_spread_seg"] = max(
            (max(s.values[i] for s in sampler.series.values())
             - min(s.values[i] for s in sampler.series.values())) / MSS
            for i in range(len(sampler.aggregate)))
    else:
        for k in ("conn0_cwnd_mean_seg", "conn0_cwnd_sd_seg", "conn1_cwnd_mean_seg",
                  "conn1_cwnd_sd_seg", "diff01_mean_seg", "diff01_sd_seg", "max_share_spread_seg"):
            m[k] = None
    if cfg.workload == "seek":
        seeks = sum(1 for r in records if r.direction == READ)
        m["seeks_per_s"] = seeks * SEC / report.elapsed_ns if report.elapsed_ns else 0.0
    else:
        m["seeks_per_s"] = None
    if pm_stats:
        m["files_created"] = sum(s.files_created for s in pm_stats)
        m["files_deleted"] = sum(s.files_deleted for s in pm_stats)
    else:
        m["files_created"] = m["files_deleted"] = None
    m.update(
        lossy_packets=offered,
        random_drops=dropped,
        loss_rate=dropped / offered if offered else 0.0,
        queue_drops=sum(l.dropped_queue for l in testbed.links.values()),
        submitted=sum(s.submitted for s in sessions),
        completed=sum(s.completed for s in sessions),
        conservation_ok=all(s.conservation_ok() for s in sessions),
        allegiance_violations=sum(s.allegiance_violations for s in sessions),
        ecb_accesses=registry.total_accesses() if registry is not None else 0,
        events=sim.processed,
    )
    return CellResult(cfg.workload, mode, delay_ms, seed, m, sampler, records,
                      sampler.ecb_rows, sessions, testbed, registry, sim, procs)
