"""End-to-end acceptance checks at desk scale.

64MB sequential transfers over 4 connections, delays {0, 2, 4, 10} ms, 2.7%
loss, seeds 1-5. Each check prints a PASS/FAIL line; a summary of all of them
appears at the end of the pytest run.
"""
import statistics

import pytest

from conftest import Pair, record_criterion
from fairsim.cli import _run_one
from fairsim.config import ExperimentConfig
from fairsim.ensemble import AGGREGATE_ONE_FLOW, REDUCE_AGGREGATE, REDUCE_MEMBER
from fairsim.experiment import run_cell
from fairsim.tcp import MSS, TcpParams

DELAYS = (0, 2, 4, 10)
LOSSY_DELAYS = (2, 4, 10)
SEEDS = (1, 2, 3, 4, 5)
MODES = ("standard", "fair")
POSTMARK = dict(postmark_files=500, postmark_transactions=1250)


def grid(cells, workload, delays=DELAYS, **overrides):
    return {(mode, d, s): cells.get(mode, d, s, workload=workload, **overrides)
            for mode in MODES for d in delays for s in SEEDS}


def wins(g, delay, metric, better):
    """Seeds at ``delay`` where fair's ``metric`` beats standard's under ``better``."""
    return sum(better(g["fair", delay, s][metric], g["standard", delay, s][metric]) for s in SEEDS)


def seed_mean(g, mode, delay, metric):
    return statistics.fmean(g[mode, delay, s][metric] for s in SEEDS)


# -- 1. Reno oracle -----------------------------------------------------------

def reno_calculator(acks, initial_cwnd, ssthresh, mss=MSS):
    """Expected window after each cumulative ack, from the ack sequence alone."""
    w, prev, out = initial_cwnd, 0, []
    for ack in acks:
        newly = ack - prev
        prev = ack
        w = w + min(newly, mss) if w < ssthresh else w + max(1, mss * mss // w)
        out.append(w)
    return out


def test_c01_reno_window_matches_closed_form():
    ssthresh = 32 * MSS
    details, ok = [], True
    for delay in (0, 4):
        p = Pair(delay_ms=delay, queue=10**6, params=TcpParams(initial_ssthresh=ssthresh))
        p.sender.cwnd_log = []
        p.transfer(4_000_000)
        log = p.sender.cwnd_log
        acks = [a for _, a, _ in log]
        got = [w for _, _, w in log]
        expected = reno_calculator(acks, 2 * MSS, ssthresh)
        # in slow start the k-th full-segment ack leaves exactly 2 + k segments
        slow = [w for w in expected if w <= ssthresh]
        closed = [(2 + k) * MSS for k in range(1, len(slow) + 1)]
        ok = ok and (got == expected and slow == closed and p.sender.retransmit_count == 0
                     and p.receiver.delivered_bytes == 4_000_000)
        details.append(f"{delay}ms: {len(log)} acks, final window {got[-1]} B")
    record_criterion(1, ok, "windows byte-exact per ack event; " + "; ".join(details))
    assert ok


# -- 2. degeneracy ------------------------------------------------------------

def test_c02_single_member_ensemble_sends_like_reno():
    mismatches = []
    for reduction, delays in ((REDUCE_MEMBER, DELAYS), (REDUCE_AGGREGATE, (4,))):
        cfg = ExperimentConfig(n_conns=1, growth_mode=AGGREGATE_ONE_FLOW,
                               reduction_mode=reduction)
        for delay in delays:
            logs = {}
            for mode in MODES:
                r = run_cell(cfg, mode, delay, 1, trace_sends=True)
                logs[mode] = [t.send_log for s in r.sessions for t in s.all_tcbs()]
            if logs["fair"] != logs["standard"] or not logs["fair"][0]:
                mismatches.append((reduction, delay))
    record_criterion(2, not mismatches,
                     f"send traces identical at delays {DELAYS} (member reduction) and 4ms (aggregate)"
                     if not mismatches else f"traces differ for {mismatches}")
    assert not mismatches


# -- 3. fairness ---------------------------------------------------------------

def test_c03_shares_within_one_segment(cells):
    fair = [grid(cells, "seq_write")[("fair", d, s)] for d in DELAYS for s in SEEDS]
    fair += [grid(cells, "seq_read")[("fair", d, s)] for d in DELAYS for s in SEEDS]
    spread = max(c["max_share_spread_seg"] for c in fair)
    ok = spread <= 1.0
    record_criterion(3, ok, f"worst share spread over {len(fair)} fair cells: {spread:.3f} MSS")
    assert ok


# -- 4. window-difference signature -------------------------------------------

def test_c04_window_difference_signature(cells):
    g = {(m, s): cells.get(m, 4, s, workload="seq_write", n_conns=2) for m in MODES for s in SEEDS}
    std_hits = sum(g["standard", s]["diff01_sd_seg"] > max(g["standard", s]["conn0_cwnd_sd_seg"],
                                                          g["standard", s]["conn1_cwnd_sd_seg"])
                   for s in SEEDS)
    fair_sd = max(g["fair", s]["diff01_sd_seg"] for s in SEEDS)
    ok = std_hits >= 4 and fair_sd <= 1.0
    record_criterion(4, ok, f"standard difference SD beats both per-conn SDs in {std_hits}/5 seeds; "
                            f"fair difference SD at most {fair_sd:.3f} MSS")
    assert std_hits >= 4
    assert fair_sd <= 1.0


# -- 5. aggregate stability ---------------------------------------------------

def test_c05_aggregate_window_steadier_under_fair(cells):
    g = grid(cells, "seq_write")
    hits = {d: wins(g, d, "aggr_cwnd_pct_sd", lambda f, s: f < s) for d in LOSSY_DELAYS}
    ok = all(h >= 4 for h in hits.values())
    detail = ", ".join(f"{d}ms {hits[d]}/5 (%SD {seed_mean(g, 'standard', d, 'aggr_cwnd_pct_sd'):.0f}"
                       f"->{seed_mean(g, 'fair', d, 'aggr_cwnd_pct_sd'):.0f})" for d in LOSSY_DELAYS)
    record_criterion(5, ok, detail)
    assert ok


# -- 6. retransmissions -------------------------------------------------------

def test_c06_fewer_retransmissions_under_fair(cells):
    g = grid(cells, "seq_write")
    hits = {d: wins(g, d, "retx_total", lambda f, s: f <= s) for d in DELAYS}
    ok = all(h >= 4 for h in hits.values())
    detail = ", ".join(f"{d}ms {hits[d]}/5 ({seed_mean(g, 'standard', d, 'retx_total'):.0f}"
                       f"->{seed_mean(g, 'fair', d, 'retx_total'):.0f})" for d in DELAYS)
    record_criterion(6, ok, detail)
    assert ok, f"fair <= standard retransmissions per delay: {hits}"


# -- 7. turnaround dispersion -------------------------------------------------

def test_c07_write_turnaround_tighter_under_fair(cells):
    g = grid(cells, "seq_write")
    hits = {d: wins(g, d, "write_tat_sd_ms", lambda f, s: f < s) for d in LOSSY_DELAYS}
    ok = all(h >= 4 for h in hits.values())
    detail = ", ".join(f"{d}ms {hits[d]}/5 (SD {seed_mean(g, 'standard', d, 'write_tat_sd_ms'):.0f}"
                       f"->{seed_mean(g, 'fair', d, 'write_tat_sd_ms'):.0f}ms)" for d in LOSSY_DELAYS)
    record_criterion(7, ok, detail)
    assert ok


# -- 8. throughput ordering and trends ----------------------------------------

def test_c08_throughput_ordering(cells):
    w = grid(cells, "seq_write")
    r = grid(cells, "seq_read")

    def tput(g, mode, d):
        return seed_mean(g, mode, d, "throughput_MBps")

    def gain(g, d):
        return tput(g, "fair", d) / tput(g, "standard", d) - 1

    a = all(tput(w, "fair", d) >= tput(w, "standard", d) for d in LOSSY_DELAYS)
    std = [tput(w, "standard", d) for d in DELAYS]
    b = all(x > y for x, y in zip(std, std[1:]))
    c = all(tput(r, m, d) < tput(w, m, d) for m in MODES for d in DELAYS)
    dd = all(gain(r, d) < gain(w, d) for d in LOSSY_DELAYS)
    ok = a and b and c and dd
    detail = (f"(a) {a} (b) {b} standard write MB/s {[round(x, 2) for x in std]} (c) {c} "
              f"(d) {dd} gains write/read "
              + ", ".join(f"{d}ms {100 * gain(w, d):.0f}%/{100 * gain(r, d):.0f}%"
                          for d in LOSSY_DELAYS))
    record_criterion(8, ok, detail)
    assert a, "fair write throughput below standard"
    assert b, f"standard throughput not strictly decreasing: {std}"
    assert c, "reads not slower than writes"
    assert dd, "read improvement not smaller than write improvement"


# -- 10. multiprocess amplification -------------------------------------------

def test_c10_multiprocess_gains_more(cells):
    gains = {}
    for workload in ("postmark", "postmark_multi"):
        g = grid(cells, workload, LOSSY_DELAYS, **POSTMARK)
        for d in LOSSY_DELAYS:
            std = seed_mean(g, "standard", d, "elapsed_s")
            fair = seed_mean(g, "fair", d, "elapsed_s")
            gains[workload, d] = (std - fair) / std
    per_delay = {d: gains["postmark_multi", d] >= gains["postmark", d] for d in LOSSY_DELAYS}
    ok = all(per_delay.values())
    detail = ", ".join(f"{d}ms multi {100 * gains['postmark_multi', d]:.1f}% vs single "
                       f"{100 * gains['postmark', d]:.1f}%" for d in LOSSY_DELAYS)
    record_criterion(10, ok, detail)
    assert ok, f"multiprocess improvement below single-process at: " \
               f"{[d for d, v in per_delay.items() if not v]}"


# -- 9. conservation and determinism ------------------------------------------

def test_c09_conservation_and_determinism(cells, tmp_path):
    # make sure at least one long postmark cell is present for the loss-rate check
    cells.get("standard", 2, 1, workload="postmark_multi", **POSTMARK)
    everything = cells.all()
    broken = [key for key, c in everything
              if not (c["conservation_ok"] and c["delivered_eq_sent"]
                      and c["records"] == c["unique_records"] == c["submitted"] == c["completed"]
                      and c["allegiance_violations"] == 0)]
    big = [c for _, c in everything if c["lossy_packets"] >= 100_000]
    rates = [c["loss_rate"] for c in big]
    rates_ok = bool(big) and all(abs(x - 0.027) <= 0.003 for x in rates)

    cfg = ExperimentConfig()
    outputs = []
    for name in ("first", "second"):
        _run_one((cfg, "fair", 4, 1, str(tmp_path / name)))
        cell_dir = next((tmp_path / name).iterdir())
        outputs.append({p.name: p.read_bytes() for p in sorted(cell_dir.iterdir())})
    identical = outputs[0] == outputs[1] and len(outputs[0]) == 4

    ok = not broken and rates_ok and identical
    detail = (f"{len(everything)} cells conserve bytes and commands ({len(broken)} broken); "
              f"rerun byte-identical: {identical}; loss rate over {len(big)} cells with >=1e5 "
              f"packets in [{min(rates, default=0):.4f}, {max(rates, default=0):.4f}]")
    record_criterion(9, ok, detail)
    assert not broken, broken
    assert identical
    assert big
    assert rates_ok, rates


def test_every_cell_fits_the_runtime_budget(cells):
    walls = [(c["wall_s"], key) for key, c in cells.all()]
    worst = max(walls)
    print(f"{len(walls)} cells, slowest {worst[0]:.2f}s: {worst[1]}, "
          f"total {sum(w for w, _ in walls):.0f}s")
    assert worst[0] < 10.0
