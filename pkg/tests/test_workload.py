import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairsim import workload
from fairsim.iscsi import PDU_HEADER_BYTES, READ, WRITE, DiskModel, ScsiCommand, Session
from fairsim.netem import NetConfig, Testbed
from fairsim.sim_core import SEC, RngStream, Simulator
from fairsim.tcp import MSS
from fairsim.workload import (AsyncIO, Drain, PostmarkParams, PostmarkStats, SeqParams, SyncIO,
                              gen_postmark, gen_rewrite_seek, gen_sequential_read,
                              gen_sequential_write, run_multiprocess, sequential_plan)

CLUSTER = 128 * 1024
MB = 1 << 20


def rig(delay_ms=0, n=4, loss=0.0, seed=1):
    sim = Simulator()
    tb = Testbed(sim, NetConfig(delay_ms=delay_ms, loss_prob=loss), seed)
    return sim, tb, Session(sim, tb, n)


def requests(gen):
    return [r for r in gen if not isinstance(r, Drain)]


# -- sequential ---------------------------------------------------------------

def test_one_megabyte_file_is_eight_consecutive_clusters():
    reqs = requests(gen_sequential_write(SeqParams(MB)))
    assert [(r.direction, r.length) for r in reqs] == [(WRITE, CLUSTER)] * 8
    assert [r.lba for r in reqs] == [k * CLUSTER // 512 for k in range(8)]
    assert all(isinstance(r, AsyncIO) for r in reqs)


def test_block_size_does_not_change_the_command_stream():
    small = sequential_plan(SeqParams(3 * MB + 777, block_size_bytes=1024), WRITE)
    large = sequential_plan(SeqParams(3 * MB + 777, block_size_bytes=16384), WRITE)
    assert small == large
    assert small[-1][2] == 777


def test_empty_file_finishes_at_once():
    sim, _, s = rig()
    report = run_multiprocess(sim, [gen_sequential_write(SeqParams(0))], s)
    assert report.commands == 0
    assert report.elapsed_ns == 0
    assert s.submitted == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 5 * MB), st.integers(1, 768))
def test_sequential_plan_covers_every_byte_once(size, sectors):
    cluster = 512 * sectors
    plan = sequential_plan(SeqParams(size, cluster_size=cluster), WRITE)
    assert sum(length for _, _, length in plan) == size
    offset = 0
    for _, lba, length in plan:
        assert lba * 512 == offset
        offset += length


def test_reads_keep_one_command_outstanding():
    sim, _, s = rig(delay_ms=2)
    gens = [gen_sequential_read(SeqParams(2 * MB))]
    report = run_multiprocess(sim, gens, s)
    assert report.bytes_read == 2 * MB
    assert s.max_in_flight_seen == 1
    assert all(isinstance(r, SyncIO) for r in gen_sequential_read(SeqParams(MB)))


def test_read_time_matches_closed_form_without_delay():
    sim, tb, s = rig()
    report = run_multiprocess(sim, [gen_sequential_read(SeqParams(MB))], s)
    service = DiskModel().service_time(ScsiCommand(0, READ, 0, CLUSTER))
    transfer = -(-(CLUSTER + 2 * PDU_HEADER_BYTES) // MSS) * 12_000  # full frames at 1Gbps
    assert report.elapsed_ns == pytest.approx(8 * (tb.rtt() + transfer + service), rel=0.02)


@pytest.mark.parametrize("delay", [2, 4, 10])
def test_reads_are_slower_than_writes(delay):
    out = {}
    for name, gen in (("read", gen_sequential_read), ("write", gen_sequential_write)):
        sim, tb, s = rig(delay_ms=delay)
        out[name] = run_multiprocess(sim, [gen(SeqParams(4 * MB))], s).throughput_Bps
        if name == "read":
            service = DiskModel().service_time(ScsiCommand(0, READ, 0, CLUSTER))
            assert 4 * MB / out[name] * SEC >= 32 * (tb.rtt() + service)
    assert out["read"] < out["write"]


# -- postmark -----------------------------------------------------------------

def test_creation_phase_only():
    stats = PostmarkStats()
    reqs = requests(gen_postmark(PostmarkParams(10, n_transactions=0), RngStream(1, 16), stats))
    assert stats.files_created == 10
    assert stats.files_deleted == stats.reads == stats.appends == 0
    assert all(r.direction == WRITE for r in reqs)
    assert sum(r.length for r in reqs) == stats.bytes_written


def test_postmark_is_deterministic_per_seed():
    def stream(seed):
        return [(type(r).__name__, getattr(r, "lba", None), getattr(r, "length", None))
                for r in gen_postmark(PostmarkParams(50, n_transactions=200), RngStream(seed, 16))]
    assert stream(4) == stream(4)
    assert stream(4) != stream(5)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 60), st.integers(0, 200), st.integers(0, 10_000))
def test_postmark_bookkeeping_balances(files, txns, seed):
    stats = PostmarkStats()
    params = PostmarkParams(files, 500, 20_000, txns)
    reqs = requests(gen_postmark(params, RngStream(seed, 16), stats))
    assert stats.pool_size == files + (stats.files_created - files) - stats.files_deleted
    assert 1 <= stats.pool_size <= files + stats.files_created
    assert stats.reads + stats.appends <= txns
    assert sum(r.length for r in reqs if r.direction == READ) == stats.bytes_read
    assert sum(r.length for r in reqs if r.direction == WRITE) == stats.bytes_written
    assert all(0 < r.length <= CLUSTER for r in reqs)


def test_postmark_runs_to_completion():
    sim, _, s = rig(delay_ms=2, loss=0.027)
    stats = PostmarkStats()
    report = run_multiprocess(sim, [gen_postmark(PostmarkParams(40, n_transactions=80),
                                                 RngStream(2, 16), stats)], s)
    assert report.bytes_written == stats.bytes_written
    assert report.bytes_read == stats.bytes_read
    assert s.completed == s.submitted


def test_bad_postmark_parameters():
    with pytest.raises(ValueError):
        PostmarkParams(size_min=10, size_max=5)
    with pytest.raises(ValueError):
        PostmarkParams(n_files=0)


# -- rewrite / seek -----------------------------------------------------------

def test_single_seeker_rate_matches_closed_form(monkeypatch):
    monkeypatch.setattr(workload, "REWRITE_FRACTION", 0.0)
    sim, tb, s = rig()
    n = 300
    report = run_multiprocess(sim, gen_rewrite_seek(64 * MB, "seek", 1, RngStream(1, 16), n), s)
    disk = DiskModel()
    service = disk.service_time(ScsiCommand(0, READ, 0, 8192)) + disk.seek_penalty
    reply = -(-(8192 + 2 * PDU_HEADER_BYTES) // MSS) * 12_000  # data-in and status frames
    rate = n * SEC / report.elapsed_ns
    assert rate == pytest.approx(SEC / (tb.rtt() + service + reply), rel=0.03)


def test_more_seekers_seek_faster():
    def rate(n_seekers):
        sim, _, s = rig(delay_ms=2)
        gens = gen_rewrite_seek(64 * MB, "seek", n_seekers, RngStream(3, 16), 300)
        procs = run_multiprocess(sim, gens, s)
        reads = [r for r in s.records if r.direction == READ]
        # each seeker blocks on its read, so at most n_seekers reads overlap
        edges = sorted([(r.issue_ns, 1) for r in reads] + [(r.complete_ns, -1) for r in reads],
                       key=lambda e: (e[0], e[1]))
        depth = peak = 0
        for _, step in edges:
            depth += step
            peak = max(peak, depth)
        return len(reads) * SEC / procs.elapsed_ns, peak
    one, peak1 = rate(1)
    three, peak3 = rate(3)
    assert peak1 == 1 and peak3 == 3
    assert three > one


def test_rewrite_is_slower_than_reading():
    sim, _, s = rig(delay_ms=2)
    rw = run_multiprocess(sim, gen_rewrite_seek(2 * MB, "rewrite"), s)
    sim, _, s = rig(delay_ms=2)
    rd = run_multiprocess(sim, [gen_sequential_read(SeqParams(2 * MB))], s)
    assert rw.bytes_read == rd.bytes_read == 2 * MB
    assert rw.read_Bps < rd.read_Bps


def test_unknown_bonnie_mode():
    with pytest.raises(ValueError):
        gen_rewrite_seek(MB, "scan")
    with pytest.raises(ValueError):
        gen_rewrite_seek(MB, "seek")


# -- multiprocess -------------------------------------------------------------

def test_one_generator_equals_running_alone():
    def alone():
        sim, _, s = rig(delay_ms=4, loss=0.027, seed=7)
        from fairsim.workload import Process
        p = Process(sim, s, gen_sequential_write(SeqParams(2 * MB)))
        p.start()
        sim.run()
        return p.elapsed, [(r.command_id, r.turnaround) for r in s.records]

    sim, _, s = rig(delay_ms=4, loss=0.027, seed=7)
    report = run_multiprocess(sim, [gen_sequential_write(SeqParams(2 * MB))], s)
    assert (report.elapsed_ns, [(r.command_id, r.turnaround) for r in s.records]) == alone()


def test_processes_share_one_session_and_interleave():
    sim, _, s = rig(delay_ms=2)
    gens = [gen_sequential_write(SeqParams(MB, start_lba=k * 10_000)) for k in range(3)]
    report = run_multiprocess(sim, gens, s)
    assert report.n_processes == 3
    assert report.bytes_written == 3 * MB
    assert report.elapsed_ns == max(report.per_process_elapsed_ns)
