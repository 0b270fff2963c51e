"""Workloads as coroutine processes that issue SCSI commands.

A workload is a generator yielding I/O requests:

* ``AsyncIO``: issue and continue at once (buffer-cache writes)
* ``SyncIO``: issue and resume when the command completes (reads)
* ``Drain``: resume once every command this process issued has completed (fsync)

:class:`Process` drives one generator on the event loop. Several processes
may share a session; their commands interleave in simulated time.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

from .iscsi import CLUSTER_BYTES, READ, SECTOR_BYTES, WRITE, ScsiCommand, Session
from .sim_core import SEC, RngStream, Simulator

SEEK_BLOCK_BYTES = 8 * 1024
METADATA_WRITE_BYTES = 4 * 1024
REWRITE_FRACTION = 0.1


@dataclass(frozen=True)
class AsyncIO:
    direction: str
    lba: int
    length: int


@dataclass(frozen=True)
class SyncIO:
    direction: str
    lba: int
    length: int


@dataclass(frozen=True)
class Drain:
    pass


@dataclass
class SeqParams:
    file_size_bytes: int = 64 * 1024 * 1024
    block_size_bytes: int = 1024
    cluster_size: int = CLUSTER_BYTES
    start_lba: int = 0

    def __post_init__(self):
        if self.file_size_bytes < 0 or self.block_size_bytes <= 0 or self.cluster_size <= 0:
            raise ValueError("sizes must be positive")


@dataclass
class PostmarkParams:
    n_files: int = 2000
    size_min: int = 500
    size_max: int = 100 * 1024
    n_transactions: int = 5000
    n_processes: int = 1

    def __post_init__(self):
        if self.size_min <= 0 or self.size_min > self.size_max:
            raise ValueError("need 0 < size_min <= size_max")
        if self.n_files <= 0 or self.n_transactions < 0 or self.n_processes <= 0:
            raise ValueError("postmark counts must be positive")


@dataclass
class PostmarkStats:
    files_created: int = 0
    files_deleted: int = 0
    reads: int = 0
    appends: int = 0
    bytes_read: int = 0
    bytes_written: int = 0
    pool_size: int = 0


def sequential_plan(params: SeqParams, direction: str) -> list[tuple[str, int, int]]:
    """The clustered command list for one pass over the file.

    The application's block size does not appear: the page cache merges
    consecutive blocks into cluster-sized requests.
    """
    plan = []
    offset = 0
    size = params.file_size_bytes
    while offset < size:
        length = min(params.cluster_size, size - offset)
        plan.append((direction, params.start_lba + offset // SECTOR_BYTES, length))
        offset += length
    return plan


def gen_sequential_write(params: SeqParams) -> Iterator:
    for direction, lba, length in sequential_plan(params, WRITE):
        yield AsyncIO(direction, lba, length)
    yield Drain()


def gen_sequential_read(params: SeqParams) -> Iterator:
    for direction, lba, length in sequential_plan(params, READ):
        yield SyncIO(direction, lba, length)


def _chunks(lba: int, size: int):
    offset = 0
    while offset < size:
        length = min(CLUSTER_BYTES, size - offset)
        yield lba + offset // SECTOR_BYTES, length
        offset += length


def gen_postmark(params: PostmarkParams, rng: RngStream, stats: PostmarkStats | None = None,
                 lba_base: int = 0) -> Iterator:
    """Create a file pool, run create/delete + read/append transactions, then fsync."""
    stats = stats if stats is not None else PostmarkStats()
    mean_size = (params.size_min + params.size_max) // 2
    volume = (params.n_files + params.n_transactions) * mean_size
    disk_sectors = max(1, 2 * volume // SECTOR_BYTES)
    max_sectors = -(-params.size_max // SECTOR_BYTES)
    pool: list[list[int]] = []  # [lba, size]

    def place() -> int:
        return lba_base + rng.randint(0, max(0, disk_sectors - max_sectors))

    def create():
        size = rng.randint(params.size_min, params.size_max)
        lba = place()
        pool.append([lba, size])
        stats.files_created += 1
        stats.bytes_written += size
        for c_lba, length in _chunks(lba, size):
            yield AsyncIO(WRITE, c_lba, length)

    for _ in range(params.n_files):
        yield from create()
    for _ in range(params.n_transactions):
        if rng.uniform() < 0.5:
            yield from create()
        elif len(pool) <= 1:
            yield from create()
        else:
            i = rng.choice_index(len(pool))
            pool[i] = pool[-1]
            pool.pop()
            stats.files_deleted += 1
            stats.bytes_written += METADATA_WRITE_BYTES
            yield AsyncIO(WRITE, place(), METADATA_WRITE_BYTES)
        f = pool[rng.choice_index(len(pool))]
        if rng.uniform() < 0.5:
            stats.reads += 1
            stats.bytes_read += f[1]
            for c_lba, length in _chunks(f[0], f[1]):
                yield SyncIO(READ, c_lba, length)
        else:
            cap = params.size_max - f[1]
            if cap > 0:
                amount = rng.randint(min(512, cap), cap)
                stats.appends += 1
                stats.bytes_written += amount
                tail_lba = f[0] + f[1] // SECTOR_BYTES
                f[1] += amount
                for c_lba, length in _chunks(tail_lba, amount):
                    yield AsyncIO(WRITE, c_lba, length)
        stats.pool_size = len(pool)
    stats.pool_size = len(pool)
    yield Drain()


def gen_rewrite_seek(file_size: int, mode: str, n_seekers: int = 3, rng: RngStream | None = None,
                     n_seeks: int = 8000) -> list[Iterator]:
    """Bonnie-style block rewrite (one process) or random seeks (``n_seekers`` processes)."""
    if mode == "rewrite":
        def rewrite():
            for _, lba, length in sequential_plan(SeqParams(file_size), READ):
                yield SyncIO(READ, lba, length)
                yield AsyncIO(WRITE, lba, length)
            yield Drain()
        return [rewrite()]
    if mode != "seek":
        raise ValueError(f"unknown mode {mode!r}")
    if rng is None:
        raise ValueError("seek mode needs an rng stream")
    n_blocks = max(1, file_size // SEEK_BLOCK_BYTES)
    per = [n_seeks // n_seekers + (1 if k < n_seeks % n_seekers else 0) for k in range(n_seekers)]

    def seeker(count: int):
        for _ in range(count):
            lba = rng.choice_index(n_blocks) * (SEEK_BLOCK_BYTES // SECTOR_BYTES)
            yield SyncIO(READ, lba, SEEK_BLOCK_BYTES)
            if rng.uniform() < REWRITE_FRACTION:
                yield AsyncIO(WRITE, lba, SEEK_BLOCK_BYTES)
        yield Drain()

    return [seeker(c) for c in per]


class Process:
    """Runs one workload generator against a session."""

    def __init__(self, sim: Simulator, session: Session, gen: Iterator, name: str = "proc",
                 on_finish=None):
        self.sim = sim
        self.session = session
        self.gen = gen
        self.name = name
        self.on_finish = on_finish
        self.outstanding = 0
        self.issued = 0
        self.completed = 0
        self.max_outstanding_seen = 0
        self.bytes_read = 0
        self.bytes_written = 0
        self.started_at: int | None = None
        self.finished_at: int | None = None
        self._waiting_for: ScsiCommand | None = None
        self._draining = False

    @property
    def done(self) -> bool:
        return self.finished_at is not None

    @property
    def elapsed(self) -> int:
        return self.finished_at - self.started_at

    def start(self) -> None:
        self.started_at = self.sim.now
        self._step(None)

    def _issue(self, req) -> ScsiCommand:
        cmd = self.session.new_command(req.direction, req.lba, req.length)
        cmd.on_complete = self._on_complete
        self.outstanding += 1
        self.issued += 1
        if self.outstanding > self.max_outstanding_seen:
            self.max_outstanding_seen = self.outstanding
        self.session.submit(cmd)
        return cmd

    def _step(self, value) -> None:
        gen = self.gen
        while True:
            try:
                req = gen.send(value)
            except StopIteration:
                if self.outstanding:
                    self._draining = True
                    self.gen = iter(())
                    return
                self._finish()
                return
            cls = req.__class__
            if cls is AsyncIO:
                value = self._issue(req)
            elif cls is SyncIO:
                self._waiting_for = self._issue(req)
                return
            elif cls is Drain:
                if self.outstanding:
                    self._draining = True
                    return
                value = None
            else:
                raise TypeError(f"workload yielded {req!r}")

    def _on_complete(self, cmd: ScsiCommand) -> None:
        self.outstanding -= 1
        self.completed += 1
        if cmd.direction == READ:
            self.bytes_read += cmd.length_bytes
        else:
            self.bytes_written += cmd.length_bytes
        if self._waiting_for is cmd:
            self._waiting_for = None
            self._step(cmd)
        elif self._draining and not self.outstanding:
            self._draining = False
            self._step(None)

    def _finish(self) -> None:
        self.finished_at = self.sim.now
        if self.on_finish is not None:
            self.on_finish(self)


@dataclass
class MultiReport:
    n_processes: int
    elapsed_ns: int
    bytes_read: int
    bytes_written: int
    commands: int
    per_process_elapsed_ns: list[int] = field(default_factory=list)

    @property
    def throughput_Bps(self) -> float:
        if self.elapsed_ns <= 0:
            return 0.0
        return (self.bytes_read + self.bytes_written) * SEC / self.elapsed_ns

    @property
    def read_Bps(self) -> float:
        return self.bytes_read * SEC / self.elapsed_ns if self.elapsed_ns > 0 else 0.0

    @property
    def write_Bps(self) -> float:
        return self.bytes_written * SEC / self.elapsed_ns if self.elapsed_ns > 0 else 0.0


def start_processes(sim: Simulator, generators: list, sessions, on_all_done=None) -> list[Process]:
    """Start one process per generator; ``sessions`` is one session or one per generator."""
    if isinstance(sessions, Session):
        sessions = [sessions] * len(generators)
    if len(sessions) != len(generators):
        raise ValueError("need one session per generator")
    procs: list[Process] = []
    remaining = [len(generators)]

    def finished(_proc):
        remaining[0] -= 1
        if remaining[0] == 0 and on_all_done is not None:
            on_all_done(procs)

    for k, (gen, sess) in enumerate(zip(generators, sessions)):
        procs.append(Process(sim, sess, gen, f"proc{k}", finished))
    if not generators and on_all_done is not None:
        on_all_done(procs)
    for p in procs:
        p.start()
    return procs


def merge_report(procs: list[Process]) -> MultiReport:
    if not procs:
        return MultiReport(0, 0, 0, 0, 0)
    start = min(p.started_at for p in procs)
    end = max(p.finished_at for p in procs)
    return MultiReport(len(procs), end - start, sum(p.bytes_read for p in procs),
                       sum(p.bytes_written for p in procs), sum(p.completed for p in procs),
                       [p.elapsed for p in procs])


def run_multiprocess(sim: Simulator, generators: list, sessions) -> MultiReport:
    """Run generators concurrently to completion and merge their results."""
    procs = start_processes(sim, generators, sessions)
    sim.run()
    unfinished = [p.name for p in procs if not p.done]
    if unfinished:
        raise RuntimeError(f"processes did not finish: {unfinished}")
    return merge_report(procs)
