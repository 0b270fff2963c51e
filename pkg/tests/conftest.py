"""Shared fixtures: small hand-wired topologies and a memoizing cell runner."""
from __future__ import annotations

import time

import pytest

from fairsim.config import ExperimentConfig
from fairsim.experiment import run_cell
from fairsim.iscsi import Endpoint
from fairsim.netem import INITIATOR, TARGET, NetConfig, Testbed
from fairsim.sim_core import Simulator
from fairsim.tcp import Tcb, TcpParams

# criterion number -> (passed, detail); filled in by the acceptance tests
CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = (passed, detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        passed, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")


class Pair:
    """One connection (initiator -> target) on a private testbed."""

    def __init__(self, delay_ms: float = 0.0, loss: float = 0.0, seed: int = 1,
                 params: TcpParams | None = None, queue: int = 100):
        self.sim = Simulator()
        self.testbed = Testbed(self.sim, NetConfig(delay_ms=delay_ms, loss_prob=loss,
                                                   queue_capacity_pkts=queue), seed)
        self.params = params or TcpParams()
        self.sender = Tcb(self.sim, 0, INITIATOR, TARGET, self.testbed, params=self.params)
        self.receiver = Tcb(self.sim, 0, TARGET, INITIATOR, self.testbed, params=self.params)
        for host, tcb in ((INITIATOR, self.sender), (TARGET, self.receiver)):
            ep = Endpoint(host)
            ep.tcbs[0] = tcb
            self.testbed.attach(host, ep)

    def transfer(self, nbytes: int) -> None:
        """Push ``nbytes`` through the send buffer as space frees up, then drain."""
        left = [nbytes]

        def refill(tcb):
            if left[0]:
                left[0] -= tcb.app_send(left[0])

        self.sender.on_send_space = refill
        refill(self.sender)
        self.sim.run()


@pytest.fixture
def pair():
    return Pair


class CapturingNet:
    """Stands in for the testbed and records every packet a Tcb emits."""

    def __init__(self):
        self.packets = []

    def send(self, pkt):
        self.packets.append(pkt)

    @property
    def data(self):
        return [p.segment for p in self.packets if p.segment.len]


@pytest.fixture
def capture():
    return CapturingNet


class CellCache:
    """Runs each (config, mode, delay, seed) cell once per test session."""

    def __init__(self):
        self._cells: dict = {}

    def get(self, mode: str, delay_ms: float, seed: int, **overrides) -> dict:
        key = (mode, float(delay_ms), seed, tuple(sorted(overrides.items())))
        hit = self._cells.get(key)
        if hit is None:
            cfg = ExperimentConfig(**overrides)
            started = time.perf_counter()
            result = run_cell(cfg, mode, delay_ms, seed)
            wall = time.perf_counter() - started
            ids = [r.command_id for s in result.sessions for r in s.records]
            hit = dict(result.metrics)
            hit["wall_s"] = wall
            hit["records"] = len(ids)
            hit["unique_records"] = len(set((s.session_id, r.command_id)
                                            for s in result.sessions for r in s.records))
            hit["delivered_eq_sent"] = all(
                t.delivered_bytes == peer.app_end
                for s in result.sessions
                for cid in s.conns
                for t, peer in ((s.target_tcbs[cid], s.initiator_tcbs[cid]),
                                (s.initiator_tcbs[cid], s.target_tcbs[cid])))
            self._cells[key] = hit
        return hit

    def all(self) -> list[tuple[tuple, dict]]:
        return list(self._cells.items())


@pytest.fixture(scope="session")
def cells():
    return CellCache()
