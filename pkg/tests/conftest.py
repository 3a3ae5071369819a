from __future__ import annotations

import os
import tempfile
from pathlib import Path

import pytest

from wlmbridge.lifecycle import Bridge
from wlmbridge.registry import QueueSpec, Registry
from wlmbridge.simbatch import SimBatchAdapter, SimCluster

FIXTURES = Path(__file__).parent / "fixtures"


def cow_text() -> str:
    return (FIXTURES / "cow_job.yaml").read_text()


def cow_text_sim(runtime: int = 5) -> str:
    """The cow manifest with a simulator runtime line after the directives."""
    return cow_text().replace(
        "    #PBS -o $HOME/low.out\n",
        f"    #PBS -o $HOME/low.out\n    #SIM runtime={runtime}\n",
    )


def cow_output() -> bytes:
    return (FIXTURES / "cow_output.txt").read_bytes()


def make_manifest_text(name: str, body: str, results: str | None = None) -> str:
    lines = [
        "apiVersion: wlm.sylabs.io/v1alpha1",
        "kind: TorqueJob",
        "metadata:",
        f"  name: {name}",
        "spec:",
        "  batch: |",
    ]
    lines += ["    " + ln if ln else "" for ln in body.rstrip("\n").split("\n")]
    if results:
        lines += [
            "results:",
            f"  from: {results}",
            "  mount:",
            "    name: data",
            "    hostPath:",
            "      path: $HOME/out/",
            "      type: DirectoryOrCreate",
        ]
    return "\n".join(lines) + "\n"


class SimEnv:
    """A bridge wired to a simulated cluster, with separate backend and user homes."""

    def __init__(self, tmp_path: Path, queues: list[QueueSpec]) -> None:
        self.hpc_home = tmp_path / "hpc"
        self.user_home = tmp_path / "user"
        self.hpc_home.mkdir()
        self.user_home.mkdir()
        self.cluster = SimCluster(queues, home=self.hpc_home)
        self.cluster.install_output("lolcow_latest.sif", cow_output())
        self.adapter = SimBatchAdapter(self.cluster)
        self.registry = Registry(self.adapter.queues(), clock=self.adapter.clock)
        self.bridge = Bridge(
            self.registry,
            self.adapter,
            clock=self.adapter.clock,
            home=str(self.user_home),
            source_home=str(self.hpc_home),
        )

    def step(self, n: int = 1) -> None:
        for _ in range(n):
            self.adapter.tick(1)
            self.bridge.reconcile_all(force=True)


@pytest.fixture
def batch_queue() -> QueueSpec:
    return QueueSpec(name="batch", max_nodes=1, max_walltime_seconds=3600, node_names=("n1",))


@pytest.fixture
def sim_env(tmp_path, batch_queue) -> SimEnv:
    return SimEnv(tmp_path, [batch_queue])


@pytest.fixture
def sim_env_factory(tmp_path):
    def factory(queues):
        return SimEnv(tmp_path, queues)

    return factory


@pytest.fixture
def socket_path():
    """A socket path short enough for AF_UNIX (tmp_path can exceed 108 bytes)."""
    with tempfile.TemporaryDirectory(prefix="wlmb-", dir="/tmp") as d:
        yield os.path.join(d, "s.sock")


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
