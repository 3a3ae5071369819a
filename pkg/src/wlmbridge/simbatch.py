"""Deterministic discrete-time stand-in for a Torque cluster.

One tick is one simulated second. Each queue is a strict FIFO over its own
node list; nodes may be listed by several queues and are never handed to two
jobs at once. Scripts steer the simulation through inert comment lines::

    #SIM runtime=5
    #SIM exit=0
"""

from __future__ import annotations

import logging
import os
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .adapter import UNKNOWN, BackendState, BackendStatus, queues_from_config
from .errors import (
    BridgeError,
    MalformedConfig,
    NodesExceedQueue,
    NoSuchJob,
    NoSuchQueue,
    UnknownVariable,
    WalltimeExceedsQueue,
)
from .manifest import expand_variables, parse_pbs_directives, prologue_lines
from .registry import QueueSpec

logger = logging.getLogger(__name__)

WALLTIME_KILL_EXIT = 271


@dataclass
class SimJob:
    sim_id: str
    queue: str
    nodes_requested: int
    walltime_limit: int | None
    declared_runtime: int
    declared_exit: int
    stdout_path: str | None
    stderr_path: str | None
    script: str
    state: BackendStatus = field(default_factory=lambda: BackendStatus(BackendState.QUEUED))
    started_at: int | None = None
    nodes: tuple[str, ...] = ()


def parse_sim_directives(script: str) -> dict[str, int]:
    """Read ``#SIM key=value`` lines from the script prologue."""
    values = {"runtime": 0, "exit": 0}
    for line in prologue_lines(script, "#SIM"):
        for item in line.strip()[len("#SIM"):].split():
            key, sep, val = item.partition("=")
            if not sep:
                raise BridgeError(f"bad #SIM item {item!r}")
            try:
                values[key] = int(val)
            except ValueError:
                raise BridgeError(f"#SIM {key} needs an integer, got {val!r}") from None
    if values["runtime"] < 0:
        raise BridgeError("#SIM runtime must be >= 0")
    return values


class SimCluster:
    def __init__(self, queues: list[QueueSpec], home: str | os.PathLike | None = None) -> None:
        names = [q.name for q in queues]
        if len(set(names)) != len(names):
            raise MalformedConfig("duplicate queue names")
        self.queues = list(queues)
        self.home = str(home) if home is not None else os.path.expanduser("~")
        self.clock = 0
        self.node_pool: dict[str, str | None] = {}
        for q in self.queues:
            for node in q.node_names:
                self.node_pool.setdefault(node, None)
        self.pending: dict[str, deque[SimJob]] = {q.name: deque() for q in self.queues}
        self.running: dict[str, SimJob] = {}
        self.jobs: dict[str, SimJob] = {}
        self.cancelled: set[str] = set()
        self.event_log: list[tuple] = []
        self._programs: list[tuple[str, bytes]] = []
        self._next_id = 1

    @classmethod
    def from_config(cls, doc, home=None) -> SimCluster:
        if home is None and isinstance(doc, dict):
            home = doc.get("home")
        return cls(queues_from_config(doc), home=home)

    def _queue(self, name: str) -> QueueSpec:
        for q in self.queues:
            if q.name == name:
                return q
        raise NoSuchQueue(f"no queue named {name!r}")

    def install_output(self, marker: str, payload: bytes | str) -> None:
        """Jobs whose script contains ``marker`` write ``payload`` as stdout."""
        if isinstance(payload, str):
            payload = payload.encode()
        self._programs.append((marker, payload))

    def free_nodes(self, queue: str) -> list[str]:
        return [n for n in self._queue(queue).node_names if self.node_pool[n] is None]

    # adapter-facing operations

    def submit(self, script: str, queue: str) -> str:
        q = self._queue(queue)
        directives = parse_pbs_directives(script)
        sim = parse_sim_directives(script)
        nodes = directives.node_count or 1
        if nodes > len(q.node_names) or nodes > q.max_nodes:
            raise NodesExceedQueue(
                f"job asks for {nodes} nodes, queue {queue!r} has {min(len(q.node_names), q.max_nodes)}"
            )
        walltime = directives.walltime_seconds
        if walltime is None:
            walltime = q.max_walltime_seconds
        elif q.max_walltime_seconds is not None and walltime > q.max_walltime_seconds:
            raise WalltimeExceedsQueue(
                f"walltime {walltime}s exceeds queue {queue!r} limit {q.max_walltime_seconds}s"
            )
        sim_id = f"{self._next_id}.sim"
        self._next_id += 1
        job = SimJob(
            sim_id=sim_id,
            queue=queue,
            nodes_requested=nodes,
            walltime_limit=walltime,
            declared_runtime=sim["runtime"],
            declared_exit=sim["exit"],
            stdout_path=directives.stdout_path,
            stderr_path=directives.stderr_path,
            script=script,
        )
        self.jobs[sim_id] = job
        self.pending[queue].append(job)
        self.event_log.append((self.clock, "submit", sim_id, queue))
        return sim_id

    def status(self, sim_id: str) -> BackendStatus:
        job = self.jobs.get(sim_id)
        if job is None:
            raise NoSuchJob(f"unknown job {sim_id}")
        return job.state

    def cancel(self, sim_id: str) -> None:
        job = self.jobs.get(sim_id)
        if job is None:
            raise NoSuchJob(f"unknown job {sim_id}")
        if job.state.state is BackendState.DONE:
            return
        if job.started_at is None:
            self.pending[job.queue].remove(job)
        else:
            self._release(job)
        job.state = UNKNOWN
        del self.jobs[sim_id]
        self.cancelled.add(sim_id)
        self.event_log.append((self.clock, "cancel", sim_id, job.nodes))

    # scheduler core

    def _release(self, job: SimJob) -> None:
        for node in job.nodes:
            self.node_pool[node] = None
        self.running.pop(job.sim_id, None)

    def _finish(self, job: SimJob, exit_code: int, kind: str) -> tuple:
        self._release(job)
        job.state = BackendStatus.done(exit_code)
        self._write_outputs(job)
        event = (self.clock, kind, job.sim_id, exit_code)
        self.event_log.append(event)
        return event

    def _write_outputs(self, job: SimJob) -> None:
        stdout = job.stdout_path or f"$HOME/{job.sim_id}.out"
        payload = f"{job.sim_id} exit={job.state.exit_code}\n".encode()
        for marker, program_output in self._programs:
            if marker in job.script:
                payload = program_output
                break
        for path, data in ((stdout, payload), (job.stderr_path, b"")):
            if path is None:
                continue
            try:
                target = Path(self.home) / expand_variables(path, self.home)
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_bytes(data)
            except (UnknownVariable, OSError) as exc:
                logger.warning("job %s: cannot write %s: %s", job.sim_id, path, exc)

    def _start(self, job: SimJob, nodes: list[str]) -> tuple:
        for node in nodes:
            self.node_pool[node] = job.sim_id
        job.nodes = tuple(nodes)
        job.started_at = self.clock
        job.state = BackendStatus(BackendState.RUNNING)
        self.running[job.sim_id] = job
        event = (self.clock, "start", job.sim_id, job.nodes)
        self.event_log.append(event)
        return event

    def _schedule(self) -> list[tuple]:
        events = []
        for q in self.queues:
            fifo = self.pending[q.name]
            while fifo:
                head = fifo[0]
                free = self.free_nodes(q.name)
                if len(free) < head.nodes_requested:
                    break  # strict FIFO: a blocked head blocks its queue
                fifo.popleft()
                events.append(self._start(head, free[: head.nodes_requested]))
        return events

    def tick(self, n: int = 1) -> list[tuple]:
        """Advance ``n`` simulated seconds and return the events emitted.

        Within a tick, queued heads are started at the current time, the
        clock advances, then finished jobs complete and overrunning jobs are
        killed, so nodes freed at time t are reusable by the next tick's
        start pass at that same time t.
        """
        if n < 1:
            raise ValueError("tick count must be >= 1")
        events = []
        for _ in range(n):
            events.extend(self._schedule())
            self.clock += 1
            for job in sorted(self.running.values(), key=lambda j: int(j.sim_id.split(".")[0])):
                elapsed = self.clock - job.started_at
                if elapsed >= job.declared_runtime:
                    events.append(self._finish(job, job.declared_exit, "done"))
                elif job.walltime_limit is not None and elapsed >= job.walltime_limit:
                    events.append(self._finish(job, WALLTIME_KILL_EXIT, "killed"))
            self.audit()
        return events

    def audit(self) -> None:
        """Check the no-oversubscription invariant; raises AssertionError."""
        held: dict[str, str] = {}
        for job in self.running.values():
            for node in job.nodes:
                if node in held:
                    raise AssertionError(f"node {node} held by {held[node]} and {job.sim_id}")
                held[node] = job.sim_id
        for node, owner in self.node_pool.items():
            if held.get(node) != owner:
                raise AssertionError(f"node pool disagrees for {node}")
        for q in self.queues:
            used = sum(len(j.nodes) for j in self.running.values() if j.queue == q.name)
            if used > len(q.node_names):
                raise AssertionError(f"queue {q.name} holds {used} of {len(q.node_names)} nodes")
        for q in self.queues:
            held_by_queue = sum(len(j.nodes) for j in self.running.values() if j.queue == q.name)
            if held_by_queue > len(q.node_names):
                raise AssertionError(f"queue {q.name} over capacity")


def load_cluster_config(path: str | os.PathLike, home=None) -> SimCluster:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise MalformedConfig(f"cannot read {path}: {exc}") from None
    if doc is None:
        doc = {"queues": []}
    return SimCluster.from_config(doc, home=home)


class SimBatchAdapter:
    """Adapter contract over a SimCluster; serializes every call."""

    def __init__(self, cluster: SimCluster) -> None:
        self.cluster = cluster
        self.lock = threading.RLock()

    def submit(self, script: str, queue: str) -> str:
        with self.lock:
            return self.cluster.submit(script, queue)

    def status(self, backend_id: str) -> BackendStatus:
        with self.lock:
            try:
                return self.cluster.status(backend_id)
            except NoSuchJob:
                return UNKNOWN

    def cancel(self, backend_id: str) -> None:
        with self.lock:
            try:
                self.cluster.cancel(backend_id)
            except NoSuchJob:
                if backend_id not in self.cluster.cancelled:
                    raise

    def read_file(self, path: str) -> bytes:
        return Path(path).read_bytes()

    def queues(self) -> list[QueueSpec]:
        with self.lock:
            return list(self.cluster.queues)

    def tick(self, n: int = 1) -> list[tuple]:
        with self.lock:
            return self.cluster.tick(n)

    def clock(self) -> float:
        return float(self.cluster.clock)
