"""Virtual nodes: one bridge-side stand-in per backend queue, plus placement."""

from __future__ import annotations

import enum
import threading
import time
from dataclasses import dataclass, field

from .errors import DuplicateQueue, NoFeasibleQueue, NoSuchQueue
from .manifest import PbsDirectives


@dataclass(frozen=True)
class QueueSpec:
    name: str
    max_nodes: int
    max_walltime_seconds: int | None = None
    node_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("queue name must be non-empty")
        if self.max_nodes < 1:
            raise ValueError(f"queue {self.name}: max_nodes must be positive")
        if self.node_names and self.max_nodes > len(self.node_names):
            raise ValueError(
                f"queue {self.name}: max_nodes {self.max_nodes} exceeds "
                f"its {len(self.node_names)} nodes"
            )


@dataclass
class VirtualNode:
    queue: QueueSpec
    jobs_pending: int = 0
    jobs_running: int = 0
    last_refresh: float = field(default_factory=time.time)

    @property
    def name(self) -> str:
        return self.queue.name


class Violation(str, enum.Enum):
    WALLTIME_EXCEEDED = "WalltimeExceeded"
    NODES_EXCEEDED = "NodesExceeded"


def discover_queues(adapter) -> list[QueueSpec]:
    """Ask the backend for its queues. Raises BackendUnavailable."""
    return list(adapter.queues())


def validate_against_queue(d: PbsDirectives, q: QueueSpec) -> list[Violation]:
    """Empty list means the directives fit the queue."""
    violations = []
    if (
        d.walltime_seconds is not None
        and q.max_walltime_seconds is not None
        and d.walltime_seconds > q.max_walltime_seconds
    ):
        violations.append(Violation.WALLTIME_EXCEEDED)
    if d.node_count is not None and d.node_count > q.max_nodes:
        violations.append(Violation.NODES_EXCEEDED)
    return violations


class Registry:
    """Ordered set of virtual nodes, one per queue.

    Readers get an immutable snapshot; ``refresh`` swaps the whole mapping
    under a lock so nobody sees a half-applied update.
    """

    def __init__(self, queues: list[QueueSpec] | None = None, clock=time.time) -> None:
        self._lock = threading.Lock()
        self._clock = clock
        self._nodes: tuple[VirtualNode, ...] = ()
        if queues:
            self.refresh(queues)

    def refresh(self, queues: list[QueueSpec]) -> None:
        names = [q.name for q in queues]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise DuplicateQueue(f"duplicate queue names: {', '.join(dupes)}")
        now = self._clock()
        with self._lock:
            existing = {vn.name: vn for vn in self._nodes}
            nodes = []
            for q in queues:
                vn = existing.get(q.name)
                if vn is None:
                    vn = VirtualNode(queue=q, last_refresh=now)
                else:
                    vn.queue = q
                    vn.last_refresh = now
                nodes.append(vn)
            self._nodes = tuple(nodes)

    @property
    def nodes(self) -> tuple[VirtualNode, ...]:
        return self._nodes

    def __len__(self) -> int:
        return len(self._nodes)

    def __iter__(self):
        return iter(self._nodes)

    def get(self, name: str) -> VirtualNode:
        for vn in self._nodes:
            if vn.name == name:
                return vn
        raise NoSuchQueue(f"no queue named {name!r}")

    def adjust_counts(self, name: str, pending: int = 0, running: int = 0) -> None:
        with self._lock:
            for vn in self._nodes:
                if vn.name == name:
                    vn.jobs_pending = max(0, vn.jobs_pending + pending)
                    vn.jobs_running = max(0, vn.jobs_running + running)
                    return


def build_virtual_nodes(queues: list[QueueSpec], clock=time.time) -> Registry:
    return Registry(queues, clock=clock)


def select_virtual_node(d: PbsDirectives, registry: Registry) -> VirtualNode:
    nodes = registry.nodes
    if not nodes:
        raise NoFeasibleQueue("no queues are registered")
    if d.queue_name is not None:
        vn = registry.get(d.queue_name)
        violations = validate_against_queue(d, vn.queue)
        if violations:
            raise NoFeasibleQueue(
                f"queue {vn.name!r} rejects the job: "
                + ", ".join(v.value for v in violations),
                violations=[(vn.name, v) for v in violations],
            )
        return vn

    rejected = []
    for vn in nodes:
        violations = validate_against_queue(d, vn.queue)
        if not violations:
            return vn
        rejected.extend((vn.name, v) for v in violations)
    raise NoFeasibleQueue(
        "no queue accepts the job: "
        + "; ".join(f"{name}: {v.value}" for name, v in rejected),
        violations=rejected,
    )
