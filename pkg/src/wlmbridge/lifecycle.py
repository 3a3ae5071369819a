"""Per-job state machine and the reconciler that drives it.

Legal edges::

    Pending      -> Submitted | Failed
    Submitted    -> Queued | Failed
    Queued       -> Running | Cancelled | Failed
    Running      -> Transferring | Completed | Failed | Cancelled
    Transferring -> Completed | Failed

``apply_event`` is the pure transition function; ``Bridge`` owns the job
records, serializes events per job and polls the backend.
"""

from __future__ import annotations

import enum
import logging
import os
import threading
import time
import uuid
from dataclasses import dataclass, field

from .adapter import BackendState, BackendStatus
from .errors import (
    BackendUnavailable,
    BridgeError,
    DuplicateJob,
    IllegalTransition,
    NoSuchJob,
    TransferError,
)
from .manifest import JobManifest, PbsDirectives, parse_pbs_directives, render_batch_script
from .registry import Registry, select_virtual_node
from .results import collect_results

logger = logging.getLogger(__name__)

BACKOFF_INITIAL = 1.0
BACKOFF_CAP = 32.0
UNKNOWN_GRACE = 3


class JobState(str, enum.Enum):
    PENDING = "Pending"
    SUBMITTED = "Submitted"
    QUEUED = "Queued"
    RUNNING = "Running"
    TRANSFERRING = "Transferring"
    COMPLETED = "Completed"
    FAILED = "Failed"
    CANCELLED = "Cancelled"

    @property
    def terminal(self) -> bool:
        return self in TERMINAL

    @property
    def display(self) -> str:
        return self.value.lower()


TERMINAL = frozenset({JobState.COMPLETED, JobState.FAILED, JobState.CANCELLED})


class EventKind(str, enum.Enum):
    SUBMIT_OK = "SubmitOk"
    SUBMIT_ERR = "SubmitErr"
    BACKEND_QUEUED = "BackendQueued"
    BACKEND_RUNNING = "BackendRunning"
    BACKEND_DONE = "BackendDone"
    BACKEND_FAILED = "BackendFailed"
    TRANSFER_STARTED = "TransferStarted"
    TRANSFER_OK = "TransferOk"
    TRANSFER_ERR = "TransferErr"
    CANCEL_REQUESTED = "CancelRequested"


@dataclass(frozen=True)
class JobEvent:
    kind: EventKind
    backend_id: str | None = None
    exit_code: int | None = None

    def __post_init__(self) -> None:
        if (self.kind is EventKind.SUBMIT_OK) != (self.backend_id is not None):
            raise ValueError("only SubmitOk carries a backend id")
        if (self.kind is EventKind.BACKEND_DONE) != (self.exit_code is not None):
            raise ValueError("only BackendDone carries an exit code")

    def __str__(self) -> str:
        if self.kind is EventKind.SUBMIT_OK:
            return f"SubmitOk({self.backend_id})"
        if self.kind is EventKind.BACKEND_DONE:
            return f"BackendDone({self.exit_code})"
        return self.kind.value


def submit_ok(backend_id: str) -> JobEvent:
    return JobEvent(EventKind.SUBMIT_OK, backend_id=backend_id)


def backend_done(exit_code: int) -> JobEvent:
    return JobEvent(EventKind.BACKEND_DONE, exit_code=exit_code)


SUBMIT_ERR = JobEvent(EventKind.SUBMIT_ERR)
BACKEND_QUEUED = JobEvent(EventKind.BACKEND_QUEUED)
BACKEND_RUNNING = JobEvent(EventKind.BACKEND_RUNNING)
BACKEND_FAILED = JobEvent(EventKind.BACKEND_FAILED)
TRANSFER_STARTED = JobEvent(EventKind.TRANSFER_STARTED)
TRANSFER_OK = JobEvent(EventKind.TRANSFER_OK)
TRANSFER_ERR = JobEvent(EventKind.TRANSFER_ERR)
CANCEL_REQUESTED = JobEvent(EventKind.CANCEL_REQUESTED)

S, E = JobState, EventKind
_EDGES: dict[tuple[JobState, EventKind], JobState] = {
    (S.PENDING, E.SUBMIT_OK): S.SUBMITTED,
    (S.PENDING, E.SUBMIT_ERR): S.FAILED,
    (S.SUBMITTED, E.BACKEND_QUEUED): S.QUEUED,
    (S.SUBMITTED, E.BACKEND_FAILED): S.FAILED,
    (S.QUEUED, E.BACKEND_QUEUED): S.QUEUED,
    (S.QUEUED, E.BACKEND_RUNNING): S.RUNNING,
    (S.QUEUED, E.BACKEND_FAILED): S.FAILED,
    (S.QUEUED, E.CANCEL_REQUESTED): S.CANCELLED,
    (S.RUNNING, E.BACKEND_RUNNING): S.RUNNING,
    (S.RUNNING, E.BACKEND_FAILED): S.FAILED,
    (S.RUNNING, E.CANCEL_REQUESTED): S.CANCELLED,
    (S.TRANSFERRING, E.TRANSFER_STARTED): S.TRANSFERRING,
    (S.TRANSFERRING, E.TRANSFER_OK): S.COMPLETED,
    (S.TRANSFERRING, E.TRANSFER_ERR): S.FAILED,
}
del S, E


def apply_event(state: JobState, event: JobEvent, has_results: bool = True) -> JobState:
    """Target state for ``event`` in ``state``; raises IllegalTransition.

    A zero exit from Running goes to Transferring when the job declared a
    results clause and straight to Completed otherwise; a non-zero exit
    fails the job.
    """
    if state is JobState.RUNNING and event.kind is EventKind.BACKEND_DONE:
        if event.exit_code != 0:
            return JobState.FAILED
        return JobState.TRANSFERRING if has_results else JobState.COMPLETED
    target = _EDGES.get((state, event.kind))
    if target is None:
        raise IllegalTransition(state, event)
    return target


def format_age(seconds: float) -> str:
    """Compact largest-unit-first age: ``2s``, ``1m30s``, ``2h3m``, ``4d5h``."""
    s = max(0, int(seconds))
    if s < 60:
        return f"{s}s"
    if s < 3600:
        m, s = divmod(s, 60)
        return f"{m}m{s}s" if s else f"{m}m"
    if s < 86400:
        h, rest = divmod(s, 3600)
        m = rest // 60
        return f"{h}h{m}m" if m else f"{h}h"
    d, rest = divmod(s, 86400)
    h = rest // 3600
    return f"{d}d{h}h" if h else f"{d}d"


_PENDING_STATES = frozenset({JobState.SUBMITTED, JobState.QUEUED})
_RUNNING_STATES = frozenset({JobState.RUNNING, JobState.TRANSFERRING})


@dataclass
class JobRecord:
    uid: str
    manifest: JobManifest
    state: JobState = JobState.PENDING
    directives: PbsDirectives | None = None
    queue_name: str | None = None
    backend_job_id: str | None = None
    transition_log: list[tuple[JobState, float]] = field(default_factory=list)
    exit_code: int | None = None
    error: str | None = None
    result_paths: list[str] = field(default_factory=list)
    # reconciler bookkeeping
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False, compare=False)
    retry_delay: float = field(default=0.0, repr=False)
    next_attempt: float = field(default=0.0, repr=False)
    unknown_polls: int = field(default=0, repr=False)
    _backend_exit: int | None = field(default=None, repr=False)

    @property
    def name(self) -> str:
        return self.manifest.name

    @property
    def created_at(self) -> float:
        return self.transition_log[0][1]

    def to_dict(self) -> dict:
        return {
            "uid": self.uid,
            "name": self.name,
            "queue": self.queue_name,
            "state": self.state.display,
            "backend_job_id": self.backend_job_id,
            "exit_code": self.exit_code,
            "error": self.error,
            "results": list(self.result_paths),
            "transition_log": [[s.display, ts] for s, ts in self.transition_log],
        }


class Bridge:
    """Job records plus the submit / reconcile / cancel operations on them.

    ``clock`` supplies timestamps in seconds; pass the simulator's clock to
    make ages and backoff deterministic. ``home`` expands ``$HOME`` in the
    results destination, ``source_home`` in the results source (defaults to
    ``home``).
    """

    def __init__(
        self,
        registry: Registry,
        adapter,
        clock=time.time,
        home: str | None = None,
        source_home: str | None = None,
    ) -> None:
        self.registry = registry
        self.adapter = adapter
        self.clock = clock
        self.home = home or os.path.expanduser("~")
        self.source_home = source_home
        self._records: dict[str, JobRecord] = {}
        self._by_name: dict[str, str] = {}
        self._lock = threading.Lock()

    # record access

    def records(self) -> list[JobRecord]:
        with self._lock:
            return list(self._records.values())

    def get(self, uid: str) -> JobRecord:
        try:
            return self._records[uid]
        except KeyError:
            raise NoSuchJob(f"no job with uid {uid!r}") from None

    def find(self, key: str) -> JobRecord:
        """Look a job up by uid, or by name (latest job with that name)."""
        with self._lock:
            uid = key if key in self._records else self._by_name.get(key)
            if uid is None:
                raise NoSuchJob(f"no job named {key!r}")
            return self._records[uid]

    # transitions

    def _now(self) -> float:
        return float(self.clock())

    def _enter(self, record: JobRecord, target: JobState) -> None:
        if target is record.state:
            return
        before = record.state
        if before.terminal:
            raise AssertionError(f"{record.uid}: leaving terminal state {before}")
        now = max(self._now(), record.transition_log[-1][1])
        if target.terminal and before in (JobState.RUNNING, JobState.TRANSFERRING):
            record.exit_code = record._backend_exit
        record.state = target
        record.transition_log.append((target, now))
        if record.queue_name is not None:
            self.registry.adjust_counts(
                record.queue_name,
                pending=(target in _PENDING_STATES) - (before in _PENDING_STATES),
                running=(target in _RUNNING_STATES) - (before in _RUNNING_STATES),
            )

    def advance(self, record: JobRecord, event: JobEvent) -> JobState:
        """Apply ``event`` to ``record``; illegal events freeze a live job in
        Failed and leave a terminal job untouched. Caller holds the lock."""
        try:
            target = apply_event(record.state, event, has_results=record.manifest.results is not None)
        except IllegalTransition as exc:
            if record.state.terminal:
                logger.debug("job %s: ignoring %s in terminal state", record.uid, event)
                return record.state
            logger.warning("job %s: %s; freezing in Failed", record.uid, exc)
            record.error = f"IllegalTransition: {exc}"
            self._enter(record, JobState.FAILED)
            return record.state
        if event.kind is EventKind.SUBMIT_OK:
            record.backend_job_id = event.backend_id
        elif event.kind is EventKind.BACKEND_DONE:
            record._backend_exit = event.exit_code
            if event.exit_code != 0:
                record.error = f"job exited with status {event.exit_code}"
        self._enter(record, target)
        return record.state

    # operations

    def submit_job(self, manifest: JobManifest) -> JobRecord:
        """Place and submit a job. Admission and backend failures leave the
        record in Failed with ``error`` set rather than raising."""
        record = JobRecord(uid=uuid.uuid4().hex, manifest=manifest)
        record.transition_log.append((JobState.PENDING, self._now()))
        with record.lock:
            with self._lock:
                prior = self._by_name.get(manifest.name)
                if prior is not None and not self._records[prior].state.terminal:
                    raise DuplicateJob(f"job {manifest.name!r} is still active")
                self._records[record.uid] = record
                self._by_name[manifest.name] = record.uid

            try:
                record.directives = parse_pbs_directives(manifest.batch_script)
                node = select_virtual_node(record.directives, self.registry)
            except BridgeError as exc:
                record.error = f"{exc.code}: {exc}"
                self.advance(record, SUBMIT_ERR)
                return record

            record.queue_name = node.name
            try:
                backend_id = self.adapter.submit(render_batch_script(manifest), node.name)
            except BridgeError as exc:
                record.error = f"{exc.code}: {exc}"
                self.advance(record, SUBMIT_ERR)
                return record
            self.advance(record, submit_ok(backend_id))
            return record

    def _events_for(self, record: JobRecord, status: BackendStatus) -> list[JobEvent]:
        if status.state is BackendState.UNKNOWN:
            record.unknown_polls += 1
            if record.unknown_polls < UNKNOWN_GRACE:
                return []
            return [BACKEND_FAILED]
        record.unknown_polls = 0

        if status.state in (BackendState.QUEUED, BackendState.HELD):
            observed, rank = BACKEND_QUEUED, 1
        elif status.state in (BackendState.RUNNING, BackendState.EXITING):
            observed, rank = BACKEND_RUNNING, 2
        else:
            observed, rank = backend_done(status.exit_code), 3

        # polls can miss short-lived backend states; replay the skipped ones
        current = {JobState.SUBMITTED: 0, JobState.QUEUED: 1, JobState.RUNNING: 2}.get(record.state)
        if current is None or current >= rank:
            return [] if current == rank else [observed]
        path = [BACKEND_QUEUED, BACKEND_RUNNING][current : rank - 1]
        return path + [observed]

    def _transfer(self, record: JobRecord) -> None:
        self.advance(record, TRANSFER_STARTED)
        try:
            record.result_paths = collect_results(
                record,
                record.manifest.results,
                home=self.home,
                source_home=self.source_home,
                read=self.adapter.read_file,
            )
        except TransferError as exc:
            record.error = f"{exc.code}: {exc}"
            self.advance(record, TRANSFER_ERR)
            return
        self.advance(record, TRANSFER_OK)

    def _poll(self, record: JobRecord) -> None:
        try:
            status = self.adapter.status(record.backend_job_id)
        except BackendUnavailable as exc:
            record.retry_delay = min(BACKOFF_CAP, max(BACKOFF_INITIAL, record.retry_delay * 2))
            record.next_attempt = self._now() + record.retry_delay
            logger.warning(
                "job %s: backend unavailable (%s), retry in %ss", record.uid, exc, record.retry_delay
            )
            return
        record.retry_delay = 0.0
        record.next_attempt = 0.0
        for event in self._events_for(record, status):
            self.advance(record, event)
            if record.state.terminal:
                break

    def reconcile(self, uid: str, force: bool = True) -> JobRecord:
        """Poll the backend once for this job and act on the answer.

        With ``force`` false a job still inside its backoff window is left
        alone. When the job lands in Transferring its results are copied
        before returning.
        """
        record = self.get(uid)
        with record.lock:
            if record.state.terminal or record.state is JobState.PENDING:
                return record
            if record.state is not JobState.TRANSFERRING:
                if not force and self._now() < record.next_attempt:
                    return record
                self._poll(record)
            if record.state is JobState.TRANSFERRING:
                self._transfer(record)
        return record

    def reconcile_all(self, force: bool = False) -> list[JobRecord]:
        changed = []
        for record in self.records():
            if record.state.terminal:
                continue
            before = record.state
            self.reconcile(record.uid, force=force)
            if record.state is not before:
                changed.append(record)
        return changed

    def cancel_job(self, uid: str) -> JobRecord:
        record = self.find(uid)
        with record.lock:
            if record.state.terminal:
                return record
            if record.state is JobState.SUBMITTED:
                self._poll(record)
                if record.state.terminal:
                    return record
            self.adapter.cancel(record.backend_job_id)
            self.advance(record, CANCEL_REQUESTED)
        return record

    def list_jobs(self) -> list[tuple[str, str, str]]:
        now = self._now()
        rows = []
        for record in self.records():
            state = record.state
            rows.append((record.name, format_age(now - record.created_at), state.display))
        return rows

    def run(self, stop: threading.Event, interval: float = 1.0, on_tick=None) -> None:
        """Reconcile every ``interval`` seconds until ``stop`` is set."""
        while not stop.wait(interval):
            try:
                if on_tick is not None:
                    on_tick()
                self.reconcile_all()
            except Exception:
                logger.exception("reconcile pass failed")
