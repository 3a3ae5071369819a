"""Backend adapter contract and the qsub/qstat/qdel implementation."""

from __future__ import annotations

import enum
import logging
import os
import re
import subprocess
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import yaml

from .errors import BackendUnavailable, MalformedConfig, MalformedWalltime
from .manifest import parse_walltime
from .registry import QueueSpec

logger = logging.getLogger(__name__)

EXEC_TIMEOUT = 30.0


class BackendState(str, enum.Enum):
    QUEUED = "Queued"
    RUNNING = "Running"
    EXITING = "Exiting"
    DONE = "Done"
    HELD = "Held"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class BackendStatus:
    state: BackendState
    exit_code: int | None = None

    def __post_init__(self) -> None:
        if (self.state is BackendState.DONE) != (self.exit_code is not None):
            raise ValueError("exactly the Done status carries an exit code")

    @classmethod
    def done(cls, exit_code: int) -> BackendStatus:
        return cls(BackendState.DONE, int(exit_code))

    def __str__(self) -> str:
        if self.state is BackendState.DONE:
            return f"Done({self.exit_code})"
        return self.state.value


QUEUED = BackendStatus(BackendState.QUEUED)
RUNNING = BackendStatus(BackendState.RUNNING)
EXITING = BackendStatus(BackendState.EXITING)
HELD = BackendStatus(BackendState.HELD)
UNKNOWN = BackendStatus(BackendState.UNKNOWN)


class Adapter(Protocol):
    def submit(self, script: str, queue: str) -> str: ...

    def status(self, backend_id: str) -> BackendStatus: ...

    def cancel(self, backend_id: str) -> None: ...

    def read_file(self, path: str) -> bytes: ...

    def queues(self) -> list[QueueSpec]: ...


# qstat -f parsing

_LETTERS = {"Q": QUEUED, "R": RUNNING, "E": EXITING, "H": HELD}


def parse_qstat_full(text: str) -> dict[str, str]:
    """Parse ``qstat -f`` long format into ``{attribute: value}``.

    Attribute lines read ``    name = value``. qstat wraps long values
    onto tab-indented continuation lines, which are appended to the
    previous value.
    """
    attrs: dict[str, str] = {}
    last = None
    for line in text.splitlines():
        if not line.strip():
            continue
        if line.startswith("Job Id:"):
            attrs["Job Id"] = line.split(":", 1)[1].strip()
            last = None
            continue
        m = re.match(r"^ +([A-Za-z_][\w.]*) = ?(.*)$", line)
        if m:
            last = m.group(1)
            attrs[last] = m.group(2).strip()
        elif last is not None and line[:1] in (" ", "\t"):
            attrs[last] += line.strip()
    return attrs


def status_from_qstat(text: str) -> BackendStatus:
    """Map one job's ``qstat -f`` transcript to a BackendStatus; never raises."""
    attrs = parse_qstat_full(text)
    letter = attrs.get("job_state", "").strip()
    if letter == "C":
        try:
            return BackendStatus.done(int(attrs["exit_status"]))
        except (KeyError, ValueError):
            return UNKNOWN
    return _LETTERS.get(letter, UNKNOWN)


def _int_prefix(text: str | None) -> int | None:
    m = re.match(r"^\s*(\d+)", text or "")
    return int(m.group(1)) if m else None


def parse_qstat_queues(text: str, default_max_nodes: int = 1) -> list[QueueSpec]:
    """Parse ``qstat -Qf`` output into queue specs."""
    queues = []
    blocks = re.split(r"^Queue:\s*", text, flags=re.M)
    for block in blocks[1:]:
        name, _, rest = block.partition("\n")
        attrs = parse_qstat_full(rest)
        walltime = attrs.get("resources_max.walltime")
        try:
            max_walltime = parse_walltime(walltime) if walltime else None
        except MalformedWalltime:
            max_walltime = None
        max_nodes = (
            _int_prefix(attrs.get("resources_max.nodect"))
            or _int_prefix(attrs.get("resources_max.nodes"))
            or default_max_nodes
        )
        queues.append(
            QueueSpec(name=name.strip(), max_nodes=max_nodes, max_walltime_seconds=max_walltime)
        )
    return queues


def load_queue_config(path: str | os.PathLike) -> list[QueueSpec]:
    """Read the ``queues:`` list shared with the simulator config format."""
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise MalformedConfig(f"cannot read {path}: {exc}") from None
    return queues_from_config(doc)


def queues_from_config(doc) -> list[QueueSpec]:
    if not isinstance(doc, dict) or not isinstance(doc.get("queues", []), list):
        raise MalformedConfig("config must be a mapping with a 'queues' list")
    queues = []
    for entry in doc.get("queues") or []:
        if not isinstance(entry, dict) or not entry.get("name"):
            raise MalformedConfig(f"queue entry needs a name: {entry!r}")
        nodes = entry.get("nodes") or []
        if not isinstance(nodes, list) or not all(isinstance(n, str) for n in nodes):
            raise MalformedConfig(f"queue {entry['name']}: nodes must be a list of names")
        walltime = entry.get("max_walltime")
        try:
            if isinstance(walltime, str):
                walltime = parse_walltime(walltime)
            elif walltime is not None and (not isinstance(walltime, int) or walltime < 0):
                raise MalformedConfig(f"queue {entry['name']}: bad max_walltime {walltime!r}")
            max_nodes = entry.get("max_nodes", len(nodes))
            queues.append(
                QueueSpec(
                    name=str(entry["name"]),
                    max_nodes=max_nodes,
                    max_walltime_seconds=walltime,
                    node_names=tuple(nodes),
                )
            )
        except (MalformedWalltime, ValueError, TypeError) as exc:
            raise MalformedConfig(f"queue {entry['name']}: {exc}") from None
    return queues


class TorqueAdapter:
    """Drives a real Torque/PBS installation through its command-line tools.

    Binary paths default to ``qsub``/``qstat``/``qdel`` and can be overridden
    through ``WLMBRIDGE_QSUB``/``WLMBRIDGE_QSTAT``/``WLMBRIDGE_QDEL``.
    """

    def __init__(
        self,
        qsub: str | None = None,
        qstat: str | None = None,
        qdel: str | None = None,
        timeout: float = EXEC_TIMEOUT,
        queue_config: str | os.PathLike | None = None,
    ) -> None:
        self.qsub = qsub or os.environ.get("WLMBRIDGE_QSUB", "qsub")
        self.qstat = qstat or os.environ.get("WLMBRIDGE_QSTAT", "qstat")
        self.qdel = qdel or os.environ.get("WLMBRIDGE_QDEL", "qdel")
        self.timeout = timeout
        self.queue_config = queue_config
        self._completed: dict[str, int] = {}
        self._lock = threading.Lock()

    def _run(self, argv: list[str]) -> subprocess.CompletedProcess:
        logger.debug("exec %s", argv)
        try:
            return subprocess.run(
                argv, capture_output=True, text=True, timeout=self.timeout, check=False
            )
        except subprocess.TimeoutExpired:
            raise BackendUnavailable(f"{argv[0]} timed out after {self.timeout}s") from None
        except OSError as exc:
            raise BackendUnavailable(f"cannot run {argv[0]}: {exc}") from None

    def submit(self, script: str, queue: str) -> str:
        with tempfile.NamedTemporaryFile("w", suffix=".pbs", delete=False) as fh:
            fh.write(script)
            script_path = fh.name
        try:
            proc = self._run([self.qsub, "-q", queue, script_path])
        finally:
            os.unlink(script_path)
        if proc.returncode != 0:
            raise BackendUnavailable(
                f"qsub exited with {proc.returncode}: {proc.stderr.strip()}", stderr=proc.stderr
            )
        lines = proc.stdout.strip().splitlines()
        if not lines or not lines[0].strip():
            raise BackendUnavailable("qsub printed no job id", stderr=proc.stderr)
        return lines[0].strip()

    def status(self, backend_id: str) -> BackendStatus:
        proc = self._run([self.qstat, "-f", backend_id])
        if proc.returncode != 0:
            if "unknown job id" in proc.stderr.lower():
                with self._lock:
                    code = self._completed.get(backend_id)
                return BackendStatus.done(code) if code is not None else UNKNOWN
            raise BackendUnavailable(
                f"qstat exited with {proc.returncode}: {proc.stderr.strip()}", stderr=proc.stderr
            )
        status = status_from_qstat(proc.stdout)
        if status.state is BackendState.DONE:
            with self._lock:
                self._completed[backend_id] = status.exit_code
        return status

    _FINISHED_MARKERS = ("already completed", "invalid state for job - complete", "job has finished")

    def cancel(self, backend_id: str) -> None:
        proc = self._run([self.qdel, backend_id])
        if proc.returncode == 0:
            return
        err = proc.stderr.lower()
        if any(marker in err for marker in self._FINISHED_MARKERS):
            return
        with self._lock:
            seen_done = backend_id in self._completed
        if seen_done and "unknown job id" in err:
            return
        raise BackendUnavailable(
            f"qdel exited with {proc.returncode}: {proc.stderr.strip()}", stderr=proc.stderr
        )

    def read_file(self, path: str) -> bytes:
        return Path(path).read_bytes()

    def queues(self) -> list[QueueSpec]:
        if self.queue_config is not None:
            return load_queue_config(self.queue_config)
        proc = self._run([self.qstat, "-Qf"])
        if proc.returncode != 0:
            raise BackendUnavailable(
                f"qstat -Qf exited with {proc.returncode}: {proc.stderr.strip()}",
                stderr=proc.stderr,
            )
        return parse_qstat_queues(proc.stdout)
