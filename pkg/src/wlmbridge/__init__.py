"""Bridge TorqueJob manifests onto PBS/Torque batch queues."""

from .lifecycle import Bridge, JobRecord, JobState
from .manifest import JobManifest, PbsDirectives, ResultsSpec, parse_manifest, parse_pbs_directives
from .registry import QueueSpec, Registry

__all__ = [
    "Bridge",
    "JobManifest",
    "JobRecord",
    "JobState",
    "PbsDirectives",
    "QueueSpec",
    "Registry",
    "ResultsSpec",
    "parse_manifest",
    "parse_pbs_directives",
]
