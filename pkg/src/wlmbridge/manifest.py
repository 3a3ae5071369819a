"""TorqueJob manifests and the PBS batch scripts they carry.

A manifest is a small YAML document::

    apiVersion: wlm.sylabs.io/v1alpha1
    kind: TorqueJob
    metadata:
      name: cow
    spec:
      batch: |
        #!/bin/sh
        #PBS -l walltime=00:30:00
        ...
    results:
      from: $HOME/low.out
      mount:
        name: data
        hostPath:
          path: $HOME/
          type: DirectoryOrCreate

The batch script is kept verbatim; only its ``#PBS`` prologue is read here.
"""

from __future__ import annotations

import enum
import json
import re
import shlex
from dataclasses import dataclass, field

import yaml

from .errors import (
    InvalidField,
    MalformedDirective,
    MalformedManifest,
    MalformedWalltime,
    MissingField,
    UnknownVariable,
    UnsupportedKind,
)

KIND = "TorqueJob"
DEFAULT_API_VERSION = "wlm.sylabs.io/v1alpha1"

NAME_RE = re.compile(r"^[a-z0-9-]{1,63}$")
WALLTIME_RE = re.compile(r"^(\d+):(\d{2}):(\d{2})$")
_VAR_RE = re.compile(r"\$(?:\{([A-Za-z_][A-Za-z0-9_]*)\}|([A-Za-z_][A-Za-z0-9_]*))")
_GLOB_CHARS = set("*?[")


class CreateMode(str, enum.Enum):
    DIRECTORY_OR_CREATE = "DirectoryOrCreate"
    DIRECTORY = "Directory"


@dataclass(frozen=True)
class ResultsSpec:
    from_path: str
    host_path: str
    mount_name: str = "data"
    create_mode: CreateMode = CreateMode.DIRECTORY_OR_CREATE


@dataclass(frozen=True)
class JobManifest:
    name: str
    batch_script: str
    results: ResultsSpec | None = None
    api_version: str = DEFAULT_API_VERSION
    kind: str = KIND


@dataclass(frozen=True)
class PbsDirectives:
    walltime_seconds: int | None = None
    node_count: int | None = None
    stderr_path: str | None = None
    stdout_path: str | None = None
    queue_name: str | None = None
    raw_directives: tuple[str, ...] = field(default_factory=tuple)


# walltime


def parse_walltime(text: str) -> int:
    """Convert an ``HH:MM:SS`` walltime to seconds."""
    m = WALLTIME_RE.match(text.strip()) if isinstance(text, str) else None
    if m is None:
        raise MalformedWalltime(f"walltime {text!r} is not HH:MM:SS")
    hours, minutes, seconds = (int(g) for g in m.groups())
    if minutes > 59 or seconds > 59:
        raise MalformedWalltime(f"walltime {text!r} has a field above 59")
    return hours * 3600 + minutes * 60 + seconds


def format_walltime(seconds: int) -> str:
    if seconds < 0:
        raise ValueError("walltime cannot be negative")
    hours, rest = divmod(int(seconds), 3600)
    minutes, secs = divmod(rest, 60)
    return f"{hours:02d}:{minutes:02d}:{secs:02d}"


# directives


def _directive_updates(line: str) -> list[tuple[str, object]] | None:
    """Structured updates for one ``#PBS`` line, or None if any option on it
    is not one we model (the whole line then stays raw)."""
    body = line.lstrip()[len("#PBS"):]
    try:
        tokens = shlex.split(body, comments=False, posix=True)
    except ValueError as exc:
        raise MalformedDirective(f"cannot tokenize {line.strip()!r}: {exc}") from None
    if not tokens:
        return None

    updates: list[tuple[str, object]] = []
    i = 0
    while i < len(tokens):
        opt = tokens[i]
        if opt not in ("-l", "-e", "-o", "-q"):
            return None
        if i + 1 >= len(tokens):
            raise MalformedDirective(f"option {opt} without a value in {line.strip()!r}")
        value = tokens[i + 1]
        i += 2
        if opt == "-e":
            updates.append(("stderr_path", value))
        elif opt == "-o":
            updates.append(("stdout_path", value))
        elif opt == "-q":
            updates.append(("queue_name", value))
        else:
            for item in value.split(","):
                key, sep, val = item.partition("=")
                if not sep or not key or not val:
                    raise MalformedDirective(f"-l expects key=value, got {item!r}")
                if key == "walltime":
                    updates.append(("walltime_seconds", parse_walltime(val)))
                elif key == "nodes":
                    m = re.match(r"^(\d+)(?::.*)?$", val)
                    if m is None:
                        return None
                    count = int(m.group(1))
                    if count < 1:
                        raise MalformedDirective(f"nodes must be >= 1, got {val!r}")
                    updates.append(("node_count", count))
                else:
                    return None
    return updates


def prologue_lines(script: str, prefix: str):
    """Yield the lines starting with ``prefix`` that sit in the script's
    prologue, i.e. before the first executable line."""
    for line in script.splitlines():
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith(prefix) and (
            len(stripped) == len(prefix) or stripped[len(prefix)].isspace()
        ):
            yield line
        elif stripped.startswith("#"):
            continue
        else:
            return


def parse_pbs_directives(batch_script: str) -> PbsDirectives:
    values: dict[str, object] = {}
    raw: list[str] = []
    for line in prologue_lines(batch_script, "#PBS"):
        updates = _directive_updates(line)
        if updates is None:
            raw.append(line)
            continue
        for key, value in updates:
            values[key] = value  # last wins
    return PbsDirectives(raw_directives=tuple(raw), **values)


# variables


def expand_variables(path: str, home: str) -> str:
    """Substitute ``$HOME`` / ``${HOME}``; any other variable is an error."""
    if not str(home).startswith("/"):
        raise ValueError(f"home must be absolute, got {home!r}")

    def repl(m: re.Match) -> str:
        name = m.group(1) or m.group(2)
        if name != "HOME":
            raise UnknownVariable(f"unsupported variable ${name} in {path!r}")
        return str(home)

    return _VAR_RE.sub(repl, path)


# manifest parse / render


def _normalize_script(text: str) -> str:
    return text.rstrip("\n") + "\n"


def _get(mapping, path: str):
    node = mapping
    for key in path.split("."):
        if not isinstance(node, dict) or key not in node:
            return None
        node = node[key]
    return node


def _require_str(doc, path: str) -> str:
    value = _get(doc, path)
    if value is None:
        raise MissingField(f"{path} is required")
    if not isinstance(value, str):
        raise InvalidField(f"{path} must be a string, got {type(value).__name__}")
    return value


def _parse_results(doc) -> ResultsSpec | None:
    if "results" not in doc or doc["results"] is None:
        return None
    if not isinstance(doc["results"], dict):
        raise InvalidField("results must be a mapping")
    from_path = _require_str(doc, "results.from")
    host_path = _require_str(doc, "results.mount.hostPath.path")
    mount_name = _get(doc, "results.mount.name")
    mode = _get(doc, "results.mount.hostPath.type")
    if not from_path.strip() or not host_path.strip():
        raise InvalidField("results.from and results.mount.hostPath.path must be non-empty")
    if from_path.endswith("/") or _GLOB_CHARS & set(from_path):
        raise InvalidField(f"results.from must name a single file, got {from_path!r}")
    try:
        create_mode = CreateMode(mode) if mode is not None else CreateMode.DIRECTORY_OR_CREATE
    except ValueError:
        raise InvalidField(f"unsupported hostPath type {mode!r}") from None
    return ResultsSpec(
        from_path=from_path,
        host_path=host_path,
        mount_name=str(mount_name) if mount_name is not None else "data",
        create_mode=create_mode,
    )


def validate_manifest(m: JobManifest) -> None:
    if m.kind != KIND:
        raise UnsupportedKind(f"kind {m.kind!r} is not {KIND!r}")
    if not m.api_version:
        raise MissingField("apiVersion is required")
    if not NAME_RE.match(m.name):
        raise InvalidField(
            f"metadata.name {m.name!r} must be 1-63 lowercase alphanumerics or hyphens"
        )
    if not m.batch_script.strip():
        raise MissingField("spec.batch is empty")


def parse_manifest(text: str) -> JobManifest:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise MalformedManifest(f"not valid YAML: {exc}") from None
    if not isinstance(doc, dict):
        raise MalformedManifest("manifest must be a mapping")

    kind = doc.get("kind")
    if kind is None:
        raise MissingField("kind is required")
    if kind != KIND:
        raise UnsupportedKind(f"kind {kind!r} is not {KIND!r}")

    manifest = JobManifest(
        api_version=_require_str(doc, "apiVersion"),
        kind=kind,
        name=_require_str(doc, "metadata.name"),
        batch_script=_normalize_script(_require_str(doc, "spec.batch")),
        results=_parse_results(doc),
    )
    validate_manifest(manifest)
    return manifest


def render_batch_script(manifest: JobManifest) -> str:
    """The script handed to the backend, exactly as authored."""
    return manifest.batch_script


def _scalar(value: str) -> str:
    plain_ok = (
        value
        and value == value.strip()
        and "\n" not in value
        and "#" not in value
        and not value.startswith(("'", '"', "&", "*", "!", "|", ">", "%", "@", "`", "{", "["))
    )
    if plain_ok:
        try:
            if yaml.safe_load(value) == value:
                return value
        except yaml.YAMLError:
            pass
    return json.dumps(value)


def serialize_manifest(m: JobManifest) -> str:
    lines = [
        f"apiVersion: {_scalar(m.api_version)}",
        f"kind: {_scalar(m.kind)}",
        "metadata:",
        f"  name: {_scalar(m.name)}",
        "spec:",
    ]
    body = m.batch_script.rstrip("\n").split("\n")
    first = next((ln for ln in body if ln.strip()), "")
    # explicit indentation indicator when the content itself starts indented
    header = "|2" if first[:1] == " " else "|"
    lines.append(f"  batch: {header}")
    lines.extend(f"    {ln}" if ln else "" for ln in body)
    if m.results is not None:
        r = m.results
        lines += [
            "results:",
            f"  from: {_scalar(r.from_path)}",
            "  mount:",
            f"    name: {_scalar(r.mount_name)}",
            "    hostPath:",
            f"      path: {_scalar(r.host_path)}",
            f"      type: {r.create_mode.value}",
        ]
    return "\n".join(lines) + "\n"
