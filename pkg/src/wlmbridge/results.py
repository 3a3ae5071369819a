"""Copy a finished job's declared output file to the user's mount path."""

from __future__ import annotations

import os
import tempfile
from collections.abc import Callable
from pathlib import Path

from .errors import DestinationUnwritable, SourceMissing
from .manifest import CreateMode, ResultsSpec, expand_variables


def _read_local(path: str) -> bytes:
    return Path(path).read_bytes()


def collect_results(
    record,
    spec: ResultsSpec,
    home: str,
    source_home: str | None = None,
    read: Callable[[str], bytes] | None = None,
) -> list[str]:
    """Transfer ``spec.from_path`` into the ``spec.host_path`` directory.

    ``source_home`` expands ``$HOME`` on the backend side (defaults to
    ``home``); ``read`` fetches the source bytes, normally the adapter's
    ``read_file``. Re-running overwrites with the same bytes.
    """
    source = expand_variables(spec.from_path, source_home or home)
    dest_dir = Path(expand_variables(spec.host_path, home))
    read = read or _read_local
    job = getattr(record, "name", "job")

    try:
        data = read(source)
    except (FileNotFoundError, IsADirectoryError, NotADirectoryError):
        raise SourceMissing(f"{job}: output file {source} does not exist") from None
    except OSError as exc:
        raise SourceMissing(f"{job}: cannot read {source}: {exc}") from None

    if not dest_dir.is_dir():
        if spec.create_mode is CreateMode.DIRECTORY:
            raise DestinationUnwritable(f"{job}: destination {dest_dir} does not exist")
        try:
            dest_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DestinationUnwritable(f"{job}: cannot create {dest_dir}: {exc}") from None

    dest = dest_dir / Path(source).name
    # write-then-rename keeps a half-written copy from ever being visible
    try:
        fd, tmp = tempfile.mkstemp(dir=dest_dir, prefix=f".{dest.name}.")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.chmod(tmp, 0o644)
            os.replace(tmp, dest)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise DestinationUnwritable(f"{job}: cannot write {dest}: {exc}") from None
    return [str(dest)]
