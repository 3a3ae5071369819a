"""kubectl-style client (and server launcher) for the bridge socket."""

from __future__ import annotations

import datetime
import functools
import logging
import sys
import threading
import time
from contextlib import contextmanager
from pathlib import Path

import click

from . import redbox
from .adapter import TorqueAdapter
from .errors import BridgeError, ManifestError
from .lifecycle import Bridge
from .manifest import format_walltime, parse_manifest
from .registry import Registry, discover_queues
from .simbatch import SimBatchAdapter, load_cluster_config

EXIT_DOMAIN = 1
EXIT_TRANSPORT = 2


def format_table(header: list[str], rows: list[list[str]]) -> str:
    """Left-aligned columns separated by three spaces, kubectl style."""
    widths = [len(h) for h in header]
    for row in rows:
        widths = [max(w, len(cell)) for w, cell in zip(widths, row)]
    lines = []
    for row in [header, *rows]:
        cells = [cell.ljust(w) for cell, w in zip(row[:-1], widths)] + [row[-1]]
        lines.append("   ".join(cells))
    return "\n".join(lines)


def _fail(message: str, code: int):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@contextmanager
def _client(ctx: click.Context):
    path = ctx.obj["socket"]
    try:
        with redbox.RedboxClient(path) as client:
            yield client
    except redbox.TransportError as exc:
        _fail(f"cannot reach bridge at {path}: {exc}", EXIT_TRANSPORT)
    except BridgeError as exc:
        _fail(f"{exc.code}: {exc}", EXIT_DOMAIN)


@click.group()
@click.option(
    "--socket",
    "socket_path",
    envvar="WLMBRIDGE_SOCKET",
    default=redbox.DEFAULT_SOCKET,
    show_default=True,
    help="Path of the bridge's Unix socket.",
)
@click.pass_context
def main(ctx: click.Context, socket_path: str) -> None:
    """Submit and track TorqueJob manifests through a running bridge."""
    ctx.ensure_object(dict)
    ctx.obj["socket"] = socket_path


@main.command()
@click.option("-f", "--filename", required=True, type=click.Path(dir_okay=False))
@click.pass_context
def apply(ctx: click.Context, filename: str) -> None:
    """Submit the manifest in FILENAME."""
    try:
        text = Path(filename).read_text()
    except OSError as exc:
        _fail(f"cannot read {filename}: {exc}", EXIT_DOMAIN)
    try:
        manifest = parse_manifest(text)
    except ManifestError as exc:
        _fail(f"{exc.code}: {exc}", EXIT_DOMAIN)
    with _client(ctx) as client:
        job = client.submit(text)
    if job["state"] == "failed":
        _fail(f"torquejob/{manifest.name} rejected: {job['error']}", EXIT_DOMAIN)
    click.echo(f"torquejob/{manifest.name} created")
    click.echo(f"uid: {job['uid']}")


@main.command()
@click.pass_context
def get(ctx: click.Context) -> None:
    """List jobs with their age and status."""
    with _client(ctx) as client:
        jobs = client.list_jobs()
    rows = [[j["name"], j["age"], j["status"]] for j in jobs]
    click.echo(format_table(["NAME", "AGE", "STATUS"], rows))


def _format_ts(ts: float) -> str:
    if ts >= 1e9:
        return datetime.datetime.fromtimestamp(ts).isoformat(timespec="seconds")
    return f"t={ts:g}s"


@main.command()
@click.argument("name")
@click.pass_context
def describe(ctx: click.Context, name: str) -> None:
    """Show one job and its state history."""
    with _client(ctx) as client:
        job = client.status(name)
    fields = [
        ("Name", job["name"]),
        ("UID", job["uid"]),
        ("Queue", job["queue"] or "-"),
        ("Backend ID", job["backend_job_id"] or "-"),
        ("Status", job["state"]),
        ("Exit code", "-" if job["exit_code"] is None else str(job["exit_code"])),
    ]
    if job["error"]:
        fields.append(("Error", job["error"]))
    for path in job["results"]:
        fields.append(("Results", path))
    for label, value in fields:
        click.echo(f"{label + ':':<12}{value}")
    click.echo("Transitions:")
    for state, ts in job["transition_log"]:
        click.echo(f"  {_format_ts(ts):<22}{state}")


@main.command()
@click.argument("name")
@click.pass_context
def cancel(ctx: click.Context, name: str) -> None:
    """Cancel a job (no-op for finished jobs)."""
    with _client(ctx) as client:
        job = client.cancel(name)
    click.echo(f"torquejob/{job['name']} {job['state']}")


@main.command()
@click.argument("name")
@click.option("-o", "--output-dir", default=".", type=click.Path(file_okay=False))
@click.pass_context
def results(ctx: click.Context, name: str, output_dir: str) -> None:
    """Download the collected results of a job into OUTPUT_DIR."""
    with _client(ctx) as client:
        filename, data = client.fetch_results(name)
    target = Path(output_dir) / filename
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(data)
    except OSError as exc:
        _fail(f"cannot write {target}: {exc}", EXIT_DOMAIN)
    click.echo(str(target))


@main.command()
@click.pass_context
def queues(ctx: click.Context) -> None:
    """List the virtual nodes (one per backend queue)."""
    with _client(ctx) as client:
        items = client.list_queues()
    rows = [
        [
            q["name"],
            str(q["max_nodes"]),
            "-" if q["max_walltime_seconds"] is None else format_walltime(q["max_walltime_seconds"]),
            str(q["jobs_pending"]),
            str(q["jobs_running"]),
        ]
        for q in items
    ]
    click.echo(format_table(["NAME", "MAX_NODES", "MAX_WALLTIME", "PENDING", "RUNNING"], rows))


@main.command()
@click.option("--sim", "sim_config", type=click.Path(exists=True, dir_okay=False),
              help="Run against the simulated cluster described by this config.")
@click.option("--sim-output", multiple=True, metavar="MARKER=FILE",
              help="Simulated jobs whose script contains MARKER print FILE.")
@click.option("--queues", "queue_config", type=click.Path(exists=True, dir_okay=False),
              help="Static queue list for the Torque backend instead of qstat -Qf.")
@click.option("--home", type=click.Path(file_okay=False), default=None,
              help="Directory that $HOME expands to in results paths.")
@click.option("--interval", default=1.0, show_default=True, help="Reconcile period in seconds.")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def serve(ctx, sim_config, sim_output, queue_config, home, interval, verbose) -> None:
    """Run the bridge server in the foreground."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO)
    on_tick = None
    if sim_config:
        cluster = load_cluster_config(sim_config, home=home)
        for item in sim_output:
            marker, sep, path = item.partition("=")
            if not sep:
                raise click.BadParameter(f"expected MARKER=FILE, got {item!r}")
            cluster.install_output(marker, Path(path).read_bytes())
        adapter = SimBatchAdapter(cluster)
        clock = adapter.clock
        on_tick = functools.partial(adapter.tick, 1)
    else:
        adapter = TorqueAdapter(queue_config=queue_config)
        clock = time.time
    try:
        registry = Registry(discover_queues(adapter), clock=clock)
    except BridgeError as exc:
        _fail(f"{exc.code}: {exc}", EXIT_TRANSPORT)
    bridge = Bridge(registry, adapter, clock=clock, home=home)

    stop = threading.Event()
    worker = threading.Thread(target=bridge.run, args=(stop, interval, on_tick), daemon=True)
    server = redbox.serve(ctx.obj["socket"], bridge)
    worker.start()
    click.echo(f"serving {len(registry)} queue(s) on {ctx.obj['socket']}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        stop.set()
        server.server_close()


if __name__ == "__main__":
    main()
