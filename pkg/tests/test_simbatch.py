import random

import pytest

from conftest import cow_output
from wlmbridge.adapter import QUEUED, RUNNING, UNKNOWN, BackendState, BackendStatus
from wlmbridge.errors import MalformedConfig, NodesExceedQueue, NoSuchJob, NoSuchQueue, WalltimeExceedsQueue
from wlmbridge.registry import QueueSpec
from wlmbridge.simbatch import (
    WALLTIME_KILL_EXIT,
    SimBatchAdapter,
    SimCluster,
    load_cluster_config,
    parse_sim_directives,
)

COW_SCRIPT = (
    "#!/bin/sh\n"
    "#PBS -l walltime=00:30:00\n"
    "#PBS -l nodes=1\n"
    "#PBS -e $HOME/low.err\n"
    "#PBS -o $HOME/low.out\n"
    "#SIM runtime=5\n"
    "export PATH=$PATH:/usr/local/bin\n"
    "singularity run lolcow_latest.sif\n"
)


def job(runtime=0, nodes=1, walltime=None, exit_code=0, out=None):
    lines = ["#!/bin/sh", f"#PBS -l nodes={nodes}"]
    if walltime is not None:
        lines.append(f"#PBS -l walltime={walltime // 3600:02d}:{walltime % 3600 // 60:02d}:{walltime % 60:02d}")
    if out:
        lines.append(f"#PBS -o {out}")
    lines += [f"#SIM runtime={runtime} exit={exit_code}", "true"]
    return "\n".join(lines) + "\n"


def cluster(tmp_path, *queues):
    return SimCluster(list(queues), home=tmp_path)


def batch(n=4, walltime=3600):
    return QueueSpec("batch", max_nodes=n, max_walltime_seconds=walltime, node_names=tuple(f"n{i}" for i in range(1, n + 1)))


class TestConfig:
    def test_batch_four_nodes(self, tmp_path):
        config = tmp_path / "c.yaml"
        config.write_text("queues:\n  - name: batch\n    max_walltime: 3600\n    nodes: [n1, n2, n3, n4]\n")
        c = load_cluster_config(config, home=tmp_path)
        assert c.clock == 0
        assert c.free_nodes("batch") == ["n1", "n2", "n3", "n4"]
        assert not c.running and not c.jobs

    def test_empty_queue_list(self, tmp_path):
        config = tmp_path / "c.yaml"
        config.write_text("queues: []\n")
        c = load_cluster_config(config, home=tmp_path)
        with pytest.raises(NoSuchQueue):
            c.submit("true\n", "batch")

    def test_empty_file(self, tmp_path):
        config = tmp_path / "c.yaml"
        config.write_text("")
        assert load_cluster_config(config).queues == []

    @pytest.mark.parametrize(
        "text",
        [
            "queues: 3\n",
            "queues:\n  - {max_walltime: 10, nodes: [n1]}\n",
            "queues:\n  - {name: a, nodes: n1}\n",
            "queues:\n  - {name: a, nodes: []}\n",
            "queues:\n  - {name: a, max_walltime: '1:00', nodes: [n1]}\n",
            "queues:\n  - {name: a, nodes: [n1]}\n  - {name: a, nodes: [n2]}\n",
            "queues: [unclosed\n",
        ],
    )
    def test_malformed(self, tmp_path, text):
        config = tmp_path / "c.yaml"
        config.write_text(text)
        with pytest.raises(MalformedConfig):
            load_cluster_config(config)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MalformedConfig):
            load_cluster_config(tmp_path / "nope.yaml")

    def test_shared_node_contention(self, tmp_path):
        a = QueueSpec("a", max_nodes=2, node_names=("n1", "shared"))
        b = QueueSpec("b", max_nodes=2, node_names=("shared", "n3"))
        c = cluster(tmp_path, a, b)
        assert "shared" in c.free_nodes("a") and "shared" in c.free_nodes("b")
        c.submit(job(runtime=3, nodes=2), "a")
        c.tick(1)
        assert c.free_nodes("a") == []
        assert c.free_nodes("b") == ["n3"]
        c.submit(job(runtime=1, nodes=2), "b")
        c.tick(1)
        # b's two-node job waits for the shared node
        assert c.status("2.sim") == QUEUED
        c.tick(2)  # a's job finishes at t=3
        c.tick(1)
        assert c.status("2.sim").state in (BackendState.RUNNING, BackendState.DONE)
        starts = [e for e in c.event_log if e[1] == "start"]
        assert starts == [(0, "start", "1.sim", ("n1", "shared")), (3, "start", "2.sim", ("shared", "n3"))]


class TestSubmit:
    def test_cow_queued(self, tmp_path):
        c = cluster(tmp_path, batch())
        assert c.submit(COW_SCRIPT, "batch") == "1.sim"
        assert c.status("1.sim") == QUEUED
        assert c.jobs["1.sim"].declared_runtime == 5

    def test_too_many_nodes(self, tmp_path):
        c = cluster(tmp_path, batch(4))
        with pytest.raises(NodesExceedQueue):
            c.submit(job(nodes=9), "batch")

    def test_walltime_over_limit(self, tmp_path):
        c = cluster(tmp_path, batch(walltime=3600))
        with pytest.raises(WalltimeExceedsQueue):
            c.submit(job(walltime=7200), "batch")

    def test_unknown_queue(self, tmp_path):
        with pytest.raises(NoSuchQueue):
            cluster(tmp_path, batch()).submit(job(), "other")

    def test_ids_strictly_increasing(self, tmp_path):
        c = cluster(tmp_path, batch())
        ids = [c.submit(job(), "batch") for _ in range(50)]
        numbers = [int(i.split(".")[0]) for i in ids]
        assert numbers == sorted(set(numbers))
        assert all(i.endswith(".sim") for i in ids)

    def test_sim_directive_defaults(self):
        assert parse_sim_directives("#!/bin/sh\ntrue\n") == {"runtime": 0, "exit": 0}
        assert parse_sim_directives("#SIM runtime=7\n#SIM exit=3\n") == {"runtime": 7, "exit": 3}


class TestTick:
    def test_single_job(self, tmp_path):
        c = cluster(tmp_path, batch())
        c.submit(job(runtime=5, out="$HOME/o.txt"), "batch")
        c.tick(4)
        assert c.status("1.sim") == RUNNING
        c.tick(1)
        assert c.status("1.sim") == BackendStatus.done(0)
        assert (tmp_path / "o.txt").read_bytes() == b"1.sim exit=0\n"

    def test_walltime_kill(self, tmp_path):
        c = cluster(tmp_path, batch())
        c.submit(job(runtime=100, walltime=10), "batch")
        c.tick(9)
        assert c.status("1.sim") == RUNNING
        events = c.tick(1)
        assert events == [(10, "killed", "1.sim", WALLTIME_KILL_EXIT)]
        assert c.status("1.sim") == BackendStatus.done(271)

    def test_fifo_schedule_by_hand(self, tmp_path):
        c = cluster(tmp_path, batch(2))
        for _ in range(3):
            c.submit(job(runtime=1), "batch")
        done_at = {}
        for t in range(1, 5):
            for ev in c.tick(1):
                if ev[1] == "done":
                    done_at[ev[2]] = t
        assert done_at == {"1.sim": 1, "2.sim": 1, "3.sim": 2}

    def test_strict_fifo_no_backfill(self, tmp_path):
        c = cluster(tmp_path, batch(2))
        c.submit(job(runtime=5, nodes=1), "batch")
        c.submit(job(runtime=1, nodes=2), "batch")  # blocked head
        c.submit(job(runtime=1, nodes=1), "batch")  # would fit, must wait
        c.tick(1)
        assert c.status("3.sim") == QUEUED

    def test_nonzero_exit(self, tmp_path):
        c = cluster(tmp_path, batch())
        c.submit(job(runtime=2, exit_code=3), "batch")
        c.tick(2)
        assert c.status("1.sim") == BackendStatus.done(3)

    def test_installed_output(self, tmp_path):
        c = cluster(tmp_path, batch())
        c.install_output("lolcow_latest.sif", cow_output())
        c.submit(COW_SCRIPT, "batch")
        c.tick(5)
        assert (tmp_path / "low.out").read_bytes() == cow_output()
        assert (tmp_path / "low.err").read_bytes() == b""

    def test_tick_requires_positive(self, tmp_path):
        with pytest.raises(ValueError):
            cluster(tmp_path, batch()).tick(0)


class TestStatusCancel:
    def test_status_before_tick(self, tmp_path):
        c = cluster(tmp_path, batch())
        c.submit(job(), "batch")
        assert c.status("1.sim") == QUEUED

    def test_cancel_pending(self, tmp_path):
        c = cluster(tmp_path, batch())
        c.submit(job(), "batch")
        c.cancel("1.sim")
        with pytest.raises(NoSuchJob):
            c.status("1.sim")
        assert SimBatchAdapter(c).status("1.sim") == UNKNOWN
        assert not c.pending["batch"]

    def test_cancel_running_frees_exactly_its_nodes(self, tmp_path):
        c = cluster(tmp_path, batch(4))
        c.submit(job(runtime=10, nodes=2), "batch")
        c.submit(job(runtime=10, nodes=1), "batch")
        c.tick(1)
        assert len(c.free_nodes("batch")) == 1
        c.cancel("1.sim")
        assert len(c.free_nodes("batch")) == 3
        assert c.node_pool["n3"] == "2.sim"

    def test_cancel_unknown(self, tmp_path):
        with pytest.raises(NoSuchJob):
            cluster(tmp_path, batch()).cancel("9.sim")

    def test_cancel_finished_is_noop(self, tmp_path):
        c = cluster(tmp_path, batch())
        c.submit(job(runtime=1), "batch")
        c.tick(1)
        c.cancel("1.sim")
        assert c.status("1.sim") == BackendStatus.done(0)

    def test_adapter_cancel_twice(self, tmp_path):
        a = SimBatchAdapter(cluster(tmp_path, batch()))
        a.submit(job(), "batch")
        a.cancel("1.sim")
        a.cancel("1.sim")
        with pytest.raises(NoSuchJob):
            a.cancel("2.sim")


def random_workload(seed: int, n_jobs: int = 200):
    rng = random.Random(seed)
    queues = [
        QueueSpec("small", max_nodes=2, max_walltime_seconds=50, node_names=("n1", "n2")),
        QueueSpec("mid", max_nodes=4, max_walltime_seconds=200, node_names=("n2", "n3", "n4", "n5")),
        QueueSpec("big", max_nodes=4, max_walltime_seconds=None, node_names=("n5", "n6", "n7", "n8")),
    ]
    plan = []
    for _ in range(n_jobs):
        qs = rng.choice(queues)
        plan.append(
            (
                rng.randrange(0, 60),  # submit tick
                qs.name,
                rng.randint(1, qs.max_nodes),
                rng.randint(0, 40),
                rng.choice([None, rng.randint(1, qs.max_walltime_seconds or 300)]),
            )
        )
    return queues, sorted(plan, key=lambda p: p[0])


def run_workload(tmp_path, seed: int):
    queues, plan = random_workload(seed)
    c = SimCluster(queues, home=tmp_path)
    submitted = []
    i = 0
    for t in range(2000):
        while i < len(plan) and plan[i][0] <= t:
            _, qname, nodes, runtime, walltime = plan[i]
            sim_id = c.submit(job(runtime=runtime, nodes=nodes, walltime=walltime), qname)
            submitted.append((sim_id, qname))
            i += 1
        c.tick(1)  # audits every tick
        if i == len(plan) and not c.running and not any(c.pending.values()):
            break
    return c, submitted


def test_random_workload_invariants(tmp_path):
    c, submitted = run_workload(tmp_path, seed=7)
    starts = [e[2] for e in c.event_log if e[1] == "start"]
    for qname in ("small", "mid", "big"):
        order = [s for s, qn in submitted if qn == qname]
        assert [s for s in starts if s in order] == order
    assert all(c.jobs[s].state.state is BackendState.DONE for s, _ in submitted)


def test_replay_determinism(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    first, _ = run_workload(tmp_path / "a", seed=11)
    second, _ = run_workload(tmp_path / "b", seed=11)
    assert first.event_log == second.event_log
