from __future__ import annotations

import json
import threading
import time

import pytest

from ptychoflow.endpoint import Busy, CatalogError, Endpoint, EndpointConfig, LocalClient, NotFound, TaskRecord


@pytest.fixture
def ep():
    e = Endpoint(EndpointConfig(workers=2, queue_capacity=8)).start()
    yield e
    e.stop()


def test_echo_round_trip(ep):
    fid = ep.register_function("echo")
    tid = ep.run(fid, {"a": [1, 2]})
    assert ep.task_status(tid).status in ("queued", "running", "succeeded")
    rec = ep.wait(tid, 10)
    assert rec.status == "succeeded" and rec.result == {"a": [1, 2]}
    assert set(rec.timestamps) == {"queued", "running", "succeeded"}


def test_unknown_name_lists_catalog(ep):
    with pytest.raises(CatalogError) as exc:
        ep.register_function("nope")
    for name in ("echo", "ptycho_reconstruct", "train_cycle"):
        assert name in str(exc.value)


def test_registrations_unique(ep):
    ids = {ep.register_function("ptycho_reconstruct") for _ in range(1000)}
    assert len(ids) == 1000
    a, b = list(ids)[:2]
    assert ep.functions[a].name == ep.functions[b].name == "ptycho_reconstruct"


def test_not_found(ep):
    with pytest.raises(NotFound):
        ep.run("00000000-0000-0000-0000-000000000000", {})
    with pytest.raises(NotFound):
        ep.task_status("nope")


def test_failure_records_message(ep):
    tid = ep.run(ep.register_function("echo"), {"_raise": "bad input 17"})
    rec = ep.wait(tid, 10)
    assert rec.status == "failed" and "bad input 17" in rec.error


def test_worker_bound_and_monotonic_status(ep):
    fid = ep.register_function("echo")
    tids = [ep.run(fid, {"_sleep": 0.2, "i": i}) for i in range(4)]
    seen: dict[str, list[str]] = {t: [] for t in tids}
    order = {"queued": 0, "running": 1, "succeeded": 2, "failed": 2}
    while not all(ep.task_status(t).terminal for t in tids):
        for t in tids:
            s = ep.task_status(t).status
            if not seen[t] or seen[t][-1] != s:
                seen[t].append(s)
        time.sleep(0.005)
    for t in tids:
        seen[t].append(ep.task_status(t).status)
        ranks = [order[s] for s in seen[t]]
        assert ranks == sorted(ranks)
    assert ep.max_running == 2
    spans = [(ep.tasks[t].timestamps["running"], ep.tasks[t].timestamps["succeeded"]) for t in tids]
    events = sorted([(s, 1) for s, _ in spans] + [(e, -1) for _, e in spans])
    depth = peak = 0
    for _, d in events:
        depth += d
        peak = max(peak, depth)
    assert peak <= 2


def test_busy_when_queue_full():
    ep = Endpoint(EndpointConfig(workers=1, queue_capacity=1)).start()
    try:
        fid = ep.register_function("echo")
        first = ep.run(fid, {"_sleep": 0.3})
        time.sleep(0.1)  # first is running, queue empty
        ep.run(fid, {})
        with pytest.raises(Busy):
            ep.run(fid, {})
        ep.wait(first, 5)
    finally:
        ep.stop()


def test_snapshots_are_immutable(ep):
    tid = ep.run(ep.register_function("echo"), 1)
    snap = ep.task_status(tid)
    ep.wait(tid, 5)
    assert isinstance(snap, TaskRecord)
    with pytest.raises(Exception):
        snap.status = "x"  # frozen


def test_restart_marks_running_failed_and_requeues(tmp_path):
    state = tmp_path / "ep.json"
    ep = Endpoint(EndpointConfig(1, 4), state_path=state)
    fid = ep.register_function("echo")
    running = ep.run(fid, {"n": 1})
    queued = ep.run(fid, {"n": 2})
    # simulate a crash while the first task ran: mark it running and never finish
    ep._queue.get_nowait()
    ep._transition(running, "running")
    doc = json.loads(state.read_text())
    assert doc["tasks"][running]["status"] == "running"

    ep2 = Endpoint(EndpointConfig(1, 4), state_path=state).start()
    try:
        rec = ep2.task_status(running)
        assert rec.status == "failed" and "restarted" in rec.error
        assert ep2.wait(queued, 5).result == {"n": 2}
        assert fid in ep2.functions
    finally:
        ep2.stop()


def test_no_task_lost(ep):
    fid = ep.register_function("echo")
    tids = [ep.run(fid, i) for i in range(8)]
    assert [ep.wait(t, 10).result for t in tids] == list(range(8))


def test_local_client_by_name(ep):
    c = LocalClient(ep)
    st = c.wait(c.run("echo", {"x": 1}), 5)
    assert st["state"] == "succeeded" and st["result"] == {"x": 1}


def test_config_validation():
    with pytest.raises(ValueError):
        EndpointConfig(workers=0)
    with pytest.raises(ValueError):
        EndpointConfig(workers=4, queue_capacity=2)


def test_wait_timeout(ep):
    tid = ep.run(ep.register_function("echo"), {"_sleep": 1.0})
    with pytest.raises(TimeoutError):
        ep.wait(tid, 0.05)
    ep.wait(tid, 5)


def test_reconstruct_and_train_tasks(tmp_path, ep):
    from ptychoflow.simlab import SimulationConfig, simulate
    from ptychoflow.xfer import write_dataset

    sim = simulate(SimulationConfig(n=16, scan="grid", step_nm=320.0, frame_dim=16, probe_fwhm_nm=800.0))
    write_dataset(tmp_path / "ds", [f.to_body() for f in sim.frames], sim.index_meta())
    c = LocalClient(ep)
    st = c.wait(c.run("ptycho_reconstruct", {"dataset": str(tmp_path / "ds"), "out_dir": str(tmp_path / "out"), "config": {"iterations": 3}}), 60)
    assert st["state"] == "succeeded", st["error"]
    assert st["result"]["pairs"] == 16 and st["result"]["iterations"] == 3
    hyper = {"input_dim": 16, "encoder": [2, 2, 2], "decoder": [2, 2, 2], "epochs": 2}
    st = c.wait(
        c.run("train_cycle", {"pairs_dir": st["result"]["pairs_dir"], "hyper": hyper, "checkpoint_out": str(tmp_path / "c.pnnc")}),
        120,
    )
    assert st["state"] == "succeeded", st["error"]
    assert st["result"]["dataset_size"] == 16 and (tmp_path / "c.pnnc").exists()
