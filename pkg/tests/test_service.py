from __future__ import annotations

import socket

import pytest
from fastapi.testclient import TestClient

from ptychoflow.endpoint import Endpoint, EndpointConfig
from ptychoflow.service import EndpointError, HttpClient, ServiceHandle, create_app


@pytest.fixture
def api():
    ep = Endpoint(EndpointConfig(1, 1)).start()
    with TestClient(create_app(ep)) as client:
        yield client, ep
    ep.stop()


def test_http_register_run_status(api):
    client, _ = api
    fid = client.post("/functions", json={"name": "echo"}).json()["function_id"]
    tid = client.post("/tasks", json={"function_id": fid, "payload": {"a": 1}}).json()["task_id"]
    st = client.get(f"/tasks/{tid}").json()
    assert st["state"] in ("queued", "running", "succeeded") and st["task_id"] == tid
    h = client.get("/health").json()
    assert h["ok"] and "echo" in h["catalog"]


def test_http_error_codes(api):
    client, ep = api
    r = client.post("/functions", json={"name": "nope"})
    assert r.status_code == 404 and "echo" in r.json()["detail"]
    assert client.post("/tasks", json={"function_id": "x", "payload": None}).status_code == 404
    assert client.get("/tasks/none").status_code == 404
    assert client.post("/functions", json={}).status_code == 422
    fid = ep.register_function("echo")
    first = ep.run(fid, {"_sleep": 0.5})
    import time

    time.sleep(0.1)
    ep.run(fid, {})
    assert client.post("/tasks", json={"function_id": fid, "payload": {}}).status_code == 503
    ep.wait(first, 5)


def test_service_handle_and_http_client():
    svc = ServiceHandle(Endpoint(EndpointConfig(2, 8))).start()
    try:
        c = HttpClient(svc.url)
        st = c.wait(c.run("echo", {"z": 3}), 10)
        assert st["state"] == "succeeded" and st["result"] == {"z": 3}
        fid = c.register("echo")
        assert c.wait(c.run(fid, [1]), 10)["result"] == [1]
        with pytest.raises(EndpointError) as exc:
            c.register("nope")
        assert exc.value.status == 404
        assert c.health()["workers"] == 2
        c.close()
    finally:
        svc.stop()


def test_port_in_use_is_oserror():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    s.listen()
    try:
        with pytest.raises(OSError):
            ServiceHandle(Endpoint(), port=s.getsockname()[1])
    finally:
        s.close()
