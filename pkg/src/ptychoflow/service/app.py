"""FastAPI wrapper around :class:`ptychoflow.endpoint.Endpoint` and its HTTP client."""

from __future__ import annotations

import logging
import threading
import time
from typing import Any

import httpx
from fastapi import FastAPI, HTTPException

from ..endpoint import Busy, CatalogError, Endpoint, NotFound, _status_dict
from .schemas import Health, RegisterRequest, RegisterResponse, RunRequest, RunResponse, TaskStatus

log = logging.getLogger(__name__)


def create_app(endpoint: Endpoint) -> FastAPI:
    app = FastAPI(title="ptychoflow endpoint")
    app.state.endpoint = endpoint

    @app.get("/health", response_model=Health)
    def health():
        tasks = list(endpoint.tasks.values())
        return Health(
            workers=endpoint.config.workers,
            queued=sum(t.status == "queued" for t in tasks),
            running=endpoint.running,
            catalog=sorted(endpoint.catalog),
        )

    @app.post("/functions", response_model=RegisterResponse)
    def register(req: RegisterRequest):
        try:
            fid = endpoint.register_function(req.name)
        except CatalogError as exc:
            raise HTTPException(404, str(exc)) from None
        return RegisterResponse(function_id=fid, name=req.name)

    @app.post("/tasks", response_model=RunResponse)
    def run(req: RunRequest):
        try:
            return RunResponse(task_id=endpoint.run(req.function_id, req.payload))
        except NotFound as exc:
            raise HTTPException(404, str(exc)) from None
        except Busy as exc:
            raise HTTPException(503, str(exc)) from None

    @app.get("/tasks/{task_id}", response_model=TaskStatus)
    def status(task_id: str):
        try:
            return TaskStatus(**_status_dict(endpoint.task_status(task_id)))
        except NotFound as exc:
            raise HTTPException(404, str(exc)) from None

    return app


class EndpointError(RuntimeError):
    def __init__(self, status: int, detail: str):
        self.status = status
        super().__init__(f"HTTP {status}: {detail}")


class HttpClient:
    """Thin client for the endpoint API; ``run`` accepts a catalog name or a function id."""

    def __init__(self, base_url: str, timeout: float = 30.0, poll: float = 0.2):
        if "://" not in base_url:
            base_url = f"http://{base_url}"
        self.http = httpx.Client(base_url=base_url, timeout=timeout)
        self.poll = poll
        self._fids: dict[str, str] = {}

    def _call(self, method: str, url: str, **kw) -> dict:
        r = self.http.request(method, url, **kw)
        if r.status_code >= 400:
            try:
                detail = r.json().get("detail", r.text)
            except ValueError:
                detail = r.text
            raise EndpointError(r.status_code, str(detail))
        return r.json()

    def health(self) -> dict:
        return self._call("GET", "/health")

    def register(self, name: str) -> str:
        return self._call("POST", "/functions", json={"name": name})["function_id"]

    def run(self, function: str, payload: Any = None, retries: int = 20) -> str:
        fid = self._fids.get(function, function)
        if fid == function and not _looks_like_uuid(function):
            fid = self._fids[function] = self.register(function)
        for attempt in range(retries):
            try:
                return self._call("POST", "/tasks", json={"function_id": fid, "payload": payload})["task_id"]
            except EndpointError as exc:
                if exc.status != 503 or attempt == retries - 1:
                    raise
                time.sleep(min(2.0, 0.1 * 2**attempt))
        raise AssertionError("unreachable")

    def status(self, task_id: str) -> dict:
        return self._call("GET", f"/tasks/{task_id}")

    def wait(self, task_id: str, timeout: float | None = None) -> dict:
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            st = self.status(task_id)
            if st["state"] in ("succeeded", "failed"):
                return st
            if deadline is not None and time.monotonic() > deadline:
                raise TimeoutError(f"task {task_id} still {st['state']} after {timeout} s")
            time.sleep(self.poll)

    def close(self):
        self.http.close()


def _looks_like_uuid(s: str) -> bool:
    return len(s) == 36 and s.count("-") == 4


class ServiceHandle:
    """Runs the API under uvicorn on a background thread."""

    def __init__(self, endpoint: Endpoint, host: str = "127.0.0.1", port: int = 0):
        import socket

        import uvicorn

        self.endpoint = endpoint
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.bind((host, port))  # raises OSError if the port is taken
        self.host, self.port = self.sock.getsockname()
        config = uvicorn.Config(create_app(endpoint), log_level="warning", lifespan="off")
        self.server = uvicorn.Server(config)
        self._thread = threading.Thread(target=self.server.run, kwargs={"sockets": [self.sock]}, daemon=True)

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self, timeout: float = 10.0) -> ServiceHandle:
        self.endpoint.start()
        self._thread.start()
        deadline = time.monotonic() + timeout
        while not self.server.started:
            if time.monotonic() > deadline or not self._thread.is_alive():
                raise RuntimeError("endpoint HTTP server failed to start")
            time.sleep(0.02)
        return self

    def stop(self):
        self.server.should_exit = True
        self._thread.join(5)
        self.endpoint.stop()
        self.sock.close()
