"""Compute endpoint: function registry over a fixed task catalog, bounded worker pool."""

from __future__ import annotations

import json
import logging
import os
import queue
import threading
import time
import uuid
from collections.abc import Callable
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

log = logging.getLogger(__name__)

TERMINAL = ("succeeded", "failed")
ORDER = {"queued": 0, "running": 1, "succeeded": 2, "failed": 2}


class CatalogError(KeyError):
    def __init__(self, name: str, available):
        self.name = name
        super().__init__(f"unknown function {name!r}; available: {', '.join(sorted(available))}")

    def __str__(self) -> str:
        return self.args[0]


class NotFound(KeyError):
    def __str__(self) -> str:
        return self.args[0]


class Busy(RuntimeError):
    """The task queue is full; retry later."""


# task catalog


def _echo(payload: Any) -> Any:
    if isinstance(payload, dict):
        if "_sleep" in payload:
            time.sleep(float(payload["_sleep"]))
        if "_raise" in payload:
            raise RuntimeError(str(payload["_raise"]))
    return payload


def _ptycho_reconstruct(payload: dict) -> dict:
    from .recon import ReconConfig, reconstruct

    cfg = ReconConfig(**payload.get("config", {}))
    out_dir = Path(payload["out_dir"])
    res = reconstruct(payload["dataset"], cfg, out_dir, payload.get("limit"), payload.get("pairs_dir"))
    return {
        "iterations": res.state.iteration,
        "final_residual": res.state.residual_history[-1],
        "pairs": len(res.pairs),
        "pairs_dir": str(Path(payload.get("pairs_dir") or out_dir / "pairs")),
        "object": str(res.snapshots[-1]) if res.snapshots else None,
    }


def _train_cycle(payload: dict) -> dict:
    from .nn import load_checkpoint, save_checkpoint
    from .trainer import DatasetIndex, Hyper, deploy, ingest_pairs, train_cycle

    hyper = Hyper.from_dict(payload.get("hyper", {}))
    pairs = sorted(Path(payload["pairs_dir"]).glob("pair_*.bin"), key=lambda p: int(p.stem.split("_")[1]))
    index = ingest_pairs(DatasetIndex(split_seed=hyper.seed), pairs, hyper.input_dim)
    warm = load_checkpoint(payload["warm_start"], hyper.spec) if payload.get("warm_start") else None
    ckpt, report = train_cycle(index, warm, hyper)
    out = save_checkpoint(ckpt, payload["checkpoint_out"])
    if payload.get("edge_addr"):
        report.deployed = deploy(ckpt, payload["edge_addr"]).ok
    return {**report.to_dict(), "checkpoint": str(out)}


CATALOG: dict[str, Callable[[Any], Any]] = {
    "echo": _echo,
    "ptycho_reconstruct": _ptycho_reconstruct,
    "train_cycle": _train_cycle,
}


@dataclass(frozen=True)
class EndpointConfig:
    workers: int = 2
    queue_capacity: int = 64
    listen_addr: str = "127.0.0.1:8470"

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.queue_capacity < self.workers:
            raise ValueError("queue_capacity must be >= workers")


@dataclass(frozen=True)
class FunctionRecord:
    function_id: str
    name: str
    registered_at: float


@dataclass(frozen=True)
class TaskRecord:
    task_id: str
    function_id: str
    payload: Any
    status: str = "queued"
    result: Any = None
    error: str | None = None
    timestamps: dict = field(default_factory=dict)

    @property
    def terminal(self) -> bool:
        return self.status in TERMINAL


class Endpoint:
    """Registry, FIFO queue and worker threads. State optionally persists to a JSON file."""

    def __init__(
        self,
        config: EndpointConfig = EndpointConfig(),
        state_path: str | Path | None = None,
        catalog: dict[str, Callable[[Any], Any]] | None = None,
    ):
        self.config = config
        self.catalog = dict(CATALOG if catalog is None else catalog)
        self.functions: dict[str, FunctionRecord] = {}
        self.tasks: dict[str, TaskRecord] = {}
        self._queue: queue.Queue[str | None] = queue.Queue(maxsize=config.queue_capacity)
        self._lock = threading.Lock()
        self._changed = threading.Condition(self._lock)
        self._threads: list[threading.Thread] = []
        self.state_path = Path(state_path) if state_path is not None else None
        self.running = 0
        self.max_running = 0
        if self.state_path is not None and self.state_path.exists():
            self._restore()

    # persistence

    def _restore(self):
        raw = json.loads(self.state_path.read_text())
        self.functions = {k: FunctionRecord(**v) for k, v in raw.get("functions", {}).items()}
        requeue = []
        for k, v in raw.get("tasks", {}).items():
            rec = TaskRecord(**v)
            if rec.status == "running":
                rec = replace(
                    rec,
                    status="failed",
                    error="endpoint restarted while the task was running",
                    timestamps={**rec.timestamps, "failed": time.time()},
                )
            elif rec.status == "queued":
                requeue.append(k)
            self.tasks[k] = rec
        for k in requeue:
            self._queue.put_nowait(k)
        self._persist()

    def _persist(self):
        if self.state_path is None:
            return
        doc = {
            "functions": {k: asdict(v) for k, v in self.functions.items()},
            "tasks": {k: asdict(v) for k, v in self.tasks.items()},
        }
        self.state_path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.state_path.with_suffix(f".{uuid.uuid4().hex}.tmp")
        tmp.write_text(json.dumps(doc, default=str))
        os.replace(tmp, self.state_path)

    # API

    def register_function(self, name: str) -> str:
        if name not in self.catalog:
            raise CatalogError(name, self.catalog)
        rec = FunctionRecord(str(uuid.uuid4()), name, time.time())
        with self._lock:
            self.functions[rec.function_id] = rec
            self._persist()
        return rec.function_id

    def run(self, function_id: str, payload: Any = None) -> str:
        with self._lock:
            if function_id not in self.functions:
                raise NotFound(f"unknown function id {function_id}")
            rec = TaskRecord(str(uuid.uuid4()), function_id, payload, timestamps={"queued": time.time()})
            try:
                self._queue.put_nowait(rec.task_id)
            except queue.Full:
                raise Busy(f"queue full ({self.config.queue_capacity} tasks)") from None
            self.tasks[rec.task_id] = rec
            self._persist()
        return rec.task_id

    def task_status(self, task_id: str) -> TaskRecord:
        rec = self.tasks.get(task_id)
        if rec is None:
            raise NotFound(f"unknown task id {task_id}")
        return rec

    def wait(self, task_id: str, timeout: float | None = None) -> TaskRecord:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._changed:
            while not self.task_status(task_id).terminal:
                left = None if deadline is None else deadline - time.monotonic()
                if left is not None and left <= 0:
                    raise TimeoutError(f"task {task_id} not finished after {timeout} s")
                self._changed.wait(left)
        return self.tasks[task_id]

    # workers

    def _transition(self, task_id: str, status: str, **kw) -> TaskRecord:
        with self._changed:
            old = self.tasks[task_id]
            if ORDER[status] <= ORDER[old.status]:
                raise RuntimeError(f"illegal transition {old.status} -> {status}")
            new = replace(old, status=status, timestamps={**old.timestamps, status: time.time()}, **kw)
            self.tasks[task_id] = new
            if status == "running":
                self.running += 1
                self.max_running = max(self.max_running, self.running)
            elif old.status == "running":
                self.running -= 1
            self._persist()
            self._changed.notify_all()
            return new

    def _worker(self):
        while True:
            task_id = self._queue.get()
            if task_id is None:
                return
            rec = self.tasks[task_id]
            if rec.terminal:
                continue
            fn = self.catalog[self.functions[rec.function_id].name]
            self._transition(task_id, "running")
            try:
                result = fn(rec.payload)
            except Exception as exc:
                log.warning("task %s failed: %s", task_id, exc)
                self._transition(task_id, "failed", error=f"{type(exc).__name__}: {exc}")
            else:
                self._transition(task_id, "succeeded", result=result)

    def start(self) -> Endpoint:
        for i in range(self.config.workers):
            t = threading.Thread(target=self._worker, daemon=True, name=f"endpoint-worker-{i}")
            t.start()
            self._threads.append(t)
        return self

    def stop(self, timeout: float = 5.0):
        """Let running tasks finish; queued tasks stay queued (and persisted)."""
        pending = []
        while True:
            try:
                item = self._queue.get_nowait()
            except queue.Empty:
                break
            if item is not None:
                pending.append(item)
        for _ in self._threads:
            self._queue.put(None)
        for t in self._threads:
            t.join(timeout)
        self._threads.clear()
        for item in pending:
            self._queue.put_nowait(item)


class LocalClient:
    """In-process client with the same surface as the HTTP client."""

    def __init__(self, endpoint: Endpoint):
        self.endpoint = endpoint
        self._fids: dict[str, str] = {}

    def register(self, name: str) -> str:
        return self.endpoint.register_function(name)

    def run(self, function: str, payload: Any) -> str:
        fid = function if function in self.endpoint.functions else self._fids.get(function)
        if fid is None:
            fid = self._fids[function] = self.register(function)
        return self.endpoint.run(fid, payload)

    def wait(self, task_id: str, timeout: float | None = None) -> dict:
        return _status_dict(self.endpoint.wait(task_id, timeout))


def _status_dict(rec: TaskRecord) -> dict:
    return {
        "task_id": rec.task_id,
        "function_id": rec.function_id,
        "state": rec.status,
        "result": rec.result,
        "error": rec.error,
        "timestamps": rec.timestamps,
    }
