"""Edge inference node: batch-1 prediction, atomic model hot-swap, live stitching."""

from __future__ import annotations

import json
import logging
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import BoundsError, ScanPosition, position_to_pixel
from .nn import CheckpointError, ModelCheckpoint, Network, NetworkSpec
from .nn.checkpoint import loads as load_checkpoint_bytes
from .simlab import gaussian_window
from .wire import Connection, FrameBody, Kind, Message, MessageServer, ModelBody, PhaseBody, WireError, subscribe

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ActiveModel:
    net: Network
    checkpoint_id: int
    input_scale: float


class InferenceEngine:
    """One active model plus a single pending slot, adopted between frames."""

    def __init__(self, bootstrap: ModelCheckpoint):
        self.spec: NetworkSpec = bootstrap.spec
        self.active = self._build(bootstrap)
        self._pending: ActiveModel | None = None
        self._lock = threading.Lock()
        self.swaps = 0

    @staticmethod
    def _build(ckpt: ModelCheckpoint) -> ActiveModel:
        return ActiveModel(ckpt.build_network(), ckpt.checkpoint_id, ckpt.input_scale or 1.0)

    def offer(self, ckpt: ModelCheckpoint):
        """Stage a model; a newer offer replaces an unadopted one."""
        model = self._build(ckpt)
        with self._lock:
            self._pending = model

    def hot_swap(self, body: ModelBody) -> dict:
        """Verify and stage a deployed model; returns the ACK body."""
        if not body.verify():
            return {"ok": False, "checkpoint_id": body.checkpoint_id, "detail": "sha256 mismatch"}
        try:
            ckpt = load_checkpoint_bytes(body.blob, expect_spec=self.spec)
        except CheckpointError as exc:
            return {"ok": False, "checkpoint_id": body.checkpoint_id, "detail": str(exc)}
        self.offer(ckpt)
        return {"ok": True, "checkpoint_id": body.checkpoint_id}

    def adopt(self) -> bool:
        with self._lock:
            pending, self._pending = self._pending, None
        if pending is None:
            return False
        self.active = pending
        self.swaps += 1
        return True

    @property
    def latest_checkpoint_id(self) -> int:
        """Checkpoint that will process the next frame."""
        with self._lock:
            return self._pending.checkpoint_id if self._pending is not None else self.active.checkpoint_id


class StitchCanvas:
    """Weighted-mean mosaic of phase patches."""

    def __init__(self, shape: tuple[int, int], pixel_nm: float, window: np.ndarray):
        self.sum = np.zeros(shape)
        self.weight = np.zeros(shape)
        self.pixel_nm = float(pixel_nm)
        self.window = np.asarray(window, dtype=np.float64)

    @classmethod
    def for_probe(cls, shape, pixel_nm: float, probe_fwhm_nm: float, dim: int) -> StitchCanvas:
        return cls(shape, pixel_nm, gaussian_window(probe_fwhm_nm / pixel_nm, dim))

    def _center(self, pos: ScanPosition) -> tuple[int, int]:
        d = self.window.shape[0]
        rows, cols = self.sum.shape
        c = position_to_pixel(pos, self.pixel_nm, self.sum.shape)
        lo, hi_r, hi_c = d // 2, rows - (d - d // 2), cols - (d - d // 2)
        clamped = (min(max(c[0], lo), hi_r), min(max(c[1], lo), hi_c))
        if hi_r < lo or hi_c < lo:
            raise BoundsError(f"canvas {self.sum.shape} smaller than a {d}-pixel patch")
        if clamped != c:
            log.warning("position %d at pixel %s outside canvas; clamped to %s", pos.index, c, clamped)
        return clamped

    def stitch(self, patch: np.ndarray, pos: ScanPosition):
        d = self.window.shape[0]
        if patch.shape != self.window.shape:
            raise ValueError(f"patch shape {patch.shape} != window {self.window.shape}")
        r, c = self._center(pos)
        sl = (slice(r - d // 2, r - d // 2 + d), slice(c - d // 2, c - d // 2 + d))
        self.sum[sl] += patch * self.window
        self.weight[sl] += self.window

    def render(self) -> np.ndarray:
        out = np.zeros_like(self.sum)
        np.divide(self.sum, self.weight, out=out, where=self.weight > 0)
        return out

    def coverage(self, fraction: float = 0.1) -> np.ndarray:
        return self.weight > fraction * self.weight.max() if self.weight.any() else self.weight > 0

    def save(self, out_dir: Path) -> tuple[Path, Path]:
        out_dir.mkdir(parents=True, exist_ok=True)
        img = self.render().astype("<f4")
        rows, cols = img.shape
        bin_path, pgm_path = out_dir / "canvas.bin", out_dir / "canvas.pgm"
        bin_path.write_bytes(struct.pack("<QQ", rows, cols) + img.tobytes())
        grey = np.clip(np.round((img + np.pi) / (2 * np.pi) * 255), 0, 255).astype(np.uint8)
        pgm_path.write_bytes(f"P5\n{cols} {rows}\n255\n".encode() + grey.tobytes())
        return bin_path, pgm_path


def read_canvas(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    rows, cols = struct.unpack_from("<QQ", raw)
    return np.frombuffer(raw, dtype="<f4", offset=16, count=rows * cols).reshape(rows, cols)


@dataclass
class LatencyStats:
    infer_us: list[int] = field(default_factory=list)
    e2e_us: list[int] = field(default_factory=list)
    stamps: list[float] = field(default_factory=list)
    skipped: int = 0

    def record(self, infer_us: int, e2e_us: int):
        self.infer_us.append(infer_us)
        self.e2e_us.append(e2e_us)
        self.stamps.append(time.monotonic())

    @property
    def frames(self) -> int:
        return len(self.infer_us)

    def fps_windows(self) -> list[float]:
        """Frames completed in each whole 1 s window since the first frame."""
        if not self.stamps:
            return []
        t = np.asarray(self.stamps) - self.stamps[0]
        return np.bincount(t.astype(int)).astype(float).tolist()

    def summary(self) -> dict:
        infer = np.asarray(self.infer_us, dtype=float)
        span = self.stamps[-1] - self.stamps[0] if len(self.stamps) > 1 else 0.0
        return {
            "frames": self.frames,
            "skipped": self.skipped,
            "fps": (self.frames - 1) / span if span > 0 else 0.0,
            "inference_fps": 1e6 / infer.mean() if infer.size else 0.0,
            "infer_us_mean": float(infer.mean()) if infer.size else 0.0,
            "infer_us_p95": float(np.percentile(infer, 95)) if infer.size else 0.0,
            "e2e_us_mean": float(np.mean(self.e2e_us)) if self.e2e_us else 0.0,
            "fps_windows": self.fps_windows(),
        }


class EdgeNode:
    """Frame loop state: engine, canvas, stats and the outgoing phase log."""

    def __init__(self, bootstrap: ModelCheckpoint, canvas: StitchCanvas | None = None):
        self.engine = InferenceEngine(bootstrap)
        self.canvas = canvas
        self.stats = LatencyStats()
        self.phases: list[PhaseBody] = []
        self.used_checkpoint: list[int] = []
        self._new_phase = threading.Condition()
        self.finished = False

    @property
    def dim(self) -> int:
        return self.engine.spec.input_dim

    def on_frame(self, frame: FrameBody, received: float | None = None) -> PhaseBody | None:
        t0 = time.perf_counter() if received is None else received
        if frame.dim != self.dim:
            log.warning("frame %d has dim %d, model expects %d; skipped", frame.pos_index, frame.dim, self.dim)
            self.stats.skipped += 1
            return None
        self.engine.adopt()
        model = self.engine.active
        amp = np.sqrt(np.maximum(frame.pixels, 0.0), dtype=np.float32) / np.float32(model.input_scale)
        t1 = time.perf_counter()
        pred = model.net.predict(amp[None, None])[0, 0]
        micros = int((time.perf_counter() - t1) * 1e6)
        body = PhaseBody(frame.pos_index, pred.astype(np.float32), micros)
        if self.canvas is not None:
            self.canvas.stitch(pred.astype(np.float64), ScanPosition(frame.pos_index, frame.x_nm, frame.y_nm))
        self.stats.record(micros, int((time.perf_counter() - t0) * 1e6))
        self.used_checkpoint.append(model.checkpoint_id)
        with self._new_phase:
            self.phases.append(body)
            self._new_phase.notify_all()
        return body

    def begin_scan(self, canvas: StitchCanvas | None):
        """Fresh canvas, stats and phase log; the active model carries over."""
        with self._new_phase:
            self.canvas = canvas
            self.stats = LatencyStats()
            self.phases = []
            self.used_checkpoint = []
            self.finished = False

    def finish(self):
        with self._new_phase:
            self.finished = True
            self._new_phase.notify_all()

    def status(self) -> dict:
        return {
            "active_checkpoint_id": self.engine.active.checkpoint_id,
            "latest_checkpoint_id": self.engine.latest_checkpoint_id,
            "frames": self.stats.frames,
            "skipped": self.stats.skipped,
            "swaps": self.engine.swaps,
            "finished": self.finished,
        }

    # service side: deployments, status queries and phase subscriptions

    def handle(self, conn: Connection):
        while True:
            msg = conn.recv(timeout=60.0)
            if msg is None:
                return
            if msg.kind == Kind.MODEL:
                try:
                    ack = self.engine.hot_swap(ModelBody.unpack(msg.payload))
                except WireError as exc:
                    ack = {"ok": False, "detail": str(exc)}
                log.info("deploy %s", ack)
                conn.send_json(Kind.ACK, ack)
            elif msg.kind == Kind.CONTROL:
                body = msg.body()
                op = body.get("op")
                if op == "status":
                    conn.send_json(Kind.ACK, self.status())
                elif op in ("subscribe", "subscribe_phases"):
                    self._stream_phases(conn, int(body.get("from_seq", 0)))
                    return
                else:
                    conn.send_json(Kind.ACK, {"ok": False, "detail": f"unknown op {op!r}"})
            else:
                conn.send_json(Kind.ACK, {"ok": False, "detail": f"unexpected {msg.kind.name}"})

    def _stream_phases(self, conn: Connection, start: int):
        i = start
        while True:
            with self._new_phase:
                while i >= len(self.phases) and not self.finished:
                    self._new_phase.wait(1.0)
                batch = self.phases[i:]
                done = self.finished
            for k, body in enumerate(batch):
                conn.send(Kind.PHASE, body.pack(), seq=i + k)
            i += len(batch)
            if done and i >= len(self.phases):
                conn.send_json(Kind.CONTROL, {"op": "end", "phases": i}, seq=max(i, start))
                return


def query_status(addr: str, timeout: float = 5.0) -> dict:
    with Connection.connect(addr, timeout=timeout) as conn:
        return conn.request(Kind.CONTROL, json.dumps({"op": "status"}).encode(), timeout=timeout).body()


@dataclass
class EdgeRunResult:
    node: EdgeNode
    stats: dict
    report_path: Path
    canvas_paths: tuple[Path, Path] | None


class EdgeService:
    """Serves deployments for its lifetime and processes one frame stream per :meth:`run_scan`."""

    def __init__(self, bootstrap: ModelCheckpoint, model_listen_addr: str = "127.0.0.1:0", max_attempts: int = 5):
        self.node = EdgeNode(bootstrap)
        self.max_attempts = max_attempts
        self.server = MessageServer(model_listen_addr, self.node.handle)
        self._sub = None

    @property
    def model_addr(self) -> str:
        return self.server.address

    def start(self) -> EdgeService:
        self.server.start()
        return self

    def _on_message(self, msg: Message):
        if msg.kind == Kind.FRAME:
            self.node.on_frame(msg.body())

    def run_scan(
        self,
        frame_addr: str,
        out_dir: str | Path,
        canvas: StitchCanvas | None = None,
        timeout: float | None = None,
    ) -> EdgeRunResult:
        """Subscribe, predict every frame, then write the canvas and ``edge_stats.json``.

        Raises :class:`ConnectError` if the frame server stays unreachable.
        """
        self.node.begin_scan(canvas)
        self._sub = subscribe(frame_addr, self._on_message, max_attempts=self.max_attempts)
        try:
            if not self._sub.wait(timeout):
                raise TimeoutError("frame stream did not end in time")
        finally:
            self._sub.close()
            self.node.finish()
        return self._finalize(Path(out_dir))

    def _finalize(self, out_dir: Path) -> EdgeRunResult:
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = self.node.canvas.save(out_dir) if self.node.canvas is not None else None
        stats = {**self.node.stats.summary(), **self.node.status()}
        report = out_dir / "edge_stats.json"
        report.write_text(json.dumps(stats, indent=1))
        return EdgeRunResult(self.node, stats, report, paths)

    def stop(self):
        if self._sub is not None:
            self._sub.close()
        self.node.finish()
        self.server.stop()


def run_edge(
    frame_addr: str,
    model_listen_addr: str,
    report_dir: str | Path,
    bootstrap: ModelCheckpoint,
    canvas: StitchCanvas | None = None,
    timeout: float | None = None,
) -> EdgeRunResult:
    svc = EdgeService(bootstrap, model_listen_addr).start()
    try:
        return svc.run_scan(frame_addr, report_dir, canvas, timeout)
    finally:
        svc.stop()
