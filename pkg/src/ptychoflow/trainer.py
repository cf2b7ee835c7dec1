"""Continuous surrogate training: growing dataset, warm-started cycles, deployment."""

from __future__ import annotations

import json
import logging
import re
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .nn import (
    AdamState,
    CyclicLRSchedule,
    IncompatibleCheckpoint,
    ModelCheckpoint,
    Network,
    NetworkSpec,
    adam_step,
    cyclic_lr,
    mae_loss,
    new_checkpoint_id,
    save_checkpoint,
)
from .recon import TrainingPair, read_pair
from .wire import Connection, Kind, ModelBody

log = logging.getLogger(__name__)

VAL_EVERY = 10  # one validation pair per ten arrivals


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Hyper:
    base_lr: float = 1e-4
    max_lr: float = 1e-3
    step_size_up: int = 200
    batch: int = 16
    epochs: int = 50
    seed: int = 0
    input_dim: int = 64
    encoder: tuple[int, ...] = (32, 64, 128)
    decoder: tuple[int, ...] = (64, 32, 16)

    @property
    def spec(self) -> NetworkSpec:
        return NetworkSpec(self.input_dim, tuple(self.encoder), tuple(self.decoder))

    @property
    def schedule(self) -> CyclicLRSchedule:
        return CyclicLRSchedule(self.base_lr, self.max_lr, self.step_size_up)

    @classmethod
    def from_dict(cls, d: dict) -> Hyper:
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for k in ("encoder", "decoder"):
            if k in known:
                known[k] = tuple(known[k])
        return cls(**known)


@dataclass(frozen=True)
class PairRef:
    pair_id: str
    path: str | None
    split: str  # "train" | "val"


@dataclass
class DatasetIndex:
    """Append-only list of training pairs with a fixed train/val assignment.

    Pairs are numbered in arrival order (within a batch, in the order given)
    and every tenth arrival goes to validation, so the validation share is
    exactly floor(n / 10) and no pair ever changes side.
    """

    pairs: list[PairRef] = field(default_factory=list)
    split_seed: int = 0
    version: int = 0
    _memory: dict[str, TrainingPair] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.pairs)

    def ids(self, split: str | None = None) -> list[str]:
        return [p.pair_id for p in self.pairs if split is None or p.split == split]

    def membership(self) -> dict[str, str]:
        return {p.pair_id: p.split for p in self.pairs}

    def load(self, ref: PairRef) -> TrainingPair:
        if ref.pair_id in self._memory:
            return self._memory[ref.pair_id]
        return read_pair(Path(ref.path))

    def to_json(self) -> str:
        return json.dumps(
            {"split_seed": self.split_seed, "version": self.version, "pairs": [asdict(p) for p in self.pairs]}, indent=1
        )

    @classmethod
    def from_json(cls, text: str) -> DatasetIndex:
        raw = json.loads(text)
        return cls([PairRef(**p) for p in raw["pairs"]], raw["split_seed"], raw["version"])


def ingest_pairs(index: DatasetIndex, new_pairs, input_dim: int | None = None) -> DatasetIndex:
    """Append pairs (``TrainingPair`` objects or pair-file paths) and assign splits.

    A batch with any wrongly sized pair is rejected whole, leaving ``index`` unchanged.
    """
    items = list(new_pairs)
    if not items:
        return index
    staged: list[tuple[str, str | None, TrainingPair | None]] = []
    known = set(index.ids())
    for item in items:
        if isinstance(item, TrainingPair):
            pair, path, pid = item, None, f"pair_{item.pos_index}"
        else:
            path = str(item)
            pair = read_pair(Path(path))
            pid = Path(path).stem
        if input_dim is not None and pair.diffraction.shape != (input_dim, input_dim):
            raise ValueError(f"{pid}: pair dim {pair.diffraction.shape} does not match network input {input_dim}")
        if pid in known:
            raise ValueError(f"{pid} is already in the index")
        known.add(pid)
        staged.append((pid, path, pair if path is None else None))
    for pid, path, pair in staged:
        ordinal = len(index.pairs)
        split = "val" if ordinal % VAL_EVERY == VAL_EVERY - 1 else "train"
        index.pairs.append(PairRef(pid, path, split))
        if pair is not None:
            index._memory[pid] = pair
    index.version += 1
    return index


@dataclass
class TrainCycleReport:
    cycle: int
    epochs_run: int
    best_epoch: int
    best_val_loss: float
    initial_val_loss: float
    val_losses: list[float]
    train_losses: list[float]
    dataset_size: int
    n_train: int
    n_val: int
    deployed: bool = False
    checkpoint_id: int = 0
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class _Arrays:
    x: np.ndarray  # (n, 1, D, D) normalised amplitudes
    y: np.ndarray  # (n, 1, D, D) phases


def _stack(pairs: list[TrainingPair], scale: float) -> _Arrays:
    if not pairs:
        return _Arrays(np.zeros((0, 1, 1, 1), np.float32), np.zeros((0, 1, 1, 1), np.float32))
    x = np.stack([p.diffraction for p in pairs])[:, None].astype(np.float32) / np.float32(scale)
    y = np.stack([p.label_phase for p in pairs])[:, None].astype(np.float32)
    return _Arrays(x, y)


class TrainingRun:
    """Mutable training state: network, Adam moments, schedule position and epoch counter."""

    def __init__(self, hyper: Hyper, ckpt: ModelCheckpoint | None = None, input_scale: float = 1.0):
        self.hyper = hyper
        if ckpt is None:
            self.net = Network(hyper.spec, seed=hyper.seed)
            self.adam = AdamState.for_params(self.net.named_params())
            self.position = 0
            self.epoch = 0
            self.input_scale = float(input_scale)
        else:
            if ckpt.spec_hash != hyper.spec.hash():
                raise IncompatibleCheckpoint("warm-start checkpoint has a different network spec")
            restored = ModelCheckpoint.from_network(ckpt.build_network(), ckpt.adam)
            self.net = restored.build_network()
            self.adam = restored.adam
            self.position = ckpt.schedule_position
            self.epoch = ckpt.epoch
            self.input_scale = ckpt.input_scale
        self.batch_losses: list[float] = []

    def evaluate(self, data: _Arrays, batch: int = 16) -> float:
        if len(data.x) == 0:
            return float("nan")
        total = 0.0
        for i in range(0, len(data.x), batch):
            pred = self.net.predict(data.x[i : i + batch])
            total += float(np.sum(np.abs(pred.astype(np.float64) - data.y[i : i + batch])))
        return total / data.y.size

    def run_epoch(self, data: _Arrays) -> float:
        order = np.random.default_rng([self.hyper.seed, self.epoch]).permutation(len(data.x))
        schedule = self.hyper.schedule
        losses = []
        for i in range(0, len(order), self.hyper.batch):
            idx = order[i : i + self.hyper.batch]
            self.net.zero_grad()
            pred = self.net.forward(data.x[idx], train=True)
            loss, grad = mae_loss(pred, data.y[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {self.epoch}")
            grads = self.net.backward(grad)
            adam_step(self.net.named_params(), grads, self.adam, cyclic_lr(schedule, self.position))
            self.position += 1
            losses.append(loss)
        self.batch_losses.extend(losses)
        self.epoch += 1
        return float(np.mean(losses)) if losses else float("nan")

    def checkpoint(self, val_loss: float, checkpoint_id: int | None = None) -> ModelCheckpoint:
        return ModelCheckpoint.from_network(
            self.net,
            self.adam,
            schedule_position=self.position,
            epoch=self.epoch,
            val_loss=val_loss,
            checkpoint_id=new_checkpoint_id() if checkpoint_id is None else checkpoint_id,
            input_scale=self.input_scale,
        )


def _check_finite(net: Network, epoch: int):
    for k, v in net.named_params().items():
        if not np.all(np.isfinite(v)):
            raise TrainingError(f"non-finite parameter {k} after epoch {epoch}")


def train_cycle(
    index: DatasetIndex,
    warm_start: ModelCheckpoint | None = None,
    hyper: Hyper = Hyper(),
    cycle: int = 0,
    on_epoch=None,
) -> tuple[ModelCheckpoint, TrainCycleReport]:
    """Train ``hyper.epochs`` epochs and return the lowest-validation-loss checkpoint.

    The starting weights count as epoch 0, so a warm start can never
    select something worse than the checkpoint it started from.
    """
    if len(index) < VAL_EVERY:
        raise TrainingError(f"need at least {VAL_EVERY} pairs, have {len(index)}")
    t0 = time.monotonic()
    train_pairs = [index.load(r) for r in index.pairs if r.split == "train"]
    val_pairs = [index.load(r) for r in index.pairs if r.split == "val"]
    scale = float(max(p.diffraction.max() for p in train_pairs + val_pairs)) or 1.0
    run = TrainingRun(hyper, warm_start, input_scale=scale)
    train, val = _stack(train_pairs, run.input_scale), _stack(val_pairs, run.input_scale)

    initial = run.evaluate(val)
    best = run.checkpoint(initial)  # epoch 0: the starting weights
    best_epoch = 0
    val_losses, train_losses = [initial], []
    for e in range(1, hyper.epochs + 1):
        train_losses.append(run.run_epoch(train))
        _check_finite(run.net, e)
        v = run.evaluate(val)
        val_losses.append(v)
        if v < best.val_loss:
            best, best_epoch = run.checkpoint(v), e
        if on_epoch is not None:
            on_epoch(e, train_losses[-1], v)
    report = TrainCycleReport(
        cycle=cycle,
        epochs_run=hyper.epochs,
        best_epoch=best_epoch,
        best_val_loss=best.val_loss,
        initial_val_loss=initial,
        val_losses=val_losses,
        train_losses=train_losses,
        dataset_size=len(index),
        n_train=len(train_pairs),
        n_val=len(val_pairs),
        checkpoint_id=best.checkpoint_id,
        wall_time=time.monotonic() - t0,
    )
    log.info("cycle %d: best val %.4f at epoch %d (initial %.4f)", cycle, best.val_loss, best_epoch, initial)
    return best, report


@dataclass
class DeployEvent:
    checkpoint_id: int
    edge_addr: str
    ok: bool
    detail: str = ""
    at: float = field(default_factory=time.time)


def deploy(ckpt: ModelCheckpoint, edge_addr: str, timeout: float = 30.0, corrupt: bool = False) -> DeployEvent:
    """Push a checkpoint to an edge node and wait for its ACK.

    ``corrupt`` flips a blob byte after the digest is taken (fault injection).
    """
    blob = ckpt.to_bytes()
    body = ModelBody(ckpt.checkpoint_id, blob)
    if corrupt:
        bad = bytearray(blob)
        bad[len(bad) // 2] ^= 0xFF
        body = ModelBody(ckpt.checkpoint_id, bytes(bad), body.blob_sha256)
    try:
        with Connection.connect(edge_addr, timeout=timeout) as conn:
            reply = conn.request(Kind.MODEL, body.pack(), timeout=timeout)
    except OSError as exc:
        return DeployEvent(ckpt.checkpoint_id, edge_addr, False, f"unreachable: {exc}")
    ack = reply.body() if reply.kind == Kind.ACK else {}
    ok = bool(ack.get("ok")) and ack.get("checkpoint_id") == ckpt.checkpoint_id
    return DeployEvent(ckpt.checkpoint_id, edge_addr, ok, ack.get("detail", ""))


_PAIR_RE = re.compile(r"^pair_(\d+)\.bin$")


class ContinuousTrainer:
    """Polls a directory for pair files and trains/deploys whenever enough accumulate."""

    def __init__(
        self,
        watch_dir: str | Path,
        work_dir: str | Path,
        edge_addr: str | None = None,
        hyper: Hyper = Hyper(),
        min_new: int = 32,
        poll_interval: float = 2.0,
        bootstrap: ModelCheckpoint | None = None,
    ):
        self.watch_dir = Path(watch_dir)
        self.work_dir = Path(work_dir)
        self.work_dir.mkdir(parents=True, exist_ok=True)
        self.edge_addr = edge_addr
        self.hyper = hyper
        self.min_new = min_new
        self.poll_interval = poll_interval
        self.index = DatasetIndex(split_seed=hyper.seed)
        self.best: ModelCheckpoint | None = bootstrap
        self.reports: list[TrainCycleReport] = []
        self.deploys: list[DeployEvent] = []
        self._undeployed: ModelCheckpoint | None = None
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self.journal = self.work_dir / "journal.jsonl"
        self.cycle_done = threading.Condition()

    def _scan(self) -> list[Path]:
        known = set(self.index.ids())
        found = []
        for p in self.watch_dir.rglob("pair_*.bin"):
            m = _PAIR_RE.match(p.name)
            hidden = any(part.startswith(".") for part in p.relative_to(self.watch_dir).parts)
            if m and not hidden and p.stem not in known:
                found.append((int(m.group(1)), str(p), p))
        out, seen = [], set()
        for _, _, p in sorted(found):
            if p.stem not in seen:  # first directory (by path) wins for a repeated position
                seen.add(p.stem)
                out.append(p)
        return out

    def poll_once(self) -> TrainCycleReport | None:
        """Ingest new pairs and run one cycle if at least ``min_new`` arrived."""
        if self._undeployed is not None:
            self._try_deploy(self._undeployed)
        new = self._scan() if self.watch_dir.exists() else []
        if len(new) < self.min_new:
            return None
        try:
            ingest_pairs(self.index, new, self.hyper.input_dim)
        except (ValueError, OSError) as exc:
            log.error("ingest failed: %s", exc)
            return None
        (self.work_dir / "index.json").write_text(self.index.to_json())
        if len(self.index) < VAL_EVERY:
            return None
        warm = self.best if self.best is not None and self.best.spec_hash == self.hyper.spec.hash() else None
        try:
            ckpt, report = train_cycle(self.index, warm, self.hyper, cycle=len(self.reports) + 1)
        except Exception as exc:
            log.error("training cycle failed, keeping previous best: %s", exc)
            return None
        self.best = ckpt
        save_checkpoint(ckpt, self.work_dir / "best.pnnc")
        report.deployed = self._try_deploy(ckpt)
        self.reports.append(report)
        with open(self.journal, "a") as fh:
            fh.write(json.dumps(report.to_dict()) + "\n")
        with self.cycle_done:
            self.cycle_done.notify_all()
        return report

    def _try_deploy(self, ckpt: ModelCheckpoint) -> bool:
        if self.edge_addr is None:
            return False
        event = deploy(ckpt, self.edge_addr)
        self.deploys.append(event)
        if event.ok:
            self._undeployed = None
        else:
            log.warning("deploy of %d failed (%s); will retry next poll", ckpt.checkpoint_id, event.detail)
            self._undeployed = ckpt
        return event.ok

    def run(self):
        while not self._stop.is_set():
            try:
                self.poll_once()
            except Exception:
                log.exception("trainer poll failed")
            self._stop.wait(self.poll_interval)

    def start(self) -> ContinuousTrainer:
        self._thread = threading.Thread(target=self.run, daemon=True, name="trainer")
        self._thread.start()
        return self

    def stop(self, timeout: float | None = None):
        """Let the current cycle finish, then stop polling."""
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout)

    def wait_for_cycles(self, n: int, timeout: float | None = None) -> bool:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self.cycle_done:
            while len(self.reports) < n:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return False
                self.cycle_done.wait(remaining if remaining is not None else 1.0)
        return True


def continuous_loop(watch_dir, edge_addr, hyper: Hyper = Hyper(), **kwargs) -> ContinuousTrainer:
    """Start a background trainer; call ``.stop()`` to end it."""
    work_dir = kwargs.pop("work_dir", Path(watch_dir).parent / "trainer")
    return ContinuousTrainer(watch_dir, work_dir, edge_addr, hyper, **kwargs).start()
