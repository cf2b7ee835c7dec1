"""Fault-tolerant directory-to-directory dataset transfer with manifests.

Also owns the on-disk dataset layout::

    <root>/frames/frame_<index>.bin   FRAME body bytes (see ``wire``)
    <root>/index.json                 geometry, scan path (CSV text), count
    <root>/manifest.json              per-file size and sha256
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
import uuid
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path, PurePosixPath

from filelock import FileLock

from .core import ExperimentGeometry, ScanPath
from .wire import FrameBody

log = logging.getLogger(__name__)

CHUNK = 1 << 20
MANIFEST_NAME = "manifest.json"
LOCK_NAME = ".xfer.lock"


class ManifestError(Exception):
    def __init__(self, failures: dict[str, str]):
        self.failures = failures
        super().__init__("unreadable files: " + ", ".join(f"{k} ({v})" for k, v in sorted(failures.items())))


@dataclass(frozen=True)
class ManifestEntry:
    relpath: str
    size_bytes: int
    sha256: str


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    created_at: str
    root_tag: str = ""

    def by_path(self) -> dict[str, ManifestEntry]:
        return {e.relpath: e for e in self.entries}

    def to_json(self) -> str:
        return json.dumps(
            {"root_tag": self.root_tag, "created_at": self.created_at, "entries": [asdict(e) for e in self.entries]},
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> Manifest:
        raw = json.loads(text)
        entries = [ManifestEntry(**e) for e in raw["entries"]]
        _check_relpaths(e.relpath for e in entries)
        return cls(entries, raw["created_at"], raw.get("root_tag", ""))

    def save(self, root: Path) -> Path:
        path = Path(root) / MANIFEST_NAME
        _atomic_write(path, self.to_json().encode())
        return path


def _check_relpaths(relpaths):
    seen = set()
    for rp in relpaths:
        p = PurePosixPath(rp)
        if p.is_absolute() or ".." in p.parts or not p.parts:
            raise ValueError(f"manifest path {rp!r} must be relative without parent traversal")
        if rp in seen:
            raise ValueError(f"duplicate manifest path {rp!r}")
        seen.add(rp)


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while chunk := fh.read(CHUNK):
            h.update(chunk)
    return h.hexdigest()


def build_manifest(root: str | Path, root_tag: str = "", exclude=(MANIFEST_NAME, LOCK_NAME)) -> Manifest:
    """One entry per regular file under ``root``, sorted by relative path."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(root)
    entries, failures = [], {}
    for path in sorted(p for p in root.rglob("*") if p.is_file() and not p.is_symlink()):
        rel = path.relative_to(root).as_posix()
        if rel in exclude or path.name.startswith(".xfer-"):
            continue
        try:
            entries.append(ManifestEntry(rel, path.stat().st_size, sha256_file(path)))
        except OSError as exc:
            failures[rel] = exc.strerror or str(exc)
    if failures:
        raise ManifestError(failures)
    entries.sort(key=lambda e: e.relpath)
    return Manifest(entries, datetime.now(timezone.utc).isoformat(), root_tag or root.name)


@dataclass
class TransferSpec:
    src_root: str | Path
    dest_root: str | Path
    items: list[str]
    max_retries: int = 3
    verify: bool = True
    width: int = 4
    backoff: float = 0.05

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


@dataclass
class TransferReport:
    files_ok: int = 0
    files_retried: int = 0
    files_failed: int = 0
    files_skipped: int = 0
    bytes_moved: int = 0
    duration: float = 0.0
    failures: dict[str, str] = field(default_factory=dict)

    @property
    def succeeded(self) -> bool:
        return self.files_failed == 0

    def to_dict(self) -> dict:
        return {**asdict(self), "succeeded": self.succeeded}


# (relpath, attempt) -> True to corrupt that attempt's temp copy; used for fault injection
FaultHook = Callable[[str, int], bool]


def _atomic_write(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.parent / f".xfer-{uuid.uuid4().hex}.partial"
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _expand_items(src_root: Path, items: list[str]) -> list[str]:
    out = []
    for item in items:
        _check_relpaths([item])
        p = src_root / item
        if p.is_dir():
            out.extend(q.relative_to(src_root).as_posix() for q in sorted(p.rglob("*")) if q.is_file())
        elif p.is_file():
            out.append(PurePosixPath(item).as_posix())
        else:
            raise FileNotFoundError(f"transfer item {item!r} not found under {src_root}")
    return sorted(dict.fromkeys(out))


def _copy_once(src: Path, dest: Path, corrupt: bool) -> tuple[str, int, Path]:
    dest.parent.mkdir(parents=True, exist_ok=True)
    tmp = dest.parent / f".xfer-{uuid.uuid4().hex}.partial"
    h = hashlib.sha256()
    n = 0
    try:
        with open(src, "rb") as fin, open(tmp, "wb") as fout:
            while chunk := fin.read(CHUNK):
                h.update(chunk)
                if corrupt and n == 0:
                    chunk = bytes([chunk[0] ^ 0xFF]) + chunk[1:]
                fout.write(chunk)
                n += len(chunk)
            if corrupt and n == 0:
                fout.write(b"\0")
            fout.flush()
            os.fsync(fout.fileno())
        return h.hexdigest(), n, tmp
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def transfer(spec: TransferSpec, fault_hook: FaultHook | None = None) -> TransferReport:
    """Copy ``spec.items`` from ``src_root`` to ``dest_root``.

    Each file lands via temp file + fsync + rename. Files whose destination
    digest already matches the source are skipped, so re-running a finished
    transfer moves nothing.
    """
    t0 = time.monotonic()
    src_root, dest_root = Path(spec.src_root), Path(spec.dest_root)
    if not src_root.is_dir():
        raise FileNotFoundError(f"source root {src_root} does not exist")
    relpaths = _expand_items(src_root, spec.items)
    dest_root.mkdir(parents=True, exist_ok=True)
    report = TransferReport()

    def one(rel: str) -> tuple[str, str, int, int]:
        src, dest = src_root / rel, dest_root / rel
        src_digest = sha256_file(src)
        if dest.is_file() and sha256_file(dest) == src_digest:
            return rel, "skipped", 0, 0
        last_error = ""
        for attempt in range(spec.max_retries + 1):
            if attempt:
                time.sleep(spec.backoff * 2 ** (attempt - 1))
            corrupt = bool(fault_hook and fault_hook(rel, attempt))
            try:
                digest, n, tmp = _copy_once(src, dest, corrupt)
            except OSError as exc:
                last_error = str(exc)
                continue
            if spec.verify and sha256_file(tmp) != src_digest:
                tmp.unlink(missing_ok=True)
                last_error = f"digest mismatch on attempt {attempt}"
                log.warning("transfer %s: %s", rel, last_error)
                continue
            os.replace(tmp, dest)
            return rel, "ok", n, attempt
        return rel, f"failed: {last_error}", 0, spec.max_retries

    with FileLock(str(dest_root / LOCK_NAME)):
        with ThreadPoolExecutor(max_workers=max(1, spec.width)) as pool:
            results = list(pool.map(one, relpaths))
    for rel, outcome, n, attempts in results:
        if outcome == "skipped":
            report.files_ok += 1
            report.files_skipped += 1
        elif outcome == "ok":
            report.files_ok += 1
            report.bytes_moved += n
            report.files_retried += attempts > 0
        else:
            report.files_failed += 1
            report.files_retried += attempts > 0
            report.failures[rel] = outcome
    report.duration = time.monotonic() - t0
    return report


# dataset layout


def frame_relpath(index: int) -> str:
    return f"frames/frame_{index}.bin"


def write_dataset(root: str | Path, frames: list[FrameBody], meta: dict) -> Manifest:
    """Write frames plus ``index.json`` and ``manifest.json`` under ``root``.

    ``meta`` must carry ``geometry`` (dict), ``path`` (ScanPath) and any
    extra simulator fields (pixel_nm, probe_fwhm_nm, object_shape, ...).
    """
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    for f in frames:
        _atomic_write(root / frame_relpath(f.pos_index), f.pack())
    index = dict(meta)
    path: ScanPath = index.pop("path")
    index["path_csv"] = path.to_csv()
    index["step_nm"] = path.step
    index["count"] = len(frames)
    _atomic_write(root / "index.json", json.dumps(index, indent=1, sort_keys=True).encode())
    manifest = build_manifest(root)
    manifest.save(root)
    return manifest


@dataclass
class Dataset:
    root: Path
    index: dict
    frames: list[FrameBody]

    @property
    def geometry(self) -> ExperimentGeometry:
        return ExperimentGeometry(**self.index["geometry"])

    @property
    def path(self) -> ScanPath:
        return ScanPath.from_csv(self.index["path_csv"], self.index.get("step_nm", float("nan")))


def read_dataset(root: str | Path, limit: int | None = None) -> Dataset:
    root = Path(root)
    index = json.loads((root / "index.json").read_text())
    count = index["count"] if limit is None else min(limit, index["count"])
    frames = [FrameBody.unpack((root / frame_relpath(i)).read_bytes()) for i in range(count)]
    return Dataset(root, index, frames)
