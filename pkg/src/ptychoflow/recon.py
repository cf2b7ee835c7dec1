"""Iterative ptychographic phase retrieval (rPIE) and training-pair export."""

from __future__ import annotations

import csv
import logging
import math
import os
import struct
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ScanPosition, extract_patch, patch_view, position_to_pixel
from .simlab import make_probe
from .xfer import Dataset, read_dataset

log = logging.getLogger(__name__)

ZERO_AMPLITUDE_FLOOR = 1e-12


class ReconError(ArithmeticError):
    def __init__(self, iteration: int, what: str = "non-finite values"):
        self.iteration = iteration
        super().__init__(f"{what} at iteration {iteration}")


@dataclass(frozen=True)
class ReconConfig:
    iterations: int = 100
    alpha: float = 0.05
    update_probe: bool = False
    probe_beta: float = 0.9
    snapshot_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be >= 1")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if not 0 < self.probe_beta <= 1:
            raise ValueError("probe_beta must be in (0, 1]")


@dataclass
class ReconState:
    object: np.ndarray  # complex128 estimate of the sample transmission
    probe: np.ndarray
    iteration: int = 0
    residual_history: list[float] = field(default_factory=list)

    def copy(self) -> ReconState:
        return ReconState(self.object.copy(), self.probe.copy(), self.iteration, list(self.residual_history))


@dataclass(frozen=True)
class TrainingPair:
    pos_index: int
    diffraction: np.ndarray  # float32 amplitude sqrt(d), fftshifted
    label_phase: np.ndarray  # float32 radians
    x_nm: float = 0.0
    y_nm: float = 0.0


@dataclass
class Measurements:
    """Detector amplitudes in unshifted FFT order with their patch centres."""

    amplitudes: np.ndarray  # (n, dim, dim) float64
    centers: list[tuple[int, int]]

    @classmethod
    def from_intensities(cls, intensities, centers) -> Measurements:
        d = np.asarray(intensities, dtype=np.float64)
        amps = np.sqrt(np.maximum(d, 0.0))
        return cls(np.fft.ifftshift(amps, axes=(-2, -1)), [tuple(c) for c in centers])

    def __len__(self) -> int:
        return len(self.centers)

    @property
    def total_intensity(self) -> float:
        # per-frame accumulation in the same order as data_error's numerator
        return sum(float(np.sum(a**2)) for a in self.amplitudes)


def rpie_sweep(state: ReconState, data: Measurements, config: ReconConfig) -> ReconState:
    """One pass over all positions in seeded random order; updates ``state`` in place."""
    obj, probe = state.object, state.probe
    dim = probe.shape[0]
    alpha, beta = config.alpha, config.probe_beta
    order = np.random.default_rng([config.seed, state.iteration]).permutation(len(data))
    misfit = 0.0
    for j in order:
        view = patch_view(obj, data.centers[j], dim)
        o_patch = view.copy()
        psi = probe * o_patch
        far = np.fft.fft2(psi, norm="ortho")
        mag = np.abs(far)
        misfit += float(np.sum((mag - data.amplitudes[j]) ** 2))
        far = data.amplitudes[j] * far / np.maximum(mag, ZERO_AMPLITUDE_FLOOR)
        delta = np.fft.ifft2(far, norm="ortho") - psi

        p2 = np.abs(probe) ** 2
        view += np.conj(probe) * delta / ((1 - alpha) * p2 + alpha * p2.max())
        if config.update_probe:
            o2 = np.abs(o_patch) ** 2
            probe += np.conj(o_patch) * delta / ((1 - beta) * o2 + beta * o2.max())
    state.iteration += 1
    total = data.total_intensity
    residual = misfit / total if total > 0 else 0.0
    if not math.isfinite(residual) or not np.all(np.isfinite(obj)) or not np.all(np.isfinite(probe)):
        raise ReconError(state.iteration)
    state.residual_history.append(residual)
    return state


def data_error(state: ReconState, data: Measurements) -> float:
    """Normalised amplitude misfit summed over all positions."""
    dim = state.probe.shape[0]
    num = 0.0
    for amp, c in zip(data.amplitudes, data.centers):
        far = np.fft.fft2(state.probe * extract_patch(state.object, c, dim), norm="ortho")
        num += float(np.sum((np.abs(far) - amp) ** 2))
    total = data.total_intensity
    return num / total if total > 0 else 0.0


def aligned_phase_rmse(estimate: np.ndarray, truth: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Phase RMSE after removing the best global phase offset."""
    if mask is None:
        mask = np.ones(truth.shape, dtype=bool)
    offset = np.angle(np.sum(estimate[mask] * np.conj(truth[mask])))
    err = np.angle(estimate[mask] * np.exp(-1j * offset) * np.conj(truth[mask]))
    return float(np.sqrt(np.mean(err**2)))


# binary outputs


def write_complex(path: Path, arr: np.ndarray):
    """16-byte header (rows u64, cols u64) followed by row-major complex64 pairs."""
    rows, cols = arr.shape
    _atomic_bytes(path, struct.pack("<QQ", rows, cols) + np.ascontiguousarray(arr, dtype="<c8").tobytes())


def read_complex(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    rows, cols = struct.unpack_from("<QQ", raw)
    return np.frombuffer(raw, dtype="<c8", offset=16, count=rows * cols).reshape(rows, cols).astype(np.complex128)


PAIR_HEAD = struct.Struct("<4sIIdd")


def write_pair(path: Path, pair: TrainingPair):
    dim = pair.diffraction.shape[0]
    head = PAIR_HEAD.pack(b"PAIR", pair.pos_index, dim, pair.x_nm, pair.y_nm)
    body = np.ascontiguousarray(pair.diffraction, "<f4").tobytes() + np.ascontiguousarray(pair.label_phase, "<f4").tobytes()
    _atomic_bytes(path, head + body)


def read_pair(path: Path) -> TrainingPair:
    raw = Path(path).read_bytes()
    magic, pos, dim, x, y = PAIR_HEAD.unpack_from(raw)
    if magic != b"PAIR":
        raise ValueError(f"{path} is not a training-pair file")
    n = dim * dim
    amp = np.frombuffer(raw, "<f4", n, PAIR_HEAD.size).reshape(dim, dim).astype(np.float32)
    lab = np.frombuffer(raw, "<f4", n, PAIR_HEAD.size + 4 * n).reshape(dim, dim).astype(np.float32)
    return TrainingPair(pos, amp, lab, x, y)


def _atomic_bytes(path: Path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.parent / f".{path.name}.{uuid.uuid4().hex}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def publish_pairs(pairs: list[TrainingPair], pdir: Path):
    """Write pair files so that a watcher sees either none or all of them.

    A fresh directory is assembled under a hidden name and renamed into
    place; an existing directory is updated file by file.
    """
    if pdir.exists():
        for p in pairs:
            write_pair(pdir / f"pair_{p.pos_index}.bin", p)
        return
    staging = pdir.parent / f".{pdir.name}.{uuid.uuid4().hex}"
    staging.mkdir(parents=True)
    for p in pairs:
        write_pair(staging / f"pair_{p.pos_index}.bin", p)
    os.rename(staging, pdir)


@dataclass
class ReconResult:
    state: ReconState
    pairs: list[TrainingPair]
    snapshots: list[Path]
    centers: list[tuple[int, int]]


def measurements_from_dataset(ds: Dataset) -> tuple[Measurements, np.ndarray]:
    """Amplitude data plus the known probe for a dataset written by the simulator."""
    pixel_nm = ds.index["pixel_nm"]
    shape = tuple(ds.index["object_shape"])
    dim = ds.frames[0].dim
    probe = make_probe(ds.index["probe_fwhm_nm"], dim, pixel_nm, ds.index.get("probe_defocus_rad", 0.0)).probe.data
    centers = [position_to_pixel(ScanPosition(f.pos_index, f.x_nm, f.y_nm), pixel_nm, shape) for f in ds.frames]
    return Measurements.from_intensities([f.pixels for f in ds.frames], centers), probe


def extract_pairs(obj: np.ndarray, data: Measurements, frames) -> list[TrainingPair]:
    dim = data.amplitudes.shape[-1]
    pairs = []
    for amp, c, f in zip(data.amplitudes, data.centers, frames):
        label = np.angle(extract_patch(obj, c, dim)).astype(np.float32)
        shifted = np.fft.fftshift(amp).astype(np.float32)
        pairs.append(TrainingPair(f.pos_index, shifted, label, f.x_nm, f.y_nm))
    return pairs


def reconstruct(
    dataset: str | Path | Dataset,
    config: ReconConfig,
    out_dir: str | Path | None = None,
    limit: int | None = None,
    pairs_dir: str | Path | None = None,
) -> ReconResult:
    """Run ``config.iterations`` rPIE sweeps from a flat object.

    Writes ``object_iter<k>.bin`` snapshots, ``residuals.csv`` and
    ``pairs/pair_<index>.bin`` under ``out_dir`` when given.
    """
    ds = dataset if isinstance(dataset, Dataset) else read_dataset(dataset, limit)
    data, probe = measurements_from_dataset(ds)
    shape = tuple(ds.index["object_shape"])
    state = ReconState(np.ones(shape, dtype=np.complex128), probe.copy())
    out = Path(out_dir) if out_dir is not None else None
    snapshots: list[Path] = []
    for _ in range(config.iterations):
        rpie_sweep(state, data, config)
        k = state.iteration
        if out is not None and (k % config.snapshot_every == 0 or k == config.iterations):
            path = out / f"object_iter{k}.bin"
            write_complex(path, state.object)
            snapshots.append(path)
    pairs = extract_pairs(state.object, data, ds.frames)
    if out is not None:
        with open(out / "residuals.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "residual"])
            for i, r in enumerate(state.residual_history, 1):
                w.writerow([i, repr(r)])
        publish_pairs(pairs, Path(pairs_dir) if pairs_dir is not None else out / "pairs")
    log.info("reconstruction finished: %d sweeps, final residual %.3g", state.iteration, state.residual_history[-1])
    return ReconResult(state, pairs, snapshots, data.centers)

