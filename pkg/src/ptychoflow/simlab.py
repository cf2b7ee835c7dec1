"""Simulated beamline: phantom, probe, far-field forward model and frame server."""

from __future__ import annotations

import enum
import logging
import math
import threading
import time
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import (
    BoundsError,
    ComplexImage,
    ExperimentGeometry,
    PhaseMap,
    ScanPath,
    ScanPosition,
    extract_patch,
    position_to_pixel,
)
from .wire import Connection, FrameBody, Kind, MessageServer

log = logging.getLogger(__name__)

FWHM_PER_SIGMA = 2.35482


class PhantomKind(str, enum.Enum):
    RANDOM_ETCH = "random-etch"
    SIEMENS_STAR = "siemens-star"
    CONSTANT = "constant"


@dataclass(frozen=True)
class Phantom:
    object: ComplexImage
    truth_phase: PhaseMap
    kind: PhantomKind


@dataclass(frozen=True)
class ProbeModel:
    probe: ComplexImage
    fwhm_nm: float
    pixel_nm: float
    defocus_rad: float = 0.0


@dataclass(frozen=True)
class PoissonBudget:
    """Mean photon count per frame; frames are Poisson-sampled at this scale."""

    mean_photons: float
    seed: int = 0


@dataclass(frozen=True)
class DiffractionFrame:
    seq: int
    position: ScanPosition
    intensity: np.ndarray  # fftshifted, float64

    def to_body(self) -> FrameBody:
        return FrameBody(self.position.index, self.position.x, self.position.y, self.intensity.astype(np.float32))


def make_probe(fwhm_nm: float, dim: int, pixel_nm: float, defocus_rad: float = 0.0) -> ProbeModel:
    """Gaussian beam whose intensity profile has the given FWHM.

    Peak at pixel ``(dim // 2, dim // 2)``, unit total intensity. The phase
    is flat unless ``defocus_rad`` adds a quadratic curvature reaching that
    many radians at half the FWHM; a curved wavefront removes the
    conjugate-twin symmetry of a real, centred beam.
    """
    if not fwhm_nm > 0 or not pixel_nm > 0:
        raise ValueError("fwhm_nm and pixel_nm must be positive")
    fwhm_px = fwhm_nm / pixel_nm
    if fwhm_px >= dim:
        raise ValueError(f"probe FWHM of {fwhm_px:.1f} px does not fit a {dim}-pixel grid")
    sigma = fwhm_px / FWHM_PER_SIGMA
    r = np.arange(dim) - dim // 2
    rr2 = r[:, None] ** 2 + r[None, :] ** 2
    amplitude = np.exp(-rr2 / (4.0 * sigma**2))  # |p|^2 = exp(-r^2 / 2 sigma^2)
    amplitude /= math.sqrt(np.sum(amplitude**2))
    probe = amplitude * np.exp(1j * defocus_rad * rr2 / (fwhm_px / 2) ** 2)
    return ProbeModel(ComplexImage(probe), float(fwhm_nm), float(pixel_nm), float(defocus_rad))


def gaussian_window(fwhm_px: float, dim: int) -> np.ndarray:
    """Intensity-style Gaussian window, peak 1 at the grid centre."""
    sigma = fwhm_px / FWHM_PER_SIGMA
    r = np.arange(dim) - dim // 2
    return np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma**2))


def make_phantom(
    kind: PhantomKind | str,
    dim: int,
    seed: int = 0,
    phase_depth: float = 1.0,
    feature_px: float | None = None,
) -> Phantom:
    """Unit-amplitude phase object.

    ``random-etch`` thresholds a smoothed random field at its median, giving
    a binary phase in {0, phase_depth}. ``feature_px`` is the smoothing
    width (default ``max(1.5, dim / 32)``).
    """
    kind = PhantomKind(kind)
    if dim < 16:
        raise ValueError("phantom dim must be >= 16")
    if not 0 < phase_depth <= math.pi:
        raise ValueError("phase_depth must be in (0, pi]")
    if kind is PhantomKind.CONSTANT:
        phase = np.zeros((dim, dim))
    elif kind is PhantomKind.RANDOM_ETCH:
        rng = np.random.default_rng(seed)
        width = feature_px if feature_px is not None else max(1.5, dim / 32)
        field_ = gaussian_filter(rng.standard_normal((dim, dim)), width, mode="wrap")
        phase = np.where(field_ > np.median(field_), phase_depth, 0.0)
    else:
        r = np.arange(dim) - dim // 2
        theta = np.arctan2(r[:, None], r[None, :])
        spokes = 8 + (seed % 8)
        inside = (r[:, None] ** 2 + r[None, :] ** 2) <= (0.45 * dim) ** 2
        phase = np.where((np.sin(spokes * theta) > 0) & inside, phase_depth, 0.0)
    obj = np.exp(1j * phase)
    return Phantom(ComplexImage(obj), PhaseMap(phase), kind)


def exit_wave(obj: np.ndarray, probe: np.ndarray, center_px: tuple[int, int]) -> np.ndarray:
    return probe * extract_patch(obj, center_px, probe.shape[0])


def far_field(psi: np.ndarray) -> np.ndarray:
    """Centred far-field intensity under the unitary 2-D FFT."""
    return np.abs(np.fft.fftshift(np.fft.fft2(psi, norm="ortho"))) ** 2


def forward_diffract(
    phantom: Phantom, probe: ProbeModel, pos: ScanPosition, geom: ExperimentGeometry, seq: int | None = None
) -> DiffractionFrame:
    p = probe.probe.data
    if p.shape[0] != geom.frame_dim:
        raise ValueError(f"probe dim {p.shape[0]} != frame_dim {geom.frame_dim}")
    obj = phantom.object.data
    center = position_to_pixel(pos, probe.pixel_nm, obj.shape)
    d = far_field(exit_wave(obj, p, center))
    return DiffractionFrame(pos.index if seq is None else seq, pos, d)


def acquire_scan(
    phantom: Phantom,
    probe: ProbeModel,
    path: ScanPath,
    geom: ExperimentGeometry,
    noise: PoissonBudget | None = None,
) -> list[DiffractionFrame]:
    frames = []
    for pos in path:
        try:
            frames.append(forward_diffract(phantom, probe, pos, geom))
        except BoundsError as exc:
            raise BoundsError(f"scan position {pos.index} out of bounds: {exc}") from exc
    if noise is None:
        return frames
    if noise.mean_photons <= 0:
        return [DiffractionFrame(f.seq, f.position, np.zeros_like(f.intensity)) for f in frames]
    rng = np.random.default_rng(noise.seed)
    scale = noise.mean_photons / np.mean([f.intensity.sum() for f in frames])
    return [
        DiffractionFrame(f.seq, f.position, rng.poisson(f.intensity * scale).astype(np.float64) / scale) for f in frames
    ]


class FrameServer:
    """Streams frames over the wire protocol at a fixed rate.

    Each subscriber gets its own replay of the scan starting at the
    ``from_seq`` it asks for. In ``live`` mode the scan runs on a clock
    that starts with the server, so late subscribers join mid-scan and a
    subscriber arriving after the last frame gets only the end marker.
    """

    def __init__(self, frames: list[FrameBody], rate_hz: float, listen_addr: str = "127.0.0.1:0", live: bool = False):
        if not rate_hz > 0:
            raise ValueError("rate_hz must be positive")
        self.frames = list(frames)
        self.rate_hz = float(rate_hz)
        self.live = live
        self._payloads = [f.pack() for f in self.frames]
        self._t_start = time.monotonic()
        self._server = MessageServer(listen_addr, self._handle)
        self.subscribers = 0
        self._lock = threading.Lock()

    @property
    def address(self) -> str:
        return self._server.address

    def start(self) -> FrameServer:
        self._t_start = time.monotonic()
        self._server.start()
        return self

    def stop(self):
        self._server.stop()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def _handle(self, conn: Connection):
        req = conn.recv(timeout=10.0)
        if req is None or req.kind != Kind.CONTROL:
            return
        body = req.body()
        start = int(body.get("from_seq", 0))
        n = len(self._payloads)
        if self.live:
            start = max(start, int((time.monotonic() - self._t_start) * self.rate_hz))
        with self._lock:
            self.subscribers += 1
        t0 = time.monotonic()
        period = 1.0 / self.rate_hz
        for k, i in enumerate(range(start, n)):
            _sleep_until(t0 + k * period)
            # sendall blocks on a slow reader; only this connection is delayed
            conn.send(Kind.FRAME, self._payloads[i], seq=i)
        _sleep_until(t0 + max(0, n - start) * period)
        conn.send_json(Kind.CONTROL, {"op": "end", "frames": n}, seq=max(n, start))


def _sleep_until(deadline: float):
    while True:
        dt = deadline - time.monotonic()
        if dt <= 0:
            return
        time.sleep(min(dt, 0.05))


def serve_frames(frames, rate_hz: float, listen_addr: str = "127.0.0.1:0", live: bool = False) -> FrameServer:
    bodies = [f.to_body() if isinstance(f, DiffractionFrame) else f for f in frames]
    return FrameServer(bodies, rate_hz, listen_addr, live).start()


@dataclass(frozen=True)
class SimulationConfig:
    n: int = 963
    step_nm: float = 50.0
    scan: str = "spiral"  # or "grid"
    phantom: str = "random-etch"
    phantom_seed: int = 7
    phase_depth: float = 1.0
    feature_px: float | None = None
    probe_fwhm_nm: float = 600.0
    probe_defocus_rad: float = 0.0
    margin_px: int = 4
    photon_energy: float = 10.4
    detector_pixel: float = 55.0
    detector_distance: float = 1.55
    frame_dim: int = 64
    noise_photons: float | None = None
    noise_seed: int = 0

    @property
    def geometry(self) -> ExperimentGeometry:
        return ExperimentGeometry(self.photon_energy, self.detector_pixel, self.detector_distance, self.frame_dim)


@dataclass
class Simulation:
    config: SimulationConfig
    phantom: Phantom
    probe: ProbeModel
    path: ScanPath
    frames: list[DiffractionFrame]
    pixel_nm: float

    @property
    def centers(self) -> list[tuple[int, int]]:
        shape = self.phantom.object.data.shape
        return [position_to_pixel(p, self.pixel_nm, shape) for p in self.path]

    def index_meta(self) -> dict:
        cfg = self.config
        return {
            "geometry": {
                "photon_energy": cfg.photon_energy,
                "detector_pixel": cfg.detector_pixel,
                "detector_distance": cfg.detector_distance,
                "frame_dim": cfg.frame_dim,
            },
            "path": self.path,
            "pixel_nm": self.pixel_nm,
            "probe_fwhm_nm": cfg.probe_fwhm_nm,
            "probe_defocus_rad": cfg.probe_defocus_rad,
            "object_shape": list(self.phantom.object.data.shape),
            "phantom": {"kind": cfg.phantom, "seed": cfg.phantom_seed, "phase_depth": cfg.phase_depth},
        }


def object_dim_for(path: ScanPath, pixel_nm: float, frame_dim: int, margin_px: int) -> int:
    extent = np.max(np.abs(path.xy())) / pixel_nm if len(path) else 0.0
    dim = 2 * (int(math.ceil(extent)) + margin_px) + frame_dim
    return max(16, dim + dim % 2)


def simulate(cfg: SimulationConfig) -> Simulation:
    """Phantom, probe, scan path and noiseless (or Poisson) frames for one scan."""
    from .core import grid_path, real_space_pixel, spiral_path

    geom = cfg.geometry
    pixel_nm = real_space_pixel(geom)
    path = spiral_path(cfg.n, cfg.step_nm) if cfg.scan == "spiral" else grid_path(cfg.n, cfg.step_nm)
    dim = object_dim_for(path, pixel_nm, cfg.frame_dim, cfg.margin_px)
    phantom = make_phantom(cfg.phantom, dim, cfg.phantom_seed, cfg.phase_depth, cfg.feature_px)
    probe = make_probe(cfg.probe_fwhm_nm, cfg.frame_dim, pixel_nm, cfg.probe_defocus_rad)
    noise = PoissonBudget(cfg.noise_photons, cfg.noise_seed) if cfg.noise_photons is not None else None
    frames = acquire_scan(phantom, probe, path, geom, noise)
    return Simulation(cfg, phantom, probe, path, frames, pixel_nm)
