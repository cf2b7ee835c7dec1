"""Shared fixtures-as-functions for the test suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ptychoflow.core import grid_path, illumination_mask, position_to_pixel
from ptychoflow.recon import Measurements, TrainingPair
from ptychoflow.simlab import Phantom, exit_wave, far_field, make_phantom, make_probe

SMALL_PIXEL_NM = 10.0


@dataclass
class SmallScan:
    phantom: Phantom
    probe: np.ndarray
    centers: list
    data: Measurements
    mask: np.ndarray


def small_scan(seed: int = 7, phase_depth: float = 1.0) -> SmallScan:
    """16x16 phantom, 8x8 probe of 5 px FWHM, 5x5 grid at a 2 px step (60% linear overlap)."""
    phantom = make_phantom("random-etch", 16, seed=seed, phase_depth=phase_depth)
    probe = make_probe(5 * SMALL_PIXEL_NM, 8, SMALL_PIXEL_NM).probe.data
    path = grid_path(25, 2 * SMALL_PIXEL_NM)
    centers = [position_to_pixel(p, SMALL_PIXEL_NM, (16, 16)) for p in path]
    frames = [far_field(exit_wave(phantom.object.data, probe, c)) for c in centers]
    mask = illumination_mask((16, 16), centers, np.abs(probe) ** 2)
    return SmallScan(phantom, probe, centers, Measurements.from_intensities(frames, centers), mask)


def random_pairs(n: int, dim: int, seed: int = 0) -> list[TrainingPair]:
    rng = np.random.default_rng(seed)
    return [
        TrainingPair(
            i,
            rng.random((dim, dim)).astype(np.float32),
            rng.uniform(-1, 1, (dim, dim)).astype(np.float32),
        )
        for i in range(n)
    ]
