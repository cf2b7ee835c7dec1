from __future__ import annotations

import cmath

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import small_scan
from ptychoflow.recon import (
    Measurements,
    ReconConfig,
    ReconError,
    ReconState,
    TrainingPair,
    aligned_phase_rmse,
    data_error,
    read_complex,
    read_pair,
    reconstruct,
    rpie_sweep,
    write_complex,
    write_pair,
)
from ptychoflow.simlab import SimulationConfig, exit_wave, far_field, simulate
from ptychoflow.xfer import write_dataset


def consistent_data(obj, probe, centers):
    return Measurements.from_intensities([far_field(exit_wave(obj, probe, c)) for c in centers], centers)


@pytest.mark.parametrize("alpha", [0.05, 0.5, 1.0])
def test_fixed_point_on_consistent_data(alpha, rng):
    scan = small_scan()
    obj = np.exp(1j * rng.uniform(-1, 1, (16, 16))) * rng.uniform(0.5, 1.5, (16, 16))
    state = ReconState(obj.copy(), scan.probe.copy())
    rpie_sweep(state, consistent_data(obj, scan.probe, scan.centers), ReconConfig(alpha=alpha))
    assert np.max(np.abs(state.object - obj)) < 1e-10


def _dft2x2(a):
    out = np.zeros((2, 2), complex)
    for u in range(2):
        for v in range(2):
            out[u, v] = sum(a[r, c] * cmath.exp(-2j * cmath.pi * (u * r + v * c) / 2) for r in range(2) for c in range(2)) / 2
    return out


def _idft2x2(a):
    out = np.zeros((2, 2), complex)
    for r in range(2):
        for c in range(2):
            out[r, c] = sum(a[u, v] * cmath.exp(2j * cmath.pi * (u * r + v * c) / 2) for u in range(2) for v in range(2)) / 2
    return out


def test_single_step_matches_hand_oracle():
    p = np.array([[1.0, 0.5j], [0.25, 0.8 - 0.1j]])
    o = np.array([[1.0, 0.9j], [0.7, 1.1]], dtype=complex)
    d = np.array([[0.4, 1.3], [0.2, 0.9]])  # unshifted intensities
    alpha = 0.3
    # oracle: explicit loops, no library FFT
    psi = p * o
    Psi = _dft2x2(psi)
    Psi2 = np.array([[np.sqrt(d[u, v]) * Psi[u, v] / max(abs(Psi[u, v]), 1e-12) for v in range(2)] for u in range(2)])
    dpsi = _idft2x2(Psi2) - psi
    pmax = max(abs(x) ** 2 for x in p.ravel())
    expect = np.array(
        [[o[r, c] + np.conj(p[r, c]) * dpsi[r, c] / ((1 - alpha) * abs(p[r, c]) ** 2 + alpha * pmax) for c in range(2)] for r in range(2)]
    )
    data = Measurements(np.sqrt(d)[None], [(1, 1)])
    state = ReconState(o.copy(), p.copy())
    rpie_sweep(state, data, ReconConfig(alpha=alpha))
    np.testing.assert_allclose(state.object, expect, atol=1e-14)


def test_alpha_one_is_epie():
    scan = small_scan()
    s1 = ReconState(np.ones((16, 16), complex), scan.probe.copy())
    rpie_sweep(s1, scan.data, ReconConfig(alpha=1.0))
    # ePIE update with max|p|^2 denominator, same seeded order
    obj = np.ones((16, 16), complex)
    p = scan.probe
    order = np.random.default_rng([0, 0]).permutation(len(scan.data))
    for j in order:
        r0, c0 = scan.centers[j][0] - 4, scan.centers[j][1] - 4
        patch = obj[r0 : r0 + 8, c0 : c0 + 8]
        psi = p * patch
        far = np.fft.fft2(psi, norm="ortho")
        far = scan.data.amplitudes[j] * far / np.maximum(np.abs(far), 1e-12)
        patch += np.conj(p) * (np.fft.ifft2(far, norm="ortho") - psi) / np.max(np.abs(p) ** 2)
    np.testing.assert_allclose(s1.object, obj, atol=1e-13)


def test_sweep_order_reproducible():
    scan = small_scan()
    a = ReconState(np.ones((16, 16), complex), scan.probe.copy())
    b = a.copy()
    for _ in range(3):
        rpie_sweep(a, scan.data, ReconConfig(seed=4))
        rpie_sweep(b, scan.data, ReconConfig(seed=4))
    np.testing.assert_array_equal(a.object, b.object)
    c = ReconState(np.ones((16, 16), complex), scan.probe.copy())
    rpie_sweep(c, scan.data, ReconConfig(seed=5))
    rpie_sweep(c, scan.data, ReconConfig(seed=5))
    assert not np.array_equal(a.object, c.object)


def test_data_error_values():
    scan = small_scan()
    st_ = ReconState(scan.phantom.object.data.copy(), scan.probe.copy())
    assert data_error(st_, scan.data) < 1e-12
    zero = ReconState(np.zeros((16, 16), complex), scan.probe.copy())
    assert data_error(zero, scan.data) == 1.0


def test_data_error_global_phase_gauge():
    scan = small_scan()
    est = np.ones((16, 16), complex)
    a = data_error(ReconState(est, scan.probe), scan.data)
    b = data_error(ReconState(est * np.exp(1j * np.pi / 3), scan.probe), scan.data)
    assert a == pytest.approx(b, rel=1e-12)


def test_data_error_trend_on_noiseless_phantom():
    scan = small_scan()
    state = ReconState(np.ones((16, 16), complex), scan.probe.copy())
    errs = [data_error(state, scan.data)]
    for _ in range(100):
        rpie_sweep(state, scan.data, ReconConfig())
        errs.append(data_error(state, scan.data))
    errs = np.array(errs)
    assert np.max(np.diff(errs)) <= 0.05 * errs[0]
    assert errs[-1] < 0.01 * errs[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_raises_with_iteration():
    scan = small_scan()
    state = ReconState(np.ones((16, 16), complex), scan.probe.copy(), iteration=4)
    state.object[8, 8] = np.nan
    with pytest.raises(ReconError) as exc:
        rpie_sweep(state, scan.data, ReconConfig())
    assert exc.value.iteration == 5


def test_probe_update_smoke():
    scan = small_scan()
    state = ReconState(np.ones((16, 16), complex), scan.probe * 0.9)
    cfg = ReconConfig(update_probe=True)
    for _ in range(20):
        rpie_sweep(state, scan.data, cfg)
    assert np.all(np.isfinite(state.probe))
    assert state.residual_history[-1] < state.residual_history[0]


@pytest.mark.parametrize("kw", [{"iterations": 0}, {"alpha": 0.0}, {"alpha": 1.5}, {"snapshot_every": 0}, {"probe_beta": 0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ReconConfig(**kw)


@given(phi=st.floats(-np.pi, np.pi))
def test_aligned_rmse_ignores_global_phase(phi):
    truth = np.exp(1j * np.linspace(-1, 1, 64).reshape(8, 8))
    assert aligned_phase_rmse(truth * np.exp(1j * phi), truth) < 1e-7


def test_complex_and_pair_files(tmp_path, rng):
    arr = (rng.standard_normal((3, 5)) + 1j * rng.standard_normal((3, 5))).astype(np.complex64)
    write_complex(tmp_path / "o.bin", arr)
    raw = (tmp_path / "o.bin").read_bytes()
    assert len(raw) == 16 + 8 * 15 and raw[:16] == (3).to_bytes(8, "little") + (5).to_bytes(8, "little")
    np.testing.assert_array_equal(read_complex(tmp_path / "o.bin"), arr)
    pair = TrainingPair(7, rng.random((4, 4)).astype(np.float32), rng.random((4, 4)).astype(np.float32), 1.5, -2.5)
    write_pair(tmp_path / "p.bin", pair)
    back = read_pair(tmp_path / "p.bin")
    assert back.pos_index == 7 and (back.x_nm, back.y_nm) == (1.5, -2.5)
    np.testing.assert_array_equal(back.diffraction, pair.diffraction)
    np.testing.assert_array_equal(back.label_phase, pair.label_phase)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    sim = simulate(SimulationConfig(n=16, scan="grid", step_nm=80.0, frame_dim=16, probe_fwhm_nm=200.0))
    write_dataset(root, [f.to_body() for f in sim.frames], sim.index_meta())
    return root, sim


def test_reconstruct_outputs(tmp_path, tiny_dataset):
    root, sim = tiny_dataset
    res = reconstruct(root, ReconConfig(iterations=1, snapshot_every=1), tmp_path / "out")
    assert [p.name for p in res.snapshots] == ["object_iter1.bin"]
    assert len(res.pairs) == 16 == len(list((tmp_path / "out" / "pairs").glob("pair_*.bin")))
    lines = (tmp_path / "out" / "residuals.csv").read_text().splitlines()
    assert lines[0] == "iteration,residual" and len(lines) == 2
    for pair in res.pairs:
        assert np.all(np.abs(pair.label_phase) <= np.pi)
        assert pair.diffraction.shape == pair.label_phase.shape == (16, 16)


def test_reconstruct_snapshot_cadence_and_limit(tmp_path, tiny_dataset):
    root, _ = tiny_dataset
    res = reconstruct(root, ReconConfig(iterations=25, snapshot_every=10), tmp_path / "o", limit=9, pairs_dir=tmp_path / "pp")
    assert [p.name for p in res.snapshots] == ["object_iter10.bin", "object_iter20.bin", "object_iter25.bin"]
    assert len(list((tmp_path / "pp").glob("pair_*.bin"))) == 9
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".")]


def test_reconstruct_pair_count_equals_positions_at_full_scale(tmp_path):
    sim = simulate(SimulationConfig(n=963, frame_dim=16, probe_fwhm_nm=60.0))
    write_dataset(tmp_path / "ds", [f.to_body() for f in sim.frames], sim.index_meta())
    res = reconstruct(tmp_path / "ds", ReconConfig(iterations=1))
    assert len(res.pairs) == 963
