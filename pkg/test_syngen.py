import math

import numpy as np
import pytest

from errors import ConfigurationError, ContractError, DimensionError
from syngen import (PROFILES, AtmosphereParams, DeformationSource, SceneParams, compose, deformation_los,
                    dislocation_displacement, dislocation_los, generate_dataset, incoherence_mask,
                    mogi_los, mogi_point, phase_ramp, sample_source, synthesize_dem,
                    synthesize_interferogram, topo_aps, turbulent_aps, wrap_phase)


def circular_gap(a, b):
    return np.abs(np.angle(np.exp(1j * (np.asarray(a) - np.asarray(b)))))


def zeros(n=16):
    return np.zeros((n, n))


# ------------------------------------------------------------------- wrap

def test_wrap_convention():
    np.testing.assert_allclose(wrap_phase(1.5 * math.pi), -0.5 * math.pi)
    assert wrap_phase(math.pi) == pytest.approx(-math.pi)
    assert wrap_phase(-math.pi) == pytest.approx(-math.pi)
    assert wrap_phase(0.0) == 0.0


def test_wrap_is_periodic_and_in_range():
    rng = np.random.default_rng(0)
    x = rng.uniform(-10 * math.pi, 10 * math.pi, size=5000)
    k = rng.integers(-5, 6, size=x.size)
    w = wrap_phase(x)
    assert np.all(w >= -math.pi) and np.all(w < math.pi)
    assert circular_gap(wrap_phase(x + 2 * math.pi * k), w).max() < 1e-6


# -------------------------------------------------------------------- DEM

def test_flat_relief_gives_flat_dem():
    np.testing.assert_array_equal(synthesize_dem(SceneParams(grid_size=16, relief=(0.0, 0.0))), 0.0)


def test_dem_deterministic_and_in_relief():
    params = SceneParams(grid_size=32, rng_seed=7)
    a, b = synthesize_dem(params), synthesize_dem(params)
    np.testing.assert_array_equal(a, b)
    assert a.min() == pytest.approx(0.0) and a.max() == pytest.approx(2000.0)


def test_dem_spectrum_slope():
    n = 64
    f = np.fft.fftfreq(n)
    radius = np.rint(np.hypot(*np.meshgrid(f, f)) * n).astype(int)
    bins = np.arange(1, n // 2)
    slopes = []
    for seed in range(5):
        dem = synthesize_dem(SceneParams(grid_size=n, rng_seed=seed))
        power = np.abs(np.fft.fft2(dem - dem.mean())) ** 2
        radial = np.array([power[radius == r].mean() for r in bins])
        slopes.append(np.polyfit(np.log(bins), np.log(radial), 1)[0])
    assert abs(np.mean(slopes) + 2.0) < 0.5


def test_scene_validation():
    with pytest.raises(ConfigurationError):
        SceneParams(grid_size=8).validate()
    with pytest.raises(ConfigurationError):
        SceneParams(relief=(100.0, 0.0)).validate()


# ------------------------------------------------------------------- mogi

def test_mogi_uplift_above_source():
    src = DeformationSource("mogi", depth=2000.0, volume_change=1e6)
    ue, un, uz = mogi_point(src, 0.0, 0.0)
    assert uz == pytest.approx(0.75e6 / (math.pi * 4e6), rel=1e-9)
    assert uz == pytest.approx(0.0597, abs=1e-4)
    assert ue == 0.0 and un == 0.0


def test_mogi_decays_far_away():
    src = DeformationSource("mogi", depth=2000.0, volume_change=1e6)
    peak = mogi_point(src, 0.0, 0.0)[2]
    ue, un, uz = mogi_point(src, 50 * 2000.0, 0.0)
    assert math.hypot(ue, un, uz) < 0.01 * peak


def test_mogi_los_requires_mogi_kind():
    with pytest.raises(ContractError):
        mogi_los(DeformationSource("sill", depth=1000.0), SceneParams(grid_size=16))


# ------------------------------------------------------------ dyke / sill

def _sill(**kw):
    base = dict(depth=800.0, length=2000.0, width=2000.0, peak_amplitude=0.2)
    base.update(kw)
    return DeformationSource("sill", **base)


def test_zero_peak_amplitude_gives_zero_field():
    scene = SceneParams(grid_size=16)
    np.testing.assert_array_equal(dislocation_los(_sill(peak_amplitude=0.0), scene), 0.0)


def test_dislocation_peak_matches_amplitude():
    scene = SceneParams(grid_size=32)
    for kind in ("dyke", "sill"):
        src = DeformationSource(kind, depth=500.0, strike=30.0, dip=80.0, length=3000.0, width=1500.0,
                                peak_amplitude=0.17)
        assert np.abs(dislocation_los(src, scene)).max() == pytest.approx(0.17)


def test_dislocation_rejects_other_kinds():
    with pytest.raises(ContractError):
        dislocation_los(DeformationSource("mogi", depth=1000.0), SceneParams(grid_size=16))


@pytest.mark.parametrize("strike", [0.0, 25.0, 90.0])
def test_sill_strike_rotation_rotates_field(strike):
    scene = SceneParams(grid_size=32)
    src = _sill(length=4000.0, width=1500.0, dip=8.0, strike=strike)
    base = dislocation_los(src, scene)
    turned = dislocation_los(_sill(length=4000.0, width=1500.0, dip=8.0, strike=strike + 90.0), scene)
    np.testing.assert_allclose(turned, np.rot90(base, -1), atol=1e-6)


def test_dyke_uplift_rotates_with_strike():
    scene = SceneParams(grid_size=32)
    kw = dict(depth=300.0, dip=75.0, length=3000.0, width=1000.0, peak_amplitude=0.1)
    up0 = dislocation_displacement(DeformationSource("dyke", strike=0.0, **kw), scene)[2]
    up90 = dislocation_displacement(DeformationSource("dyke", strike=90.0, **kw), scene)[2]
    np.testing.assert_allclose(up90, np.rot90(up0, -1), atol=1e-6)


@pytest.mark.parametrize("dip", [0.0, 5.0, 10.0])
def test_square_sill_is_point_symmetric(dip):
    field = dislocation_los(_sill(dip=dip, strike=37.0), SceneParams(grid_size=32))
    assert np.abs(field - np.rot90(field, 2)).max() < 1e-9


def test_sampled_sources_respect_deformation_range():
    scene = SceneParams(grid_size=16)
    rng = np.random.default_rng(3)
    for kind in ("mogi", "dyke", "sill"):
        for _ in range(5):
            src = sample_source(kind, PROFILES["source"], scene, rng)
            peak = np.abs(deformation_los(src, scene)).max()
            assert 0.10 - 1e-9 <= peak <= 0.25 + 1e-9


# ------------------------------------------------------------- atmosphere

def test_zero_strength_turbulence():
    out = turbulent_aps(AtmosphereParams(turbulent_max_strength=0.0), SceneParams(grid_size=16))
    np.testing.assert_array_equal(out, 0.0)


def test_turbulence_deterministic_and_scaled():
    scene = SceneParams(grid_size=32, rng_seed=4)
    atm = AtmosphereParams(turbulent_max_strength=0.02)
    a, b = turbulent_aps(atm, scene), turbulent_aps(atm, scene)
    np.testing.assert_array_equal(a, b)
    assert np.abs(a).max() == pytest.approx(0.02 * scene.phase_per_meter)


def test_atmosphere_validation():
    with pytest.raises(ConfigurationError):
        turbulent_aps(AtmosphereParams(correlation_length=0.0), SceneParams(grid_size=16))


@pytest.mark.slow
def test_turbulence_correlation_at_correlation_length():
    scene = SceneParams(grid_size=64)
    atm = AtmosphereParams(turbulent_max_strength=0.02, correlation_length=5000.0)
    lag = int(atm.correlation_length / scene.pixel_spacing)
    cross = power = 0.0
    for seed in range(10000):
        f = turbulent_aps(atm, scene, np.random.default_rng(seed))
        cross += np.mean(f[:, :-lag] * f[:, lag:]) + np.mean(f[:-lag, :] * f[lag:, :])
        power += 2.0 * np.mean(f * f)
    assert abs(cross / power - math.exp(-1.0)) < 0.1


def test_topo_aps():
    dem = np.full((4, 4), 1000.0)
    np.testing.assert_array_equal(topo_aps(dem, 0.0), 0.0)
    np.testing.assert_allclose(topo_aps(dem, 2.0), 2.0)
    rng = np.random.default_rng(0)
    relief = rng.uniform(0, 2000, size=(8, 8))
    np.testing.assert_allclose(topo_aps(relief, 2 * 0.7), 2 * topo_aps(relief, 0.7))


def test_ramp_and_mask():
    np.testing.assert_allclose(phase_ramp((0.1, 0.0), 4)[2], [0.0, 0.1, 0.2, 0.3])
    scene = SceneParams(grid_size=32)
    mask = incoherence_mask(0.1, scene, np.random.default_rng(0))
    assert mask.dtype == bool
    assert abs(mask.mean() - 0.1) < 0.02
    assert not incoherence_mask(0.0, scene, np.random.default_rng(0)).any()


# ------------------------------------------------------------ composition

def test_compose_zero_components():
    ifg = compose(zeros(), zeros(), zeros(), zeros(), np.zeros((16, 16), dtype=bool))
    np.testing.assert_array_equal(ifg.phase, 0.0)
    assert ifg.label == 0
    assert ifg.phase.dtype == np.float32


def test_half_wavelength_is_one_fringe():
    scene = SceneParams(grid_size=16)
    ifg = compose(np.full((16, 16), scene.radar_wavelength / 2.0), zeros(), zeros(), zeros(),
                  np.zeros((16, 16), dtype=bool), scene)
    assert np.abs(ifg.phase).max() < 1e-6
    assert ifg.label == 1


def test_compose_order_independent():
    rng = np.random.default_rng(2)
    a, b, c = (rng.normal(0, 3, size=(16, 16)) for _ in range(3))
    mask = np.zeros((16, 16), dtype=bool)
    one = compose(zeros(), a, b, c, mask).phase
    two = compose(zeros(), c, a, b, mask).phase
    assert circular_gap(one, two).max() < 1e-6


def test_compose_masks_with_uniform_noise():
    mask = np.zeros((16, 16), dtype=bool)
    mask[:4] = True
    ifg = compose(zeros(), zeros(), zeros(), zeros(), mask, rng=np.random.default_rng(0))
    assert np.all(ifg.phase[4:] == 0.0)
    assert np.count_nonzero(ifg.phase[:4]) == 64
    assert ifg.coherence_mask is not None and ifg.coherence_mask.sum() == 64


def test_compose_shape_mismatch():
    with pytest.raises(DimensionError):
        compose(zeros(16), zeros(16), zeros(8), zeros(16), np.zeros((16, 16), dtype=bool))


def test_interferogram_label_matches_source():
    scene = SceneParams(grid_size=16)
    pos = synthesize_interferogram(11, 1, "source", scene)
    neg = synthesize_interferogram(11, 0, "source", scene)
    assert pos.label == 1 and pos.provenance["source"]["kind"] != "none"
    assert neg.label == 0 and neg.provenance["source"]["kind"] == "none"
    for ifg in (pos, neg):
        assert np.all(ifg.phase >= -np.pi) and np.all(ifg.phase < np.pi)


# ---------------------------------------------------------------- dataset

def test_generate_negatives_only():
    ds = generate_dataset(0, 5, seed=1, scene=SceneParams(grid_size=16))
    assert len(ds) == 5
    assert np.all(ds.labels == 0)


def test_generate_counts_and_determinism():
    scene = SceneParams(grid_size=16)
    a = generate_dataset(6, 4, "source", seed=3, scene=scene)
    b = generate_dataset(6, 4, "source", seed=3, scene=scene)
    assert a.counts() == (6, 4)
    np.testing.assert_array_equal(a.phases, b.phases)
    np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_array_equal(a.seeds, b.seeds)
    assert a.records == b.records
    c = generate_dataset(6, 4, "source", seed=4, scene=scene)
    assert not np.array_equal(a.phases, c.phases)


def test_generate_parallel_matches_serial():
    scene = SceneParams(grid_size=16)
    a = generate_dataset(3, 3, "target", seed=5, scene=scene, workers=1)
    b = generate_dataset(3, 3, "target", seed=5, scene=scene, workers=3)
    np.testing.assert_array_equal(a.phases, b.phases)


def test_generated_records_follow_profiles():
    scene = SceneParams(grid_size=16)
    src = generate_dataset(8, 4, "source", seed=0, scene=scene)
    tgt = generate_dataset(8, 4, "target", seed=0, scene=scene)
    for rec in src.records:
        if rec["label"] == 1:
            assert 0.10 <= rec["peak_los"] <= 0.25
        else:
            assert rec["kind"] == "none" and rec["peak_los"] == 0.0
        assert rec["incoherent_fraction"] == 0.0
    for rec in tgt.records:
        if rec["label"] == 1:
            assert 0.05 <= rec["peak_los"] <= 0.15
    assert max(rec["incoherent_fraction"] for rec in tgt.records) > 0.0


def test_generate_rejects_bad_input():
    with pytest.raises(ConfigurationError):
        generate_dataset(-1, 2)
    with pytest.raises(ConfigurationError):
        generate_dataset(1, 1, profile="lab")


def test_dataset_subset_and_labels():
    ds = generate_dataset(2, 2, seed=0, scene=SceneParams(grid_size=16))
    sub = ds.subset([0, 3])
    assert len(sub) == 2 and sub.records[1] == ds.records[3]
    bare = ds.without_labels()
    assert not bare.has_labels and bare.counts() is None
    assert bare.with_labels(ds.labels).counts() == (2, 2)
