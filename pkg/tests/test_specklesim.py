import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from despeckle import specklesim as ss
from despeckle.tensorcore import DimensionError


def _envelope_snr(seed, profile=ss.LOW_QUALITY, size=64):
    env = ss.simulate_envelope(ss.make_phantom(size, 0, seed), profile, seed)
    return env.mean() / env.std()


def test_rayleigh_constant():
    assert ss.RAYLEIGH_SNR == pytest.approx(1.913, abs=1e-3)


@pytest.mark.parametrize("profile", [ss.LOW_QUALITY, ss.HIGH_QUALITY])
def test_homogeneous_envelope_is_rayleigh(profile):
    snr = np.mean([_envelope_snr(s, profile) for s in range(3)])
    assert abs(snr - ss.RAYLEIGH_SNR) < 0.1


def test_low_quality_speckle_is_wider():
    for seed in range(3):
        ph = ss.make_phantom(64, 0, seed)
        low = ss.simulate_speckle(ph, ss.LOW_QUALITY, seed).pixels
        high = ss.simulate_speckle(ph, ss.HIGH_QUALITY, seed).pixels
        assert ss.lateral_correlation_width(low) > ss.lateral_correlation_width(high)


def test_low_quality_has_lower_ssnr():
    ph = ss.make_phantom(128, 0, 4)
    low = ss.simulate_speckle(ph, ss.LOW_QUALITY, 5).pixels
    high = ss.simulate_speckle(ph, ss.HIGH_QUALITY, 5).pixels
    snr = lambda a: a.mean() / a.std()  # noqa: E731
    assert snr(low) < snr(high)


def test_psf_unit_energy():
    for profile in (ss.LOW_QUALITY, ss.HIGH_QUALITY):
        k = ss.psf_kernel(profile, 4)
        assert (k ** 2).sum() == pytest.approx(1.0)


def test_speckle_is_deterministic():
    ph = ss.make_phantom(64, 2, 7)
    a = ss.simulate_speckle(ph, ss.LOW_QUALITY, 8).pixels
    b = ss.simulate_speckle(ss.make_phantom(64, 2, 7), ss.LOW_QUALITY, 8).pixels
    np.testing.assert_array_equal(a, b)
    assert a.dtype == np.float32 and a.min() >= 0 and a.max() <= 1


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 3), st.integers(0, 10_000))
def test_phantom_invariants(k, seed):
    ph = ss.make_phantom(96, k, seed)
    assert len(ph.inclusions) == k
    contrasts = [inc.contrast for inc in ph.inclusions]
    assert len(set(contrasts)) == k
    assert all(abs(c - ph.background) >= 0.1 - 1e-9 for c in contrasts)
    y, x, h, w = ph.clear_region()
    assert (ph.echogenicity[y:y + h, x:x + w] == ph.background).all()
    assert (ph.echogenicity == ph.background).mean() >= 0.25


def test_phantom_errors():
    with pytest.raises(DimensionError):
        ss.make_phantom(32, 0, 0)
    with pytest.raises(ss.PlacementError):
        ss.make_phantom(64, 20, 0)


def test_profile_validation():
    with pytest.raises(ValueError):
        ss.PsfProfile(0, 1, "low_quality")
    with pytest.raises(ValueError):
        ss.check_profile_pair(ss.HIGH_QUALITY, ss.LOW_QUALITY)
    ss.check_profile_pair(ss.LOW_QUALITY, ss.HIGH_QUALITY)


def test_log_compress_range():
    env = np.array([[1e-9, 1.0, 100.0]])
    out = ss.log_compress(env)
    assert out[0, 0] == 0.0 and out[0, 2] == 1.0
    assert out[0, 1] == pytest.approx(40 / 50)


def test_make_dataset_writes_manifest(tmp_path):
    entries = ss.make_dataset(3, ss.LOW_QUALITY, tmp_path / "low", seed=1, size=64)
    assert [e[0] for e in entries] == [f"low_quality_{i:04d}.pgm" for i in range(3)]
    assert ss.read_manifest(tmp_path / "low" / "manifest.txt") == entries
    again = ss.make_dataset(3, ss.LOW_QUALITY, tmp_path / "again", seed=1, size=64)
    for (name, _, _), _ in zip(entries, again):
        assert (tmp_path / "low" / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_correlation_width_of_white_noise_is_small():
    noise = np.random.default_rng(0).normal(size=(64, 64))
    assert ss.lateral_correlation_width(noise) < 1.0
