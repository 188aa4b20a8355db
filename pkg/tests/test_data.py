import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from despeckle.data import (PatchSet, ReplayBuffer, assemble_d_minibatch, buffer_insert,
                            extract_patch_set, extract_patches, random_crop, random_crop_batch)
from despeckle.imageio import Image
from despeckle.tensorcore import ContractError, DimensionError


def _image(h, w, seed=0):
    return Image(np.random.default_rng(seed).uniform(size=(h, w)).astype(np.float32), "low_quality")


def test_nine_patches_from_256():
    ps = extract_patches(_image(256, 256), 128, 0.5)
    assert len(ps) == 9
    assert [o[1:] for o in ps.offsets] == [(y, x) for y in (0, 64, 128) for x in (0, 64, 128)]


def test_patches_clamp_to_edge():
    ps = extract_patches(_image(100, 100), 64, 0.5)
    assert sorted({o[1] for o in ps.offsets}) == [0, 32, 36]
    for (_, y, x), p in zip(ps.offsets, ps.patches):
        assert p.shape == (64, 64)


@settings(max_examples=30, deadline=None)
@given(st.integers(64, 200), st.integers(64, 200), st.sampled_from([32, 64]),
       st.sampled_from([0.0, 0.25, 0.5]))
def test_patches_cover_image(h, w, size, overlap):
    img = _image(h, w)
    ps = extract_patches(img, size, overlap)
    covered = np.zeros((h, w), bool)
    for (_, y, x), p in zip(ps.offsets, ps.patches):
        np.testing.assert_array_equal(p, img.pixels[y:y + size, x:x + size])
        covered[y:y + size, x:x + size] = True
    assert covered.all()


def test_patch_errors():
    with pytest.raises(DimensionError):
        extract_patches(_image(50, 80), 64)
    with pytest.raises(ValueError):
        extract_patches(_image(128, 128), 64, 1.0)
    with pytest.raises(ValueError):
        extract_patch_set([], 64)


def test_random_crop_offsets_uniform():
    img = Image(np.arange(128 * 128, dtype=np.float32).reshape(128, 128) / (128 * 128), "low_quality")
    rng = np.random.default_rng(0)
    ys, xs = [], []
    for _ in range(10_000):
        c = random_crop(img, 64, rng).pixels
        flat = int(round(c[0, 0] * 128 * 128))
        ys.append(flat // 128)
        xs.append(flat % 128)
    for offs in (ys, xs):
        counts = np.bincount(offs, minlength=65)
        assert len(counts) == 65
        assert chisquare(counts).pvalue > 0.01


def test_random_crop_batch_shape_and_determinism():
    imgs = [_image(128, 128, s) for s in range(3)]
    a = random_crop_batch(imgs, 64, 5, np.random.default_rng(1))
    b = random_crop_batch(imgs, 64, 5, np.random.default_rng(1))
    assert a.shape == (5, 1, 64, 64) and a.dtype == np.float32
    np.testing.assert_array_equal(a, b)


def test_buffer_rejects_real_images():
    with pytest.raises(ContractError):
        buffer_insert(ReplayBuffer(4), [np.zeros((8, 8))], quality="high_quality")


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 20), st.lists(st.integers(0, 12), min_size=1, max_size=10))
def test_buffer_never_exceeds_capacity(cap, inserts):
    buf = ReplayBuffer(cap, seed=0)
    total = 0
    for n in inserts:
        buffer_insert(buf, [np.full((4, 4), i, np.float32) for i in range(n)])
        total += n
        assert len(buf) == min(total, cap)


def _fakes(n, value=0.0):
    return np.full((n, 1, 8, 8), value, np.float32)


def test_minibatch_warmup_then_50_25_25():
    buf = ReplayBuffer(200, seed=1)
    reals = PatchSet([np.ones((8, 8), np.float32)] * 30, 8, "high_quality")
    rng = np.random.default_rng(0)
    mb = assemble_d_minibatch(buf, reals, _fakes(20), 40, rng)
    assert (mb.n_real, mb.n_fresh, mb.n_buffered) == (20, 20, 0)
    buffer_insert(buf, _fakes(5, 0.5)[:, 0])
    mb = assemble_d_minibatch(buf, reals, _fakes(20), 40, rng)
    assert (mb.n_real, mb.n_fresh, mb.n_buffered) == (20, 15, 5)
    buffer_insert(buf, _fakes(10, 0.5)[:, 0])
    mb = assemble_d_minibatch(buf, reals, _fakes(20), 40, rng)
    assert (mb.n_real, mb.n_fresh, mb.n_buffered) == (20, 10, 10)
    assert mb.images.shape == (40, 1, 8, 8)
    np.testing.assert_array_equal(mb.labels, [1] * 20 + [0] * 20)
    np.testing.assert_array_equal(mb.images[:20], 1.0)
    np.testing.assert_array_equal(mb.images[30:], 0.5)


def test_minibatch_errors():
    buf = ReplayBuffer(10)
    reals = np.ones((4, 1, 8, 8), np.float32)
    with pytest.raises(ContractError):
        assemble_d_minibatch(buf, reals, _fakes(10), 10, np.random.default_rng(0))
    with pytest.raises(ContractError):
        assemble_d_minibatch(buf, reals, _fakes(1), 8, np.random.default_rng(0))
    with pytest.raises(ContractError):
        assemble_d_minibatch(buf, np.zeros((0, 1, 8, 8)), _fakes(8), 8, np.random.default_rng(0))
