import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from despeckle.gradcheck import check_gradients
from despeckle.networks import (DiscriminatorConfig, GeneratorConfig, build_discriminator,
                                build_generator, discriminator_forward, generator_forward,
                                generator_parameter_tally)
from despeckle.tensorcore import DimensionError, Tensor, default_dtype
from gradcases import MICRO_D, MICRO_G, NETWORK_CASES


def test_micro_networks_are_small():
    assert build_generator(MICRO_G, 0).num_parameters() <= 2000
    assert build_discriminator(MICRO_D, 0).num_parameters() <= 2000


@pytest.mark.parametrize("name", sorted(NETWORK_CASES))
def test_network_gradients(name):
    rng = np.random.default_rng(11)
    with default_dtype(np.float64):
        fn, wrt = NETWORK_CASES[name](rng)
        assert check_gradients(fn, wrt) < 1e-6


@pytest.mark.parametrize("cfg", [GeneratorConfig(), GeneratorConfig(channels=16),
                                 GeneratorConfig(channels=8, n_resblocks=2, shortcut="conv1x1")])
def test_parameter_count_matches_tally(cfg):
    assert build_generator(cfg, 0).num_parameters() == generator_parameter_tally(cfg)


def test_paper_generator_width():
    # 64-channel trunk, six 3-conv residual blocks
    mp = build_generator(GeneratorConfig(), 0)
    assert mp.params["block5.conv2.w"].shape == (64, 64, 3, 3)
    assert mp.params["stem.conv.w"].shape == (64, 1, 7, 7)


@settings(max_examples=8, deadline=None)
@given(st.integers(7, 20), st.integers(7, 20), st.integers(1, 3))
def test_generator_is_fully_convolutional(h, w, n):
    mp = build_generator(GeneratorConfig(channels=4, n_resblocks=1), 0)
    x = Tensor(np.random.default_rng(h * w).uniform(size=(n, 1, h, w)))
    out = generator_forward(mp, x, "infer")
    assert out.shape == (n, 1, h, w)
    assert out.data.min() >= 0 and out.data.max() <= 1


def test_generator_rejects_bad_input():
    mp = build_generator(GeneratorConfig(channels=4, n_resblocks=1), 0)
    with pytest.raises(DimensionError):
        generator_forward(mp, Tensor(np.zeros((1, 2, 16, 16))))
    with pytest.raises(DimensionError):
        generator_forward(mp, Tensor(np.zeros((1, 1, 5, 5))))
    with pytest.raises(ValueError):
        generator_forward(mp, Tensor(np.full((1, 1, 16, 16), 1.5)))


def test_train_mode_updates_bn_infer_does_not():
    mp = build_generator(GeneratorConfig(channels=4, n_resblocks=1), 0)
    x = Tensor(np.random.default_rng(0).uniform(size=(2, 1, 12, 12)))
    before = mp.fingerprint()
    generator_forward(mp, x, "infer")
    assert mp.fingerprint() == before
    generator_forward(mp, x, "train")
    assert mp.fingerprint() != before


def test_same_seed_same_weights():
    cfg = GeneratorConfig(channels=8)
    assert build_generator(cfg, 3).fingerprint() == build_generator(cfg, 3).fingerprint()
    assert build_generator(cfg, 3).fingerprint() != build_generator(cfg, 4).fingerprint()


def test_clone_is_independent():
    mp = build_generator(GeneratorConfig(channels=4, n_resblocks=1), 0)
    cp = mp.clone()
    cp.params["stem.conv.w"].data = cp.params["stem.conv.w"].data + 1
    assert cp.fingerprint() != mp.fingerprint()


def test_discriminator_outputs_probabilities():
    cfg = DiscriminatorConfig(base_channels=4, zero_init_head=False)
    mp = build_discriminator(cfg, 0)
    out = discriminator_forward(mp, Tensor(np.random.default_rng(1).uniform(size=(5, 1, 32, 32))))
    assert out.shape == (5,)
    assert ((out.data > 0) & (out.data < 1)).all()


def test_zero_head_starts_undecided():
    mp = build_discriminator(DiscriminatorConfig(base_channels=4), 0)
    out = discriminator_forward(mp, Tensor(np.random.default_rng(1).uniform(size=(3, 1, 16, 16))))
    np.testing.assert_allclose(out.data, 0.5)


def test_discriminator_channel_doubling():
    cfg = DiscriminatorConfig()
    mp = build_discriminator(cfg, 0)
    assert [mp.params[f"stage{s}.conv2.w"].shape[0] for s in range(3)] == [64, 128, 256]
    assert mp.params["head.w"].shape == (1, 256)


def test_discriminator_minimum_size():
    mp = build_discriminator(DiscriminatorConfig(base_channels=2), 0)
    with pytest.raises(DimensionError):
        discriminator_forward(mp, Tensor(np.zeros((1, 1, 4, 4))))


def test_config_validation():
    with pytest.raises(ValueError):
        GeneratorConfig(stem_kernel=6)
    with pytest.raises(ValueError):
        GeneratorConfig(shortcut="dense")
    with pytest.raises(ValueError):
        DiscriminatorConfig(n_stages=0)
