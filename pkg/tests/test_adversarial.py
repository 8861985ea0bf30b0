"""Patch sampling schedule, augmentation, discriminator, and GAN losses."""

import numpy as np
import pytest

from helpers import central_fd, leaf

from tuvf import autodiff as ad
from tuvf.adversarial import (AugmentParams, Discriminator, GanConfig,
                              PatchSpec, apply_augmentation, beta_parameter,
                              blur_sigma, crop_real_patch, draw_augment_params,
                              f_literal, gan_losses, sample_patch_spec)
from tuvf.autodiff import Tensor, backward, tape
from tuvf.imgio import gaussian_kernel_1d

CFG = GanConfig()


# -- patch schedule ------------------------------------------------------------

def test_beta_parameter_endpoints():
    assert beta_parameter(CFG, 0.0) == pytest.approx(1e-4)
    assert beta_parameter(CFG, 1.0) == pytest.approx(0.8)
    assert beta_parameter(CFG, 0.5) == pytest.approx((1e-4 + 0.8) / 2)


def test_patch_scale_starts_near_full_frame():
    # Monte-Carlo over 1e4 draws of the progress-0 distribution
    rng = np.random.default_rng(0)
    draws = np.array([sample_patch_spec(rng, 0.0, CFG).scale for _ in range(10_000)])
    assert np.mean(draws > 0.99) > 0.99


def test_patch_scale_spreads_late():
    rng = np.random.default_rng(1)
    draws = np.array([sample_patch_spec(rng, 1.0, CFG).scale for _ in range(5_000)])
    assert draws.mean() < 0.9
    assert (draws < 0.5).mean() > 0.2


def test_full_scale_forces_zero_offset():
    spec = PatchSpec(scale=1.0, offset=(0.0, 0.0))
    assert spec.offset == (0.0, 0.0)
    with pytest.raises(ValueError):
        PatchSpec(scale=1.0, offset=(0.1, 0.0))


def test_ten_thousand_specs_stay_in_frame():
    rng = np.random.default_rng(2)
    for i in range(10_000):
        spec = sample_patch_spec(rng, (i % 100) / 99.0, CFG)
        u, v = spec.offset
        assert 0.0 < spec.scale <= 1.0
        assert u >= 0 and v >= 0
        assert u + spec.scale <= 1.0 + 1e-9
        assert v + spec.scale <= 1.0 + 1e-9


def test_blur_schedule_decays_to_zero():
    assert blur_sigma(CFG, 0) == pytest.approx(60.0 * 32 / 128)
    assert blur_sigma(CFG, CFG.blur_horizon) == 0.0
    assert blur_sigma(CFG, 2 * CFG.blur_horizon) == 0.0


# -- augmentation ---------------------------------------------------------------

def test_augment_identity_when_disabled():
    rng = np.random.default_rng(3)
    img = rng.random((32, 32, 3)).astype(np.float32)
    params = AugmentParams(dx=0.0, dy=0.0, zoom=1.0, sigma=0.0)
    out = apply_augmentation(img, params)
    assert np.array_equal(out.data, img)


def test_blur_fixed_point_on_constant_image():
    img = np.full((32, 32, 3), 0.37, np.float32)
    params = AugmentParams(dx=0.0, dy=0.0, zoom=1.0, sigma=25.0)
    out = apply_augmentation(img, params)
    assert np.allclose(out.data, 0.37, atol=1e-6)


def test_gaussian_kernel_sums_to_one():
    for sigma in (0.5, 1.7, 15.0, 60.0):
        k = gaussian_kernel_1d(sigma)
        assert k.sum() == pytest.approx(1.0, abs=1e-6)


def test_same_params_give_same_transform_for_both_sides():
    rng = np.random.default_rng(4)
    params = draw_augment_params(rng, CFG, images_seen=100)
    a = rng.random((32, 32, 3)).astype(np.float32)
    b = rng.random((32, 32, 3)).astype(np.float32)
    outs = [apply_augmentation(x, params).data for x in (a, b)]
    # the transform is a fixed linear operator: applying it to a - b matches
    # the difference of the transformed images exactly
    diff = apply_augmentation(a - b, params).data
    assert np.allclose(outs[0] - outs[1], diff, atol=1e-5)


def test_augmentation_is_differentiable():
    rng = np.random.default_rng(5)
    img = leaf(rng.random((32, 32, 3)))
    params = AugmentParams(dx=0.03, dy=-0.02, zoom=1.05, sigma=2.0)
    probe = Tensor(rng.normal(size=(32, 32, 3)))

    def fn(ps):
        return ad.sum_(apply_augmentation(ps[0], params) * probe)

    from helpers import check_gradients

    check_gradients(fn, [img], h=1e-5, max_checks_per_param=6)


def test_crop_real_patch_full_frame_identity_size():
    rng = np.random.default_rng(6)
    img = rng.random((64, 64, 3)).astype(np.float32)
    patch = crop_real_patch(img, PatchSpec(scale=1.0, offset=(0.0, 0.0),
                                           resolution=32))
    assert patch.shape == (32, 32, 3)


# -- discriminator -----------------------------------------------------------------

def test_discriminator_zero_final_layer_gives_bias():
    disc = Discriminator.init(CFG, seed=0)
    disc.params["disc.mlp.w2"] = Tensor(np.zeros_like(disc.params["disc.mlp.w2"].data))
    disc.params["disc.mlp.b2"] = Tensor(np.array([0.42], np.float32))
    patch = np.random.default_rng(7).random((32, 32, 3)).astype(np.float32)
    spec = PatchSpec(scale=0.5, offset=(0.2, 0.1))
    assert disc.forward(patch, spec).item() == pytest.approx(0.42, abs=1e-6)


def test_discriminator_deterministic():
    disc = Discriminator.init(CFG, seed=1)
    patch = np.random.default_rng(8).random((32, 32, 3)).astype(np.float32)
    spec = PatchSpec(scale=0.3, offset=(0.4, 0.2))
    assert disc.forward(patch, spec).item() == disc.forward(patch, spec).item()


def test_discriminator_rejects_wrong_resolution():
    disc = Discriminator.init(CFG, seed=2)
    with pytest.raises(ValueError, match="shape"):
        disc.forward(np.zeros((16, 16, 3), np.float32),
                     PatchSpec(scale=0.5, offset=(0.0, 0.0), resolution=32))


def test_input_gradient_matches_fd_on_window():
    # analytic d(logit)/d(pixels) against central FD over a 4x4 window
    disc = Discriminator.init(CFG, seed=3)
    for k in list(disc.params):
        disc.params[k] = leaf(disc.params[k].data, requires_grad=False)
    rng = np.random.default_rng(9)
    patch = rng.random((32, 32, 3))
    spec = PatchSpec(scale=0.4, offset=(0.1, 0.3))
    _, g = disc.forward_with_input_grad(Tensor(patch), spec)
    pt = leaf(patch)

    def fn(ps):
        return ad.sum_(disc.forward(ps[0], spec))

    for y in range(8, 12):
        for x in range(20, 24):
            for c in range(3):
                fd = central_fd(fn, [pt], 0, (y, x, c), 1e-5)
                an = float(g.data[y, x, c])
                assert abs(fd - an) < 1e-7 or \
                    abs(fd - an) / max(abs(fd), abs(an)) < 1e-3


def test_r1_zero_for_constant_discriminator():
    disc = Discriminator.init(CFG, seed=4)
    for k in list(disc.params):
        disc.params[k] = Tensor(np.zeros_like(disc.params[k].data))
    patch = np.random.default_rng(10).random((32, 32, 3)).astype(np.float32)
    spec = PatchSpec(scale=0.5, offset=(0.1, 0.1))
    _, _, r1 = gan_losses(disc, [(Tensor(patch), spec)],
                          [(Tensor(patch.copy()), spec)], r1_weight=1.0)
    assert r1.item() == 0.0


def test_r1_non_negative_random():
    rng = np.random.default_rng(11)
    disc = Discriminator.init(CFG, seed=5)
    for _ in range(10):
        patch = rng.random((32, 32, 3)).astype(np.float32)
        spec = PatchSpec(scale=float(rng.uniform(0.2, 1.0)), offset=(0.0, 0.0))
        _, _, r1 = gan_losses(disc, [(Tensor(patch), spec)],
                              [(Tensor(patch.copy()), spec)], r1_weight=1.0)
        assert r1.item() >= 0.0


# -- losses ----------------------------------------------------------------------------

def test_loss_g_ln2_for_zero_discriminator():
    disc = Discriminator.init(CFG, seed=6)
    for k in list(disc.params):
        disc.params[k] = Tensor(np.zeros_like(disc.params[k].data))
    patch = np.random.default_rng(12).random((32, 32, 3)).astype(np.float32)
    spec = PatchSpec(scale=0.5, offset=(0.2, 0.2))
    _, loss_g, _ = gan_losses(disc, [(Tensor(patch), spec)],
                              [(Tensor(patch.copy()), spec)], r1_weight=0.0)
    assert loss_g.item() == pytest.approx(np.log(2.0), abs=1e-7)


def test_f_literal_softplus_identity():
    rng = np.random.default_rng(13)
    u = Tensor(rng.normal(size=64).astype(np.float32) * 3)
    lhs = (-f_literal(u)).data                 # -f(u)
    rhs = ad.softplus(-u).data                 # softplus(-u)
    assert np.allclose(lhs, rhs, atol=1e-6)


def test_loss_d_gradients_flow_to_all_disc_params():
    disc = Discriminator.init(CFG, seed=7)
    rng = np.random.default_rng(14)
    real = Tensor(rng.random((32, 32, 3)).astype(np.float32))
    fake = Tensor(rng.random((32, 32, 3)).astype(np.float32))
    spec = PatchSpec(scale=0.6, offset=(0.1, 0.2))
    with tape():
        loss_d, _, _ = gan_losses(disc, [(real, spec)], [(fake, spec)],
                                  r1_weight=1.0)
        backward(loss_d)
    for k, p in disc.params.items():
        assert p.grad is not None, k
        assert np.all(np.isfinite(p.grad))


def test_discriminator_separates_solid_colors():
    # tiny D-only training run: solid red real vs solid blue fake
    from tuvf.autodiff import Adam

    disc = Discriminator.init(CFG, seed=8)
    opt = Adam(disc.parameters(), lr=5e-3)
    red = np.zeros((32, 32, 3), np.float32)
    red[..., 0] = 1.0
    blue = np.zeros((32, 32, 3), np.float32)
    blue[..., 2] = 1.0
    spec = PatchSpec(scale=1.0, offset=(0.0, 0.0))
    rng = np.random.default_rng(15)
    for _ in range(120):
        jr = np.clip(red + rng.normal(scale=0.02, size=red.shape), 0, 1).astype(np.float32)
        jb = np.clip(blue + rng.normal(scale=0.02, size=red.shape), 0, 1).astype(np.float32)
        with tape():
            loss_d, _, _ = gan_losses(disc, [(Tensor(jr), spec)],
                                      [(Tensor(jb), spec)], r1_weight=1.0)
            opt.zero_grad()
            backward(loss_d)
        opt.step()
    margin = disc.forward(red, spec).item() - disc.forward(blue, spec).item()
    assert margin > 2.0


def test_gan_config_validation():
    with pytest.raises(ValueError):
        GanConfig(r1_weight=-1.0)
    with pytest.raises(ValueError):
        GanConfig(patch_resolution=20)
    assert GanConfig(patch_resolution=64).blur_sigma_initial() == pytest.approx(30.0)
