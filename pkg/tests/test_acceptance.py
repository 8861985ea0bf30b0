"""Acceptance criteria, one test per criterion at its stated tolerance.

Each test prints one PASS/FAIL line (visible with ``pytest -s`` or in the
captured output). Training-based criteria reuse the session fixtures in
conftest so each run happens once.
"""

import time
from functools import wraps

import numpy as np
import pytest

from conftest import TOY_CSAE_CFG, eval_chamfer

from tuvf import autodiff as ad
from tuvf import dpsr
from tuvf.autodiff import Tensor, backward, tape
from tuvf.gradcheck import check_all_ops, check_gradients, leaf
from tuvf.renderer import (RenderArtifacts, RendererConfig, RenderTap,
                           camera_from_orbit, density, ray_weights,
                           render_image, render_rays, generate_rays)


def criterion(num, name):
    def deco(fn):
        @wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs)
            except BaseException as err:
                print(f"ACCEPTANCE {num} {name}: FAIL ({err})")
                raise
            print(f"ACCEPTANCE {num} {name}: PASS"
                  + (f" ({detail})" if detail else ""))
        return wrapper
    return deco


# -- 1: autodiff soundness --------------------------------------------------------

@criterion(1, "autodiff-soundness")
def test_autodiff_soundness():
    t0 = time.time()
    n_ops = check_all_ops(seed=0, max_checks_per_param=6)
    rng = np.random.default_rng(1)
    for _ in range(3):
        w1 = leaf(rng.normal(size=(4, 6)) * 0.5)
        b1 = leaf(rng.normal(size=6) * 0.1)
        w2 = leaf(rng.normal(size=(6, 2)) * 0.5)
        x = Tensor(rng.normal(size=(5, 4)))

        def fn(ps):
            h = ad.tanh(ad.matmul(x, ps[0]) + ps[1])
            y = ad.sigmoid(ad.matmul(h, ps[2]))
            return ad.mean_(y * y) + 0.01 * ad.sum_(ad.norm(h, axis=1))

        check_gradients(fn, [w1, b1, w2], rel_tol=1e-4, abs_floor=1e-6, rng=rng)
    elapsed = time.time() - t0
    assert elapsed < 30.0, f"took {elapsed:.1f}s"
    return f"{n_ops} op coordinates + 3 composed graphs in {elapsed:.1f}s"


# -- 2: density formula ------------------------------------------------------------

@criterion(2, "density-formula")
def test_density_formula():
    grid = dpsr.IndicatorGrid(values=np.zeros((16, 16, 16), np.float32))
    sigma = density(grid, np.zeros((1, 3)), gamma=5e-4)[0]
    assert sigma == pytest.approx(1000.0, abs=1e-9), sigma
    sweep = np.linspace(-0.05, 0.05, 201)
    vals = [density(dpsr.IndicatorGrid(values=np.full((8, 8, 8), v, np.float32)),
                    np.zeros((1, 3)), 5e-4)[0] for v in sweep]
    assert all(a >= b for a, b in zip(vals, vals[1:])), "not monotone"
    return "sigma(0) = 1000.0; monotone on 201-point sweep"


# -- 3: Poisson oracle ---------------------------------------------------------------

@criterion(3, "poisson-oracle")
def test_poisson_oracle():
    t0 = time.time()
    worst = 0.0
    for r in (32, 64, 128):
        x = -0.5 + np.arange(r) / r
        X = np.broadcast_to(x[:, None, None], (r, r, r))
        chi_star = np.cos(2 * np.pi * X)
        vec = np.zeros((r, r, r, 3))
        vec[..., 0] = -2 * np.pi * np.sin(2 * np.pi * X)
        chi = dpsr.poisson_solve_spectral(vec, sigma_grid=0.0).data
        rel = np.abs(chi - chi_star).max() / np.abs(chi_star).max()
        worst = max(worst, rel)
        assert rel < 1e-5, f"R={r}: rel err {rel}"

    rng = np.random.default_rng(2)
    v = rng.normal(size=(8000, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    chi = dpsr.reconstruct_indicator((0.3 * v).astype(np.float32),
                                     v.astype(np.float32), 64, 2.0)
    grid = dpsr.IndicatorGrid(values=chi.data)
    dirs = rng.normal(size=(5, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    inside = dirs * rng.uniform(0.0, 0.15, (5, 1))
    outside = dirs * rng.uniform(0.42, 0.48, (5, 1))
    assert np.all(dpsr.query_indicator(grid, inside).data < 0), "inside sign"
    assert np.all(dpsr.query_indicator(grid, outside).data > 0), "outside sign"
    elapsed = time.time() - t0
    assert elapsed < 60.0, f"took {elapsed:.1f}s"
    return f"worst recovery rel err {worst:.1e}; 10 sphere probes; {elapsed:.1f}s"


# -- 4: ray invariants ------------------------------------------------------------------

@criterion(4, "ray-invariants")
def test_ray_invariants():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        n = 256
        sigma = rng.uniform(0, 3000, size=(1, n)) * (rng.random((1, n)) < 0.25)
        delta = rng.uniform(0.001, 0.02, size=(1, n))
        alpha, trans, w = ray_weights(sigma, delta, "product")
        assert trans[0, 0] == 1.0
        assert np.all(np.diff(trans[0]) <= 1e-12)
        assert np.all((alpha >= 0) & (alpha <= 1))
        assert w.sum() <= 1 + 1e-5
    sigma = np.zeros((1, 256))
    sigma[0, 100:111] = 1e6
    _, _, w = ray_weights(sigma, np.full((1, 256), 0.01), "product")
    assert w[0, 100] > 0.99, f"slab weight {w[0, 100]}"
    return "1000 profiles; slab first-hit weight > 0.99"


# -- 5: fusion arithmetic ------------------------------------------------------------------

@criterion(5, "fusion-arithmetic")
def test_fusion_arithmetic():
    rng = np.random.default_rng(4)
    d = rng.uniform(1e-3, 1.0, size=(500, 4))
    rho = 1.0 / np.maximum(d, 1e-8)
    w = rho / rho.sum(axis=1, keepdims=True)
    assert np.abs(w.sum(axis=1) - 1.0).max() < 1e-6

    pair = np.array([1.0, 3.0])
    rho = 1.0 / np.maximum(pair, 1e-8)
    w2 = rho / rho.sum()
    assert abs(w2[0] - 0.75) < 1e-6 and abs(w2[1] - 0.25) < 1e-6

    # K = 1 degeneracy: fused output equals the single neighbor's MLP_F row
    from tuvf.csae import SurfacePointSet
    from tuvf.geometry import KnnIndex
    from tuvf.nets import mlp_forward
    from tuvf.renderer import ShadingNets, fuse_features

    pos = np.array([[0.2, 0.0, 0.0], [-0.2, 0.0, 0.0]], np.float32)
    surface = SurfacePointSet(positions=pos, normals=np.tile([0, 0, 1.0], (2, 1)).astype(np.float32),
                              uv_level=0)
    shading = ShadingNets.init(RendererConfig(), feature_dim=8, seed=1)
    tex = rng.normal(size=(2, 8)).astype(np.float32)
    x = np.array([[0.15, 0.02, 0.0]])
    fused = fuse_features(x, surface, tex, KnnIndex(pos.astype(np.float64)),
                          shading, k=1)
    offset = pos[0] - x[0]
    inp = Tensor(np.concatenate([tex[0], offset]).astype(np.float32)[None, :])
    want = mlp_forward(shading.spec_f, shading._sub("render.mlpf"), inp)
    assert np.array_equal(fused.data, want.data)
    return "weights normalized; (0.75, 0.25); K=1 exact"


# -- 6: CSAE toy training -------------------------------------------------------------------

@criterion(6, "csae-toy-training")
def test_csae_toy_training(sphere_csae, multi_csae):
    cd_sphere = eval_chamfer(sphere_csae.model, sphere_csae.shape)
    assert cd_sphere < 1e-3, f"sphere chamfer {cd_sphere}"
    assert sphere_csae.elapsed < 600, f"sphere run took {sphere_csae.elapsed:.0f}s"

    cds = [eval_chamfer(multi_csae.model, s, seed=50 + i)
           for i, s in enumerate(multi_csae.shapes)]
    mean_cd = float(np.mean(cds))
    assert mean_cd < 1e-2, f"10-shape mean chamfer {mean_cd}"

    surface, _ = sphere_csae.model.surface_artifacts(sphere_csae.shape.encoder_points)
    pos = surface.positions
    edges = sphere_csae.model.sphere.edges
    edge_len = np.linalg.norm(pos[edges[:, 0]] - pos[edges[:, 1]], axis=1)
    rng = np.random.default_rng(5)
    rand_len = np.linalg.norm(pos[rng.integers(0, len(pos), len(edges))]
                              - pos[rng.integers(0, len(pos), len(edges))], axis=1)
    ratio = np.median(edge_len) / np.median(rand_len)
    assert ratio <= 5.0, f"smoothness ratio {ratio}"
    return (f"sphere chamfer {cd_sphere:.2e} in {sphere_csae.elapsed:.0f}s; "
            f"10-shape mean {mean_cd:.2e}; smoothness ratio {ratio:.2f}")


# -- 7: transfer invariance ------------------------------------------------------------------

@criterion(7, "transfer-invariance")
def test_transfer_invariance(multi_csae):
    from tuvf.editing import transfer_texture
    from tuvf.texgen import UvTextureField

    model = multi_csae.model
    rng = np.random.default_rng(6)
    tex = UvTextureField(features=rng.normal(size=(2562, 32)).astype(np.float32),
                         uv_level=4)
    checksum_before = tex.checksum()

    from tuvf.fixtures import passthrough_shading

    shading = passthrough_shading()
    cfg = RendererConfig()
    cam = camera_from_orbit(30, 25, 1.3, 45, 32, 32)
    taps = []
    for shape in multi_csae.shapes[:2]:
        surface, grid = model.surface_artifacts(shape.encoder_points)
        artifacts = RenderArtifacts.build(surface, grid)
        transfer_texture(tex, surface)
        tap = RenderTap()
        render_image(artifacts, tex.features, shading, cfg, cam, seed=9, tap=tap)
        taps.append(tap)
    common = np.intersect1d(taps[0].consumed_indices(), taps[1].consumed_indices())
    assert len(common) > 100, "too few shared indices to compare"
    for j in common:
        assert taps[0].feature_rows[int(j)] == taps[1].feature_rows[int(j)]
    assert tex.checksum() == checksum_before
    return f"{len(common)} shared UV indices consumed bit-identically"


# -- 8: differentiable rendering ---------------------------------------------------------------

@criterion(8, "differentiable-rendering")
def test_differentiable_rendering(sphere_render_setup):
    setup = sphere_render_setup
    rng = np.random.default_rng(7)
    from tuvf.renderer import ShadingNets

    shading = ShadingNets.init(RendererConfig(mlpf_out=16), feature_dim=8, seed=2)
    cfg = RendererConfig(mlpf_out=16)
    tex = leaf(rng.normal(size=(2562, 8)) * 0.5)
    cam = camera_from_orbit(20, 25, 1.3, 45, 12, 12)
    origin, dirs, pix = generate_rays(cam)
    target = Tensor(rng.random((len(dirs), 3)))

    def fn(ps):
        out = render_rays(setup.artifacts, ps[0], shading, cfg, origin, dirs,
                          pix, seed=5)
        d = out.rgb - target
        return ad.mean_(d * d)

    tap = RenderTap()
    render_rays(setup.artifacts, Tensor(tex.data), shading, cfg, origin, dirs,
                pix, seed=5, tap=tap)
    consumed = tap.consumed_indices()
    rows = rng.choice(consumed, size=10, replace=False)
    with tape():
        backward(fn([tex]))
    grad = tex.grad.copy()
    from tuvf.gradcheck import central_fd

    checked = 0
    for r in rows:
        for c in rng.choice(8, size=2, replace=False):
            fd = central_fd(fn, [tex], 0, (int(r), int(c)), 1e-4)
            an = grad[int(r), int(c)]
            diff = abs(fd - an)
            assert diff < 1e-7 or diff / max(abs(fd), abs(an)) < 1e-3, \
                f"feature ({r},{c}): analytic {an} vs fd {fd}"
            checked += 1
    assert checked >= 20
    return f"{checked} texture-feature coordinates match FD"


# -- 9: editing -----------------------------------------------------------------------------------

@criterion(9, "editing")
def test_editing(sphere_render_setup):
    from tuvf.checkpoint import checkpoint_checksum
    from tuvf.editing import EditConfig, edit_texture
    from tuvf.texgen import UvTextureField

    setup = sphere_render_setup
    cam = camera_from_orbit(30, 25, 1.3, 45, 64, 64)
    base = render_image(setup.artifacts, setup.features, setup.shading,
                        setup.render_cfg, cam, seed=4)
    target = base.rgb.copy().astype(np.float32)
    mask = np.zeros(target.shape[:2], bool)
    mask[24:40, 24:40] = True                       # 16x16 painted square
    target[mask] = [1.0, 0.0, 0.0]

    frozen = checkpoint_checksum(setup.shading.params)
    tex = UvTextureField(features=setup.features.copy(), uv_level=4)
    result = edit_texture(tex, target, mask, cam, setup.artifacts,
                          setup.shading, setup.render_cfg,
                          EditConfig(steps=300, seed=4))
    reduction = 1.0 - result.masked_error_final / result.masked_error_initial
    assert reduction >= 0.90, f"masked error reduced only {reduction:.1%}"
    assert checkpoint_checksum(setup.shading.params) == frozen

    cam2 = camera_from_orbit(60, 25, 1.3, 45, 64, 64)
    tap = RenderTap()
    img2 = render_image(setup.artifacts, result.tex.features, setup.shading,
                        setup.render_cfg, cam2, seed=4, tap=tap)
    share = tap.pixel_share(result.support, 64 * 64).reshape(64, 64)
    region = share > 0.5
    assert region.sum() > 20, "reprojected region too small"
    mean_rgb = img2.rgb[region].mean(axis=0)
    assert mean_rgb[0] > mean_rgb[1] and mean_rgb[0] > mean_rgb[2], \
        f"region not red-dominant: {mean_rgb}"
    return (f"masked error down {reduction:.1%}; +30deg region mean RGB "
            f"{np.round(mean_rgb, 2)}")


# -- 10: toy adversarial run -----------------------------------------------------------------------

@criterion(10, "toy-adversarial")
def test_toy_adversarial(multi_csae, fixture_dataset, sphere_csae):
    from tuvf.adversarial import (Discriminator, GanConfig, PatchSpec,
                                  PoseSampler, gan_losses, train_texture)
    from tuvf.autodiff import Adam
    from tuvf.fixtures import handmade_texture_features, passthrough_shading
    from tuvf.imgio import load_png
    from tuvf.texgen import TexGenConfig, TextureGenerator

    render_cfg = RendererConfig()
    tex_cfg = TexGenConfig()
    pose = PoseSampler(image_size=64)

    # main run on the closed-world fixture dataset
    reals = [load_png(fixture_dataset.root / "reals" / name)
             for name in fixture_dataset.manifest["reals"]]
    gan_cfg = GanConfig(anneal_images=2000, blur_horizon=1000)
    t0 = time.time()
    state = train_texture(multi_csae.model, multi_csae.clouds[:4], reals,
                          gan_cfg, render_cfg, tex_cfg, pose, steps=2000,
                          seed=21)
    elapsed = time.time() - t0
    assert elapsed < 1800, f"2000 steps took {elapsed:.0f}s"
    all_vals = np.array([[r.loss_d, r.loss_g, r.r1] for r in state.history])
    assert np.all(np.isfinite(all_vals)), "non-finite loss logged"
    assert np.all(all_vals[:, 2] >= 0), "negative R1 logged"

    # discriminator separability on the solid-color toy
    disc = Discriminator.init(gan_cfg, seed=8)
    opt = Adam(disc.parameters(), lr=5e-3)
    red = np.zeros((32, 32, 3), np.float32); red[..., 0] = 1.0
    blue = np.zeros((32, 32, 3), np.float32); blue[..., 2] = 1.0
    spec = PatchSpec(scale=1.0, offset=(0.0, 0.0))
    rng = np.random.default_rng(15)
    for _ in range(150):
        jr = np.clip(red + rng.normal(scale=0.02, size=red.shape), 0, 1).astype(np.float32)
        jb = np.clip(blue + rng.normal(scale=0.02, size=red.shape), 0, 1).astype(np.float32)
        with tape():
            loss_d, _, _ = gan_losses(disc, [(Tensor(jr), spec)],
                                      [(Tensor(jb), spec)], r1_weight=1.0)
            opt.zero_grad()
            backward(loss_d)
        opt.step()
    margin = disc.forward(red, spec).item() - disc.forward(blue, spec).item()
    assert margin > 2.0, f"separability margin {margin}"

    # controlled single-target sanity run on the trained sphere
    model = sphere_csae.model
    surface, grid = model.surface_artifacts(sphere_csae.shape.encoder_points)
    arts = RenderArtifacts.build(surface, grid)
    target_feats = handmade_texture_features(surface.positions, pattern=0)
    pt_nets = passthrough_shading()
    rng = np.random.default_rng(77)
    target_reals = [render_image(arts, target_feats, pt_nets, render_cfg,
                                 pose.draw(rng), seed=1000 + i).rgb.astype(np.float32)
                    for i in range(24)]

    fixed_z = Tensor(np.random.default_rng(123)
                     .standard_normal(tex_cfg.z_dim).astype(np.float32))

    def l1_to_target(gen, shading):
        tot = 0.0
        for i in range(4):
            cam = camera_from_orbit(90 * i + 15, 25, 1.3, 45, 64, 64)
            tgt = render_image(arts, target_feats, pt_nets, render_cfg, cam, seed=5)
            feats = gen.field(model.sphere, fixed_z).features
            got = render_image(arts, feats, shading, render_cfg, cam, seed=5)
            tot += np.abs(got.rgb - tgt.rgb).mean()
        return tot / 4

    from tuvf.renderer import ShadingNets

    gen0 = TextureGenerator.init(tex_cfg, seed=9 + 1)
    sh0 = ShadingNets.init(render_cfg, tex_cfg.feature_dim, seed=9 + 2)
    l1_init = l1_to_target(gen0, sh0)
    sanity = train_texture(model, [sphere_csae.cloud], target_reals, gan_cfg,
                           render_cfg, tex_cfg, pose, steps=2000, seed=9,
                           fixed_code_seed=123)
    l1_final = l1_to_target(sanity.generator, sanity.shading)
    improvement = 1.0 - l1_final / l1_init
    assert improvement >= 0.5, \
        f"L1 improved only {improvement:.1%} ({l1_init:.4f} -> {l1_final:.4f})"
    return (f"2000 fixture steps in {elapsed:.0f}s; margin {margin:.2f}; "
            f"sanity L1 {l1_init:.4f} -> {l1_final:.4f} ({improvement:.1%})")


# -- 11: determinism ---------------------------------------------------------------------------------

@criterion(11, "determinism")
def test_determinism(sphere_render_setup, tmp_path):
    import io as _io

    from tuvf.imgio import save_png
    from tuvf.selfcheck import run_selfcheck

    outs = []
    for _ in range(2):
        buf = _io.StringIO()
        ok = run_selfcheck(seed=0, stream=buf)
        assert ok
        outs.append(buf.getvalue())
    assert outs[0] == outs[1], "selfcheck output differs between runs"

    setup = sphere_render_setup
    cam = camera_from_orbit(45, 20, 1.3, 45, 32, 32)
    paths = []
    for i in range(2):
        img = render_image(setup.artifacts, setup.features, setup.shading,
                           setup.render_cfg, cam, seed=33)
        p = tmp_path / f"render_{i}.png"
        save_png(p, img.rgb, img.alpha)
        paths.append(p)
    assert paths[0].read_bytes() == paths[1].read_bytes(), "render bytes differ"
    return "selfcheck and seeded render bit-identical across invocations"
