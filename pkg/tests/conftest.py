"""Session fixtures: trained toy models shared between module tests and the
acceptance suite (training runs once per session)."""

import time
from types import SimpleNamespace

import numpy as np
import pytest

from tuvf.csae import CsaeConfig, prepare_training_cloud, train_csae
from tuvf.fixtures import build_fixture_shape, fixture_mesh, generate_fixtures
from tuvf.geometry import PointCloud, sample_mesh_surface
from tuvf.renderer import RenderArtifacts

# Desk-scale stage-A configuration used by the toy training runs; the
# dataclass defaults stay at the full-scale values.
TOY_CSAE_CFG = CsaeConfig(sample_count=768, target_pool=4096,
                          encoder_widths=(48, 48, 96), dpsr_resolution=64,
                          decoder_width=96, decoder_k=10, lr=2e-3)

SPHERE_STEPS = 500
MULTI_STEPS = 1500


def unit_sphere_cloud(n=6000, seed=0) -> PointCloud:
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return PointCloud(0.5 * v, v)


def eval_chamfer(model, shape, seed=1234, draws=3) -> float:
    """Deployment-style Chamfer: decoded surface against fresh target
    subsamples of the pool (mean over draws)."""
    from tuvf.geometry import chamfer_distance

    z = model.encode(shape.encoder_points)
    pos = model.decode_surface(z)
    rng = np.random.default_rng(seed)
    n_target = min(model.sphere.num_vertices, len(shape.pool.points))
    vals = []
    for _ in range(draws):
        pick = rng.choice(len(shape.pool.points), size=n_target, replace=False)
        vals.append(chamfer_distance(pos, shape.pool.points[pick].astype(np.float32)).item())
    return float(np.mean(vals))


@pytest.fixture(scope="session")
def sphere_cloud():
    return unit_sphere_cloud()


@pytest.fixture(scope="session")
def sphere_csae(sphere_cloud):
    """Criterion-6 sphere run: 500 steps, timed."""
    t0 = time.time()
    model, history = train_csae([sphere_cloud], TOY_CSAE_CFG, steps=SPHERE_STEPS,
                                seed=0)
    elapsed = time.time() - t0
    shape = prepare_training_cloud(sphere_cloud, TOY_CSAE_CFG, seed=0)
    return SimpleNamespace(model=model, history=history, elapsed=elapsed,
                           cloud=sphere_cloud, shape=shape, cfg=TOY_CSAE_CFG,
                           steps=SPHERE_STEPS)


@pytest.fixture(scope="session")
def fixture_clouds():
    """Ten procedural fixture shapes as oriented clouds."""
    return [sample_mesh_surface(fixture_mesh(i), 6000, seed=100 + i)
            for i in range(10)]


@pytest.fixture(scope="session")
def multi_csae(fixture_clouds):
    """Criterion-6 multi-shape run over the 10-shape fixture set."""
    t0 = time.time()
    model, history = train_csae(fixture_clouds, TOY_CSAE_CFG, steps=MULTI_STEPS,
                                seed=3)
    elapsed = time.time() - t0
    shapes = [prepare_training_cloud(c, TOY_CSAE_CFG, seed=3 + 17 * i)
              for i, c in enumerate(fixture_clouds)]
    return SimpleNamespace(model=model, history=history, elapsed=elapsed,
                           clouds=fixture_clouds, shapes=shapes,
                           cfg=TOY_CSAE_CFG, steps=MULTI_STEPS)


@pytest.fixture(scope="session")
def fixture_dataset(tmp_path_factory):
    """The gen-fixtures closed-world dataset at its default floor sizes."""
    out = tmp_path_factory.mktemp("fixtures")
    manifest = generate_fixtures(out, seed=11, n_shapes=10, n_views=8,
                                 image_size=64)
    return SimpleNamespace(root=out, manifest=manifest)


@pytest.fixture(scope="session")
def sphere_render_setup(sphere_csae):
    """Trained-sphere render artifacts plus deterministic shading stack."""
    from tuvf.fixtures import handmade_texture_features, passthrough_shading
    from tuvf.renderer import RendererConfig

    surface, grid = sphere_csae.model.surface_artifacts(
        sphere_csae.shape.encoder_points)
    artifacts = RenderArtifacts.build(surface, grid)
    features = handmade_texture_features(surface.positions, pattern=2)
    return SimpleNamespace(artifacts=artifacts, features=features,
                           shading=passthrough_shading(),
                           render_cfg=RendererConfig(),
                           model=sphere_csae.model)
