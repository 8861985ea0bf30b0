"""Closed-world fixture dataset: procedural meshes plus procedurally
textured renders that stand in for a real image collection.

Shapes are star-shaped deformations of an icosphere (p-norm superellipsoids
and capsules with varying aspect), so they are watertight and oriented by
construction. "Real" images render hand-specified texture fields through
the production renderer with passthrough shading nets, giving the toy GAN
a target distribution drawn from its own rendering family.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dpsr, meshio
from .autodiff import Tensor
from .csae import SurfacePointSet
from .geometry import (PointCloud, TriangleMesh, build_icosphere,
                       normalize_to_unit_cube, sample_mesh_surface)
from .imgio import save_png
from .nets import MlpSpec
from .renderer import (RenderArtifacts, RendererConfig, ShadingNets,
                       camera_from_orbit, render_image)


def _pnorm_radius(dirs: np.ndarray, axes=(0.5, 0.5, 0.5),
                  power: float = 2.0) -> np.ndarray:
    a = np.asarray(axes)
    terms = (np.abs(dirs) / a) ** power
    return terms.sum(axis=1) ** (-1.0 / power)


def superellipsoid_mesh(axes: tuple[float, float, float], power: float,
                        level: int = 3) -> TriangleMesh:
    """p-norm ball boundary sampled over icosphere directions; power 2 is
    an ellipsoid, higher powers approach a rounded box."""
    sphere = build_icosphere(level)
    r = _pnorm_radius(sphere.vertices, axes=axes, power=power)
    return TriangleMesh(sphere.vertices * r[:, None], sphere.faces)


def capsule_mesh(half_length: float, radius: float, level: int = 3) -> TriangleMesh:
    """Capsule along x (cylinder with hemispherical caps), star-shaped
    radial construction over icosphere directions."""
    sphere = build_icosphere(level)
    d = sphere.vertices
    t = np.empty(len(d))
    rho = np.sqrt(d[:, 1] ** 2 + d[:, 2] ** 2)
    with np.errstate(divide="ignore"):
        t_cyl = np.where(rho > 1e-12, radius / np.maximum(rho, 1e-12), np.inf)
    in_cyl = np.abs(t_cyl * d[:, 0]) <= half_length
    dx = np.abs(d[:, 0])
    disc = (half_length * dx) ** 2 - half_length ** 2 + radius ** 2
    t_cap = half_length * dx + np.sqrt(np.maximum(disc, 0.0))
    t = np.where(in_cyl, t_cyl, t_cap)
    return TriangleMesh(d * t[:, None], sphere.faces)


def fixture_mesh(index: int) -> TriangleMesh:
    """Deterministic shape family: spheres, superellipsoids, and capsule
    bodies with varying aspect ratios."""
    kind = index % 3
    if kind == 0:
        scale = 0.4 + 0.05 * (index // 3 % 3)
        return superellipsoid_mesh((scale, scale, scale), 2.0)
    if kind == 1:
        aspect = 1.6 + 0.35 * (index // 3 % 4)
        return superellipsoid_mesh((0.45, 0.45 / aspect, 0.45 / aspect),
                                   3.0 + (index // 3 % 3))
    aspect = 2.0 + 0.5 * (index // 3 % 3)
    radius = 0.45 / aspect
    return capsule_mesh(half_length=0.45 - radius, radius=radius)


# ---------------------------------------------------------------------------
# hand-specified texture fields and passthrough shading

def passthrough_shading(feature_dim: int = 32, gain: float = 3.0) -> ShadingNets:
    """Hand-built nets: MLP_F copies the neighbor feature (ignores the
    offset), MLP_C reads the first three feature dims as color logits."""
    spec_f = MlpSpec((feature_dim + 3, feature_dim))
    spec_c = MlpSpec((feature_dim + 3, 3))
    w_f = np.zeros((feature_dim + 3, feature_dim), np.float32)
    w_f[:feature_dim, :feature_dim] = np.eye(feature_dim)
    w_c = np.zeros((feature_dim + 3, 3), np.float32)
    w_c[:3, :3] = gain * np.eye(3)
    params = {
        "render.mlpf.w0": Tensor(w_f, requires_grad=True),
        "render.mlpf.b0": Tensor(np.zeros(feature_dim, np.float32), requires_grad=True),
        "render.mlpc.w0": Tensor(w_c, requires_grad=True),
        "render.mlpc.b0": Tensor(np.zeros(3, np.float32), requires_grad=True),
    }
    return ShadingNets(spec_f=spec_f, spec_c=spec_c, params=params,
                       use_view_dirs=True)


def handmade_texture_features(positions: np.ndarray, pattern: int,
                              feature_dim: int = 32) -> np.ndarray:
    """Color-logit patterns painted from surface position; dims 3+ are zero
    so the passthrough nets map them straight to RGB."""
    n = len(positions)
    feats = np.zeros((n, feature_dim), np.float32)
    x, y, z = positions[:, 0], positions[:, 1], positions[:, 2]
    if pattern % 3 == 0:      # stripes along x
        s = np.sign(np.sin(12.0 * np.pi * x))
        feats[:, 0] = s
        feats[:, 2] = -s
        feats[:, 1] = -0.5
    elif pattern % 3 == 1:    # checker
        s = np.sign(np.sin(8.0 * np.pi * x)) * np.sign(np.sin(8.0 * np.pi * y))
        feats[:, 0] = -s
        feats[:, 1] = s
        feats[:, 2] = -0.4
    else:                     # vertical gradient with a band
        feats[:, 0] = np.tanh(4.0 * z)
        feats[:, 1] = np.sign(np.sin(10.0 * np.pi * z)) * 0.6
        feats[:, 2] = -np.tanh(4.0 * z)
    return feats


@dataclass
class FixtureShape:
    mesh: TriangleMesh
    cloud: PointCloud            # normalized + margin-scaled oriented samples
    surface: SurfacePointSet     # fabricated per-index surface set
    artifacts: RenderArtifacts


def build_fixture_shape(index: int, seed: int, margin: float = 0.7,
                        n_points: int = 6000, uv_level: int = 4,
                        grid_resolution: int = 64) -> FixtureShape:
    """Mesh -> normalized oriented cloud -> fabricated render artifacts.

    The fabricated surface point set samples the mesh directly (no learned
    correspondence); it carries the same shapes the CSAE produces, so every
    downstream component consumes it identically.
    """
    mesh = fixture_mesh(index)
    cloud = sample_mesh_surface(mesh, n_points, seed=seed)
    normed, _ = normalize_to_unit_cube(cloud)
    scaled = PointCloud(normed.points * margin, normed.normals)

    n_uv = 10 * 4 ** uv_level + 2
    sub = sample_mesh_surface(mesh, n_uv, seed=seed + 1)
    subn, _ = normalize_to_unit_cube(PointCloud(
        np.concatenate([sub.points, cloud.points]),
        np.concatenate([sub.normals, cloud.normals])))
    pos = (subn.points[:n_uv] * margin).astype(np.float32)
    nrm = subn.normals[:n_uv].astype(np.float32)
    surface = SurfacePointSet(positions=pos, normals=nrm, uv_level=uv_level)
    chi = dpsr.reconstruct_indicator(pos, nrm, grid_resolution, 2.0)
    grid = dpsr.IndicatorGrid(values=chi.data)
    return FixtureShape(mesh=mesh, cloud=scaled, surface=surface,
                        artifacts=RenderArtifacts.build(surface, grid))


def generate_fixtures(out_dir, seed: int, n_shapes: int = 10, n_views: int = 8,
                      image_size: int = 64, uv_level: int = 4,
                      grid_resolution: int = 64) -> dict:
    """Write the closed-world dataset: meshes under shapes/, textured
    renders under reals/, and a manifest. Deterministic under the seed."""
    if n_shapes < 1 or n_views < 1:
        raise ValueError("need at least one shape and one view")
    out = Path(out_dir)
    shapes_dir = out / "shapes"
    reals_dir = out / "reals"
    shapes_dir.mkdir(parents=True, exist_ok=True)
    reals_dir.mkdir(parents=True, exist_ok=True)

    render_cfg = RendererConfig()
    shading = passthrough_shading()
    manifest = {"seed": seed, "shapes": [], "reals": [],
                "image_size": image_size, "views_per_shape": n_views}
    for i in range(n_shapes):
        fixture = build_fixture_shape(i, seed=seed + 100 * i, uv_level=uv_level,
                                      grid_resolution=grid_resolution)
        mesh_path = shapes_dir / f"shape_{i:03d}.obj"
        meshio.save_obj(fixture.mesh, mesh_path)
        manifest["shapes"].append(mesh_path.name)

        feats = handmade_texture_features(fixture.surface.positions, pattern=i)
        for v in range(n_views):
            cam = camera_from_orbit(360.0 * v / n_views, 25.0, 1.3, 45.0,
                                    image_size, image_size)
            img = render_image(fixture.artifacts, feats, shading, render_cfg,
                               cam, seed=seed + v)
            img_path = reals_dir / f"shape_{i:03d}_view_{v:02d}.png"
            save_png(img_path, img.rgb)
            manifest["reals"].append(img_path.name)

    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest
