"""Point-based texture radiance field renderer.

A ray is sampled uniformly (with seeded stratified jitter), densities come
from the indicator grid through a sharp sigmoid, and per-sample weights
w_i = alpha_i * T_i pick out a handful of shading points near the surface.
Each shading point fuses the features of its K nearest surface points by
inverse-distance weighting, then a shared color MLP produces RGB.

Geometry (densities, weights, KNN) is plain numpy and never differentiated;
the texture path (features -> fusion MLP -> color MLP -> pixel) runs on the
autodiff tape, so photometric losses reach the texture field and the
shading networks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from . import nets
from .autodiff import Tensor
from .csae import SurfacePointSet
from .dpsr import IndicatorGrid, _corner_weights
from .geometry import KnnIndex


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; fov is vertical, in degrees."""

    position: np.ndarray
    target: np.ndarray
    up: np.ndarray
    fov_deg: float
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, np.float64))
        object.__setattr__(self, "target", np.asarray(self.target, np.float64))
        object.__setattr__(self, "up", np.asarray(self.up, np.float64))
        if np.allclose(self.position, self.target):
            raise ValueError("camera position must differ from the look-at target")
        if not 0.0 < self.fov_deg < 120.0:
            raise ValueError(f"fov must be in (0, 120) degrees, got {self.fov_deg}")

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        forward = self.target - self.position
        forward = forward / np.linalg.norm(forward)
        right = np.cross(forward, self.up)
        nr = np.linalg.norm(right)
        if nr < 1e-9:
            raise ValueError("up hint is parallel to the viewing direction")
        right /= nr
        true_up = np.cross(right, forward)
        return forward, right, true_up


def camera_from_orbit(azimuth_deg: float, elevation_deg: float, radius: float,
                      fov_deg: float, width: int, height: int) -> Camera:
    """Orbit camera around the origin; poles of the canonical sphere are on
    +-z, so z is up."""
    az = np.deg2rad(azimuth_deg)
    el = np.deg2rad(elevation_deg)
    pos = radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az),
                             np.sin(el)])
    return Camera(position=pos, target=np.zeros(3), up=np.array([0.0, 0.0, 1.0]),
                  fov_deg=fov_deg, width=width, height=height)


@dataclass(frozen=True)
class RendererConfig:
    gamma: float = 5e-4
    coarse_samples: int = 256
    shading_points: int = 3
    knn: int = 4
    near: float = 0.0                 # <= 0 means auto from camera distance
    far: float = 0.0
    weight_threshold: float = 1e-4
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    transmittance_mode: str = "product"      # or "expsum" (literal printed form)
    use_view_dirs: bool = True
    jitter: bool = True
    mlpf_hidden: int = 64
    mlpf_out: int = 32
    mlpc_hidden: int = 64

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.shading_points > self.coarse_samples:
            raise ValueError("shading points cannot exceed coarse samples")
        if self.knn < 1:
            raise ValueError("need at least one fusion neighbor")
        if self.transmittance_mode not in ("product", "expsum"):
            raise ValueError(f"unknown transmittance mode {self.transmittance_mode!r}")


# ---------------------------------------------------------------------------
# rays

def generate_rays(cam: Camera, rect: tuple[int, int, int, int] | None = None
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pixel rays for a pixel rect (x0, y0, w, h); defaults to the full
    frame. Returns (origin [3], unit directions [n, 3], pixel ids [n]).

    Pixel ids are global (y * width + x), so a patch render of a rect is
    bit-identical to the same pixels in a full-frame render.
    """
    x0, y0, w, h = rect if rect is not None else (0, 0, cam.width, cam.height)
    if x0 < 0 or y0 < 0 or x0 + w > cam.width or y0 + h > cam.height or w <= 0 or h <= 0:
        raise ValueError(f"rect {(x0, y0, w, h)} outside image {cam.width}x{cam.height}")
    forward, right, true_up = cam.basis()
    tan_half = np.tan(np.deg2rad(cam.fov_deg) / 2.0)
    aspect = cam.width / cam.height
    xs = (x0 + np.arange(w) + 0.5) / cam.width * 2.0 - 1.0
    ys = 1.0 - (y0 + np.arange(h) + 0.5) / cam.height * 2.0
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    dirs = (forward[None, None]
            + gx[..., None] * (tan_half * aspect) * right[None, None]
            + gy[..., None] * tan_half * true_up[None, None])
    dirs = dirs.reshape(-1, 3)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    px, py = np.meshgrid(x0 + np.arange(w), y0 + np.arange(h), indexing="xy")
    pixel_ids = (py * cam.width + px).reshape(-1)
    return cam.position.copy(), dirs, pixel_ids


def generate_patch_rays(cam: Camera, scale: float, offset: tuple[float, float],
                        resolution: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rays covering a normalized sub-rectangle of the virtual frame at a
    fixed patch resolution (the fake-side counterpart of crop + resize)."""
    u, v = offset
    if not (0.0 < scale <= 1.0 and u >= -1e-9 and v >= -1e-9
            and u + scale <= 1.0 + 1e-9 and v + scale <= 1.0 + 1e-9):
        raise ValueError(f"patch scale {scale} at offset {offset} leaves the frame")
    forward, right, true_up = cam.basis()
    tan_half = np.tan(np.deg2rad(cam.fov_deg) / 2.0)
    aspect = cam.width / cam.height
    fr = (np.arange(resolution) + 0.5) / resolution
    xs = (u + fr * scale) * 2.0 - 1.0
    ys = 1.0 - (v + fr * scale) * 2.0
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    dirs = (forward[None, None]
            + gx[..., None] * (tan_half * aspect) * right[None, None]
            + gy[..., None] * tan_half * true_up[None, None])
    dirs = dirs.reshape(-1, 3)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    # synthetic pixel ids on the virtual full-resolution frame
    vx = np.floor((u + fr * scale) * cam.width).astype(np.int64)
    vy = np.floor((v + fr * scale) * cam.height).astype(np.int64)
    gpx, gpy = np.meshgrid(np.clip(vx, 0, cam.width - 1),
                           np.clip(vy, 0, cam.height - 1), indexing="xy")
    return cam.position.copy(), dirs, (gpy * cam.width + gpx).reshape(-1)


# ---------------------------------------------------------------------------
# densities and per-ray weights

def trilinear_values(values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Plain-numpy trilinear lookup (the renderer's non-differentiable path).

    Loops over the 8 corners instead of materializing [n, 8, 3] index and
    weight blocks; density evaluation hits this with ~10^6 points per frame.
    """
    r = values.shape[0]
    pts = np.clip(np.asarray(points, np.float64), -0.5, 0.5 - 1e-9)
    t = (pts + 0.5) * r
    i0 = np.floor(t).astype(np.int64)
    f = t - i0
    i1 = (i0 + 1) % r
    vflat = values.reshape(-1)
    out = np.zeros(len(pts), dtype=np.float64)
    for cx in (0, 1):
        wx = f[:, 0] if cx else 1.0 - f[:, 0]
        ix = (i1 if cx else i0)[:, 0]
        for cy in (0, 1):
            wy = f[:, 1] if cy else 1.0 - f[:, 1]
            iy = (i1 if cy else i0)[:, 1]
            wxy = wx * wy
            ixy = (ix * r + iy) * r
            for cz in (0, 1):
                wz = f[:, 2] if cz else 1.0 - f[:, 2]
                iz = (i1 if cz else i0)[:, 2]
                out += vflat[ixy + iz] * (wxy * wz)
    return out


def density(grid: IndicatorGrid, points: np.ndarray, gamma: float) -> np.ndarray:
    """sigma(x) = sigmoid(-indicator(x) / gamma) / gamma (inside-negative
    indicator makes the inside dense)."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    q = trilinear_values(grid.values, points)
    return expit(-q / gamma) / gamma


def _hash_uniform(seed: int, pixel_ids: np.ndarray, n: int) -> np.ndarray:
    """Deterministic [m, n] uniforms from (seed, pixel id, sample index);
    splitmix64-style mixing, vectorized."""
    pid = pixel_ids.astype(np.uint64)[:, None]
    idx = np.arange(n, dtype=np.uint64)[None, :]
    x = (pid * np.uint64(0x9E3779B97F4A7C15)
         ^ idx * np.uint64(0xBF58476D1CE4E5B9)
         ^ np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        x = x ^ (x >> np.uint64(31))
    return (x >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def ray_weights(sigma: np.ndarray, delta: np.ndarray, mode: str = "product"
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(alpha, T, w) along rays; sigma and delta are [m, n].

    "product" composes T_i as the running product of (1 - alpha_j), the
    standard discretization (weights then sum to at most one). "expsum"
    uses T_i = exp(-sum alpha_j delta_j) as printed in the source
    formulation; it applies delta twice and its weight sums are unbounded,
    which is why it is not the default.
    """
    alpha = 1.0 - np.exp(-sigma * delta)
    if mode == "product":
        trans = np.cumprod(1.0 - alpha + 0.0, axis=1)
        trans = np.concatenate([np.ones_like(trans[:, :1]), trans[:, :-1]], axis=1)
    elif mode == "expsum":
        acc = np.cumsum(alpha * delta, axis=1)
        acc = np.concatenate([np.zeros_like(acc[:, :1]), acc[:, :-1]], axis=1)
        trans = np.exp(-acc)
    else:
        raise ValueError(f"unknown transmittance mode {mode!r}")
    return alpha, trans, alpha * trans


@dataclass
class RaySampleBatch:
    """Coarse samples and the selected shading subset for a batch of rays."""

    t: np.ndarray             # [m, n] sample depths
    delta: np.ndarray         # [m, n] spacings
    sigma: np.ndarray         # [m, n]
    alpha: np.ndarray         # [m, n]
    trans: np.ndarray         # [m, n]
    weights: np.ndarray       # [m, n]
    sel_idx: np.ndarray       # [m, s] sample indices, -1 where unused
    sel_weight: np.ndarray    # [m, s] renormalized weights
    weight_sum: np.ndarray    # [m] total ray weight (the alpha channel)


def sample_rays(origin: np.ndarray, dirs: np.ndarray, pixel_ids: np.ndarray,
                grid: IndicatorGrid, cfg: RendererConfig, seed: int,
                cull_radius: float | None = None) -> RaySampleBatch:
    """Uniform coarse sampling with stratified jitter, density evaluation,
    and selection of the highest-weight valid samples, depth-ordered.

    ``cull_radius``: samples outside this sphere around the origin of the
    object frame skip the grid lookup (their density underflows to zero
    anyway; the sigmoid is saturated far outside the surface).
    """
    m = len(dirs)
    n = cfg.coarse_samples
    if cfg.near > 0 and cfg.far > cfg.near:
        near, far = cfg.near, cfg.far
    else:
        dist = float(np.linalg.norm(origin))
        near = max(1e-3, dist - 0.9)
        far = dist + 0.9
    if cfg.jitter:
        u = _hash_uniform(seed, pixel_ids, n)
    else:
        u = np.full((m, n), 0.5)
    t = near + (np.arange(n)[None, :] + u) * (far - near) / n
    delta = np.diff(t, axis=1)
    delta = np.concatenate([delta, np.full((m, 1), (far - near) / n)], axis=1)
    pts = (origin[None, None, :] + t[..., None] * dirs[:, None, :]).reshape(-1, 3)
    if cull_radius is not None:
        live = (pts * pts).sum(axis=1) <= cull_radius * cull_radius
        sigma = np.zeros(m * n)
        if live.any():
            sigma[live] = density(grid, pts[live], cfg.gamma)
        sigma = sigma.reshape(m, n)
    else:
        sigma = density(grid, pts, cfg.gamma).reshape(m, n)
    alpha, trans, w = ray_weights(sigma, delta, cfg.transmittance_mode)

    s = cfg.shading_points
    valid = w > cfg.weight_threshold
    w_masked = np.where(valid, w, -1.0)
    top = np.argpartition(w_masked, n - s, axis=1)[:, n - s:]
    top_w = np.take_along_axis(w_masked, top, axis=1)
    keep = top_w > 0
    # order the kept samples by depth
    order = np.argsort(np.where(keep, top, n + 1), axis=1)
    sel_idx = np.where(np.take_along_axis(keep, order, axis=1),
                       np.take_along_axis(top, order, axis=1), -1)
    sel_w_raw = np.where(sel_idx >= 0,
                         np.take_along_axis(w, np.maximum(sel_idx, 0), axis=1), 0.0)
    # Selected weights are renormalized to carry the full ray energy,
    # capped at one (the cap only engages in the literal "expsum" mode).
    total = np.minimum(w.sum(axis=1), 1.0)
    sel_total = sel_w_raw.sum(axis=1)
    scale = np.where(sel_total > 0, total / np.maximum(sel_total, 1e-30), 0.0)
    sel_weight = sel_w_raw * scale[:, None]
    weight_sum = np.where(sel_total > 0, total, 0.0)
    return RaySampleBatch(t=t, delta=delta, sigma=sigma, alpha=alpha, trans=trans,
                          weights=w, sel_idx=sel_idx, sel_weight=sel_weight,
                          weight_sum=weight_sum)


# ---------------------------------------------------------------------------
# shading networks

@dataclass
class ShadingNets:
    """MLP_F (pairwise feature) and MLP_C (color), shared across points."""

    spec_f: nets.MlpSpec
    spec_c: nets.MlpSpec
    params: dict[str, Tensor]
    use_view_dirs: bool

    @classmethod
    def init(cls, cfg: RendererConfig, feature_dim: int, seed: int = 0) -> "ShadingNets":
        rng = np.random.default_rng(seed)
        spec_f = nets.MlpSpec((feature_dim + 3, cfg.mlpf_hidden, cfg.mlpf_out))
        c_in = cfg.mlpf_out + (3 if cfg.use_view_dirs else 0)
        spec_c = nets.MlpSpec((c_in, cfg.mlpc_hidden, 3))
        params = {}
        params.update(nets.scoped("render.mlpf", nets.init_mlp(spec_f, rng)))
        params.update(nets.scoped("render.mlpc", nets.init_mlp(spec_c, rng)))
        return cls(spec_f=spec_f, spec_c=spec_c, params=params,
                   use_view_dirs=cfg.use_view_dirs)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def _sub(self, prefix: str) -> dict[str, Tensor]:
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def to_entries(self) -> dict[str, Tensor]:
        return dict(self.params)

    @classmethod
    def from_entries(cls, arrays: dict[str, np.ndarray], cfg: RendererConfig,
                     feature_dim: int) -> "ShadingNets":
        model = cls.init(cfg, feature_dim)
        for k in model.params:
            model.params[k] = Tensor(arrays[k], requires_grad=True)
        return model


@dataclass
class RenderTap:
    """Instrumentation: which UV indices a render consumed, per pixel."""

    pixels: list = field(default_factory=list)
    uv_indices: list = field(default_factory=list)
    contributions: list = field(default_factory=list)
    feature_rows: dict = field(default_factory=dict)

    def record(self, pixel_ids: np.ndarray, uv_idx: np.ndarray,
               contrib: np.ndarray, features: np.ndarray) -> None:
        self.pixels.append(pixel_ids)
        self.uv_indices.append(uv_idx)
        self.contributions.append(contrib)
        for j in np.unique(uv_idx):
            self.feature_rows.setdefault(int(j), features[int(j)].tobytes())

    def consumed_indices(self) -> np.ndarray:
        if not self.uv_indices:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(self.uv_indices))

    def indices_for_pixels(self, pixel_set: np.ndarray) -> np.ndarray:
        """UV indices consumed by any pixel in the given set."""
        if not self.uv_indices:
            return np.zeros(0, dtype=np.int64)
        px = np.concatenate(self.pixels)
        uv = np.concatenate(self.uv_indices)
        mask = np.isin(px, pixel_set)
        return np.unique(uv[mask])

    def pixel_share(self, uv_set: np.ndarray, n_pixels_total: int) -> np.ndarray:
        """Per-pixel fraction of fused contribution coming from ``uv_set``."""
        share = np.zeros(n_pixels_total)
        total = np.zeros(n_pixels_total)
        if self.uv_indices:
            px = np.concatenate(self.pixels)
            uv = np.concatenate(self.uv_indices)
            c = np.concatenate(self.contributions)
            np.add.at(total, px, c)
            inside = np.isin(uv, uv_set)
            np.add.at(share, px[inside], c[inside])
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(total > 0, share / total, 0.0)


# ---------------------------------------------------------------------------
# fusion and shading

def fuse_features(points: np.ndarray, surface: SurfacePointSet, tex_features,
                  knn_index: KnnIndex, shading: ShadingNets, k: int,
                  tap: RenderTap | None = None,
                  tap_pixels: np.ndarray | None = None,
                  tap_ray_weight: np.ndarray | None = None) -> Tensor:
    """Inverse-distance fusion of per-neighbor MLP_F features (Eq. weights
    rho_j = 1 / ||p_j - x||, floored at 1e-8, normalized over the K hits)."""
    feats = tex_features if isinstance(tex_features, Tensor) else Tensor(tex_features)
    pts = np.asarray(points, np.float64)
    idx, dist = knn_index.query(pts, k)                      # [p, k]
    offsets = surface.positions[idx].astype(np.float64) - pts[:, None, :]
    rho = 1.0 / np.maximum(dist, 1e-8)
    wk = rho / rho.sum(axis=1, keepdims=True)                # [p, k]

    p = len(pts)
    cj = ad.gather_rows(feats, idx.reshape(-1))              # [p*k, f]
    inp = ad.concat([cj, Tensor(offsets.reshape(-1, 3).astype(np.float32))], axis=1)
    per_nbr = nets.mlp_forward(shading.spec_f, shading._sub("render.mlpf"), inp)
    per_nbr = ad.reshape(per_nbr, (p, k, shading.spec_f.widths[-1]))
    fused = ad.sum_(per_nbr * Tensor(wk[:, :, None].astype(np.float32)), axis=1)
    if tap is not None:
        rw = np.ones(p) if tap_ray_weight is None else tap_ray_weight
        tap.record(np.repeat(tap_pixels, k), idx.reshape(-1),
                   (wk * rw[:, None]).reshape(-1), feats.data)
    return fused


def shade(fused: Tensor, view_dirs: np.ndarray, shading: ShadingNets) -> Tensor:
    """Fused feature (plus optional view direction) -> RGB in [0, 1]."""
    if shading.use_view_dirs:
        x = ad.concat([fused, Tensor(np.asarray(view_dirs, np.float32))], axis=1)
    else:
        x = fused
    return ad.sigmoid(nets.mlp_forward(shading.spec_c, shading._sub("render.mlpc"), x))


# ---------------------------------------------------------------------------
# full renders

@dataclass
class RenderArtifacts:
    """Immutable per-shape inputs to rendering."""

    surface: SurfacePointSet
    grid: IndicatorGrid
    knn: KnnIndex
    bound: float              # radius of the surface plus falloff margin

    @classmethod
    def build(cls, surface: SurfacePointSet, grid: IndicatorGrid) -> "RenderArtifacts":
        radius = float(np.linalg.norm(surface.positions, axis=1).max())
        return cls(surface=surface, grid=grid,
                   knn=KnnIndex(surface.positions.astype(np.float64)),
                   bound=radius + 0.1)


@dataclass
class RenderedRays:
    rgb: Tensor               # [m, 3] on the tape when recording
    alpha: np.ndarray         # [m]
    batch: RaySampleBatch


def render_rays(artifacts: RenderArtifacts, tex_features, shading: ShadingNets,
                cfg: RendererConfig, origin: np.ndarray, dirs: np.ndarray,
                pixel_ids: np.ndarray, seed: int,
                tap: RenderTap | None = None) -> RenderedRays:
    m = len(dirs)
    batch = sample_rays(origin, dirs, pixel_ids, artifacts.grid, cfg, seed,
                        cull_radius=artifacts.bound)
    flat_ray, flat_sample = np.nonzero(batch.sel_idx >= 0)
    bg = np.asarray(cfg.background, np.float32)
    if len(flat_ray) == 0:
        rgb = Tensor(np.broadcast_to(bg, (m, 3)).copy())
        return RenderedRays(rgb=rgb, alpha=np.zeros(m), batch=batch)

    sample_idx = batch.sel_idx[flat_ray, flat_sample]
    t_sel = batch.t[flat_ray, sample_idx]
    x_sel = origin[None, :] + t_sel[:, None] * dirs[flat_ray]
    w_sel = batch.sel_weight[flat_ray, flat_sample]

    fused = fuse_features(x_sel, artifacts.surface, tex_features, artifacts.knn,
                          shading, cfg.knn, tap=tap,
                          tap_pixels=pixel_ids[flat_ray] if tap is not None else None,
                          tap_ray_weight=w_sel if tap is not None else None)
    colors = shade(fused, dirs[flat_ray], shading)
    weighted = colors * Tensor(w_sel[:, None].astype(np.float32))
    fg = ad.segment_sum(weighted, flat_ray, m)
    alpha = batch.weight_sum
    rgb = fg + Tensor((1.0 - alpha[:, None]).astype(np.float32) * bg[None, :])
    return RenderedRays(rgb=rgb, alpha=alpha, batch=batch)


@dataclass
class RenderedImage:
    rgb: np.ndarray           # [h, w, 3] float in [0, 1]
    alpha: np.ndarray         # [h, w]


def render_patch(artifacts: RenderArtifacts, tex_features, shading: ShadingNets,
                 cfg: RendererConfig, cam: Camera, rect: tuple[int, int, int, int],
                 seed: int, tap: RenderTap | None = None) -> RenderedImage:
    origin, dirs, pixel_ids = generate_rays(cam, rect)
    out = render_rays(artifacts, tex_features, shading, cfg, origin, dirs,
                      pixel_ids, seed, tap=tap)
    h, w = rect[3], rect[2]
    return RenderedImage(rgb=np.clip(out.rgb.data, 0.0, 1.0).reshape(h, w, 3),
                         alpha=out.alpha.reshape(h, w))


def render_image(artifacts: RenderArtifacts, tex_features, shading: ShadingNets,
                 cfg: RendererConfig, cam: Camera, seed: int,
                 tap: RenderTap | None = None, tile: int = 64) -> RenderedImage:
    """Full-frame render, tiled over row bands (shading is pointwise, so
    tiling cannot introduce seams)."""
    rgb = np.zeros((cam.height, cam.width, 3), np.float64)
    alpha = np.zeros((cam.height, cam.width))
    for y0 in range(0, cam.height, tile):
        h = min(tile, cam.height - y0)
        part = render_patch(artifacts, tex_features, shading, cfg, cam,
                            (0, y0, cam.width, h), seed, tap=tap)
        rgb[y0:y0 + h] = part.rgb
        alpha[y0:y0 + h] = part.alpha
    return RenderedImage(rgb=rgb, alpha=alpha)
