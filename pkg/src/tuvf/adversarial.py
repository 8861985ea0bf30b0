"""Adversarial texture training at desk scale.

Patches are sampled with a Beta-annealed scale (early draws cover the whole
frame at low resolution, late draws are small high-detail crops), both
sides pass through the same seeded geometric augmentation and blur
schedule, and an MLP discriminator conditioned on patch scale/offset
drives the non-saturating loss with R1 regularization.

The discriminator is piecewise linear (average pooling + LeakyReLU MLP),
so its input gradient is an exact product of the recorded masks and weight
matrices; R1 is built from that expression directly on the tape, which
keeps its parameter gradient first-order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nets
from .autodiff import Adam, Tensor, backward, tape
from .checkpoint import save_checkpoint
from .csae import CsaeModel, prepare_training_cloud
from .geometry import PointCloud
from .imgio import gaussian_kernel_1d, save_png
from .renderer import (Camera, RenderArtifacts, RendererConfig, ShadingNets,
                       camera_from_orbit, generate_patch_rays, render_rays)
from .texgen import TexGenConfig, TextureGenerator


@dataclass(frozen=True)
class PatchSpec:
    """Normalized crop of the virtual frame: side fraction and offset."""

    scale: float
    offset: tuple[float, float]
    resolution: int = 32

    def __post_init__(self):
        u, v = self.offset
        if not (0.0 < self.scale <= 1.0 and -1e-9 <= u and -1e-9 <= v
                and u + self.scale <= 1.0 + 1e-9 and v + self.scale <= 1.0 + 1e-9):
            raise ValueError(f"patch footprint leaves the frame: {self}")

    def condition_vector(self) -> np.ndarray:
        return np.array([self.scale, self.offset[0], self.offset[1]], np.float64)


@dataclass(frozen=True)
class PoseSampler:
    """Hemisphere-style pose distribution: uniform azimuth, narrow elevation."""

    azimuth_range: tuple[float, float] = (0.0, 360.0)
    elevation_range: tuple[float, float] = (10.0, 40.0)
    radius: float = 1.3
    fov_deg: float = 45.0
    image_size: int = 128

    def draw(self, rng: np.random.Generator) -> Camera:
        az = rng.uniform(*self.azimuth_range)
        el = rng.uniform(*self.elevation_range)
        return camera_from_orbit(az, el, self.radius, self.fov_deg,
                                 self.image_size, self.image_size)


@dataclass(frozen=True)
class GanConfig:
    patch_resolution: int = 32
    min_scale: float = 0.125
    beta_start: float = 1e-4
    beta_end: float = 0.8
    anneal_images: int = 10_000          # schedule horizon, compressed for desk scale
    blur_sigma0: float = -1.0            # < 0: auto 60 * resolution / 128
    blur_horizon: int = 5_000
    translate_frac: float = 0.05
    scale_jitter: tuple[float, float] = (0.9, 1.1)
    augment_translate: bool = True
    augment_scale: bool = True
    r1_weight: float = 1.0
    cond_freqs: int = 4
    disc_hidden: int = 256
    lr_g: float = 2e-3
    lr_d: float = 2e-3

    def __post_init__(self):
        if self.r1_weight < 0:
            raise ValueError("r1 weight must be non-negative")
        if self.patch_resolution % 16 != 0:
            raise ValueError("patch resolution must be a multiple of 16")

    def blur_sigma_initial(self) -> float:
        if self.blur_sigma0 >= 0:
            return self.blur_sigma0
        return 60.0 * self.patch_resolution / 128.0


def beta_parameter(cfg: GanConfig, progress: float) -> float:
    """Linear anneal of the Beta shape parameter over images seen."""
    p = min(max(progress, 0.0), 1.0)
    return cfg.beta_start + (cfg.beta_end - cfg.beta_start) * p


def sample_patch_spec(rng: np.random.Generator, progress: float,
                      cfg: GanConfig) -> PatchSpec:
    """Annealed patch scale: early draws sit at scale ~1 (whole frame, low
    resolution), late draws spread toward the minimum scale."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must be in [0, 1], got {progress}")
    b = beta_parameter(cfg, progress)
    draw = 1.0 - rng.beta(b, 1.0)                  # distributed as Beta(1, b)
    s = cfg.min_scale + (1.0 - cfg.min_scale) * draw
    s = min(s, 1.0)
    room = 1.0 - s
    if room <= 0:
        return PatchSpec(scale=1.0, offset=(0.0, 0.0),
                         resolution=cfg.patch_resolution)
    return PatchSpec(scale=s, offset=(rng.uniform(0, room), rng.uniform(0, room)),
                     resolution=cfg.patch_resolution)


def blur_sigma(cfg: GanConfig, images_seen: int) -> float:
    """Linear decay from the initial sigma to zero over the blur horizon."""
    frac = 1.0 - images_seen / max(cfg.blur_horizon, 1)
    return max(0.0, cfg.blur_sigma_initial() * frac)


# ---------------------------------------------------------------------------
# augmentation (identical transform for real and fake within a step)

@dataclass(frozen=True)
class AugmentParams:
    dx: float                    # translation, fraction of the patch
    dy: float
    zoom: float
    sigma: float                 # Gaussian blur in pixels


def draw_augment_params(rng: np.random.Generator, cfg: GanConfig,
                        images_seen: int) -> AugmentParams:
    dx = rng.uniform(-cfg.translate_frac, cfg.translate_frac) \
        if cfg.augment_translate else 0.0
    dy = rng.uniform(-cfg.translate_frac, cfg.translate_frac) \
        if cfg.augment_translate else 0.0
    zoom = rng.uniform(*cfg.scale_jitter) if cfg.augment_scale else 1.0
    return AugmentParams(dx=dx, dy=dy, zoom=zoom, sigma=blur_sigma(cfg, images_seen))


def _resample_taps(res: int, params: AugmentParams):
    """4-tap bilinear gather (indices, weights) for the affine jitter,
    edge-clamped; identity parameters produce an exact identity."""
    c = (res - 1) / 2.0
    coords = np.arange(res, dtype=np.float64)
    src_y = (coords - c) / params.zoom + c - params.dy * res
    src_x = (coords - c) / params.zoom + c - params.dx * res
    gy, gx = np.meshgrid(np.clip(src_y, 0, res - 1), np.clip(src_x, 0, res - 1),
                         indexing="ij")
    y0 = np.floor(gy).astype(np.int64)
    x0 = np.floor(gx).astype(np.int64)
    y1 = np.minimum(y0 + 1, res - 1)
    x1 = np.minimum(x0 + 1, res - 1)
    fy = gy - y0
    fx = gx - x0
    idx = np.stack([y0 * res + x0, y0 * res + x1, y1 * res + x0, y1 * res + x1])
    w = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx])
    return idx.reshape(4, -1), w.reshape(4, -1)


_BLUR_MATRIX_CACHE: dict[tuple[int, float], np.ndarray] = {}


def _blur_matrix(res: int, sigma: float) -> np.ndarray:
    """Dense 1-d blur operator with reflect padding; rows sum to one."""
    key = (res, round(float(sigma), 6))
    hit = _BLUR_MATRIX_CACHE.get(key)
    if hit is not None:
        return hit
    k = gaussian_kernel_1d(sigma)
    r = (len(k) - 1) // 2
    mat = np.zeros((res, res))
    for i in range(res):
        for j, kv in enumerate(k):
            s = i + j - r
            if s < 0:
                s = -s
            while s >= res:                       # reflect (can bounce twice)
                s = 2 * (res - 1) - s
                if s < 0:
                    s = -s
            mat[i, s] += kv
    if len(_BLUR_MATRIX_CACHE) > 64:
        _BLUR_MATRIX_CACHE.clear()
    _BLUR_MATRIX_CACHE[key] = mat.astype(np.float32)
    return _BLUR_MATRIX_CACHE[key]


def apply_augmentation(patch, params: AugmentParams) -> Tensor:
    """Seeded geometric jitter + blur as tape ops (one code path for both
    sides; gradients flow when the patch is tracked)."""
    t = patch if isinstance(patch, Tensor) else Tensor(np.asarray(patch, np.float32))
    res = t.shape[0]
    if t.shape[:2] != (res, res) or t.shape[2] != 3:
        raise ValueError(f"expected square RGB patch, got {t.shape}")
    if params.dx != 0.0 or params.dy != 0.0 or params.zoom != 1.0:
        idx, w = _resample_taps(res, params)
        flat = ad.reshape(t, (res * res, 3))
        acc = None
        for tap in range(4):
            part = ad.gather_rows(flat, idx[tap]) * Tensor(
                w[tap][:, None].astype(np.float32))
            acc = part if acc is None else acc + part
        t = ad.reshape(acc, (res, res, 3))
    if params.sigma > 0:
        m = Tensor(_blur_matrix(res, params.sigma))
        cols = ad.reshape(t, (res, res * 3))
        t = ad.reshape(ad.matmul(m, cols), (res, res, 3))               # rows
        swapped = ad.reshape(ad.transpose(t, (1, 0, 2)), (res, res * 3))
        t = ad.transpose(ad.reshape(ad.matmul(m, swapped), (res, res, 3)),
                         (1, 0, 2))                                     # columns
    return t


def crop_real_patch(image: np.ndarray, spec: PatchSpec) -> np.ndarray:
    """Crop the normalized rect from a real image and resize to the patch
    resolution (bilinear), mirroring the fake side's patch rays."""
    from .imgio import bilinear_sample

    h, w = image.shape[:2]
    fr = (np.arange(spec.resolution) + 0.5) / spec.resolution
    ys = (spec.offset[1] + fr * spec.scale) * h - 0.5
    xs = (spec.offset[0] + fr * spec.scale) * w - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample(image, gy, gx).astype(np.float32)


# ---------------------------------------------------------------------------
# discriminator

class Discriminator:
    """MLP over a pooled patch, conditioned on encoded (scale, u, v)."""

    POOLED = 16

    def __init__(self, cfg: GanConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self.encoding = nets.FourierEncoding(cfg.cond_freqs, include_input=True)
        self.cond_dim = self.encoding.out_dim(3)
        self.in_dim = self.POOLED * self.POOLED * 3 + self.cond_dim

    @classmethod
    def init(cls, cfg: GanConfig, seed: int = 0) -> "Discriminator":
        rng = np.random.default_rng(seed)
        cond_dim = nets.FourierEncoding(cfg.cond_freqs, True).out_dim(3)
        in_dim = cls.POOLED * cls.POOLED * 3 + cond_dim
        spec = nets.MlpSpec((in_dim, cfg.disc_hidden, cfg.disc_hidden, 1))
        return cls(cfg, nets.scoped("disc.mlp", nets.init_mlp(spec, rng)))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def _weights(self):
        p = self.params
        return (p["disc.mlp.w0"], p["disc.mlp.b0"], p["disc.mlp.w1"],
                p["disc.mlp.b1"], p["disc.mlp.w2"], p["disc.mlp.b2"])

    def _pool_and_condition(self, patch: Tensor, spec: PatchSpec) -> Tensor:
        res = spec.resolution
        if patch.shape != (res, res, 3):
            raise ValueError(f"patch shape {patch.shape} != ({res}, {res}, 3)")
        f = res // self.POOLED
        pooled = ad.mean_(ad.reshape(patch, (self.POOLED, f, self.POOLED, f, 3)),
                          axis=(1, 3))
        flat = ad.reshape(pooled, (1, self.POOLED * self.POOLED * 3))
        cond = nets.fourier_encode(self.encoding, spec.condition_vector()[None, :])
        return ad.concat([flat, cond], axis=1)

    def forward(self, patch, spec: PatchSpec) -> Tensor:
        """Scalar logit for one patch."""
        t = patch if isinstance(patch, Tensor) else Tensor(np.asarray(patch, np.float32))
        w0, b0, w1, b1, w2, b2 = self._weights()
        h = self._pool_and_condition(t, spec)
        a1 = ad.leaky_relu(ad.matmul(h, w0) + b0, nets.LEAKY_SLOPE)
        a2 = ad.leaky_relu(ad.matmul(a1, w1) + b1, nets.LEAKY_SLOPE)
        return ad.reshape(ad.matmul(a2, w2) + b2, (1,))

    def forward_with_input_grad(self, patch, spec: PatchSpec) -> tuple[Tensor, Tensor]:
        """Logit plus the analytic gradient of the logit w.r.t. the patch
        pixels, built from tape ops (LeakyReLU masks enter as constants,
        which is exact a.e. for a piecewise-linear network)."""
        t = patch if isinstance(patch, Tensor) else Tensor(np.asarray(patch, np.float32))
        res = spec.resolution
        f = res // self.POOLED
        w0, b0, w1, b1, w2, b2 = self._weights()
        h = self._pool_and_condition(t, spec)
        z1 = ad.matmul(h, w0) + b0
        a1 = ad.leaky_relu(z1, nets.LEAKY_SLOPE)
        z2 = ad.matmul(a1, w1) + b1
        a2 = ad.leaky_relu(z2, nets.LEAKY_SLOPE)
        logit = ad.reshape(ad.matmul(a2, w2) + b2, (1,))

        slope = nets.LEAKY_SLOPE
        m2 = Tensor(np.where(z2.data > 0, 1.0, slope).astype(np.float32))
        m1 = Tensor(np.where(z1.data > 0, 1.0, slope).astype(np.float32))
        g2 = ad.transpose(w2) * m2                    # [1, h2]
        g1 = ad.matmul(g2, ad.transpose(w1)) * m1     # [1, h1]
        g_in = ad.matmul(g1, ad.transpose(w0))        # [1, in_dim]
        g_flat = g_in[:, :self.POOLED * self.POOLED * 3]
        g_pool = ad.reshape(g_flat, (self.POOLED, 1, self.POOLED, 1, 3))
        g_pix = ad.broadcast_to(g_pool, (self.POOLED, f, self.POOLED, f, 3)) \
            * Tensor(np.float32(1.0 / (f * f)))
        return logit, ad.reshape(g_pix, (res, res, 3))


def f_literal(u: Tensor) -> Tensor:
    """-log(1 + exp(-u)); equals -softplus(-u)."""
    return -ad.softplus(-u)


def gan_losses(disc: Discriminator, real: list, fake: list,
               r1_weight: float) -> tuple[Tensor, Tensor, Tensor]:
    """Non-saturating logistic losses plus R1 on the real patches.

    ``real`` and ``fake`` are lists of (patch, PatchSpec). Both players
    descend: loss_D = E[softplus(D(fake))] + E[softplus(-D(real))] +
    lambda * E[||d D/d pixels||^2], loss_G = E[softplus(-D(fake))].
    """
    if not real or not fake:
        raise ValueError("gan_losses needs at least one real and one fake patch")
    sp_fake = [ad.softplus(disc.forward(p, s)) for p, s in fake]
    loss_g_terms = [ad.softplus(-disc.forward(p, s)) for p, s in fake]
    sp_real = []
    r1_terms = []
    for p, s in real:
        logit, g_pix = disc.forward_with_input_grad(p, s)
        sp_real.append(ad.softplus(-logit))
        r1_terms.append(ad.sum_(g_pix * g_pix))
    k_f = Tensor(np.float32(1.0 / len(fake)))
    k_r = Tensor(np.float32(1.0 / len(real)))
    mean_sp_fake = sum(sp_fake[1:], sp_fake[0]) * k_f
    mean_sp_real = sum(sp_real[1:], sp_real[0]) * k_r
    r1 = sum(r1_terms[1:], r1_terms[0]) * k_r
    loss_d = ad.sum_(mean_sp_fake + mean_sp_real) + Tensor(np.float32(r1_weight)) * r1
    loss_g = ad.sum_(sum(loss_g_terms[1:], loss_g_terms[0]) * k_f)
    return loss_d, loss_g, r1


# ---------------------------------------------------------------------------
# training loop

@dataclass
class GanRecord:
    step: int
    loss_d: float
    loss_g: float
    r1: float
    patch_scale: float


@dataclass
class TextureTrainState:
    generator: TextureGenerator
    shading: ShadingNets
    disc: Discriminator
    history: list[GanRecord]


def train_texture(csae: CsaeModel, shapes: list[PointCloud],
                  reals: list[np.ndarray], gan_cfg: GanConfig,
                  render_cfg: RendererConfig, tex_cfg: TexGenConfig,
                  pose: PoseSampler, steps: int, seed: int = 0,
                  out_path=None, log_path=None, sample_dir=None,
                  sample_every: int = 500,
                  fixed_code_seed: int | None = None) -> TextureTrainState:
    """Stage-B loop: alternate discriminator and generator steps over
    rendered fake patches and cropped real patches.

    ``fixed_code_seed`` pins one texture code for the whole run (used by
    the controlled single-target sanity check); otherwise codes are drawn
    fresh each step.
    """
    if not shapes or not reals:
        raise ValueError("train_texture needs at least one shape and one real image")
    rng = np.random.default_rng(seed)

    artifacts = []
    for i, cloud in enumerate(shapes):
        prepped = prepare_training_cloud(cloud, csae.cfg, seed + 31 * i)
        sps, grid = csae.surface_artifacts(prepped.encoder_points)
        artifacts.append(RenderArtifacts.build(sps, grid))

    gen = TextureGenerator.init(tex_cfg, seed=seed + 1)
    shading = ShadingNets.init(render_cfg, tex_cfg.feature_dim, seed=seed + 2)
    disc = Discriminator.init(gan_cfg, seed=seed + 3)
    opt_g = Adam(gen.parameters() + shading.parameters(), lr=gan_cfg.lr_g)
    opt_d = Adam(disc.parameters(), lr=gan_cfg.lr_d)
    fixed_code = None
    if fixed_code_seed is not None:
        fixed_code = np.random.default_rng(fixed_code_seed) \
            .standard_normal(tex_cfg.z_dim).astype(np.float32)

    history: list[GanRecord] = []

    def draw_code() -> Tensor:
        if fixed_code is not None:
            return Tensor(fixed_code)
        return Tensor(rng.standard_normal(tex_cfg.z_dim).astype(np.float32))

    def render_fake(art, z, cam, spec, render_seed) -> tuple[Tensor, float]:
        feats = gen.generate(csae.sphere, z)
        origin, dirs, pix = generate_patch_rays(cam, spec.scale, spec.offset,
                                                spec.resolution)
        out = render_rays(art, feats, shading, render_cfg, origin, dirs, pix,
                          render_seed)
        return (ad.reshape(out.rgb, (spec.resolution, spec.resolution, 3)),
                float(out.alpha.max()))

    try:
        for step in range(steps):
            progress = min(step / max(gan_cfg.anneal_images, 1), 1.0)
            art = artifacts[int(rng.integers(len(artifacts)))]
            real_img = reals[int(rng.integers(len(reals)))]
            spec = sample_patch_spec(rng, progress, gan_cfg)
            cam = pose.draw(rng)
            aug = draw_augment_params(rng, gan_cfg, images_seen=step)
            render_seed = seed * 1_000_003 + step

            # discriminator step (fake rendered off-tape, hence detached)
            fake_raw, _ = render_fake(art, draw_code(), cam, spec, render_seed)
            fake_const = Tensor(fake_raw.data.copy())
            real_patch = crop_real_patch(real_img, spec)
            with tape():
                real_t = Tensor(np.asarray(real_patch, np.float32))
                real_aug = apply_augmentation(real_t, aug)
                fake_aug = apply_augmentation(fake_const, aug)
                loss_d, _, r1 = gan_losses(disc, [(real_aug, spec)],
                                           [(fake_aug, spec)], gan_cfg.r1_weight)
                opt_d.zero_grad()
                backward(loss_d)
            opt_d.step()

            # generator step (discriminator frozen; grads flow through
            # augmentation and rendering into the texture path)
            with tape():
                fake, coverage = render_fake(art, draw_code(), cam, spec,
                                             render_seed + 1)
                fake_aug = apply_augmentation(fake, aug)
                logit = disc.forward(fake_aug, spec)
                loss_g = ad.sum_(ad.softplus(-logit))
                if coverage > 0:
                    opt_g.zero_grad()
                    backward(loss_g)
            opt_d.zero_grad()            # discard D grads picked up in the G pass
            if coverage > 0:             # a patch that misses the object carries
                opt_g.step()             # no signal for the texture path

            history.append(GanRecord(step=step, loss_d=loss_d.item(),
                                     loss_g=loss_g.item(), r1=r1.item(),
                                     patch_scale=spec.scale))
            if sample_dir is not None and (step + 1) % sample_every == 0:
                _write_sample_grid(sample_dir, step, csae, gen, shading,
                                   render_cfg, artifacts, pose, seed)
    except ad.NonFiniteError as err:
        raise RuntimeError(f"adversarial training aborted at step {step}: {err}") from err

    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss_d", "loss_g", "r1", "patch_scale"])
            for r in history:
                writer.writerow([r.step, f"{r.loss_d:.6g}", f"{r.loss_g:.6g}",
                                 f"{r.r1:.6g}", f"{r.patch_scale:.4f}"])
    state = TextureTrainState(generator=gen, shading=shading, disc=disc,
                              history=history)
    if out_path is not None:
        save_texture_stage(state, out_path)
    return state


def save_texture_stage(state: TextureTrainState, path) -> None:
    entries: dict[str, Tensor | np.ndarray] = {}
    entries.update(state.generator.to_entries())
    entries.update(state.shading.to_entries())
    entries.update(state.disc.params)
    save_checkpoint(entries, path)


def _write_sample_grid(sample_dir, step, csae, gen, shading, render_cfg,
                       artifacts, pose, seed) -> None:
    from pathlib import Path

    from .renderer import render_image
    from .texgen import draw_texture_code

    rows = []
    rng = np.random.default_rng(seed + step)
    for i in range(min(2, len(artifacts))):
        z = draw_texture_code(gen.cfg, int(rng.integers(1 << 31)))
        feats = gen.field(csae.sphere, z).features
        cam = camera_from_orbit(30.0 + 60.0 * i, 25.0, pose.radius,
                                pose.fov_deg, 64, 64)
        img = render_image(artifacts[i], feats, shading, render_cfg, cam,
                           seed=seed)
        rows.append(img.rgb)
    grid = np.concatenate(rows, axis=1)
    save_png(Path(sample_dir) / f"samples_{step:06d}.png", grid)
