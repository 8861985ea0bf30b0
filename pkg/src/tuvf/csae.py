"""Canonical surface auto-encoder: point cloud -> geometry code -> per-UV
surface points and normals, trained with Chamfer plus an indicator-grid L2.

The UV-sphere vertex index is the correspondence anchor: position i of the
decoded set always answers for sphere vertex i, for any shape encoded with
the same checkpoint.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import dpsr, nets
from .autodiff import Adam, Tensor, backward, tape
from .checkpoint import load_checkpoint, save_checkpoint
from .geometry import PointCloud, UvSphere, build_icosphere, chamfer_distance, \
    normalize_to_unit_cube

# Decoded positions are squashed to stay strictly inside the Poisson grid;
# training data is shrunk to the central band of the cube for the same
# reason (periodic spectral solve needs padding).
POSITION_BOUND = 0.475
DEFAULT_SHAPE_MARGIN = 0.7


@dataclass(frozen=True)
class CsaeConfig:
    uv_level: int = 4
    sample_count: int = 4096          # encoder input size
    target_pool: int = 4096           # per-shape pool the Chamfer targets draw from
    encoder_widths: tuple[int, ...] = (64, 64, 128)
    encoder_k: int = 20
    latent_dim: int = 256
    decoder_width: int = 128
    decoder_k: int = 20
    dpsr_resolution: int = 128
    dpsr_sigma: float = 2.0
    lambda_dpsr: float = 1.0
    shape_margin: float = DEFAULT_SHAPE_MARGIN
    lr: float = 1e-3


@dataclass(frozen=True)
class SurfacePointSet:
    """Decoded per-UV-vertex surface samples, index-aligned with the sphere."""

    positions: np.ndarray         # [n, 3] float32
    normals: np.ndarray           # [n, 3] float32, unit
    uv_level: int

    def __post_init__(self):
        if self.positions.shape != self.normals.shape:
            raise ValueError("positions and normals must be index-aligned")


def _encoder_specs(cfg: CsaeConfig):
    dims = (3,) + tuple(cfg.encoder_widths)
    convs = [nets.EdgeConvSpec(fi, fo, cfg.encoder_k)
             for fi, fo in zip(dims[:-1], dims[1:])]
    head = nets.MlpSpec((2 * dims[-1], cfg.latent_dim))
    return convs, head


def _decoder_specs(cfg: CsaeConfig):
    w = cfg.decoder_width
    return {
        "edge": nets.EdgeConvSpec(3, w, cfg.decoder_k, attention=True),
        "style": nets.MlpSpec((cfg.latent_dim, w, 2 * w)),
        "fuse": nets.MlpSpec((w, w)),
        "out": nets.MlpSpec((w, 3)),
    }


class CsaeModel:
    """Config + parameters + the canonical sphere, with encode/decode."""

    def __init__(self, cfg: CsaeConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self.sphere: UvSphere = build_icosphere(cfg.uv_level)
        self._uv_coords = Tensor(self.sphere.vertices.astype(np.float32))

    @classmethod
    def init(cls, cfg: CsaeConfig, seed: int = 0) -> "CsaeModel":
        rng = np.random.default_rng(seed)
        params: dict[str, Tensor] = {}
        convs, head = _encoder_specs(cfg)
        for i, spec in enumerate(convs):
            params.update(nets.scoped(f"csae.encoder.ec{i}", nets.init_edgeconv(spec, rng)))
        params.update(nets.scoped("csae.encoder.head", nets.init_mlp(head, rng)))
        dec = _decoder_specs(cfg)
        for branch in ("f", "g"):
            params.update(nets.scoped(f"csae.{branch}.edge",
                                      nets.init_edgeconv(dec["edge"], rng)))
            for stage in (1, 2):
                params.update(nets.scoped(f"csae.{branch}.style{stage}",
                                          nets.init_mlp(dec["style"], rng)))
                params.update(nets.scoped(f"csae.{branch}.fuse{stage}",
                                          nets.init_mlp(dec["fuse"], rng)))
            params.update(nets.scoped(f"csae.{branch}.out", nets.init_mlp(dec["out"], rng)))
        return cls(cfg, params)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def _sub(self, prefix: str) -> dict[str, Tensor]:
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    # -- encoder ------------------------------------------------------------

    def encode(self, points: np.ndarray) -> Tensor:
        """Point cloud [sample_count, 3] in the unit cube -> geometry code."""
        pts = np.asarray(points, dtype=np.float32)
        if pts.shape != (self.cfg.sample_count, 3):
            raise ValueError(
                f"encode expects exactly [{self.cfg.sample_count}, 3] points, got {pts.shape}")
        if np.abs(pts).max() > 0.5 + 1e-5:
            raise ValueError("encode expects a cloud normalized to the unit cube")
        convs, head = _encoder_specs(self.cfg)
        h = Tensor(pts)
        for i, spec in enumerate(convs):
            h = nets.edgeconv_forward(spec, self._sub(f"csae.encoder.ec{i}"), h)
        pooled = ad.concat([ad.max_(h, axis=0), ad.mean_(h, axis=0)], axis=0)
        z = nets.mlp_forward(head, self._sub("csae.encoder.head"),
                             ad.reshape(pooled, (1, pooled.size)))
        return ad.reshape(z, (self.cfg.latent_dim,))

    # -- decoders -----------------------------------------------------------

    def _decode_branch(self, branch: str, coords: Tensor, z: Tensor,
                       neighbor_coords: np.ndarray) -> Tensor:
        cfg = self.cfg
        dec = _decoder_specs(cfg)
        w = cfg.decoder_width
        x = nets.edgeconv_forward(dec["edge"], self._sub(f"csae.{branch}.edge"),
                                  coords, neighbor_source=neighbor_coords)
        for stage in (1, 2):
            stats = nets.mlp_forward(dec["style"], self._sub(f"csae.{branch}.style{stage}"),
                                     ad.reshape(z, (1, cfg.latent_dim)))
            mean_v = stats[0, :w]
            std_v = ad.softplus(stats[0, w:]) + Tensor(np.float32(1e-4))
            x = nets.adain(x, mean_v, std_v)
            x = ad.leaky_relu(
                nets.mlp_forward(dec["fuse"], self._sub(f"csae.{branch}.fuse{stage}"), x),
                nets.LEAKY_SLOPE)
        return nets.mlp_forward(dec["out"], self._sub(f"csae.{branch}.out"), x)

    def decode_surface(self, z: Tensor) -> Tensor:
        """Geometry code -> per-UV-vertex positions, bounded inside the grid."""
        raw = self._decode_branch("f", self._uv_coords, z, self.sphere.vertices)
        return ad.tanh(raw) * Tensor(np.float32(POSITION_BOUND))

    def decode_normals(self, z: Tensor, positions: Tensor) -> Tensor:
        """Positions (from decode_surface) -> unit normals at those points."""
        raw = self._decode_branch("g", positions, z, positions.data)
        length = ad.norm(raw, axis=1, keepdims=True)
        return raw / (length + Tensor(np.float32(1e-8)))

    # -- inference bundle ---------------------------------------------------

    def surface_artifacts(self, cloud_points: np.ndarray) \
            -> tuple[SurfacePointSet, dpsr.IndicatorGrid]:
        """Inference helper: encode a normalized cloud, decode the surface
        point set, and reconstruct its indicator grid (all off-tape)."""
        z = self.encode(cloud_points)
        pos = self.decode_surface(z)
        nrm = self.decode_normals(z, pos)
        chi = dpsr.reconstruct_indicator(pos, nrm, self.cfg.dpsr_resolution,
                                         self.cfg.dpsr_sigma)
        sps = SurfacePointSet(positions=pos.data.astype(np.float32),
                              normals=nrm.data.astype(np.float32),
                              uv_level=self.cfg.uv_level)
        return sps, dpsr.IndicatorGrid(values=chi.data)

    # -- serialization --------------------------------------------------------

    _META_KEYS = ("uv_level", "sample_count", "encoder_k", "latent_dim",
                  "decoder_width", "decoder_k", "dpsr_resolution",
                  "dpsr_sigma", "lambda_dpsr", "shape_margin", "lr")

    def to_entries(self) -> dict[str, Tensor | np.ndarray]:
        entries: dict[str, Tensor | np.ndarray] = {}
        meta = {k: float(getattr(self.cfg, k)) for k in self._META_KEYS}
        entries["meta.csae.widths"] = np.asarray(self.cfg.encoder_widths, dtype=np.float32)
        for k, v in meta.items():
            entries[f"meta.csae.{k}"] = np.asarray([v], dtype=np.float32)
        entries.update(self.params)
        return entries

    def save(self, path) -> None:
        save_checkpoint(self.to_entries(), path)

    @classmethod
    def load(cls, path) -> "CsaeModel":
        arrays = load_checkpoint(path)
        widths = tuple(int(v) for v in arrays.pop("meta.csae.widths"))
        meta = {}
        for k in cls._META_KEYS:
            meta[k] = float(arrays.pop(f"meta.csae.{k}")[0])
        cfg = CsaeConfig(
            uv_level=int(meta["uv_level"]), sample_count=int(meta["sample_count"]),
            encoder_widths=widths, encoder_k=int(meta["encoder_k"]),
            latent_dim=int(meta["latent_dim"]), decoder_width=int(meta["decoder_width"]),
            decoder_k=int(meta["decoder_k"]), dpsr_resolution=int(meta["dpsr_resolution"]),
            dpsr_sigma=meta["dpsr_sigma"], lambda_dpsr=meta["lambda_dpsr"],
            shape_margin=meta["shape_margin"], lr=meta["lr"])
        params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()
                  if k.startswith("csae.")}
        return cls(cfg, params)


@dataclass
class TrainingShape:
    """Pool of normalized oriented samples plus the fixed encoder subset."""

    pool: PointCloud              # target_pool points, margin-scaled
    encoder_points: np.ndarray    # [sample_count, 3] float32


def prepare_training_cloud(cloud: PointCloud, cfg: CsaeConfig,
                           seed: int) -> TrainingShape:
    """Normalize to the unit cube, shrink by the shape margin, and draw the
    target pool and the fixed encoder subset (deterministic under seed)."""
    if cloud.normals is None:
        raise ValueError("training clouds need normals (for the target grid)")
    normed, _ = normalize_to_unit_cube(cloud)
    pts = normed.points * cfg.shape_margin
    rng = np.random.default_rng(seed)
    pool_idx = rng.choice(len(pts), size=cfg.target_pool,
                          replace=len(pts) < cfg.target_pool)
    pool = PointCloud(pts[pool_idx], normed.normals[pool_idx])
    enc_idx = rng.choice(cfg.target_pool, size=cfg.sample_count,
                         replace=cfg.target_pool < cfg.sample_count)
    return TrainingShape(pool=pool,
                         encoder_points=pool.points[enc_idx].astype(np.float32))


@dataclass
class TrainRecord:
    step: int
    shape: int
    chamfer: float
    grid_l2: float
    total: float


def train_csae(clouds: list[PointCloud], cfg: CsaeConfig, steps: int,
               seed: int = 0, out_path=None, log_path=None,
               log_every: int = 1) -> tuple[CsaeModel, list[TrainRecord]]:
    """Stage-A training loop over a list of oriented point clouds.

    Per step: encode a fixed per-shape sample, decode positions and
    normals, take Chamfer distance against a fresh target subsample plus
    the weighted grid L2 against the precomputed target indicator.
    """
    if not clouds:
        raise ValueError("train_csae needs at least one shape")
    model = CsaeModel.init(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)

    prepped = [prepare_training_cloud(c, cfg, seed + 17 * i)
               for i, c in enumerate(clouds)]
    targets = []
    for shape in prepped:
        chi = dpsr.reconstruct_indicator(shape.pool.points.astype(np.float32),
                                         shape.pool.normals.astype(np.float32),
                                         cfg.dpsr_resolution, cfg.dpsr_sigma)
        targets.append(Tensor(chi.data))

    n_target = min(model.sphere.num_vertices, cfg.target_pool)
    opt = Adam(model.parameters(), lr=cfg.lr)
    history: list[TrainRecord] = []

    for step in range(steps):
        shape_id = step % len(prepped)
        shape = prepped[shape_id]
        pick = rng.choice(cfg.target_pool, size=n_target, replace=False)
        target_pts = shape.pool.points[pick].astype(np.float32)
        try:
            with tape():
                z = model.encode(shape.encoder_points)
                pos = model.decode_surface(z)
                loss_cd = chamfer_distance(pos, target_pts)
                if cfg.lambda_dpsr > 0:
                    nrm = model.decode_normals(z, pos)
                    chi = dpsr.reconstruct_indicator(pos, nrm, cfg.dpsr_resolution,
                                                     cfg.dpsr_sigma)
                    loss_grid = dpsr.l_dpsr(chi, targets[shape_id])
                    loss = loss_cd + Tensor(np.float32(cfg.lambda_dpsr)) * loss_grid
                else:
                    loss_grid = Tensor(np.float32(0.0))
                    loss = loss_cd
                backward(loss)
            opt.step()
        except ad.NonFiniteError as err:
            raise RuntimeError(
                f"training aborted: non-finite loss at step {step}, "
                f"shape {shape_id}: {err}") from err
        if step % log_every == 0 or step == steps - 1:
            history.append(TrainRecord(step, shape_id, loss_cd.item(),
                                       loss_grid.item(), loss.item()))
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "shape", "chamfer", "grid_l2", "total"])
            for r in history:
                writer.writerow([r.step, r.shape, f"{r.chamfer:.8g}",
                                 f"{r.grid_l2:.8g}", f"{r.total:.8g}"])
    if out_path is not None:
        model.save(out_path)
    return model, history
