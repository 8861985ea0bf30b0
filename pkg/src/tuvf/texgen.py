"""Texture feature generator: a coordinate MLP over UV-sphere vertices,
style-modulated by a texture code, emitting 32-dim features per vertex.

Every operation is strictly per vertex (no pooling, no neighborhoods), so
evaluating any subset of vertices reproduces the corresponding rows of the
full field exactly. The per-vertex field, indexed by UV vertex, is the
transferable texture.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nets
from .autodiff import Tensor
from .checkpoint import checkpoint_checksum, load_checkpoint, save_checkpoint
from .geometry import UvSphere

# Ablation alternatives are named so configs can refer to them, but only
# the pointwise UV generator is implemented at desk scale.
KNOWN_ARCHITECTURES = ("cips-uv", "cips-2d-equirect", "stylegan2-conv")


@dataclass(frozen=True)
class TexGenConfig:
    uv_level: int = 4
    z_dim: int = 64
    style_dim: int = 64
    n_freq: int = 6
    include_input: bool = True
    hidden: int = 128
    n_layers: int = 6
    feature_dim: int = 32
    demodulate: bool = True
    architecture: str = "cips-uv"

    def __post_init__(self):
        if self.architecture not in KNOWN_ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}; "
                             f"known: {KNOWN_ARCHITECTURES}")
        if self.n_layers < 2:
            raise ValueError("generator needs at least 2 layers")


@dataclass(frozen=True)
class UvTextureField:
    """Per-UV-vertex feature vectors; index alignment with the sphere is
    what makes the texture portable across shapes."""

    features: np.ndarray          # [n, feature_dim] float32
    uv_level: int

    def checksum(self) -> str:
        return checkpoint_checksum({"tex.field": self.features})

    def save(self, path) -> None:
        save_checkpoint({
            "meta.tex.uv_level": np.asarray([float(self.uv_level)], np.float32),
            "tex.field": self.features,
        }, path)

    @classmethod
    def load(cls, path) -> "UvTextureField":
        arrays = load_checkpoint(path)
        return cls(features=arrays["tex.field"],
                   uv_level=int(arrays["meta.tex.uv_level"][0]))


def draw_texture_code(cfg: TexGenConfig, seed: int) -> Tensor:
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal(cfg.z_dim).astype(np.float32))


class TextureGenerator:
    def __init__(self, cfg: TexGenConfig, params: dict[str, Tensor]):
        if cfg.architecture != "cips-uv":
            raise NotImplementedError(
                f"architecture {cfg.architecture!r} is a named ablation stub, "
                "out of scope at desk scale")
        self.cfg = cfg
        self.params = params
        self.encoding = nets.FourierEncoding(cfg.n_freq, cfg.include_input)

    @classmethod
    def init(cls, cfg: TexGenConfig, seed: int = 0) -> "TextureGenerator":
        rng = np.random.default_rng(seed)
        params: dict[str, Tensor] = {}
        params.update(nets.scoped("tex.cips.map",
                                  nets.init_mlp(cls._map_spec(cfg), rng)))
        for i, spec in enumerate(cls._layer_specs(cfg)):
            params.update(nets.scoped(f"tex.cips.mod{i}", nets.init_modfc(spec, rng)))
        return cls(cfg, params)

    @staticmethod
    def _map_spec(cfg: TexGenConfig) -> nets.MlpSpec:
        return nets.MlpSpec((cfg.z_dim, cfg.z_dim, cfg.style_dim))

    @classmethod
    def _layer_specs(cls, cfg: TexGenConfig) -> list[nets.ModFcSpec]:
        enc_dim = nets.FourierEncoding(cfg.n_freq, cfg.include_input).out_dim(3)
        dims = [enc_dim] + [cfg.hidden] * (cfg.n_layers - 1) + [cfg.feature_dim]
        return [nets.ModFcSpec(fi, fo, cfg.style_dim, cfg.demodulate)
                for fi, fo in zip(dims[:-1], dims[1:])]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def _sub(self, prefix: str) -> dict[str, Tensor]:
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def map_style(self, z: Tensor) -> Tensor:
        out = nets.mlp_forward(self._map_spec(self.cfg), self._sub("tex.cips.map"),
                               ad.reshape(z, (1, self.cfg.z_dim)))
        return ad.reshape(out, (self.cfg.style_dim,))

    def generate(self, sphere: UvSphere, z: Tensor,
                 vertex_indices: np.ndarray | None = None) -> Tensor:
        """Feature rows for all (or a subset of) UV vertices; stays on the
        active tape so gradients reach both z and the parameters."""
        if sphere.level != self.cfg.uv_level:
            raise ValueError(f"sphere level {sphere.level} != config {self.cfg.uv_level}")
        verts = sphere.vertices if vertex_indices is None \
            else sphere.vertices[np.asarray(vertex_indices)]
        style = self.map_style(z)
        x = nets.fourier_encode(self.encoding, verts)
        specs = self._layer_specs(self.cfg)
        for i, spec in enumerate(specs):
            x = nets.modfc_forward(spec, self._sub(f"tex.cips.mod{i}"), x, style)
            if i < len(specs) - 1:
                x = ad.leaky_relu(x, nets.LEAKY_SLOPE)
        return x

    def field(self, sphere: UvSphere, z: Tensor) -> UvTextureField:
        feats = self.generate(sphere, z)
        return UvTextureField(features=feats.data.astype(np.float32),
                              uv_level=self.cfg.uv_level)

    # -- serialization ------------------------------------------------------

    _META = ("uv_level", "z_dim", "style_dim", "n_freq", "hidden",
             "n_layers", "feature_dim")

    def to_entries(self) -> dict[str, Tensor | np.ndarray]:
        entries: dict[str, Tensor | np.ndarray] = {}
        for k in self._META:
            entries[f"meta.texgen.{k}"] = np.asarray([float(getattr(self.cfg, k))],
                                                     np.float32)
        entries["meta.texgen.include_input"] = np.asarray(
            [1.0 if self.cfg.include_input else 0.0], np.float32)
        entries["meta.texgen.demodulate"] = np.asarray(
            [1.0 if self.cfg.demodulate else 0.0], np.float32)
        entries.update(self.params)
        return entries

    @classmethod
    def from_entries(cls, arrays: dict[str, np.ndarray]) -> "TextureGenerator":
        cfg = TexGenConfig(
            uv_level=int(arrays["meta.texgen.uv_level"][0]),
            z_dim=int(arrays["meta.texgen.z_dim"][0]),
            style_dim=int(arrays["meta.texgen.style_dim"][0]),
            n_freq=int(arrays["meta.texgen.n_freq"][0]),
            include_input=bool(arrays["meta.texgen.include_input"][0]),
            hidden=int(arrays["meta.texgen.hidden"][0]),
            n_layers=int(arrays["meta.texgen.n_layers"][0]),
            feature_dim=int(arrays["meta.texgen.feature_dim"][0]),
            demodulate=bool(arrays["meta.texgen.demodulate"][0]))
        params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()
                  if k.startswith("tex.cips.")}
        return cls(cfg, params)
