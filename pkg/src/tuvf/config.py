"""Flat typed configuration: ``section.key = value`` lines, hard errors on
unknown keys, and provenance-tagged defaults.

Provenance tags: "fixed" marks values the method pins down (grid size,
gamma, neighbor counts); "choice" marks desk-scale or unstated values that
are free to tune. ``print-config`` echoes the tag per key, and its output
re-parses to the identical tree.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .adversarial import GanConfig, PoseSampler
from .csae import CsaeConfig
from .editing import EditConfig
from .renderer import RendererConfig
from .texgen import TexGenConfig


@dataclass(frozen=True)
class Key:
    default: object
    kind: type
    provenance: str              # "fixed" or "choice"
    check: object = None         # optional predicate


def _positive(v):
    return v > 0


def _non_negative(v):
    return v >= 0


def _unit(v):
    return 0 < v <= 1


KEYS: dict[str, Key] = {
    "geometry.uv_level": Key(4, int, "fixed", lambda v: 0 <= v <= 6),
    "geometry.sample_count": Key(4096, int, "fixed", _positive),
    "geometry.target_pool": Key(4096, int, "choice", _positive),
    "geometry.shape_margin": Key(0.7, float, "choice", _unit),
    "geometry.encoder_k": Key(20, int, "fixed", _positive),
    "geometry.latent_dim": Key(256, int, "fixed", _positive),
    "geometry.decoder_width": Key(128, int, "choice", _positive),
    "geometry.decoder_k": Key(20, int, "choice", _positive),
    "geometry.lr": Key(1e-3, float, "choice", _positive),
    "dpsr.resolution": Key(128, int, "fixed", lambda v: v >= 4 and v & (v - 1) == 0),
    "dpsr.sigma": Key(2.0, float, "choice", _non_negative),
    "dpsr.lambda": Key(1.0, float, "choice", _non_negative),
    "render.gamma": Key(5e-4, float, "fixed", _positive),
    "render.coarse_samples": Key(256, int, "fixed", _positive),
    "render.shading_points": Key(3, int, "fixed", _positive),
    "render.knn": Key(4, int, "fixed", _positive),
    "render.weight_threshold": Key(1e-4, float, "choice", _positive),
    "render.transmittance_mode": Key("product", str, "choice",
                                     lambda v: v in ("product", "expsum")),
    "render.use_view_dirs": Key(True, bool, "choice"),
    "render.near": Key(0.0, float, "choice"),
    "render.far": Key(0.0, float, "choice"),
    "texgen.z_dim": Key(64, int, "choice", _positive),
    "texgen.n_freq": Key(6, int, "choice", _positive),
    "texgen.layers": Key(6, int, "choice", lambda v: v >= 2),
    "texgen.hidden": Key(128, int, "choice", _positive),
    "texgen.feature_dim": Key(32, int, "fixed", _positive),
    "texgen.demodulate": Key(True, bool, "choice"),
    "texgen.architecture": Key("cips-uv", str, "choice",
                               lambda v: v in ("cips-uv", "cips-2d-equirect",
                                               "stylegan2-conv")),
    "gan.patch_resolution": Key(32, int, "choice", lambda v: v % 16 == 0),
    "gan.min_scale": Key(0.125, float, "choice", _unit),
    "gan.beta_start": Key(1e-4, float, "fixed", _positive),
    "gan.beta_end": Key(0.8, float, "fixed", _positive),
    "gan.anneal_images": Key(10_000, int, "choice", _positive),
    "gan.blur_sigma": Key(-1.0, float, "fixed"),     # < 0: auto 60 * res / 128
    "gan.blur_horizon": Key(5_000, int, "choice", _positive),
    "gan.r1_weight": Key(1.0, float, "choice", _non_negative),
    "gan.lr": Key(2e-3, float, "choice", _positive),
    "gan.pose_radius": Key(1.3, float, "choice", _positive),
    "gan.pose_fov": Key(45.0, float, "choice", lambda v: 0 < v < 120),
    "gan.image_size": Key(128, int, "choice", _positive),
    "edit.steps": Key(300, int, "choice", _positive),
    "edit.lr": Key(1e-2, float, "choice", _positive),
    "edit.drift_weight": Key(0.1, float, "choice", _non_negative),
}


class ConfigError(ValueError):
    pass


def _parse_value(raw: str, kind: type, key: str, lineno: int):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(
            f"line {lineno}: cannot parse {raw!r} as {kind.__name__} for {key}") from None


@dataclass
class Config:
    values: dict[str, object]

    def __getitem__(self, key: str):
        return self.values[key]

    def csae(self) -> CsaeConfig:
        v = self.values
        return CsaeConfig(
            uv_level=v["geometry.uv_level"], sample_count=v["geometry.sample_count"],
            target_pool=v["geometry.target_pool"], encoder_k=v["geometry.encoder_k"],
            latent_dim=v["geometry.latent_dim"],
            decoder_width=v["geometry.decoder_width"], decoder_k=v["geometry.decoder_k"],
            dpsr_resolution=v["dpsr.resolution"], dpsr_sigma=v["dpsr.sigma"],
            lambda_dpsr=v["dpsr.lambda"], shape_margin=v["geometry.shape_margin"],
            lr=v["geometry.lr"])

    def renderer(self) -> RendererConfig:
        v = self.values
        return RendererConfig(
            gamma=v["render.gamma"], coarse_samples=v["render.coarse_samples"],
            shading_points=v["render.shading_points"], knn=v["render.knn"],
            near=v["render.near"], far=v["render.far"],
            weight_threshold=v["render.weight_threshold"],
            transmittance_mode=v["render.transmittance_mode"],
            use_view_dirs=v["render.use_view_dirs"])

    def texgen(self) -> TexGenConfig:
        v = self.values
        return TexGenConfig(
            uv_level=v["geometry.uv_level"], z_dim=v["texgen.z_dim"],
            style_dim=v["texgen.z_dim"], n_freq=v["texgen.n_freq"],
            hidden=v["texgen.hidden"], n_layers=v["texgen.layers"],
            feature_dim=v["texgen.feature_dim"], demodulate=v["texgen.demodulate"],
            architecture=v["texgen.architecture"])

    def gan(self) -> GanConfig:
        v = self.values
        return GanConfig(
            patch_resolution=v["gan.patch_resolution"], min_scale=v["gan.min_scale"],
            beta_start=v["gan.beta_start"], beta_end=v["gan.beta_end"],
            anneal_images=v["gan.anneal_images"], blur_sigma0=v["gan.blur_sigma"],
            blur_horizon=v["gan.blur_horizon"], r1_weight=v["gan.r1_weight"],
            lr_g=v["gan.lr"], lr_d=v["gan.lr"])

    def pose_sampler(self) -> PoseSampler:
        v = self.values
        return PoseSampler(radius=v["gan.pose_radius"], fov_deg=v["gan.pose_fov"],
                           image_size=v["gan.image_size"])

    def edit(self) -> EditConfig:
        v = self.values
        return EditConfig(steps=v["edit.steps"], lr=v["edit.lr"],
                          drift_weight=v["edit.drift_weight"])


def default_config() -> Config:
    return Config(values={k: spec.default for k, spec in KEYS.items()})


def parse_config(text: str) -> Config:
    """Parse ``key = value`` lines; unknown keys and bad values are hard
    errors reported with their line number."""
    values = {k: spec.default for k, spec in KEYS.items()}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, raw_val = line.partition("=")
        key = key.strip()
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        spec = KEYS[key]
        val = _parse_value(raw_val, spec.kind, key, lineno)
        if spec.check is not None and not spec.check(val):
            raise ConfigError(f"line {lineno}: invalid value {val!r} for {key}")
        values[key] = val
    return Config(values=values)


def load_config(path=None) -> Config:
    if path is None:
        return default_config()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(p.read_text())


def format_config(cfg: Config) -> str:
    """Round-trippable dump; every key carries its provenance tag."""
    lines = []
    for key in sorted(KEYS):
        val = cfg.values[key]
        if isinstance(val, bool):
            rendered = "true" if val else "false"
        elif isinstance(val, float):
            rendered = repr(val)
        else:
            rendered = str(val)
        lines.append(f"{key} = {rendered}  # {KEYS[key].provenance}")
    return "\n".join(lines) + "\n"
