"""Shared neural building blocks: MLPs, modulated FC layers, Fourier
positional encoding, adaptive instance normalization, and EdgeConv.

Parameters live in flat ``dict[str, Tensor]`` containers with dotted names
so they serialize directly into the checkpoint manifest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import KnnIndex

LEAKY_SLOPE = 0.2

_ACTIVATIONS = {
    "relu": ad.relu,
    "leaky_relu": lambda t: ad.leaky_relu(t, LEAKY_SLOPE),
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "softplus": ad.softplus,
    "none": lambda t: t,
}


def _activation(name: str):
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    """Centered uniform init scaled by 1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def scoped(prefix: str, params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {f"{prefix}.{k}": v for k, v in params.items()}


# ---------------------------------------------------------------------------
# plain MLP

@dataclass(frozen=True)
class MlpSpec:
    """Layer widths include input and output, e.g. (35, 64, 32)."""

    widths: tuple[int, ...]
    activation: str = "leaky_relu"
    final_activation: str = "none"

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("MlpSpec needs at least one layer")
        if any(w <= 0 for w in self.widths):
            raise ValueError("MlpSpec widths must be positive")


def init_mlp(spec: MlpSpec, rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for i, (fi, fo) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        params[f"w{i}"] = Tensor(uniform_init(rng, fi, (fi, fo)), requires_grad=True)
        params[f"b{i}"] = Tensor(np.zeros(fo, dtype=np.float32), requires_grad=True)
    return params


def mlp_forward(spec: MlpSpec, params: dict[str, Tensor], x: Tensor) -> Tensor:
    if x.shape[-1] != spec.widths[0]:
        raise ValueError(f"mlp input width {x.shape[-1]} != {spec.widths[0]}")
    act = _activation(spec.activation)
    n_layers = len(spec.widths) - 1
    for i in range(n_layers):
        x = ad.matmul(x, params[f"w{i}"]) + params[f"b{i}"]
        if i < n_layers - 1:
            x = act(x)
    return _activation(spec.final_activation)(x)


# ---------------------------------------------------------------------------
# Fourier positional encoding

@dataclass(frozen=True)
class FourierEncoding:
    """Octave sin/cos bank; inputs are expected in [-1, 1] and are treated
    as constants (no gradient path through the encoded coordinates)."""

    n_freq: int
    include_input: bool = True

    def out_dim(self, in_dim: int) -> int:
        return in_dim * (2 * self.n_freq + int(self.include_input))


def fourier_encode(enc: FourierEncoding, x) -> Tensor:
    xv = x.data if isinstance(x, Tensor) else np.asarray(x)
    xv = np.atleast_2d(xv).astype(np.float64)
    parts = [xv] if enc.include_input else []
    for k in range(enc.n_freq):
        arg = (2.0 ** k) * np.pi * xv
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return Tensor(np.concatenate(parts, axis=1).astype(np.float32))


# ---------------------------------------------------------------------------
# modulated fully connected layer

@dataclass(frozen=True)
class ModFcSpec:
    in_dim: int
    out_dim: int
    style_dim: int
    demodulate: bool = True


def init_modfc(spec: ModFcSpec, rng: np.random.Generator) -> dict[str, Tensor]:
    # Style affine starts at zero so modulation is neutral (s = 1) at init.
    return {
        "w": Tensor(uniform_init(rng, spec.in_dim, (spec.in_dim, spec.out_dim)),
                    requires_grad=True),
        "b": Tensor(np.zeros(spec.out_dim, dtype=np.float32), requires_grad=True),
        "aw": Tensor(np.zeros((spec.style_dim, spec.in_dim), dtype=np.float32),
                     requires_grad=True),
        "ab": Tensor(np.zeros(spec.in_dim, dtype=np.float32), requires_grad=True),
    }


def modfc_forward(spec: ModFcSpec, params: dict[str, Tensor],
                  x: Tensor, style: Tensor) -> Tensor:
    """y = ((W * s) / demod) x + b with s = affine(style) + 1.

    The style vector is shared by every row of ``x``; demodulation divides
    each output column by the L2 norm of its modulated weights
    (epsilon 1e-8 inside the square root).
    """
    if x.shape[-1] != spec.in_dim:
        raise ValueError(f"modfc input width {x.shape[-1]} != {spec.in_dim}")
    if style.shape[-1] != spec.style_dim:
        raise ValueError(f"style width {style.shape[-1]} != {spec.style_dim}")
    s_row = ad.matmul(ad.reshape(style, (1, spec.style_dim)), params["aw"])
    s = ad.reshape(s_row, (spec.in_dim,)) + params["ab"] + Tensor(np.float32(1.0))
    w_mod = params["w"] * ad.reshape(s, (spec.in_dim, 1))
    if spec.demodulate:
        denom = ad.sqrt(ad.sum_(w_mod * w_mod, axis=0, keepdims=True)
                        + Tensor(np.float32(1e-8)))
        w_mod = w_mod / denom
    return ad.matmul(x, w_mod) + params["b"]


# ---------------------------------------------------------------------------
# adaptive instance normalization

def adain(content: Tensor, style_mean: Tensor, style_std: Tensor) -> Tensor:
    """Standardize ``content`` per channel over the batch, then rescale and
    shift by the style stats. Std is floored at 1e-5."""
    if content.shape[0] < 2:
        raise ValueError("adain needs a batch of at least 2 (variance undefined)")
    mu = ad.mean_(content, axis=0, keepdims=True)
    centered = content - mu
    var = ad.mean_(centered * centered, axis=0, keepdims=True)
    std = ad.sqrt(var + Tensor(np.float32(1e-10)))
    return centered / std * style_std + style_mean


def softmax(x: Tensor, axis: int) -> Tensor:
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    e = ad.exp(x - shift)
    return e / ad.sum_(e, axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# EdgeConv graph layer

@dataclass(frozen=True)
class EdgeConvSpec:
    in_dim: int
    out_dim: int
    k: int = 20
    attention: bool = False


def init_edgeconv(spec: EdgeConvSpec, rng: np.random.Generator) -> dict[str, Tensor]:
    params = {
        "w": Tensor(uniform_init(rng, 2 * spec.in_dim, (2 * spec.in_dim, spec.out_dim)),
                    requires_grad=True),
        "b": Tensor(np.zeros(spec.out_dim, dtype=np.float32), requires_grad=True),
    }
    if spec.attention:
        params["attw"] = Tensor(uniform_init(rng, 2 * spec.in_dim, (2 * spec.in_dim, 1)),
                                requires_grad=True)
        params["attb"] = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
    return params


_NEIGHBOR_CACHE: dict[tuple[bytes, int], np.ndarray] = {}
_NEIGHBOR_CACHE_MAX = 64


def neighbor_indices(base: np.ndarray, k: int) -> np.ndarray:
    """Self-excluded kNN indices [n, k], memoized on the array contents
    (decoder UV coordinates and per-shape encoder inputs repeat verbatim)."""
    import hashlib

    key = (hashlib.blake2b(np.ascontiguousarray(base).tobytes(),
                           digest_size=16).digest(), k)
    hit = _NEIGHBOR_CACHE.get(key)
    if hit is not None:
        return hit
    idx, _ = KnnIndex(base).query(base, k + 1)
    nbr = idx[:, 1:]                                   # drop self
    if len(_NEIGHBOR_CACHE) >= _NEIGHBOR_CACHE_MAX:
        _NEIGHBOR_CACHE.clear()
    _NEIGHBOR_CACHE[key] = nbr
    return nbr


def edgeconv_forward(spec: EdgeConvSpec, params: dict[str, Tensor], feats: Tensor,
                     neighbor_source: np.ndarray | None = None) -> Tensor:
    """Per point, build [h_i, h_j - h_i] over its k nearest neighbors, run a
    shared linear + LeakyReLU, and max-pool over neighbors.

    Neighbors come from feature space of the current values (recomputed
    every forward), or from ``neighbor_source`` coordinates when given.
    With ``attention``, softmax weights over the k edge features scale the
    transformed edges before pooling.
    """
    n = feats.shape[0]
    if n <= spec.k:
        raise ValueError(f"edgeconv needs more than k={spec.k} points, got {n}")
    base = feats.data if neighbor_source is None else np.asarray(neighbor_source)
    nbr = neighbor_indices(base, spec.k)

    f = feats.shape[1]
    center = ad.broadcast_to(ad.reshape(feats, (n, 1, f)), (n, spec.k, f))
    neighbors = ad.reshape(ad.gather_rows(feats, nbr.reshape(-1)), (n, spec.k, f))
    edges = ad.reshape(ad.concat([center, neighbors - center], axis=2),
                       (n * spec.k, 2 * f))
    m = ad.leaky_relu(ad.matmul(edges, params["w"]) + params["b"], LEAKY_SLOPE)
    m = ad.reshape(m, (n, spec.k, spec.out_dim))
    if spec.attention:
        logits = ad.matmul(edges, params["attw"]) + params["attb"]
        att = softmax(ad.reshape(logits, (n, spec.k)), axis=1)
        m = m * ad.reshape(att, (n, spec.k, 1))
    return ad.max_(m, axis=1)
