"""Fast invariant battery behind the ``selfcheck`` CLI command.

Each check prints one deterministic PASS/FAIL line; the battery is seeded,
touches every numeric subsystem, and finishes well under a minute.
"""

from __future__ import annotations

import io
import os
import tempfile

import numpy as np

from . import autodiff as ad
from . import dpsr
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .config import default_config, format_config, parse_config
from .geometry import KnnIndex, build_icosphere, chamfer_distance
from .gradcheck import check_all_ops
from .renderer import ray_weights


def _check_op_gradients(seed):
    n = check_all_ops(seed=seed, max_checks_per_param=4)
    return f"{n} coordinates across {len(ad.OP_KINDS)} op kinds"


def _check_density(seed):
    from .renderer import density

    grid = dpsr.IndicatorGrid(values=np.zeros((16, 16, 16), np.float32))
    val = density(grid, np.zeros((1, 3)), gamma=5e-4)[0]
    if abs(val - 1000.0) > 1e-6:
        raise AssertionError(f"sigma(0) = {val}, want 1000")
    levels = np.linspace(-0.02, 0.02, 41)
    sig = [float(density(dpsr.IndicatorGrid(
        values=np.full((16, 16, 16), lv, np.float32)),
        np.zeros((1, 3)), 5e-4)[0]) for lv in levels]
    if not all(a >= b for a, b in zip(sig, sig[1:])):
        raise AssertionError("density not monotone decreasing in the indicator")
    return "sigma(0) = 1000, monotone over sweep"


def _check_poisson(seed):
    r = 32
    x = -0.5 + np.arange(r) / r
    X = np.broadcast_to(x[:, None, None], (r, r, r))
    chi_star = np.cos(2 * np.pi * X)
    vec = np.zeros((r, r, r, 3))
    vec[..., 0] = -2 * np.pi * np.sin(2 * np.pi * X)
    chi = dpsr.poisson_solve_spectral(vec, sigma_grid=0.0).data
    rel = np.abs(chi - chi_star).max() / np.abs(chi_star).max()
    if rel >= 1e-5:
        raise AssertionError(f"eigenfunction recovery rel err {rel:.2e}")

    rng = np.random.default_rng(seed)
    v = rng.normal(size=(3000, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    field = dpsr.reconstruct_indicator((0.3 * v).astype(np.float32),
                                       v.astype(np.float32), 32, 2.0)
    grid = dpsr.IndicatorGrid(values=field.data)
    inside = dpsr.query_indicator(grid, np.array([[0.0, 0.0, 0.0], [0.1, 0.0, 0.0],
                                                  [0.0, -0.1, 0.05]])).data
    outside = dpsr.query_indicator(grid, np.array([[0.45, 0.45, 0.45],
                                                   [-0.45, 0.4, 0.0],
                                                   [0.0, 0.0, 0.47]])).data
    if not (np.all(inside < 0) and np.all(outside > 0)):
        raise AssertionError("sphere sign convention violated")
    return f"cos recovery rel err {rel:.1e}; sphere signs correct"


def _check_ray_invariants(seed):
    rng = np.random.default_rng(seed)
    for _ in range(200):
        n = 64
        sigma = rng.uniform(0, 50, size=(1, n)) * rng.integers(0, 2, size=(1, n))
        delta = np.full((1, n), 0.01)
        alpha, trans, w = ray_weights(sigma, delta, "product")
        if np.any(np.diff(trans[0]) > 1e-12) or trans[0, 0] != 1.0:
            raise AssertionError("transmittance not non-increasing from 1")
        if np.any((alpha < 0) | (alpha > 1)) or np.any(w < 0):
            raise AssertionError("alpha or weight out of range")
        if w.sum() > 1 + 1e-5:
            raise AssertionError(f"weight sum {w.sum()} > 1")
    sigma = np.zeros((1, 256))
    sigma[0, 100:111] = 1e6
    _, _, w = ray_weights(sigma, np.full((1, 256), 0.01), "product")
    if w[0, 100] <= 0.99:
        raise AssertionError("opaque slab: first in-slab sample underweighted")
    return "200 profiles; opaque slab concentrates on first hit"


def _check_fusion_weights(seed):
    d = np.array([1.0, 3.0])
    rho = 1.0 / np.maximum(d, 1e-8)
    w = rho / rho.sum()
    if abs(w[0] - 0.75) > 1e-6 or abs(w[1] - 0.25) > 1e-6:
        raise AssertionError(f"distance (1,3) weights {w}")
    rng = np.random.default_rng(seed)
    d = rng.uniform(0.01, 1.0, size=(50, 4))
    rho = 1.0 / np.maximum(d, 1e-8)
    w = rho / rho.sum(axis=1, keepdims=True)
    if np.abs(w.sum(axis=1) - 1).max() > 1e-6:
        raise AssertionError("fusion weights do not sum to 1")
    return "inverse-distance weights normalized; (1,3) -> (0.75, 0.25)"


def _check_icosphere(seed):
    for level, want in ((0, 12), (2, 162), (4, 2562)):
        sphere = build_icosphere(level)
        if sphere.num_vertices != want:
            raise AssertionError(f"level {level}: {sphere.num_vertices} vertices")
        if np.abs(np.linalg.norm(sphere.vertices, axis=1) - 1).max() > 1e-6:
            raise AssertionError("vertices not unit norm")
    return "levels 0/2/4 counts and unit norms"


def _check_knn(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(200, 3))
    index = KnnIndex(pts)
    q = rng.normal(size=(16, 3))
    idx, dist = index.query(q, 4)
    for row in range(16):
        d = np.linalg.norm(pts - q[row], axis=1)
        want = np.lexsort((np.arange(200), d))[:4]
        if not np.array_equal(idx[row], want):
            raise AssertionError("knn differs from brute force")
    return "exact against brute force on 16 queries"


def _check_chamfer(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(32, 3))
    if chamfer_distance(a, a.copy()).item() > 1e-12:
        raise AssertionError("chamfer(A, A) != 0")
    val = chamfer_distance(np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]])).item()
    if abs(val - 2.0) > 1e-6:
        raise AssertionError(f"unit-offset chamfer {val} != 2")
    return "identity and unit-offset cases"


def _check_checkpoint(seed):
    rng = np.random.default_rng(seed)
    entries = {"a.w": rng.normal(size=(4, 3)).astype(np.float32),
               "b.bias": rng.normal(size=7).astype(np.float32)}
    with tempfile.TemporaryDirectory() as tmp:
        p1 = os.path.join(tmp, "one.tuvf")
        p2 = os.path.join(tmp, "two.tuvf")
        save_checkpoint(entries, p1)
        again = load_checkpoint(p1)
        save_checkpoint(again, p2)
        with open(p1, "rb") as f1, open(p2, "rb") as f2:
            if f1.read() != f2.read():
                raise AssertionError("checkpoint round trip not byte-identical")
    return "save -> load -> save byte-identical"


def _check_config(seed):
    cfg = default_config()
    text = format_config(cfg)
    again = parse_config(text)
    if again.values != cfg.values:
        raise AssertionError("config round trip changed values")
    return "print-config output re-parses identically"


CHECKS = [
    ("autodiff-op-gradients", _check_op_gradients),
    ("density-formula", _check_density),
    ("poisson-recovery-and-signs", _check_poisson),
    ("ray-invariants", _check_ray_invariants),
    ("fusion-weights", _check_fusion_weights),
    ("icosphere", _check_icosphere),
    ("knn-exactness", _check_knn),
    ("chamfer", _check_chamfer),
    ("checkpoint-roundtrip", _check_checkpoint),
    ("config-roundtrip", _check_config),
]


def run_selfcheck(seed: int = 0, stream=None) -> bool:
    """Run the battery; prints one line per check, returns overall pass."""
    import sys

    out = stream or sys.stdout
    ok = True
    for name, fn in CHECKS:
        try:
            detail = fn(seed)
            print(f"PASS {name}: {detail}", file=out)
        except Exception as err:          # report and continue
            ok = False
            print(f"FAIL {name}: {err}", file=out)
    print("selfcheck: " + ("all checks passed" if ok else "FAILURES detected"),
          file=out)
    return ok
