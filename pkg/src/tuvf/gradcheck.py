"""Central finite-difference gradient checking, plus one canonical scalar
test case per registered op kind. Used by the test suite and the fast
``selfcheck`` battery."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import dpsr
from .autodiff import Tensor, backward, tape


class GradientMismatch(AssertionError):
    pass


def leaf(arr, requires_grad: bool = True) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


def central_fd(fn, params, index, coord, h):
    base = params[index].data
    saved = base[coord]
    base[coord] = saved + h
    f_plus = fn(params).item()
    base[coord] = saved - h
    f_minus = fn(params).item()
    base[coord] = saved
    return (f_plus - f_minus) / (2.0 * h)


def check_gradients(fn, params, h=1e-5, rel_tol=1e-4, abs_floor=1e-6,
                    max_checks_per_param=8, rng=None) -> int:
    """Compare analytic gradients of scalar ``fn(params)`` against central
    finite differences; raises GradientMismatch on the first failure.

    A coordinate passes when |fd - analytic| < abs_floor or its relative
    error (against the larger magnitude) is below rel_tol. Use float64
    leaves for tight tolerances. Returns the number of coordinates checked.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    with tape():
        loss = fn(params)
        backward(loss)
    checked = 0
    for i, p in enumerate(params):
        n = p.data.size
        picks = range(n) if n <= max_checks_per_param else sorted(
            rng.choice(n, size=max_checks_per_param, replace=False))
        grad = np.zeros(p.shape) if p.grad is None else p.grad
        for flat in picks:
            coord = np.unravel_index(flat, p.shape)
            fd = central_fd(fn, params, i, coord, h)
            an = float(grad[coord])
            diff = abs(fd - an)
            scale = max(abs(fd), abs(an))
            if not (diff < abs_floor or diff / scale < rel_tol):
                raise GradientMismatch(
                    f"gradient mismatch param {i} coord {coord}: analytic "
                    f"{an:.8e} vs fd {fd:.8e} (rel {diff / max(scale, 1e-300):.2e})")
            checked += 1
    return checked


def _away_from_zero(rng, shape, low=0.2, high=1.5):
    mag = rng.uniform(low, high, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return mag * sign


def _splat_case(rng):
    n = 12
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    pts = leaf(0.3 * v)
    vals = leaf(rng.normal(size=(n, 3)))
    probe = Tensor(rng.normal(size=(8, 8, 8, 3)))
    return (lambda ps: ad.sum_(dpsr.splat_oriented_points(ps[0], ps[1], 8) * probe),
            [pts, vals])


def _solve_case(rng):
    vgrid = leaf(rng.normal(size=(8, 8, 8, 3)))
    probe = Tensor(rng.normal(size=(8, 8, 8)))
    return (lambda ps: ad.sum_(dpsr.poisson_solve_spectral(ps[0], 1.0) * probe),
            [vgrid])


def _query_case(rng):
    grid = leaf(rng.normal(size=(8, 8, 8)))
    pts = rng.uniform(-0.45, 0.45, size=(6, 3))
    return lambda ps: ad.sum_(dpsr.query_indicator(ps[0], pts)), [grid]


def op_case(name: str, rng: np.random.Generator):
    """Scalar-valued FD case for one op kind (raises KeyError if unknown)."""
    a = leaf(_away_from_zero(rng, (3, 4)))
    b = leaf(_away_from_zero(rng, (3, 4)))
    pos = leaf(rng.uniform(0.3, 2.0, size=(3, 4)))
    cases = {
        "add": (lambda ps: ad.sum_(ps[0] + ps[1]), [a, b]),
        "sub": (lambda ps: ad.sum_((ps[0] - ps[1]) * ps[1]), [a, b]),
        "mul": (lambda ps: ad.sum_(ps[0] * ps[1]), [a, b]),
        "div": (lambda ps: ad.sum_(ps[0] / ps[1]), [a, pos]),
        "neg": (lambda ps: ad.sum_(-ps[0] * ps[0]), [a]),
        "matmul": (lambda ps: ad.sum_(ad.matmul(ps[0], ps[1])),
                   [leaf(rng.normal(size=(3, 5))), leaf(rng.normal(size=(5, 2)))]),
        "exp": (lambda ps: ad.sum_(ad.exp(ps[0])), [a]),
        "log": (lambda ps: ad.sum_(ad.log(ps[0])), [pos]),
        "sqrt": (lambda ps: ad.sum_(ad.sqrt(ps[0])), [pos]),
        "power": (lambda ps: ad.sum_(ad.power(ps[0], 3.0)), [pos]),
        "abs": (lambda ps: ad.sum_(ad.abs_(ps[0])), [a]),
        "sigmoid": (lambda ps: ad.sum_(ad.sigmoid(ps[0])), [a]),
        "tanh": (lambda ps: ad.sum_(ad.tanh(ps[0])), [a]),
        "relu": (lambda ps: ad.sum_(ad.relu(ps[0]) * ps[0]), [a]),
        "leaky_relu": (lambda ps: ad.sum_(ad.leaky_relu(ps[0], 0.2) * ps[0]), [a]),
        "softplus": (lambda ps: ad.sum_(ad.softplus(ps[0])), [a]),
        "sum": (lambda ps: ad.sum_(ad.sum_(ps[0], axis=1) * ad.sum_(ps[1], axis=1)),
                [a, b]),
        "mean": (lambda ps: ad.sum_(ad.mean_(ps[0], axis=0) * ad.mean_(ps[1], axis=0)),
                 [a, b]),
        "max": (lambda ps: ad.sum_(ad.max_(ps[0], axis=1) * ad.max_(ps[1], axis=1)),
                [a, b]),
        "norm": (lambda ps: ad.sum_(ad.norm(ps[0], axis=1)), [a]),
        "broadcast": (lambda ps: ad.sum_(ad.broadcast_to(ps[0], (5, 3)) * 0.5),
                      [leaf(_away_from_zero(rng, (1, 3)))]),
        "reshape": (lambda ps: ad.sum_(ad.reshape(ps[0], (12,)) * ad.reshape(ps[1], (12,))),
                    [a, b]),
        "transpose": (lambda ps: ad.sum_(ad.transpose(ps[0]) * ad.transpose(ps[1], (1, 0))),
                      [a, b]),
        "concat": (lambda ps: ad.sum_(ad.concat([ps[0], ps[1]], axis=0)
                                      * ad.concat([ps[1], ps[0]], axis=0)), [a, b]),
        "slice": (lambda ps: ad.sum_(ps[0][1:, :2] * ps[1][:2, 2:]), [a, b]),
        "gather": (lambda ps: ad.sum_(ad.gather_rows(ps[0], np.array([0, 2, 2, 1]))
                                      * ad.gather_rows(ps[1], np.array([1, 1, 0, 2]))),
                   [a, b]),
        "segment_sum": (lambda ps: ad.sum_(ad.segment_sum(ps[0], np.array([0, 1, 0]), 2)
                                           * ad.segment_sum(ps[1], np.array([1, 1, 0]), 2)),
                        [a, b]),
        "trilinear_splat": _splat_case(rng),
        "poisson_solve": _solve_case(rng),
        "trilinear_query": _query_case(rng),
    }
    return cases[name]


def check_all_ops(seed: int = 42, max_checks_per_param: int = 8) -> int:
    """FD-check every registered op kind; returns coordinates checked."""
    total = 0
    for kind in sorted(ad.OP_KINDS):
        fn, params = op_case(kind, np.random.default_rng(seed))
        h = 1e-4 if "poisson" in kind else 1e-5
        total += check_gradients(fn, params, h=h,
                                 max_checks_per_param=max_checks_per_param)
    return total
