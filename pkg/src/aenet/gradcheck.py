"""Central finite-difference verification of the autodiff tape.

Each registered op is wrapped in a scalar loss and checked at random
points; the composite check runs the full model (prior, AE blocks,
attention, loss) on a small episode.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .losses import LossConfig, bce_loss, dice_loss, total_loss
from .prior import final_prior, prior_pack
from .synth import GeneratorConfig, draw_episode
from .tensorcore import LinearLayer
from .xattn import ToyModel, model_forward


def rel_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Largest ``|a - n| / max(floor, |a| + |n|)`` over all entries."""
    a, n = np.asarray(analytic, dtype=float), np.asarray(numeric, dtype=float)
    return float(np.max(np.abs(a - n) / np.maximum(floor, np.abs(a) + np.abs(n)), initial=0.0))


def numeric_grad(fn, arrays, eps: float = 1e-4, entries=None) -> list[np.ndarray]:
    """Central differences of scalar ``fn()`` w.r.t. each array, perturbed in place.

    ``entries`` optionally restricts the check to a list of ``(array index,
    multi-index)`` pairs; other gradient entries are left at zero.
    """
    grads = [np.zeros_like(a) for a in arrays]
    if entries is None:
        entries = [(i, idx) for i, a in enumerate(arrays) for idx in np.ndindex(a.shape)]
    for i, idx in entries:
        a = arrays[i]
        old = a[idx]
        a[idx] = old + eps
        fp = fn()
        a[idx] = old - eps
        fm = fn()
        a[idx] = old
        grads[i][idx] = (fp - fm) / (2 * eps)
    return grads


def _weights(shape, seed=7):
    return np.random.default_rng(seed).normal(size=shape)


def _dot(x, w):
    return tc.sum(tc.mul(x, w))


# name -> (builder taking Vars and returning a scalar Var, input shapes, sampling range)
OPS = {
    "add": (lambda a, b: _dot(tc.add(a, b), _weights((3, 4))), [(3, 4), (4,)], (-1, 1)),
    "sub": (lambda a, b: _dot(tc.sub(a, b), _weights((3, 4))), [(3, 4), (3, 1)], (-1, 1)),
    "mul": (lambda a, b: _dot(tc.mul(a, b), _weights((2, 5))), [(2, 5), (2, 5)], (-1, 1)),
    "scale": (lambda a: _dot(tc.scale(a, -1.7), _weights(4)), [(4,)], (-1, 1)),
    "reciprocal": (lambda a: _dot(tc.reciprocal(a), _weights(3)), [(3,)], (0.5, 2)),
    "log": (lambda a: _dot(tc.log(a), _weights(5)), [(5,)], (0.2, 2)),
    "exp": (lambda a: _dot(tc.exp(a), _weights(5)), [(5,)], (-1, 1)),
    "sigmoid": (lambda a: _dot(tc.sigmoid(a), _weights(5)), [(5,)], (-3, 3)),
    "relu": (lambda a: _dot(tc.relu(a), _weights(6)), [(6,)], (-1, 1)),
    "clip": (lambda a: _dot(tc.clip(a, -0.5, 0.5), _weights(6)), [(6,)], (-1, 1)),
    "sum": (lambda a: tc.mul(tc.sum(a), tc.sum(a)), [(2, 3)], (-1, 1)),
    "mean": (lambda a: _dot(tc.mean(a, axis=1), _weights(2)), [(2, 3)], (-1, 1)),
    "matmul": (lambda a, b: _dot(tc.matmul(a, b), _weights((3, 2))), [(3, 4), (4, 2)], (-1, 1)),
    "matvec": (lambda a, v: _dot(tc.matmul(a, v), _weights(3)), [(3, 4), (4,)], (-1, 1)),
    "vecmat": (lambda v, a: _dot(tc.matmul(v, a), _weights(4)), [(3,), (3, 4)], (-1, 1)),
    "transpose": (lambda a: _dot(tc.transpose(a), _weights((4, 3))), [(3, 4)], (-1, 1)),
    "reshape": (lambda a: _dot(tc.reshape(a, (2, 6)), _weights((2, 6))), [(3, 4)], (-1, 1)),
    "concat": (lambda a, b: _dot(tc.concat([a, b], axis=1), _weights((2, 5))), [(2, 3), (2, 2)], (-1, 1)),
    "concat_channels": (
        lambda a, b: _dot(tc.concat_channels(a, b), _weights((3, 2, 2))), [(1, 2, 2), (2, 2, 2)], (-1, 1)
    ),
    "take_rows": (lambda a: _dot(tc.take_rows(a, [0, 2, 2]), _weights((3, 2))), [(3, 2)], (-1, 1)),
    "take_cols": (lambda a: _dot(tc.take_cols(a, 1), _weights(3)), [(3, 2)], (-1, 1)),
    "broadcast_rows": (lambda v: _dot(tc.broadcast_rows(v, 3), _weights((3, 2))), [(2,)], (-1, 1)),
    "cosine": (lambda u, v: tc.cosine(u, v), [(5,), (5,)], (-1, 1)),
    "cosine_rows": (lambda x, p: _dot(tc.cosine_rows(x, p), _weights(5)), [(5, 3), (3,)], (-1, 1)),
    "softmax": (lambda a: _dot(tc.softmax(a), _weights(4)), [(4,)], (-2, 2)),
    "softmax_rows": (lambda a: _dot(tc.softmax(a, axis=1), _weights((3, 4))), [(3, 4)], (-2, 2)),
    "minmax_norm": (lambda a: _dot(tc.minmax_norm(a), _weights(5)), [(5,)], (-1, 1)),
    "layer_norm": (lambda x, g, b: _dot(tc.layer_norm(x, g, b), _weights((3, 4))), [(3, 4), (4,), (4,)], (-1, 1)),
    "linear": (
        lambda w, b, x: _dot(tc.linear_forward(LinearLayer(w, b), x), _weights((5, 3))), [(3, 4), (3,), (5, 4)], (-1, 1)
    ),
    "avg_pool": (lambda a: _dot(tc.avg_pool(a, 2), _weights((2, 2, 2))), [(2, 4, 4)], (-1, 1)),
    "upsample_nearest": (lambda a: _dot(tc.upsample_nearest(a, 2), _weights((4, 4))), [(2, 2)], (-1, 1)),
    "prior_pack": (
        lambda q, s: _dot(final_prior(prior_pack(q, [(s, np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))])), _weights((2, 3, 3))),
        [(3, 3, 3), (3, 3, 3)],
        (-1, 1),
    ),
    "dice_loss": (lambda p: dice_loss(p, np.array([[1.0, 0.0], [1.0, 1.0]])), [(2, 2)], (0.05, 0.95)),
    "bce_loss": (lambda p: bce_loss(p, np.array([[1.0, 0.0], [0.3, 1.0]])), [(2, 2)], (0.05, 0.95)),
}


KINK_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    points: int
    max_rel_error: float
    passed: bool
    skipped: int = 0


def check_op(name: str, rng: np.random.Generator, points: int = 20, eps: float = 1e-4, tol: float = 1e-4) -> CheckResult:
    build, shapes, (lo, hi) = OPS[name]
    worst = 0.0
    for _ in range(points):
        params = [tc.parameter(rng.uniform(lo, hi, size=s)) for s in shapes]
        tc.backward(build(*params))
        num = numeric_grad(lambda: build(*params).item(), [p.value for p in params], eps)
        worst = max(worst, *(rel_error(p.grad, n) for p, n in zip(params, num)))
    return CheckResult(name, points, worst, worst < tol)


def check_composite(seed: int = 0, points: int = 20, eps: float = 1e-4, tol: float = 1e-4) -> CheckResult:
    """Prior -> AE -> attention -> loss on a small episode at ``points`` random parameter entries.

    Entries whose difference quotient has not converged (estimates at
    ``eps`` and ``eps / 10`` disagree by more than ``KINK_TOL``) sit on a
    kink and are redrawn; the count is reported as ``skipped``.
    """
    rng = np.random.default_rng([seed, 31])
    ep = draw_episode(GeneratorConfig(C=4, H=8, W=8, n_base=3, n_novel=1, sigma=1.0), "base", seed)
    model = ToyModel.init(rng, 4, 2)
    params = model.params(use_aenet=True)
    for p in params:
        # make zero-initialised branches live
        p.value += 0.1 * rng.normal(size=p.value.shape)
    cfg = LossConfig(lam=1.0)

    def loss():
        out = model_forward(model, ep, use_aenet=True)
        return total_loss(out.pred, ep.query_gt, out.aux_masks, cfg)

    tc.zero_grad(params)
    loss().backward()
    arrays = [p.value for p in params]
    sizes = np.array([a.size for a in arrays], dtype=float)
    worst, checked, skipped = 0.0, 0, 0
    while checked < points:
        i = int(rng.choice(len(params), p=sizes / sizes.sum()))
        entry = [(i, tuple(int(rng.integers(d)) for d in arrays[i].shape))]
        idx = entry[0][1]
        coarse = numeric_grad(lambda: loss().item(), arrays, eps, entry)[i][idx]
        fine = numeric_grad(lambda: loss().item(), arrays, eps / 10, entry)[i][idx]
        if rel_error(coarse, fine) >= KINK_TOL:
            # a ReLU or min/max switch lies within +-eps: the difference quotient is not a derivative here
            skipped += 1
            if skipped > 10 * points:
                raise RuntimeError("too many non-differentiable sample points")
            continue
        worst = max(worst, rel_error(params[i].grad[idx], coarse))
        checked += 1
    return CheckResult("composite", points, worst, worst < tol, skipped)


def run_suite(seed: int = 0, eps: float = 1e-4, tol: float = 1e-4, points: int = 20) -> dict:
    """Every registered op plus the composite graph; returns a JSON-ready report."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    results = [check_op(name, rng, points, eps, tol) for name in OPS]
    results.append(check_composite(seed, points, eps, tol))
    return {
        "seed": seed,
        "eps": eps,
        "tol": tol,
        "passed": all(r.passed for r in results),
        "wall_clock_s": time.perf_counter() - t0,
        "checks": [r.__dict__ for r in results],
    }
