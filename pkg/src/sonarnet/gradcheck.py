"""Central finite-difference checks for forward/backward pairs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Rng


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped: int
    worst: tuple | None = None  # (arg index, flat coordinate)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def gradient_check(forward, backward, args, step=1e-5, upstream=None, rng=None,
                   detect_kinks=False, kink_tol=1e-3) -> GradCheckReport:
    """Compare analytic gradients against ``(f(x+h) - f(x-h)) / 2h``.

    ``forward(*args)`` returns ``(output, cache)`` and ``backward(cache, g)``
    returns one gradient per element of ``args`` (``None`` for arguments not
    to check). The scalar probed is ``sum(output * upstream)``; a random
    upstream is drawn from ``rng`` when none is given.

    With ``detect_kinks``, a coordinate whose one-sided differences disagree
    by more than ``kink_tol`` (relative) is treated as a non-differentiable
    point and counted as skipped rather than compared. Leave it off for
    smooth maps so curvature is never mistaken for a kink.
    """
    args = [np.array(a, dtype=np.float64) for a in args]
    out, cache = forward(*args)
    if upstream is None:
        upstream = (rng or Rng(0)).uniform(-1.0, 1.0, np.shape(out))
    upstream = np.asarray(upstream, dtype=np.float64)
    grads = backward(cache, upstream)
    if not isinstance(grads, (tuple, list)):
        grads = (grads,)

    def probe():
        return float(np.sum(forward(*args)[0] * upstream))

    f0 = probe()
    worst, worst_at = 0.0, None
    checked = skipped = 0
    for ai, (arg, grad) in enumerate(zip(args, grads)):
        if grad is None:
            continue
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != arg.shape:
            raise ValueError(f"gradient {ai} shape {grad.shape} != argument shape {arg.shape}")
        flat, gflat = arg.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = probe()
            flat[i] = orig - step
            fm = probe()
            flat[i] = orig
            if detect_kinks:
                fwd, bwd = (fp - f0) / step, (f0 - fm) / step
                if abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), 1e-3):
                    skipped += 1
                    continue
            numeric = (fp - fm) / (2 * step)
            analytic = gflat[i]
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            checked += 1
            if err > worst:
                worst, worst_at = err, (ai, i)
    return GradCheckReport(worst, checked, skipped, worst_at)


# ------------------------------------------------------------- layer suite

LOOSE_TOL = 1e-4   # conv, pooling, batch norm
TIGHT_TOL = 1e-6   # dense, relu off the kink, fused softmax + cross-entropy, dropout
# Rounding, not truncation, dominates these at the default step. The linear maps
# have no truncation error at all, and relu inputs stay 0.1 away from the kink.
_STEPS = {"softmax_ce": 1e-4, "dense": 1e-3, "relu": 1e-3, "dropout": 1e-3}


def _distinct(rng, shape, gap=0.05):
    """Values whose pairwise gaps are at least ``gap``, so max-pool picks are stable."""
    n = int(np.prod(shape))
    return ((rng.permutation(n) - n / 2) * gap).reshape(shape)


def _cases(rng):
    from . import layers as L
    from .train import cross_entropy

    def bn_case(shape):
        c = shape[1]
        rm, rv = np.zeros(c), np.ones(c)
        fwd = lambda x, g, b: L.batchnorm_forward(x, g, b, rm, rv, L.TRAIN)[:2]
        return (fwd, L.batchnorm_backward,
                [rng.normal(0.5, 2.0, shape), rng.uniform(0.5, 1.5, c), rng.normal(0, 1, c)])

    def dropout_fwd(x):
        return L.dropout_forward(x, 0.5, L.TRAIN, Rng(7))

    labels = rng.integers(0, 5, 4)

    def ce_fwd(logits):
        loss, grad = cross_entropy(L.softmax(logits), labels)
        return np.array(loss), grad

    relu_x = rng.uniform(0.1, 1.0, (3, 4, 5)) * np.where(rng.random((3, 4, 5)) < 0.5, -1, 1)
    return {
        "conv_valid": (lambda x, w, b: L.conv2d_forward(x, w, b, "valid"), L.conv2d_backward,
                       [rng.normal(0, 1, (2, 2, 6, 6)), rng.normal(0, 0.5, (3, 2, 3, 3)),
                        rng.normal(0, 0.1, 3)], LOOSE_TOL),
        "conv_same": (lambda x, w, b: L.conv2d_forward(x, w, b, "same"), L.conv2d_backward,
                      [rng.normal(0, 1, (2, 3, 5, 5)), rng.normal(0, 0.5, (2, 3, 5, 5)),
                       rng.normal(0, 0.1, 2)], LOOSE_TOL),
        "maxpool": (L.maxpool2x2_forward, L.maxpool2x2_backward,
                    [_distinct(rng, (2, 2, 5, 5))], LOOSE_TOL),
        "avgpool": (L.global_avgpool_forward, L.global_avgpool_backward,
                    [rng.normal(0, 1, (2, 3, 4, 4))], LOOSE_TOL),
        "batchnorm_4d": bn_case((4, 3, 3, 3)) + (LOOSE_TOL,),
        "batchnorm_2d": bn_case((6, 4)) + (LOOSE_TOL,),
        "dense": (L.dense_forward, L.dense_backward,
                  [rng.normal(0, 1, (3, 7)), rng.normal(0, 0.5, (4, 7)), rng.normal(0, 0.1, 4)],
                  TIGHT_TOL),
        "relu": (L.relu, L.relu_backward, [relu_x], TIGHT_TOL),
        "dropout": (dropout_fwd, L.dropout_backward, [rng.normal(0, 1, (3, 6))], TIGHT_TOL),
        "softmax_ce": (ce_fwd, lambda grad, up: (grad * up,), [rng.normal(0, 2, (4, 5))],
                       TIGHT_TOL),
    }


def run_suite(seeds=range(20), tol=None) -> dict:
    """Check every layer over ``seeds``; returns ``{layer: (max error, tolerance)}``.

    ``tol`` overrides the per-layer tolerances when given.
    """
    worst = {}
    for seed in seeds:
        rng = Rng(seed)
        for name, (fwd, bwd, args, layer_tol) in _cases(rng).items():
            report = gradient_check(fwd, bwd, args, step=_STEPS.get(name, 1e-5), rng=rng.spawn(1))
            prev = worst.get(name, (0.0, layer_tol))[0]
            worst[name] = (max(prev, report.max_rel_error), layer_tol if tol is None else tol)
    return worst
