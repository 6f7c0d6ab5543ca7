"""Central finite-difference checks for the loss gradients and the network."""

from __future__ import annotations

import numpy as np

from ..losses import LossConfig, apl, binarize
from ..synthgen import Rng
from .network import backward, forward, init_params

REL_FLOOR = 1e-8


def relative_error(analytic, numeric, floor: float = REL_FLOOR) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def central_difference(f, x: np.ndarray, h) -> np.ndarray:
    """Elementwise derivative of scalar ``f`` at ``x``; ``h`` may be an array."""
    x = np.asarray(x, dtype=np.float64)
    h = np.broadcast_to(np.asarray(h, dtype=np.float64), x.shape)
    out = np.empty_like(x)
    for i in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        out[i] = (f(xp) - f(xm)) / (2.0 * h[i])
    return out


def _fixture(size: int, seed: int):
    """Blob-shaped 2.5D input with a soft label, float64."""
    rng = Rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    blob = np.exp(-((yy - c) ** 2 + (xx - c) ** 2) / (2.0 * (size / 6.0) ** 2))
    x = 0.3 + 0.5 * blob[None] + 0.05 * rng.normal(3 * size * size).reshape(3, size, size)
    soft = np.clip(blob + 0.3 * (rng.uniform(size * size).reshape(size, size) - 0.5), 0.0, 1.0)
    return x, soft


def loss_gradient_error(config: LossConfig, label_mode: str = "soft", n: int = 64,
                        seed: int = 0, h: float = 1e-6) -> float:
    """Max relative error of apl's dL/dpred against central differences."""
    rng = Rng(seed)
    pred = 0.02 + 0.96 * rng.uniform(n)
    target = rng.uniform(n)
    if label_mode == "binary":
        target = binarize(target)
    # compare on the pixel sum so per-pixel derivatives are O(1)
    analytic = n * apl(config, pred, target).grad
    numeric = central_difference(lambda p: n * apl(config, p, target).value, pred, h)
    return float(relative_error(analytic, numeric).max())


def _kink_free_setup(size: int, seed: int, margin: float, max_tries: int = 200):
    """First fixture (from ``seed`` on) whose ReLU pre-activations all stay at
    least ``margin`` from zero; a central difference straddling a kink is not
    a derivative."""
    for s in range(seed, seed + max_tries):
        params = init_params(s).astype(np.float64)
        params.b1 += 0.05
        params.b2 += 0.05
        x, target = _fixture(size, s)
        _, cache = forward(params, x)
        if min(np.abs(cache.a1).min(), np.abs(cache.a2).min()) >= margin:
            return params, x, target
    raise RuntimeError(f"no kink-free fixture in {max_tries} seeds")


def network_gradient_error(config: LossConfig, label_mode: str = "soft", size: int = 16,
                           seed: int = 0, h: float = 1e-4) -> float:
    """Max relative error over every network parameter, on a float64 shadow copy."""
    params, x, target = _kink_free_setup(size, seed, margin=10 * h)
    if label_mode == "binary":
        target = binarize(target)

    def loss_at(p):
        pred, _ = forward(p, x)
        return apl(config, pred, target).value

    pred, cache = forward(params, x)
    grads = backward(params, cache, apl(config, pred, target).grad)
    worst = 0.0
    for name, arr in params.items():
        def f(values, name=name):
            q = params.copy()
            setattr(q, name, values)
            return loss_at(q)

        numeric = central_difference(f, arr, h)
        worst = max(worst, float(relative_error(getattr(grads, name), numeric).max()))
    return worst
