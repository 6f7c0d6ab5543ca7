"""Soft cross-entropy, reverse cross-entropy, MAE, their normalized forms, and
the active-passive combination used as the segmentation mask loss.

Binary losses (``num_classes == 2``) take a foreground probability map
``pred`` and a target map in [0, 1]. For ``num_classes > 2`` the class axis
comes first: ``pred`` is a (K, ...) distribution and the target is either a
(K, ...) distribution or an integer class map.

Every public op reduces by the arithmetic mean over pixels and returns the
gradient of that mean with respect to ``pred``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Union

import math

import numpy as np

from . import _accel
from ._accel import njit

P_MIN = 1e-20

TermFn = Callable[[np.ndarray, np.ndarray], tuple]
Family = Union[str, TermFn]


@dataclass(frozen=True)
class LossConfig:
    w_bce: float = 1.0
    w_sce: float = 0.0
    w_rce: float = 0.0
    normalize_terms: bool = True
    p_min: float = P_MIN
    num_classes: int = 2

    def __post_init__(self):
        weights = (self.w_bce, self.w_sce, self.w_rce)
        if any(not np.isfinite(w) or w < 0 for w in weights):
            raise ValueError(f"loss weights must be finite and >= 0, got {weights}")
        if not any(w > 0 for w in weights):
            raise ValueError("at least one loss weight must be positive")
        if not 0.0 < self.p_min < 0.5:
            raise ValueError(f"p_min must lie in (0, 0.5), got {self.p_min}")
        if int(self.num_classes) != self.num_classes or self.num_classes < 2:
            raise ValueError(f"num_classes must be an integer >= 2, got {self.num_classes}")

    def to_dict(self) -> dict:
        return {
            "w_bce": self.w_bce,
            "w_sce": self.w_sce,
            "w_rce": self.w_rce,
            "normalize_terms": self.normalize_terms,
            "p_min": self.p_min,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class LossValueAndGrad:
    value: float
    grad: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def clip(v, p_min: float = P_MIN):
    return np.minimum(np.maximum(v, p_min), 1.0 - p_min)


def log_clip(v, p_min: float = P_MIN):
    """ln clip(v), evaluated as a clamp in log space."""
    with np.errstate(divide="ignore"):
        return np.clip(np.log(v), math.log(p_min), math.log1p(-p_min))


def log1m_clip(v, p_min: float = P_MIN):
    """ln clip(1 - v) via log1p, exact where 1 - v would round to 1."""
    with np.errstate(divide="ignore"):
        return np.clip(np.log1p(-np.asarray(v)), math.log(p_min), math.log1p(-p_min))


def binarize(target, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(target) >= threshold).astype(np.float64)


# -- per-pixel terms, binary form -------------------------------------------

def ce_terms(pred, target, p_min=P_MIN):
    yh = np.asarray(pred, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    loss = -(y * log_clip(yh, p_min) + (1.0 - y) * log1m_clip(yh, p_min))
    # analytic form of the unclipped loss; the floor only guards exact 0/1
    grad = (yh - y) / (np.maximum(yh, p_min) * np.maximum(1.0 - yh, p_min))
    return loss, grad


def rce_terms(pred, target, p_min=P_MIN):
    yh = np.asarray(pred, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    log_t = log_clip(y, p_min)
    log_f = log1m_clip(y, p_min)
    loss = -(yh * log_t + (1.0 - yh) * log_f)
    return loss, np.broadcast_to(log_f - log_t, loss.shape).copy()


def mae_terms(pred, target, p_min=P_MIN):
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return np.abs(diff), np.sign(diff)


# -- per-pixel terms, K-class form (class axis first) -----------------------

def _ce_terms_k(p, q, p_min):
    return -(q * log_clip(p, p_min)).sum(axis=0), -q / np.maximum(p, p_min)


def _rce_terms_k(p, q, p_min):
    log_q = log_clip(q, p_min)
    return -(p * log_q).sum(axis=0), np.broadcast_to(-log_q, p.shape).copy()


def _mae_terms_k(p, q, p_min):
    # half the L1 distance, so K=2 agrees with the binary |pred - target|
    diff = p - q
    return 0.5 * np.abs(diff).sum(axis=0), 0.5 * np.sign(diff)


_BINARY = {"ce": ce_terms, "rce": rce_terms, "mae": mae_terms}
_KCLASS = {"ce": _ce_terms_k, "rce": _rce_terms_k, "mae": _mae_terms_k}


def _reduce(loss, grad, **diagnostics) -> LossValueAndGrad:
    n = loss.size
    return LossValueAndGrad(float(np.mean(loss)), grad / n, diagnostics)


def _check_shapes(pred, target):
    if np.shape(pred) != np.shape(target):
        raise ValueError(f"prediction {np.shape(pred)} and target {np.shape(target)} differ")


def soft_ce(pred, target, p_min: float = P_MIN) -> LossValueAndGrad:
    _check_shapes(pred, target)
    return _reduce(*ce_terms(pred, target, p_min))


def soft_rce(pred, target, p_min: float = P_MIN) -> LossValueAndGrad:
    _check_shapes(pred, target)
    return _reduce(*rce_terms(pred, target, p_min))


def mae(pred, target, p_min: float = P_MIN) -> LossValueAndGrad:
    _check_shapes(pred, target)
    return _reduce(*mae_terms(pred, target, p_min))


# -- normalization ----------------------------------------------------------

def _one_hot(labels, k):
    labels = np.asarray(labels)
    if np.any((labels < 0) | (labels >= k)):
        raise ValueError(f"class labels must lie in [0, {k})")
    return (np.arange(k).reshape((k,) + (1,) * labels.ndim) == labels).astype(np.float64)


def _nce_grad(pred, target, p_min):
    """Numerator of d NCE / d pred over the squared denominator, in a form
    free of the cancellation the quotient rule suffers near 0 and 1."""
    lp = log_clip(pred, p_min)
    lq = log1m_clip(pred, p_min)
    core = lp / np.maximum(1.0 - pred, p_min) + lq / np.maximum(pred, p_min)
    return -(1.0 - 2.0 * target) * core


def normalized_terms(family: Family, pred, target, num_classes: int = 2, p_min: float = P_MIN):
    """Per-pixel normalized loss, its gradient, and the degenerate-pixel count.

    The numerator uses the pixel's actual (possibly soft) target; the
    denominator sums the loss over one-hot targets for every class.
    """
    pred = np.asarray(pred, dtype=np.float64)
    table = _BINARY if num_classes == 2 else _KCLASS
    term = partial(table[family], p_min=p_min) if isinstance(family, str) else family
    if num_classes == 2:
        target = np.broadcast_to(np.asarray(target, dtype=np.float64), pred.shape)
        num, d_num = term(pred, target)
        den = np.zeros_like(pred)
        d_den = np.zeros_like(pred)
        for j in (0.0, 1.0):
            l_j, g_j = term(pred, np.full_like(pred, j))
            den += l_j
            d_den += g_j
    else:
        if pred.shape[0] != num_classes:
            raise ValueError(f"expected {num_classes} class planes, got {pred.shape[0]}")
        target = np.asarray(target)
        if target.shape == pred.shape[1:] and np.issubdtype(target.dtype, np.integer):
            target = _one_hot(target, num_classes)
        elif np.ndim(target) == 0:
            target = _one_hot(np.full(pred.shape[1:], int(target)), num_classes)
        target = np.asarray(target, dtype=np.float64)
        if target.shape != pred.shape:
            raise ValueError(f"target shape {target.shape} does not match prediction {pred.shape}")
        num, d_num = term(pred, target)
        den = np.zeros(pred.shape[1:])
        d_den = np.zeros_like(pred)
        for j in range(num_classes):
            l_j, g_j = term(pred, _one_hot(np.full(pred.shape[1:], j), num_classes))
            den += l_j
            d_den += g_j

    ok = den > 0
    safe = np.where(ok, den, 1.0)
    value = np.where(ok, num / safe, 1.0 / num_classes)
    if family == "ce" and num_classes == 2:
        grad = _nce_grad(pred, target, p_min) / safe**2
    else:
        grad = (d_num * safe - num * d_den) / safe**2
    grad = np.where(ok, grad, 0.0)
    return value, grad, int(np.count_nonzero(~ok))


def normalize(family: Family, pred, target, num_classes: int = 2, p_min: float = P_MIN) -> LossValueAndGrad:
    """Mean normalized loss; ``family`` is "ce", "rce", "mae" or a term callable.

    A callable receives ``(pred, target)`` and returns per-pixel
    ``(loss, d_loss/d_pred)`` arrays.
    """
    value, grad, degenerate = normalized_terms(family, pred, target, num_classes, p_min)
    return _reduce(value, grad, degenerate_pixels=degenerate)


# -- active-passive combination ---------------------------------------------

def _hard_target(target, num_classes):
    if num_classes == 2:
        return binarize(target)
    return _one_hot(np.argmax(target, axis=0), num_classes)


@njit(fastmath=False)
def _apl_binary_nb(pred, target, weights, normalize, p_min, grad, sums):
    """Fused single pass over pixels; fills ``grad`` (d mean / d pred) and the
    per-term loss sums. Returns the number of degenerate denominators."""
    n = pred.size
    log_p = math.log(p_min)
    log_q = math.log1p(-p_min)
    rce_den = -(log_p + log_q)
    bad = 0
    for i in range(n):
        yh = pred[i]
        y = target[i]
        lp = min(max(math.log(yh), log_p), log_q) if yh > 0.0 else log_p
        lq = min(max(math.log1p(-yh), log_p), log_q) if yh < 1.0 else log_p
        den = max(yh, p_min) * max(1.0 - yh, p_min)
        ce_den = -lp - lq
        nce_core = lp / max(1.0 - yh, p_min) + lq / max(yh, p_min)
        g_i = 0.0
        for t in range(3):
            w = weights[t]
            if w == 0.0:
                continue
            if t == 2:
                lt = min(max(math.log(y), log_p), log_q) if y > 0.0 else log_p
                lf = min(max(math.log1p(-y), log_p), log_q) if y < 1.0 else log_p
                l = -(yh * lt + (1.0 - yh) * lf)
                g = lf - lt
                if normalize:
                    if rce_den > 0.0:
                        l = l / rce_den
                        g = g / rce_den
                    else:
                        l = 0.5
                        g = 0.0
                        bad += 1
            else:
                yt = y
                if t == 0:
                    yt = 1.0 if y >= 0.5 else 0.0
                l = -(yt * lp + (1.0 - yt) * lq)
                g = (yh - yt) / den
                if normalize:
                    if ce_den > 0.0:
                        g = -(1.0 - 2.0 * yt) * nce_core / (ce_den * ce_den)
                        l = l / ce_den
                    else:
                        l = 0.5
                        g = 0.0
                        bad += 1
            sums[t] += l
            g_i += w * (g / n)
        grad[i] = g_i
    return bad


def apl(config: LossConfig, pred, target) -> LossValueAndGrad:
    """Weighted sum of CE on the binarized target, CE on the soft target, and
    RCE on the soft target, each normalized when ``config.normalize_terms``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_shapes(pred, target)
    if config.num_classes == 2 and _accel.use_numba():
        return _apl_fused(config, pred, target)
    k = config.num_classes
    terms = (
        ("bce", config.w_bce, "ce", lambda: _hard_target(target, k)),
        ("sce", config.w_sce, "ce", lambda: target),
        ("rce", config.w_rce, "rce", lambda: target),
    )
    value = 0.0
    grad = np.zeros_like(pred)
    diagnostics = {"degenerate_pixels": 0}
    for name, weight, family, make_target in terms:
        if weight == 0:
            continue
        if config.normalize_terms:
            l, g, bad = normalized_terms(family, pred, make_target(), k, config.p_min)
            diagnostics["degenerate_pixels"] += bad
        elif k == 2:
            l, g = _BINARY[family](pred, make_target(), config.p_min)
        else:
            l, g = _KCLASS[family](pred, make_target(), config.p_min)
        term = _reduce(l, g)
        diagnostics[name] = term.value
        value += weight * term.value
        grad += weight * term.grad
    return LossValueAndGrad(value, grad, diagnostics)


def _apl_fused(config: LossConfig, pred: np.ndarray, target: np.ndarray) -> LossValueAndGrad:
    flat_p = np.ascontiguousarray(pred).ravel()
    flat_t = np.ascontiguousarray(target).ravel()
    weights = np.array([config.w_bce, config.w_sce, config.w_rce], dtype=np.float64)
    grad = np.empty_like(flat_p)
    sums = np.zeros(3)
    bad = _apl_binary_nb(flat_p, flat_t, weights, config.normalize_terms, config.p_min, grad, sums)
    value = 0.0
    diagnostics = {"degenerate_pixels": int(bad)}
    for name, w, total in zip(("bce", "sce", "rce"), weights, sums):
        if w != 0:
            diagnostics[name] = total / flat_p.size
            value += w * diagnostics[name]
    return LossValueAndGrad(value, grad.reshape(pred.shape), diagnostics)
