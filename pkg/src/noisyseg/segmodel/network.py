"""Fixed three-layer convolutional segmenter with hand-written backprop.

conv 3x3 (3->8) -> ReLU -> conv 3x3 (8->8) -> ReLU -> conv 1x1 (8->1) -> sigmoid
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, fields

import numpy as np

from ..synthgen import Rng
from .kernels import conv_forward, conv_grad_input, conv_grad_weight, pad1

SHAPES = {
    "w1": (8, 3, 3, 3),
    "b1": (8,),
    "w2": (8, 8, 3, 3),
    "b2": (8,),
    "w3": (1, 8, 1, 1),
    "b3": (1,),
}


class StaleCacheError(RuntimeError):
    """backward() called with a cache produced under different parameters."""


@dataclass
class ModelParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    def __post_init__(self):
        for name, shape in SHAPES.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def items(self):
        return [(n, getattr(self, n)) for n in self.names()]

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(**{n: np.array(a, dtype=dtype) for n, a in self.items()})

    def copy(self) -> "ModelParams":
        return ModelParams(**{n: a.copy() for n, a in self.items()})

    @classmethod
    def zeros(cls, dtype=np.float32) -> "ModelParams":
        return cls(**{n: np.zeros(s, dtype=dtype) for n, s in SHAPES.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, a in self.items()])

    def fingerprint(self) -> int:
        crc = 0
        for _, a in self.items():
            crc = zlib.crc32(np.ascontiguousarray(a).tobytes(), crc)
        return crc

    def mirrored(self) -> "ModelParams":
        """Kernels flipped left-right; forward(mirrored, x[..., ::-1]) mirrors forward(self, x)."""
        p = self.copy()
        p.w1 = np.ascontiguousarray(self.w1[..., ::-1])
        p.w2 = np.ascontiguousarray(self.w2[..., ::-1])
        return p

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for _, a in self.items())


def init_params(seed: int = 0) -> ModelParams:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases, float32."""
    rng = Rng(seed)
    out = {}
    for name, shape in SHAPES.items():
        if name.startswith("b"):
            out[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            out[name] = (std * rng.normal(int(np.prod(shape)))).reshape(shape).astype(np.float32)
    return ModelParams(**out)


@dataclass
class Cache:
    fingerprint: int
    xp: np.ndarray
    a1: np.ndarray
    h1p: np.ndarray
    a2: np.ndarray
    h2: np.ndarray
    pred: np.ndarray


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward(params: ModelParams, x: np.ndarray):
    """Prediction map and cache for an input of shape (3, H, W) or (N, 3, H, W).

    Computation runs in the dtype of ``params``; the sigmoid and the returned
    probabilities are float64.
    """
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected input (N, 3, H, W), got {x.shape}")
    dtype = params.w1.dtype
    xp = pad1(np.asarray(x, dtype=dtype))
    a1 = conv_forward(xp, params.w1, params.b1)
    h1p = pad1(np.maximum(a1, 0))
    a2 = conv_forward(h1p, params.w2, params.b2)
    h2 = np.maximum(a2, 0)
    z = np.einsum("c,nchw->nhw", params.w3[0, :, 0, 0], h2) + params.b3[0]
    pred = sigmoid(z)
    cache = Cache(params.fingerprint(), xp, a1, h1p, a2, h2, pred)
    return (pred[0] if single else pred), cache


def backward(params: ModelParams, cache: Cache, dpred: np.ndarray) -> ModelParams:
    """Parameter gradients (float64) given dL/dpred for the cached forward pass."""
    if cache.fingerprint != params.fingerprint():
        raise StaleCacheError("cache was produced with different parameters")
    dpred = np.asarray(dpred, dtype=np.float64)
    if dpred.ndim == 2:
        dpred = dpred[None]
    if dpred.shape != cache.pred.shape:
        raise ValueError(f"gradient shape {dpred.shape} does not match prediction {cache.pred.shape}")
    dtype = params.w1.dtype
    dz = dpred * cache.pred * (1.0 - cache.pred)

    g = {}
    g["b3"] = np.array([dz.sum()])
    g["w3"] = np.einsum("nhw,nchw->c", dz, cache.h2.astype(np.float64)).reshape(1, 8, 1, 1)
    da2 = (params.w3[0, :, 0, 0].astype(np.float64)[None, :, None, None] * dz[:, None]).astype(dtype)
    da2 *= cache.a2 > 0
    g["w2"] = conv_grad_weight(cache.h1p, da2)
    g["b2"] = da2.sum(axis=(0, 2, 3), dtype=np.float64)
    da1 = conv_grad_input(params.w2, da2)
    da1 *= cache.a1 > 0
    g["w1"] = conv_grad_weight(cache.xp, da1)
    g["b1"] = da1.sum(axis=(0, 2, 3), dtype=np.float64)
    return ModelParams(**g)


class Adam:
    def __init__(self, params: ModelParams, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise ValueError("learning rate must be >= 0")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros(a.shape) for n, a in params.items()}
        self.v = {n: np.zeros(a.shape) for n, a in params.items()}
        self.t = 0

    def step(self, params: ModelParams, grads: ModelParams) -> ModelParams:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        new = {}
        for name, p in params.items():
            g = np.asarray(getattr(grads, name), dtype=np.float64)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            new[name] = (p.astype(np.float64) - update).astype(p.dtype)
        return ModelParams(**new)
