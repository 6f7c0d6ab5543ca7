from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..core import dump_json, load_json, read_tensor, stack_volume_25d, write_tensor
from ..losses import LossConfig, apl
from ..synthgen import Rng
from .network import Adam, ModelParams, backward, forward, init_params

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 4
    seed: int = 0
    mirror_augment: bool = True

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("learning rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "loss": self.loss.to_dict(),
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "mirror_augment": self.mirror_augment,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kw = {k: v for k, v in d.items() if k in cls.__dataclass_fields__ and k != "loss"}
        if "loss" in d:
            kw["loss"] = LossConfig.from_dict(d["loss"])
        return cls(**kw)


@dataclass
class TrainResult:
    params: ModelParams
    loss_curve: list[float]


def train(inputs: np.ndarray, labels: np.ndarray, config: TrainConfig,
          init: ModelParams | None = None) -> TrainResult:
    """Fit the segmenter on (N, 3, H, W) inputs and (N, H, W) targets in [0, 1].

    The init, the shuffle order and the mirror flags all come from one
    splitmix64 stream seeded with ``config.seed``.
    """
    inputs = np.asarray(inputs, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.float64)
    if inputs.ndim != 4 or inputs.shape[1] != 3 or len(inputs) == 0:
        raise ValueError(f"expected a non-empty (N, 3, H, W) input array, got {inputs.shape}")
    if labels.shape != (inputs.shape[0],) + inputs.shape[2:]:
        raise ValueError(f"labels {labels.shape} do not match inputs {inputs.shape}")

    rng = Rng(config.seed)
    params = init.copy() if init is not None else init_params(int(rng.next_u64(1)[0]))
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.eps)
    n = len(inputs)
    curve = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        flips = rng.uniform(n) < 0.5
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x = inputs[idx]
            y = labels[idx]
            if config.mirror_augment:
                f = flips[idx]
                x = np.where(f[:, None, None, None], x[..., ::-1], x)
                y = np.where(f[:, None, None], y[..., ::-1], y)
            pred, cache = forward(params, x)
            loss = apl(config.loss, pred, y)
            if not np.isfinite(loss.value) or not np.all(np.isfinite(loss.grad)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {start}")
            grads = backward(params, cache, loss.grad)
            params = opt.step(params, grads)
            total += loss.value * len(idx)
        if not params.is_finite():
            raise TrainingDiverged(f"non-finite parameters after epoch {epoch}")
        curve.append(total / n)
        log.debug("epoch %d loss %.6f", epoch, curve[-1])
    return TrainResult(params, curve)


def predict_volume(params: ModelParams, volume: np.ndarray) -> np.ndarray:
    """Per-slice probabilities for a (D, H, W) intensity volume."""
    pred, _ = forward(params, stack_volume_25d(np.asarray(volume, dtype=np.float32)))
    return pred


def save_checkpoint(ckpt_dir, params: ModelParams, meta: dict | None = None) -> Path:
    ckpt = Path(ckpt_dir)
    ckpt.mkdir(parents=True, exist_ok=True)
    index = {}
    for name, arr in params.items():
        fname = f"{name}.stf"
        write_tensor(ckpt / fname, arr)
        index[name] = fname
    dump_json(ckpt / "index.json", {"layers": index, "meta": meta or {}})
    return ckpt


def load_checkpoint(ckpt_dir) -> tuple[ModelParams, dict]:
    ckpt = Path(ckpt_dir)
    index = load_json(ckpt / "index.json")
    arrays = {name: read_tensor(ckpt / fname) for name, fname in index["layers"].items()}
    return ModelParams(**arrays), index.get("meta", {})
