from .network import Adam, ModelParams, StaleCacheError, backward, forward, init_params
from .training import (
    TrainConfig,
    TrainingDiverged,
    TrainResult,
    load_checkpoint,
    predict_volume,
    save_checkpoint,
    train,
)

__all__ = [
    "Adam",
    "ModelParams",
    "StaleCacheError",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "backward",
    "forward",
    "init_params",
    "load_checkpoint",
    "predict_volume",
    "save_checkpoint",
    "train",
]
