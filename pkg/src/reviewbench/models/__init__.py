from .base import Adam, Batch, RatingModel, TrainConfig
from .hft import HFTModel, hft_objective, hft_resample
from .latent import BiasModel, MFModel, NeuMFModel
from .reviews import DeepCoNNModel, DeepCoNNPlusModel, NARREModel
from .training import MODELS, TrainingDiverged, TrainResult, build_model, train

__all__ = [
    "Adam",
    "Batch",
    "BiasModel",
    "DeepCoNNModel",
    "DeepCoNNPlusModel",
    "HFTModel",
    "MFModel",
    "MODELS",
    "NARREModel",
    "NeuMFModel",
    "RatingModel",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "build_model",
    "hft_objective",
    "hft_resample",
    "train",
]
