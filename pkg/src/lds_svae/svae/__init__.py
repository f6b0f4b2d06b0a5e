"""SVAE model layer: recognition potentials, decoders, ELBO, training, forecasting."""
from .masking import random_mask
from .model import (
    DecoderParams,
    ElboTerms,
    EncoderParams,
    SvaeConfig,
    SvaeModel,
    decode_log_lik,
    elbo,
    encode,
    init_model,
    true_model,
)
from .training import TrainConfig, TrainResult, train
from .forecast import ForecastResult, predict_forecast
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "DecoderParams", "ElboTerms", "EncoderParams", "ForecastResult", "SvaeConfig", "SvaeModel",
    "TrainConfig", "TrainResult", "decode_log_lik", "elbo", "encode", "init_model",
    "load_checkpoint", "predict_forecast", "random_mask", "save_checkpoint", "train", "true_model",
]
