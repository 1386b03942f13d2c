from .checkpoint import load_checkpoint, save_checkpoint, weights_fingerprint
from .codec import IdentityCodec
from .conditioning import ConditionEmbedding, PromptEncoder, tokenize
from .data import ShapeSample, dataset_captions, gen_shapes_dataset
from .schedule import NoiseSchedule
from .training import TrainConfig, TrainResult, diffusion_loss, train_toy
from .unet import Denoiser, DenoiserConfig

__all__ = [
    "ConditionEmbedding",
    "Denoiser",
    "DenoiserConfig",
    "IdentityCodec",
    "NoiseSchedule",
    "PromptEncoder",
    "ShapeSample",
    "TrainConfig",
    "TrainResult",
    "dataset_captions",
    "diffusion_loss",
    "gen_shapes_dataset",
    "load_checkpoint",
    "save_checkpoint",
    "tokenize",
    "train_toy",
    "weights_fingerprint",
]
