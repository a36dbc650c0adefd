"""Episodic-transformer agent with an auxiliary contrastive object loss, on a toy gridworld."""
from .trainer import TrainConfig, PretrainConfig, combine_object_loss, pretrain_dualenc, train
from .worldgen import WorldConfig, build_dataset, generate_dataset, load_dataset

__version__ = "0.1.0"

__all__ = ["TrainConfig", "PretrainConfig", "WorldConfig", "combine_object_loss",
           "pretrain_dualenc", "train", "build_dataset", "generate_dataset", "load_dataset"]
