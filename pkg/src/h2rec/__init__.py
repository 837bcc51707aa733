"""Dual-branch sequential recommendation over hash IDs and semantic IDs."""

from .data import Dataset, SplitDataset, leave_one_out_split, load_interactions, popularity_partition, synthesize_dataset
from .model import H2Rec, ModelConfig
from .quantizer import Codebooks, RqVaeConfig, SidAssignment, assign_sids, train_rqvae
from .trainer import TrainConfig, Trainer, init_model, train

__version__ = "0.1.0"
