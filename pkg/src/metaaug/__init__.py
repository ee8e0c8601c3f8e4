"""Sample-aware data augmentation policy learning on a from-scratch numpy engine."""

from metaaug.augment import FUNCTION_NAMES, K, TransformSpec, apply_transform, embed
from metaaug.config import RunConfig, load_config, parse_config
from metaaug.data import Dataset, load_dataset, save_dataset, split, synth_digits
from metaaug.nn import TaskNetwork, init_task_network
from metaaug.policy import PolicyNetwork, normalize_weights
from metaaug.sampler import SamplerState
from metaaug.trainer import run, transfer_train

__version__ = "0.1.0"

__all__ = [
    "FUNCTION_NAMES", "K", "TransformSpec", "apply_transform", "embed",
    "RunConfig", "load_config", "parse_config",
    "Dataset", "load_dataset", "save_dataset", "split", "synth_digits",
    "TaskNetwork", "init_task_network", "PolicyNetwork", "normalize_weights",
    "SamplerState", "run", "transfer_train",
]
