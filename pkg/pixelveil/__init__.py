"""pixelveil - imperceptible dispersed-pixel backdoor triggers, their theory and the defenses they face"""

__version__ = "0.1.0"

from .data_io import ImageTensor, LabeledDataset, NormStats, load_idx_dataset, load_netpbm
from .errors import PixelVeilError
from .nn import NetworkParams, TrainConfig, build_mlp, evaluate, train
from .poison import PatchSpec, PoisonPlan, make_plan, poison_dataset
from .trigger import Symmetry, TriggerSpec, TriggerTensor, generate_trigger

__all__ = [
    "ImageTensor",
    "LabeledDataset",
    "NetworkParams",
    "NormStats",
    "PatchSpec",
    "PixelVeilError",
    "PoisonPlan",
    "Symmetry",
    "TrainConfig",
    "TriggerSpec",
    "TriggerTensor",
    "build_mlp",
    "evaluate",
    "generate_trigger",
    "load_idx_dataset",
    "load_netpbm",
    "make_plan",
    "poison_dataset",
    "train",
]
