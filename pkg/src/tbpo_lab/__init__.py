"""Token-level Bregman preference optimisation on enumerable token MDPs."""

from .core_math import GeneratorKind, GeneratorSpec
from .errors import ConfigError, DomainError, NumericError, TbpoError
from .oracle import ValueTables, compute_values
from .policy import FeedForwardPolicy, TabularPolicy, reference_policy
from .pref_data import PreferenceDataset, PreferencePair, generate_dataset
from .token_mdp import MdpSpec, StateId, TableReward, TargetStringReward, Trajectory
from .trainer import TrainConfig, train
from .weights import WeightMode

__version__ = "0.1.0"

__all__ = [
    "GeneratorKind", "GeneratorSpec", "ConfigError", "DomainError", "NumericError", "TbpoError",
    "ValueTables", "compute_values", "FeedForwardPolicy", "TabularPolicy", "reference_policy",
    "PreferenceDataset", "PreferencePair", "generate_dataset", "MdpSpec", "StateId", "TableReward",
    "TargetStringReward", "Trajectory", "TrainConfig", "train", "WeightMode",
]
