"""Federated averaging simulator with model-replacement backdoor attacks.

Submodules: :mod:`~fedbackdoor.nn` (numpy CNN core), :mod:`~fedbackdoor.data`,
:mod:`~fedbackdoor.federation`, :mod:`~fedbackdoor.attacks`,
:mod:`~fedbackdoor.metrics`, :mod:`~fedbackdoor.config` and the
:mod:`~fedbackdoor.cli` driver.
"""
from .attacks import AttackPlan, SubnetSpec, SubnetTrainConfig, WiringSpec, replace_subnet
from .data import ClientShard, LabeledDataset, PublicDataset, TriggerSpec
from .federation import FederationConfig, RoundLog, run_training
from .nn import NetworkSpec, ParamSet, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "AttackPlan", "ClientShard", "FederationConfig", "LabeledDataset", "NetworkSpec",
    "ParamSet", "PublicDataset", "RoundLog", "SubnetSpec", "SubnetTrainConfig", "TrainConfig",
    "TriggerSpec", "WiringSpec", "replace_subnet", "run_training",
]
