"""Generative federated learning simulator for multi-modal mmWave beam selection."""
from .beam_model import ArchConfig, MultiModalNet, build_model
from .experiment import ExperimentConfig, PartitionSpec, desk_rounds, prepare_task
from .federation import RoundConfig, run_training
from .generator import GeneratorConfig
from .scenario import ScenarioConfig, generate_scenario

__all__ = ["ArchConfig", "ExperimentConfig", "GeneratorConfig", "MultiModalNet", "PartitionSpec",
           "RoundConfig", "ScenarioConfig", "build_model", "desk_rounds", "generate_scenario",
           "prepare_task", "run_training"]
