"""Structure-preserving trajectory prediction for cells in microfluidic channels."""

from .autodiff import DenseNet, GradientTape, OptimizerState, backward, net_forward
from .dataset import NormStats, load_trajectories, write_trajectories
from .generic import GenericOperators, generic_step
from .model import ModelBundle
from .rollout import rollout, velocity_accuracy
from .simulator import SimConfig, simulate
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "DenseNet", "GenericOperators", "GradientTape", "ModelBundle", "NormStats", "OptimizerState",
    "SimConfig", "TrainConfig", "backward", "generic_step", "load_trajectories", "net_forward",
    "rollout", "simulate", "train", "velocity_accuracy", "write_trajectories",
]
