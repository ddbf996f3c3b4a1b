"""Test-time personalized gaze estimation with meta-learned padding prompts."""

from .autodiff import ConfigurationError, ContractError, DimensionError, Tensor, grad, grad_check
from .losses import l1_gaze_loss, personalization_loss, symmetry_loss
from .meta import MetaConfig, meta_gradient, meta_train
from .model import GazeNet, ModelConfig, build_model, count_prompt_params, load_checkpoint, save_checkpoint
from .personalize import PersonalizeConfig, angular_error, evaluate, gaze_to_vector, personalize
from .synthgaze import DomainSpec, PersonSpec, make_benchmark, render
from .training import Adam, TrainConfig, pretrain

__version__ = "0.1.0"

__all__ = [
    "Adam", "ConfigurationError", "ContractError", "DimensionError", "DomainSpec", "GazeNet", "MetaConfig",
    "ModelConfig", "PersonSpec", "PersonalizeConfig", "Tensor", "TrainConfig", "angular_error", "build_model",
    "count_prompt_params", "evaluate", "gaze_to_vector", "grad", "grad_check", "l1_gaze_loss", "load_checkpoint",
    "make_benchmark", "meta_gradient", "meta_train", "personalization_loss", "personalize", "pretrain", "render",
    "save_checkpoint", "symmetry_loss",
]
