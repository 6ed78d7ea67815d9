"""Kernelized Renyi information estimates and generalization bounds for SGD/SGLD."""

from .errors import *  # noqa: F401,F403
from .matrixcore import SymMatrix, logdet_shifted, sym_eigen, vn_entropy
from .kernelinfo import (
    KernelSpec,
    cond_mi_estimate,
    entropy_estimate,
    gaussian_kernel,
    mi_estimate,
    select_width,
)
from .nnet import LossSpec, MlpModel, init_mlp, per_sample_gradients
from .trainer import TrainConfig, Trajectory, load_trajectory, run_training, save_trajectory
from .bounds import BoundReport, grad_stats, theta_c, theta_v
from .experiment import ExperimentConfig, emit_report, orchestrate

__version__ = "0.1.0"
