"""Noise-tolerant pre-training for differentially private fine-tuning, at desk scale."""

from .accounting import PrivacySpec, calibrate_sigma, gaussian_sigma
from .autodiff import ModelParams, init_mlp
from .data import TransferTask, make_synthetic_transfer
from .finetune import DpSgdConfig, finetune_dpsgd
from .pretrain import PretrainConfig, train_dpadapter, train_standard, train_vanilla_sam
from .robustness import RobustnessReport, estimate_rho, robust_accuracy

__version__ = "0.1.0"
