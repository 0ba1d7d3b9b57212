"""Differentially private contrastive ZINB autoencoder clustering for single-cell counts."""
from dpdcan._backend import NAME as BACKEND
from dpdcan.accountant import (PrivacyReport, RdpCurve, SgmParams, calibrate_sigma,
                               compute_epsilon, rdp_to_dp, sgm_rdp_step)
from dpdcan.data import CountMatrix, PreprocessedData, generate_synthetic, preprocess
from dpdcan.dp_engine import DpConfig, dpan_step, noisy_update
from dpdcan.losses import LossWeights
from dpdcan.metrics import ari, nmi
from dpdcan.model import ModelParams, init_params
from dpdcan.train import ClusterResult, Seeds, TrainPlan

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ClusterResult", "CountMatrix", "DpConfig", "LossWeights", "ModelParams",
    "PreprocessedData", "PrivacyReport", "RdpCurve", "Seeds", "SgmParams", "TrainPlan",
    "ari", "calibrate_sigma", "compute_epsilon", "dpan_step", "generate_synthetic",
    "init_params", "nmi", "noisy_update", "preprocess", "rdp_to_dp", "sgm_rdp_step",
]
