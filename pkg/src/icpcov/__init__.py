"""Learned covariance estimation for point-to-plane ICP registration."""

from .bayes import McConfig, UncertaintyReport, mc_predict, predict_deterministic
from .dataset import DatasetManifest, InitialGuessConfig, RegistrationSample, build_dataset
from .evaluation import EvaluationRecord, mahalanobis, nne, trajectory_eval
from .icp import IcpConfig, IcpResult, register
from .network import GaussianPrediction, NetworkConfig, forward, ldl_to_covariance
from .pointcloud import FilteredPair, PointCloud
from .se3 import Pose, compose_with_covariance, exp_map, icp_error, log_map
from .training import Checkpoint, TrainConfig, finetune, nll_loss, train

__version__ = "0.1.0"
