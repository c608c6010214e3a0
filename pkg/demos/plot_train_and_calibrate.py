"""
Train a covariance network and check its calibration
====================================================

Build a small labelled dataset from simulated scans, fit the network by
maximum likelihood, then score MC-dropout covariances on a held-out sequence
and along its trajectory.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from icpcov.bayes import McConfig
from icpcov.dataset import assign_split, build_dataset, merge_manifests
from icpcov.evaluation import calibrated_mahalanobis, evaluate_samples, mahalanobis, nne, trajectory_eval
from icpcov.icp import IcpConfig
from icpcov.network import NetworkConfig, param_count
from icpcov.scene_sim import synthetic_sequence
from icpcov.training import TrainConfig, label_scale, train

# small on purpose; the acceptance suite trains on seven sequences per scene for 30 epochs
SEQUENCES, SCANS, EPOCHS = 3, 8, 5
icp = IcpConfig(subsample_size=256)

###############################################################################
# Data: scan i+1 is registered against scan i from a perturbed guess, and the
# label is the remaining error twist.
parts = []
for arch in ("corridor", "plain", "structured"):
    for k in range(SEQUENCES):
        _, seq = synthetic_sequence(arch, SCANS, rng_seed=1000 * k + len(arch))
        parts.append(build_dataset(seq, icp, rng_seed=k, name=f"{arch}_{k}"))
data = merge_manifests(parts)
assign_split(data, {f"{a}_{SEQUENCES - 1}": "test" for a in ("corridor", "plain", "structured")})
train_set = data.split_samples("train")
print(len(train_set), "training samples")

###############################################################################
# Network: the head predicts in units of the training-label RMS so that the
# untrained model already has a sensible covariance scale.
cfg = NetworkConfig.desk(output_scale=label_scale(train_set))
print(param_count(cfg), "parameters")
ckpt = train(data, cfg, TrainConfig(epochs=EPOCHS, seed=0))
for h in ckpt.history:
    print(f"epoch {h.epoch:2d}  train NLL {h.train_nll:8.3f}")

###############################################################################
# Calibration: a perfectly calibrated model scores NNE and Mahalanobis near
# one (the Mahalanobis expectation is slightly below, see the reference lines).
test = data.split_samples("test")
records = evaluate_samples(test, ckpt.params, cfg, McConfig(16, 0))
for block in ("translation", "rotation"):
    print(f"{block:12s} NNE {nne(records, block):.2f}  D_M {mahalanobis(records, block):.2f}  (calibrated D_M {calibrated_mahalanobis(3):.3f})")

seq_name = test[0].sequence
traj = trajectory_eval([r for r in records if r.sequence == seq_name and r.guess_index == 0])
print("trajectory final D_M:", {k: round(v, 2) for k, v in traj.mahalanobis.items()})

###############################################################################
# Predicted 3-sigma bands against the actual x errors
x_err = np.array([r.label[0] for r in records])
x_std = np.array([np.sqrt(r.total[0, 0]) for r in records])
order = np.argsort(x_std)
plt.figure(figsize=(6, 4))
plt.fill_between(np.arange(len(order)), -3 * x_std[order], 3 * x_std[order], alpha=0.3, label="3 sigma")
plt.plot(x_err[order], "k.", label="x error")
plt.xlabel("test pair (sorted by predicted std)")
plt.legend()
plt.tight_layout()
plt.savefig("calibration.png", dpi=100)
print("wrote calibration.png")
