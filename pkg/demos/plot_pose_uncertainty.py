"""
Pose uncertainty on SE(3)
=========================

Twists, right perturbations, and how per-step covariances grow when
relative poses are chained into a trajectory.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from icpcov.se3 import (
    Pose,
    compose_with_covariance,
    exp_map,
    icp_error,
    log_map,
    monte_carlo_compound,
    sample_perturbed_pose,
)

# a twist is (translation part rho, rotation vector phi)
xi = np.array([1.0, 0.2, 0.0, 0.0, 0.0, np.pi / 6])
T = exp_map(xi)
print("exp(xi) translation:", T.translation.round(4))
print("log(exp(xi)) == xi:", np.allclose(log_map(T), xi))

# registration errors are right perturbations: T_true = T_hat exp(err)
T_hat = T @ exp_map([0.02, -0.01, 0.0, 0.0, 0.0, 0.005])
print("error twist:", icp_error(T_hat, T).round(4))

# sampling a noisy pose from a 6x6 covariance
cov = np.diag([1e-3, 1e-3, 1e-4, 1e-5, 1e-5, 1e-4])
noisy = [sample_perturbed_pose(T, cov, rng_seed=s) for s in range(200)]
spread = np.array([icp_error(T, P) for P in noisy])
print("sample std vs model std:", spread.std(axis=0).round(4), np.sqrt(np.diag(cov)).round(4))

# chain 30 one-metre steps with a slight left turn; with loose rotations the
# fourth-order terms start to matter
step = exp_map([1.0, 0.0, 0.0, 0.0, 0.0, 0.05])
step_cov = np.diag([1e-3, 1e-3, 1e-4, 2e-3, 2e-3, 4e-3])
chain = [(step, step_cov)] * 30
T_end, cov2 = compose_with_covariance(chain, order=2)
_, cov4, steps = compose_with_covariance(chain, order=4, return_steps=True)
mc = monte_carlo_compound(chain, 20_000, rng_seed=0)
for name, c in (("2nd order", cov2), ("4th order", cov4)):
    print(f"{name}: relative error vs Monte Carlo {np.linalg.norm(c - mc) / np.linalg.norm(mc):.3f}")

# the lateral position uncertainty grows faster than the forward one:
# heading error turns into sideways drift
std_xy = np.array([np.sqrt(np.diag(c)[:2]) for _, c in steps])
xy = np.array([P.translation[:2] for P, _ in steps])

fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 4))
ax0.plot(xy[:, 0], xy[:, 1], ".-")
ax0.set_aspect("equal")
ax0.set_title("composed trajectory")
ax1.plot(std_xy[:, 0], label="forward std (local frame)")
ax1.plot(std_xy[:, 1], label="lateral std (local frame)")
ax1.set_xlabel("step")
ax1.legend()
fig.tight_layout()
fig.savefig("pose_uncertainty.png", dpi=100)
print("wrote pose_uncertainty.png")
