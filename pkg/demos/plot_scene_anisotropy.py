"""
ICP error depends on the scene
==============================

Register the same 0.5 m motion many times in three synthetic scenes and look
at the spread of the error twists. A corridor leaves motion along its axis
weakly constrained, an open plain leaves the horizontal directions and yaw
loose, and a cluttered scene pins everything down.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from icpcov.icp import IcpConfig
from icpcov.scene_sim import SensorModel, empirical_icp_error_distribution, make_scene
from icpcov.se3 import Pose, exp_map

# fewer trials and points than the acceptance run keep this under a minute
TRIALS = 100
sensor = SensorModel(num_azimuth=360)
icp = IcpConfig(subsample_size=1024)

A = Pose.from_translation([0.0, 0.0, 1.5])
B = A @ exp_map([0.5, 0.0, 0.0, 0.0, 0.0, 0.02])

errors = {}
for arch in ("corridor", "plain", "structured"):
    scene = make_scene(arch, rng_seed=0)
    out = empirical_icp_error_distribution(scene, A, B, sensor, trials=TRIALS, icp_cfg=icp, rng_seed=1)
    errors[arch] = out.valid
    std = out.valid.std(axis=0)
    print(f"{arch:10s} failed {out.failed:3d}  std x,y,z [mm] {np.round(1e3 * std[:3], 2)}  yaw [mrad] {1e3 * std[5]:.2f}")

# horizontal translation errors, one panel per scene, same axes
lim = max(np.abs(e[:, :2]).max() for e in errors.values())
fig, axes = plt.subplots(1, 3, figsize=(12, 4), sharex=True, sharey=True)
for ax, (arch, e) in zip(axes, errors.items()):
    ax.plot(e[:, 0], e[:, 1], ".", ms=3)
    ax.set_title(arch)
    ax.set_xlabel("x error [m]")
    ax.set_xlim(-lim, lim)
    ax.set_ylim(-lim, lim)
    ax.set_aspect("equal")
axes[0].set_ylabel("y error [m]")
fig.tight_layout()
fig.savefig("scene_anisotropy.png", dpi=100)
print("wrote scene_anisotropy.png")
