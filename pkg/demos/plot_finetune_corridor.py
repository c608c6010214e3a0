"""
Fine-tuning on a new environment
================================

A model that has only seen plains and cluttered scenes is unsure about
corridors. MC dropout exposes that as epistemic covariance; a few epochs on
corridor data shrink it.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from icpcov.bayes import McConfig
from icpcov.dataset import assign_split, build_dataset, merge_manifests
from icpcov.evaluation import epistemic_traces, evaluate_samples
from icpcov.icp import IcpConfig
from icpcov.network import NetworkConfig
from icpcov.scene_sim import synthetic_sequence
from icpcov.training import TrainConfig, finetune, label_scale, mean_nll, train

SCANS, EPOCHS = 8, 5
icp = IcpConfig(subsample_size=256)


def dataset(archs, seeds):
    parts = []
    for arch in archs:
        for k in seeds:
            _, seq = synthetic_sequence(arch, SCANS, rng_seed=100 * k + len(arch))
            parts.append(build_dataset(seq, icp, rng_seed=k, name=f"{arch}_{k}"))
    return merge_manifests(parts)


source = dataset(("plain", "structured"), range(3))
corridor = dataset(("corridor",), range(4))
assign_split(corridor, {"corridor_2": "val", "corridor_3": "test"})

cfg = NetworkConfig.desk(output_scale=label_scale(source.samples))
before = train(source, cfg, TrainConfig(epochs=EPOCHS, seed=0))
after = finetune(before, corridor, TrainConfig(epochs=EPOCHS, seed=1))

held_out = corridor.split_samples("test")
traces = {}
for name, ckpt in (("before", before), ("after", after)):
    recs = evaluate_samples(held_out, ckpt.params, cfg, McConfig(16, 0))
    traces[name] = epistemic_traces(recs)
    val = mean_nll(corridor.split_samples("val"), ckpt.params, cfg)
    print(f"{name:6s} mean epistemic trace {traces[name].mean():.3e}  corridor val NLL {val:.2f}")

# normalise by the pre-fine-tuning mean so both curves share one scale
norm = traces["before"].mean()
plt.figure(figsize=(6, 4))
for name, tr in traces.items():
    plt.plot(tr / norm, ".-", label=name)
plt.axhline(1.0, color="grey", lw=0.5)
plt.xlabel("held-out corridor pair")
plt.ylabel("epistemic trace / mean before")
plt.legend()
plt.tight_layout()
plt.savefig("finetune_corridor.png", dpi=100)
print("wrote finetune_corridor.png")
